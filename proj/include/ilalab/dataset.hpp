#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace ilalab {

struct ImageSet {
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<float> pixels;  // row-major, values in [0, 1]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(), image_size());
  }
};

struct Dataset {
  ImageSet train;
  ImageSet test;
  int num_classes = 10;
};

// Ten parametric shape classes on a noisy low-contrast background,
// quantized to 8-bit levels.
struct SyntheticOptions {
  std::uint64_t seed = 2024;
  std::size_t train_count = 6000;
  std::size_t test_count = 1500;
  std::size_t side = 16;
  double noise_std = 0.03;
  double contrast_min = 0.06;
  double contrast_max = 0.20;
  double jitter = 1.0;  // max centre offset in pixels
};

Dataset generate_synthetic(const SyntheticOptions& options);

// Throws ConfigError on out-of-range pixels or labels, or train/test overlap.
void validate_dataset(const Dataset& dataset);

// IDX files: unsigned-byte images (magic 0x00000803) and labels (0x00000801).
ImageSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
void save_idx(const ImageSet& set, const std::filesystem::path& images, const std::filesystem::path& labels);

// Reads/writes {train,test}-{images-idx3,labels-idx1}-ubyte in `dir`.
Dataset load_idx_dir(const std::filesystem::path& dir);
void save_idx_dir(const Dataset& dataset, const std::filesystem::path& dir);

}  // namespace ilalab

#include "ilalab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <unordered_set>

#include "ilalab/binary_io.hpp"
#include "ilalab/errors.hpp"
#include "ilalab/rng.hpp"

namespace ilalab {
namespace {

struct ShapeParams {
  double cx, cy, size, angle;
};

double seg_dist(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double t = std::clamp(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::hypot(dx, dy);
}

// Coverage test in shape-local coordinates.
bool inside(int cls, double x, double y, const ShapeParams& s) {
  const double c = std::cos(s.angle), sn = std::sin(s.angle);
  const double u = c * (x - s.cx) + sn * (y - s.cy);
  const double v = -sn * (x - s.cx) + c * (y - s.cy);
  const double a = s.size;
  switch (cls) {
    case 0: return std::abs(u) <= a * 0.8 && std::abs(v) <= a * 0.8;  // square
    case 1: return std::hypot(u, v) <= a * 0.9;                      // disk
    case 2: {                                                        // ring
      const double r = std::hypot(u, v);
      return r <= a && r >= a - 1.6;
    }
    case 3: return std::abs(u) <= a && std::abs(v) <= 1.1;  // horizontal bar
    case 4: return std::abs(v) <= a && std::abs(u) <= 1.1;  // vertical bar
    case 5: return (std::abs(u) <= a && std::abs(v) <= 0.9) || (std::abs(v) <= a && std::abs(u) <= 0.9);
    case 6: {  // X
      const double d = a * 0.8;
      return seg_dist(u, v, -d, -d, d, d) <= 0.9 || seg_dist(u, v, -d, d, d, -d) <= 0.9;
    }
    case 7: {  // triangle, apex up
      const double h = a * 1.6;
      const double top = -h / 2, bottom = h / 2;
      if (v < top || v > bottom) return false;
      const double half = (v - top) / h * a;
      return std::abs(u) <= half;
    }
    case 8:  // L
      return (u >= -a && u <= -a + 2.0 && std::abs(v) <= a) || (v <= a && v >= a - 2.0 && u >= -a && u <= a);
    case 9:  // two dots
      return std::hypot(u - a * 0.6, v) <= 1.6 || std::hypot(u + a * 0.6, v) <= 1.6;
    default: return false;
  }
}

void render(int cls, const SyntheticOptions& opt, Rng& rng, std::span<float> out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, opt.noise_std);
  const double side = static_cast<double>(opt.side);
  ShapeParams s{};
  s.cx = side / 2 + (unit(rng) * 2 - 1) * opt.jitter;
  s.cy = side / 2 + (unit(rng) * 2 - 1) * opt.jitter;
  s.size = 3.5 + unit(rng) * 2.0;
  s.angle = (unit(rng) * 2 - 1) * 0.25;
  const double background = 0.25 + unit(rng) * 0.3;
  const double contrast = opt.contrast_min + unit(rng) * (opt.contrast_max - opt.contrast_min);
  // mild illumination gradient
  const double gx = (unit(rng) * 2 - 1) * 0.006, gy = (unit(rng) * 2 - 1) * 0.006;
  constexpr int kSub = 4;
  for (std::size_t y = 0; y < opt.side; ++y) {
    for (std::size_t x = 0; x < opt.side; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          hits += inside(cls, x + (sx + 0.5) / kSub, y + (sy + 0.5) / kSub, s) ? 1 : 0;
        }
      }
      const double cover = static_cast<double>(hits) / (kSub * kSub);
      double v = background + gx * (x - side / 2) + gy * (y - side / 2) + contrast * cover + noise(rng);
      v = std::clamp(v, 0.0, 1.0);
      out[y * opt.side + x] = static_cast<float>(std::round(v * 255.0) / 255.0);
    }
  }
}

ImageSet make_split(const SyntheticOptions& opt, std::size_t count, std::uint64_t stream) {
  ImageSet set;
  set.height = set.width = opt.side;
  set.pixels.resize(count * opt.side * opt.side);
  set.labels.resize(count);
  Rng rng(derive_seed(opt.seed, {stream}));
  for (std::size_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(i % 10);
    set.labels[i] = cls;
    render(cls, opt, rng, std::span<float>(set.pixels).subspan(i * opt.side * opt.side, opt.side * opt.side));
  }
  // deterministic shuffle so classes interleave irregularly
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  ImageSet shuffled = set;
  const std::size_t n = opt.side * opt.side;
  for (std::size_t i = 0; i < count; ++i) {
    shuffled.labels[i] = set.labels[order[i]];
    std::copy_n(set.pixels.begin() + static_cast<std::ptrdiff_t>(order[i] * n), n,
                shuffled.pixels.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return shuffled;
}

std::uint64_t image_hash(std::span<const float> img) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (float v : img) {
    h ^= static_cast<std::uint64_t>(std::lround(v * 255.0f));
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_be32(ByteWriter& w, std::uint32_t v) {
  const std::uint8_t b[4] = {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
                             static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
  w.bytes(b, 4);
}

std::uint32_t read_be32(std::span<const std::uint8_t> d, std::size_t pos, const std::string& ctx) {
  if (pos + 4 > d.size()) throw IoError(ctx + ": truncated IDX header");
  return (std::uint32_t{d[pos]} << 24) | (std::uint32_t{d[pos + 1]} << 16) | (std::uint32_t{d[pos + 2]} << 8) |
         std::uint32_t{d[pos + 3]};
}

}  // namespace

Dataset generate_synthetic(const SyntheticOptions& options) {
  if (options.side < 8) throw ConfigError("synthetic image side must be at least 8");
  Dataset ds;
  ds.train = make_split(options, options.train_count, 1);
  ds.test = make_split(options, options.test_count, 2);
  return ds;
}

void validate_dataset(const Dataset& dataset) {
  for (const ImageSet* set : {&dataset.train, &dataset.test}) {
    if (set->pixels.size() != set->size() * set->image_size()) throw ConfigError("image buffer size mismatch");
    for (float v : set->pixels) {
      if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("pixel value outside [0,1]");
    }
    for (int y : set->labels) {
      if (y < 0 || y >= dataset.num_classes) throw ConfigError("label out of range");
    }
  }
  std::unordered_set<std::uint64_t> train_hashes;
  for (std::size_t i = 0; i < dataset.train.size(); ++i) train_hashes.insert(image_hash(dataset.train.image(i)));
  for (std::size_t i = 0; i < dataset.test.size(); ++i) {
    if (train_hashes.count(image_hash(dataset.test.image(i)))) {
      throw ConfigError("test image " + std::to_string(i) + " also appears in the training split");
    }
  }
}

ImageSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  const std::string ictx = images.string(), lctx = labels.string();
  if (read_be32(img, 0, ictx) != 0x00000803) throw IoError(ictx + ": not an unsigned-byte rank-3 IDX file");
  if (read_be32(lab, 0, lctx) != 0x00000801) throw IoError(lctx + ": not an unsigned-byte rank-1 IDX file");
  const std::size_t n = read_be32(img, 4, ictx);
  const std::size_t h = read_be32(img, 8, ictx);
  const std::size_t w = read_be32(img, 12, ictx);
  if (read_be32(lab, 4, lctx) != n) throw IoError("IDX image and label counts differ");
  if (img.size() != 16 + n * h * w) throw IoError(ictx + ": payload size mismatch");
  if (lab.size() != 8 + n) throw IoError(lctx + ": payload size mismatch");
  ImageSet set;
  set.height = h;
  set.width = w;
  set.pixels.resize(n * h * w);
  for (std::size_t i = 0; i < set.pixels.size(); ++i) set.pixels[i] = static_cast<float>(img[16 + i]) / 255.0f;
  set.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) set.labels[i] = lab[8 + i];
  return set;
}

void save_idx(const ImageSet& set, const std::filesystem::path& images, const std::filesystem::path& labels) {
  ByteWriter iw;
  write_be32(iw, 0x00000803);
  write_be32(iw, static_cast<std::uint32_t>(set.size()));
  write_be32(iw, static_cast<std::uint32_t>(set.height));
  write_be32(iw, static_cast<std::uint32_t>(set.width));
  for (float v : set.pixels) {
    const auto b = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    iw.bytes(&b, 1);
  }
  ByteWriter lw;
  write_be32(lw, 0x00000801);
  write_be32(lw, static_cast<std::uint32_t>(set.size()));
  for (int y : set.labels) {
    const auto b = static_cast<std::uint8_t>(y);
    lw.bytes(&b, 1);
  }
  write_file_atomic(images, iw.buffer());
  write_file_atomic(labels, lw.buffer());
}

Dataset load_idx_dir(const std::filesystem::path& dir) {
  Dataset ds;
  ds.train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  ds.test = load_idx(dir / "test-images-idx3-ubyte", dir / "test-labels-idx1-ubyte");
  int max_label = 0;
  for (int y : ds.train.labels) max_label = std::max(max_label, y);
  ds.num_classes = std::max(10, max_label + 1);
  return ds;
}

void save_idx_dir(const Dataset& dataset, const std::filesystem::path& dir) {
  save_idx(dataset.train, dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  save_idx(dataset.test, dir / "test-images-idx3-ubyte", dir / "test-labels-idx1-ubyte");
}

}  // namespace ilalab

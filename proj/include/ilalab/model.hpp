#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilalab/dataset.hpp"
#include "ilalab/tensor.hpp"

namespace ilalab {

enum class LayerKind { dense, conv2d, relu, maxpool2d, flatten };

const char* layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;   // dense: input features, conv2d: input channels
  std::size_t out = 0;  // dense: output features, conv2d: output channels
  std::size_t kernel = 0;
  std::size_t stride = 1;
  Padding padding = Padding::same;
  std::size_t window = 2;
  bool linbp = false;  // relu only: linear backward

  bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
};

struct Architecture {
  std::string id;
  Shape input_shape;  // per-sample
  std::vector<LayerSpec> layers;
};

// Registered zoo: mlp-2, mlp-3, cnn-small, cnn-wide.
std::vector<std::string> zoo_architectures();
const Architecture& architecture(std::string_view arch_id);
// Pinned per-architecture split depth (output of the middle ReLU).
std::size_t default_split(std::string_view arch_id);
// Pinned training epochs for the built-in dataset.
int default_epochs(std::string_view arch_id);
double default_lr(std::string_view arch_id);

struct TrainStats {
  double train_accuracy = std::numeric_limits<double>::quiet_NaN();
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::uint32_t epochs = 0;
};

class Model {
 public:
  static Model build(std::string_view arch_id, std::uint64_t seed);
  static Model load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::vector<std::uint8_t> serialize() const;
  static Model deserialize(std::span<const std::uint8_t> bytes, const std::string& context = "checkpoint");

  const std::string& arch_id() const { return arch_id_; }
  std::string id() const { return arch_id_ + "-s" + std::to_string(seed_); }
  std::uint64_t seed() const { return seed_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t input_size() const { return shape_size(input_shape_); }
  std::size_t num_classes() const;
  // Per-sample output shape of every layer.
  const std::vector<Shape>& layer_shapes() const { return layer_shapes_; }

  // x: [B, input_size] or [B, ...input_shape] -> logits [B, classes]
  Tensor forward(Tape& tape, const Tensor& x) const;
  // Runs layers [begin, end) on an activation laid out as [B, ...layer shape].
  Tensor forward_layers(Tape& tape, Tensor h, std::size_t begin, std::size_t end) const;

  std::size_t relu_count() const;
  // Copy sharing parameters, with the last n ReLU layers in linear backward mode.
  Model with_linear_relus(std::size_t n) const;
  // Deep copy of the parameters.
  Model clone() const;

  // Parameters of layer i (weight, bias); empty for parameter-free layers.
  std::vector<Tensor> params() const;
  std::uint64_t checksum() const;

  int predict(std::span<const float> image) const;
  std::vector<int> predict_batch(std::span<const float> images, std::size_t count) const;

  TrainStats stats;

 private:
  void init_shapes();

  std::string arch_id_;
  std::uint64_t seed_ = 0;
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Tensor> weights_;  // per layer, undefined when has_params() is false
  std::vector<Tensor> biases_;
  std::vector<Shape> layer_shapes_;
};

struct TrainOptions {
  int epochs = 10;
  double lr = 0.02;
  double momentum = 0.9;
  std::size_t batch_size = 32;
};

// SGD with momentum; returns a new model, the input is untouched.
// Throws TrainingDiverged when the loss becomes non-finite.
Model train(const Model& model, const Dataset& dataset, const TrainOptions& options);

double accuracy(const Model& model, const ImageSet& set);

struct LossAndFeature {
  float loss = 0.0f;
  std::vector<float> feature;
};

// f = h o g with g = layers [0, k) and h = layers [k, L).
class SplitModel {
 public:
  SplitModel(Model model, std::size_t k);

  const Model& model() const { return model_; }
  std::size_t split() const { return k_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t input_size() const { return model_.input_size(); }

  // g(x) flattened to [B, m].
  Tensor features(Tape& tape, const Tensor& x) const;
  // h applied to [B, m] features.
  Tensor head(Tape& tape, const Tensor& features) const;
  Tensor logits(Tape& tape, const Tensor& x) const { return head(tape, features(tape, x)); }

  LossAndFeature loss_and_feature(std::span<const float> x, int y) const;
  std::vector<float> feature(std::span<const float> x) const;
  float loss_from_feature(std::span<const float> feature, int y) const;

 private:
  Model model_;
  std::size_t k_;
  std::size_t feature_dim_;
  Shape feature_shape_;
};

}  // namespace ilalab

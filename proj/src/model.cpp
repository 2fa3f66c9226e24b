#include "ilalab/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <random>

#include "ilalab/binary_io.hpp"
#include "ilalab/config.hpp"
#include "ilalab/errors.hpp"
#include "ilalab/rng.hpp"

namespace ilalab {

namespace detail {
extern const char* const kZooRegistry;
}

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

LayerSpec dense(std::size_t in, std::size_t out) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.in = in;
  l.out = out;
  return l;
}

LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.in = in;
  l.out = out;
  l.kernel = kernel;
  l.stride = stride;
  l.padding = Padding::same;
  return l;
}

LayerSpec simple(LayerKind kind) {
  LayerSpec l;
  l.kind = kind;
  return l;
}

const std::vector<Architecture>& registry() {
  static const std::vector<Architecture> archs = [] {
    const auto relu = simple(LayerKind::relu);
    const auto pool = simple(LayerKind::maxpool2d);
    const auto flat = simple(LayerKind::flatten);
    std::vector<Architecture> a;
    a.push_back({"mlp-2", {256}, {dense(256, 128), relu, dense(128, 10)}});
    a.push_back({"mlp-3", {256}, {dense(256, 192), relu, dense(192, 96), relu, dense(96, 10)}});
    a.push_back({"cnn-small",
                 {1, 16, 16},
                 {conv(1, 8, 3), relu, pool, conv(8, 16, 3), relu, pool, flat, dense(256, 64), relu, dense(64, 10)}});
    a.push_back({"cnn-wide",
                 {1, 16, 16},
                 {conv(1, 12, 3), relu, conv(12, 24, 3, 2), relu, conv(24, 32, 3, 2), relu, flat, dense(512, 64),
                  relu, dense(64, 10)}});
    return a;
  }();
  return archs;
}

const KeyValueConfig& split_registry() {
  static const KeyValueConfig cfg = KeyValueConfig::parse(detail::kZooRegistry, "zoo_registry.cfg");
  return cfg;
}

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = static_cast<float>(dist(rng));
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

std::vector<std::string> zoo_architectures() {
  std::vector<std::string> ids;
  for (const auto& a : registry()) ids.push_back(a.id);
  return ids;
}

const Architecture& architecture(std::string_view arch_id) {
  for (const auto& a : registry()) {
    if (a.id == arch_id) return a;
  }
  std::string known;
  for (const auto& a : registry()) known += (known.empty() ? "" : ", ") + a.id;
  throw ConfigError("unknown architecture '" + std::string(arch_id) + "' (known: " + known + ")");
}

std::size_t default_split(std::string_view arch_id) {
  architecture(arch_id);
  const auto key = std::string(arch_id) + ".split";
  const auto k = split_registry().get_int(key, -1);
  if (k <= 0) throw ConfigError("zoo registry has no split depth for '" + std::string(arch_id) + "'");
  return static_cast<std::size_t>(k);
}

int default_epochs(std::string_view arch_id) {
  architecture(arch_id);
  const auto e = split_registry().get_int(std::string(arch_id) + ".epochs", -1);
  if (e < 0) throw ConfigError("zoo registry has no epoch count for '" + std::string(arch_id) + "'");
  return static_cast<int>(e);
}

double default_lr(std::string_view arch_id) {
  architecture(arch_id);
  const auto lr = split_registry().get_double(std::string(arch_id) + ".lr", -1.0);
  if (!(lr > 0.0)) throw ConfigError("zoo registry has no learning rate for '" + std::string(arch_id) + "'");
  return lr;
}

// ------------------------------------------------------------------ Model

void Model::init_shapes() {
  layer_shapes_.clear();
  Shape s = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const auto where = arch_id_ + " layer " + std::to_string(i);
    switch (l.kind) {
      case LayerKind::dense:
        if (shape_size(s) != l.in) throw ShapeError(where + ": dense expects " + std::to_string(l.in) + " inputs");
        s = {l.out};
        break;
      case LayerKind::conv2d: {
        if (s.size() != 3 || s[0] != l.in) throw ShapeError(where + ": conv2d channel mismatch");
        const auto od = [&](std::size_t d) {
          return l.padding == Padding::same ? (d + l.stride - 1) / l.stride : (d - l.kernel) / l.stride + 1;
        };
        s = {l.out, od(s[1]), od(s[2])};
        break;
      }
      case LayerKind::relu:
        break;
      case LayerKind::maxpool2d:
        if (s.size() != 3 || s[1] % l.window || s[2] % l.window) throw ShapeError(where + ": bad pooling input");
        s = {s[0], s[1] / l.window, s[2] / l.window};
        break;
      case LayerKind::flatten:
        s = {shape_size(s)};
        break;
    }
    layer_shapes_.push_back(s);
  }
  if (layer_shapes_.empty() || layer_shapes_.back().size() != 1) {
    throw ShapeError(arch_id_ + ": network must end in a vector of logits");
  }
}

Model Model::build(std::string_view arch_id, std::uint64_t seed) {
  const auto& arch = architecture(arch_id);
  Model m;
  m.arch_id_ = arch.id;
  m.seed_ = seed;
  m.input_shape_ = arch.input_shape;
  m.layers_ = arch.layers;
  m.init_shapes();
  m.weights_.resize(m.layers_.size());
  m.biases_.resize(m.layers_.size());
  for (std::size_t i = 0; i < m.layers_.size(); ++i) {
    const auto& l = m.layers_[i];
    if (!l.has_params()) continue;
    Rng rng(derive_seed(seed, {i}));
    if (l.kind == LayerKind::dense) {
      m.weights_[i] = he_normal({l.in, l.out}, l.in, rng);
    } else {
      m.weights_[i] = he_normal({l.out, l.in, l.kernel, l.kernel}, l.in * l.kernel * l.kernel, rng);
    }
    m.biases_[i] = Tensor::zeros({l.out});
  }
  return m;
}

std::size_t Model::num_classes() const { return layer_shapes_.back()[0]; }

Tensor Model::forward(Tape& tape, const Tensor& x) const {
  if (x.rank() < 1 || x.size() != x.shape()[0] * input_size()) {
    throw ShapeError("model " + id() + " expects inputs of " + std::to_string(input_size()) + " values, got " +
                     shape_str(x.shape()));
  }
  Shape s{x.shape()[0]};
  s.insert(s.end(), input_shape_.begin(), input_shape_.end());
  Tensor h = x.shape() == s ? x : tape.reshape(x, s);
  return forward_layers(tape, std::move(h), 0, layers_.size());
}

Tensor Model::forward_layers(Tape& tape, Tensor h, std::size_t begin, std::size_t end) const {
  for (std::size_t i = begin; i < end; ++i) {
    const auto& l = layers_[i];
    switch (l.kind) {
      case LayerKind::dense:
        h = tape.add(tape.matmul(h, weights_[i]), biases_[i]);
        break;
      case LayerKind::conv2d:
        h = tape.conv2d(h, weights_[i], biases_[i], Conv2dParams{l.stride, l.padding});
        break;
      case LayerKind::relu:
        h = tape.relu(h, l.linbp ? ReluMode::linear : ReluMode::standard);
        break;
      case LayerKind::maxpool2d:
        h = tape.maxpool2d(h, l.window);
        break;
      case LayerKind::flatten:
        h = tape.flatten(h);
        break;
    }
  }
  return h;
}

std::size_t Model::relu_count() const {
  return static_cast<std::size_t>(
      std::count_if(layers_.begin(), layers_.end(), [](const LayerSpec& l) { return l.kind == LayerKind::relu; }));
}

Model Model::with_linear_relus(std::size_t n) const {
  if (n > relu_count()) {
    throw ConfigError("cannot linearize " + std::to_string(n) + " ReLUs; " + id() + " has " +
                      std::to_string(relu_count()));
  }
  Model m = *this;
  for (auto& l : m.layers_) l.linbp = false;
  std::size_t left = n;
  for (auto it = m.layers_.rbegin(); it != m.layers_.rend() && left > 0; ++it) {
    if (it->kind == LayerKind::relu) {
      it->linbp = true;
      --left;
    }
  }
  return m;
}

Model Model::clone() const {
  Model m = *this;
  for (auto& w : m.weights_) {
    if (w.defined()) w = w.detach();
  }
  for (auto& b : m.biases_) {
    if (b.defined()) b = b.detach();
  }
  return m;
}

std::vector<Tensor> Model::params() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!layers_[i].has_params()) continue;
    out.push_back(weights_[i]);
    out.push_back(biases_[i]);
  }
  return out;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = fnv1a64(arch_id_);
  for (const auto& p : params()) {
    const auto d = p.data();
    h = fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(d.data()), d.size() * 4), h);
  }
  return h;
}

int Model::predict(std::span<const float> image) const {
  return predict_batch(image, 1).front();
}

std::vector<int> Model::predict_batch(std::span<const float> images, std::size_t count) const {
  if (images.size() != count * input_size()) throw ShapeError("predict_batch: image buffer size mismatch");
  std::vector<int> out(count);
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < count; start += kChunk) {
    const std::size_t n = std::min(kChunk, count - start);
    Tape tape;
    auto x = Tensor::from({n, input_size()}, images.subspan(start * input_size(), n * input_size()));
    const auto logits = forward(tape, x);
    const std::size_t C = num_classes();
    const auto z = logits.data();
    for (std::size_t b = 0; b < n; ++b) {
      out[start + b] = static_cast<int>(std::max_element(z.begin() + static_cast<std::ptrdiff_t>(b * C),
                                                         z.begin() + static_cast<std::ptrdiff_t>((b + 1) * C)) -
                                        (z.begin() + static_cast<std::ptrdiff_t>(b * C)));
    }
  }
  return out;
}

// ------------------------------------------------------------ checkpoints

std::vector<std::uint8_t> Model::serialize() const {
  ByteWriter w;
  w.magic("ILAF");
  w.u32(kCheckpointVersion);
  w.str(arch_id_);
  w.u64(seed_);
  w.f64(stats.train_accuracy);
  w.f64(stats.test_accuracy);
  w.u32(stats.epochs);
  w.u32(static_cast<std::uint32_t>(input_shape_.size()));
  for (auto d : input_shape_) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(layers_.size()));
  for (const auto& l : layers_) {
    w.u32(static_cast<std::uint32_t>(l.kind));
    w.u32(static_cast<std::uint32_t>(l.in));
    w.u32(static_cast<std::uint32_t>(l.out));
    w.u32(static_cast<std::uint32_t>(l.kernel));
    w.u32(static_cast<std::uint32_t>(l.stride));
    w.u32(static_cast<std::uint32_t>(l.padding));
    w.u32(static_cast<std::uint32_t>(l.window));
    w.u32(l.linbp ? 1u : 0u);
  }
  for (const auto& p : params()) w.f32s(p.data());
  w.u32(crc32(w.buffer()));
  return std::move(w.buffer());
}

Model Model::deserialize(std::span<const std::uint8_t> bytes, const std::string& context) {
  if (bytes.size() < 8) throw IoError(context + ": truncated checkpoint");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4), context);
  if (tail.u32() != crc32(body)) throw IoError(context + ": CRC32 mismatch (corrupted checkpoint)");
  ByteReader r(body, context);
  r.expect_magic("ILAF");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError(context + ": unsupported checkpoint version " + std::to_string(version));
  }
  Model m;
  m.arch_id_ = r.str();
  m.seed_ = r.u64();
  m.stats.train_accuracy = r.f64();
  m.stats.test_accuracy = r.f64();
  m.stats.epochs = r.u32();
  const auto rank = r.u32();
  for (std::uint32_t i = 0; i < rank; ++i) m.input_shape_.push_back(r.u32());
  const auto nlayers = r.u32();
  for (std::uint32_t i = 0; i < nlayers; ++i) {
    LayerSpec l;
    const auto kind = r.u32();
    if (kind > static_cast<std::uint32_t>(LayerKind::flatten)) throw IoError(context + ": bad layer kind");
    l.kind = static_cast<LayerKind>(kind);
    l.in = r.u32();
    l.out = r.u32();
    l.kernel = r.u32();
    l.stride = r.u32();
    l.padding = static_cast<Padding>(r.u32());
    l.window = r.u32();
    l.linbp = r.u32() != 0;
    m.layers_.push_back(l);
  }
  m.init_shapes();
  m.weights_.resize(m.layers_.size());
  m.biases_.resize(m.layers_.size());
  for (std::size_t i = 0; i < m.layers_.size(); ++i) {
    const auto& l = m.layers_[i];
    if (!l.has_params()) continue;
    Shape ws = l.kind == LayerKind::dense ? Shape{l.in, l.out} : Shape{l.out, l.in, l.kernel, l.kernel};
    const auto wn = shape_size(ws);
    m.weights_[i] = Tensor::from(std::move(ws), r.f32s(wn));
    m.biases_[i] = Tensor::from({l.out}, r.f32s(l.out));
  }
  if (r.remaining() != 0) throw IoError(context + ": trailing bytes in checkpoint");
  return m;
}

void Model::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

Model Model::load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return deserialize(bytes, path.string());
}

// --------------------------------------------------------------- training

double accuracy(const Model& model, const ImageSet& set) {
  if (set.size() == 0) return 0.0;
  const auto pred = model.predict_batch(set.pixels, set.size());
  std::size_t hit = 0;
  for (std::size_t i = 0; i < set.size(); ++i) hit += pred[i] == set.labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(set.size());
}

Model train(const Model& model, const Dataset& dataset, const TrainOptions& options) {
  if (dataset.train.size() == 0) throw ConfigError("training set is empty");
  if (!(options.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (options.batch_size == 0) throw ConfigError("batch size must be positive");
  if (dataset.train.image_size() != model.input_size()) {
    throw ShapeError("dataset images have " + std::to_string(dataset.train.image_size()) + " pixels, model " +
                     model.id() + " expects " + std::to_string(model.input_size()));
  }
  Model m = model.clone();
  auto params = m.params();
  std::vector<std::vector<float>> velocity;
  for (auto& p : params) {
    p.set_requires_grad(true);
    velocity.emplace_back(p.size(), 0.0f);
  }
  const std::size_t n = dataset.train.size();
  const std::size_t dim = model.input_size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(model.seed(), {0x7472616eULL}));
  std::vector<float> batch;
  std::vector<int> labels;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += options.batch_size) {
      const std::size_t bs = std::min(options.batch_size, n - start);
      batch.resize(bs * dim);
      labels.resize(bs);
      for (std::size_t b = 0; b < bs; ++b) {
        const auto img = dataset.train.image(order[start + b]);
        std::copy(img.begin(), img.end(), batch.begin() + static_cast<std::ptrdiff_t>(b * dim));
        labels[b] = dataset.train.labels[order[start + b]];
      }
      try {
        Tape tape;
        const auto x = Tensor::from({bs, dim}, batch);
        const auto loss = tape.softmax_ce(m.forward(tape, x), labels);
        tape.backward(loss);
      } catch (const NonFiniteError& e) {
        for (auto& p : params) p.set_requires_grad(false);
        throw TrainingDiverged("training " + model.id() + " diverged in epoch " + std::to_string(epoch) + ": " +
                                   e.what(),
                               epoch);
      }
      for (std::size_t j = 0; j < params.size(); ++j) {
        auto data = params[j].mutable_data();
        const auto grad = params[j].grad();
        auto& vel = velocity[j];
        for (std::size_t q = 0; q < data.size(); ++q) {
          vel[q] = static_cast<float>(options.momentum * vel[q] + grad[q]);
          data[q] -= static_cast<float>(options.lr * vel[q]);
        }
        params[j].zero_grad();
        for (float v : data) {
          if (!std::isfinite(v)) {
            for (auto& p : params) p.set_requires_grad(false);
            throw TrainingDiverged("training " + model.id() + " produced non-finite weights in epoch " +
                                       std::to_string(epoch),
                                   epoch);
          }
        }
      }
    }
  }
  for (auto& p : params) p.set_requires_grad(false);
  m.stats.epochs = static_cast<std::uint32_t>(std::max(options.epochs, 0));
  m.stats.train_accuracy = accuracy(m, dataset.train);
  m.stats.test_accuracy = accuracy(m, dataset.test);
  return m;
}

// ------------------------------------------------------------- SplitModel

SplitModel::SplitModel(Model model, std::size_t k) : model_(std::move(model)), k_(k) {
  if (k_ == 0 || k_ >= model_.layers().size()) {
    throw ConfigError("split depth " + std::to_string(k_) + " out of range (0, " +
                      std::to_string(model_.layers().size()) + ") for " + model_.id());
  }
  feature_shape_ = model_.layer_shapes()[k_ - 1];
  feature_dim_ = shape_size(feature_shape_);
}

Tensor SplitModel::features(Tape& tape, const Tensor& x) const {
  if (x.rank() < 1 || x.size() != x.shape()[0] * model_.input_size()) {
    throw ShapeError("split model expects inputs of " + std::to_string(model_.input_size()) + " values");
  }
  Shape s{x.shape()[0]};
  s.insert(s.end(), model_.input_shape().begin(), model_.input_shape().end());
  Tensor h = x.shape() == s ? x : tape.reshape(x, s);
  h = model_.forward_layers(tape, std::move(h), 0, k_);
  return h.rank() == 2 ? h : tape.flatten(h);
}

Tensor SplitModel::head(Tape& tape, const Tensor& features) const {
  if (features.rank() != 2 || features.shape()[1] != feature_dim_) {
    throw ShapeError("head expects [B, " + std::to_string(feature_dim_) + "] features, got " +
                     shape_str(features.shape()));
  }
  Shape s{features.shape()[0]};
  s.insert(s.end(), feature_shape_.begin(), feature_shape_.end());
  Tensor h = features.shape() == s ? features : tape.reshape(features, s);
  return model_.forward_layers(tape, std::move(h), k_, model_.layers().size());
}

LossAndFeature SplitModel::loss_and_feature(std::span<const float> x, int y) const {
  Tape tape;
  const auto input = Tensor::from({1, model_.input_size()}, x);
  const auto feat = features(tape, input);
  const int labels[1] = {y};
  const auto loss = tape.softmax_ce(head(tape, feat), labels);
  return {loss.item(), std::vector<float>(feat.data().begin(), feat.data().end())};
}

std::vector<float> SplitModel::feature(std::span<const float> x) const {
  Tape tape;
  const auto feat = features(tape, Tensor::from({1, model_.input_size()}, x));
  return {feat.data().begin(), feat.data().end()};
}

float SplitModel::loss_from_feature(std::span<const float> feature, int y) const {
  Tape tape;
  const int labels[1] = {y};
  return tape.softmax_ce(head(tape, Tensor::from({1, feature_dim_}, feature)), labels).item();
}

}  // namespace ilalab

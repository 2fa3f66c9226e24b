#include "ilalab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <variant>

#include "ilalab/errors.hpp"

namespace ilalab {

struct TensorStorage {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::uint64_t tape = 0;  // 0: leaf
  std::size_t node = 0;
};

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

void check_finite(std::span<const float> values, const char* where) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("non-finite value in ") + where);
    }
  }
}

std::shared_ptr<TensorStorage> make_storage(Shape shape) {
  auto s = std::make_shared<TensorStorage>();
  s->data.assign(shape_size(shape), 0.0f);
  s->shape = std::move(shape);
  return s;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

struct PoolSaved {
  std::size_t window = 2;
  std::vector<std::uint32_t> argmax;
};

struct SoftmaxSaved {
  std::vector<double> probs;
  std::vector<int> labels;
};

std::size_t conv_out_dim(std::size_t in, std::size_t k, const Conv2dParams& p) {
  if (p.padding == Padding::valid) return (in - k) / p.stride + 1;
  return (in + p.stride - 1) / p.stride;
}

std::size_t conv_pad(std::size_t in, std::size_t out, std::size_t k, const Conv2dParams& p) {
  if (p.padding == Padding::valid) return 0;
  const std::ptrdiff_t total =
      static_cast<std::ptrdiff_t>((out - 1) * p.stride + k) - static_cast<std::ptrdiff_t>(in);
  return total > 0 ? static_cast<std::size_t>(total / 2) : 0;
}

// Output columns [lo, hi) whose input column o*stride + kx - pad lies in [0, in).
std::pair<std::size_t, std::size_t> valid_range(std::size_t in, std::size_t out, std::size_t kx,
                                                std::size_t pad, std::size_t stride) {
  const auto off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = 0;
  if (off < 0) lo = (-off + s - 1) / s;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(in) - 1 - off);
  hi = hi < 0 ? 0 : hi / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::maxpool2d: return "maxpool2d";
    case OpKind::flatten: return "flatten";
    case OpKind::reshape: return "reshape";
    case OpKind::softmax_ce: return "softmax_ce";
  }
  return "?";
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto s = make_storage(std::move(shape));
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  check_finite(values, "tensor creation");
  auto s = std::make_shared<TensorStorage>();
  s->shape = std::move(shape);
  s->data = std::move(values);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::from(Shape shape, std::span<const float> values, bool requires_grad) {
  return from(std::move(shape), std::vector<float>(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from(Shape{}, std::vector<float>{value}, requires_grad);
}

const Shape& Tensor::shape() const { return s_->shape; }
std::size_t Tensor::size() const { return s_->data.size(); }
std::span<const float> Tensor::data() const { return s_->data; }
std::span<float> Tensor::mutable_data() { return s_->data; }

float Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return s_->data[0];
}

bool Tensor::requires_grad() const { return s_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { s_->requires_grad = flag; }
bool Tensor::has_grad() const { return !s_->grad.empty(); }
std::span<const float> Tensor::grad() const { return s_->grad; }
void Tensor::zero_grad() { s_->grad.clear(); }

std::optional<std::size_t> Tensor::node_id() const {
  if (s_->tape == 0) return std::nullopt;
  return s_->node;
}

Tensor Tensor::detach() const {
  auto s = std::make_shared<TensorStorage>();
  s->shape = s_->shape;
  s->data = s_->data;
  return Tensor(std::move(s));
}

// ------------------------------------------------------------------ Tape

struct Tape::Node {
  OpKind kind;
  std::vector<Tensor> inputs;
  std::shared_ptr<TensorStorage> out;
  ReluMode relu_mode = ReluMode::standard;
  std::variant<std::monostate, Conv2dParams, PoolSaved, SoftmaxSaved> saved;
};

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;
Tape::~Tape() = default;

std::size_t Tape::size() const noexcept { return nodes_.size(); }

OpKind Tape::kind(std::size_t node) const {
  if (node >= nodes_.size()) throw GradError("node index out of range");
  return nodes_[node].kind;
}

bool Tape::needs_grad(const Tensor& t) const {
  if (!t.defined()) return false;
  return t.s_->tape == id_ || (t.s_->tape == 0 && t.s_->requires_grad);
}

Tensor Tape::record(Node node, std::shared_ptr<TensorStorage> out) {
  check_finite(out->data, op_name(node.kind));
  if (consumed_) {
    throw GradError("tape already consumed by backward; create a new tape");
  }
  const bool track = std::any_of(node.inputs.begin(), node.inputs.end(),
                                 [this](const Tensor& t) { return needs_grad(t); });
  if (track) {
    out->requires_grad = true;
    out->tape = id_;
    out->node = nodes_.size();
    node.out = out;
    nodes_.push_back(std::move(node));
  }
  return Tensor(std::move(out));
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
          "matmul shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  auto out = make_storage({M, N});
  const float* A = a.data().data();
  const float* B = b.data().data();
  std::vector<double> acc(N);
  for (std::size_t m = 0; m < M; ++m) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      const double av = A[m * K + k];
      const float* brow = B + k * N;
      for (std::size_t n = 0; n < N; ++n) acc[n] += av * brow[n];
    }
    for (std::size_t n = 0; n < N; ++n) out->data[m * N + n] = static_cast<float>(acc[n]);
  }
  return record(Node{OpKind::matmul, {a, b}, nullptr, ReluMode::standard, {}}, std::move(out));
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool bias = !same && b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.shape()[0];
  require(same || bias, "add shape mismatch " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  auto out = make_storage(a.shape());
  const auto ad = a.data();
  const auto bd = b.data();
  const std::size_t cols = bd.size();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    out->data[i] = ad[i] + bd[same ? i : i % cols];
  }
  return record(Node{OpKind::add, {a, b}, nullptr, ReluMode::standard, {}}, std::move(out));
}

Tensor Tape::conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dParams p) {
  require(x.rank() == 4 && weight.rank() == 4, "conv2d expects [B,C,H,W] input and [O,C,K,K] weight");
  require(weight.shape()[1] == x.shape()[1], "conv2d channel mismatch " + shape_str(x.shape()) +
                                                 " vs weight " + shape_str(weight.shape()));
  require(weight.shape()[2] == weight.shape()[3], "conv2d kernel must be square");
  require(p.stride == 1 || p.stride == 2, "conv2d stride must be 1 or 2");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t O = weight.shape()[0], K = weight.shape()[2];
  require(p.padding == Padding::same || (H >= K && W >= K), "conv2d kernel larger than input");
  if (bias.defined()) require(bias.rank() == 1 && bias.shape()[0] == O, "conv2d bias shape mismatch");
  const std::size_t OH = conv_out_dim(H, K, p), OW = conv_out_dim(W, K, p);
  const std::size_t pt = conv_pad(H, OH, K, p), pl = conv_pad(W, OW, K, p);
  auto out = make_storage({B, O, OH, OW});
  const float* X = x.data().data();
  const float* Wt = weight.data().data();
  std::vector<double> acc(OH * OW);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < O; ++o) {
      std::fill(acc.begin(), acc.end(), bias.defined() ? static_cast<double>(bias.data()[o]) : 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* xp = X + ((b * C + c) * H) * W;
        for (std::size_t ky = 0; ky < K; ++ky) {
          const auto [oy0, oy1] = valid_range(H, OH, ky, pt, p.stride);
          for (std::size_t kx = 0; kx < K; ++kx) {
            const auto [ox0, ox1] = valid_range(W, OW, kx, pl, p.stride);
            const double wv = Wt[((o * C + c) * K + ky) * K + kx];
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const float* xrow = xp + (oy * p.stride + ky - pt) * W;
              const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pl);
              double* arow = acc.data() + oy * OW;
              if (p.stride == 1) {
                for (std::size_t ox = ox0; ox < ox1; ++ox) arow[ox] += wv * xrow[static_cast<std::ptrdiff_t>(ox) + off];
              } else {
                for (std::size_t ox = ox0; ox < ox1; ++ox) arow[ox] += wv * xrow[static_cast<std::ptrdiff_t>(2 * ox) + off];
              }
            }
          }
        }
      }
      float* dst = out->data.data() + ((b * O + o) * OH) * OW;
      for (std::size_t i = 0; i < OH * OW; ++i) dst[i] = static_cast<float>(acc[i]);
    }
  }
  Node node{OpKind::conv2d, {x, weight, bias}, nullptr, ReluMode::standard, {}};
  node.saved = p;
  return record(std::move(node), std::move(out));
}

Tensor Tape::relu(const Tensor& x, ReluMode mode) {
  auto out = make_storage(x.shape());
  const auto xd = x.data();
  // NaN compares false and propagates to the finiteness check.
  for (std::size_t i = 0; i < xd.size(); ++i) out->data[i] = xd[i] < 0.0f ? 0.0f : xd[i];
  Node node{OpKind::relu, {x}, nullptr, ReluMode::standard, {}};
  node.relu_mode = mode;
  return record(std::move(node), std::move(out));
}

Tensor Tape::maxpool2d(const Tensor& x, std::size_t window) {
  require(x.rank() == 4, "maxpool2d expects [B,C,H,W]");
  require(window > 0 && x.shape()[2] % window == 0 && x.shape()[3] % window == 0,
          "maxpool2d window must divide spatial dims of " + shape_str(x.shape()));
  check_finite(x.data(), "maxpool2d input");
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t OH = H / window, OW = W / window;
  auto out = make_storage({B, C, OH, OW});
  PoolSaved saved{window, std::vector<std::uint32_t>(out->data.size())};
  const auto xd = x.data();
  std::size_t oi = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t base = bc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox, ++oi) {
        std::size_t best = base + (oy * window) * W + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = base + (oy * window + dy) * W + ox * window + dx;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        out->data[oi] = xd[best];
        saved.argmax[oi] = static_cast<std::uint32_t>(best);
      }
    }
  }
  Node node{OpKind::maxpool2d, {x}, nullptr, ReluMode::standard, {}};
  node.saved = std::move(saved);
  return record(std::move(node), std::move(out));
}

Tensor Tape::flatten(const Tensor& x) {
  require(x.rank() >= 1, "flatten needs a leading batch dimension");
  const std::size_t batch = x.shape()[0];
  const std::size_t rest = batch == 0 ? 0 : x.size() / batch;
  auto out = make_storage({batch, rest});
  std::copy(x.data().begin(), x.data().end(), out->data.begin());
  return record(Node{OpKind::flatten, {x}, nullptr, ReluMode::standard, {}}, std::move(out));
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
  require(shape_size(shape) == x.size(),
          "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes size");
  auto out = make_storage(std::move(shape));
  std::copy(x.data().begin(), x.data().end(), out->data.begin());
  return record(Node{OpKind::reshape, {x}, nullptr, ReluMode::standard, {}}, std::move(out));
}

Tensor Tape::softmax_ce(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2, "softmax_ce expects [B, C] logits");
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  require(labels.size() == B, "softmax_ce label count does not match batch");
  require(B > 0 && C > 0, "softmax_ce on empty logits");
  check_finite(logits.data(), "softmax_ce logits");
  SoftmaxSaved saved{std::vector<double>(B * C), std::vector<int>(labels.begin(), labels.end())};
  const auto z = logits.data();
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    require(y >= 0 && static_cast<std::size_t>(y) < C, "softmax_ce label out of range");
    const float* row = z.data() + b * C;
    const double zmax = *std::max_element(row, row + C);
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(row[c] - zmax);
    const double lse = zmax + std::log(sum);
    for (std::size_t c = 0; c < C; ++c) saved.probs[b * C + c] = std::exp(row[c] - lse);
    total += lse - row[y];
  }
  auto out = make_storage({});
  out->data[0] = static_cast<float>(total / static_cast<double>(B));
  Node node{OpKind::softmax_ce, {logits}, nullptr, ReluMode::standard, {}};
  node.saved = std::move(saved);
  return record(std::move(node), std::move(out));
}

void Tape::set_relu_mode(std::size_t node, ReluMode mode) {
  if (node >= nodes_.size()) throw GradError("node index out of range");
  if (nodes_[node].kind != OpKind::relu) {
    throw GradError(std::string("backward mode flag applies to relu nodes only, got ") +
                    op_name(nodes_[node].kind));
  }
  nodes_[node].relu_mode = mode;
}

void Tape::backward(const Tensor& loss) {
  if (loss.defined() && loss.size() != 1) {
    throw ShapeError("backward(loss) needs a single-element tensor, got " + shape_str(loss.shape()));
  }
  const float one = 1.0f;
  run_backward(loss, std::span<const float>(&one, 1));
}

void Tape::backward(const Tensor& output, std::span<const float> upstream) {
  run_backward(output, upstream);
}

void Tape::run_backward(const Tensor& output, std::span<const float> upstream) {
  if (!output.defined()) throw GradError("backward on undefined tensor");
  if (consumed_) throw GradError("double backward is unsupported: tape already consumed");
  if (output.s_->tape != id_) throw GradError("backward on a tensor that is not recorded on this tape");
  if (upstream.size() != output.size()) throw ShapeError("upstream gradient size mismatch");
  check_finite(upstream, "upstream gradient");

  const std::size_t root = output.s_->node;
  std::vector<std::vector<float>> grads(root + 1);
  grads[root].assign(upstream.begin(), upstream.end());

  auto sink = [&](const Tensor& t) -> float* {
    if (!needs_grad(t)) return nullptr;
    auto& s = *t.s_;
    if (s.tape == id_) {
      auto& g = grads[s.node];
      if (g.empty()) g.assign(s.data.size(), 0.0f);
      return g.data();
    }
    if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0f);
    return s.grad.data();
  };

  for (std::size_t i = root + 1; i-- > 0;) {
    if (grads[i].empty()) continue;
    Node& node = nodes_[i];
    const float* g = grads[i].data();
    switch (node.kind) {
      case OpKind::matmul: {
        const Tensor& a = node.inputs[0];
        const Tensor& b = node.inputs[1];
        const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
        const float* A = a.data().data();
        const float* Bm = b.data().data();
        if (float* ga = sink(a)) {
          for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t k = 0; k < K; ++k) {
              double acc = 0.0;
              const float* brow = Bm + k * N;
              const float* grow = g + m * N;
              for (std::size_t n = 0; n < N; ++n) acc += static_cast<double>(grow[n]) * brow[n];
              ga[m * K + k] += static_cast<float>(acc);
            }
          }
        }
        if (float* gb = sink(b)) {
          std::vector<double> acc(N);
          for (std::size_t k = 0; k < K; ++k) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t m = 0; m < M; ++m) {
              const double av = A[m * K + k];
              const float* grow = g + m * N;
              for (std::size_t n = 0; n < N; ++n) acc[n] += av * grow[n];
            }
            for (std::size_t n = 0; n < N; ++n) gb[k * N + n] += static_cast<float>(acc[n]);
          }
        }
        break;
      }
      case OpKind::add: {
        const Tensor& a = node.inputs[0];
        const Tensor& b = node.inputs[1];
        const std::size_t n = a.size();
        if (float* ga = sink(a)) {
          for (std::size_t j = 0; j < n; ++j) ga[j] += g[j];
        }
        if (float* gb = sink(b)) {
          if (b.shape() == a.shape()) {
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[j];
          } else {
            const std::size_t cols = b.size();
            std::vector<double> acc(cols, 0.0);
            for (std::size_t j = 0; j < n; ++j) acc[j % cols] += g[j];
            for (std::size_t c = 0; c < cols; ++c) gb[c] += static_cast<float>(acc[c]);
          }
        }
        break;
      }
      case OpKind::conv2d: {
        const Tensor& x = node.inputs[0];
        const Tensor& w = node.inputs[1];
        const Tensor& bias = node.inputs[2];
        const auto& p = std::get<Conv2dParams>(node.saved);
        const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
        const std::size_t O = w.shape()[0], K = w.shape()[2];
        const std::size_t OH = node.out->shape[2], OW = node.out->shape[3];
        const std::size_t pt = conv_pad(H, OH, K, p), pl = conv_pad(W, OW, K, p);
        const float* X = x.data().data();
        const float* Wt = w.data().data();
        if (float* gbias = sink(bias)) {
          for (std::size_t o = 0; o < O; ++o) {
            double acc = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
              const float* gp = g + ((b * O + o) * OH) * OW;
              for (std::size_t j = 0; j < OH * OW; ++j) acc += gp[j];
            }
            gbias[o] += static_cast<float>(acc);
          }
        }
        if (float* gw = sink(w)) {
          for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t c = 0; c < C; ++c) {
              for (std::size_t ky = 0; ky < K; ++ky) {
                const auto [oy0, oy1] = valid_range(H, OH, ky, pt, p.stride);
                for (std::size_t kx = 0; kx < K; ++kx) {
                  const auto [ox0, ox1] = valid_range(W, OW, kx, pl, p.stride);
                  double acc = 0.0;
                  for (std::size_t b = 0; b < B; ++b) {
                    const float* xp = X + ((b * C + c) * H) * W;
                    const float* gp = g + ((b * O + o) * OH) * OW;
                    for (std::size_t oy = oy0; oy < oy1; ++oy) {
                      const float* xrow = xp + (oy * p.stride + ky - pt) * W;
                      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pl);
                      const float* grow = gp + oy * OW;
                      for (std::size_t ox = ox0; ox < ox1; ++ox) {
                        acc += static_cast<double>(grow[ox]) *
                               xrow[static_cast<std::ptrdiff_t>(ox * p.stride) + off];
                      }
                    }
                  }
                  gw[((o * C + c) * K + ky) * K + kx] += static_cast<float>(acc);
                }
              }
            }
          }
        }
        if (float* gx = sink(x)) {
          std::vector<double> acc(H * W);
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t c = 0; c < C; ++c) {
              std::fill(acc.begin(), acc.end(), 0.0);
              for (std::size_t o = 0; o < O; ++o) {
                const float* gp = g + ((b * O + o) * OH) * OW;
                for (std::size_t ky = 0; ky < K; ++ky) {
                  const auto [oy0, oy1] = valid_range(H, OH, ky, pt, p.stride);
                  for (std::size_t kx = 0; kx < K; ++kx) {
                    const auto [ox0, ox1] = valid_range(W, OW, kx, pl, p.stride);
                    const double wv = Wt[((o * C + c) * K + ky) * K + kx];
                    for (std::size_t oy = oy0; oy < oy1; ++oy) {
                      double* arow = acc.data() + (oy * p.stride + ky - pt) * W;
                      const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pl);
                      const float* grow = gp + oy * OW;
                      for (std::size_t ox = ox0; ox < ox1; ++ox) {
                        arow[static_cast<std::ptrdiff_t>(ox * p.stride) + off] += wv * grow[ox];
                      }
                    }
                  }
                }
              }
              float* dst = gx + ((b * C + c) * H) * W;
              for (std::size_t j = 0; j < H * W; ++j) dst[j] += static_cast<float>(acc[j]);
            }
          }
        }
        break;
      }
      case OpKind::relu: {
        const Tensor& x = node.inputs[0];
        if (float* gx = sink(x)) {
          const auto xd = x.data();
          if (node.relu_mode == ReluMode::linear) {
            for (std::size_t j = 0; j < xd.size(); ++j) gx[j] += g[j];
          } else {
            for (std::size_t j = 0; j < xd.size(); ++j) {
              if (xd[j] > 0.0f) gx[j] += g[j];
            }
          }
        }
        break;
      }
      case OpKind::maxpool2d: {
        const auto& saved = std::get<PoolSaved>(node.saved);
        if (float* gx = sink(node.inputs[0])) {
          for (std::size_t j = 0; j < saved.argmax.size(); ++j) gx[saved.argmax[j]] += g[j];
        }
        break;
      }
      case OpKind::flatten:
      case OpKind::reshape: {
        if (float* gx = sink(node.inputs[0])) {
          const std::size_t n = node.inputs[0].size();
          for (std::size_t j = 0; j < n; ++j) gx[j] += g[j];
        }
        break;
      }
      case OpKind::softmax_ce: {
        const auto& saved = std::get<SoftmaxSaved>(node.saved);
        if (float* gz = sink(node.inputs[0])) {
          const std::size_t B = saved.labels.size();
          const std::size_t C = saved.probs.size() / B;
          const double scale = static_cast<double>(g[0]) / static_cast<double>(B);
          for (std::size_t b = 0; b < B; ++b) {
            const auto y = static_cast<std::size_t>(saved.labels[b]);
            // p_y - 1 as minus the off-label mass, exact when p_y rounds to 1
            double rest = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
              if (c == y) continue;
              rest += saved.probs[b * C + c];
              gz[b * C + c] += static_cast<float>(scale * saved.probs[b * C + c]);
            }
            gz[b * C + y] += static_cast<float>(-scale * rest);
          }
        }
        break;
      }
    }
    grads[i].clear();
    grads[i].shrink_to_fit();
  }
  nodes_.clear();
  consumed_ = true;
}

}  // namespace ilalab

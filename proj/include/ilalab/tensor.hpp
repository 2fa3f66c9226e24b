#pragma once

// Dense f32 tensors with a tape-based reverse-mode differentiation engine.
//
// A Tensor is a cheap handle onto shared storage. Operations are methods on a
// Tape; an operation is recorded only when at least one input requires a
// gradient. Reductions (matmul, conv2d, softmax cross-entropy) accumulate in
// f64 and round once on store, with a fixed loop order so repeated forward
// evaluations are bit-identical.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ilalab {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorStorage;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  // Throws NonFiniteError on NaN/Inf and ShapeError on size mismatch.
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor from(Shape shape, std::span<const float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(s_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::span<const float> data() const;
  // Writes bypass the tape; only use on leaves that are not part of a live graph.
  std::span<float> mutable_data();
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  // Tape node that produced this tensor, if any.
  std::optional<std::size_t> node_id() const;

  // Copy of the values with no tape history.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const noexcept { return s_ == other.s_; }

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<TensorStorage> s) : s_(std::move(s)) {}
  std::shared_ptr<TensorStorage> s_;
};

enum class OpKind { matmul, add, conv2d, relu, maxpool2d, flatten, reshape, softmax_ce };

const char* op_name(OpKind kind);

// ReLU backward rule. `linear` passes the upstream gradient through unchanged
// (the forward pass still clamps).
enum class ReluMode { standard, linear };

enum class Padding { valid, same };

struct Conv2dParams {
  std::size_t stride = 1;
  Padding padding = Padding::same;
};

class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;
  ~Tape();

  // a: [M, K], b: [K, N] -> [M, N]
  Tensor matmul(const Tensor& a, const Tensor& b);
  // Same-shape addition, or bias addition when b is 1-D and matches a's last dim.
  Tensor add(const Tensor& a, const Tensor& b);
  // x: [B, C, H, W], weight: [O, C, K, K], bias: [O] (may be undefined).
  Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dParams params = {});
  Tensor relu(const Tensor& x, ReluMode mode = ReluMode::standard);
  // Non-overlapping window x window pooling over [B, C, H, W]; H and W must divide.
  Tensor maxpool2d(const Tensor& x, std::size_t window = 2);
  // [B, ...] -> [B, prod(...)]
  Tensor flatten(const Tensor& x);
  Tensor reshape(const Tensor& x, Shape shape);
  // Mean cross-entropy of logits [B, C] against integer labels.
  Tensor softmax_ce(const Tensor& logits, std::span<const int> labels);

  // Changes the backward rule of a recorded ReLU node.
  void set_relu_mode(std::size_t node, ReluMode mode);

  // Backpropagates from a single-element tensor; leaves accumulate into grad.
  // The tape is consumed afterwards.
  void backward(const Tensor& loss);
  // Vector-Jacobian product with an explicit upstream gradient for `output`.
  void backward(const Tensor& output, std::span<const float> upstream);

  std::size_t size() const noexcept;
  OpKind kind(std::size_t node) const;
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node;
  Tensor record(Node node, std::shared_ptr<TensorStorage> out);
  bool needs_grad(const Tensor& t) const;
  void run_backward(const Tensor& output, std::span<const float> upstream);

  std::vector<Node> nodes_;
  std::uint64_t id_;
  bool consumed_ = false;
};

}  // namespace ilalab

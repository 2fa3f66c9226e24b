#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "ilalab/errors.hpp"
#include "ilalab/model.hpp"
#include "ilalab/rng.hpp"
#include "ilalab/tensor.hpp"
#include "../support/reference.hpp"

using namespace ilalab;

namespace {

std::vector<float> random_values(std::size_t n, std::uint64_t seed, float scale = 1.0f) {
  Rng rng(seed);
  std::normal_distribution<float> d(0.0f, scale);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

std::vector<float> random_image(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> d(0.1f, 0.9f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("matmul with identity returns the vector") {
  Tape tape;
  auto eye = Tensor::from({3, 3}, std::vector<float>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto v = Tensor::from({1, 3}, std::vector<float>{1.5f, -2.0f, 0.25f});
  auto out = tape.matmul(v, eye);
  CHECK(out.shape() == Shape{1, 3});
  CHECK(std::vector<float>(out.data().begin(), out.data().end()) == std::vector<float>{1.5f, -2.0f, 0.25f});
}

TEST_CASE("relu forward clamps negatives") {
  Tape tape;
  auto x = Tensor::from({3}, std::vector<float>{-1, 0, 2});
  auto y = tape.relu(x);
  CHECK(std::vector<float>(y.data().begin(), y.data().end()) == std::vector<float>{0, 0, 2});
}

TEST_CASE("softmax cross-entropy of equal logits is ln 2") {
  Tape tape;
  auto z = Tensor::from({1, 2}, std::vector<float>{0, 0});
  const int label = 0;
  auto loss = tape.softmax_ce(z, std::span<const int>(&label, 1));
  CHECK(loss.shape().empty());
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("cross-entropy gradient keeps precision for confident logits") {
  Tape tape;
  auto z = Tensor::from({1, 3}, std::vector<float>{30, 0, -2}, true);
  const int label = 0;
  tape.backward(tape.softmax_ce(z, std::span<const int>(&label, 1)));
  const double p1 = std::exp(-30.0), p2 = std::exp(-32.0);
  const auto g = z.grad();
  CHECK(g[1] == doctest::Approx(p1).epsilon(1e-6));
  CHECK(g[2] == doctest::Approx(p2).epsilon(1e-6));
  CHECK(g[0] == doctest::Approx(-(p1 + p2)).epsilon(1e-6));
}

TEST_CASE("gradient of a linear form is its weight vector") {
  Tape tape;
  const auto wv = random_values(5, 3);
  auto x = Tensor::from({1, 5}, random_values(5, 4), true);
  auto w = Tensor::from({5, 1}, wv);
  auto y = tape.matmul(x, w);
  tape.backward(y);
  REQUIRE(x.has_grad());
  for (std::size_t i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(wv[i]).epsilon(1e-6));
}

TEST_CASE("relu backward in standard and linear modes") {
  const std::vector<float> vals{-1, 0.5f, 2, -3};
  for (auto mode : {ReluMode::standard, ReluMode::linear}) {
    Tape tape;
    auto x = Tensor::from({4}, vals, true);
    auto y = tape.relu(x, mode);
    const std::vector<float> up{1, 1, 1, 1};
    tape.backward(y, up);
    const std::vector<float> got(x.grad().begin(), x.grad().end());
    if (mode == ReluMode::standard) {
      CHECK(got == std::vector<float>{0, 1, 1, 0});
    } else {
      CHECK(got == std::vector<float>{1, 1, 1, 1});
    }
  }
}

TEST_CASE("set_relu_mode switches a recorded node and rejects other ops") {
  Tape tape;
  auto x = Tensor::from({1, 2}, std::vector<float>{-1, 1}, true);
  auto w = Tensor::from({2, 2}, std::vector<float>{1, 0, 0, 1});
  auto h = tape.matmul(x, w);
  auto r = tape.relu(h);
  REQUIRE(r.node_id().has_value());
  REQUIRE(h.node_id().has_value());
  CHECK_THROWS_AS(tape.set_relu_mode(*h.node_id(), ReluMode::linear), GradError);
  tape.set_relu_mode(*r.node_id(), ReluMode::linear);
  tape.backward(r, std::vector<float>{1, 1});
  CHECK(x.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("backward consumes the tape") {
  Tape tape;
  auto x = Tensor::from({1, 2}, std::vector<float>{1, 2}, true);
  auto w = Tensor::from({2, 1}, std::vector<float>{1, 1});
  auto y = tape.matmul(x, w);
  tape.backward(y);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(y), GradError);
}

TEST_CASE("backward on a detached tensor fails") {
  Tape tape;
  auto x = Tensor::from({1, 2}, std::vector<float>{1, 2}, true);
  auto w = Tensor::from({2, 1}, std::vector<float>{1, 1});
  auto y = tape.matmul(x, w).detach();
  CHECK_THROWS_AS(tape.backward(y), GradError);
}

TEST_CASE("shape mismatch and non-finite inputs are rejected") {
  Tape tape;
  CHECK_THROWS_AS(Tensor::from({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::from({1}, std::vector<float>{NAN}), NonFiniteError);
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(tape.matmul(a, b), ShapeError);
}

TEST_CASE("vector-Jacobian products are linear in the upstream gradient") {
  auto model = Model::build("cnn-small", 5);
  const auto img = random_image(model.input_size(), 9);
  const auto u = random_values(10, 10);
  const auto v = random_values(10, 11);
  auto vjp = [&](const std::vector<float>& up) {
    Tape tape;
    auto x = Tensor::from({1, model.input_size()}, img, true);
    auto z = model.forward(tape, x);
    tape.backward(z, up);
    return std::vector<float>(x.grad().begin(), x.grad().end());
  };
  std::vector<float> uv(10);
  for (std::size_t i = 0; i < 10; ++i) uv[i] = 2.0f * u[i] - 0.5f * v[i];
  const auto gu = vjp(u), gv = vjp(v), guv = vjp(uv);
  double scale = 0;
  for (float g : guv) scale = std::max(scale, static_cast<double>(std::abs(g)));
  for (std::size_t i = 0; i < guv.size(); ++i) {
    CHECK(std::abs(guv[i] - (2.0f * gu[i] - 0.5f * gv[i])) <= 1e-5 * scale + 1e-7);
  }
}

TEST_CASE("forward evaluation is bit-identical across runs") {
  auto model = Model::build("cnn-wide", 2);
  const auto img = random_image(model.input_size() * 3, 12);
  std::vector<float> first;
  for (int rep = 0; rep < 3; ++rep) {
    Tape tape;
    auto z = model.forward(tape, Tensor::from({3, model.input_size()}, img));
    std::vector<float> cur(z.data().begin(), z.data().end());
    if (rep == 0) first = cur;
    CHECK(cur == first);
  }
}

TEST_CASE("input gradients match f64 central differences") {
  for (const auto& arch : zoo_architectures()) {
    CAPTURE(arch);
    auto model = Model::build(arch, 1);
    const auto img = random_image(model.input_size(), 21);
    const int label = 3;
    Tape tape;
    auto x = Tensor::from({1, model.input_size()}, img, true);
    auto loss = tape.softmax_ce(model.forward(tape, x), std::span<const int>(&label, 1));
    tape.backward(loss);
    const auto fd = testing::fd_input_gradient(model, img, label, 1e-4);
    CHECK(fd.skipped < img.size() / 4);
    CHECK(testing::max_relative_error(x.grad(), fd) < 1e-3);
  }
}

TEST_CASE("f32 forward agrees with the f64 reference") {
  auto model = Model::build("cnn-small", 3);
  const auto img = random_image(model.input_size(), 5);
  Tape tape;
  auto z = model.forward(tape, Tensor::from({1, model.input_size()}, img));
  const std::vector<double> xd(img.begin(), img.end());
  const auto ref = testing::reference_eval(model, xd, -1);
  for (std::size_t i = 0; i < 10; ++i) CHECK(z.data()[i] == doctest::Approx(ref.logits[i]).epsilon(1e-4));
}

TEST_CASE("maxpool and conv gradients on a hand case") {
  Tape tape;
  // 1x1x2x2 input, max is at index 2
  auto x = Tensor::from({1, 1, 2, 2}, std::vector<float>{0.1f, 0.2f, 0.9f, 0.3f}, true);
  auto p = tape.maxpool2d(x, 2);
  CHECK(p.data()[0] == doctest::Approx(0.9f));
  tape.backward(p, std::vector<float>{2.0f});
  CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{0, 0, 2, 0});

  Tape t2;
  auto xi = Tensor::from({1, 1, 3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9}, true);
  auto k = Tensor::from({1, 1, 3, 3}, std::vector<float>{0, 0, 0, 0, 1, 0, 0, 0, 0});
  auto y = t2.conv2d(xi, k, Tensor{});
  CHECK(std::vector<float>(y.data().begin(), y.data().end()) == std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
}

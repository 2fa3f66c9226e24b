#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "ilalab/errors.hpp"
#include "ilalab/guide.hpp"
#include "ilalab/rng.hpp"
#include "../support/oracles.hpp"

using namespace ilalab;

namespace {

DiscrepancyDataset random_dataset(std::size_t n, std::size_t m, std::uint64_t seed, bool zero_first_row = true) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.5, 3.0);
  DiscrepancyDataset ds;
  ds.H = Matrix(n, m);
  ds.anchor.assign(m, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) ds.H(i, j) = (zero_first_row && i == 0) ? 0.0 : g(rng);
    ds.r.push_back(u(rng));
  }
  return ds;
}

double rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

Trajectory fake_trajectory(std::vector<std::vector<float>> feats, std::vector<float> losses) {
  Trajectory t;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    t.samples.push_back({static_cast<std::uint32_t>(i), losses[i], feats[i], {}});
  }
  return t;
}

}  // namespace

TEST_CASE("build_dataset stacks runs with zero anchor rows") {
  const std::vector<float> h0{1, 2, 3};
  const auto a = fake_trajectory({h0, {2, 2, 3}, {1, 5, 3}}, {0.1f, 0.5f, 0.9f});
  const auto b = fake_trajectory({h0, {1, 2, 4}}, {0.1f, 0.3f});
  const std::vector<Trajectory> ts{a, b};
  const auto ds = build_dataset(ts);
  REQUIRE(ds.rows() == 5);
  CHECK(ds.feature_dim() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(ds.H(0, j) == 0.0);
    CHECK(ds.H(3, j) == 0.0);
  }
  CHECK(ds.H(1, 0) == 1.0);
  CHECK(ds.H(2, 1) == 3.0);
  CHECK(ds.H(4, 2) == 1.0);
  CHECK(ds.r[2] == doctest::Approx(0.9));

  const std::vector<Trajectory> mixed{a, fake_trajectory({{0, 0, 0}, {1, 1, 1}}, {0, 1})};
  CHECK_THROWS_AS(build_dataset(mixed), DegenerateError);
  const std::vector<Trajectory> dims{a, fake_trajectory({{1, 2}}, {0})};
  CHECK_THROWS_AS(build_dataset(dims), ShapeError);
}

TEST_CASE("ridge on a diagonal system") {
  DiscrepancyDataset ds;
  ds.H = Matrix(2, 2);
  ds.H(0, 0) = 1;
  ds.H(1, 1) = 1;
  ds.r = {1, 2};
  ds.anchor = {0, 0};
  for (const auto& w : {solve_rr(ds, 1.0), solve_rr_woodbury(ds, 1.0)}) {
    CHECK(w[0] == doctest::Approx(0.5));
    CHECK(w[1] == doctest::Approx(1.0));
  }
}

TEST_CASE("ridge primal matches the gradient-descent oracle") {
  const auto ds = random_dataset(7, 12, 1, false);
  for (double lambda : {0.1, 1.0, 10.0}) {
    const auto w = solve_rr(ds, lambda);
    const auto oracle = testing::ridge_gradient_descent(ds.H, ds.r, lambda, 100000);
    CHECK(rel_diff(w, oracle) < 1e-5);
  }
}

TEST_CASE("woodbury dual equals the primal solve") {
  for (auto [n, m] : {std::pair<std::size_t, std::size_t>{11, 64}, {30, 20}, {128, 512}}) {
    const auto ds = random_dataset(n, m, n * 31 + m);
    for (double lambda : {1e-2, 1.0, 1e10}) {
      CHECK(rel_diff(solve_rr_woodbury(ds, lambda), solve_rr(ds, lambda)) < 1e-5);
    }
  }
}

TEST_CASE("degenerate datasets are errors") {
  DiscrepancyDataset ds;
  ds.H = Matrix(1, 4);
  ds.r = {1.0};
  ds.anchor.assign(4, 0.0f);
  CHECK_THROWS_AS(fit_rr_woodbury(ds, 1e10), DegenerateError);
  CHECK_THROWS_AS(fit_rr(ds, 1e10), DegenerateError);
  CHECK_THROWS_AS(fit_rr_approx(ds), DegenerateError);
  CHECK_THROWS_AS(fit_elasticnet(ds, 0.05, 1.0), DegenerateError);
  CHECK_THROWS_AS(fit_svr(ds, 1.0, 0.0), DegenerateError);
}

TEST_CASE("H^T r approximation") {
  SUBCASE("orthonormal rows with r = e1 give the first row") {
    DiscrepancyDataset ds;
    ds.H = Matrix(2, 3);
    const double s = 1 / std::sqrt(2.0);
    ds.H(0, 0) = s;
    ds.H(0, 1) = s;
    ds.H(1, 2) = 1;
    ds.r = {1, 0};
    ds.anchor.assign(3, 0.0f);
    const auto w = solve_rr_approx(ds);
    CHECK(w[0] == doctest::Approx(s));
    CHECK(w[1] == doctest::Approx(s));
    CHECK(w[2] == 0.0);
  }
  SUBCASE("one iterate gives the scaled ILA direction") {
    const auto t = fake_trajectory({{1, 1, 1}, {2, 0, 1.5f}}, {0.2f, 1.5f});
    const std::vector<Trajectory> ts{t};
    const auto w = solve_rr_approx(build_dataset(ts));
    const auto ila = ila_guide(t).w;
    for (std::size_t j = 0; j < 3; ++j) CHECK(w[j] == doctest::Approx(ila[j] * 1.5));
  }
  SUBCASE("direction converges to ridge as lambda grows") {
    for (std::uint64_t seed : {3u, 4u, 5u}) {
      const auto ds = random_dataset(11, 64, seed);
      const auto approx = solve_rr_approx(ds);
      for (double lambda : {1e4, 1e6, 1e10}) {
        CHECK(cosine(approx, solve_rr(ds, lambda)) >= 1 - 10 / lambda);
      }
      CHECK(cosine(approx, solve_rr(ds, 1e10)) > 0.999);
    }
  }
}

TEST_CASE("ridge scales linearly with the targets") {
  auto ds = random_dataset(9, 16, 6);
  const auto w = solve_rr(ds, 2.0);
  for (auto& v : ds.r) v *= 4.0;
  const auto w4 = solve_rr(ds, 2.0);
  for (std::size_t j = 0; j < w.size(); ++j) CHECK(w4[j] == doctest::Approx(4 * w[j]).epsilon(1e-12));
}

TEST_CASE("elastic net with lambda1 = 0 is ridge") {
  const auto ds = random_dataset(11, 24, 7);
  for (double l2 : {0.5, 10.0, 1e10}) {
    const auto en = solve_elasticnet(ds, 0.0, l2, 1e-14, 1000000).w;
    CHECK(rel_diff(en, solve_rr(ds, l2)) < 1e-5);
  }
}

TEST_CASE("elastic net optimality and sparsity") {
  const auto ds = random_dataset(15, 30, 8);
  std::size_t prev_zeros = 0;
  for (double l1 : {0.05, 0.5, 2.0, 8.0, 32.0}) {
    const auto res = solve_elasticnet(ds, l1, 0.5, 1e-13, 1000000);
    // subgradient conditions: |2 (H^T res)_j - 2 l2 w_j| <= l1, equality with sign on the support
    std::vector<double> resid(ds.r);
    for (std::size_t i = 0; i < ds.rows(); ++i) {
      for (std::size_t j = 0; j < ds.feature_dim(); ++j) resid[i] -= ds.H(i, j) * res.w[j];
    }
    const auto c = mul_transposed(ds.H, resid);
    for (std::size_t j = 0; j < res.w.size(); ++j) {
      const double g = 2 * c[j] - 2 * 0.5 * res.w[j];
      if (res.w[j] == 0.0) {
        CHECK(std::abs(g) <= l1 * (1 + 1e-6));
      } else {
        CHECK(g == doctest::Approx(l1 * (res.w[j] > 0 ? 1 : -1)).epsilon(1e-5));
      }
    }
    CHECK(res.duality_gap >= -1e-9);
    CHECK(res.duality_gap < 1e-6);
    const auto zeros = static_cast<std::size_t>(std::count(res.w.begin(), res.w.end(), 0.0));
    CHECK(zeros >= prev_zeros);
    prev_zeros = zeros;
  }
  CHECK(prev_zeros > 0);
}

TEST_CASE("svr matches the projected-gradient dual oracle") {
  for (std::uint64_t seed = 10; seed < 16; ++seed) {
    const std::size_t n = 4 + seed % 5, m = 3 + seed % 2;
    const auto ds = random_dataset(n, m, seed, false);
    for (auto [C, e] : {std::pair{1.0, 0.0}, {0.05, 0.1}, {10.0, 0.3}}) {
      const auto w = solve_svr(ds, C, e).w;
      const auto oracle = testing::svr_projected_gradient(ds.H, ds.r, C, e, 400000);
      CHECK(rel_diff(w, oracle) < 1e-3);
    }
  }
}

TEST_CASE("svr with a tube covering every target returns zero") {
  const auto ds = random_dataset(6, 4, 20);
  const double rmax = *std::max_element(ds.r.begin(), ds.r.end());
  const auto g = fit_svr(ds, 1.0, rmax);
  CHECK(g.is_zero());
}

TEST_CASE("svr with tiny C is C times the sum of discrepancies") {
  const auto ds = random_dataset(11, 8, 21);
  const auto res = solve_svr(ds, 1e-10, 0.0);
  for (double b : res.beta) CHECK(b == doctest::Approx(1e-10));
}

TEST_CASE("guide spec validation and naming") {
  GuideSpec s;
  s.lambda = -1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = GuideSpec{};
  s.regressor = Regressor::svr;
  s.C = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK(parse_regressor("en") == Regressor::elasticnet);
  CHECK_THROWS_AS(parse_regressor("lasso"), ConfigError);
  CHECK(GuideSpec{}.hash() == GuideSpec{}.hash());
}

TEST_CASE("random guides are seed-deterministic") {
  const SplitModel sm(Model::build("mlp-2", 4), 2);
  std::vector<float> x(sm.input_size(), 0.5f);
  GuideSpec spec;
  spec.regressor = Regressor::rr_woodbury;
  const auto a = random_guide_input(sm, x, 3, 10, 0.02, 99, spec);
  const auto b = random_guide_input(sm, x, 3, 10, 0.02, 99, spec);
  const auto c = random_guide_input(sm, x, 3, 10, 0.02, 100, spec);
  CHECK(a.w == b.w);
  CHECK(a.w != c.w);
  CHECK(a.anchor == sm.feature(x));
  CHECK(a.method == "rand_input+rr_woodbury");
  const auto f1 = random_guide_feature(sm, x, 3, 10, 0.1, 5, spec);
  const auto f2 = random_guide_feature(sm, x, 3, 10, 0.1, 5, spec);
  CHECK(f1.w == f2.w);
  CHECK_THROWS_AS(random_guide_feature(sm, x, 3, 10, 0.0, 5, spec), ConfigError);
}

TEST_CASE("guide file round trip") {
  const auto ds = random_dataset(11, 16, 30);
  auto g = fit_svr(ds, 1e-3, 0.0);
  g.anchor.assign(16, 0.25f);
  const auto path = std::filesystem::temp_directory_path() / "ilalab_test_guide.ilag";
  save_guide(path, g);
  const auto back = load_guide(path);
  CHECK(back.method == "svr");
  CHECK(back.spec.C == g.spec.C);
  CHECK(back.provenance == g.provenance);
  CHECK(back.anchor == g.anchor);
  for (std::size_t j = 0; j < 16; ++j) CHECK(back.w[j] == static_cast<double>(static_cast<float>(g.w[j])));
  std::filesystem::remove(path);
}

TEST_CASE("cholesky jitter rescues a singular system") {
  Matrix a(2, 2);
  a(0, 0) = 1;
  a(0, 1) = 1;
  a(1, 0) = 1;
  a(1, 1) = 1;
  const std::vector<double> b{1, 1};
  const auto s = solve_spd(a, b);
  CHECK(s.jitter > 0);
  CHECK(s.jitter <= 1e-6);
  Matrix neg(1, 1);
  neg(0, 0) = -1;
  CHECK_THROWS_AS(solve_spd(neg, std::vector<double>{1}), NonFiniteError);
}

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "ilalab/errors.hpp"
#include "ilalab/refine.hpp"
#include "ilalab/rng.hpp"

using namespace ilalab;

namespace {

std::vector<float> image(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> d(0.05f, 0.95f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

struct Fixture {
  SplitModel sm{Model::build("cnn-small", 8), default_split("cnn-small")};
  std::vector<float> x = image(256, 3);
  int y = 4;
  AttackConfig ac;
  Trajectory traj;
  DiscrepancyDataset ds;

  Fixture() {
    ac.iterations = 20;
    ac.samples = 10;
    traj = ifgsm(sm, x, y, ac);
    const std::vector<Trajectory> ts{traj};
    ds = build_dataset(ts);
  }

  RefineConfig rc(Norm norm = Norm::linf) const {
    RefineConfig c;
    c.norm = norm;
    c.epsilon = norm == Norm::linf ? 8.0 / 255 : 0.5;
    c.iterations = 15;
    return c;
  }
};

DirectionalGuide scaled(DirectionalGuide g, double c) {
  for (auto& v : g.w) v *= c;
  return g;
}

}  // namespace

TEST_CASE("refined examples stay feasible and raise the objective") {
  Fixture f;
  const auto g = fit_rr_woodbury(f.ds, 1e10);
  for (auto norm : {Norm::linf, Norm::l2}) {
    const auto c = f.rc(norm);
    const auto xa = refine(f.sm, f.x, g, c);
    double linf = 0, sq = 0;
    for (std::size_t i = 0; i < xa.size(); ++i) {
      CHECK((xa[i] >= 0.0f && xa[i] <= 1.0f));
      const double d = static_cast<double>(xa[i]) - f.x[i];
      linf = std::max(linf, std::abs(d));
      sq += d * d;
    }
    if (norm == Norm::linf) CHECK(linf <= c.epsilon);
    if (norm == Norm::l2) CHECK(std::sqrt(sq) <= c.epsilon * (1 + 1e-6));
    CHECK(guide_objective(f.sm, xa, g, Objective::projection) > 0.0);
  }
}

TEST_CASE("zero iterations and zero guides return the start point") {
  Fixture f;
  auto c = f.rc();
  c.iterations = 0;
  CHECK(refine(f.sm, f.x, fit_rr_approx(f.ds), c) == f.x);
  auto g = fit_rr_approx(f.ds);
  std::fill(g.w.begin(), g.w.end(), 0.0);
  CHECK(refine(f.sm, f.x, g, f.rc()) == f.x);
}

TEST_CASE("anchor mismatch is rejected") {
  Fixture f;
  const auto g = fit_rr_approx(f.ds);
  auto other = f.x;
  other[10] = 1.0f - other[10];
  CHECK_THROWS_AS(refine(f.sm, other, g, f.rc()), ConfigError);
}

TEST_CASE("positive rescaling of the guide leaves the iterate path unchanged") {
  Fixture f;
  const auto g = fit_rr_woodbury(f.ds, 1e10);
  const auto base = refine(f.sm, f.x, g, f.rc());
  CHECK(refine(f.sm, f.x, scaled(g, 4.0), f.rc()) == base);
  CHECK(refine(f.sm, f.x, scaled(g, 1e12), f.rc()) == base);
  const auto l2 = refine(f.sm, f.x, g, f.rc(Norm::l2));
  const auto l2s = refine(f.sm, f.x, scaled(g, 3.0), f.rc(Norm::l2));
  for (std::size_t i = 0; i < l2.size(); ++i) CHECK(l2s[i] == doctest::Approx(l2[i]).epsilon(1e-5));
}

TEST_CASE("scaling the loss targets does not change a refinement step") {
  Fixture f;
  auto ds2 = f.ds;
  for (auto& v : ds2.r) v *= 7.0;
  auto c = f.rc();
  c.iterations = 1;
  CHECK(refine(f.sm, f.x, fit_rr(f.ds, 1e10), c) == refine(f.sm, f.x, fit_rr(ds2, 1e10), c));
}

TEST_CASE("ILA is the one-iterate case of the H^T r guide") {
  Fixture f;
  AttackConfig one = f.ac;
  one.iterations = 1;
  one.samples = 1;
  const auto t = ifgsm(f.sm, f.x, f.y, one);
  const std::vector<Trajectory> ts{t};
  const auto approx = fit_rr_approx(build_dataset(ts));
  CHECK(ila_refine(f.sm, f.x, t, f.rc()) == refine(f.sm, f.x, approx, f.rc()));
}

TEST_CASE("ILA needs movement in feature space") {
  Fixture f;
  AttackConfig c = f.ac;
  c.epsilon = 0;
  const auto t = ifgsm(f.sm, f.x, f.y, c);
  CHECK_THROWS_AS(ila_refine(f.sm, f.x, t, f.rc()), DegenerateError);
}

TEST_CASE("normalized objective is defined at the benign point") {
  Fixture f;
  const auto g = fit_rr_woodbury(f.ds, 1e10);
  CHECK(guide_objective(f.sm, f.x, g, Objective::normalized) == 0.0);
  const auto xa = refine_normalized(f.sm, f.x, g, f.rc());
  CHECK(xa != f.x);
  CHECK(guide_objective(f.sm, xa, g, Objective::normalized) > 0.0);
}

TEST_CASE("refinement can start from the baseline result") {
  Fixture f;
  const auto g = fit_rr_woodbury(f.ds, 1e10);
  auto c = f.rc();
  c.iterations = 0;
  CHECK(refine(f.sm, f.x, g, c, f.traj.final_input) == f.traj.final_input);
}

TEST_CASE("discrepancy magnitude properties") {
  Fixture f;
  CHECK(discrepancy_magnitude(f.sm, f.x, f.x) == 0.0);
  const auto& a = f.traj.final_input;
  const auto& b = f.traj.samples[3].input;
  const auto ga = f.sm.feature(a), gb = f.sm.feature(b);
  double ab = 0;
  for (std::size_t j = 0; j < ga.size(); ++j) ab += (static_cast<double>(ga[j]) - gb[j]) * (static_cast<double>(ga[j]) - gb[j]);
  CHECK(discrepancy_magnitude(f.sm, f.x, a) <= discrepancy_magnitude(f.sm, f.x, b) + std::sqrt(ab) + 1e-9);
}

TEST_CASE("adversarial batch round trip") {
  AdvBatch b;
  b.method = "ifgsm+rr";
  b.cfg_hash = 77;
  b.source_id = "cnn-small-s1";
  b.victim_ids = {"mlp-2-s1", "cnn-wide-s2"};
  b.input_size = 3;
  b.records.push_back({5, 2, {0.1f, 0.2f, 0.3f}});
  b.records.push_back({9, 7, {1.0f, 0.0f, 0.5f}});
  const auto path = std::filesystem::temp_directory_path() / "ilalab_test_batch.ilab";
  save_adv_batch(path, b);
  const auto r = load_adv_batch(path);
  CHECK(r.method == b.method);
  CHECK(r.cfg_hash == 77);
  CHECK(r.victim_ids == b.victim_ids);
  REQUIRE(r.records.size() == 2);
  CHECK(r.records[1].index == 9);
  CHECK(r.records[1].label == 7);
  CHECK(r.records[1].image == b.records[1].image);
  std::filesystem::remove(path);
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ilalab/errors.hpp"
#include "ilalab/harness.hpp"

using namespace ilalab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ilalab_unit_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Two-architecture MLP zoo on a small synthetic set, trained once per process.
Campaign tiny_campaign() {
  Campaign c;
  c.data.train_count = 600;
  c.data.test_count = 120;
  c.zoo.dir = fs::temp_directory_path() / "ilalab_unit_zoo";
  c.zoo.archs = {"mlp-2", "mlp-3"};
  c.source = "mlp-2-s1";
  c.methods = {"ifgsm", "ifgsm+rr", "pgd2+svr", "rand_feature+rr"};
  c.epsilons = {8.0 / 255};
  c.attack.epsilon = 8.0 / 255;
  c.attack.iterations = 20;
  c.refine.iterations = 20;
  c.n_inputs = 6;
  c.save_batches = false;
  return c;
}

Workspace& tiny_workspace() {
  static const auto ws = open_workspace(tiny_campaign(), true);
  return *ws;
}

TransferReport fake_report() {
  TransferReport r;
  r.source = "s";
  r.victims = {"a", "b"};
  r.seed = 7;
  const std::vector<std::string> methods{"m1", "m2"};
  for (const auto& m : methods) {
    for (const auto& v : r.victims) {
      ReportCell cell;
      cell.method = m;
      cell.epsilon = 8.0 / 255;
      cell.victim = v;
      cell.success_rate = m == "m1" ? 0.25 : 0.5;
      cell.mean_discrepancy = 1.5;
      cell.n_inputs = 4;
      cell.seed = 7;
      r.cells.push_back(cell);
    }
    r.summaries.push_back({m, 8.0 / 255, m == "m1" ? 0.25 : 0.5, 1.0, 1.5, 0.0});
  }
  return r;
}

}  // namespace

TEST_CASE("method specs parse baselines, guides, values and the normalized flag") {
  auto m = MethodSpec::parse("ifgsm");
  CHECK(m.baseline == Baseline::ifgsm);
  CHECK_FALSE(m.refines());

  m = MethodSpec::parse("pgd10+svr");
  CHECK(m.baseline == Baseline::pgd);
  CHECK(m.runs == 10);
  CHECK(m.guide == "svr");

  m = MethodSpec::parse("ifgsm+en@0.5+norm");
  CHECK(m.guide == "en");
  REQUIRE(m.value);
  CHECK(*m.value == doctest::Approx(0.5));
  CHECK(m.normalized);

  m = MethodSpec::parse("linbp10+rr");
  CHECK(m.baseline == Baseline::linbp);
  CHECK(m.multi_run);
  CHECK(m.runs == 10);
  CHECK_FALSE(MethodSpec::parse("linbp").multi_run);

  CHECK_THROWS_AS(MethodSpec::parse("rand_input"), ConfigError);
  CHECK_THROWS_AS(MethodSpec::parse("rand_feature+ila"), ConfigError);
  CHECK_THROWS_AS(MethodSpec::parse("ifgsm+bogus"), ConfigError);
  CHECK_THROWS_AS(MethodSpec::parse("pgd0+rr"), ConfigError);
  CHECK_THROWS_AS(MethodSpec::parse(""), ConfigError);
}

TEST_CASE("campaign config round-trips and rejects unknown keys") {
  Campaign c = tiny_campaign();
  c.seed = 99;
  c.methods = {"ifgsm", "ifgsm+en@0.1"};
  const auto back = Campaign::from_config(c.to_config());
  CHECK(back.hash() == c.hash());
  CHECK(back.to_config().canonical() == c.to_config().canonical());

  auto cfg = c.to_config();
  cfg.set("attack.epsilonn", "0.1");
  CHECK_THROWS_AS(Campaign::from_config(cfg), ConfigError);

  // output location and thread count do not change results
  Campaign moved = c;
  moved.out_dir = "elsewhere";
  moved.threads = 3;
  CHECK(moved.hash() == c.hash());
  moved.seed = 100;
  CHECK(moved.hash() != c.hash());
}

TEST_CASE("ell-2 campaigns default to the calibrated epsilon grid") {
  auto cfg = KeyValueConfig::parse("attack.norm = l2\n");
  const auto c = Campaign::from_config(cfg);
  REQUIRE(c.epsilons.size() == 3);
  CHECK(c.epsilons[0] == doctest::Approx(0.5));
  CHECK(c.epsilons[2] == doctest::Approx(0.125));
}

TEST_CASE("pearson is invariant under positive affine maps and rejects flat input") {
  const std::vector<double> x{1.0, 2.5, 3.0, 7.0};
  const std::vector<double> y{0.2, 0.3, 0.35, 0.6};
  std::vector<double> xs;
  for (double v : x) xs.push_back(4.0 * v + 11.0);
  const double r = pearson(x, y);
  CHECK(r > 0.9);
  CHECK(pearson(xs, y) == doctest::Approx(r).epsilon(1e-12));

  std::vector<double> neg;
  for (double v : x) neg.push_back(-v);
  CHECK(pearson(neg, y) == doctest::Approx(-r).epsilon(1e-12));

  const std::vector<double> flat{2.0, 2.0, 2.0, 2.0};
  CHECK_THROWS_AS(pearson(flat, y), DegenerateError);
}

TEST_CASE("correlation report needs three methods") {
  auto r = fake_report();
  const std::vector<std::string> two{"m1", "m2"};
  CHECK_THROWS_AS(correlation_report(r, two, 8.0 / 255), ConfigError);
}

TEST_CASE("csv has one row per method, epsilon and victim and re-emits identically") {
  const auto r = fake_report();
  const auto csv = report_csv(r);
  const auto lines = std::count(csv.begin(), csv.end(), '\n');
  CHECK(lines == 1 + 2 * 1 * 2);
  CHECK(csv.rfind("method,norm,epsilon,victim,success_rate,mean_discrepancy,std_discrepancy,n_inputs,seed\n", 0) == 0);

  const auto dir = scratch("emit");
  const Campaign c = tiny_campaign();
  emit_reports(r, c, dir / "a");
  emit_reports(r, c, dir / "b");
  CHECK(slurp(dir / "a" / "transfer.csv") == slurp(dir / "b" / "transfer.csv"));
  CHECK(slurp(dir / "a" / "transfer.csv") == csv);

  const auto cells = read_report_csv(dir / "a" / "transfer.csv");
  REQUIRE(cells.size() == r.cells.size());
  CHECK(cells[3].success_rate == doctest::Approx(0.5));

  const auto back = campaign_from_manifest(dir / "a" / "manifest.json");
  CHECK(back.hash() == c.hash());
}

TEST_CASE("benign batch transfers nowhere and averages are recomputable") {
  auto& ws = tiny_workspace();
  REQUIRE(ws.ctx.eval_set.size() == 6);
  CHECK(ws.ctx.victims.size() == 3);

  AdvBatch batch;
  batch.method = "benign";
  batch.input_size = ws.source->input_size();
  for (auto idx : ws.ctx.eval_set) {
    const auto x = ws.dataset.test.image(idx);
    batch.records.push_back({idx, ws.dataset.test.labels[idx], std::vector<float>(x.begin(), x.end())});
  }
  const auto ev = evaluate_transfer(batch, ws.ctx);
  for (double s : ev.victim_success) CHECK(s == 0.0);
  CHECK(ev.source_success == 0.0);
  CHECK(ev.mean_discrepancy == doctest::Approx(0.0));

  // a record outside the evaluation set
  auto bad = batch;
  bad.records.back().index = ws.ctx.eval_set.back() + 1000;
  CHECK_THROWS_AS(evaluate_transfer(bad, ws.ctx), ConfigError);
  bad = batch;
  bad.records.back().index = bad.records.front().index;
  CHECK_THROWS_AS(evaluate_transfer(bad, ws.ctx), ConfigError);
  bad = batch;
  bad.records.clear();
  CHECK_THROWS_AS(evaluate_transfer(bad, ws.ctx), ConfigError);

  // an untrained victim
  const Model fresh = Model::build("mlp-2", 5);
  EvalContext ctx = ws.ctx;
  ctx.victims.push_back(&fresh);
  CHECK_THROWS_AS(evaluate_transfer(batch, ctx), ConfigError);
}

TEST_CASE("campaign reports are identical across thread counts") {
  tiny_workspace();  // zoo trained
  Campaign one = tiny_campaign();
  one.threads = 1;
  Campaign three = tiny_campaign();
  three.threads = 3;
  const auto a = run_campaign(one);
  const auto b = run_campaign(three);
  CHECK(report_csv(a) == report_csv(b));
  CHECK(a.cells.size() == one.methods.size() * one.epsilons.size() * a.victims.size());

  for (const auto& s : a.summaries) {
    double sum = 0.0;
    int n = 0;
    for (const auto& cell : a.cells) {
      if (cell.method == s.method && cell.epsilon == s.epsilon) {
        sum += cell.success_rate;
        ++n;
        CHECK(cell.victim != a.source);
        CHECK(cell.success_rate >= 0.0);
        CHECK(cell.success_rate <= 1.0);
      }
    }
    REQUIRE(n == static_cast<int>(a.victims.size()));
    CHECK(std::abs(sum / n - s.victim_average) < 1e-12);
  }
}

TEST_CASE("loading a missing zoo is a config error naming the train command") {
  Campaign c = tiny_campaign();
  c.zoo.dir = scratch("nozoo");
  try {
    open_workspace(c, false);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("ilalab train") != std::string::npos);
  }
}

TEST_CASE("split sweep produces one report per depth with shared seeds") {
  tiny_workspace();
  Campaign c = tiny_campaign();
  c.out_dir = scratch("split_sweep");
  SweepSpec s;
  s.param = parse_sweep_param("split");
  s.values = {1, 2};
  const auto reports = run_sweep(c, s);
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].seed == reports[1].seed);
  CHECK(reports[0].campaign_hash != reports[1].campaign_hash);
  // the baseline does not depend on the split depth
  CHECK(reports[0].victim_average("ifgsm", c.epsilons[0]) == reports[1].victim_average("ifgsm", c.epsilons[0]));
  s.values = {2, 1};
  CHECK_THROWS_AS(run_sweep(c, s), ConfigError);
  CHECK_THROWS_AS(parse_sweep_param("depth"), ConfigError);
}

// ilalab command-line tool. Every flag is shorthand for a config key; the
// precedence is defaults < --config file < flags < --set KEY=VALUE.

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ilalab/binary_io.hpp"
#include "ilalab/errors.hpp"
#include "ilalab/harness.hpp"

namespace fs = std::filesystem;
using namespace ilalab;

namespace {

struct Options {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // key -> value from shorthand flags
  int verbosity = 0;
  bool quiet = false;
};

void bind(CLI::App* app, Options& o, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(
      flag, [&o, key](const std::string& v) { o.flags[key] = v; }, help + " [" + key + "]");
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("-c,--config", o.config_file, "Config file (flat key = value)")->check(CLI::ExistingFile);
  app->add_option("--set", o.sets, "Override a config key, KEY=VALUE (repeatable)");
  bind(app, o, "--zoo", "zoo.dir", "Checkpoint directory");
  bind(app, o, "--data", "data.dir", "IDX dataset directory instead of the synthetic set");
  bind(app, o, "-o,--out", "campaign.out", "Output directory");
  bind(app, o, "--source", "campaign.source", "Source model id");
  bind(app, o, "--victims", "campaign.victims", "Victim ids, comma separated, or 'all'");
  bind(app, o, "--seed", "campaign.seed", "Campaign seed");
  bind(app, o, "--n-inputs", "campaign.n_inputs", "Size of the evaluation set");
  bind(app, o, "--threads", "campaign.threads", "Worker threads, 0 for all cores");
  bind(app, o, "--split", "campaign.split", "Split depth of the source model");
  app->add_flag("-v,--verbose", o.verbosity, "More logging");
  app->add_flag("-q,--quiet", o.quiet, "Warnings and errors only");
}

KeyValueConfig resolve(const Options& o) {
  KeyValueConfig cfg;
  if (!o.config_file.empty()) cfg = KeyValueConfig::load(o.config_file);
  for (const auto& [k, v] : o.flags) cfg.set(k, v);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + s + "'");
    cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return cfg;
}

fs::path io_path(const KeyValueConfig& cfg, const Campaign& c, const std::string& key, const std::string& fallback) {
  return cfg.has(key) ? fs::path(cfg.get(key)) : c.out_dir / fallback;
}

std::string pct(double v) { return fmt::format("{:6.2f}%", 100.0 * v); }

// ------------------------------------------------------------------ subcommands

int cmd_dataset(const KeyValueConfig& cfg) {
  const Campaign c = Campaign::from_config(cfg);
  const Dataset ds = load_dataset(c);
  const fs::path dir = c.out_dir / "dataset";
  fs::create_directories(dir);
  save_idx_dir(ds, dir);
  fmt::print("dataset {}: {} train, {} test, {}x{} -> {}\n", hex64(dataset_hash(ds)), ds.train.size(),
             ds.test.size(), ds.train.height, ds.train.width, dir.string());
  return 0;
}

int cmd_train(const KeyValueConfig& cfg) {
  const Campaign c = Campaign::from_config(cfg);
  const Dataset ds = load_dataset(c);
  for (const auto& m : ensure_zoo(c.zoo, ds)) {
    fmt::print("{:<14} train {:.4f}  test {:.4f}  epochs {}\n", m.id(), m.stats.train_accuracy, m.stats.test_accuracy,
               m.stats.epochs);
  }
  return 0;
}

int cmd_attack(const KeyValueConfig& cfg) {
  Campaign c = Campaign::from_config(cfg);
  c.validate();
  const auto baseline = cfg.get_or("attack.baseline", "ifgsm");
  const auto ws = open_workspace(c, false);
  AttackConfig a = c.attack;
  a.seed = c.seed;
  a.validate();
  const auto traj_dir = io_path(cfg, c, "io.trajectories", "trajectories");
  fs::create_directories(traj_dir);
  const auto& sm = *ws->source;
  AdvBatch batch;
  batch.method = baseline;
  batch.cfg_hash = a.hash();
  batch.source_id = sm.model().id();
  for (const Model* v : ws->ctx.victims) batch.victim_ids.push_back(v->id());
  batch.input_size = sm.input_size();
  for (auto idx : ws->ctx.eval_set) {
    const auto x = ws->dataset.test.image(idx);
    const int y = ws->dataset.test.labels[idx];
    std::vector<Trajectory> runs;
    if (baseline == "ifgsm") {
      AttackConfig one = a;
      one.runs = 1;
      one.random_init = false;
      runs.push_back(ifgsm(sm, x, y, one));
    } else if (baseline == "pgd") {
      AttackConfig p = a;
      p.random_init = true;
      runs = pgd_multirun(sm, x, y, p, idx);
    } else if (baseline == "linbp") {
      if (a.runs > 1) {
        AttackConfig p = a;
        p.random_init = true;
        runs = linbp_multirun(sm, x, y, p, c.linbp_relus, idx);
      } else {
        runs.push_back(linbp_attack(sm, x, y, a, c.linbp_relus));
      }
    } else {
      throw ConfigError("attack.baseline must be ifgsm, pgd or linbp");
    }
    for (const auto& t : runs) {
      save_trajectory(traj_dir / fmt::format("{:05}_r{:02}.ilat", idx, t.run), t, idx, a.hash(), false);
    }
    batch.records.push_back({idx, y, runs.front().final_input});
  }
  const auto out = c.out_dir / (baseline + ".ilab");
  save_adv_batch(out, batch);
  fmt::print("{} trajectories for {} inputs in {}; baseline batch {}\n", baseline, ws->ctx.eval_set.size(),
             traj_dir.string(), out.string());
  return 0;
}

int cmd_fit_guide(const KeyValueConfig& cfg) {
  const Campaign c = Campaign::from_config(cfg);
  c.guide.validate();
  const auto traj_dir = io_path(cfg, c, "io.trajectories", "trajectories");
  const auto guide_dir = io_path(cfg, c, "io.guides", "guides");
  if (!fs::is_directory(traj_dir)) throw ConfigError("no trajectory directory " + traj_dir.string());
  std::map<std::uint64_t, std::vector<Trajectory>> by_input;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(traj_dir)) {
    if (e.path().extension() == ".ilat") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    auto t = load_trajectory(f);
    by_input[t.input_index].push_back(std::move(t.trajectory));
  }
  if (by_input.empty()) throw ConfigError("no .ilat files in " + traj_dir.string());
  fs::create_directories(guide_dir);
  for (const auto& [idx, trajs] : by_input) {
    const auto guide = fit_guide(build_dataset(trajs), c.guide);
    save_guide(guide_dir / fmt::format("{:05}.ilag", idx), guide);
  }
  fmt::print("{} {} guides in {}\n", by_input.size(), regressor_name(c.guide.regressor), guide_dir.string());
  return 0;
}

int cmd_refine(const KeyValueConfig& cfg) {
  Campaign c = Campaign::from_config(cfg);
  c.validate();
  const auto guide_dir = io_path(cfg, c, "io.guides", "guides");
  const auto ws = open_workspace(c, false);
  RefineConfig r = c.refine;
  r.norm = c.attack.norm;
  r.epsilon = c.attack.epsilon;
  r.validate();
  AdvBatch batch;
  batch.method = std::string("refined+") + objective_name(r.objective);
  batch.cfg_hash = r.hash();
  batch.source_id = ws->source->model().id();
  for (const Model* v : ws->ctx.victims) batch.victim_ids.push_back(v->id());
  batch.input_size = ws->source->input_size();
  for (auto idx : ws->ctx.eval_set) {
    const auto path = guide_dir / fmt::format("{:05}.ilag", idx);
    if (!fs::exists(path)) continue;
    const auto guide = load_guide(path);
    const auto x = ws->dataset.test.image(idx);
    auto xa = r.objective == Objective::normalized ? refine_normalized(*ws->source, x, guide, r)
                                                   : refine(*ws->source, x, guide, r);
    batch.records.push_back({idx, ws->dataset.test.labels[idx], std::move(xa)});
  }
  if (batch.records.empty()) throw ConfigError("no guide in " + guide_dir.string() + " matches the evaluation set");
  const auto out = c.out_dir / "refined.ilab";
  save_adv_batch(out, batch);
  fmt::print("refined {} inputs -> {}\n", batch.records.size(), out.string());
  return 0;
}

int cmd_evaluate(const KeyValueConfig& cfg) {
  const Campaign c = Campaign::from_config(cfg);
  if (!cfg.has("io.batch")) throw ConfigError("evaluate needs --batch FILE (io.batch)");
  const auto ws = open_workspace(c, false);
  TransferReport report;
  report.source = ws->source->model().id();
  report.norm = c.attack.norm;
  report.seed = c.seed;
  for (const Model* v : ws->ctx.victims) report.victims.push_back(v->id());
  fmt::print("{:<24} {:>8} {:>8} {:>10}\n", "batch", "source", "victims", "|dh|");
  for (const auto& file : cfg.get_list("io.batch")) {
    const auto batch = load_adv_batch(file);
    if (batch.source_id != report.source) {
      spdlog::warn("{} was crafted on {}, evaluating against source {}", file, batch.source_id, report.source);
    }
    const auto ev = evaluate_transfer(batch, ws->ctx);
    double avg = 0.0;
    for (std::size_t v = 0; v < ev.victim_success.size(); ++v) {
      report.cells.push_back({batch.method, report.norm, c.attack.epsilon, report.victims[v], ev.victim_success[v],
                              ev.mean_discrepancy, ev.std_discrepancy, batch.records.size(), c.seed});
      avg += ev.victim_success[v];
    }
    avg /= static_cast<double>(ev.victim_success.size());
    fmt::print("{:<24} {:>8} {:>8} {:>10.4f}\n", batch.method, pct(ev.source_success), pct(avg), ev.mean_discrepancy);
  }
  fs::create_directories(c.out_dir);
  write_file_atomic(c.out_dir / "evaluate.csv", report_csv(report));
  return 0;
}

void print_summaries(const TransferReport& report) {
  fmt::print("{:<22} {:>10} {:>9} {:>9} {:>10}\n", "method", "epsilon", "source", "victims", "|dh|");
  for (const auto& s : report.summaries) {
    fmt::print("{:<22} {:>10.6g} {:>9} {:>9} {:>10.4f}\n", s.method, s.epsilon, pct(s.source_success),
               pct(s.victim_average), s.mean_discrepancy);
  }
}

int cmd_campaign(const KeyValueConfig& cfg) {
  const Campaign c = Campaign::from_config(cfg);
  const auto report = run_campaign(c);
  emit_reports(report, c, c.out_dir);
  print_summaries(report);
  fmt::print("reports in {}\n", c.out_dir.string());
  return 0;
}

int cmd_sweep(const KeyValueConfig& cfg) {
  const Campaign c = Campaign::from_config(cfg);
  if (!cfg.has("sweep.param")) throw ConfigError("sweep needs one of --runs, --lambda1, --lambda, --C, --epsilons, --splits");
  SweepSpec s;
  s.param = parse_sweep_param(cfg.get("sweep.param"));
  s.values = cfg.get_doubles("sweep.values");
  s.guide = cfg.get_or("sweep.guide", s.guide);
  s.baseline = cfg.get_or("sweep.baseline", s.baseline);
  const auto reports = run_sweep(c, s);
  emit_sweep(reports, s, c.out_dir);
  fmt::print("{:>12} {:<22} {:>9} {:>10}\n", sweep_param_name(s.param), "method", "victims", "|dh|");
  for (std::size_t i = 0; i < reports.size(); ++i) {
    for (const auto& m : reports[i].summaries) {
      fmt::print("{:>12.6g} {:<22} {:>9} {:>10.4f}\n", s.values[i], m.method, pct(m.victim_average),
                 m.mean_discrepancy);
    }
  }
  return 0;
}

int cmd_report(const KeyValueConfig& cfg) {
  const Campaign c = Campaign::from_config(cfg);
  const fs::path dir = cfg.has("io.results") ? fs::path(cfg.get("io.results")) : c.out_dir;
  const auto cells = read_report_csv(dir / "transfer.csv");
  if (cells.empty()) throw ConfigError(dir.string() + "/transfer.csv has no rows");
  const Campaign stored = campaign_from_manifest(dir / "manifest.json");
  // victim averages recomputed from the cells
  TransferReport report;
  report.norm = cells.front().norm;
  std::map<std::pair<std::string, double>, std::pair<double, int>> acc;
  std::vector<std::pair<std::string, double>> order;
  std::map<std::pair<std::string, double>, double> mag;
  for (const auto& cell : cells) {
    const auto key = std::make_pair(cell.method, cell.epsilon);
    if (!acc.count(key)) order.push_back(key);
    acc[key].first += cell.success_rate;
    acc[key].second += 1;
    mag[key] = cell.mean_discrepancy;
  }
  for (const auto& key : order) {
    MethodSummary s;
    s.method = key.first;
    s.epsilon = key.second;
    s.victim_average = acc[key].first / acc[key].second;
    s.mean_discrepancy = mag[key];
    report.summaries.push_back(s);
  }
  fmt::print("campaign {} ({} cells)\n", hex64(stored.hash()), cells.size());
  fmt::print("{:<22} {:>10} {:>9} {:>10}\n", "method", "epsilon", "victims", "|dh|");
  for (const auto& s : report.summaries) {
    fmt::print("{:<22} {:>10.6g} {:>9} {:>10.4f}\n", s.method, s.epsilon, pct(s.victim_average), s.mean_discrepancy);
  }
  const std::vector<std::string> corr{"ifgsm", "ifgsm+rr", "ifgsm+en", "ifgsm+svr"};
  std::vector<double> eps;
  for (const auto& s : report.summaries) {
    if (std::find(eps.begin(), eps.end(), s.epsilon) == eps.end()) eps.push_back(s.epsilon);
  }
  for (double e : eps) {
    try {
      const auto r = correlation_report(report, corr, e);
      fmt::print("magnitude/success Pearson r at epsilon {:.6g}: {:.4f}\n", e, r.pearson_r);
    } catch (const Error&) {
      // methods missing from this campaign
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Intermediate-level transfer attack lab"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  Options o;

  auto* dataset = app.add_subcommand("dataset", "Generate the synthetic set (or check an IDX set) and export IDX files");
  add_common(dataset, o);
  bind(dataset, o, "--train-count", "data.train_count", "Synthetic training images");
  bind(dataset, o, "--test-count", "data.test_count", "Synthetic test images");
  bind(dataset, o, "--data-seed", "data.seed", "Synthetic data seed");

  auto* train = app.add_subcommand("train", "Train every missing zoo checkpoint");
  add_common(train, o);
  bind(train, o, "--archs", "zoo.archs", "Architectures, comma separated");
  bind(train, o, "--seeds", "zoo.seeds", "Seeds, comma separated");

  auto* attack = app.add_subcommand("attack", "Run a baseline attack on the evaluation set and dump trajectories");
  add_common(attack, o);
  bind(attack, o, "--baseline", "attack.baseline", "ifgsm, pgd or linbp");
  bind(attack, o, "--norm", "attack.norm", "linf or l2");
  bind(attack, o, "--epsilon", "attack.epsilon", "Perturbation budget, e.g. 8/255");
  bind(attack, o, "--alpha", "attack.alpha", "Step size, 0 for the default");
  bind(attack, o, "--iterations", "attack.iterations", "Attack iterations T");
  bind(attack, o, "--samples", "attack.samples", "Sampled iterates p");
  bind(attack, o, "--runs", "attack.runs", "Runs R for pgd/linbp");
  bind(attack, o, "--linbp-relus", "attack.linbp_relus", "ReLUs with linear backward for linbp");
  bind(attack, o, "--trajectories", "io.trajectories", "Trajectory output directory");

  auto* fit = app.add_subcommand("fit-guide", "Fit one directional guide per input from dumped trajectories");
  add_common(fit, o);
  bind(fit, o, "--regressor", "guide.regressor", "rr, rr_woodbury, rr_approx, elasticnet or svr");
  bind(fit, o, "--lambda", "guide.lambda", "Ridge penalty");
  bind(fit, o, "--lambda1", "guide.lambda1", "Elastic net l1 penalty");
  bind(fit, o, "--lambda2", "guide.lambda2", "Elastic net l2 penalty");
  bind(fit, o, "--C", "guide.C", "SVR box bound");
  bind(fit, o, "--e", "guide.e", "SVR tube half-width");
  bind(fit, o, "--trajectories", "io.trajectories", "Trajectory directory");
  bind(fit, o, "--guides", "io.guides", "Guide output directory");

  auto* ref = app.add_subcommand("refine", "Refine the evaluation set along fitted guides");
  add_common(ref, o);
  bind(ref, o, "--norm", "attack.norm", "linf or l2");
  bind(ref, o, "--epsilon", "attack.epsilon", "Perturbation budget");
  bind(ref, o, "--iterations", "refine.iterations", "Refinement iterations");
  bind(ref, o, "--alpha", "refine.alpha", "Refinement step size, 0 for the default");
  bind(ref, o, "--objective", "refine.objective", "projection or normalized");
  bind(ref, o, "--guides", "io.guides", "Guide directory");

  auto* eval = app.add_subcommand("evaluate", "Transfer success of adversarial batches on the victims");
  add_common(eval, o);
  bind(eval, o, "--batch", "io.batch", "Batch files, comma separated");
  bind(eval, o, "--epsilon", "attack.epsilon", "Budget recorded in the CSV");

  auto* sweep = app.add_subcommand("sweep", "Sweep runs, lambda1, lambda, C, epsilon or split depth");
  add_common(sweep, o);
  for (const auto& [flag, param] : std::vector<std::pair<std::string, std::string>>{
           {"--runs", "runs"}, {"--lambda1", "lambda1"}, {"--lambda", "lambda"}, {"--C", "C"}, {"--epsilons", "epsilon"},
           {"--splits", "split"}}) {
    sweep->add_option_function<std::string>(
        flag,
        [&o, param](const std::string& v) {
          o.flags["sweep.param"] = param;
          o.flags["sweep.values"] = v;
        },
        "Sweep " + param + " over a comma separated list [sweep.param, sweep.values]");
  }
  bind(sweep, o, "--guide", "sweep.guide", "Guide for run, epsilon and split sweeps");
  bind(sweep, o, "--baseline", "sweep.baseline", "pgd or linbp for run sweeps");
  bind(sweep, o, "--epsilon", "attack.epsilon", "Budget for non-epsilon sweeps");

  auto* report = app.add_subcommand("report", "Summarize a results directory");
  add_common(report, o);
  bind(report, o, "--results", "io.results", "Directory with transfer.csv and manifest.json");

  auto* campaign = app.add_subcommand("campaign", "Run a full campaign and write reports");
  add_common(campaign, o);
  bind(campaign, o, "--methods", "campaign.methods", "Methods, comma separated");
  bind(campaign, o, "--epsilons", "campaign.epsilons", "Budgets, comma separated");
  bind(campaign, o, "--norm", "attack.norm", "linf or l2");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  spdlog::set_level(o.quiet ? spdlog::level::warn : o.verbosity > 0 ? spdlog::level::debug : spdlog::level::info);
  try {
    const KeyValueConfig cfg = resolve(o);
    if (*dataset) return cmd_dataset(cfg);
    if (*train) return cmd_train(cfg);
    if (*attack) return cmd_attack(cfg);
    if (*fit) return cmd_fit_guide(cfg);
    if (*ref) return cmd_refine(cfg);
    if (*eval) return cmd_evaluate(cfg);
    if (*sweep) return cmd_sweep(cfg);
    if (*report) return cmd_report(cfg);
    if (*campaign) return cmd_campaign(cfg);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 3;
  }
  return 2;
}

#pragma once

// Campaign orchestration: zoo caching, evaluation-set filtering, per-method
// adversarial batches, transfer reports, sweeps and report files.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilalab/attack.hpp"
#include "ilalab/config.hpp"
#include "ilalab/dataset.hpp"
#include "ilalab/guide.hpp"
#include "ilalab/model.hpp"
#include "ilalab/refine.hpp"

namespace ilalab {

// ------------------------------------------------------------------ methods

enum class Baseline { ifgsm, pgd, linbp, rand_input, rand_feature };

// `<baseline>[+<guide>[@value]][+norm]`, e.g. "ifgsm", "ifgsm+rr", "pgd10+svr",
// "linbp10+rr", "rand_input+rr", "ifgsm+en@0.1", "ifgsm+svr+norm".
// Baselines: ifgsm, pgd[R], linbp[R], rand_input, rand_feature (the last two
// need a guide). Guides: rr, rr_primal, rr_approx, en, svr, ila. The @value
// overrides lambda (rr), lambda1 (en) or C (svr).
struct MethodSpec {
  std::string text;
  Baseline baseline = Baseline::ifgsm;
  int runs = 1;             // pgd / linbp run count
  bool multi_run = false;   // linbp with random restarts (linbpR)
  std::string guide;        // empty: the baseline result itself
  std::optional<double> value;
  bool normalized = false;

  static MethodSpec parse(std::string_view text);
  bool refines() const { return !guide.empty(); }
};

// ------------------------------------------------------------------ config

struct ZooSpec {
  std::filesystem::path dir = "zoo";
  std::vector<std::string> archs;  // empty: every registered architecture
  std::vector<std::uint64_t> seeds{1, 2};
};

struct Campaign {
  SyntheticOptions data;
  std::filesystem::path data_dir;  // IDX directory; empty selects the synthetic set
  ZooSpec zoo;
  std::string source = "cnn-small-s1";
  std::vector<std::string> victims;  // empty: every zoo model except the source
  std::optional<std::size_t> split;  // overrides the registry split of the source
  std::vector<std::string> methods{"ifgsm", "ifgsm+ila", "ifgsm+rr", "ifgsm+en", "ifgsm+svr"};
  std::vector<double> epsilons{16.0 / 255, 8.0 / 255, 4.0 / 255};
  std::size_t n_inputs = 200;
  std::uint64_t seed = 0;
  AttackConfig attack;
  RefineConfig refine;
  GuideSpec guide;
  std::size_t linbp_relus = 2;
  int random_samples = 10;  // p for random guides
  int threads = 0;          // 0: hardware concurrency
  bool save_batches = true;
  std::filesystem::path out_dir = "results";

  static Campaign from_config(const KeyValueConfig& cfg);
  KeyValueConfig to_config() const;
  void validate() const;
  std::uint64_t hash() const;
};

// Every key a config file may contain; io.* and sweep.* are read by the CLI.
const std::vector<std::string>& campaign_config_keys();

// ------------------------------------------------------------------ data and zoo

Dataset load_dataset(const Campaign& campaign);
std::uint64_t dataset_hash(const Dataset& dataset);

std::vector<std::string> zoo_model_ids(const ZooSpec& zoo);
std::filesystem::path checkpoint_path(const ZooSpec& zoo, const std::string& model_id);
// Trains every checkpoint that is missing or was trained on a different dataset.
std::vector<Model> ensure_zoo(const ZooSpec& zoo, const Dataset& dataset);
// Loads existing checkpoints; throws ConfigError naming the first missing one.
std::vector<Model> load_zoo(const ZooSpec& zoo, const Dataset& dataset);

// First n test indices classified correctly by every model.
std::vector<std::size_t> select_eval_set(const ImageSet& test, std::span<const Model> models, std::size_t n);

// ------------------------------------------------------------------ reports

struct ReportCell {
  std::string method;
  Norm norm = Norm::linf;
  double epsilon = 0.0;
  std::string victim;
  double success_rate = 0.0;
  double mean_discrepancy = 0.0;
  double std_discrepancy = 0.0;
  std::size_t n_inputs = 0;
  std::uint64_t seed = 0;
};

struct MethodSummary {
  std::string method;
  double epsilon = 0.0;
  double victim_average = 0.0;
  double source_success = 0.0;
  double mean_discrepancy = 0.0;
  double std_discrepancy = 0.0;
};

struct StageTime {
  std::string stage;
  double seconds = 0.0;
};

struct TransferReport {
  std::string source;
  std::vector<std::string> victims;
  Norm norm = Norm::linf;
  std::uint64_t campaign_hash = 0;
  std::uint64_t seed = 0;
  std::vector<ReportCell> cells;  // method-major, then epsilon, then victim
  std::vector<MethodSummary> summaries;
  std::vector<StageTime> timings;

  const MethodSummary& summary(std::string_view method, double epsilon) const;
  double victim_average(std::string_view method, double epsilon) const {
    return summary(method, epsilon).victim_average;
  }
};

struct EvalContext {
  const ImageSet* test = nullptr;
  std::vector<std::size_t> eval_set;
  const SplitModel* source = nullptr;
  std::vector<const Model*> victims;
};

// Success rates of one batch against every victim and the source, with the
// source-feature discrepancy statistics. Throws ConfigError when a record
// is outside the evaluation set, repeats an index, or a victim is untrained.
struct BatchEvaluation {
  std::vector<double> victim_success;
  double source_success = 0.0;
  double mean_discrepancy = 0.0;
  double std_discrepancy = 0.0;
};
BatchEvaluation evaluate_transfer(const AdvBatch& batch, const EvalContext& ctx);

// Dataset, zoo, source split and evaluation set of a campaign. With
// train_missing unset a missing or stale zoo is a ConfigError.
struct Workspace {
  Dataset dataset;
  std::vector<Model> models;
  std::unique_ptr<SplitModel> source;
  EvalContext ctx;
  std::vector<StageTime> timings;
};
std::unique_ptr<Workspace> open_workspace(const Campaign& campaign, bool train_missing);

// Per-method adversarial batches at one epsilon.
std::vector<AdvBatch> generate_batches(const Campaign& campaign, const EvalContext& ctx, double epsilon);

// Full campaign: zoo, evaluation set, batches for every (method, epsilon), report.
TransferReport run_campaign(const Campaign& campaign);

enum class SweepParam { runs, lambda1, lambda, C, epsilon, split };
const char* sweep_param_name(SweepParam p);
SweepParam parse_sweep_param(std::string_view text);

struct SweepSpec {
  SweepParam param = SweepParam::runs;
  std::vector<double> values;
  std::string guide = "rr";      // runs, epsilon and split sweeps
  std::string baseline = "pgd";  // runs sweep: pgd or linbp
};

// One report per sweep value, seeds identical across points.
std::vector<TransferReport> run_sweep(const Campaign& campaign, const SweepSpec& sweep);

struct CorrelationRow {
  std::string method;
  double magnitude = 0.0;
  double success = 0.0;
};
struct CorrelationReport {
  double pearson_r = 0.0;
  std::vector<CorrelationRow> rows;
};
// Pearson r of method-mean magnitude against victim-average success at one
// epsilon. Throws ConfigError on fewer than 3 methods, DegenerateError on
// zero variance.
CorrelationReport correlation_report(const TransferReport& report, std::span<const std::string> methods,
                                     double epsilon);
double pearson(std::span<const double> x, std::span<const double> y);

// transfer.csv, manifest.json and plot/*.dat under dir; each file written atomically.
std::string report_csv(const TransferReport& report);
std::string manifest_json(const TransferReport& report, const Campaign& campaign);
// Campaign stored in a manifest.json.
Campaign campaign_from_manifest(const std::filesystem::path& path);
void emit_reports(const TransferReport& report, const Campaign& campaign, const std::filesystem::path& dir);
void emit_sweep(std::span<const TransferReport> reports, const SweepSpec& sweep, const std::filesystem::path& dir);

// Reads transfer.csv back into cells.
std::vector<ReportCell> read_report_csv(const std::filesystem::path& path);

}  // namespace ilalab

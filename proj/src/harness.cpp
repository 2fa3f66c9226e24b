#include "ilalab/harness.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <json.hpp>

#include "ilalab/binary_io.hpp"
#include "ilalab/errors.hpp"
#include "ilalab/rng.hpp"

#ifndef ILALAB_VERSION
#define ILALAB_VERSION "0.0.0"
#endif

namespace ilalab {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) { return fmt::format("{}", v); }

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first error.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads) : std::thread::hardware_concurrency();
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

int parse_count_suffix(std::string_view token, std::string_view prefix, const std::string& method) {
  const auto rest = token.substr(prefix.size());
  if (rest.empty()) return 1;
  int v = 0;
  const auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), v);
  if (ec != std::errc() || p != rest.data() + rest.size() || v < 1) {
    throw ConfigError("method '" + method + "': bad run count in '" + std::string(token) + "'");
  }
  return v;
}

const std::set<std::string>& guide_tokens() {
  static const std::set<std::string> t{"rr", "rr_primal", "rr_approx", "en", "svr", "ila"};
  return t;
}

std::string eps_label(Norm norm, double eps) {
  if (norm == Norm::linf) return fmt::format("{:g}-255", eps * 255.0);
  return fmt::format("{:g}", eps);
}

// ------------------------------------------------------------------ per-input crafting

struct InputTrajectories {
  std::optional<Trajectory> ifgsm;
  std::vector<Trajectory> pgd;
  std::optional<Trajectory> linbp;
  std::vector<Trajectory> linbp_runs;
};

struct Needs {
  bool ifgsm = false;
  int pgd = 0;
  bool linbp = false;
  int linbp_runs = 0;
};

Needs needs_of(std::span<const MethodSpec> methods) {
  Needs n;
  for (const auto& m : methods) {
    switch (m.baseline) {
      case Baseline::ifgsm:
      case Baseline::rand_input:
      case Baseline::rand_feature: n.ifgsm = true; break;
      case Baseline::pgd: n.pgd = std::max(n.pgd, m.runs); break;
      case Baseline::linbp:
        if (m.multi_run) n.linbp_runs = std::max(n.linbp_runs, m.runs);
        else n.linbp = true;
        break;
    }
  }
  return n;
}

GuideSpec guide_spec_for(const MethodSpec& m, const GuideSpec& base) {
  GuideSpec g = base;
  if (m.guide == "rr") {
    g.regressor = Regressor::rr_woodbury;
    if (m.value) g.lambda = *m.value;
  } else if (m.guide == "rr_primal") {
    g.regressor = Regressor::rr;
    if (m.value) g.lambda = *m.value;
  } else if (m.guide == "rr_approx") {
    g.regressor = Regressor::rr_approx;
  } else if (m.guide == "en") {
    g.regressor = Regressor::elasticnet;
    if (m.value) g.lambda1 = *m.value;
  } else if (m.guide == "svr") {
    g.regressor = Regressor::svr;
    if (m.value) g.C = *m.value;
  }
  return g;
}

class InputCrafter {
 public:
  InputCrafter(const Campaign& c, const SplitModel& sm, double eps) : c_(c), sm_(sm) {
    attack_ = c.attack;
    attack_.epsilon = eps;
    attack_.seed = c.seed;
    attack_.runs = 1;
    attack_.random_init = false;
    refine_ = c.refine;
    refine_.epsilon = eps;
    refine_.norm = attack_.norm;
  }

  std::vector<std::vector<float>> craft(std::span<const MethodSpec> methods, std::span<const float> x, int y,
                                        std::uint64_t index) const {
    const Needs need = needs_of(methods);
    InputTrajectories tr;
    if (need.ifgsm) tr.ifgsm = ifgsm(sm_, x, y, attack_);
    if (need.pgd > 0) {
      AttackConfig pc = attack_;
      pc.runs = need.pgd;
      pc.random_init = true;
      tr.pgd = pgd_multirun(sm_, x, y, pc, index);
    }
    if (need.linbp) tr.linbp = linbp_attack(sm_, x, y, attack_, c_.linbp_relus);
    if (need.linbp_runs > 0) {
      AttackConfig pc = attack_;
      pc.runs = need.linbp_runs;
      pc.random_init = true;
      tr.linbp_runs = linbp_multirun(sm_, x, y, pc, c_.linbp_relus, index);
    }

    std::map<std::string, DirectionalGuide> guides;
    std::vector<std::vector<float>> out;
    out.reserve(methods.size());
    for (const auto& m : methods) {
      std::span<const Trajectory> trajs = trajectories(m, tr);
      if (!m.refines()) {
        out.push_back(trajs.front().final_input);
        continue;
      }
      const std::string key = m.text.substr(0, m.text.size() - (m.normalized ? 5 : 0));
      auto it = guides.find(key);
      if (it == guides.end()) it = guides.emplace(key, fit(m, trajs, x, y, index)).first;
      const auto& guide = it->second;
      std::span<const float> start;
      if (refine_.start_from_baseline) start = trajs.front().final_input;
      if (guide.is_zero()) {
        spdlog::warn("input {}: {} produced a zero guide; keeping the start point", index, m.text);
      }
      out.push_back(m.normalized ? refine_normalized(sm_, x, guide, refine_, start)
                                 : refine(sm_, x, guide, refine_, start));
    }
    return out;
  }

 private:
  std::span<const Trajectory> trajectories(const MethodSpec& m, const InputTrajectories& tr) const {
    switch (m.baseline) {
      case Baseline::ifgsm:
      case Baseline::rand_input:
      case Baseline::rand_feature: return std::span<const Trajectory>(&*tr.ifgsm, 1);
      case Baseline::pgd: return std::span<const Trajectory>(tr.pgd).first(static_cast<std::size_t>(m.runs));
      case Baseline::linbp:
        if (m.multi_run) return std::span<const Trajectory>(tr.linbp_runs).first(static_cast<std::size_t>(m.runs));
        return std::span<const Trajectory>(&*tr.linbp, 1);
    }
    throw ConfigError("unhandled baseline");
  }

  DirectionalGuide fit(const MethodSpec& m, std::span<const Trajectory> trajs, std::span<const float> x, int y,
                       std::uint64_t index) const {
    const GuideSpec spec = guide_spec_for(m, c_.guide);
    if (m.baseline == Baseline::rand_input) {
      const double sigma = calibrate_sigma_input(trajs.front(), x);
      return random_guide_input(sm_, x, y, c_.random_samples, sigma, derive_seed(c_.seed, {index, 1}), spec);
    }
    if (m.baseline == Baseline::rand_feature) {
      const double sigma = calibrate_sigma_feature(trajs.front());
      return random_guide_feature(sm_, x, y, c_.random_samples, sigma, derive_seed(c_.seed, {index, 2}), spec);
    }
    try {
      if (m.guide == "ila") return ila_guide(trajs.front());
      return fit_guide(build_dataset(trajs), spec);
    } catch (const DegenerateError& e) {
      // no movement in feature space; a zero guide leaves the benign input
      spdlog::warn("input {}: {}: {}", index, m.text, e.what());
      DirectionalGuide g;
      g.method = m.guide;
      g.anchor = trajs.front().anchor();
      g.w.assign(g.anchor.size(), 0.0);
      g.spec = spec;
      return g;
    }
  }

  const Campaign& c_;
  const SplitModel& sm_;
  AttackConfig attack_;
  RefineConfig refine_;
};

const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys{
      "data.dir",          "data.seed",          "data.train_count",     "data.test_count",
      "data.noise",        "data.contrast_min",  "data.contrast_max",    "data.jitter",
      "zoo.dir",           "zoo.archs",          "zoo.seeds",            "campaign.source",
      "campaign.victims",  "campaign.split",     "campaign.methods",     "campaign.epsilons",
      "campaign.n_inputs", "campaign.seed",      "campaign.threads",     "campaign.save_batches",
      "campaign.out",      "attack.norm",        "attack.epsilon",       "attack.alpha",
      "attack.iterations", "attack.samples",     "attack.sampling",      "attack.runs",
      "attack.linbp_relus", "refine.iterations", "refine.alpha",         "refine.floor",
      "refine.start",      "refine.objective",   "guide.regressor",      "guide.lambda",
      "guide.lambda1",     "guide.lambda2",      "guide.C",              "guide.e",
      "guide.tolerance",   "guide.max_sweeps",   "guide.random_samples", "attack.baseline",
      "io.trajectories",   "io.guides",          "io.batch",             "io.results",
      "sweep.param",       "sweep.values",       "sweep.guide",          "sweep.baseline",
  };
  return keys;
}

std::vector<double> default_epsilons(Norm norm) {
  if (norm == Norm::linf) return {16.0 / 255, 8.0 / 255, 4.0 / 255};
  return {0.5, 0.25, 0.125};
}

}  // namespace

// ------------------------------------------------------------------ MethodSpec

MethodSpec MethodSpec::parse(std::string_view text) {
  MethodSpec m;
  m.text = std::string(text);
  const auto parts = split_list(text, '+');
  if (parts.empty() || parts.size() > 3) throw ConfigError("method '" + m.text + "': expected baseline[+guide][+norm]");
  for (const auto& p : parts) {
    if (p.empty()) throw ConfigError("method '" + m.text + "': empty component");
  }
  const std::string& b = parts[0];
  if (b == "ifgsm") {
    m.baseline = Baseline::ifgsm;
  } else if (starts_with(b, "pgd")) {
    m.baseline = Baseline::pgd;
    m.runs = parse_count_suffix(b, "pgd", m.text);
  } else if (starts_with(b, "linbp")) {
    m.baseline = Baseline::linbp;
    m.multi_run = b != "linbp";
    m.runs = parse_count_suffix(b, "linbp", m.text);
  } else if (b == "rand_input") {
    m.baseline = Baseline::rand_input;
  } else if (b == "rand_feature") {
    m.baseline = Baseline::rand_feature;
  } else {
    throw ConfigError("method '" + m.text + "': unknown baseline '" + b + "'");
  }
  std::size_t next = 1;
  if (next < parts.size() && parts[next] != "norm") {
    std::string g = parts[next];
    if (const auto at = g.find('@'); at != std::string::npos) {
      m.value = parse_number(g.substr(at + 1));
      g = g.substr(0, at);
    }
    if (g == "elasticnet") g = "en";
    if (!guide_tokens().count(g)) throw ConfigError("method '" + m.text + "': unknown guide '" + g + "'");
    if (m.value && (g == "rr_approx" || g == "ila")) {
      throw ConfigError("method '" + m.text + "': guide '" + g + "' takes no @value");
    }
    if (m.value && !(*m.value >= 0.0 && std::isfinite(*m.value))) {
      throw ConfigError("method '" + m.text + "': @value must be finite and non-negative");
    }
    m.guide = g;
    ++next;
  }
  if (next < parts.size()) {
    if (parts[next] != "norm") throw ConfigError("method '" + m.text + "': unexpected '" + parts[next] + "'");
    if (m.guide.empty()) throw ConfigError("method '" + m.text + "': +norm needs a guide");
    m.normalized = true;
    ++next;
  }
  if (next != parts.size()) throw ConfigError("method '" + m.text + "': trailing components");
  if ((m.baseline == Baseline::rand_input || m.baseline == Baseline::rand_feature) && m.guide.empty()) {
    throw ConfigError("method '" + m.text + "': random guides need a regressor, e.g. " + b + "+rr");
  }
  if ((m.baseline == Baseline::rand_input || m.baseline == Baseline::rand_feature) && m.guide == "ila") {
    throw ConfigError("method '" + m.text + "': random guides are fitted, not taken from a trajectory");
  }
  return m;
}

// ------------------------------------------------------------------ Campaign

const std::vector<std::string>& campaign_config_keys() { return known_keys(); }

Campaign Campaign::from_config(const KeyValueConfig& cfg) {
  for (const auto& [key, value] : cfg.entries()) {
    if (std::find(known_keys().begin(), known_keys().end(), key) == known_keys().end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  Campaign c;
  c.data_dir = cfg.get_or("data.dir", "");
  c.data.seed = cfg.get_u64("data.seed", c.data.seed);
  c.data.train_count = static_cast<std::size_t>(cfg.get_int("data.train_count", static_cast<std::int64_t>(c.data.train_count)));
  c.data.test_count = static_cast<std::size_t>(cfg.get_int("data.test_count", static_cast<std::int64_t>(c.data.test_count)));
  c.data.noise_std = cfg.get_double("data.noise", c.data.noise_std);
  c.data.contrast_min = cfg.get_double("data.contrast_min", c.data.contrast_min);
  c.data.contrast_max = cfg.get_double("data.contrast_max", c.data.contrast_max);
  c.data.jitter = cfg.get_double("data.jitter", c.data.jitter);

  c.zoo.dir = cfg.get_or("zoo.dir", c.zoo.dir.string());
  if (cfg.has("zoo.archs")) c.zoo.archs = cfg.get_list("zoo.archs");
  if (cfg.has("zoo.seeds")) {
    c.zoo.seeds.clear();
    for (const auto& s : cfg.get_list("zoo.seeds")) c.zoo.seeds.push_back(static_cast<std::uint64_t>(parse_number(s)));
  }

  c.source = cfg.get_or("campaign.source", c.source);
  if (cfg.has("campaign.victims")) {
    c.victims = cfg.get_list("campaign.victims");
    if (c.victims.size() == 1 && c.victims[0] == "all") c.victims.clear();
  }
  if (cfg.has("campaign.split")) c.split = static_cast<std::size_t>(cfg.get_int("campaign.split", 0));
  if (cfg.has("campaign.methods")) c.methods = cfg.get_list("campaign.methods");
  c.n_inputs = static_cast<std::size_t>(cfg.get_int("campaign.n_inputs", static_cast<std::int64_t>(c.n_inputs)));
  c.seed = cfg.get_u64("campaign.seed", c.seed);
  c.threads = static_cast<int>(cfg.get_int("campaign.threads", c.threads));
  c.save_batches = cfg.get_bool("campaign.save_batches", c.save_batches);
  c.out_dir = cfg.get_or("campaign.out", c.out_dir.string());

  c.attack.norm = parse_norm(cfg.get_or("attack.norm", norm_name(c.attack.norm)));
  c.epsilons = default_epsilons(c.attack.norm);
  if (cfg.has("campaign.epsilons")) c.epsilons = cfg.get_doubles("campaign.epsilons");
  c.attack.epsilon = cfg.get_double("attack.epsilon", c.epsilons.size() > 1 ? c.epsilons[1] : c.epsilons.front());
  c.attack.alpha = cfg.get_double("attack.alpha", c.attack.alpha);
  c.attack.iterations = static_cast<int>(cfg.get_int("attack.iterations", c.attack.iterations));
  c.attack.samples = static_cast<int>(cfg.get_int("attack.samples", c.attack.samples));
  c.attack.sampling = parse_sample_strategy(cfg.get_or("attack.sampling", sample_strategy_name(c.attack.sampling)));
  c.attack.runs = static_cast<int>(cfg.get_int("attack.runs", c.attack.runs));
  c.linbp_relus = static_cast<std::size_t>(cfg.get_int("attack.linbp_relus", static_cast<std::int64_t>(c.linbp_relus)));

  c.refine.iterations = static_cast<int>(cfg.get_int("refine.iterations", c.refine.iterations));
  c.refine.alpha = cfg.get_double("refine.alpha", c.refine.alpha);
  c.refine.floor = cfg.get_double("refine.floor", c.refine.floor);
  c.refine.objective = parse_objective(cfg.get_or("refine.objective", objective_name(c.refine.objective)));
  const auto start = cfg.get_or("refine.start", "benign");
  if (start != "benign" && start != "baseline") throw ConfigError("refine.start must be 'benign' or 'baseline'");
  c.refine.start_from_baseline = start == "baseline";

  c.guide.regressor = parse_regressor(cfg.get_or("guide.regressor", regressor_name(c.guide.regressor)));
  c.guide.lambda = cfg.get_double("guide.lambda", c.guide.lambda);
  c.guide.lambda1 = cfg.get_double("guide.lambda1", c.guide.lambda1);
  c.guide.lambda2 = cfg.get_double("guide.lambda2", c.guide.lambda2);
  c.guide.C = cfg.get_double("guide.C", c.guide.C);
  c.guide.e = cfg.get_double("guide.e", c.guide.e);
  c.guide.tolerance = cfg.get_double("guide.tolerance", c.guide.tolerance);
  c.guide.max_sweeps = static_cast<int>(cfg.get_int("guide.max_sweeps", c.guide.max_sweeps));
  c.random_samples = static_cast<int>(cfg.get_int("guide.random_samples", c.random_samples));
  return c;
}

KeyValueConfig Campaign::to_config() const {
  KeyValueConfig k;
  auto join = [](const auto& items, auto&& fmt_one) {
    std::string s;
    for (const auto& v : items) s += (s.empty() ? "" : ",") + fmt_one(v);
    return s;
  };
  auto ident = [](const std::string& s) { return s; };
  if (!data_dir.empty()) k.set("data.dir", data_dir.string());
  k.set("data.seed", std::to_string(data.seed));
  k.set("data.train_count", std::to_string(data.train_count));
  k.set("data.test_count", std::to_string(data.test_count));
  k.set("data.noise", num(data.noise_std));
  k.set("data.contrast_min", num(data.contrast_min));
  k.set("data.contrast_max", num(data.contrast_max));
  k.set("data.jitter", num(data.jitter));
  k.set("zoo.dir", zoo.dir.string());
  if (!zoo.archs.empty()) k.set("zoo.archs", join(zoo.archs, ident));
  k.set("zoo.seeds", join(zoo.seeds, [](std::uint64_t s) { return std::to_string(s); }));
  k.set("campaign.source", source);
  k.set("campaign.victims", victims.empty() ? "all" : join(victims, ident));
  if (split) k.set("campaign.split", std::to_string(*split));
  k.set("campaign.methods", join(methods, ident));
  k.set("campaign.epsilons", join(epsilons, num));
  k.set("campaign.n_inputs", std::to_string(n_inputs));
  k.set("campaign.seed", std::to_string(seed));
  k.set("campaign.threads", std::to_string(threads));
  k.set("campaign.save_batches", save_batches ? "true" : "false");
  k.set("campaign.out", out_dir.string());
  k.set("attack.norm", norm_name(attack.norm));
  k.set("attack.epsilon", num(attack.epsilon));
  k.set("attack.alpha", num(attack.alpha));
  k.set("attack.iterations", std::to_string(attack.iterations));
  k.set("attack.samples", std::to_string(attack.samples));
  k.set("attack.sampling", sample_strategy_name(attack.sampling));
  k.set("attack.runs", std::to_string(attack.runs));
  k.set("attack.linbp_relus", std::to_string(linbp_relus));
  k.set("refine.iterations", std::to_string(refine.iterations));
  k.set("refine.alpha", num(refine.alpha));
  k.set("refine.floor", num(refine.floor));
  k.set("refine.objective", objective_name(refine.objective));
  k.set("refine.start", refine.start_from_baseline ? "baseline" : "benign");
  k.set("guide.regressor", regressor_name(guide.regressor));
  k.set("guide.lambda", num(guide.lambda));
  k.set("guide.lambda1", num(guide.lambda1));
  k.set("guide.lambda2", num(guide.lambda2));
  k.set("guide.C", num(guide.C));
  k.set("guide.e", num(guide.e));
  k.set("guide.tolerance", num(guide.tolerance));
  k.set("guide.max_sweeps", std::to_string(guide.max_sweeps));
  k.set("guide.random_samples", std::to_string(random_samples));
  return k;
}

void Campaign::validate() const {
  if (methods.empty()) throw ConfigError("campaign.methods is empty");
  for (const auto& m : methods) MethodSpec::parse(m);
  std::set<std::string> unique(methods.begin(), methods.end());
  if (unique.size() != methods.size()) throw ConfigError("campaign.methods lists a method twice");
  if (epsilons.empty()) throw ConfigError("campaign.epsilons is empty");
  for (double e : epsilons) {
    if (!(e > 0.0) || !std::isfinite(e)) throw ConfigError("campaign.epsilons must be positive and finite");
  }
  if (n_inputs == 0) throw ConfigError("campaign.n_inputs must be positive");
  if (std::find(victims.begin(), victims.end(), source) != victims.end()) {
    throw ConfigError("the source model '" + source + "' cannot also be a victim");
  }
  if (random_samples < 1) throw ConfigError("guide.random_samples must be positive");
  if (zoo.seeds.empty()) throw ConfigError("zoo.seeds is empty");
  for (const auto& a : zoo.archs) architecture(a);
  AttackConfig a = attack;
  for (double e : epsilons) {
    a.epsilon = e;
    a.validate();
  }
  RefineConfig r = refine;
  r.epsilon = epsilons.front();
  r.norm = attack.norm;
  r.validate();
  guide.validate();
}

std::uint64_t Campaign::hash() const {
  // output location and thread count do not affect results
  auto k = to_config();
  k.erase("campaign.out");
  k.erase("campaign.threads");
  k.erase("campaign.save_batches");
  k.erase("zoo.dir");
  return k.hash();
}

// ------------------------------------------------------------------ data and zoo

Dataset load_dataset(const Campaign& campaign) {
  Dataset ds = campaign.data_dir.empty() ? generate_synthetic(campaign.data) : load_idx_dir(campaign.data_dir);
  validate_dataset(ds);
  return ds;
}

std::uint64_t dataset_hash(const Dataset& dataset) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const ImageSet* set : {&dataset.train, &dataset.test}) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(set->pixels.data());
    h = fnv1a64(std::span<const std::uint8_t>(p, set->pixels.size() * sizeof(float)), h);
    const auto* l = reinterpret_cast<const std::uint8_t*>(set->labels.data());
    h = fnv1a64(std::span<const std::uint8_t>(l, set->labels.size() * sizeof(int)), h);
  }
  return h;
}

std::vector<std::string> zoo_model_ids(const ZooSpec& zoo) {
  const auto archs = zoo.archs.empty() ? zoo_architectures() : zoo.archs;
  std::vector<std::string> ids;
  for (const auto& a : archs) {
    for (auto s : zoo.seeds) ids.push_back(a + "-s" + std::to_string(s));
  }
  return ids;
}

std::filesystem::path checkpoint_path(const ZooSpec& zoo, const std::string& model_id) {
  return zoo.dir / (model_id + ".ilaf");
}

namespace {

std::filesystem::path zoo_manifest(const ZooSpec& zoo) { return zoo.dir / "zoo.manifest"; }

std::optional<std::string> read_zoo_stamp(const ZooSpec& zoo) {
  const auto p = zoo_manifest(zoo);
  if (!std::filesystem::exists(p)) return std::nullopt;
  const auto cfg = KeyValueConfig::load(p);
  if (!cfg.has("dataset_hash")) return std::nullopt;
  return cfg.get("dataset_hash");
}

std::pair<std::string, std::uint64_t> split_model_id(const std::string& id) {
  const auto pos = id.rfind("-s");
  if (pos == std::string::npos) throw ConfigError("model id '" + id + "' is not <arch>-s<seed>");
  return {id.substr(0, pos), static_cast<std::uint64_t>(parse_number(id.substr(pos + 2)))};
}

}  // namespace

std::vector<Model> ensure_zoo(const ZooSpec& zoo, const Dataset& dataset) {
  std::filesystem::create_directories(zoo.dir);
  const std::string stamp = hex64(dataset_hash(dataset));
  const auto existing = read_zoo_stamp(zoo);
  const bool stale = existing && *existing != stamp;
  if (stale) spdlog::warn("zoo at {} was trained on another dataset; retraining", zoo.dir.string());
  std::vector<Model> models;
  for (const auto& id : zoo_model_ids(zoo)) {
    const auto path = checkpoint_path(zoo, id);
    if (!stale && existing && std::filesystem::exists(path)) {
      models.push_back(Model::load(path));
      continue;
    }
    const auto [arch, seed] = split_model_id(id);
    TrainOptions opt;
    opt.epochs = default_epochs(arch);
    opt.lr = default_lr(arch);
    const auto t0 = Clock::now();
    Model m = train(Model::build(arch, seed), dataset, opt);
    spdlog::info("trained {} in {:.1f}s: train acc {:.4f}, test acc {:.4f}", id, seconds_since(t0),
                 m.stats.train_accuracy, m.stats.test_accuracy);
    m.save(path);
    models.push_back(std::move(m));
  }
  write_file_atomic(zoo_manifest(zoo), "dataset_hash = " + stamp + "\n");
  return models;
}

std::vector<Model> load_zoo(const ZooSpec& zoo, const Dataset& dataset) {
  const auto stamp = read_zoo_stamp(zoo);
  if (!stamp) {
    throw ConfigError("no trained zoo in '" + zoo.dir.string() + "'; run `ilalab train` first");
  }
  if (*stamp != hex64(dataset_hash(dataset))) {
    throw ConfigError("zoo in '" + zoo.dir.string() + "' was trained on a different dataset; rerun `ilalab train`");
  }
  std::vector<Model> models;
  for (const auto& id : zoo_model_ids(zoo)) {
    const auto path = checkpoint_path(zoo, id);
    if (!std::filesystem::exists(path)) {
      throw ConfigError("missing checkpoint " + path.string() + "; run `ilalab train` first");
    }
    models.push_back(Model::load(path));
  }
  return models;
}

std::vector<std::size_t> select_eval_set(const ImageSet& test, std::span<const Model> models, std::size_t n) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < test.size() && idx.size() < n; ++i) {
    bool ok = true;
    for (const auto& m : models) {
      if (m.predict(test.image(i)) != test.labels[i]) {
        ok = false;
        break;
      }
    }
    if (ok) idx.push_back(i);
  }
  if (idx.empty()) throw ConfigError("no test input is classified correctly by every model");
  if (idx.size() < n) spdlog::warn("only {} of the requested {} inputs pass the all-correct filter", idx.size(), n);
  return idx;
}

// ------------------------------------------------------------------ evaluation

const MethodSummary& TransferReport::summary(std::string_view method, double epsilon) const {
  for (const auto& s : summaries) {
    if (s.method == method && s.epsilon == epsilon) return s;
  }
  throw ConfigError("report has no method '" + std::string(method) + "' at epsilon " + num(epsilon));
}

BatchEvaluation evaluate_transfer(const AdvBatch& batch, const EvalContext& ctx) {
  if (!ctx.test || !ctx.source) throw ConfigError("evaluation context is incomplete");
  for (const Model* v : ctx.victims) {
    if (v->stats.epochs == 0) throw ConfigError("victim " + v->id() + " is untrained");
  }
  if (batch.input_size != ctx.test->image_size()) throw ConfigError("batch input size differs from the dataset");
  if (batch.records.empty()) throw ConfigError("batch '" + batch.method + "' has no records");
  const std::set<std::size_t> allowed(ctx.eval_set.begin(), ctx.eval_set.end());
  std::set<std::size_t> seen;
  BatchEvaluation ev;
  ev.victim_success.assign(ctx.victims.size(), 0.0);
  std::vector<double> mags;
  mags.reserve(batch.records.size());
  for (const auto& rec : batch.records) {
    if (!allowed.count(rec.index)) {
      throw ConfigError("batch '" + batch.method + "' record " + std::to_string(rec.index) +
                        " is not in the evaluation set");
    }
    if (!seen.insert(rec.index).second) {
      throw ConfigError("batch '" + batch.method + "' repeats record " + std::to_string(rec.index));
    }
    if (rec.image.size() != batch.input_size) throw ConfigError("batch '" + batch.method + "' has a short record");
    if (rec.label != ctx.test->labels[rec.index]) {
      throw ConfigError("batch '" + batch.method + "' record " + std::to_string(rec.index) + " has a wrong label");
    }
    for (std::size_t v = 0; v < ctx.victims.size(); ++v) {
      ev.victim_success[v] += misclassified(*ctx.victims[v], rec.image, rec.label) ? 1.0 : 0.0;
    }
    ev.source_success += misclassified(ctx.source->model(), rec.image, rec.label) ? 1.0 : 0.0;
    mags.push_back(discrepancy_magnitude(*ctx.source, ctx.test->image(rec.index), rec.image));
  }
  const double n = static_cast<double>(batch.records.size());
  for (auto& s : ev.victim_success) s /= n;
  ev.source_success /= n;
  double mean = 0.0;
  for (double m : mags) mean += m;
  mean /= n;
  double var = 0.0;
  for (double m : mags) var += (m - mean) * (m - mean);
  ev.mean_discrepancy = mean;
  ev.std_discrepancy = std::sqrt(var / n);
  return ev;
}

std::vector<AdvBatch> generate_batches(const Campaign& campaign, const EvalContext& ctx, double epsilon) {
  std::vector<MethodSpec> methods;
  for (const auto& m : campaign.methods) methods.push_back(MethodSpec::parse(m));
  const InputCrafter crafter(campaign, *ctx.source, epsilon);
  std::vector<std::vector<std::vector<float>>> crafted(ctx.eval_set.size());
  parallel_for(ctx.eval_set.size(), campaign.threads, [&](std::size_t i) {
    const auto idx = ctx.eval_set[i];
    crafted[i] = crafter.craft(methods, ctx.test->image(idx), ctx.test->labels[idx], idx);
  });
  std::vector<std::string> victim_ids;
  for (const Model* v : ctx.victims) victim_ids.push_back(v->id());
  std::vector<AdvBatch> batches(methods.size());
  for (std::size_t k = 0; k < methods.size(); ++k) {
    auto& b = batches[k];
    b.method = methods[k].text;
    b.cfg_hash = campaign.hash();
    b.source_id = ctx.source->model().id();
    b.victim_ids = victim_ids;
    b.input_size = ctx.test->image_size();
    for (std::size_t i = 0; i < ctx.eval_set.size(); ++i) {
      const auto idx = ctx.eval_set[i];
      b.records.push_back({idx, ctx.test->labels[idx], std::move(crafted[i][k])});
    }
  }
  return batches;
}

std::unique_ptr<Workspace> open_workspace(const Campaign& campaign, bool train_missing) {
  auto ws = std::make_unique<Workspace>();
  auto t0 = Clock::now();
  ws->dataset = load_dataset(campaign);
  ws->timings.push_back({"dataset", seconds_since(t0)});

  t0 = Clock::now();
  ws->models = train_missing ? ensure_zoo(campaign.zoo, ws->dataset) : load_zoo(campaign.zoo, ws->dataset);
  ws->timings.push_back({"zoo", seconds_since(t0)});

  const Model* source = nullptr;
  for (const auto& m : ws->models) {
    if (m.id() == campaign.source) source = &m;
  }
  if (!source) throw ConfigError("source model '" + campaign.source + "' is not in the zoo");
  auto& victims = ws->ctx.victims;
  if (campaign.victims.empty()) {
    for (const auto& m : ws->models) {
      if (&m != source) victims.push_back(&m);
    }
  } else {
    for (const auto& id : campaign.victims) {
      const auto it = std::find_if(ws->models.begin(), ws->models.end(), [&](const Model& m) { return m.id() == id; });
      if (it == ws->models.end()) throw ConfigError("victim '" + id + "' is not in the zoo");
      victims.push_back(&*it);
    }
  }
  if (victims.empty()) throw ConfigError("campaign has no victims");
  ws->source = std::make_unique<SplitModel>(*source, campaign.split.value_or(default_split(source->arch_id())));
  ws->ctx.source = ws->source.get();
  ws->ctx.test = &ws->dataset.test;

  t0 = Clock::now();
  std::vector<Model> filter{*source};
  for (const Model* v : victims) filter.push_back(*v);
  ws->ctx.eval_set = select_eval_set(ws->dataset.test, filter, campaign.n_inputs);
  ws->timings.push_back({"eval_set", seconds_since(t0)});
  return ws;
}

TransferReport run_campaign(const Campaign& campaign) {
  campaign.validate();
  TransferReport report;
  report.norm = campaign.attack.norm;
  report.campaign_hash = campaign.hash();
  report.seed = campaign.seed;

  const auto ws = open_workspace(campaign, true);
  const EvalContext& ctx = ws->ctx;
  const auto& victims = ctx.victims;
  report.timings = ws->timings;
  report.source = ctx.source->model().id();
  for (const Model* v : victims) report.victims.push_back(v->id());
  spdlog::info("campaign {}: source {}, {} victims, {} inputs, {} methods x {} epsilons", hex64(report.campaign_hash),
               report.source, victims.size(), ctx.eval_set.size(), campaign.methods.size(), campaign.epsilons.size());
  Clock::time_point t0;

  // results[method][eps]
  std::vector<std::vector<BatchEvaluation>> results(campaign.methods.size());
  for (double eps : campaign.epsilons) {
    t0 = Clock::now();
    auto batches = generate_batches(campaign, ctx, eps);
    report.timings.push_back({"attack@" + eps_label(report.norm, eps), seconds_since(t0)});
    t0 = Clock::now();
    for (std::size_t k = 0; k < batches.size(); ++k) {
      if (campaign.save_batches) {
        const auto dir = campaign.out_dir / "batches";
        std::filesystem::create_directories(dir);
        save_adv_batch(dir / (batches[k].method + "_" + eps_label(report.norm, eps) + ".ilab"), batches[k]);
      }
      results[k].push_back(evaluate_transfer(batches[k], ctx));
    }
    report.timings.push_back({"evaluate@" + eps_label(report.norm, eps), seconds_since(t0)});
  }

  for (std::size_t k = 0; k < campaign.methods.size(); ++k) {
    for (std::size_t e = 0; e < campaign.epsilons.size(); ++e) {
      const auto& ev = results[k][e];
      MethodSummary s;
      s.method = campaign.methods[k];
      s.epsilon = campaign.epsilons[e];
      s.source_success = ev.source_success;
      s.mean_discrepancy = ev.mean_discrepancy;
      s.std_discrepancy = ev.std_discrepancy;
      for (std::size_t v = 0; v < victims.size(); ++v) {
        report.cells.push_back({s.method, report.norm, s.epsilon, victims[v]->id(), ev.victim_success[v],
                                ev.mean_discrepancy, ev.std_discrepancy, ctx.eval_set.size(), campaign.seed});
        s.victim_average += ev.victim_success[v];
      }
      s.victim_average /= static_cast<double>(victims.size());
      report.summaries.push_back(s);
      spdlog::info("{:<20} eps {:<8} source {:6.2f}%  victims {:6.2f}%  |dh| {:.4f}", s.method,
                   eps_label(report.norm, s.epsilon), 100 * s.source_success, 100 * s.victim_average,
                   s.mean_discrepancy);
    }
  }
  return report;
}

// ------------------------------------------------------------------ sweeps

const char* sweep_param_name(SweepParam p) {
  switch (p) {
    case SweepParam::runs: return "runs";
    case SweepParam::lambda1: return "lambda1";
    case SweepParam::lambda: return "lambda";
    case SweepParam::C: return "C";
    case SweepParam::epsilon: return "epsilon";
    case SweepParam::split: return "split";
  }
  return "?";
}

SweepParam parse_sweep_param(std::string_view text) {
  for (auto p : {SweepParam::runs, SweepParam::lambda1, SweepParam::lambda, SweepParam::C, SweepParam::epsilon,
                 SweepParam::split}) {
    if (text == sweep_param_name(p)) return p;
  }
  throw ConfigError("unknown sweep parameter '" + std::string(text) + "'");
}

std::vector<TransferReport> run_sweep(const Campaign& campaign, const SweepSpec& sweep) {
  if (sweep.values.empty()) throw ConfigError("sweep has no values");
  for (std::size_t i = 0; i < sweep.values.size(); ++i) {
    if (!std::isfinite(sweep.values[i])) throw ConfigError("sweep values must be finite");
    if (i > 0 && !(sweep.values[i] > sweep.values[i - 1])) throw ConfigError("sweep values must be strictly increasing");
  }
  if (sweep.baseline != "pgd" && sweep.baseline != "linbp") throw ConfigError("sweep baseline must be pgd or linbp");
  std::vector<TransferReport> reports;
  for (double v : sweep.values) {
    Campaign c = campaign;
    c.out_dir = campaign.out_dir / fmt::format("{}_{}", sweep_param_name(sweep.param), num(v));
    switch (sweep.param) {
      case SweepParam::runs: {
        if (v < 1 || v != std::floor(v)) throw ConfigError("run counts must be positive integers");
        c.methods = {fmt::format("{}{}+{}", sweep.baseline, static_cast<int>(v), sweep.guide)};
        break;
      }
      case SweepParam::lambda1: c.methods = {"ifgsm+en@" + num(v)}; break;
      case SweepParam::lambda: c.methods = {"ifgsm+rr@" + num(v)}; break;
      case SweepParam::C: c.methods = {"ifgsm+svr@" + num(v)}; break;
      case SweepParam::epsilon:
        c.epsilons = {v};
        if (!sweep.guide.empty()) c.methods = {"ifgsm", "ifgsm+" + sweep.guide};
        break;
      case SweepParam::split:
        if (v < 1 || v != std::floor(v)) throw ConfigError("split depths must be positive integers");
        c.split = static_cast<std::size_t>(v);
        c.methods = {"ifgsm", "ifgsm+" + (sweep.guide.empty() ? std::string("rr") : sweep.guide)};
        break;
    }
    if (sweep.param != SweepParam::epsilon) c.epsilons = {campaign.attack.epsilon};
    reports.push_back(run_campaign(c));
  }
  return reports;
}

// ------------------------------------------------------------------ correlation

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("pearson: series lengths differ");
  if (x.size() < 3) throw ConfigError("correlation needs at least 3 points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) throw DegenerateError("degenerate variance");
  return sxy / std::sqrt(sxx * syy);
}

CorrelationReport correlation_report(const TransferReport& report, std::span<const std::string> methods,
                                     double epsilon) {
  if (methods.size() < 3) throw ConfigError("correlation needs at least 3 methods");
  CorrelationReport c;
  std::vector<double> mx, sy;
  for (const auto& m : methods) {
    const auto& s = report.summary(m, epsilon);
    c.rows.push_back({m, s.mean_discrepancy, s.victim_average});
    mx.push_back(s.mean_discrepancy);
    sy.push_back(s.victim_average);
  }
  c.pearson_r = pearson(mx, sy);
  return c;
}

// ------------------------------------------------------------------ report files

std::string report_csv(const TransferReport& report) {
  std::string out = "method,norm,epsilon,victim,success_rate,mean_discrepancy,std_discrepancy,n_inputs,seed\n";
  for (const auto& c : report.cells) {
    out += fmt::format("{},{},{:.9g},{},{:.6f},{:.6f},{:.6f},{},{}\n", c.method, norm_name(c.norm), c.epsilon,
                       c.victim, c.success_rate, c.mean_discrepancy, c.std_discrepancy, c.n_inputs, c.seed);
  }
  return out;
}

std::vector<ReportCell> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (trim(line) != "method,norm,epsilon,victim,success_rate,mean_discrepancy,std_discrepancy,n_inputs,seed") {
    throw IoError(path.string() + ": unexpected CSV header");
  }
  std::vector<ReportCell> cells;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_list(line, ',');
    if (f.size() != 9) throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 9 fields");
    try {
      ReportCell c;
      c.method = f[0];
      c.norm = parse_norm(f[1]);
      c.epsilon = parse_number(f[2]);
      c.victim = f[3];
      c.success_rate = parse_number(f[4]);
      c.mean_discrepancy = parse_number(f[5]);
      c.std_discrepancy = parse_number(f[6]);
      c.n_inputs = static_cast<std::size_t>(parse_number(f[7]));
      c.seed = std::stoull(f[8]);
      cells.push_back(std::move(c));
    } catch (const std::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cells;
}

std::string manifest_json(const TransferReport& report, const Campaign& campaign) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  const auto kv = campaign.to_config();
  for (const auto& [k, v] : kv.entries()) cfg[k] = v;
  j["config"] = cfg;
  j["config_hash"] = hex64(campaign.hash());
  j["versions"] = {{"ilalab", ILALAB_VERSION}, {"checkpoint", 1}, {"trajectory", 1}, {"guide", 1}, {"batch", 1}};
  j["source"] = report.source;
  j["victims"] = report.victims;
  j["seed"] = report.seed;
  nlohmann::ordered_json summaries = nlohmann::ordered_json::array();
  for (const auto& s : report.summaries) {
    summaries.push_back({{"method", s.method},
                         {"epsilon", s.epsilon},
                         {"victim_average", s.victim_average},
                         {"source_success", s.source_success},
                         {"mean_discrepancy", s.mean_discrepancy},
                         {"std_discrepancy", s.std_discrepancy}});
  }
  j["summaries"] = summaries;
  nlohmann::ordered_json times = nlohmann::ordered_json::object();
  for (const auto& t : report.timings) times[t.stage] = t.seconds;
  j["wall_clock_seconds"] = times;
  return j.dump(2) + "\n";
}

Campaign campaign_from_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  if (!j.contains("config") || !j["config"].is_object()) throw IoError(path.string() + ": no config object");
  KeyValueConfig cfg;
  for (const auto& [k, v] : j["config"].items()) cfg.set(k, v.get<std::string>());
  return Campaign::from_config(cfg);
}

void emit_reports(const TransferReport& report, const Campaign& campaign, const std::filesystem::path& dir) {
  try {
    std::filesystem::create_directories(dir / "plot");
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError("cannot create " + (dir / "plot").string() + ": " + e.what());
  }
  write_file_atomic(dir / "transfer.csv", report_csv(report));
  write_file_atomic(dir / "manifest.json", manifest_json(report, campaign));

  // success against epsilon per method, and magnitude against success per epsilon
  std::string eps_series = "# method epsilon victim_average source_success\n";
  for (const auto& s : report.summaries) {
    eps_series += fmt::format("{} {:.9g} {:.6f} {:.6f}\n", s.method, s.epsilon, s.victim_average, s.source_success);
  }
  write_file_atomic(dir / "plot" / "success_vs_epsilon.dat", eps_series);
  std::vector<double> eps;
  for (const auto& s : report.summaries) {
    if (std::find(eps.begin(), eps.end(), s.epsilon) == eps.end()) eps.push_back(s.epsilon);
  }
  for (double e : eps) {
    std::string series = "# method mean_discrepancy std_discrepancy victim_average\n";
    for (const auto& s : report.summaries) {
      if (s.epsilon == e) {
        series += fmt::format("{} {:.6f} {:.6f} {:.6f}\n", s.method, s.mean_discrepancy, s.std_discrepancy,
                              s.victim_average);
      }
    }
    write_file_atomic(dir / "plot" / ("magnitude_vs_success_" + eps_label(report.norm, e) + ".dat"), series);
  }
}

void emit_sweep(std::span<const TransferReport> reports, const SweepSpec& sweep, const std::filesystem::path& dir) {
  if (reports.size() != sweep.values.size()) throw ConfigError("sweep report count differs from its values");
  std::filesystem::create_directories(dir / "plot");
  std::string series = fmt::format("# {} method epsilon victim_average mean_discrepancy\n", sweep_param_name(sweep.param));
  std::string csv;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    for (const auto& s : reports[i].summaries) {
      series += fmt::format("{:.9g} {} {:.9g} {:.6f} {:.6f}\n", sweep.values[i], s.method, s.epsilon, s.victim_average,
                            s.mean_discrepancy);
    }
    const auto body = report_csv(reports[i]);
    csv += i == 0 ? body : body.substr(body.find('\n') + 1);
  }
  write_file_atomic(dir / "plot" / (std::string("sweep_") + sweep_param_name(sweep.param) + ".dat"), series);
  write_file_atomic(dir / (std::string("sweep_") + sweep_param_name(sweep.param) + ".csv"), csv);
}

}  // namespace ilalab

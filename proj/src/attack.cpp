#include "ilalab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "ilalab/binary_io.hpp"
#include "ilalab/errors.hpp"
#include "ilalab/rng.hpp"

namespace ilalab {
namespace {

constexpr std::uint32_t kTrajectoryVersion = 1;

// Nearest float that does not fall below (or above) the double bound.
float float_at_least(double v) {
  auto f = static_cast<float>(v);
  if (static_cast<double>(f) < v) f = std::nextafter(f, 2.0f);
  return f;
}
float float_at_most(double v) {
  auto f = static_cast<float>(v);
  if (static_cast<double>(f) > v) f = std::nextafter(f, -1.0f);
  return f;
}

void require_finite(std::span<const float> v, const char* what) {
  for (float x : v) {
    if (!std::isfinite(x)) throw NonFiniteError(std::string(what) + " contains a non-finite value");
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void random_start(std::vector<float>& x_adv, std::span<const float> x, const AttackConfig& cfg, Rng& rng) {
  const std::size_t n = x.size();
  if (cfg.norm == Norm::linf) {
    std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
    for (std::size_t i = 0; i < n; ++i) x_adv[i] = static_cast<float>(x[i] + u(rng));
  } else {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> d(n);
    double norm = 0.0;
    for (auto& v : d) {
      v = g(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double radius = cfg.epsilon * std::pow(u(rng), 1.0 / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      x_adv[i] = static_cast<float>(x[i] + (norm > 0 ? d[i] / norm * radius : 0.0));
    }
  }
  project(x_adv, x, cfg.norm, cfg.epsilon);
}

void ascent_step(std::vector<float>& x_adv, std::span<const float> grad, Norm norm, double alpha) {
  if (norm == Norm::linf) {
    const auto a = static_cast<float>(alpha);
    for (std::size_t i = 0; i < x_adv.size(); ++i) {
      const float g = grad[i];
      x_adv[i] += g > 0 ? a : (g < 0 ? -a : 0.0f);
    }
    return;
  }
  double sq = 0.0;
  for (float g : grad) sq += static_cast<double>(g) * g;
  if (sq == 0.0) return;
  const double scale = alpha / std::sqrt(sq);
  for (std::size_t i = 0; i < x_adv.size(); ++i) x_adv[i] = static_cast<float>(x_adv[i] + grad[i] * scale);
}

// One attack run; `model` supplies both gradients and the recorded forward values.
Trajectory run_attack(const SplitModel& model, std::span<const float> x, int y, const AttackConfig& cfg,
                      Rng* init_rng, std::uint32_t run) {
  const auto times = sample_times(cfg.iterations, cfg.samples, cfg.sampling);
  Trajectory traj;
  traj.run = run;
  std::vector<float> x_adv(x.begin(), x.end());
  if (init_rng != nullptr) {
    random_start(x_adv, x, cfg, *init_rng);
    auto benign = model.loss_and_feature(x, y);
    traj.samples.push_back({0, benign.loss, std::move(benign.feature), {x.begin(), x.end()}});
  }
  const double alpha = cfg.step();
  std::size_t next = traj.samples.size();
  for (int t = 0; t < cfg.iterations; ++t) {
    auto ev = loss_gradient(model, x_adv, y);
    if (next < times.size() && times[next] == t) {
      traj.samples.push_back({static_cast<std::uint32_t>(t), ev.loss, std::move(ev.feature), x_adv});
      ++next;
    }
    ascent_step(x_adv, ev.grad, cfg.norm, alpha);
    project(x_adv, x, cfg.norm, cfg.epsilon);
  }
  if (next < times.size()) {
    auto last = model.loss_and_feature(x_adv, y);
    traj.samples.push_back({static_cast<std::uint32_t>(cfg.iterations), last.loss, std::move(last.feature), x_adv});
  }
  traj.final_input = std::move(x_adv);
  return traj;
}

}  // namespace

const char* norm_name(Norm norm) { return norm == Norm::linf ? "linf" : "l2"; }

Norm parse_norm(std::string_view text) {
  if (text == "linf") return Norm::linf;
  if (text == "l2") return Norm::l2;
  throw ConfigError("unknown norm '" + std::string(text) + "' (expected linf or l2)");
}

const char* sample_strategy_name(SampleStrategy s) {
  switch (s) {
    case SampleStrategy::even: return "even";
    case SampleStrategy::first_p: return "first_p";
    case SampleStrategy::last_p: return "last_p";
  }
  return "?";
}

SampleStrategy parse_sample_strategy(std::string_view text) {
  if (text == "even") return SampleStrategy::even;
  if (text == "first_p") return SampleStrategy::first_p;
  if (text == "last_p") return SampleStrategy::last_p;
  throw ConfigError("unknown sampling strategy '" + std::string(text) + "' (expected even, first_p or last_p)");
}

double AttackConfig::step() const {
  if (alpha > 0) return alpha;
  return norm == Norm::linf ? 1.0 / 255.0 : epsilon / 5.0;
}

void AttackConfig::validate() const {
  // epsilon = 0 is accepted: it yields the degenerate all-benign trajectory.
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw ConfigError("attack.epsilon must be finite and >= 0");
  if (alpha < 0 || !std::isfinite(alpha)) throw ConfigError("attack.alpha must be > 0 (or 0 for the default)");
  if (iterations < 1) throw ConfigError("attack.iterations must be >= 1");
  if (samples < 1 || samples > iterations) throw ConfigError("attack.samples must satisfy 1 <= p <= iterations");
  if (runs < 1) throw ConfigError("attack.runs must be >= 1");
}

std::string AttackConfig::canonical() const {
  return std::string("norm=") + norm_name(norm) + ";epsilon=" + fmt_double(epsilon) + ";alpha=" + fmt_double(step()) +
         ";iterations=" + std::to_string(iterations) + ";samples=" + std::to_string(samples) +
         ";random_init=" + (random_init ? "1" : "0") + ";runs=" + std::to_string(runs) +
         ";seed=" + std::to_string(seed) + ";sampling=" + sample_strategy_name(sampling);
}

std::uint64_t AttackConfig::hash() const { return fnv1a64(canonical()); }

std::vector<int> sample_times(int iterations, int samples, SampleStrategy strategy) {
  if (iterations < 0 || samples < 1 || samples > std::max(iterations, 1)) {
    throw ConfigError("sample count p must satisfy 1 <= p <= iterations");
  }
  std::vector<int> t;
  t.reserve(static_cast<std::size_t>(samples) + 1);
  t.push_back(0);
  for (int j = 1; j <= samples; ++j) {
    switch (strategy) {
      case SampleStrategy::even:
        t.push_back(static_cast<int>(static_cast<long long>(j) * iterations / samples));
        break;
      case SampleStrategy::first_p:
        t.push_back(j);
        break;
      case SampleStrategy::last_p:
        t.push_back(iterations - samples + j);
        break;
    }
  }
  return t;
}

void project(std::span<float> x_adv, std::span<const float> x, Norm norm, double epsilon) {
  if (x_adv.size() != x.size()) throw ShapeError("project: size mismatch");
  if (norm == Norm::linf) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const float lo = float_at_least(std::max(0.0, static_cast<double>(x[i]) - epsilon));
      const float hi = float_at_most(std::min(1.0, static_cast<double>(x[i]) + epsilon));
      x_adv[i] = std::clamp(x_adv[i], lo, hi);
    }
    return;
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x_adv[i]) - x[i];
    sq += d * d;
  }
  const double norm2 = std::sqrt(sq);
  if (norm2 > epsilon) {
    const double scale = norm2 > 0 ? epsilon / norm2 : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      x_adv[i] = static_cast<float>(x[i] + (static_cast<double>(x_adv[i]) - x[i]) * scale);
    }
  }
  for (auto& v : x_adv) v = std::clamp(v, 0.0f, 1.0f);
}

std::vector<float> project_delta(std::span<const float> delta, Norm norm, double epsilon) {
  std::vector<float> out(delta.begin(), delta.end());
  if (norm == Norm::linf) {
    const float e = float_at_most(epsilon);
    for (auto& v : out) v = std::clamp(v, -e, e);
    return out;
  }
  double sq = 0.0;
  for (float v : delta) sq += static_cast<double>(v) * v;
  const double n = std::sqrt(sq);
  if (n > epsilon) {
    for (auto& v : out) v = static_cast<float>(v * (epsilon / n));
  }
  return out;
}

InputGradient loss_gradient(const SplitModel& model, std::span<const float> x, int y) {
  Tape tape;
  auto input = Tensor::from({1, model.input_size()}, x, true);
  auto feat = model.features(tape, input);
  const int labels[1] = {y};
  auto loss = tape.softmax_ce(model.head(tape, feat), labels);
  InputGradient out;
  out.loss = loss.item();
  out.feature.assign(feat.data().begin(), feat.data().end());
  tape.backward(loss);
  out.grad.assign(input.grad().begin(), input.grad().end());
  require_finite(out.grad, "input gradient");
  return out;
}

Trajectory ifgsm(const SplitModel& model, std::span<const float> x, int y, const AttackConfig& cfg) {
  cfg.validate();
  if (x.size() != model.input_size()) throw ShapeError("ifgsm: input size mismatch");
  return run_attack(model, x, y, cfg, nullptr, 0);
}

std::vector<Trajectory> pgd_multirun(const SplitModel& model, std::span<const float> x, int y,
                                     const AttackConfig& cfg, std::uint64_t input_index) {
  cfg.validate();
  if (x.size() != model.input_size()) throw ShapeError("pgd: input size mismatch");
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(cfg.runs));
  for (int r = 0; r < cfg.runs; ++r) {
    const auto run = static_cast<std::uint32_t>(r);
    if (cfg.random_init) {
      Rng rng(derive_seed(cfg.seed, {input_index, static_cast<std::uint64_t>(r)}));
      out.push_back(run_attack(model, x, y, cfg, &rng, run));
    } else {
      out.push_back(run_attack(model, x, y, cfg, nullptr, run));
    }
  }
  return out;
}

std::vector<Trajectory> linbp_multirun(const SplitModel& model, std::span<const float> x, int y,
                                       const AttackConfig& cfg, std::size_t n_linear_relus,
                                       std::uint64_t input_index) {
  if (n_linear_relus > model.model().relu_count()) {
    throw ConfigError("linbp: " + std::to_string(n_linear_relus) + " linear ReLUs requested but " +
                      model.model().id() + " has " + std::to_string(model.model().relu_count()));
  }
  const SplitModel linear(model.model().with_linear_relus(n_linear_relus), model.split());
  return pgd_multirun(linear, x, y, cfg, input_index);
}

Trajectory linbp_attack(const SplitModel& model, std::span<const float> x, int y, const AttackConfig& cfg,
                        std::size_t n_linear_relus) {
  AttackConfig single = cfg;
  single.runs = 1;
  single.random_init = false;
  return linbp_multirun(model, x, y, single, n_linear_relus).front();
}

bool misclassified(const Model& model, std::span<const float> x, int y) { return model.predict(x) != y; }

void save_trajectory(const std::filesystem::path& path, const Trajectory& traj, std::uint64_t input_index,
                     std::uint64_t cfg_hash, bool keep_inputs) {
  ByteWriter w;
  w.magic("ILAT");
  w.u32(kTrajectoryVersion);
  w.u64(input_index);
  w.u32(traj.run);
  w.u64(cfg_hash);
  const std::size_t m = traj.feature_dim();
  const std::size_t n = keep_inputs ? traj.final_input.size() : 0;
  w.u32(static_cast<std::uint32_t>(traj.samples.size()));
  w.u32(static_cast<std::uint32_t>(m));
  w.u32(static_cast<std::uint32_t>(n));
  for (const auto& s : traj.samples) {
    if (s.feature.size() != m) throw ShapeError("trajectory: inconsistent feature size");
    w.u32(s.t);
    w.f32(s.loss);
    w.f32s(s.feature);
    if (n > 0) {
      if (s.input.size() != n) throw IoError("trajectory: inputs requested but not recorded");
      w.f32s(s.input);
    }
  }
  if (n > 0) w.f32s(traj.final_input);
  append_crc(w);
  write_file_atomic(path, w.buffer());
}

TrajectoryFile load_trajectory(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string context = path.string();
  ByteReader r(checked_body(bytes, context), context);
  r.expect_magic("ILAT");
  const auto version = r.u32();
  if (version != kTrajectoryVersion) throw IoError(context + ": unsupported trajectory version " + std::to_string(version));
  TrajectoryFile f;
  f.input_index = r.u64();
  f.trajectory.run = r.u32();
  f.cfg_hash = r.u64();
  const auto count = r.u32();
  const auto m = r.u32();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    TrajectorySample s;
    s.t = r.u32();
    s.loss = r.f32();
    s.feature = r.f32s(m);
    if (n > 0) s.input = r.f32s(n);
    f.trajectory.samples.push_back(std::move(s));
  }
  if (n > 0) f.trajectory.final_input = r.f32s(n);
  if (r.remaining() != 0) throw IoError(context + ": trailing bytes in trajectory file");
  return f;
}

}  // namespace ilalab

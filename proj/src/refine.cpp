#include "ilalab/refine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <spdlog/spdlog.h>

#include "ilalab/binary_io.hpp"
#include "ilalab/errors.hpp"

namespace ilalab {
namespace {

constexpr std::uint32_t kBatchVersion = 1;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Positive rescaling to max |u_i| = 1 so the f32 seed neither overflows nor
// underflows; sign and normalized steps do not depend on the scale.
std::vector<float> to_seed(const std::vector<double>& u) {
  double mx = 0.0;
  for (double v : u) mx = std::max(mx, std::abs(v));
  std::vector<float> out(u.size(), 0.0f);
  if (mx == 0.0 || !std::isfinite(mx)) return out;
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = static_cast<float>(u[i] / mx);
  return out;
}

// Gradient of the objective wrt the features, up to a positive factor.
std::vector<double> feature_gradient(std::span<const float> feat, const DirectionalGuide& guide,
                                     Objective objective, double floor) {
  if (objective == Objective::projection) return guide.w;
  const std::size_t m = feat.size();
  std::vector<double> d(m);
  double sq = 0.0, dw = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    d[j] = static_cast<double>(feat[j]) - guide.anchor[j];
    sq += d[j] * d[j];
    dw += d[j] * guide.w[j];
  }
  const double n = std::sqrt(sq);
  std::vector<double> g(m);
  if (n <= floor) {
    for (std::size_t j = 0; j < m; ++j) g[j] = guide.w[j] / floor;
    return g;
  }
  // d/dd (d^T w / |d|) = w/|d| - (d^T w) d / |d|^3, scaled by |d|
  const double c = dw / sq;
  for (std::size_t j = 0; j < m; ++j) g[j] = guide.w[j] - c * d[j];
  return g;
}

void check_anchor(const SplitModel& model, std::span<const float> x, const DirectionalGuide& guide) {
  if (guide.w.size() != model.feature_dim() || guide.anchor.size() != model.feature_dim()) {
    throw ShapeError("refine: guide dimension " + std::to_string(guide.w.size()) + " does not match feature dim " +
                     std::to_string(model.feature_dim()));
  }
  if (model.feature(x) != guide.anchor) {
    throw ConfigError("refine: guide anchor does not match g(x) for this input and model");
  }
}

std::vector<float> run_refine(const SplitModel& model, std::span<const float> x, const DirectionalGuide& guide,
                              const RefineConfig& cfg, std::span<const float> start, Objective objective) {
  cfg.validate();
  if (x.size() != model.input_size()) throw ShapeError("refine: input size mismatch");
  check_anchor(model, x, guide);
  std::vector<float> x_adv(x.begin(), x.end());
  if (!start.empty()) {
    if (start.size() != x.size()) throw ShapeError("refine: start point size mismatch");
    x_adv.assign(start.begin(), start.end());
    project(x_adv, x, cfg.norm, cfg.epsilon);
  }
  if (guide.is_zero()) {
    spdlog::warn("refine: guide '{}' is the zero vector; returning the start point unchanged", guide.method);
    return x_adv;
  }
  const double alpha = cfg.step();
  const std::size_t n = x.size();
  for (int t = 0; t < cfg.iterations; ++t) {
    Tape tape;
    auto input = Tensor::from({1, n}, x_adv, true);
    auto feat = model.features(tape, input);
    const auto seed = to_seed(feature_gradient(feat.data(), guide, objective, cfg.floor));
    tape.backward(feat, seed);
    const auto grad = input.grad();
    if (cfg.norm == Norm::linf) {
      const auto a = static_cast<float>(alpha);
      for (std::size_t i = 0; i < n; ++i) {
        const float g = grad[i];
        if (!std::isfinite(g)) throw NonFiniteError("refine: non-finite gradient");
        x_adv[i] += g > 0 ? a : (g < 0 ? -a : 0.0f);
      }
    } else {
      double sq = 0.0;
      for (float g : grad) sq += static_cast<double>(g) * g;
      if (!std::isfinite(sq)) throw NonFiniteError("refine: non-finite gradient");
      if (sq > 0) {
        const double s = alpha / std::sqrt(sq);
        for (std::size_t i = 0; i < n; ++i) x_adv[i] = static_cast<float>(x_adv[i] + grad[i] * s);
      }
    }
    project(x_adv, x, cfg.norm, cfg.epsilon);
  }
  return x_adv;
}

}  // namespace

const char* objective_name(Objective o) { return o == Objective::projection ? "projection" : "normalized"; }

Objective parse_objective(std::string_view text) {
  if (text == "projection") return Objective::projection;
  if (text == "normalized") return Objective::normalized;
  throw ConfigError("unknown refine objective '" + std::string(text) + "' (expected projection or normalized)");
}

double RefineConfig::step() const {
  if (alpha > 0) return alpha;
  return norm == Norm::linf ? 1.0 / 255.0 : epsilon / 5.0;
}

void RefineConfig::validate() const {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw ConfigError("refine.epsilon must be finite and >= 0");
  if (alpha < 0 || !std::isfinite(alpha)) throw ConfigError("refine.alpha must be > 0 (or 0 for the default)");
  if (iterations < 0) throw ConfigError("refine.iterations must be >= 0");
  if (!(floor > 0)) throw ConfigError("refine.floor must be > 0");
}

std::string RefineConfig::canonical() const {
  return std::string("norm=") + norm_name(norm) + ";epsilon=" + fmt_double(epsilon) + ";alpha=" + fmt_double(step()) +
         ";iterations=" + std::to_string(iterations) + ";objective=" + objective_name(objective) +
         ";floor=" + fmt_double(floor) + ";start_from_baseline=" + (start_from_baseline ? "1" : "0");
}

std::uint64_t RefineConfig::hash() const { return fnv1a64(canonical()); }

std::vector<float> refine(const SplitModel& model, std::span<const float> x, const DirectionalGuide& guide,
                          const RefineConfig& cfg, std::span<const float> start) {
  return run_refine(model, x, guide, cfg, start, cfg.objective);
}

std::vector<float> refine_normalized(const SplitModel& model, std::span<const float> x,
                                     const DirectionalGuide& guide, const RefineConfig& cfg,
                                     std::span<const float> start) {
  return run_refine(model, x, guide, cfg, start, Objective::normalized);
}

std::vector<float> ila_refine(const SplitModel& model, std::span<const float> x, const Trajectory& trajectory,
                             const RefineConfig& cfg) {
  RefineConfig c = cfg;
  c.objective = Objective::projection;
  return refine(model, x, ila_guide(trajectory), c);
}

double discrepancy_magnitude(const SplitModel& model, std::span<const float> x, std::span<const float> x_adv) {
  const auto a = model.feature(x);
  const auto b = model.feature(x_adv);
  double sq = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = static_cast<double>(b[j]) - a[j];
    sq += d * d;
  }
  return std::sqrt(sq);
}

double guide_objective(const SplitModel& model, std::span<const float> x_adv, const DirectionalGuide& guide,
                       Objective objective, double floor) {
  const auto h = model.feature(x_adv);
  double dw = 0.0, sq = 0.0;
  for (std::size_t j = 0; j < h.size(); ++j) {
    const double d = static_cast<double>(h[j]) - guide.anchor[j];
    dw += d * guide.w[j];
    sq += d * d;
  }
  if (objective == Objective::projection) return dw;
  return dw / std::max(std::sqrt(sq), floor);
}

void save_adv_batch(const std::filesystem::path& path, const AdvBatch& batch) {
  ByteWriter w;
  w.magic("ILAB");
  w.u32(kBatchVersion);
  w.str(batch.method);
  w.u64(batch.cfg_hash);
  w.str(batch.source_id);
  w.u32(static_cast<std::uint32_t>(batch.victim_ids.size()));
  for (const auto& v : batch.victim_ids) w.str(v);
  w.u32(static_cast<std::uint32_t>(batch.input_size));
  w.u32(static_cast<std::uint32_t>(batch.records.size()));
  for (const auto& r : batch.records) {
    if (r.image.size() != batch.input_size) throw ShapeError("save_adv_batch: record size mismatch");
    w.u64(r.index);
    w.u32(static_cast<std::uint32_t>(r.label));
    w.f32s(r.image);
  }
  append_crc(w);
  write_file_atomic(path, w.buffer());
}

AdvBatch load_adv_batch(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string context = path.string();
  ByteReader r(checked_body(bytes, context), context);
  r.expect_magic("ILAB");
  const auto version = r.u32();
  if (version != kBatchVersion) throw IoError(context + ": unsupported batch version " + std::to_string(version));
  AdvBatch b;
  b.method = r.str();
  b.cfg_hash = r.u64();
  b.source_id = r.str();
  const auto nv = r.u32();
  for (std::uint32_t i = 0; i < nv; ++i) b.victim_ids.push_back(r.str());
  b.input_size = r.u32();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    AdvRecord rec;
    rec.index = r.u64();
    rec.label = static_cast<int>(r.u32());
    rec.image = r.f32s(b.input_size);
    b.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw IoError(context + ": trailing bytes in batch file");
  return b;
}

}  // namespace ilalab

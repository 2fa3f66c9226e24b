#include "ilalab/guide.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include <spdlog/spdlog.h>

#include "ilalab/binary_io.hpp"
#include "ilalab/errors.hpp"
#include "ilalab/rng.hpp"

namespace ilalab {
namespace {

constexpr std::uint32_t kGuideVersion = 1;

void require_signal(const DiscrepancyDataset& ds, const char* who) {
  if (ds.rows() == 0) throw DegenerateError(std::string(who) + ": empty discrepancy dataset");
  if (ds.all_zero()) {
    throw DegenerateError(std::string(who) + ": all discrepancy rows are zero (no feature movement to fit)");
  }
}

std::vector<double> hr(const DiscrepancyDataset& ds) { return mul_transposed(ds.H, ds.r); }

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

DirectionalGuide make_guide(std::string method, std::vector<double> w, const DiscrepancyDataset& ds,
                            const GuideSpec& spec) {
  for (double v : w) {
    if (!std::isfinite(v)) throw NonFiniteError(method + ": non-finite guide");
  }
  DirectionalGuide g;
  g.method = std::move(method);
  g.w = std::move(w);
  g.anchor = ds.anchor;
  g.spec = spec;
  g.provenance = ds.hash() ^ spec.hash();
  return g;
}

double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

Trajectory random_trajectory(const SplitModel& model, std::span<const float> x, int y) {
  Trajectory traj;
  auto benign = model.loss_and_feature(x, y);
  traj.samples.push_back({0, benign.loss, std::move(benign.feature), {}});
  return traj;
}

}  // namespace

bool DiscrepancyDataset::all_zero() const {
  return std::all_of(H.values.begin(), H.values.end(), [](double v) { return v == 0.0; });
}

std::uint64_t DiscrepancyDataset::hash() const {
  auto h = fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(H.values.data()),
                                                 H.values.size() * sizeof(double)));
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(r.data()), r.size() * sizeof(double)),
                 h);
}

DiscrepancyDataset build_dataset(std::span<const Trajectory> trajectories) {
  if (trajectories.empty() || trajectories.front().samples.empty()) {
    throw DegenerateError("build_dataset: no trajectory samples");
  }
  const auto& anchor = trajectories.front().anchor();
  const std::size_t m = anchor.size();
  std::size_t rows = 0;
  for (const auto& t : trajectories) {
    if (t.samples.empty()) throw DegenerateError("build_dataset: empty trajectory");
    for (const auto& s : t.samples) {
      if (s.feature.size() != m) throw ShapeError("build_dataset: mixed feature dimensions");
    }
    if (t.anchor() != anchor) throw DegenerateError("build_dataset: trajectories have different anchors");
    rows += t.samples.size();
  }
  DiscrepancyDataset ds;
  ds.H = Matrix(rows, m);
  ds.r.reserve(rows);
  ds.anchor = anchor;
  std::size_t i = 0;
  for (const auto& t : trajectories) {
    for (const auto& s : t.samples) {
      for (std::size_t j = 0; j < m; ++j) {
        ds.H(i, j) = static_cast<double>(s.feature[j]) - static_cast<double>(anchor[j]);
      }
      if (!std::isfinite(s.loss)) throw NonFiniteError("build_dataset: non-finite loss");
      ds.r.push_back(s.loss);
      ++i;
    }
  }
  return ds;
}

const char* regressor_name(Regressor r) {
  switch (r) {
    case Regressor::rr: return "rr";
    case Regressor::rr_woodbury: return "rr_woodbury";
    case Regressor::rr_approx: return "rr_approx";
    case Regressor::elasticnet: return "elasticnet";
    case Regressor::svr: return "svr";
  }
  return "?";
}

Regressor parse_regressor(std::string_view text) {
  if (text == "rr") return Regressor::rr;
  if (text == "rr_woodbury") return Regressor::rr_woodbury;
  if (text == "rr_approx") return Regressor::rr_approx;
  if (text == "elasticnet" || text == "en") return Regressor::elasticnet;
  if (text == "svr") return Regressor::svr;
  throw ConfigError("unknown regressor '" + std::string(text) +
                    "' (expected rr, rr_woodbury, rr_approx, elasticnet or svr)");
}

void GuideSpec::validate() const {
  auto nonneg = [](double v) { return std::isfinite(v) && v >= 0; };
  if (!nonneg(lambda) || !nonneg(lambda1) || !nonneg(lambda2) || !nonneg(C) || !nonneg(e)) {
    throw ConfigError("guide hyper-parameters must be finite and >= 0");
  }
  if ((regressor == Regressor::rr || regressor == Regressor::rr_woodbury) && !(lambda > 0)) {
    throw ConfigError("guide.lambda must be > 0");
  }
  if (regressor == Regressor::elasticnet && lambda1 == 0 && lambda2 == 0) {
    throw ConfigError("guide.lambda1 and guide.lambda2 cannot both be 0");
  }
  if (regressor == Regressor::svr && !(C > 0)) throw ConfigError("guide.C must be > 0");
  if (!(tolerance > 0) || max_sweeps < 1) throw ConfigError("guide solver tolerance/sweeps must be positive");
}

std::string GuideSpec::canonical() const {
  return std::string("regressor=") + regressor_name(regressor) + ";lambda=" + fmt_double(lambda) +
         ";lambda1=" + fmt_double(lambda1) + ";lambda2=" + fmt_double(lambda2) + ";C=" + fmt_double(C) +
         ";e=" + fmt_double(e) + ";tolerance=" + fmt_double(tolerance) + ";max_sweeps=" + std::to_string(max_sweeps);
}

std::uint64_t GuideSpec::hash() const { return fnv1a64(canonical()); }

bool DirectionalGuide::is_zero() const {
  return std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; });
}

std::vector<double> solve_rr(const DiscrepancyDataset& ds, double lambda) {
  require_signal(ds, "fit_rr");
  if (!(lambda > 0)) throw ConfigError("fit_rr: lambda must be > 0");
  Matrix a = gram_cols(ds.H);
  for (std::size_t i = 0; i < a.rows; ++i) a(i, i) += lambda;
  return solve_spd(std::move(a), hr(ds)).x;
}

std::vector<double> solve_rr_woodbury(const DiscrepancyDataset& ds, double lambda) {
  require_signal(ds, "fit_rr_woodbury");
  if (!(lambda > 0)) throw ConfigError("fit_rr_woodbury: lambda must be > 0");
  Matrix k = gram_rows(ds.H);
  for (std::size_t i = 0; i < k.rows; ++i) k(i, i) += lambda;
  const auto dual = solve_spd(std::move(k), ds.r).x;
  return mul_transposed(ds.H, dual);
}

std::vector<double> solve_rr_approx(const DiscrepancyDataset& ds) {
  require_signal(ds, "fit_rr_approx");
  auto w = hr(ds);
  if (std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; })) {
    throw DegenerateError("fit_rr_approx: H^T r is zero");
  }
  return w;
}

ElasticNetResult solve_elasticnet(const DiscrepancyDataset& ds, double lambda1, double lambda2, double tolerance,
                                  int max_sweeps) {
  require_signal(ds, "fit_elasticnet");
  if (lambda1 < 0 || lambda2 < 0 || (lambda1 == 0 && lambda2 == 0)) {
    throw ConfigError("fit_elasticnet: need lambda1, lambda2 >= 0, not both 0");
  }
  const std::size_t n = ds.rows(), m = ds.feature_dim();
  // column-major copy for coordinate access
  std::vector<double> cols(n * m);
  std::vector<double> col_sq(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double v = ds.H(i, j);
      cols[j * n + i] = v;
      col_sq[j] += v * v;
    }
  }
  ElasticNetResult res;
  res.w.assign(m, 0.0);
  std::vector<double> resid(ds.r);
  auto& w = res.w;
  for (res.sweeps = 1; res.sweeps <= max_sweeps; ++res.sweeps) {
    double max_change = 0.0, max_w = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double* c = &cols[j * n];
      double rho = 0.0;
      for (std::size_t i = 0; i < n; ++i) rho += c[i] * resid[i];
      rho += col_sq[j] * w[j];
      const double denom = 2.0 * (col_sq[j] + lambda2);
      const double wj = denom > 0 ? soft_threshold(2.0 * rho, lambda1) / denom : 0.0;
      const double d = wj - w[j];
      if (d != 0.0) {
        for (std::size_t i = 0; i < n; ++i) resid[i] -= c[i] * d;
        w[j] = wj;
      }
      max_change = std::max(max_change, std::abs(d));
      max_w = std::max(max_w, std::abs(wj));
    }
    if (max_change <= tolerance * max_w) break;
  }
  // Duality gap of the equivalent lasso on [H; sqrt(lambda2) I].
  double primal = 0.0, l1 = 0.0, l2 = 0.0;
  for (double v : resid) primal += v * v;
  for (double v : w) {
    l1 += std::abs(v);
    l2 += v * v;
  }
  primal += lambda1 * l1 + lambda2 * l2;
  double corr = 0.0;  // |X^T res~|_inf
  for (std::size_t j = 0; j < m; ++j) {
    const double* c = &cols[j * n];
    double g = -lambda2 * w[j];
    for (std::size_t i = 0; i < n; ++i) g += c[i] * resid[i];
    corr = std::max(corr, std::abs(g));
  }
  const double s = corr > 0 ? std::min(1.0, lambda1 / (2.0 * corr)) : 1.0;
  double nu_sq = 0.0, nu_y = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double nu = 2.0 * s * resid[i];
    nu_sq += nu * nu;
    nu_y += nu * ds.r[i];
  }
  nu_sq += 4.0 * s * s * lambda2 * l2;
  res.duality_gap = primal - (nu_y - nu_sq / 4.0);
  if (res.sweeps > max_sweeps) {
    throw ConvergenceError("fit_elasticnet: no convergence after " + std::to_string(max_sweeps) +
                               " sweeps (duality gap " + fmt_double(res.duality_gap) + ")",
                           res.duality_gap);
  }
  return res;
}

SvrResult solve_svr(const DiscrepancyDataset& ds, double C, double e, double tolerance, int max_passes) {
  require_signal(ds, "fit_svr");
  if (!(C > 0) || e < 0) throw ConfigError("fit_svr: need C > 0 and e >= 0");
  const std::size_t n = ds.rows();
  const Matrix q = gram_rows(ds.H);
  SvrResult res;
  res.beta.assign(n, 0.0);
  std::vector<double> qb(n, 0.0);  // Q beta
  auto& beta = res.beta;
  double rmax = 1.0;
  for (double v : ds.r) rmax = std::max(rmax, std::abs(v));
  const double tol = tolerance * rmax;
  for (res.passes = 1; res.passes <= max_passes; ++res.passes) {
    double violation = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = qb[i] - ds.r[i];
      const double b = beta[i];
      // optimality violation of coordinate i before the update
      double v;
      if (b > 0 && b < C) v = std::abs(g + e);
      else if (b < 0 && b > -C) v = std::abs(g - e);
      else if (b == 0) v = std::max(0.0, std::abs(g) - e);
      else if (b >= C) v = std::max(0.0, g + e);
      else v = std::max(0.0, e - g);
      violation = std::max(violation, v);

      const double qii = q(i, i);
      double nb;
      if (qii > 0) {
        if (g + e < qii * b) nb = b - (g + e) / qii;
        else if (g - e > qii * b) nb = b - (g - e) / qii;
        else nb = 0.0;
      } else {
        // objective is linear in beta_i: -r_i beta_i + e |beta_i|
        nb = ds.r[i] > e ? C : (ds.r[i] < -e ? -C : 0.0);
      }
      nb = std::clamp(nb, -C, C);
      const double d = nb - b;
      if (d != 0.0) {
        beta[i] = nb;
        for (std::size_t k = 0; k < n; ++k) qb[k] += d * q(k, i);
      }
    }
    res.kkt_violation = violation;
    if (violation <= tol) break;
  }
  if (res.passes > max_passes) {
    throw ConvergenceError("fit_svr: no convergence after " + std::to_string(max_passes) +
                               " passes (KKT violation " + fmt_double(res.kkt_violation) + ")",
                           res.kkt_violation);
  }
  res.w = mul_transposed(ds.H, beta);
  return res;
}

DirectionalGuide fit_rr(const DiscrepancyDataset& ds, double lambda) {
  GuideSpec spec;
  spec.regressor = Regressor::rr;
  spec.lambda = lambda;
  return make_guide("rr", solve_rr(ds, lambda), ds, spec);
}

DirectionalGuide fit_rr_woodbury(const DiscrepancyDataset& ds, double lambda) {
  GuideSpec spec;
  spec.regressor = Regressor::rr_woodbury;
  spec.lambda = lambda;
  return make_guide("rr_woodbury", solve_rr_woodbury(ds, lambda), ds, spec);
}

DirectionalGuide fit_rr_approx(const DiscrepancyDataset& ds) {
  GuideSpec spec;
  spec.regressor = Regressor::rr_approx;
  return make_guide("rr_approx", solve_rr_approx(ds), ds, spec);
}

DirectionalGuide fit_elasticnet(const DiscrepancyDataset& ds, double lambda1, double lambda2) {
  GuideSpec spec;
  spec.regressor = Regressor::elasticnet;
  spec.lambda1 = lambda1;
  spec.lambda2 = lambda2;
  return fit_guide(ds, spec);
}

DirectionalGuide fit_svr(const DiscrepancyDataset& ds, double C, double e) {
  GuideSpec spec;
  spec.regressor = Regressor::svr;
  spec.C = C;
  spec.e = e;
  return fit_guide(ds, spec);
}

DirectionalGuide fit_guide(const DiscrepancyDataset& ds, const GuideSpec& spec) {
  spec.validate();
  switch (spec.regressor) {
    case Regressor::rr: return make_guide("rr", solve_rr(ds, spec.lambda), ds, spec);
    case Regressor::rr_woodbury: return make_guide("rr_woodbury", solve_rr_woodbury(ds, spec.lambda), ds, spec);
    case Regressor::rr_approx: return make_guide("rr_approx", solve_rr_approx(ds), ds, spec);
    case Regressor::elasticnet: {
      if (spec.lambda1 < 0.05) {
        spdlog::warn("fit_elasticnet: lambda1 = {:g} is below 0.05, where the solution is known to be inaccurate",
                     spec.lambda1);
      }
      auto res = solve_elasticnet(ds, spec.lambda1, spec.lambda2, spec.tolerance, spec.max_sweeps);
      return make_guide("elasticnet", std::move(res.w), ds, spec);
    }
    case Regressor::svr: {
      auto res = solve_svr(ds, spec.C, spec.e, spec.tolerance * 100.0, spec.max_sweeps);
      return make_guide("svr", std::move(res.w), ds, spec);
    }
  }
  throw ConfigError("fit_guide: unknown regressor");
}

DirectionalGuide ila_guide(const Trajectory& trajectory) {
  if (trajectory.samples.size() < 2) throw DegenerateError("ila: trajectory has no iterate beyond the anchor");
  const auto& h0 = trajectory.anchor();
  const auto& hp = trajectory.samples.back().feature;
  DirectionalGuide g;
  g.method = "ila";
  g.w.resize(h0.size());
  for (std::size_t j = 0; j < h0.size(); ++j) g.w[j] = static_cast<double>(hp[j]) - static_cast<double>(h0[j]);
  if (g.is_zero()) throw DegenerateError("ila: h_p equals h_0, the direction is undefined");
  g.anchor = h0;
  g.provenance = fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(hp.data()), hp.size() * 4));
  return g;
}

DirectionalGuide random_guide_input(const SplitModel& model, std::span<const float> x, int y, int p,
                                    double sigma_in, std::uint64_t seed, const GuideSpec& spec) {
  if (!(sigma_in > 0) || !std::isfinite(sigma_in)) throw ConfigError("random guide: sigma_in must be > 0");
  if (p < 1) throw ConfigError("random guide: p must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, sigma_in);
  Trajectory traj = random_trajectory(model, x, y);
  std::vector<float> xt(x.size());
  for (int t = 1; t <= p; ++t) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      xt[i] = static_cast<float>(std::clamp(static_cast<double>(x[i]) + noise(rng), 0.0, 1.0));
    }
    auto lf = model.loss_and_feature(xt, y);
    traj.samples.push_back({static_cast<std::uint32_t>(t), lf.loss, std::move(lf.feature), {}});
  }
  const std::vector<Trajectory> trajs{std::move(traj)};
  auto g = fit_guide(build_dataset(trajs), spec);
  g.method = std::string("rand_input+") + regressor_name(spec.regressor);
  g.sigma = sigma_in;
  return g;
}

DirectionalGuide random_guide_feature(const SplitModel& model, std::span<const float> x, int y, int p,
                                      double sigma_feat, std::uint64_t seed, const GuideSpec& spec) {
  if (!(sigma_feat > 0) || !std::isfinite(sigma_feat)) throw ConfigError("random guide: sigma_feat must be > 0");
  if (p < 1) throw ConfigError("random guide: p must be >= 1");
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, sigma_feat);
  Trajectory traj = random_trajectory(model, x, y);
  const auto h0 = traj.anchor();
  std::vector<float> ht(h0.size());
  for (int t = 1; t <= p; ++t) {
    for (std::size_t j = 0; j < h0.size(); ++j) ht[j] = static_cast<float>(h0[j] + noise(rng));
    const float loss = model.loss_from_feature(ht, y);
    traj.samples.push_back({static_cast<std::uint32_t>(t), loss, ht, {}});
  }
  const std::vector<Trajectory> trajs{std::move(traj)};
  auto g = fit_guide(build_dataset(trajs), spec);
  g.method = std::string("rand_feature+") + regressor_name(spec.regressor);
  g.sigma = sigma_feat;
  return g;
}

double calibrate_sigma_input(const Trajectory& trajectory, std::span<const float> x) {
  const auto& xf = trajectory.final_input;
  if (xf.size() != x.size()) throw ShapeError("calibrate_sigma_input: trajectory has no final input");
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(xf[i]) - x[i];
    sq += d * d;
  }
  return std::sqrt(sq / static_cast<double>(x.size()));
}

double calibrate_sigma_feature(const Trajectory& trajectory) {
  const auto& h0 = trajectory.anchor();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 1; s < trajectory.samples.size(); ++s) {
    double sq = 0.0;
    const auto& h = trajectory.samples[s].feature;
    for (std::size_t j = 0; j < h0.size(); ++j) {
      const double d = static_cast<double>(h[j]) - h0[j];
      sq += d * d;
    }
    total += std::sqrt(sq);
    ++count;
  }
  if (count == 0) throw DegenerateError("calibrate_sigma_feature: trajectory has no iterates");
  return total / static_cast<double>(count) / std::sqrt(static_cast<double>(h0.size()));
}

void save_guide(const std::filesystem::path& path, const DirectionalGuide& guide) {
  if (guide.w.size() != guide.anchor.size()) throw ShapeError("save_guide: w and anchor sizes differ");
  ByteWriter w;
  w.magic("ILAG");
  w.u32(kGuideVersion);
  w.str(guide.method);
  w.str(regressor_name(guide.spec.regressor));
  w.f64(guide.spec.lambda);
  w.f64(guide.spec.lambda1);
  w.f64(guide.spec.lambda2);
  w.f64(guide.spec.C);
  w.f64(guide.spec.e);
  w.f64(guide.sigma);
  w.u64(guide.provenance);
  w.u32(static_cast<std::uint32_t>(guide.w.size()));
  for (double v : guide.w) w.f32(static_cast<float>(v));
  w.f32s(guide.anchor);
  append_crc(w);
  write_file_atomic(path, w.buffer());
}

DirectionalGuide load_guide(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string context = path.string();
  ByteReader r(checked_body(bytes, context), context);
  r.expect_magic("ILAG");
  const auto version = r.u32();
  if (version != kGuideVersion) throw IoError(context + ": unsupported guide version " + std::to_string(version));
  DirectionalGuide g;
  g.method = r.str();
  g.spec.regressor = parse_regressor(r.str());
  g.spec.lambda = r.f64();
  g.spec.lambda1 = r.f64();
  g.spec.lambda2 = r.f64();
  g.spec.C = r.f64();
  g.spec.e = r.f64();
  g.sigma = r.f64();
  g.provenance = r.u64();
  const auto m = r.u32();
  const auto wf = r.f32s(m);
  g.w.assign(wf.begin(), wf.end());
  g.anchor = r.f32s(m);
  if (r.remaining() != 0) throw IoError(context + ": trailing bytes in guide file");
  return g;
}

}  // namespace ilalab

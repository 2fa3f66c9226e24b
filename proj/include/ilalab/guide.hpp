#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilalab/attack.hpp"
#include "ilalab/linalg.hpp"
#include "ilalab/model.hpp"

namespace ilalab {

// Rows are h_t - h_0 for every sampled iterate, stacked in (run, t) order;
// r holds the matching losses. Anchor rows (t = 0) are kept as zero rows.
struct DiscrepancyDataset {
  Matrix H;
  std::vector<double> r;
  std::vector<float> anchor;  // h_0

  std::size_t rows() const { return H.rows; }
  std::size_t feature_dim() const { return H.cols; }
  bool all_zero() const;
  std::uint64_t hash() const;
};

// Throws ShapeError on mixed feature sizes and DegenerateError on mixed anchors.
DiscrepancyDataset build_dataset(std::span<const Trajectory> trajectories);

enum class Regressor { rr, rr_woodbury, rr_approx, elasticnet, svr };

const char* regressor_name(Regressor r);
Regressor parse_regressor(std::string_view text);

struct GuideSpec {
  Regressor regressor = Regressor::rr;
  double lambda = 1e10;
  double lambda1 = 0.05;
  double lambda2 = 1e10;
  double C = 1e-10;
  double e = 0.0;
  double tolerance = 1e-10;  // elastic net: relative coordinate change; svr: scaled by max|r| * 100
  int max_sweeps = 100000;

  void validate() const;
  std::string canonical() const;
  std::uint64_t hash() const;
};

struct DirectionalGuide {
  std::string method;  // e.g. "rr", "rand_input+svr", "ila"
  std::vector<double> w;
  std::vector<float> anchor;
  GuideSpec spec;
  std::uint64_t provenance = 0;  // hash of the fitting data
  double sigma = 0.0;             // random guides only

  bool is_zero() const;
};

// Each fitter throws DegenerateError when H is all zero.
std::vector<double> solve_rr(const DiscrepancyDataset& ds, double lambda);
std::vector<double> solve_rr_woodbury(const DiscrepancyDataset& ds, double lambda);
std::vector<double> solve_rr_approx(const DiscrepancyDataset& ds);

struct ElasticNetResult {
  std::vector<double> w;
  int sweeps = 0;
  double duality_gap = 0.0;
};
// Coordinate descent on sum z_t^2 + lambda1 |w|_1 + lambda2 |w|_2^2.
ElasticNetResult solve_elasticnet(const DiscrepancyDataset& ds, double lambda1, double lambda2,
                                  double tolerance = 1e-10, int max_sweeps = 100000);

struct SvrResult {
  std::vector<double> w;
  std::vector<double> beta;  // dual variables in [-C, C]
  int passes = 0;
  double kkt_violation = 0.0;
};
// Dual coordinate descent for min 1/2 |w|^2 + C sum max(0, |w.h_t - r_t| - e), intercept fixed at 0.
SvrResult solve_svr(const DiscrepancyDataset& ds, double C, double e, double tolerance = 1e-8,
                    int max_passes = 100000);

DirectionalGuide fit_rr(const DiscrepancyDataset& ds, double lambda);
DirectionalGuide fit_rr_woodbury(const DiscrepancyDataset& ds, double lambda);
DirectionalGuide fit_rr_approx(const DiscrepancyDataset& ds);
DirectionalGuide fit_elasticnet(const DiscrepancyDataset& ds, double lambda1, double lambda2);
DirectionalGuide fit_svr(const DiscrepancyDataset& ds, double C, double e);
DirectionalGuide fit_guide(const DiscrepancyDataset& ds, const GuideSpec& spec);

// w = h_p - h_0 from the last sample of a trajectory.
DirectionalGuide ila_guide(const Trajectory& trajectory);

// Guides fitted on p random perturbations of the input (x + N(0, sigma_in^2 I),
// clipped) or of the benign feature (h_0 + N(0, sigma_feat^2 I)).
DirectionalGuide random_guide_input(const SplitModel& model, std::span<const float> x, int y, int p,
                                    double sigma_in, std::uint64_t seed, const GuideSpec& spec);
DirectionalGuide random_guide_feature(const SplitModel& model, std::span<const float> x, int y, int p,
                                      double sigma_feat, std::uint64_t seed, const GuideSpec& spec);

// Calibration of the random-guide scales from a baseline trajectory:
// sigma_in = |x_T - x|_2 / sqrt(n), sigma_feat = mean_t |h_t - h_0|_2 / sqrt(m).
double calibrate_sigma_input(const Trajectory& trajectory, std::span<const float> x);
double calibrate_sigma_feature(const Trajectory& trajectory);

// Guide file ("ILAG").
void save_guide(const std::filesystem::path& path, const DirectionalGuide& guide);
DirectionalGuide load_guide(const std::filesystem::path& path);

}  // namespace ilalab

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilalab/attack.hpp"
#include "ilalab/guide.hpp"
#include "ilalab/model.hpp"

namespace ilalab {

enum class Objective { projection, normalized };

const char* objective_name(Objective o);
Objective parse_objective(std::string_view text);

struct RefineConfig {
  Norm norm = Norm::linf;
  double epsilon = 8.0 / 255.0;
  double alpha = 0.0;  // 0 selects 1/255 for linf, epsilon/5 for l2
  int iterations = 100;
  Objective objective = Objective::projection;
  double floor = 1e-12;  // denominator guard of the normalized objective
  bool start_from_baseline = false;

  double step() const;
  void validate() const;
  std::string canonical() const;
  std::uint64_t hash() const;
};

// Maximizes (g(x + d) - h_0)^T w over the feasible set by sign (linf) or
// normalized (l2) gradient steps from d = 0, or from `start` when given.
// Throws ConfigError when guide.anchor differs from g(x).
std::vector<float> refine(const SplitModel& model, std::span<const float> x, const DirectionalGuide& guide,
                          const RefineConfig& cfg, std::span<const float> start = {});

// Same with the unit-normalized discrepancy in the objective.
std::vector<float> refine_normalized(const SplitModel& model, std::span<const float> x,
                                     const DirectionalGuide& guide, const RefineConfig& cfg,
                                     std::span<const float> start = {});

// refine() with w = h_p - h_0 of the trajectory.
std::vector<float> ila_refine(const SplitModel& model, std::span<const float> x, const Trajectory& trajectory,
                             const RefineConfig& cfg);

// |g(x_adv) - g(x)|_2
double discrepancy_magnitude(const SplitModel& model, std::span<const float> x, std::span<const float> x_adv);

// Objective value at x_adv for the given objective kind.
double guide_objective(const SplitModel& model, std::span<const float> x_adv, const DirectionalGuide& guide,
                       Objective objective, double floor = 1e-12);

struct AdvRecord {
  std::uint64_t index = 0;  // position in the test split
  int label = 0;
  std::vector<float> image;
};

struct AdvBatch {
  std::string method;
  std::uint64_t cfg_hash = 0;
  std::string source_id;
  std::vector<std::string> victim_ids;
  std::size_t input_size = 0;
  std::vector<AdvRecord> records;
};

// Adversarial batch file ("ILAB").
void save_adv_batch(const std::filesystem::path& path, const AdvBatch& batch);
AdvBatch load_adv_batch(const std::filesystem::path& path);

}  // namespace ilalab

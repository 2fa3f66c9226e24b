#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilalab/model.hpp"

namespace ilalab {

enum class Norm { linf, l2 };
enum class SampleStrategy { even, first_p, last_p };

const char* norm_name(Norm norm);
Norm parse_norm(std::string_view text);
const char* sample_strategy_name(SampleStrategy s);
SampleStrategy parse_sample_strategy(std::string_view text);

struct AttackConfig {
  Norm norm = Norm::linf;
  double epsilon = 8.0 / 255.0;
  double alpha = 0.0;  // 0 selects the default: 1/255 for linf, epsilon/5 for l2
  int iterations = 100;
  int samples = 10;  // p; p + 1 iterates are kept including t = 0
  bool random_init = false;
  int runs = 1;
  std::uint64_t seed = 0;
  SampleStrategy sampling = SampleStrategy::even;

  double step() const;
  // Throws ConfigError on out-of-range fields.
  void validate() const;
  std::string canonical() const;
  std::uint64_t hash() const;
};

// Iterations at which the p + 1 samples are taken, ascending, starting at 0.
std::vector<int> sample_times(int iterations, int samples, SampleStrategy strategy);

struct TrajectorySample {
  std::uint32_t t = 0;
  float loss = 0.0f;
  std::vector<float> feature;
  std::vector<float> input;  // empty when inputs were not kept
};

struct Trajectory {
  std::uint32_t run = 0;
  std::vector<TrajectorySample> samples;  // samples[0] is the benign input
  std::vector<float> final_input;

  const std::vector<float>& anchor() const { return samples.front().feature; }
  std::size_t feature_dim() const { return samples.empty() ? 0 : samples.front().feature.size(); }
};

// Projects x_adv onto the epsilon ball around x intersected with [0, 1]^n, in place.
void project(std::span<float> x_adv, std::span<const float> x, Norm norm, double epsilon);
// Ball projection of a bare perturbation (no box).
std::vector<float> project_delta(std::span<const float> delta, Norm norm, double epsilon);

struct InputGradient {
  float loss = 0.0f;
  std::vector<float> feature;
  std::vector<float> grad;  // d loss / d x
};

// Cross-entropy, g(x) and the input gradient from one forward/backward pass.
InputGradient loss_gradient(const SplitModel& model, std::span<const float> x, int y);

// I-FGSM from x; the gradient of the full model f = h o g drives every step.
Trajectory ifgsm(const SplitModel& model, std::span<const float> x, int y, const AttackConfig& cfg);

// R runs of PGD, run r seeded by derive_seed(cfg.seed, {input_index, r}).
std::vector<Trajectory> pgd_multirun(const SplitModel& model, std::span<const float> x, int y,
                                     const AttackConfig& cfg, std::uint64_t input_index = 0);

// I-FGSM (or PGD when cfg.runs > 1 / random_init) with the last n ReLUs
// linear in the backward pass.
std::vector<Trajectory> linbp_multirun(const SplitModel& model, std::span<const float> x, int y,
                                       const AttackConfig& cfg, std::size_t n_linear_relus,
                                       std::uint64_t input_index = 0);
Trajectory linbp_attack(const SplitModel& model, std::span<const float> x, int y, const AttackConfig& cfg,
                        std::size_t n_linear_relus);

// Success means top-1 misclassification.
bool misclassified(const Model& model, std::span<const float> x, int y);

// Trajectory dump ("ILAT"); inputs are written only when keep_inputs is set.
void save_trajectory(const std::filesystem::path& path, const Trajectory& traj, std::uint64_t input_index,
                     std::uint64_t cfg_hash, bool keep_inputs);
struct TrajectoryFile {
  std::uint64_t input_index = 0;
  std::uint64_t cfg_hash = 0;
  Trajectory trajectory;
};
TrajectoryFile load_trajectory(const std::filesystem::path& path);

}  // namespace ilalab

#pragma once

#include <array>
#include <optional>
#include <vector>

#include "twinbeam/distributions.hpp"

namespace twinbeam {

inline constexpr double kDefaultTailBudget = 1e-10;

// Multimode thermal component: M modes with B mean photons per mode.
struct ModeField {
  double M = 1.0;
  double B = 0.0;

  double mean() const { return M * B; }
  double intensity_variance() const { return M * B * B; }
  void validate() const;
};

struct CompositeFieldParams {
  ModeField twb1;
  ModeField twb2;
  ModeField noise_s;
  ModeField noise_i1;
  ModeField noise_i2;

  void validate() const;
};

// Per-axis cutoffs (n_s, n_i1, n_i2); inclusive upper bounds.
using Cutoffs3 = std::array<int, 3>;

double mandel_rice_pmf(int n, const ModeField& field);
std::vector<double> mandel_rice_vector(const ModeField& field, int cutoff);
// Smallest n whose cumulative mass reaches 1 - budget.
int mandel_rice_cutoff(const ModeField& field, double budget);
int quantile_cutoff(const std::vector<double>& pmf, double budget);

std::vector<double> convolve(const std::vector<double>& a, const std::vector<double>& b);

double twb_joint_pmf(int n_s, int n_i, const ModeField& field);

// Automatic cutoffs: each axis keeps 1 - budget/3 of its marginal mass.
Cutoffs3 paired_cutoffs(const ModeField& twb1, const ModeField& twb2, double budget = kDefaultTailBudget);
Cutoffs3 composite_cutoffs(const CompositeFieldParams& params, double budget = kDefaultTailBudget);

JointDist3D paired_3d(const ModeField& twb1, const ModeField& twb2,
                      std::optional<Cutoffs3> cutoffs = std::nullopt,
                      double budget = kDefaultTailBudget);

JointDist3D compose_noisy_3d(const CompositeFieldParams& params,
                             std::optional<Cutoffs3> cutoffs = std::nullopt,
                             double budget = kDefaultTailBudget);

// Postselected state p(k, n_s - k) = weights[k].
JointDist2D ideal_postselected_state(int n_s, const std::vector<double>& weights);
// Weights from conditioning two equal TWBs (default single-mode) on a signal sum n_s.
std::vector<double> bayes_postselection_weights(int n_s, const ModeField& twb = {1.0, 1.0});

}  // namespace twinbeam

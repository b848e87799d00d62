#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>

#include "twinbeam/distributions.hpp"

namespace twinbeam {

struct GridSpec {
  double step = 0.05;
  // Per-axis upper intensity bound; defaults to the 1 - 1e-6 marginal quantile
  // of the input plus 5 (1 - s).
  std::optional<double> extent_i1;
  std::optional<double> extent_i2;
};

struct QuasiGrid {
  Eigen::MatrixXd values;  // values(i, j) at (W_i1, W_i2) = (i step, j step)
  double step = 0.05;
  double s = 0.0;
  std::array<int, 2> truncation_order{0, 0};
  // Ratio between the largest absolute Laguerre term sum and the largest |P|.
  double cancellation = 1.0;
  bool precision_warning = false;
  // Largest s for which |r|^n stays below 1e6 at the truncation order.
  double recommended_max_s = 1.0;

  double w1(int i) const { return i * step; }
  double w2(int j) const { return j * step; }
  // Composite Simpson integral over the grid.
  double integral() const;
  double moment(int k1, int k2) const;
};

struct QuasiGrid1D {
  Eigen::VectorXd values;
  double step = 0.05;
  double s = 0.0;
  double integral() const;
};

QuasiGrid quasi_distribution(const JointDist2D& p, double s, const GridSpec& grid = {});
QuasiGrid1D quasi_distribution_1d(const JointDist1D& p, double s, double extent, double step = 0.05);

struct NegativityReport {
  double min_value = 0.0;
  std::array<double, 2> min_location{0.0, 0.0};
  double negative_mass = 0.0;
  // [W1_lo, W1_hi, W2_lo, W2_hi] of the negative cells; empty when none.
  std::optional<std::array<double, 4>> bounding_box;
  std::optional<std::array<double, 2>> negative_centroid;
  double max_value = 0.0;
  std::array<double, 2> max_location{0.0, 0.0};
  // Maximum over W1 + W2 >= lobe_exclusion, i.e. away from an integrable
  // spike at the origin.
  double lobe_max_value = 0.0;
  std::array<double, 2> lobe_max_location{0.0, 0.0};
};

NegativityReport negativity_report(const QuasiGrid& q, double lobe_exclusion = 1.0);

// Kernel K(n | m) mapping a photon-number distribution to its s-ordered
// counterpart, n = 0..n_out, m = 0..m_max; closed form
// Bin(m, 1 - b) * NB(m + 1, b / (1 + b)) with b = (1 - s) / 2.
Eigen::MatrixXd smearing_kernel(double s, int n_out, int m_max);

// Row n of the same kernel, m = 0..m_max, by direct summation.
Eigen::VectorXd smearing_kernel_row(double s, int n, int m_max);

// p_s = K p K^T by the closed-form kernel.
JointDist2D smeared_pmf(const JointDist2D& p, double s, std::optional<std::array<int, 2>> n_out = std::nullopt);

struct QuadratureSpec {
  int initial_nodes = 0;  // 0: chosen from the polynomial degree
  int max_nodes = 400;
  double rel_tolerance = 1e-6;
};

// p_s by Gauss-Laguerre integration of the Mandel kernel against the
// quasi-distribution; s = 1 returns p.
JointDist2D s_ordered_pmf(const JointDist2D& p, double s, const QuadratureSpec& quad = {},
                          std::optional<std::array<int, 2>> n_out = std::nullopt);

}  // namespace twinbeam

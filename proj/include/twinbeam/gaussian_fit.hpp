#pragma once

#include <array>
#include <vector>

#include "json.hpp"
#include "twinbeam/detector.hpp"
#include "twinbeam/field_model.hpp"

namespace twinbeam {

// Pixel count and dark rate of each detector; the efficiencies are fitted
// (the eta fields are ignored).  Idler detectors share one efficiency.
struct FitDetectors {
  DetectorConfig s;
  DetectorConfig i1;
  DetectorConfig i2;
};

// Detected intensity moments of the histogram with the dark-count means removed.
struct FitMoments {
  std::array<double, 3> mean{};  // s, i1, i2
  std::array<double, 3> var{};   // s, i1, i2
  double cov_s1 = 0.0;
  double cov_s2 = 0.0;
  double cov_12 = 0.0;
};

FitMoments fit_moments(const Histogram3D& f, const FitDetectors& dets);

struct FitSettings {
  int step1_max_iterations = 3000;
  // Nelder-Mead stops once the simplex size drops below this.
  double step1_simplex_tolerance = 1e-7;
  // Also stop when a window of iterations improves the declination by less
  // than this fraction (flat directions, e.g. an efficiency without pairing).
  int step1_stall_window = 200;
  double step1_stall_tolerance = 1e-9;
  int grid_points = 64;
  double golden_rel_tolerance = 1e-4;
  double tail_budget = 1e-12;

  void validate() const;
};

// Combined signal / combined idler model of the first step.
struct Step1Result {
  double eta_s = 0.0;
  double eta_i = 0.0;
  double W_p = 0.0, V_p = 0.0;    // paired field mean and intensity variance
  double W_ns = 0.0, V_ns = 0.0;  // signal noise
  double W_ni = 0.0, V_ni = 0.0;  // combined idler noise
  double declination = 0.0;
  int iterations = 0;
  bool converged = false;
  bool stalled = false;  // stopped on the declination plateau rather than the simplex size
};

// Moments solved in the second step; W are means, V intensity variances.
struct FitComponentMoments {
  double W_p1 = 0, V_p1 = 0, W_p2 = 0, V_p2 = 0;
  double W_ni1 = 0, V_ni1 = 0, W_ni2 = 0, V_ni2 = 0;
  double W_ns = 0, V_ns = 0;
};

struct GaussianFitResult {
  CompositeFieldParams params;
  double eta_s = 0.0;
  double eta_i = 0.0;
  double free_parameter = 0.0;  // <(dW_p1)^2>
  std::array<double, 2> free_interval{};
  double declination = 0.0;
  FitComponentMoments moments;
  Step1Result step1;
  // Residuals of the ten linear relations, relative to their right-hand sides.
  std::array<double, 10> relation_residuals{};
  int relation_rank = 0;
  bool unimodal = true;
  std::vector<std::array<double, 2>> scan;  // (free parameter, declination), rejected candidates omitted

  nlohmann::json to_json() const;
};

Step1Result gaussian_fit_step1(const Histogram3D& f, const FitDetectors& dets, const FitSettings& settings = {});

GaussianFitResult gaussian_fit_step2(const Step1Result& step1, const FitMoments& m, const Histogram3D& f,
                                     const FitDetectors& dets, const FitSettings& settings = {});

GaussianFitResult gaussian_fit(const Histogram3D& f, const FitDetectors& dets, const FitSettings& settings = {});

// Chain of the second step: all moments from the free parameter.
FitComponentMoments solve_moment_chain(const Step1Result& step1, const FitMoments& m, double V_p1);

// Coefficient matrix of the ten relations over (W_p1, W_p2, V_p1, V_p2, W_ni1, W_ni2, V_ni1, V_ni2).
Eigen::Matrix<double, 10, 8> moment_relation_matrix();

// Detected histogram of the composite model on [0, extent) count grids, with
// the idler efficiency applied to both idler arms.
Tensor3 model_histogram(const CompositeFieldParams& params, double eta_s, double eta_i, const FitDetectors& dets,
                        const std::array<int, 3>& extent, double tail_budget = 1e-12);

}  // namespace twinbeam

#pragma once

#include <optional>
#include <vector>

#include "twinbeam/detector.hpp"
#include "twinbeam/distributions.hpp"
#include "twinbeam/moments.hpp"

namespace twinbeam {

struct EmSettings {
  enum class Init { uniform, seeded };

  int max_iterations = 100000;
  // Stop once the largest per-cell change of an update falls below this.
  double tolerance = 1e-9;
  Init init = Init::uniform;
  std::optional<Tensor3> seed_3d;
  std::optional<Eigen::MatrixXd> seed_2d;
  bool record_trace = false;

  void validate() const;
};

struct EmReport {
  int iterations = 0;
  bool converged = false;
  double log_likelihood = 0.0;
  // True when the log-likelihood never decreased between iterates.
  bool monotone = true;
  double worst_decrease = 0.0;
  std::vector<double> trace;
};

struct EmResult3D {
  JointDist3D dist;
  EmReport report;
};

struct EmResult2D {
  JointDist2D dist;
  EmReport report;
};

// Photon grids are the detection matrices' n ranges.
EmResult3D em_reconstruct_3d(const Histogram3D& f, const DetectionMatrix& det_s, const DetectionMatrix& det_i1,
                             const DetectionMatrix& det_i2, const EmSettings& settings = {});
EmResult2D em_reconstruct_2d(const JointDist2D& f_ii, const DetectionMatrix& det_i1, const DetectionMatrix& det_i2,
                             const EmSettings& settings = {});

// Photocount moments turned into detected intensity moments by the first-kind
// Stirling sums.
MomentSet empirical_intensity_moments(const Histogram3D& f, int max_order);

// Rank-2 moments of (signal, combined idler) from rank-3 intensity moments.
MomentSet combine_idler_moments(const MomentSet& m);

double declination(const Tensor3& f_th, const Tensor3& f);
double declination(const Histogram3D& f_th, const Histogram3D& f);

}  // namespace twinbeam

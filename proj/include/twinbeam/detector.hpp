#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <vector>

#include "twinbeam/distributions.hpp"

namespace twinbeam {

// Photon-number-resolving detector with N pixels, efficiency eta and d mean
// dark counts per frame.  `ideal` selects the exact identity response.
struct DetectorConfig {
  double eta = 1.0;
  int pixels = 1;
  double dark = 0.0;
  bool ideal = false;

  static DetectorConfig ideal_detector() { return DetectorConfig{1.0, 1, 0.0, true}; }
  double dark_rate() const { return dark / pixels; }
  void validate() const;
};

struct DetectionMatrixOptions {
  // Target accuracy: |error| <= max(rel_tolerance |T|, abs_tolerance).
  double rel_tolerance = 1e-10;
  double abs_tolerance = 1e-20;
  // Rows whose alternating sum has a larger condition number go to MPFR.
  double promote_condition = 1e8;
  int max_precision_bits = 16384;
};

struct DetectionMatrix {
  Eigen::MatrixXd T;            // (c_max + 1) x (n_max + 1)
  Eigen::MatrixXd error_bound;  // absolute error bound per entry
  DetectorConfig config;
  int promoted_rows = 0;
  int max_bits_used = 53;
  double rel_tolerance = 1e-10;
  double abs_tolerance = 1e-20;

  int c_max() const { return static_cast<int>(T.rows()) - 1; }
  int n_max() const { return static_cast<int>(T.cols()) - 1; }
  bool is_ideal() const { return config.ideal; }
  // Entries meeting the absolute target but not the relative one.
  int flagged_count() const;

  static DetectionMatrix identity(int n_max);
};

DetectionMatrix detection_matrix(const DetectorConfig& config, int c_max, int n_max,
                                 const DetectionMatrixOptions& options = {});

// Stable alternate evaluation of the same response: binomial thinning, the
// pixel-occupancy law of k photons on N pixels, then dark counts on unlit pixels.
Eigen::MatrixXd occupancy_detection_matrix(const DetectorConfig& config, int c_max, int n_max);

// Smallest c_max whose counts hold all but `budget` of the response to a photon marginal.
int count_cutoff(const DetectorConfig& config, const std::vector<double>& photon_marginal, double budget);

Histogram3D forward_histogram(const JointDist3D& p, const DetectionMatrix& det_s, const DetectionMatrix& det_i1,
                              const DetectionMatrix& det_i2);
Eigen::MatrixXd forward_2d(const Eigen::MatrixXd& p, const DetectionMatrix& det_a, const DetectionMatrix& det_b);

struct PostselectionResult {
  JointDist2D dist;
  double success_probability = 0.0;
};

PostselectionResult postselect_on_counts(const JointDist3D& p, const DetectionMatrix& det_s, int c_s);

JointDist2D conditional_histogram(const Histogram3D& f, int c_s);

struct SampleOptions {
  int chunk_trials = 1 << 16;
};

Histogram3D sample_histogram(const JointDist3D& p, const std::array<DetectorConfig, 3>& dets, std::uint64_t trials,
                             std::uint64_t seed, const SampleOptions& options = {});

// Counts of the sample_histogram draw, for callers that need integer data.
struct SampleCounts {
  Tensor3 counts;
  std::uint64_t trials = 0;
};
SampleCounts sample_counts(const JointDist3D& p, const std::array<DetectorConfig, 3>& dets, std::uint64_t trials,
                           std::uint64_t seed, const SampleOptions& options = {});

}  // namespace twinbeam

#pragma once

#include "twinbeam/detector.hpp"
#include "twinbeam/field_model.hpp"

namespace fixture {

inline twinbeam::CompositeFieldParams params() {
  return {{58, 0.106}, {51, 0.117}, {0.011, 10}, {0.007, 10}, {0.0005, 39}};
}

inline twinbeam::DetectorConfig signal_detector() { return {0.22, 4410, 0.22}; }
inline twinbeam::DetectorConfig idler_detector() { return {0.207, 4410, 0.22}; }

inline const twinbeam::JointDist3D& photons() {
  static const twinbeam::JointDist3D p = twinbeam::compose_noisy_3d(params());
  return p;
}

struct Matrices {
  twinbeam::DetectionMatrix s, i1, i2;
};

inline const Matrices& matrices() {
  static const Matrices m = [] {
    const auto& p = photons();
    const auto cut = p.cutoffs();
    const double budget = 1e-10;
    const int cs = twinbeam::count_cutoff(signal_detector(), p.marginal(0).values, budget);
    const int c1 = twinbeam::count_cutoff(idler_detector(), p.marginal(1).values, budget);
    const int c2 = twinbeam::count_cutoff(idler_detector(), p.marginal(2).values, budget);
    return Matrices{twinbeam::detection_matrix(signal_detector(), cs, cut[0]),
                    twinbeam::detection_matrix(idler_detector(), c1, cut[1]),
                    twinbeam::detection_matrix(idler_detector(), c2, cut[2])};
  }();
  return m;
}

inline const twinbeam::Histogram3D& exact_histogram() {
  static const twinbeam::Histogram3D f = [] {
    const auto& m = matrices();
    return twinbeam::forward_histogram(photons(), m.s, m.i1, m.i2);
  }();
  return f;
}

}  // namespace fixture

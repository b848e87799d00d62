#pragma once

#include <array>
#include <map>

#include "twinbeam/distributions.hpp"
#include "twinbeam/field_model.hpp"

namespace twinbeam {

enum class MomentKind { photon_number, intensity };

// Multi-index over (s, i1, i2) for rank 3, (i1, i2, -) for rank 2, (n, -, -) for rank 1.
using MultiIndex = std::array<int, 3>;

class MomentSet {
 public:
  MomentSet(int rank, MomentKind kind, double s = 1.0);

  int rank() const { return rank_; }
  MomentKind kind() const { return kind_; }
  // Ordering parameter of intensity moments (1 = normal ordering).
  double s() const { return s_; }
  bool truncation_warning() const { return truncation_warning_; }
  void set_truncation_warning(bool w) { truncation_warning_ = w; }

  void set(const MultiIndex& k, double value);
  bool has(const MultiIndex& k) const { return values_.count(k) > 0; }
  double at(const MultiIndex& k) const;
  double at(int k0, int k1 = 0, int k2 = 0) const { return at(MultiIndex{k0, k1, k2}); }
  const std::map<MultiIndex, double>& values() const { return values_; }

  // Covariance <dX_a dX_b> of the rank's axes, from first and second moments.
  double covariance(int a, int b) const;
  double mean(int a) const;

 private:
  int rank_;
  MomentKind kind_;
  double s_;
  bool truncation_warning_ = false;
  std::map<MultiIndex, double> values_;
};

MultiIndex unit_index(int axis, int order = 1);
MultiIndex pair_index(int a, int b);

// Mixed moments with every component <= max_order.
MomentSet photon_moments(const JointDist1D& dist, int max_order);
MomentSet photon_moments(const JointDist2D& dist, int max_order);
MomentSet photon_moments(const JointDist3D& dist, int max_order);

MomentSet moments_photon_to_intensity(const MomentSet& m);
MomentSet moments_intensity_to_photon(const MomentSet& m);

ModeField thermal_params_from_moments(double mean, double variance);

}  // namespace twinbeam

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "twinbeam/distributions.hpp"
#include "twinbeam/moments.hpp"

namespace twinbeam {

using Index2 = std::array<int, 2>;

struct CriterionReport {
  std::string name;
  std::vector<Index2> indices;
  double value = 0.0;
  bool nonclassical = false;
  std::optional<double> uncertainty;
};

struct NcdReport {
  std::string criterion;
  std::vector<Index2> indices;
  double value_at_s1 = 0.0;
  double s_threshold = 1.0;
  double tau = 0.0;
  bool saturated = false;
  // More than one sign change on the coarse scan; the outermost is reported.
  bool non_monotone_warning = false;
};

struct OrderingContext {
  std::array<double, 2> modes{1.0, 1.0};
  void validate() const;
};

enum class CriterionFamily { ccs, matrix };

// Correlation, noise-reduction and Fano statistics of a 2D distribution.
double covariance_delta(const JointDist2D& dist);
double noise_reduction_plus(const JointDist2D& dist);
double fano(const JointDist1D& marginal);

// Moment accessor used by the generic criterion forms: value of <W^k>.
using MomentLookup = std::function<double(const Index2&)>;

double ccs_value(const MomentLookup& m, const Index2& K, const Index2& L);
double matrix_value(const MomentLookup& m, const Index2& J, const Index2& K, const Index2& L);

// Criteria on rank-2 intensity moments.
CriterionReport ccs_criterion(const MomentSet& m, const Index2& K, const Index2& L);
CriterionReport matrix_criterion(const MomentSet& m, const Index2& J, const Index2& K, const Index2& L);
CriterionReport c_w(const MomentSet& m);
CriterionReport m_w(const MomentSet& m);

// Normally ordered intensity moments of a 2D photon-number distribution.
MomentSet intensity_moments(const JointDist2D& dist, int max_order);

// Probability substitution <W^K> <- K! p(K) / p(0,0).
MomentLookup probability_lookup(const JointDist2D& dist);
CriterionReport probability_criterion(const JointDist2D& dist, CriterionFamily family,
                                      const std::vector<Index2>& indices);

struct LocalMapSettings {
  double floor = 0.01;
};

struct LocalEntry {
  CriterionReport best;
  // All candidate index sets that passed the floor; each entry is (L) or (J, L).
  std::vector<std::vector<Index2>> candidates;
};

std::map<Index2, LocalEntry> local_criterion_maps(const JointDist2D& dist, CriterionFamily family,
                                                  const LocalMapSettings& settings = {});

// L(n) for each value of the conditioning axis; nullopt marks an empty slice.
std::map<int, std::optional<CriterionReport>> hybrid_L(const JointDist2D& dist, int conditioning_axis = 0);

// Re-orders rank-2 intensity moments from m.s() to s_target (s_target <= m.s()).
MomentSet ordering_transform_moments(const MomentSet& m, const OrderingContext& ctx, double s_target);

struct NcdSettings {
  double tolerance = 1e-4;
  int scan_points = 65;
};

// Depth for a criterion function f(s); nonclassical where f < 0.
NcdReport ncd_from_function(const std::function<double(double)>& f, const NcdSettings& settings = {});

NcdReport ncd_ccs(const MomentSet& normal, const Index2& K, const Index2& L, const OrderingContext& ctx = {},
                  const NcdSettings& settings = {});
NcdReport ncd_matrix(const MomentSet& normal, const Index2& J, const Index2& K, const Index2& L,
                     const OrderingContext& ctx = {}, const NcdSettings& settings = {});
NcdReport ncd_c_w(const MomentSet& normal, const OrderingContext& ctx = {}, const NcdSettings& settings = {});
NcdReport ncd_m_w(const MomentSet& normal, const OrderingContext& ctx = {}, const NcdSettings& settings = {});

// Probability criteria under the s-ordered photon-number distribution.
NcdReport ncd_probability(const JointDist2D& dist, CriterionFamily family, const std::vector<Index2>& indices,
                          const NcdSettings& settings = {});

struct LocalNcdEntry {
  CriterionReport best;
  NcdReport ncd;
};
// Depth of the local map minimum at each K; index candidates are fixed at s = 1.
std::map<Index2, LocalNcdEntry> local_ncd_map(const JointDist2D& dist, CriterionFamily family,
                                              const LocalMapSettings& settings = {}, const NcdSettings& ncd = {});

// Depth of L(n): s-ordered probabilities on the conditioning axis and
// s-ordered moments (one mode) on the other.
std::map<int, NcdReport> hybrid_L_ncd(const JointDist2D& dist, int conditioning_axis = 0,
                                      const NcdSettings& settings = {});

// Multinomial bootstrap standard deviation of stat over a count matrix.
double bootstrap_std(const Eigen::MatrixXd& counts, const std::function<double(const JointDist2D&)>& stat,
                     int resamples, std::uint64_t seed);

}  // namespace twinbeam

#include "twinbeam/moments.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "twinbeam/errors.hpp"
#include "twinbeam/special.hpp"

namespace twinbeam {

namespace {

constexpr double kTruncationTolerance = 1e-8;

std::string show(const MultiIndex& k, int rank) {
  std::string s = "(";
  for (int a = 0; a < rank; ++a) s += (a ? "," : "") + std::to_string(k[a]);
  return s + ")";
}

std::vector<std::vector<double>> power_table(int cutoff, int max_order) {
  std::vector<std::vector<double>> pw(max_order + 1, std::vector<double>(cutoff + 1, 1.0));
  for (int k = 1; k <= max_order; ++k)
    for (int n = 0; n <= cutoff; ++n) pw[k][n] = pw[k - 1][n] * n;
  return pw;
}

bool truncation_suspect(double tail_mass, int cutoff, int max_order) {
  return tail_mass * std::pow(static_cast<double>(std::max(cutoff, 1)), max_order) > kTruncationTolerance;
}

// Applies prod_a table[k_a][l_a] over all L <= K.
MomentSet stirling_transform(const MomentSet& m, const std::vector<std::vector<double>>& table, MomentKind target) {
  MomentSet out(m.rank(), target, 1.0);
  out.set_truncation_warning(m.truncation_warning());
  for (const auto& [k, value] : m.values()) {
    (void)value;
    double total = 0.0;
    for (int l0 = 0; l0 <= k[0]; ++l0)
      for (int l1 = 0; l1 <= k[1]; ++l1)
        for (int l2 = 0; l2 <= k[2]; ++l2) {
          const double c = table[k[0]][l0] * table[k[1]][l1] * table[k[2]][l2];
          if (c == 0.0) continue;
          const MultiIndex l{l0, l1, l2};
          if (!m.has(l))
            throw incomplete_input_error("moment " + show(l, m.rank()) + " required by " + show(k, m.rank()) +
                                         " is missing");
          total += c * m.at(l);
        }
    out.set(k, total);
  }
  return out;
}

int highest_order(const MomentSet& m) {
  int h = 0;
  for (const auto& [k, v] : m.values()) {
    (void)v;
    for (int a = 0; a < 3; ++a) h = std::max(h, k[a]);
  }
  return h;
}

}  // namespace

MomentSet::MomentSet(int rank, MomentKind kind, double s) : rank_(rank), kind_(kind), s_(s) {
  if (rank < 1 || rank > 3) throw parameter_error("moment rank must be 1, 2 or 3");
}

void MomentSet::set(const MultiIndex& k, double value) {
  for (int a = 0; a < 3; ++a) {
    if (k[a] < 0) throw index_domain_error("negative moment index");
    if (a >= rank_ && k[a] != 0) throw index_domain_error("index beyond moment rank");
  }
  values_[k] = value;
}

double MomentSet::at(const MultiIndex& k) const {
  auto it = values_.find(k);
  if (it == values_.end()) throw incomplete_input_error("moment " + show(k, rank_) + " not available");
  return it->second;
}

double MomentSet::mean(int a) const { return at(unit_index(a)); }

double MomentSet::covariance(int a, int b) const { return at(pair_index(a, b)) - mean(a) * mean(b); }

MultiIndex unit_index(int axis, int order) {
  MultiIndex k{0, 0, 0};
  k[axis] = order;
  return k;
}

MultiIndex pair_index(int a, int b) {
  MultiIndex k{0, 0, 0};
  k[a] += 1;
  k[b] += 1;
  return k;
}

MomentSet photon_moments(const JointDist1D& dist, int max_order) {
  const int cut = dist.cutoff();
  const auto pw = power_table(cut, max_order);
  MomentSet out(1, MomentKind::photon_number);
  for (int k = 0; k <= max_order; ++k) {
    double s = 0.0;
    for (int n = 0; n <= cut; ++n) s += pw[k][n] * dist.values[n];
    out.set({k, 0, 0}, s);
  }
  out.set_truncation_warning(truncation_suspect(dist.tail_mass, cut, max_order));
  return out;
}

MomentSet photon_moments(const JointDist2D& dist, int max_order) {
  const auto cut = dist.cutoffs();
  const auto pa = power_table(cut[0], max_order), pb = power_table(cut[1], max_order);
  MomentSet out(2, MomentKind::photon_number);
  for (int k0 = 0; k0 <= max_order; ++k0)
    for (int k1 = 0; k1 <= max_order; ++k1) {
      double s = 0.0;
      for (int a = 0; a <= cut[0]; ++a) {
        double row = 0.0;
        for (int b = 0; b <= cut[1]; ++b) row += pb[k1][b] * dist.values(a, b);
        s += pa[k0][a] * row;
      }
      out.set({k0, k1, 0}, s);
    }
  out.set_truncation_warning(truncation_suspect(dist.tail_mass, std::max(cut[0], cut[1]), 2 * max_order));
  return out;
}

MomentSet photon_moments(const JointDist3D& dist, int max_order) {
  const auto cut = dist.cutoffs();
  const int K = max_order + 1;
  const auto p0 = power_table(cut[0], max_order), p1 = power_table(cut[1], max_order),
             p2 = power_table(cut[2], max_order);
  // Contract the last axis first, then the middle, then the first.
  std::vector<double> acc(K * K * K, 0.0);
  std::vector<double> r2(K), r12(K * K);
  for (int a = 0; a <= cut[0]; ++a) {
    std::fill(r12.begin(), r12.end(), 0.0);
    for (int b = 0; b <= cut[1]; ++b) {
      std::fill(r2.begin(), r2.end(), 0.0);
      bool any = false;
      for (int c = 0; c <= cut[2]; ++c) {
        const double v = dist.values(a, b, c);
        if (v == 0.0) continue;
        any = true;
        for (int k2 = 0; k2 < K; ++k2) r2[k2] += p2[k2][c] * v;
      }
      if (!any) continue;
      for (int k1 = 0; k1 < K; ++k1)
        for (int k2 = 0; k2 < K; ++k2) r12[k1 * K + k2] += p1[k1][b] * r2[k2];
    }
    for (int k0 = 0; k0 < K; ++k0)
      for (int j = 0; j < K * K; ++j) acc[k0 * K * K + j] += p0[k0][a] * r12[j];
  }
  MomentSet out(3, MomentKind::photon_number);
  for (int k0 = 0; k0 < K; ++k0)
    for (int k1 = 0; k1 < K; ++k1)
      for (int k2 = 0; k2 < K; ++k2) out.set({k0, k1, k2}, acc[(k0 * K + k1) * K + k2]);
  out.set_truncation_warning(
      truncation_suspect(dist.tail_mass, std::max({cut[0], cut[1], cut[2]}), 3 * max_order));
  return out;
}

MomentSet moments_photon_to_intensity(const MomentSet& m) {
  if (m.kind() != MomentKind::photon_number) throw parameter_error("expected photon-number moments");
  return stirling_transform(m, stirling_first_table(highest_order(m)), MomentKind::intensity);
}

MomentSet moments_intensity_to_photon(const MomentSet& m) {
  if (m.kind() != MomentKind::intensity || m.s() != 1.0)
    throw parameter_error("expected normally ordered intensity moments");
  return stirling_transform(m, stirling_second_table(highest_order(m)), MomentKind::photon_number);
}

ModeField thermal_params_from_moments(double mean, double variance) {
  if (!(mean > 0.0) || !(variance > 0.0))
    throw parameter_error("thermal parameters need positive mean and variance, got mean=" + std::to_string(mean) +
                          ", variance=" + std::to_string(variance));
  return ModeField{mean * mean / variance, variance / mean};
}

}  // namespace twinbeam

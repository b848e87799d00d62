#include "twinbeam/field_model.hpp"

#include <cmath>
#include <string>

#include "twinbeam/errors.hpp"
#include "twinbeam/parallel.hpp"

namespace twinbeam {

namespace {

// Entries of the five component pmfs below this value are skipped in the
// staged convolution; the skipped mass is reported through tail_mass.
constexpr double kNegligible = 1e-22;

std::string describe(const ModeField& f) {
  return "(M=" + std::to_string(f.M) + ", B=" + std::to_string(f.B) + ")";
}

std::vector<double> padded_component(const ModeField& f, double budget) {
  return mandel_rice_vector(f, mandel_rice_cutoff(f, budget * 1e-6));
}

void check_tail(const JointDist3D& d, double budget, const Cutoffs3& suggested) {
  if (d.tail_mass > budget) {
    throw truncation_error("tail mass " + std::to_string(d.tail_mass) + " exceeds budget; suggested cutoffs (" +
                               std::to_string(suggested[0]) + ", " + std::to_string(suggested[1]) + ", " +
                               std::to_string(suggested[2]) + ")",
                           suggested);
  }
}

}  // namespace

void ModeField::validate() const {
  if (!(M > 0.0) || !std::isfinite(M)) throw parameter_error("mode count M must be positive, got " + describe(*this));
  if (!(B >= 0.0) || !std::isfinite(B)) throw parameter_error("mean per mode B must be non-negative, got " + describe(*this));
}

void CompositeFieldParams::validate() const {
  twb1.validate();
  twb2.validate();
  noise_s.validate();
  noise_i1.validate();
  noise_i2.validate();
}

double mandel_rice_pmf(int n, const ModeField& field) {
  field.validate();
  if (n < 0) throw parameter_error("photon number must be non-negative");
  if (field.B == 0.0) return n == 0 ? 1.0 : 0.0;
  const double M = field.M, B = field.B;
  const double lp = std::lgamma(n + M) - std::lgamma(n + 1.0) - std::lgamma(M) + n * std::log(B) -
                    (n + M) * std::log1p(B);
  return std::exp(lp);
}

std::vector<double> mandel_rice_vector(const ModeField& field, int cutoff) {
  field.validate();
  std::vector<double> p(cutoff + 1);
  for (int n = 0; n <= cutoff; ++n) p[n] = mandel_rice_pmf(n, field);
  return p;
}

int mandel_rice_cutoff(const ModeField& field, double budget) {
  field.validate();
  if (field.B == 0.0) return 0;
  const double q = field.B / (1.0 + field.B);
  // Past the mode the ratio p(n+1)/p(n) = (n+M)/(n+1) q is monotone with limit q,
  // so the tail beyond n is at most p(n+1) / (1 - max(ratio, q)).
  for (int n = 0;; ++n) {
    const double ratio = (n + 1 + field.M) / (n + 2) * q;
    if (ratio < 1.0 && (n + field.M) / (n + 1) * q < 1.0) {
      const double tail = mandel_rice_pmf(n + 1, field) / (1.0 - std::max(ratio, q));
      if (tail <= budget) return n;
    }
    if (n > 10'000'000) throw parameter_error("Mandel-Rice cutoff search did not terminate for " + describe(field));
  }
}

int quantile_cutoff(const std::vector<double>& pmf, double budget) {
  double cum = 0.0;
  for (std::size_t n = 0; n < pmf.size(); ++n) {
    cum += pmf[n];
    if (cum >= 1.0 - budget) return static_cast<int>(n);
  }
  return static_cast<int>(pmf.size()) - 1;
}

std::vector<double> convolve(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) return {};
  std::vector<double> out(a.size() + b.size() - 1, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  return out;
}

double twb_joint_pmf(int n_s, int n_i, const ModeField& field) {
  if (n_s < 0 || n_i < 0) throw parameter_error("photon numbers must be non-negative");
  return n_s == n_i ? mandel_rice_pmf(n_s, field) : 0.0;
}

Cutoffs3 paired_cutoffs(const ModeField& twb1, const ModeField& twb2, double budget) {
  const auto p1 = padded_component(twb1, budget), p2 = padded_component(twb2, budget);
  return {quantile_cutoff(convolve(p1, p2), budget / 3.0), quantile_cutoff(p1, budget / 3.0),
          quantile_cutoff(p2, budget / 3.0)};
}

Cutoffs3 composite_cutoffs(const CompositeFieldParams& params, double budget) {
  params.validate();
  const auto p1 = padded_component(params.twb1, budget), p2 = padded_component(params.twb2, budget);
  const auto ns = padded_component(params.noise_s, budget);
  const auto q1 = padded_component(params.noise_i1, budget), q2 = padded_component(params.noise_i2, budget);
  return {quantile_cutoff(convolve(convolve(p1, p2), ns), budget / 3.0),
          quantile_cutoff(convolve(p1, q1), budget / 3.0), quantile_cutoff(convolve(p2, q2), budget / 3.0)};
}

JointDist3D paired_3d(const ModeField& twb1, const ModeField& twb2, std::optional<Cutoffs3> cutoffs,
                      double budget) {
  twb1.validate();
  twb2.validate();
  const Cutoffs3 cut = cutoffs ? *cutoffs : paired_cutoffs(twb1, twb2, budget);
  const auto p1 = mandel_rice_vector(twb1, cut[1]);
  const auto p2 = mandel_rice_vector(twb2, cut[2]);
  JointDist3D out;
  out.kind = AxisKind::photons;
  out.values = Tensor3(cut[0] + 1, cut[1] + 1, cut[2] + 1);
  // the sum over n_s1 collapses on the Kronecker deltas: n_s1 = n_i1, n_s - n_s1 = n_i2.
  for (int n1 = 0; n1 <= cut[1]; ++n1)
    for (int n2 = 0; n2 <= cut[2] && n1 + n2 <= cut[0]; ++n2) out.values(n1 + n2, n1, n2) = p1[n1] * p2[n2];
  out.tail_mass = std::max(0.0, 1.0 - out.sum());
  if (cutoffs) check_tail(out, budget, paired_cutoffs(twb1, twb2, budget));
  return out;
}

JointDist3D compose_noisy_3d(const CompositeFieldParams& params, std::optional<Cutoffs3> cutoffs, double budget) {
  params.validate();
  const Cutoffs3 cut = cutoffs ? *cutoffs : composite_cutoffs(params, budget);
  const int S = cut[0], I1 = cut[1], I2 = cut[2];
  const auto p1 = mandel_rice_vector(params.twb1, std::min(I1, S));
  const auto p2 = mandel_rice_vector(params.twb2, std::min(I2, S));
  const auto ns = mandel_rice_vector(params.noise_s, S);
  const auto q1 = mandel_rice_vector(params.noise_i1, I1);
  const auto q2 = mandel_rice_vector(params.noise_i2, I2);

  std::vector<int> act1, act2;
  for (int l = 0; l < static_cast<int>(p1.size()); ++l)
    if (p1[l] >= kNegligible) act1.push_back(l);
  for (int l = 0; l < static_cast<int>(p2.size()); ++l)
    if (p2[l] >= kNegligible) act2.push_back(l);
  const int A1 = act1.size(), A2 = act2.size();

  JointDist3D out;
  out.kind = AxisKind::photons;
  out.values = Tensor3(S + 1, I1 + 1, I2 + 1);

  parallel_for(S + 1, [&](std::size_t s_idx) {
    const int s = static_cast<int>(s_idx);
    // paired part with signal noise folded in: a(l1, l2) = p1 p2 ns(s - l1 - l2)
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(A1, A2);
    bool any = false;
    for (int i = 0; i < A1; ++i)
      for (int j = 0; j < A2; ++j) {
        const int rest = s - act1[i] - act2[j];
        if (rest < 0) continue;
        a(i, j) = p1[act1[i]] * p2[act2[j]] * ns[rest];
        any = any || a(i, j) != 0.0;
      }
    if (!any) return;
    // idler-1 noise: b(n1, l2) = sum_l1 q1(n1 - l1) a(l1, l2)
    Eigen::MatrixXd q1m = Eigen::MatrixXd::Zero(I1 + 1, A1);
    for (int n1 = 0; n1 <= I1; ++n1)
      for (int i = 0; i < A1; ++i)
        if (n1 >= act1[i]) q1m(n1, i) = q1[n1 - act1[i]];
    Eigen::MatrixXd q2m = Eigen::MatrixXd::Zero(I2 + 1, A2);
    for (int n2 = 0; n2 <= I2; ++n2)
      for (int j = 0; j < A2; ++j)
        if (n2 >= act2[j]) q2m(n2, j) = q2[n2 - act2[j]];
    const Eigen::MatrixXd slice = q1m * a * q2m.transpose();
    for (int n1 = 0; n1 <= I1; ++n1)
      for (int n2 = 0; n2 <= I2; ++n2) out.values(s, n1, n2) = std::max(0.0, slice(n1, n2));
  });
  out.tail_mass = std::max(0.0, 1.0 - out.sum());
  if (cutoffs) check_tail(out, budget, composite_cutoffs(params, budget));
  return out;
}

JointDist2D ideal_postselected_state(int n_s, const std::vector<double>& weights) {
  if (n_s < 0) throw parameter_error("n_s must be non-negative");
  if (static_cast<int>(weights.size()) != n_s + 1)
    throw parameter_error("expected " + std::to_string(n_s + 1) + " weights, got " + std::to_string(weights.size()));
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw parameter_error("weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw parameter_error("weights must sum to 1, got " + std::to_string(total));
  JointDist2D out;
  out.kind = AxisKind::photons;
  out.values = Eigen::MatrixXd::Zero(n_s + 1, n_s + 1);
  for (int k = 0; k <= n_s; ++k) out.values(k, n_s - k) = weights[k];
  return out;
}

std::vector<double> bayes_postselection_weights(int n_s, const ModeField& twb) {
  if (n_s < 0) throw parameter_error("n_s must be non-negative");
  std::vector<double> w(n_s + 1);
  double total = 0.0;
  for (int k = 0; k <= n_s; ++k) {
    w[k] = mandel_rice_pmf(k, twb) * mandel_rice_pmf(n_s - k, twb);
    total += w[k];
  }
  if (!(total > 0.0)) throw degenerate_error("conditioning event has zero probability");
  for (double& x : w) x /= total;
  return w;
}

}  // namespace twinbeam

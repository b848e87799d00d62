#include "twinbeam/quasidist.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "twinbeam/errors.hpp"
#include "twinbeam/special.hpp"

namespace twinbeam {

namespace {

constexpr double kQLimitTol = 1e-12;  // |1 + s| below this is treated as s = -1

void check_s_open(double s) {
  if (!std::isfinite(s) || s < -1.0 || s >= 1.0)
    throw parameter_error("ordering parameter must lie in [-1, 1) for a quasi-distribution");
}

// phi_m(W) without the exponential factor exp(-2W / (1 - s)), m = 0..m_max.
std::vector<double> phi_poly(int m_max, double s, double w) {
  std::vector<double> out(m_max + 1);
  if (std::abs(1.0 + s) < kQLimitTol) {
    // Limit s -> -1: W^m / m!.
    double t = 1.0;
    for (int m = 0; m <= m_max; ++m) {
      out[m] = t;
      t *= w / (m + 1);
    }
    return out;
  }
  const double r = (s + 1.0) / (s - 1.0);
  const double c = 4.0 / (1.0 - s * s);
  const auto L = laguerre_sequence(m_max, c * w);
  double rm = 2.0 / (1.0 - s);
  for (int m = 0; m <= m_max; ++m) {
    out[m] = rm * L[m];
    rm *= r;
  }
  return out;
}

int effective_order(const Eigen::VectorXd& marginal) {
  int n = static_cast<int>(marginal.size()) - 1;
  while (n > 0 && marginal(n) == 0.0) --n;
  return n;
}

int quantile_index(const Eigen::VectorXd& marginal, double level) {
  const double total = marginal.sum();
  double acc = 0.0;
  for (int n = 0; n < marginal.size(); ++n) {
    acc += marginal(n);
    if (acc >= level * total) return n;
  }
  return static_cast<int>(marginal.size()) - 1;
}

// Phi(m, j) = phi_m(j h) including the exponential.
Eigen::MatrixXd phi_matrix(int m_max, double s, double h, int points) {
  Eigen::MatrixXd phi(m_max + 1, points);
  for (int j = 0; j < points; ++j) {
    const double w = j * h;
    const auto poly = phi_poly(m_max, s, w);
    const double e = std::exp(-2.0 * w / (1.0 - s));
    for (int m = 0; m <= m_max; ++m) phi(m, j) = poly[m] * e;
  }
  return phi;
}

double recommended_bound(int n_max) {
  if (n_max <= 0) return 1.0;
  const double R = std::pow(10.0, 6.0 / n_max);
  return (R - 1.0) / (R + 1.0);
}

}  // namespace

double QuasiGrid::integral() const { return moment(0, 0); }

double QuasiGrid::moment(int k1, int k2) const {
  const auto w1s = simpson_weights(static_cast<int>(values.rows()), step);
  const auto w2s = simpson_weights(static_cast<int>(values.cols()), step);
  Eigen::VectorXd a(values.rows()), b(values.cols());
  for (int i = 0; i < values.rows(); ++i) a(i) = w1s[i] * std::pow(w1(i), k1);
  for (int j = 0; j < values.cols(); ++j) b(j) = w2s[j] * std::pow(w2(j), k2);
  const Eigen::VectorXd inner = values * b;
  CompensatedSum acc;
  for (int i = 0; i < values.rows(); ++i) acc.add(a(i) * inner(i));
  return acc.value();
}

double QuasiGrid1D::integral() const {
  const auto w = simpson_weights(static_cast<int>(values.size()), step);
  CompensatedSum acc;
  for (int i = 0; i < values.size(); ++i) acc.add(w[i] * values(i));
  return acc.value();
}

QuasiGrid quasi_distribution(const JointDist2D& p, double s, const GridSpec& grid) {
  check_s_open(s);
  if (!(grid.step > 0.0)) throw parameter_error("grid step must be positive");
  if (p.values.size() == 0) throw shape_error("empty distribution");
  const Eigen::VectorXd m1 = p.values.rowwise().sum();
  const Eigen::VectorXd m2 = p.values.colwise().sum().transpose();
  const int n1 = effective_order(m1);
  const int n2 = effective_order(m2);

  auto extent = [&](const std::optional<double>& given, const Eigen::VectorXd& marg) {
    if (given) {
      if (!(*given > 0.0)) throw parameter_error("grid extent must be positive");
      return *given;
    }
    return quantile_index(marg, 1.0 - 1e-6) + 5.0 * (1.0 - s);
  };
  const double e1 = extent(grid.extent_i1, m1);
  const double e2 = extent(grid.extent_i2, m2);
  const int pts1 = static_cast<int>(std::floor(e1 / grid.step + 1e-9)) + 1;
  const int pts2 = static_cast<int>(std::floor(e2 / grid.step + 1e-9)) + 1;

  const Eigen::MatrixXd phi1 = phi_matrix(n1, s, grid.step, pts1);
  const Eigen::MatrixXd phi2 = phi_matrix(n2, s, grid.step, pts2);
  const Eigen::MatrixXd pc = p.values.topLeftCorner(n1 + 1, n2 + 1);

  QuasiGrid q;
  q.step = grid.step;
  q.s = s;
  q.truncation_order = {n1, n2};
  q.values = phi1.transpose() * pc * phi2;
  const Eigen::MatrixXd mag = phi1.cwiseAbs().transpose() * pc.cwiseAbs() * phi2.cwiseAbs();
  const double peak = q.values.cwiseAbs().maxCoeff();
  q.cancellation = peak > 0.0 ? mag.maxCoeff() / peak : std::numeric_limits<double>::infinity();
  // Noticeable loss once more than six of the sixteen digits cancel.
  q.recommended_max_s = recommended_bound(std::max(n1, n2));
  q.precision_warning = q.cancellation > 1e6 || s > q.recommended_max_s;
  return q;
}

QuasiGrid1D quasi_distribution_1d(const JointDist1D& p, double s, double extent, double step) {
  check_s_open(s);
  if (!(step > 0.0) || !(extent > 0.0)) throw parameter_error("grid step and extent must be positive");
  Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(p.values.data(), p.values.size());
  const int n = effective_order(v);
  const int pts = static_cast<int>(std::floor(extent / step + 1e-9)) + 1;
  const Eigen::MatrixXd phi = phi_matrix(n, s, step, pts);
  QuasiGrid1D q;
  q.step = step;
  q.s = s;
  q.values = phi.transpose() * v.head(n + 1);
  return q;
}

NegativityReport negativity_report(const QuasiGrid& q, double lobe_exclusion) {
  NegativityReport r;
  if (q.values.size() == 0) return r;
  const double cell = q.step * q.step;
  double neg = 0.0, cx = 0.0, cy = 0.0;
  double lo1 = 0, hi1 = 0, lo2 = 0, hi2 = 0;
  bool any = false;
  r.min_value = std::numeric_limits<double>::infinity();
  r.max_value = -std::numeric_limits<double>::infinity();
  r.lobe_max_value = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < q.values.rows(); ++i) {
    for (int j = 0; j < q.values.cols(); ++j) {
      const double v = q.values(i, j);
      const double a = q.w1(i), b = q.w2(j);
      if (v < r.min_value) { r.min_value = v; r.min_location = {a, b}; }
      if (v > r.max_value) { r.max_value = v; r.max_location = {a, b}; }
      if (a + b >= lobe_exclusion && v > r.lobe_max_value) {
        r.lobe_max_value = v;
        r.lobe_max_location = {a, b};
      }
      if (v < 0.0) {
        const double m = -v * cell;
        neg += m;
        cx += m * a;
        cy += m * b;
        if (!any) { lo1 = hi1 = a; lo2 = hi2 = b; any = true; }
        lo1 = std::min(lo1, a); hi1 = std::max(hi1, a);
        lo2 = std::min(lo2, b); hi2 = std::max(hi2, b);
      }
    }
  }
  if (!std::isfinite(r.lobe_max_value)) {
    r.lobe_max_value = r.max_value;
    r.lobe_max_location = r.max_location;
  }
  r.negative_mass = neg;
  if (any) {
    r.bounding_box = std::array<double, 4>{lo1, hi1, lo2, hi2};
    r.negative_centroid = std::array<double, 2>{cx / neg, cy / neg};
  }
  return r;
}

Eigen::MatrixXd smearing_kernel(double s, int n_out, int m_max) {
  if (!std::isfinite(s) || s < -1.0 || s > 1.0) throw parameter_error("ordering parameter must lie in [-1, 1]");
  if (n_out < 0 || m_max < 0) throw parameter_error("kernel sizes must be non-negative");
  const double b = (1.0 - s) / 2.0;
  const double q = b / (1.0 + b);
  std::vector<double> geom(n_out + 1);
  double t = 1.0 - q;
  for (int k = 0; k <= n_out; ++k) {
    geom[k] = t;
    t *= q;
  }
  std::vector<double> step(n_out + 1);
  for (int k = 0; k <= n_out; ++k) step[k] = b * geom[k] + (k > 0 ? (1.0 - b) * geom[k - 1] : 0.0);
  int step_len = n_out;
  while (step_len > 0 && step[step_len] == 0.0) --step_len;

  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n_out + 1, m_max + 1);
  for (int k = 0; k <= n_out; ++k) K(k, 0) = geom[k];
  for (int m = 1; m <= m_max; ++m) {
    for (int n = 0; n <= n_out; ++n) {
      double acc = 0.0;
      for (int j = 0; j <= std::min(n, step_len); ++j) acc += step[j] * K(n - j, m - 1);
      K(n, m) = acc;
    }
  }
  return K;
}

Eigen::VectorXd smearing_kernel_row(double s, int n, int m_max) {
  if (!std::isfinite(s) || s < -1.0 || s > 1.0) throw parameter_error("ordering parameter must lie in [-1, 1]");
  if (n < 0 || m_max < 0) throw parameter_error("kernel sizes must be non-negative");
  const double b = (1.0 - s) / 2.0;
  Eigen::VectorXd row = Eigen::VectorXd::Zero(m_max + 1);
  if (b == 0.0) {
    if (n <= m_max) row(n) = 1.0;
    return row;
  }
  const double q = b / (1.0 + b);
  const double lb = std::log(b), l1b = b < 1.0 ? std::log1p(-b) : -INFINITY;
  const double lq = std::log(q), l1q = std::log1p(-q);
  for (int m = 0; m <= m_max; ++m) {
    double acc = 0.0;
    // j photons survive the binomial thinning, n - j come from the NB part.
    for (int j = 0; j <= std::min(m, n); ++j) {
      if (j > 0 && b == 1.0) break;
      const double lbin = log_binomial(m, j) + (j > 0 ? j * l1b : 0.0) + (m - j) * lb;
      const int k = n - j;
      const double lnb = log_binomial(k + m, k) + (m + 1) * l1q + k * lq;
      acc += std::exp(lbin + lnb);
    }
    row(m) = acc;
  }
  return row;
}

JointDist2D smeared_pmf(const JointDist2D& p, double s, std::optional<std::array<int, 2>> n_out) {
  const auto cut = p.cutoffs();
  const auto out = n_out.value_or(cut);
  JointDist2D r;
  r.kind = p.kind;
  r.values = smearing_kernel(s, out[0], cut[0]) * p.values * smearing_kernel(s, out[1], cut[1]).transpose();
  r.tail_mass = p.tail_mass;
  return r;
}

namespace {

// G(n, m) = int W^n e^{-W} / n! phi_m(W) dW on a Gauss-Laguerre rule. The
// alternating Laguerre terms cancel heavily, so the sum runs in long double.
Eigen::MatrixXd quadrature_kernel(double s, int n_out, int m_max, const QuadratureRule& rule) {
  using ld = long double;
  const ld alpha = 1.0L + 2.0L / (1.0L - s);
  const bool q_limit = std::abs(1.0 + s) < kQLimitTol;
  const ld r = q_limit ? 0.0L : (ld(s) + 1.0L) / (ld(s) - 1.0L);
  const ld c = q_limit ? 0.0L : 4.0L / (1.0L - ld(s) * s);
  std::vector<ld> acc((n_out + 1) * (m_max + 1), 0.0L);
  std::vector<ld> poly(m_max + 1);
  for (std::size_t j = 0; j < rule.nodes.size(); ++j) {
    if (rule.weights[j] == 0.0) continue;
    const ld w = rule.nodes[j] / alpha;
    if (q_limit) {
      ld t = 1.0L;
      for (int m = 0; m <= m_max; ++m) {
        poly[m] = t;
        t *= w / (m + 1);
      }
    } else {
      const ld x = c * w;
      ld l0 = 1.0L, l1 = 1.0L - x, rm = 2.0L / (1.0L - s);
      for (int m = 0; m <= m_max; ++m) {
        const ld lm = m == 0 ? l0 : l1;
        poly[m] = rm * lm;
        rm *= r;
        if (m >= 1) {
          const ld next = ((2.0L * m + 1.0L - x) * l1 - m * l0) / (m + 1.0L);
          l0 = l1;
          l1 = next;
        }
      }
    }
    const ld lw = std::log(ld(rule.weights[j]) / alpha);
    for (int n = 0; n <= n_out; ++n) {
      const ld f = std::exp(lw + n * std::log(w) - ld(log_factorial(n)));
      if (f == 0.0L) continue;
      for (int m = 0; m <= m_max; ++m) acc[n * (m_max + 1) + m] += f * poly[m];
    }
  }
  Eigen::MatrixXd G(n_out + 1, m_max + 1);
  for (int n = 0; n <= n_out; ++n)
    for (int m = 0; m <= m_max; ++m) G(n, m) = static_cast<double>(acc[n * (m_max + 1) + m]);
  return G;
}

Eigen::MatrixXd refined_kernel(double s, int n_out, int m_max, const QuadratureSpec& quad, int axis) {
  int nodes = quad.initial_nodes > 0 ? quad.initial_nodes : (n_out + m_max + 2) / 2 + 4;
  nodes = std::min(nodes, quad.max_nodes);
  Eigen::MatrixXd prev = quadrature_kernel(s, n_out, m_max, gauss_laguerre(nodes));
  for (;;) {
    const int next = std::min(quad.max_nodes, nodes + std::max(8, nodes / 4));
    if (next == nodes) break;
    Eigen::MatrixXd cur = quadrature_kernel(s, n_out, m_max, gauss_laguerre(next));
    const double scale = std::max(cur.cwiseAbs().maxCoeff(), 1e-300);
    if ((cur - prev).cwiseAbs().maxCoeff() <= quad.rel_tolerance * scale) return cur;
    prev = std::move(cur);
    nodes = next;
  }
  throw precision_error("quadrature for the s-ordered kernel did not settle within the node limit", axis, 0);
}

}  // namespace

JointDist2D s_ordered_pmf(const JointDist2D& p, double s, const QuadratureSpec& quad,
                          std::optional<std::array<int, 2>> n_out) {
  if (!std::isfinite(s) || s < -1.0 || s > 1.0) throw parameter_error("ordering parameter must lie in [-1, 1]");
  const auto cut = p.cutoffs();
  const auto out = n_out.value_or(cut);
  JointDist2D r;
  r.kind = p.kind;
  r.tail_mass = p.tail_mass;
  if (s == 1.0) {
    r.values = Eigen::MatrixXd::Zero(out[0] + 1, out[1] + 1);
    const int a = std::min(out[0], cut[0]), b = std::min(out[1], cut[1]);
    r.values.topLeftCorner(a + 1, b + 1) = p.values.topLeftCorner(a + 1, b + 1);
    return r;
  }
  const Eigen::MatrixXd G1 = refined_kernel(s, out[0], cut[0], quad, 0);
  const Eigen::MatrixXd G2 = refined_kernel(s, out[1], cut[1], quad, 1);
  r.values = G1 * p.values * G2.transpose();
  return r;
}

}  // namespace twinbeam

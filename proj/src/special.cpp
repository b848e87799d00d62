#include "twinbeam/special.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "twinbeam/errors.hpp"

namespace twinbeam {

double log_factorial(int n) { return std::lgamma(static_cast<double>(n) + 1.0); }

double log_binomial(double n, double k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  k = std::min(k, n - k);
  double r = 1.0;
  for (int j = 1; j <= k; ++j) r = r * (n - k + j) / j;
  return r < 9e15 ? std::round(r) : r;
}

void CompensatedSum::add(double x) {
  const double t = sum_ + x;
  if (std::abs(sum_) >= std::abs(x))
    comp_ += (sum_ - t) + x;
  else
    comp_ += (x - t) + sum_;
  sum_ = t;
  abs_ += std::abs(x);
}

std::vector<std::vector<double>> stirling_first_table(int order) {
  std::vector<std::vector<double>> s(order + 1, std::vector<double>(order + 1, 0.0));
  s[0][0] = 1.0;
  for (int k = 1; k <= order; ++k)
    for (int l = 1; l <= k; ++l) s[k][l] = s[k - 1][l - 1] - (k - 1) * s[k - 1][l];
  return s;
}

std::vector<std::vector<double>> stirling_second_table(int order) {
  std::vector<std::vector<double>> S(order + 1, std::vector<double>(order + 1, 0.0));
  S[0][0] = 1.0;
  for (int k = 1; k <= order; ++k)
    for (int l = 1; l <= k; ++l) S[k][l] = S[k - 1][l - 1] + l * S[k - 1][l];
  return S;
}

std::vector<double> laguerre_sequence(int n, double x) {
  std::vector<double> L(n + 1);
  L[0] = 1.0;
  if (n >= 1) L[1] = 1.0 - x;
  for (int k = 1; k < n; ++k) L[k + 1] = ((2.0 * k + 1.0 - x) * L[k] - k * L[k - 1]) / (k + 1.0);
  return L;
}

std::vector<double> binomial_pmf(int n, double p) {
  std::vector<double> out(n + 1, 0.0);
  if (p <= 0.0) {
    out[0] = 1.0;
    return out;
  }
  if (p >= 1.0) {
    out[n] = 1.0;
    return out;
  }
  const double lp = std::log(p), lq = std::log1p(-p);
  for (int k = 0; k <= n; ++k) out[k] = std::exp(log_binomial(n, k) + k * lp + (n - k) * lq);
  return out;
}

QuadratureRule gauss_laguerre(int count) {
  if (count < 1) throw parameter_error("quadrature node count must be positive");
  Eigen::VectorXd diag(count), sub(std::max(count - 1, 0));
  for (int i = 0; i < count; ++i) diag(i) = 2.0 * i + 1.0;
  for (int i = 0; i + 1 < count; ++i) sub(i) = i + 1.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig;
  eig.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
  QuadratureRule rule;
  rule.nodes.resize(count);
  rule.weights.resize(count);
  // Eigenvector-based weights lose all relative accuracy at the large nodes,
  // so nodes are polished by Newton steps and weights taken from
  // w = x / ((n+1) L_{n+1}(x))^2, all in long double.
  using ld = long double;
  auto laguerre_pair = [count](ld x) {
    ld l0 = 1.0L, l1 = 1.0L - x;
    for (int k = 1; k < count; ++k) {
      const ld next = ((2.0L * k + 1.0L - x) * l1 - k * l0) / (k + 1.0L);
      l0 = l1;
      l1 = next;
    }
    return std::pair<ld, ld>{l1, l0};  // L_n, L_{n-1}
  };
  for (int i = 0; i < count; ++i) {
    ld x = eig.eigenvalues()(i);
    for (int it = 0; it < 3; ++it) {
      const auto [ln, lm1] = laguerre_pair(x);
      const ld deriv = count * (ln - lm1) / x;  // x L_n' = n (L_n - L_{n-1})
      if (deriv == 0.0L) break;
      x -= ln / deriv;
    }
    const auto [ln, lm1] = laguerre_pair(x);
    const ld lnext = ((2.0L * count + 1.0L - x) * ln - count * lm1) / (count + 1.0L);
    rule.nodes[i] = static_cast<double>(x);
    rule.weights[i] = static_cast<double>(x / ((count + 1.0L) * (count + 1.0L) * lnext * lnext));
  }
  return rule;
}

std::vector<double> simpson_weights(int count, double h) {
  std::vector<double> w(count, 0.0);
  if (count == 1) return w;
  if (count == 2) {
    w[0] = w[1] = h / 2.0;
    return w;
  }
  int simpson_end = count - 1;
  if ((count - 1) % 2 == 1) {
    // Last three intervals go to a 3/8 panel.
    simpson_end = count - 4;
    const double c = 3.0 * h / 8.0;
    w[simpson_end] += c;
    w[simpson_end + 1] += 3.0 * c;
    w[simpson_end + 2] += 3.0 * c;
    w[simpson_end + 3] += c;
  }
  for (int i = 0; i + 2 <= simpson_end; i += 2) {
    w[i] += h / 3.0;
    w[i + 1] += 4.0 * h / 3.0;
    w[i + 2] += h / 3.0;
  }
  return w;
}

}  // namespace twinbeam

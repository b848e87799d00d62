#pragma once

#include <cstddef>
#include <vector>

namespace twinbeam {

double log_factorial(int n);
double log_binomial(double n, double k);
double binomial(int n, int k);

// Neumaier compensated accumulator.
class CompensatedSum {
 public:
  void add(double x);
  double value() const { return sum_ + comp_; }
  double abs_total() const { return abs_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
  double abs_ = 0.0;
};

// Signed Stirling numbers of the first kind s(k, l), 0 <= l <= k <= order.
std::vector<std::vector<double>> stirling_first_table(int order);
// Stirling numbers of the second kind S(k, l).
std::vector<std::vector<double>> stirling_second_table(int order);

// Standard Laguerre polynomials L_0..L_n at x by upward recurrence.
std::vector<double> laguerre_sequence(int n, double x);

// Binomial(n, p) pmf over k = 0..n.
std::vector<double> binomial_pmf(int n, double p);

// Nodes and weights for Gauss-Laguerre quadrature with weight e^{-x}.
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};
QuadratureRule gauss_laguerre(int count);

// Composite Simpson weights for `count` equally spaced samples of spacing h
// (a 3/8 panel absorbs an even sample count).
std::vector<double> simpson_weights(int count, double h);

}  // namespace twinbeam

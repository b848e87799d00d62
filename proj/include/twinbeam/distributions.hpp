#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace twinbeam {

enum class AxisKind { photons, photocounts, quasi };

std::string to_string(AxisKind kind);
AxisKind axis_kind_from_string(const std::string& s);

// Dense row-major rank-3 array.
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(int n0, int n1, int n2, double fill = 0.0);

  double& operator()(int a, int b, int c) { return data_[index(a, b, c)]; }
  double operator()(int a, int b, int c) const { return data_[index(a, b, c)]; }

  std::array<int, 3> shape() const { return shape_; }
  int extent(int axis) const { return shape_[axis]; }
  std::size_t size() const { return data_.size(); }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  double sum() const;

  // Copy of the [0,n0)x[0,n1)x[0,n2) corner, zero padded where this is smaller.
  Tensor3 resized(int n0, int n1, int n2) const;

 private:
  std::size_t index(int a, int b, int c) const {
    return (static_cast<std::size_t>(a) * shape_[1] + b) * shape_[2] + c;
  }
  std::array<int, 3> shape_{0, 0, 0};
  std::vector<double> data_;
};

struct JointDist1D {
  std::vector<double> values;
  AxisKind kind = AxisKind::photons;
  double tail_mass = 0.0;

  int cutoff() const { return static_cast<int>(values.size()) - 1; }
  double sum() const;
  double mean() const;
  double variance() const;
};

struct JointDist2D {
  Eigen::MatrixXd values;
  AxisKind kind = AxisKind::photons;
  double tail_mass = 0.0;

  std::array<int, 2> cutoffs() const {
    return {static_cast<int>(values.rows()) - 1, static_cast<int>(values.cols()) - 1};
  }
  double sum() const { return values.sum(); }
  JointDist1D marginal(int axis) const;
  // Distribution of the sum of both axis values.
  JointDist1D sum_distribution() const;
};

struct JointDist3D {
  Tensor3 values;
  AxisKind kind = AxisKind::photons;
  double tail_mass = 0.0;

  std::array<int, 3> cutoffs() const {
    const auto s = values.shape();
    return {s[0] - 1, s[1] - 1, s[2] - 1};
  }
  double sum() const { return values.sum(); }
  JointDist1D marginal(int axis) const;
  // Unnormalized (i1, i2) slice at a fixed first-axis index.
  Eigen::MatrixXd slice(int first) const;
};

struct Histogram3D {
  Tensor3 values;
  std::uint64_t trial_count = 0;

  double sum() const { return values.sum(); }
  std::array<int, 3> cutoffs() const {
    const auto s = values.shape();
    return {s[0] - 1, s[1] - 1, s[2] - 1};
  }
};

// y(i,j,k) = sum A0(i,a) A1(j,b) A2(k,c) x(a,b,c); A_m has x.extent(m) columns.
Tensor3 contract3(const Tensor3& x, const Eigen::MatrixXd& A0, const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2);

double total_variation(const Tensor3& a, const Tensor3& b);
double total_variation(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

}  // namespace twinbeam

#include "twinbeam/distributions.hpp"

#include <algorithm>
#include <cmath>

#include "twinbeam/errors.hpp"
#include "twinbeam/special.hpp"

namespace twinbeam {

std::string to_string(AxisKind kind) {
  switch (kind) {
    case AxisKind::photons: return "photons";
    case AxisKind::photocounts: return "photocounts";
    case AxisKind::quasi: return "quasi";
  }
  return "photons";
}

AxisKind axis_kind_from_string(const std::string& s) {
  if (s == "photons") return AxisKind::photons;
  if (s == "photocounts") return AxisKind::photocounts;
  if (s == "quasi") return AxisKind::quasi;
  throw parameter_error("unknown axis_kind '" + s + "'");
}

Tensor3::Tensor3(int n0, int n1, int n2, double fill) : shape_{n0, n1, n2} {
  if (n0 < 0 || n1 < 0 || n2 < 0) throw shape_error("negative tensor extent");
  data_.assign(static_cast<std::size_t>(n0) * n1 * n2, fill);
}

double Tensor3::sum() const {
  CompensatedSum s;
  for (double v : data_) s.add(v);
  return s.value();
}

Tensor3 Tensor3::resized(int n0, int n1, int n2) const {
  Tensor3 out(n0, n1, n2);
  const int m0 = std::min(n0, shape_[0]), m1 = std::min(n1, shape_[1]), m2 = std::min(n2, shape_[2]);
  for (int a = 0; a < m0; ++a)
    for (int b = 0; b < m1; ++b)
      for (int c = 0; c < m2; ++c) out(a, b, c) = (*this)(a, b, c);
  return out;
}

double JointDist1D::sum() const {
  CompensatedSum s;
  for (double v : values) s.add(v);
  return s.value();
}

double JointDist1D::mean() const {
  double s = 0.0, m = 0.0;
  for (std::size_t n = 0; n < values.size(); ++n) {
    s += values[n];
    m += n * values[n];
  }
  return m / s;
}

double JointDist1D::variance() const {
  const double mu = mean();
  double s = 0.0, v = 0.0;
  for (std::size_t n = 0; n < values.size(); ++n) {
    s += values[n];
    v += (n - mu) * (n - mu) * values[n];
  }
  return v / s;
}

JointDist1D JointDist2D::marginal(int axis) const {
  JointDist1D out;
  out.kind = kind;
  out.tail_mass = tail_mass;
  if (axis == 0) {
    Eigen::VectorXd m = values.rowwise().sum();
    out.values.assign(m.data(), m.data() + m.size());
  } else {
    Eigen::RowVectorXd m = values.colwise().sum();
    out.values.assign(m.data(), m.data() + m.size());
  }
  return out;
}

JointDist1D JointDist2D::sum_distribution() const {
  JointDist1D out;
  out.kind = kind;
  out.tail_mass = tail_mass;
  out.values.assign(values.rows() + values.cols() - 1, 0.0);
  for (int a = 0; a < values.rows(); ++a)
    for (int b = 0; b < values.cols(); ++b) out.values[a + b] += values(a, b);
  return out;
}

JointDist1D JointDist3D::marginal(int axis) const {
  JointDist1D out;
  out.kind = kind;
  out.tail_mass = tail_mass;
  const auto s = values.shape();
  out.values.assign(s[axis], 0.0);
  for (int a = 0; a < s[0]; ++a)
    for (int b = 0; b < s[1]; ++b)
      for (int c = 0; c < s[2]; ++c) {
        const int idx = axis == 0 ? a : (axis == 1 ? b : c);
        out.values[idx] += values(a, b, c);
      }
  return out;
}

Eigen::MatrixXd JointDist3D::slice(int first) const {
  const auto s = values.shape();
  Eigen::MatrixXd m(s[1], s[2]);
  for (int b = 0; b < s[1]; ++b)
    for (int c = 0; c < s[2]; ++c) m(b, c) = values(first, b, c);
  return m;
}

Tensor3 contract3(const Tensor3& x, const Eigen::MatrixXd& A0, const Eigen::MatrixXd& A1, const Eigen::MatrixXd& A2) {
  const auto sh = x.shape();
  if (A0.cols() != sh[0] || A1.cols() != sh[1] || A2.cols() != sh[2])
    throw shape_error("contraction matrix does not match tensor extent");
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Index C0 = A0.rows(), C1 = A1.rows(), C2 = A2.rows();
  Eigen::Map<const RowMat> flat(x.data().data(), static_cast<Eigen::Index>(sh[0]) * sh[1], sh[2]);
  RowMat s1 = flat * A2.transpose();
  RowMat s2(sh[0] * C1, C2);
  for (Eigen::Index a = 0; a < sh[0]; ++a) s2.middleRows(a * C1, C1).noalias() = A1 * s1.middleRows(a * sh[1], sh[1]);
  Eigen::Map<const RowMat> s2f(s2.data(), sh[0], C1 * C2);
  RowMat s3 = A0 * s2f;
  Tensor3 y(static_cast<int>(C0), static_cast<int>(C1), static_cast<int>(C2));
  std::copy(s3.data(), s3.data() + s3.size(), y.data().begin());
  return y;
}

double total_variation(const Tensor3& a, const Tensor3& b) {
  const auto sa = a.shape(), sb = b.shape();
  const int n0 = std::max(sa[0], sb[0]), n1 = std::max(sa[1], sb[1]), n2 = std::max(sa[2], sb[2]);
  const Tensor3 pa = a.resized(n0, n1, n2), pb = b.resized(n0, n1, n2);
  double tv = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) tv += std::abs(pa.data()[i] - pb.data()[i]);
  return 0.5 * tv;
}

double total_variation(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const int r = std::max(a.rows(), b.rows()), c = std::max(a.cols(), b.cols());
  Eigen::MatrixXd pa = Eigen::MatrixXd::Zero(r, c), pb = Eigen::MatrixXd::Zero(r, c);
  pa.topLeftCorner(a.rows(), a.cols()) = a;
  pb.topLeftCorner(b.rows(), b.cols()) = b;
  return 0.5 * (pa - pb).cwiseAbs().sum();
}

}  // namespace twinbeam

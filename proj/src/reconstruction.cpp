#include "twinbeam/reconstruction.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "twinbeam/errors.hpp"

namespace twinbeam {

namespace {

void check_histogram_input(double total) {
  if (!(total > 0.0)) throw parameter_error("histogram has no mass");
}

// Log-likelihood bookkeeping shared by the 2D and 3D iterations.
class Monitor {
 public:
  Monitor(EmReport& r, bool trace) : r_(r), trace_(trace) {}
  void record(double ll) {
    if (have_ && ll < last_) {
      const double drop = last_ - ll;
      // rounding noise of the log-likelihood sum itself does not count
      if (drop > 1e-12 * std::max(1.0, std::abs(last_))) r_.monotone = false;
      r_.worst_decrease = std::max(r_.worst_decrease, drop);
    }
    last_ = ll;
    have_ = true;
    r_.log_likelihood = ll;
    if (trace_) r_.trace.push_back(ll);
  }

 private:
  EmReport& r_;
  bool trace_;
  bool have_ = false;
  double last_ = 0.0;
};

// Cells decaying into the subnormal range are zero for every purpose and slow
// the arithmetic down by orders of magnitude.
void flush_subnormal(double* v, Eigen::Index n) {
  for (Eigen::Index i = 0; i < n; ++i)
    if (v[i] < std::numeric_limits<double>::min()) v[i] = 0.0;
}

std::string cell_name(int a, int b, int c = -1) {
  std::string s = "(" + std::to_string(a) + "," + std::to_string(b);
  if (c >= 0) s += "," + std::to_string(c);
  return s + ")";
}

}  // namespace

void EmSettings::validate() const {
  if (!(tolerance > 0.0)) throw parameter_error("EM tolerance must be positive");
  if (max_iterations < 1) throw parameter_error("EM needs at least one iteration");
}

EmResult2D em_reconstruct_2d(const JointDist2D& f_ii, const DetectionMatrix& det_i1, const DetectionMatrix& det_i2,
                             const EmSettings& settings) {
  settings.validate();
  const Eigen::MatrixXd& f0 = f_ii.values;
  if (f0.rows() > det_i1.T.rows() || f0.cols() > det_i2.T.rows())
    throw shape_error("histogram extends beyond the detection matrix count range");
  const Eigen::MatrixXd& A = det_i1.T;
  const Eigen::MatrixXd& B = det_i2.T;
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(A.rows(), B.rows());
  f.topLeftCorner(f0.rows(), f0.cols()) = f0;
  const double total = f.sum();
  check_histogram_input(total);

  Eigen::MatrixXd p;
  if (settings.init == EmSettings::Init::seeded) {
    if (!settings.seed_2d || settings.seed_2d->rows() != A.cols() || settings.seed_2d->cols() != B.cols())
      throw parameter_error("seeded EM needs an initial distribution on the photon grid");
    p = *settings.seed_2d * (total / settings.seed_2d->sum());
  } else {
    p = Eigen::MatrixXd::Constant(A.cols(), B.cols(), total / (A.cols() * B.cols()));
  }

  EmResult2D out;
  Monitor mon(out.report, settings.record_trace);
  Eigen::MatrixXd ratio(f.rows(), f.cols());
  for (int it = 1; it <= settings.max_iterations; ++it) {
    const Eigen::MatrixXd fh = A * p * B.transpose();
    double ll = 0.0;
    for (int a = 0; a < f.rows(); ++a)
      for (int b = 0; b < f.cols(); ++b) {
        const double fv = f(a, b);
        if (fv > 0.0) {
          if (!(fh(a, b) > 0.0))
            throw degenerate_error("detection model assigns zero probability to observed cell " + cell_name(a, b));
          ratio(a, b) = fv / fh(a, b);
          ll += fv * std::log(fh(a, b));
        } else {
          ratio(a, b) = 0.0;
        }
      }
    mon.record(ll);
    Eigen::MatrixXd next = p.cwiseProduct(A.transpose() * ratio * B);
    flush_subnormal(next.data(), next.size());
    const double change = (next - p).cwiseAbs().maxCoeff();
    p = next;
    out.report.iterations = it;
    if (change < settings.tolerance) {
      out.report.converged = true;
      break;
    }
  }
  out.dist.kind = AxisKind::photons;
  out.dist.values = p * (total / p.sum());
  return out;
}

EmResult3D em_reconstruct_3d(const Histogram3D& f_in, const DetectionMatrix& det_s, const DetectionMatrix& det_i1,
                             const DetectionMatrix& det_i2, const EmSettings& settings) {
  settings.validate();
  const auto fs = f_in.values.shape();
  const Eigen::MatrixXd& A0 = det_s.T;
  const Eigen::MatrixXd& A1 = det_i1.T;
  const Eigen::MatrixXd& A2 = det_i2.T;
  if (fs[0] > A0.rows() || fs[1] > A1.rows() || fs[2] > A2.rows())
    throw shape_error("histogram extends beyond the detection matrix count range");
  const Tensor3 f = f_in.values.resized(A0.rows(), A1.rows(), A2.rows());
  const double total = f.sum();
  check_histogram_input(total);
  const Eigen::MatrixXd A0t = A0.transpose(), A1t = A1.transpose(), A2t = A2.transpose();

  Tensor3 p;
  if (settings.init == EmSettings::Init::seeded) {
    if (!settings.seed_3d || settings.seed_3d->shape() != std::array<int, 3>{static_cast<int>(A0.cols()),
                                                                             static_cast<int>(A1.cols()),
                                                                             static_cast<int>(A2.cols())})
      throw parameter_error("seeded EM needs an initial distribution on the photon grid");
    p = *settings.seed_3d;
    const double z = p.sum();
    for (double& v : p.data()) v *= total / z;
  } else {
    p = Tensor3(A0.cols(), A1.cols(), A2.cols(), total / (static_cast<double>(A0.cols()) * A1.cols() * A2.cols()));
  }

  EmResult3D out;
  Monitor mon(out.report, settings.record_trace);
  Tensor3 ratio(f.extent(0), f.extent(1), f.extent(2));
  const auto fsh = f.shape();
  for (int it = 1; it <= settings.max_iterations; ++it) {
    const Tensor3 fh = contract3(p, A0, A1, A2);
    double ll = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double fv = f.data()[i];
      if (fv > 0.0) {
        const double h = fh.data()[i];
        if (!(h > 0.0)) {
          const int a = i / (static_cast<std::size_t>(fsh[1]) * fsh[2]);
          const int b = (i / fsh[2]) % fsh[1];
          const int c = i % fsh[2];
          throw degenerate_error("detection model assigns zero probability to observed cell " + cell_name(a, b, c));
        }
        ratio.data()[i] = fv / h;
        ll += fv * std::log(h);
      } else {
        ratio.data()[i] = 0.0;
      }
    }
    mon.record(ll);
    const Tensor3 back = contract3(ratio, A0t, A1t, A2t);
    double change = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      double next = p.data()[i] * back.data()[i];
      if (next < std::numeric_limits<double>::min()) next = 0.0;
      change = std::max(change, std::abs(next - p.data()[i]));
      p.data()[i] = next;
    }
    out.report.iterations = it;
    if (change < settings.tolerance) {
      out.report.converged = true;
      break;
    }
  }
  const double z = p.sum();
  for (double& v : p.data()) v *= total / z;
  out.dist.kind = AxisKind::photons;
  out.dist.values = std::move(p);
  return out;
}

MomentSet empirical_intensity_moments(const Histogram3D& f, int max_order) {
  const double total = f.sum();
  check_histogram_input(total);
  JointDist3D d;
  d.kind = AxisKind::photocounts;
  d.values = f.values;
  for (double& v : d.values.data()) v /= total;
  return moments_photon_to_intensity(photon_moments(d, max_order));
}

MomentSet combine_idler_moments(const MomentSet& m) {
  if (m.rank() != 3) throw parameter_error("combine_idler_moments expects rank-3 moments");
  const double ms = m.mean(0), m1 = m.mean(1), m2 = m.mean(2);
  const double mi = m1 + m2;
  const double vi = m.covariance(1, 1) + 2.0 * m.covariance(1, 2) + m.covariance(2, 2);
  const double csi = m.covariance(0, 1) + m.covariance(0, 2);
  MomentSet out(2, m.kind(), m.s());
  out.set({0, 0, 0}, 1.0);
  out.set({1, 0, 0}, ms);
  out.set({0, 1, 0}, mi);
  out.set({2, 0, 0}, m.at(2, 0, 0));
  out.set({0, 2, 0}, vi + mi * mi);
  out.set({1, 1, 0}, csi + ms * mi);
  return out;
}

double declination(const Tensor3& f_th, const Tensor3& f) {
  if (f_th.shape() != f.shape()) throw shape_error("declination needs histograms on a common grid");
  double s = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double d = f_th.data()[i] - f.data()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double declination(const Histogram3D& f_th, const Histogram3D& f) { return declination(f_th.values, f.values); }

}  // namespace twinbeam

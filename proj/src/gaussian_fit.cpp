#include "twinbeam/gaussian_fit.hpp"

#include <gsl/gsl_errno.h>
#include <gsl/gsl_min.h>
#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include "twinbeam/errors.hpp"
#include "twinbeam/moments.hpp"
#include "twinbeam/parallel.hpp"
#include "twinbeam/reconstruction.hpp"
#include "twinbeam/special.hpp"

namespace twinbeam {

namespace {

constexpr double kInfeasible = 10.0;

// Counts produced by k photons that reach the pixel array (unit efficiency),
// tabulated until the response has settled to its k -> infinity limit.  The
// last column stands for every larger k.
class PixelResponse {
 public:
  PixelResponse(const DetectorConfig& cfg, int c_max) {
    if (cfg.ideal) {
      R_ = Eigen::MatrixXd::Identity(c_max + 1, c_max + 2);
      return;
    }
    const int N = cfg.pixels;
    const double D = cfg.dark_rate();
    const int jmax = std::min(c_max, N);
    Eigen::MatrixXd dark = Eigen::MatrixXd::Zero(c_max + 1, jmax + 1);
    for (int j = 0; j <= jmax; ++j)
      for (int c = j; c <= c_max; ++c) {
        const int m = c - j, free = N - j;
        if (m > free) break;
        dark(c, j) = D == 0.0 ? (m == 0 ? 1.0 : 0.0)
                              : std::exp(log_binomial(free, m) + m * std::log(D) + (free - m) * std::log1p(-D));
      }
    Eigen::VectorXd limit = Eigen::VectorXd::Zero(c_max + 1);
    if (N <= c_max) limit = dark.col(N);
    std::vector<Eigen::VectorXd> cols;
    Eigen::VectorXd occ = Eigen::VectorXd::Zero(jmax + 1);
    occ(0) = 1.0;
    for (int k = 0;; ++k) {
      if (k > 0) {
        Eigen::VectorXd next = Eigen::VectorXd::Zero(jmax + 1);
        for (int j = 0; j <= jmax; ++j) {
          next(j) += occ(j) * j / N;
          // lighting more than jmax pixels already exceeds c_max
          if (j < jmax) next(j + 1) += occ(j) * (N - j) / static_cast<double>(N);
        }
        occ = next;
      }
      cols.push_back(dark * occ);
      if (k > c_max && (cols.back() - limit).cwiseAbs().maxCoeff() < 1e-14) break;
      if (k > 200000) throw parameter_error("pixel response does not settle");
    }
    R_.resize(c_max + 1, static_cast<int>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) R_.col(static_cast<int>(k)) = cols[k];
  }

  const Eigen::MatrixXd& R() const { return R_; }
  int k_max() const { return static_cast<int>(R_.cols()) - 1; }

 private:
  Eigen::MatrixXd R_;
};

// Thermal photon statistics with mean W and intensity variance V on [0, k_max],
// the last entry holding the tail.
std::vector<double> thermal_pmf(double W, double V, int k_max) {
  std::vector<double> p(k_max + 1, 0.0);
  if (W <= 1e-300) {
    p[0] = 1.0;
    return p;
  }
  const double M = W * W / V;
  double acc = 0.0;
  for (int k = 0; k < k_max; ++k) {
    double v;
    if (M > 1e8)
      v = std::exp(k * std::log(W) - W - log_factorial(k));
    else
      v = mandel_rice_pmf(k, {M, V / W});
    p[k] = v;
    acc += v;
  }
  p[k_max] = std::max(0.0, 1.0 - acc);
  return p;
}

// A(c, l): counts of one arm given l pair photons before losses, with the arm's noise.
Eigen::MatrixXd arm_response(const PixelResponse& px, double eta, double W_n, double V_n, int L) {
  const int K = px.k_max();
  const std::vector<double> nu = thermal_pmf(eta * W_n, eta * eta * V_n, K);
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(K + 1, L + 1);
  for (int l = 0; l <= L; ++l) {
    const auto b = binomial_pmf(l, eta);
    for (int j = 0; j <= l; ++j) {
      if (b[j] == 0.0) continue;
      double tail = 0.0;
      for (int k = 0; k <= K; ++k) {
        const double v = b[j] * nu[k];
        if (k + j < K)
          Q(k + j, l) += v;
        else
          tail += v;
      }
      Q(K, l) += tail;
    }
  }
  return px.R() * Q;
}

std::vector<double> paired_pmf(double W, double V, double budget, int& L) {
  if (W <= 0.0 || V <= 0.0) throw parameter_error("paired moments must be positive");
  const ModeField mf{W * W / V, V / W};
  L = mandel_rice_cutoff(mf, budget);
  if (L > 20000) throw parameter_error("paired field too bright for the fit model");
  return mandel_rice_vector(mf, L);
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

Eigen::MatrixXd collapse_idlers(const Tensor3& f) {
  const auto sh = f.shape();
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(sh[0], sh[1] + sh[2] - 1);
  for (int a = 0; a < sh[0]; ++a)
    for (int b = 0; b < sh[1]; ++b)
      for (int c = 0; c < sh[2]; ++c) g(a, b + c) += f(a, b, c);
  return g;
}

Tensor3 normalized(const Histogram3D& f) {
  const double z = f.sum();
  if (!(z > 0.0)) throw parameter_error("histogram has no mass");
  Tensor3 t = f.values;
  for (double& v : t.data()) v /= z;
  return t;
}

DetectorConfig unit_efficiency(DetectorConfig c) {
  c.eta = 1.0;
  return c;
}

// Combined signal / combined idler 2D model on the collapsed grid.
class Step1Model {
 public:
  Step1Model(const Histogram3D& f, const FitDetectors& dets, const FitMoments& m, double budget)
      : target_(collapse_idlers(normalized(f))),
        ps_(unit_efficiency(dets.s), static_cast<int>(target_.rows()) - 1),
        pi_(DetectorConfig{1.0, dets.i1.pixels + dets.i2.pixels, dets.i1.dark + dets.i2.dark,
                           dets.i1.ideal && dets.i2.ideal},
            static_cast<int>(target_.cols()) - 1),
        m_(m),
        budget_(budget) {}

  struct Split {
    double lo, hi;
    double Cp, Wsum_s, Wsum_i, Vsum_s, Vsum_i;
  };

  Split split(double eta_s, double eta_i) const {
    Split s;
    s.Cp = (m_.cov_s1 + m_.cov_s2) / (eta_s * eta_i);
    s.Wsum_s = m_.mean[0] / eta_s;
    s.Wsum_i = (m_.mean[1] + m_.mean[2]) / eta_i;
    s.Vsum_s = m_.var[0] / (eta_s * eta_s);
    s.Vsum_i = (m_.var[1] + m_.var[2] + 2.0 * m_.cov_12) / (eta_i * eta_i);
    s.lo = std::max({0.0, s.Cp - s.Wsum_s, s.Cp - s.Wsum_i});
    s.hi = std::min({s.Cp, s.Vsum_s, s.Vsum_i});
    return s;
  }

  std::optional<Step1Result> state(double eta_s, double eta_i, double frac) const {
    const Split sp = split(eta_s, eta_i);
    if (!(sp.hi > sp.lo)) return std::nullopt;
    Step1Result r;
    r.eta_s = eta_s;
    r.eta_i = eta_i;
    r.V_p = sp.lo + frac * (sp.hi - sp.lo);
    r.W_p = sp.Cp - r.V_p;
    r.W_ns = sp.Wsum_s - r.W_p;
    r.V_ns = sp.Vsum_s - r.V_p;
    r.W_ni = sp.Wsum_i - r.W_p;
    r.V_ni = sp.Vsum_i - r.V_p;
    if (!(r.W_p > 0 && r.V_p > 0 && r.W_ns >= 0 && r.V_ns >= 0 && r.W_ni >= 0 && r.V_ni >= 0)) return std::nullopt;
    return r;
  }

  double declination(const Step1Result& r) const {
    int L = 0;
    const auto pp = paired_pmf(r.W_p, r.V_p, budget_, L);
    const Eigen::MatrixXd As = arm_response(ps_, r.eta_s, r.W_ns, r.V_ns, L);
    const Eigen::MatrixXd Ai = arm_response(pi_, r.eta_i, r.W_ni, r.V_ni, L);
    const Eigen::Map<const Eigen::VectorXd> w(pp.data(), L + 1);
    const Eigen::MatrixXd model = As * w.asDiagonal() * Ai.transpose();
    return (model - target_).norm();
  }

  // Outside the feasible band the penalty grows with the gap so the simplex is
  // pushed back in rather than stalling on a plateau.
  double objective(const double* x) const {
    const double es = logistic(x[0]), ei = logistic(x[1]);
    const auto r = state(es, ei, logistic(x[2]));
    if (!r) {
      const Split sp = split(es, ei);
      return kInfeasible + std::max(0.0, sp.lo - sp.hi) / std::max(sp.Cp, 1e-300);
    }
    try {
      return declination(*r);
    } catch (const parameter_error&) {
      return kInfeasible;
    }
  }

 private:
  Eigen::MatrixXd target_;
  PixelResponse ps_, pi_;
  FitMoments m_;
  double budget_;
};

double step1_objective(const gsl_vector* x, void* ctx) {
  return static_cast<const Step1Model*>(ctx)->objective(x->data);
}

}  // namespace

void FitSettings::validate() const {
  if (step1_max_iterations < 1) throw parameter_error("step-1 iteration limit must be positive");
  if (!(step1_simplex_tolerance > 0.0)) throw parameter_error("simplex tolerance must be positive");
  if (grid_points < 3) throw parameter_error("free-parameter grid needs at least 3 points");
  if (step1_stall_window < 1) throw parameter_error("stall window must be positive");
  if (!(golden_rel_tolerance > 0.0)) throw parameter_error("golden-section tolerance must be positive");
  if (!(tail_budget > 0.0 && tail_budget < 1.0)) throw parameter_error("tail budget must lie in (0, 1)");
}

FitMoments fit_moments(const Histogram3D& f, const FitDetectors& dets) {
  const MomentSet e = empirical_intensity_moments(f, 2);
  FitMoments m;
  const DetectorConfig* d[3] = {&dets.s, &dets.i1, &dets.i2};
  for (int a = 0; a < 3; ++a) {
    m.mean[a] = e.mean(a) - (d[a]->ideal ? 0.0 : d[a]->dark);
    m.var[a] = e.covariance(a, a);
    if (!(m.var[a] > 0.0))
      throw insufficient_statistics_error("non-positive detected intensity variance on axis " + std::to_string(a));
    if (!(m.mean[a] > 0.0))
      throw insufficient_statistics_error("dark-corrected mean is not positive on axis " + std::to_string(a));
  }
  m.cov_s1 = e.covariance(0, 1);
  m.cov_s2 = e.covariance(0, 2);
  m.cov_12 = e.covariance(1, 2);
  return m;
}

Step1Result gaussian_fit_step1(const Histogram3D& f, const FitDetectors& dets, const FitSettings& settings) {
  settings.validate();
  const FitMoments m = fit_moments(f, dets);
  const Step1Model model(f, dets, m, settings.tail_budget);

  // Start on the line where both arms see the same paired mean and no noise
  // mean (eta_i / eta_s = <W_i> / <W_s>), at the best feasible point of a scan.
  const double ratio = (m.mean[1] + m.mean[2]) / m.mean[0];
  double start[3] = {0.0, 0.0, 0.0};
  double start_value = std::numeric_limits<double>::infinity();
  for (int k = 1; k <= 80; ++k) {
    const double eta_s = std::exp(std::log(1e-3) * (1.0 - k / 81.0));
    const double eta_i = eta_s * ratio;
    if (eta_i >= 1.0) break;
    for (const double frac : {0.2, 0.5, 0.8}) {
      const double x[3] = {logit(eta_s), logit(eta_i), logit(frac)};
      const double v = model.objective(x);
      if (v < start_value) {
        start_value = v;
        std::copy(x, x + 3, start);
      }
    }
  }
  if (!(start_value < kInfeasible)) throw fit_error("no feasible starting point for the step-1 fit", start_value);

  gsl_set_error_handler_off();
  gsl_multimin_function fn{&step1_objective, 3, const_cast<Step1Model*>(&model)};
  gsl_vector* x = gsl_vector_alloc(3);
  gsl_vector* step = gsl_vector_alloc(3);
  for (int i = 0; i < 3; ++i) gsl_vector_set(x, i, start[i]);
  gsl_vector_set_all(step, 0.1);
  gsl_multimin_fminimizer* mm = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, 3);
  gsl_multimin_fminimizer_set(mm, &fn, x, step);
  Step1Result best;
  int it = 0;
  bool converged = false;
  bool stalled = false;
  double checkpoint = std::numeric_limits<double>::infinity();
  while (it < settings.step1_max_iterations) {
    ++it;
    if (gsl_multimin_fminimizer_iterate(mm) != GSL_SUCCESS) break;
    if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(mm), settings.step1_simplex_tolerance) == GSL_SUCCESS) {
      converged = true;
      break;
    }
    // A direction the histogram does not constrain keeps the simplex large
    // while the declination no longer moves.
    if (it % settings.step1_stall_window == 0) {
      if (mm->fval < kInfeasible && checkpoint - mm->fval <= settings.step1_stall_tolerance * mm->fval) {
        converged = stalled = true;
        break;
      }
      checkpoint = mm->fval;
    }
  }
  const double xs[3] = {gsl_vector_get(mm->x, 0), gsl_vector_get(mm->x, 1), gsl_vector_get(mm->x, 2)};
  const double fmin = mm->fval;
  gsl_multimin_fminimizer_free(mm);
  gsl_vector_free(x);
  gsl_vector_free(step);

  const auto r = model.state(logistic(xs[0]), logistic(xs[1]), logistic(xs[2]));
  if (!r || fmin >= kInfeasible) throw fit_error("step-1 fit found no feasible model", fmin);
  if (!converged) throw fit_error("step-1 simplex did not converge", fmin);
  // Without pairing the efficiencies are unconstrained and may drift to the
  // boundary harmlessly; with pairing present it signals a model mismatch.
  const bool paired = r->W_p * r->eta_s > 1e-3 * m.mean[0];
  if (paired && (r->eta_s > 1.0 - 1e-6 || r->eta_i > 1.0 - 1e-6))
    throw model_mismatch_error("fitted efficiency reached the boundary of (0, 1]");
  best = *r;
  best.declination = fmin;
  best.iterations = it;
  best.converged = converged;
  best.stalled = stalled;
  return best;
}

FitComponentMoments solve_moment_chain(const Step1Result& s1, const FitMoments& m, double V_p1) {
  const double ei = s1.eta_i, es = s1.eta_s;
  FitComponentMoments c;
  c.V_p1 = V_p1;
  c.W_p1 = m.cov_s1 / (ei * es) - V_p1;
  c.W_p2 = s1.W_p - c.W_p1;
  c.V_p2 = s1.V_p - c.V_p1;
  c.W_ni1 = m.mean[1] / ei - c.W_p1;
  c.W_ni2 = m.mean[2] / ei - c.W_p2;
  c.V_ni1 = m.var[1] / (ei * ei) - c.V_p1;
  c.V_ni2 = m.var[2] / (ei * ei) - c.V_p2;
  c.W_ns = s1.W_ns;
  c.V_ns = s1.V_ns;
  return c;
}

Eigen::Matrix<double, 10, 8> moment_relation_matrix() {
  // unknown order: W_p1, W_p2, V_p1, V_p2, W_ni1, W_ni2, V_ni1, V_ni2
  Eigen::Matrix<double, 10, 8> A = Eigen::Matrix<double, 10, 8>::Zero();
  A(0, 0) = A(0, 4) = 1;
  A(1, 1) = A(1, 5) = 1;
  A(2, 2) = A(2, 6) = 1;
  A(3, 3) = A(3, 7) = 1;
  A(4, 0) = A(4, 2) = 1;
  A(5, 1) = A(5, 3) = 1;
  A(6, 0) = A(6, 1) = 1;
  A(7, 4) = A(7, 5) = 1;
  A(8, 2) = A(8, 3) = 1;
  A(9, 6) = A(9, 7) = 1;
  return A;
}

namespace {

std::array<double, 10> relation_rhs(const Step1Result& s1, const FitMoments& m) {
  const double ei = s1.eta_i, es = s1.eta_s;
  return {m.mean[1] / ei,        m.mean[2] / ei,        m.var[1] / (ei * ei), m.var[2] / (ei * ei),
          m.cov_s1 / (ei * es),  m.cov_s2 / (ei * es),  s1.W_p,               s1.W_ni,
          s1.V_p,                s1.V_ni};
}

CompositeFieldParams params_from_moments(const FitComponentMoments& c) {
  auto mb = [](double W, double V) { return ModeField{W * W / V, V / W}; };
  return {mb(c.W_p1, c.V_p1), mb(c.W_p2, c.V_p2), mb(c.W_ns, c.V_ns), mb(c.W_ni1, c.V_ni1), mb(c.W_ni2, c.V_ni2)};
}

bool chain_valid(const FitComponentMoments& c) {
  return c.W_p1 > 0 && c.V_p1 > 0 && c.W_p2 > 0 && c.V_p2 > 0 && c.W_ni1 > 0 && c.V_ni1 > 0 && c.W_ni2 > 0 &&
         c.V_ni2 > 0 && c.W_ns > 0 && c.V_ns > 0;
}

class ForwardModel3D {
 public:
  ForwardModel3D(const FitDetectors& dets, const std::array<int, 3>& extent, double budget)
      : ps_(unit_efficiency(dets.s), extent[0] - 1),
        p1_(unit_efficiency(dets.i1), extent[1] - 1),
        p2_(unit_efficiency(dets.i2), extent[2] - 1),
        extent_(extent),
        budget_(budget) {}

  Tensor3 histogram(const FitComponentMoments& c, double eta_s, double eta_i) const {
    int L1 = 0, L2 = 0;
    const auto q1 = paired_pmf(c.W_p1, c.V_p1, budget_, L1);
    const auto q2 = paired_pmf(c.W_p2, c.V_p2, budget_, L2);
    const Eigen::MatrixXd As = arm_response(ps_, eta_s, c.W_ns, c.V_ns, L1 + L2);
    const Eigen::MatrixXd A1 = arm_response(p1_, eta_i, c.W_ni1, c.V_ni1, L1);
    Eigen::MatrixXd G2 = arm_response(p2_, eta_i, c.W_ni2, c.V_ni2, L2);
    for (int l = 0; l <= L2; ++l) G2.col(l) *= q2[l];
    Tensor3 out(extent_[0], extent_[1], extent_[2]);
    for (int l1 = 0; l1 <= L1; ++l1) {
      const Eigen::MatrixXd H = As.middleCols(l1, L2 + 1) * G2.transpose();  // (c_s, c2)
      for (int a = 0; a < extent_[0]; ++a)
        for (int b = 0; b < extent_[1]; ++b) {
          const double w = q1[l1] * A1(b, l1);
          if (w == 0.0) continue;
          for (int d = 0; d < extent_[2]; ++d) out(a, b, d) += w * H(a, d);
        }
    }
    return out;
  }

 private:
  PixelResponse ps_, p1_, p2_;
  std::array<int, 3> extent_;
  double budget_;
};

struct Candidate {
  double x = 0.0;
  double declination = std::numeric_limits<double>::infinity();
  bool valid = false;
};

struct GoldenCtx {
  const ForwardModel3D* model;
  const Step1Result* s1;
  const FitMoments* m;
  const Tensor3* target;
};

double evaluate_candidate(const GoldenCtx& g, double x) {
  const FitComponentMoments c = solve_moment_chain(*g.s1, *g.m, x);
  if (!chain_valid(c)) return std::numeric_limits<double>::infinity();
  try {
    return declination(g.model->histogram(c, g.s1->eta_s, g.s1->eta_i), *g.target);
  } catch (const parameter_error&) {
    return std::numeric_limits<double>::infinity();
  }
}

double golden_objective(double x, void* ctx) { return evaluate_candidate(*static_cast<const GoldenCtx*>(ctx), x); }

}  // namespace

GaussianFitResult gaussian_fit_step2(const Step1Result& s1, const FitMoments& m, const Histogram3D& f,
                                     const FitDetectors& dets, const FitSettings& settings) {
  settings.validate();
  const double ei = s1.eta_i, es = s1.eta_s;
  const double hi = std::min(m.var[1] / (ei * ei), m.cov_s1 / (ei * es));
  if (!(hi > 0.0)) throw infeasible_error("free-parameter interval is empty");

  const Tensor3 target = normalized(f);
  const ForwardModel3D model(dets, target.shape(), settings.tail_budget);
  const GoldenCtx ctx{&model, &s1, &m, &target};

  const int G = settings.grid_points;
  std::vector<Candidate> grid(G);
  parallel_for(G, [&](std::size_t k) {
    Candidate& c = grid[k];
    c.x = hi * (k + 1.0) / (G + 1.0);
    c.declination = evaluate_candidate(ctx, c.x);
    c.valid = std::isfinite(c.declination);
  });

  GaussianFitResult out;
  out.free_interval = {0.0, hi};
  int best = -1, minima = 0;
  for (int k = 0; k < G; ++k) {
    if (!grid[k].valid) continue;
    out.scan.push_back({grid[k].x, grid[k].declination});
    if (best < 0 || grid[k].declination < grid[best].declination) best = k;
    const bool left = k == 0 || !grid[k - 1].valid || grid[k - 1].declination > grid[k].declination;
    const bool right = k == G - 1 || !grid[k + 1].valid || grid[k + 1].declination > grid[k].declination;
    if (left && right) ++minima;
  }
  if (best < 0) throw infeasible_error("every free-parameter candidate gives a negative mode number or mean");
  out.unimodal = minima <= 1;

  double x_best = grid[best].x, d_best = grid[best].declination;
  if (best > 0 && best < G - 1 && grid[best - 1].valid && grid[best + 1].valid) {
    gsl_set_error_handler_off();
    gsl_function fn{&golden_objective, const_cast<GoldenCtx*>(&ctx)};
    gsl_min_fminimizer* gm = gsl_min_fminimizer_alloc(gsl_min_fminimizer_goldensection);
    if (gsl_min_fminimizer_set_with_values(gm, &fn, x_best, d_best, grid[best - 1].x, grid[best - 1].declination,
                                           grid[best + 1].x, grid[best + 1].declination) == GSL_SUCCESS) {
      for (int it = 0; it < 200; ++it) {
        if (gsl_min_fminimizer_iterate(gm) != GSL_SUCCESS) break;
        const double a = gsl_min_fminimizer_x_lower(gm), b = gsl_min_fminimizer_x_upper(gm);
        if (gsl_min_test_interval(a, b, 0.0, settings.golden_rel_tolerance) == GSL_SUCCESS) break;
      }
      if (gsl_min_fminimizer_f_minimum(gm) < d_best) {
        x_best = gsl_min_fminimizer_x_minimum(gm);
        d_best = gsl_min_fminimizer_f_minimum(gm);
      }
    }
    gsl_min_fminimizer_free(gm);
  }

  out.free_parameter = x_best;
  out.declination = d_best;
  out.moments = solve_moment_chain(s1, m, x_best);
  out.params = params_from_moments(out.moments);
  out.eta_s = es;
  out.eta_i = ei;
  out.step1 = s1;

  const auto A = moment_relation_matrix();
  const auto& c = out.moments;
  Eigen::Matrix<double, 8, 1> u;
  u << c.W_p1, c.W_p2, c.V_p1, c.V_p2, c.W_ni1, c.W_ni2, c.V_ni1, c.V_ni2;
  const Eigen::Matrix<double, 10, 1> lhs = A * u;
  const auto rhs = relation_rhs(s1, m);
  for (int i = 0; i < 10; ++i) out.relation_residuals[i] = (lhs(i) - rhs[i]) / std::abs(rhs[i]);
  Eigen::JacobiSVD<Eigen::Matrix<double, 10, 8>> svd(A);
  svd.setThreshold(1e-10);
  out.relation_rank = static_cast<int>(svd.rank());
  return out;
}

GaussianFitResult gaussian_fit(const Histogram3D& f, const FitDetectors& dets, const FitSettings& settings) {
  const Step1Result s1 = gaussian_fit_step1(f, dets, settings);
  return gaussian_fit_step2(s1, fit_moments(f, dets), f, dets, settings);
}

Tensor3 model_histogram(const CompositeFieldParams& params, double eta_s, double eta_i, const FitDetectors& dets,
                        const std::array<int, 3>& extent, double tail_budget) {
  params.validate();
  if (!(eta_s > 0.0 && eta_s <= 1.0 && eta_i > 0.0 && eta_i <= 1.0))
    throw parameter_error("efficiencies must lie in (0, 1]");
  const ForwardModel3D model(dets, extent, tail_budget);
  FitComponentMoments c;
  c.W_p1 = params.twb1.mean();
  c.V_p1 = params.twb1.intensity_variance();
  c.W_p2 = params.twb2.mean();
  c.V_p2 = params.twb2.intensity_variance();
  c.W_ns = params.noise_s.mean();
  c.V_ns = params.noise_s.intensity_variance();
  c.W_ni1 = params.noise_i1.mean();
  c.V_ni1 = params.noise_i1.intensity_variance();
  c.W_ni2 = params.noise_i2.mean();
  c.V_ni2 = params.noise_i2.intensity_variance();
  return model.histogram(c, eta_s, eta_i);
}

namespace {

nlohmann::json field_json(const ModeField& f) { return {{"M", f.M}, {"B", f.B}}; }

}  // namespace

nlohmann::json GaussianFitResult::to_json() const {
  nlohmann::json j;
  j["eta_s"] = eta_s;
  j["eta_i"] = eta_i;
  j["declination"] = declination;
  j["free_parameter"] = free_parameter;
  j["free_interval"] = free_interval;
  j["fields"] = {{"twb1", field_json(params.twb1)},         {"twb2", field_json(params.twb2)},
                 {"noise_s", field_json(params.noise_s)},   {"noise_i1", field_json(params.noise_i1)},
                 {"noise_i2", field_json(params.noise_i2)}};
  const auto& c = moments;
  j["moments"] = {{"W_p1", c.W_p1},   {"var_W_p1", c.V_p1}, {"W_p2", c.W_p2},   {"var_W_p2", c.V_p2},
                  {"W_ni1", c.W_ni1}, {"var_W_ni1", c.V_ni1}, {"W_ni2", c.W_ni2}, {"var_W_ni2", c.V_ni2},
                  {"W_ns", c.W_ns},   {"var_W_ns", c.V_ns}};
  j["step1"] = {{"eta_s", step1.eta_s}, {"eta_i", step1.eta_i}, {"W_p", step1.W_p},   {"var_W_p", step1.V_p},
                {"W_ns", step1.W_ns},   {"var_W_ns", step1.V_ns}, {"W_ni", step1.W_ni}, {"var_W_ni", step1.V_ni},
                {"declination", step1.declination}, {"iterations", step1.iterations}, {"stalled", step1.stalled}};
  j["relation_residuals"] = relation_residuals;
  j["relation_rank"] = relation_rank;
  j["unimodal"] = unimodal;
  nlohmann::json s = nlohmann::json::array();
  for (const auto& p : scan) s.push_back({p[0], p[1]});
  j["scan"] = s;
  return j;
}

}  // namespace twinbeam

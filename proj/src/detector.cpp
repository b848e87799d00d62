#include "twinbeam/detector.hpp"

#include <gmp.h>
#include <mpfr.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "twinbeam/errors.hpp"
#include "twinbeam/parallel.hpp"
#include "twinbeam/special.hpp"

namespace twinbeam {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

class Mpfr {
 public:
  explicit Mpfr(mpfr_prec_t bits) { mpfr_init2(v_, bits); }
  ~Mpfr() { mpfr_clear(v_); }
  Mpfr(const Mpfr&) = delete;
  Mpfr& operator=(const Mpfr&) = delete;
  Mpfr(Mpfr&& o) noexcept {
    mpfr_init2(v_, mpfr_get_prec(o.v_));
    mpfr_swap(v_, o.v_);
  }
  mpfr_ptr get() { return v_; }

 private:
  mpfr_t v_;
};

// C(N, c) (1 - D)^N evaluated at `bits` precision.
void row_prefactor(mpfr_ptr out, int pixels, double dark, int c, mpfr_prec_t bits) {
  Mpfr one_minus_d(bits);
  mpfr_set_d(one_minus_d.get(), dark, MPFR_RNDN);
  mpfr_div_ui(one_minus_d.get(), one_minus_d.get(), pixels, MPFR_RNDN);
  mpfr_ui_sub(one_minus_d.get(), 1, one_minus_d.get(), MPFR_RNDN);
  mpfr_pow_ui(out, one_minus_d.get(), pixels, MPFR_RNDN);
  mpz_t bin;
  mpz_init(bin);
  mpz_bin_uiui(bin, pixels, c);
  mpfr_mul_z(out, out, bin, MPFR_RNDN);
  mpz_clear(bin);
}

double prefactor_double(int pixels, double dark, int c) {
  Mpfr p(128);
  row_prefactor(p.get(), pixels, dark, c, 128);
  return mpfr_get_d(p.get(), MPFR_RNDN);
}

double log2_prefactor(int pixels, double dark, int c) {
  Mpfr p(128);
  row_prefactor(p.get(), pixels, dark, c, 128);
  long exp2 = 0;
  const double mant = mpfr_get_d_2exp(&exp2, p.get(), MPFR_RNDN);
  return std::log2(std::abs(mant)) + exp2;
}

// C(N, c) D^c (1 - D)^(N - c) with D = dark / N.
double dark_binomial(int pixels, double dark, int c) {
  Mpfr p(128), q(128);
  row_prefactor(p.get(), pixels, dark, c, 128);
  mpfr_set_d(q.get(), dark, MPFR_RNDN);
  mpfr_div_ui(q.get(), q.get(), pixels, MPFR_RNDN);
  Mpfr r(128);
  mpfr_ui_sub(r.get(), 1, q.get(), MPFR_RNDN);
  mpfr_div(q.get(), q.get(), r.get(), MPFR_RNDN);
  mpfr_pow_ui(q.get(), q.get(), c, MPFR_RNDN);
  mpfr_mul(p.get(), p.get(), q.get(), MPFR_RNDN);
  return mpfr_get_d(p.get(), MPFR_RNDN);
}

// Upper bound on P(Bin(N, D) >= k).
double log_dark_tail_bound(int pixels, double rate, int k) {
  if (k <= 0) return 0.0;
  if (rate <= 0.0) return -std::numeric_limits<double>::infinity();
  if (k > pixels) return -std::numeric_limits<double>::infinity();
  return log_binomial(pixels, k) + k * std::log(rate);
}

struct RowResult {
  std::vector<double> t;
  std::vector<double> err;
  bool promoted = false;
  int bits = 53;
};

// Alternating-sign pixel sum for one c across n = 0..n_max.
RowResult a9_row(const DetectorConfig& cfg, int c, int n_max, const DetectionMatrixOptions& opt) {
  const int N = cfg.pixels;
  const double D = cfg.dark_rate(), eta = cfg.eta;
  RowResult row;
  row.t.assign(n_max + 1, 0.0);
  row.err.assign(n_max + 1, 0.0);

  std::vector<double> log_abs_a(c + 1), b(c + 1);
  for (int l = 0; l <= c; ++l) {
    log_abs_a[l] = log_binomial(c, l) - l * std::log1p(-D);
    b[l] = 1.0 - eta + eta * l / N;
  }
  // Sum of term magnitudes, A(n) = sum_l |a_l| b_l^n.
  auto abs_total = [&](int n) {
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> lg(c + 1);
    for (int l = 0; l <= c; ++l) {
      lg[l] = b[l] > 0.0 ? log_abs_a[l] + n * std::log(b[l]) : (n == 0 ? log_abs_a[l] : -INFINITY);
      m = std::max(m, lg[l]);
    }
    double s = 0.0;
    for (int l = 0; l <= c; ++l) s += std::exp(lg[l] - m);
    return std::make_pair(m, s);  // A = s * e^m
  };

  const double pref = prefactor_double(N, cfg.dark, c);
  bool promote = false;
  {
    std::vector<double> a(c + 1), pw(c + 1, 1.0);
    for (int l = 0; l <= c; ++l) a[l] = (((c - l) % 2) ? -1.0 : 1.0) * std::exp(log_abs_a[l]);
    for (int n = 0; n <= n_max && !promote; ++n) {
      CompensatedSum sum;
      for (int l = 0; l <= c; ++l) sum.add(a[l] * pw[l]);
      const double s = sum.value();
      const double kappa = sum.abs_total() / std::abs(s);
      if (!(kappa <= opt.promote_condition)) {
        promote = true;
        break;
      }
      row.t[n] = pref * s;
      row.err[n] = pref * sum.abs_total() * (n + c + 8) * kEps + std::abs(row.t[n]) * 4 * kEps;
      for (int l = 0; l <= c; ++l) pw[l] *= b[l];
    }
  }
  if (!promote) return row;

  // Extended precision: enough bits that the absolute error stays below abs_tolerance.
  const auto [m0, s0] = abs_total(0);
  const double log2_scale = log2_prefactor(N, cfg.dark, c) + (m0 + std::log(s0)) / std::log(2.0) +
                            std::log2((c + 1.0) * (n_max + c + 8.0));
  const long bits = 64 + static_cast<long>(std::ceil(log2_scale - std::log2(opt.abs_tolerance)));
  if (bits > opt.max_precision_bits)
    throw precision_error("detection matrix entry (c=" + std::to_string(c) + ", n=0) needs " + std::to_string(bits) +
                              " bits, above the " + std::to_string(opt.max_precision_bits) + "-bit limit",
                          c, 0);
  row.promoted = true;
  row.bits = static_cast<int>(bits);
  const mpfr_prec_t p = bits;
  Mpfr prefm(p), q(p), tmp(p), sum(p), eta_m(p);
  row_prefactor(prefm.get(), N, cfg.dark, c, p);
  mpfr_set_d(q.get(), cfg.dark, MPFR_RNDN);
  mpfr_div_ui(q.get(), q.get(), N, MPFR_RNDN);
  mpfr_ui_sub(q.get(), 1, q.get(), MPFR_RNDN);
  mpfr_ui_div(q.get(), 1, q.get(), MPFR_RNDN);  // 1 / (1 - D)
  mpfr_set_d(eta_m.get(), eta, MPFR_RNDN);
  std::vector<Mpfr> a, bm, pw;
  a.reserve(c + 1);
  bm.reserve(c + 1);
  pw.reserve(c + 1);
  mpz_t bin;
  mpz_init(bin);
  for (int l = 0; l <= c; ++l) {
    a.emplace_back(p);
    bm.emplace_back(p);
    pw.emplace_back(p);
    mpz_bin_uiui(bin, c, l);
    mpfr_pow_ui(a[l].get(), q.get(), l, MPFR_RNDN);
    mpfr_mul_z(a[l].get(), a[l].get(), bin, MPFR_RNDN);
    if ((c - l) % 2) mpfr_neg(a[l].get(), a[l].get(), MPFR_RNDN);
    // b_l = 1 - eta + eta l / N
    mpfr_mul_ui(tmp.get(), eta_m.get(), l, MPFR_RNDN);
    mpfr_div_ui(tmp.get(), tmp.get(), N, MPFR_RNDN);
    mpfr_sub(bm[l].get(), tmp.get(), eta_m.get(), MPFR_RNDN);
    mpfr_add_ui(bm[l].get(), bm[l].get(), 1, MPFR_RNDN);
    mpfr_set_ui(pw[l].get(), 1, MPFR_RNDN);
  }
  mpz_clear(bin);
  // log of one ulp at this precision; 2^-bits itself underflows past 1074 bits
  const double log_ulp = -(bits - 1.0) * std::log(2.0);
  for (int n = 0; n <= n_max; ++n) {
    mpfr_set_ui(sum.get(), 0, MPFR_RNDN);
    for (int l = 0; l <= c; ++l) {
      mpfr_mul(tmp.get(), a[l].get(), pw[l].get(), MPFR_RNDN);
      mpfr_add(sum.get(), sum.get(), tmp.get(), MPFR_RNDN);
      mpfr_mul(pw[l].get(), pw[l].get(), bm[l].get(), MPFR_RNDN);
    }
    mpfr_mul(sum.get(), sum.get(), prefm.get(), MPFR_RNDN);
    row.t[n] = mpfr_get_d(sum.get(), MPFR_RNDN);
    const auto [m, s] = abs_total(n);
    row.err[n] = std::exp(m + std::log(s) + std::log(pref) + std::log(n + c + 8.0) + log_ulp) + std::abs(row.t[n]) * kEps;
  }
  return row;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

int detect(const DetectorConfig& cfg, int photons, std::mt19937_64& rng, std::vector<int>& scratch) {
  if (cfg.ideal) return photons;
  int k = photons;
  if (cfg.eta < 1.0 && photons > 0) k = std::binomial_distribution<int>(photons, cfg.eta)(rng);
  // distinct pixels hit by k uniformly spread photons
  scratch.clear();
  std::uniform_int_distribution<int> pixel(0, cfg.pixels - 1);
  for (int i = 0; i < k; ++i) scratch.push_back(pixel(rng));
  std::sort(scratch.begin(), scratch.end());
  const int lit = static_cast<int>(std::unique(scratch.begin(), scratch.end()) - scratch.begin());
  // a pixel fires on a photon event or a dark event
  int dark = 0;
  if (cfg.dark > 0.0 && lit < cfg.pixels)
    dark = std::binomial_distribution<int>(cfg.pixels - lit, cfg.dark_rate())(rng);
  return lit + dark;
}

}  // namespace

void DetectorConfig::validate() const {
  if (ideal) return;
  if (!(eta >= 0.0 && eta <= 1.0)) throw parameter_error("detector efficiency must lie in [0, 1], got " + std::to_string(eta));
  if (pixels < 1) throw parameter_error("detector needs at least one pixel");
  if (!(dark >= 0.0) || !std::isfinite(dark)) throw parameter_error("dark counts must be non-negative");
  if (!(dark_rate() < 1.0)) throw parameter_error("per-pixel dark rate d/N must be below 1");
}

int DetectionMatrix::flagged_count() const {
  int n = 0;
  for (int i = 0; i < T.rows(); ++i)
    for (int j = 0; j < T.cols(); ++j)
      if (error_bound(i, j) > rel_tolerance * std::abs(T(i, j)) && error_bound(i, j) > 0.0) ++n;
  return n;
}

DetectionMatrix DetectionMatrix::identity(int n_max) {
  DetectionMatrix m;
  m.T = Eigen::MatrixXd::Identity(n_max + 1, n_max + 1);
  m.error_bound = Eigen::MatrixXd::Zero(n_max + 1, n_max + 1);
  m.config = DetectorConfig::ideal_detector();
  return m;
}

DetectionMatrix detection_matrix(const DetectorConfig& config, int c_max, int n_max,
                                 const DetectionMatrixOptions& options) {
  config.validate();
  if (c_max < 0 || n_max < 0) throw parameter_error("matrix ranges must be non-negative");
  DetectionMatrix m;
  m.config = config;
  m.rel_tolerance = options.rel_tolerance;
  m.abs_tolerance = options.abs_tolerance;
  if (config.ideal) {
    m.T = Eigen::MatrixXd::Identity(c_max + 1, n_max + 1);
    m.error_bound = Eigen::MatrixXd::Zero(c_max + 1, n_max + 1);
    return m;
  }
  if (c_max > config.pixels)
    throw parameter_error("c_max " + std::to_string(c_max) + " exceeds pixel count " + std::to_string(config.pixels));
  m.T = Eigen::MatrixXd::Zero(c_max + 1, n_max + 1);
  m.error_bound = Eigen::MatrixXd::Zero(c_max + 1, n_max + 1);
  if (config.eta == 0.0) {
    // The pixel sum collapses to the dark-count binomial, independent of n.
    for (int c = 0; c <= c_max; ++c) {
      const double t = dark_binomial(config.pixels, config.dark, c);
      m.T.row(c).setConstant(t);
      m.error_bound.row(c).setConstant(t * 2 * kEps);
    }
    return m;
  }
  const double log_skip = std::log(options.abs_tolerance) - 23.0;
  std::vector<RowResult> rows(c_max + 1);
  std::vector<char> skipped(c_max + 1, 0);
  parallel_for(c_max + 1, [&](std::size_t ci) {
    const int c = static_cast<int>(ci);
    // Rows unreachable except through >= c - n_max dark counts are bounded analytically.
    const double lb = log_dark_tail_bound(config.pixels, config.dark_rate(), c - n_max);
    if (c > n_max && lb < log_skip) {
      skipped[c] = 1;
      rows[c].err.assign(n_max + 1, std::exp(lb));
      return;
    }
    rows[c] = a9_row(config, c, n_max, options);
  });
  for (int c = 0; c <= c_max; ++c) {
    if (skipped[c]) {
      for (int n = 0; n <= n_max; ++n)
        m.error_bound(c, n) = std::exp(log_dark_tail_bound(config.pixels, config.dark_rate(), c - n));
      continue;
    }
    for (int n = 0; n <= n_max; ++n) {
      double t = rows[c].t[n];
      const double e = rows[c].err[n];
      if (t < 0.0 && t >= -e) t = 0.0;
      if (t < 0.0 || t > 1.0 + e)
        throw precision_error("detection matrix entry (c=" + std::to_string(c) + ", n=" + std::to_string(n) +
                                  ") evaluated outside [0, 1]",
                              c, n);
      m.T(c, n) = std::min(t, 1.0);
      m.error_bound(c, n) = e;
    }
    if (rows[c].promoted) {
      ++m.promoted_rows;
      m.max_bits_used = std::max(m.max_bits_used, rows[c].bits);
    }
  }
  return m;
}

Eigen::MatrixXd occupancy_detection_matrix(const DetectorConfig& config, int c_max, int n_max) {
  config.validate();
  if (config.ideal) return Eigen::MatrixXd::Identity(c_max + 1, n_max + 1);
  const int N = config.pixels;
  const double D = config.dark_rate();
  const int jmax = std::min({c_max, n_max, N});
  // occ(k, j): probability that k photons light exactly j distinct pixels
  Eigen::MatrixXd occ = Eigen::MatrixXd::Zero(n_max + 1, jmax + 1);
  occ(0, 0) = 1.0;
  for (int k = 1; k <= n_max; ++k)
    for (int j = 0; j <= std::min(k, jmax); ++j) {
      double v = occ(k - 1, j) * j / N;
      if (j > 0) v += occ(k - 1, j - 1) * (N - j + 1.0) / N;
      occ(k, j) = v;
    }
  Eigen::MatrixXd lit = Eigen::MatrixXd::Zero(jmax + 1, n_max + 1);  // P(j | n)
  for (int n = 0; n <= n_max; ++n) {
    const auto thin = binomial_pmf(n, config.eta);
    for (int k = 0; k <= n; ++k)
      for (int j = 0; j <= std::min(k, jmax); ++j) lit(j, n) += thin[k] * occ(k, j);
  }
  Eigen::MatrixXd dark = Eigen::MatrixXd::Zero(c_max + 1, jmax + 1);  // P(c | j)
  for (int j = 0; j <= jmax; ++j)
    for (int c = j; c <= c_max; ++c) {
      const int m = c - j, free = N - j;
      if (m > free) break;
      if (D == 0.0) {
        dark(c, j) = m == 0 ? 1.0 : 0.0;
        continue;
      }
      dark(c, j) = std::exp(log_binomial(free, m) + m * std::log(D) + (free - m) * std::log1p(-D));
    }
  return dark * lit;
}

int count_cutoff(const DetectorConfig& config, const std::vector<double>& photon_marginal, double budget) {
  const int n_max = static_cast<int>(photon_marginal.size()) - 1;
  if (config.ideal) return n_max;
  int extra = 0;
  while (extra < config.pixels &&
         log_dark_tail_bound(config.pixels, config.dark_rate(), extra + 1) > std::log(budget * 1e-3))
    ++extra;
  const int c_hi = std::min(config.pixels, n_max + extra + 1);
  const Eigen::MatrixXd T = occupancy_detection_matrix(config, c_hi, n_max);
  const Eigen::Map<const Eigen::VectorXd> p(photon_marginal.data(), n_max + 1);
  const Eigen::VectorXd counts = T * p;
  const double total = p.sum();
  double cum = 0.0;
  for (int c = 0; c <= c_hi; ++c) {
    cum += counts(c);
    if (cum >= total - budget) return c;
  }
  return c_hi;
}

Eigen::MatrixXd forward_2d(const Eigen::MatrixXd& p, const DetectionMatrix& det_a, const DetectionMatrix& det_b) {
  if (det_a.T.cols() < p.rows() || det_b.T.cols() < p.cols())
    throw shape_error("detection matrices do not cover the distribution cutoffs");
  return det_a.T.leftCols(p.rows()) * p * det_b.T.leftCols(p.cols()).transpose();
}

Histogram3D forward_histogram(const JointDist3D& p, const DetectionMatrix& det_s, const DetectionMatrix& det_i1,
                              const DetectionMatrix& det_i2) {
  const auto sh = p.values.shape();
  if (det_s.T.cols() < sh[0] || det_i1.T.cols() < sh[1] || det_i2.T.cols() < sh[2])
    throw shape_error("detection matrices do not cover the distribution cutoffs");
  Histogram3D f;
  f.trial_count = 0;
  f.values = contract3(p.values, det_s.T.leftCols(sh[0]), det_i1.T.leftCols(sh[1]), det_i2.T.leftCols(sh[2]));
  for (double& v : f.values.data()) v = std::max(v, 0.0);
  return f;
}

PostselectionResult postselect_on_counts(const JointDist3D& p, const DetectionMatrix& det_s, int c_s) {
  const auto sh = p.values.shape();
  if (det_s.T.cols() < sh[0]) throw shape_error("signal detection matrix does not cover the signal cutoff");
  if (c_s < 0 || c_s > det_s.c_max())
    throw parameter_error("c_s=" + std::to_string(c_s) + " outside the detection matrix range");
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(sh[1], sh[2]);
  for (int s = 0; s < sh[0]; ++s) {
    const double w = det_s.T(c_s, s);
    if (w == 0.0) continue;
    for (int a = 0; a < sh[1]; ++a)
      for (int b = 0; b < sh[2]; ++b) acc(a, b) += w * p.values(s, a, b);
  }
  const double z = acc.sum();
  if (!(z > 0.0)) throw empty_postselection_error("zero success probability at c_s=" + std::to_string(c_s));
  PostselectionResult r;
  r.success_probability = z;
  r.dist.values = acc / z;
  r.dist.kind = AxisKind::photons;
  r.dist.tail_mass = p.tail_mass / z;
  return r;
}

JointDist2D conditional_histogram(const Histogram3D& f, int c_s) {
  const auto sh = f.values.shape();
  if (c_s < 0 || c_s >= sh[0]) throw empty_postselection_error("c_s=" + std::to_string(c_s) + " outside histogram");
  Eigen::MatrixXd m(sh[1], sh[2]);
  for (int a = 0; a < sh[1]; ++a)
    for (int b = 0; b < sh[2]; ++b) m(a, b) = f.values(c_s, a, b);
  const double z = m.sum();
  if (!(z > 0.0)) throw empty_postselection_error("histogram slice c_s=" + std::to_string(c_s) + " is empty");
  JointDist2D out;
  out.kind = AxisKind::photocounts;
  out.values = m / z;
  return out;
}

SampleCounts sample_counts(const JointDist3D& p, const std::array<DetectorConfig, 3>& dets, std::uint64_t trials,
                           std::uint64_t seed, const SampleOptions& options) {
  if (trials < 1) throw parameter_error("trial count must be at least 1");
  for (const auto& d : dets) d.validate();
  const auto sh = p.values.shape();
  const auto& v = p.values.data();
  std::vector<double> cdf(v.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    cdf[i] = acc;
  }
  if (!(acc > 0.0)) throw parameter_error("cannot sample from an empty distribution");
  const std::uint64_t chunk = options.chunk_trials;
  const std::size_t n_chunks = (trials + chunk - 1) / chunk;
  std::vector<std::vector<std::array<int, 3>>> results(n_chunks);
  parallel_for(n_chunks, [&](std::size_t k) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(k + 1)));
    std::uniform_real_distribution<double> unif(0.0, acc);
    std::vector<int> scratch;
    const std::uint64_t begin = k * chunk, end = std::min<std::uint64_t>(trials, begin + chunk);
    auto& out = results[k];
    out.reserve(end - begin);
    for (std::uint64_t t = begin; t < end; ++t) {
      const double u = unif(rng);
      std::size_t idx = std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
      idx = std::min(idx, cdf.size() - 1);
      const int n0 = static_cast<int>(idx / (static_cast<std::size_t>(sh[1]) * sh[2]));
      const int n1 = static_cast<int>((idx / sh[2]) % sh[1]);
      const int n2 = static_cast<int>(idx % sh[2]);
      out.push_back({detect(dets[0], n0, rng, scratch), detect(dets[1], n1, rng, scratch),
                     detect(dets[2], n2, rng, scratch)});
    }
  });
  std::array<int, 3> ext{0, 0, 0};
  for (const auto& r : results)
    for (const auto& c : r)
      for (int a = 0; a < 3; ++a) ext[a] = std::max(ext[a], c[a] + 1);
  SampleCounts sc;
  sc.trials = trials;
  sc.counts = Tensor3(ext[0], ext[1], ext[2]);
  for (const auto& r : results)
    for (const auto& c : r) sc.counts(c[0], c[1], c[2]) += 1.0;
  return sc;
}

Histogram3D sample_histogram(const JointDist3D& p, const std::array<DetectorConfig, 3>& dets, std::uint64_t trials,
                             std::uint64_t seed, const SampleOptions& options) {
  SampleCounts sc = sample_counts(p, dets, trials, seed, options);
  Histogram3D h;
  h.trial_count = trials;
  h.values = std::move(sc.counts);
  for (double& x : h.values.data()) x /= static_cast<double>(trials);
  return h;
}

}  // namespace twinbeam

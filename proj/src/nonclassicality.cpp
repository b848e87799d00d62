#include "twinbeam/nonclassicality.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "twinbeam/errors.hpp"
#include "twinbeam/parallel.hpp"
#include "twinbeam/quasidist.hpp"
#include "twinbeam/special.hpp"

namespace twinbeam {

namespace {

// Relative size below which a criterion value is indistinguishable from zero.
constexpr double kBoundaryRel = 1e-12;

struct Eval {
  double value = 0.0;
  double scale = 0.0;
  // Sign-preserving value with round-off around the boundary mapped to 0.
  double guarded() const { return std::abs(value) <= kBoundaryRel * scale ? 0.0 : value; }
  double normalized() const { return scale > 0.0 ? guarded() / scale : 0.0; }
};

Index2 add(const Index2& a, const Index2& b) { return {a[0] + b[0], a[1] + b[1]}; }
Index2 sub(const Index2& a, const Index2& b) { return {a[0] - b[0], a[1] - b[1]}; }
Index2 twice(const Index2& a) { return {2 * a[0], 2 * a[1]}; }
bool nonneg(const Index2& a) { return a[0] >= 0 && a[1] >= 0; }

std::string index_string(const Index2& k) { return "(" + std::to_string(k[0]) + "," + std::to_string(k[1]) + ")"; }

Eval ccs_eval(const MomentLookup& m, const Index2& K, const Index2& L) {
  const Index2 R = sub(twice(K), L);
  if (!nonneg(K) || !nonneg(L) || !nonneg(R)) throw index_domain_error("CCS indices must satisfy K >= 0 and 2K >= L >= 0");
  const double a = m(L) * m(R);
  const double c = m(K) * m(K);
  return {a - c, std::abs(a) + std::abs(c)};
}

Eval matrix_eval(const MomentLookup& m, const Index2& J, const Index2& K, const Index2& L) {
  if (!nonneg(J) || !nonneg(K) || !nonneg(L)) throw index_domain_error("matrix criterion indices must be non-negative");
  const std::array<Index2, 3> idx{J, K, L};
  double a[3][3];
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a[r][c] = m(add(idx[r], idx[c]));
  const double t[6] = {a[0][0] * a[1][1] * a[2][2], a[0][1] * a[1][2] * a[2][0], a[0][2] * a[1][0] * a[2][1],
                       -a[0][2] * a[1][1] * a[2][0], -a[0][0] * a[1][2] * a[2][1], -a[0][1] * a[1][0] * a[2][2]};
  CompensatedSum acc;
  for (double x : t) acc.add(x);
  return {acc.value(), acc.abs_total()};
}

MomentLookup moment_lookup(const MomentSet& m) {
  if (m.rank() != 2) throw shape_error("criteria need rank-2 moments");
  return [&m](const Index2& k) { return m.at(k[0], k[1]); };
}

CriterionReport make_report(std::string name, std::vector<Index2> idx, const Eval& e) {
  CriterionReport r;
  r.name = std::move(name);
  r.indices = std::move(idx);
  // Values within round-off of their own terms carry no sign and are reported as 0.
  r.value = e.guarded();
  r.nonclassical = r.value < 0.0;
  return r;
}

struct Moments2 {
  double m1, m2, v1, v2, c12;
};

Moments2 second_order(const JointDist2D& dist) {
  const double total = dist.sum();
  if (!(total > 0.0)) throw degenerate_error("distribution has no mass");
  double m1 = 0, m2 = 0;
  for (int i = 0; i < dist.values.rows(); ++i)
    for (int j = 0; j < dist.values.cols(); ++j) {
      m1 += i * dist.values(i, j);
      m2 += j * dist.values(i, j);
    }
  m1 /= total;
  m2 /= total;
  double v1 = 0, v2 = 0, c = 0;
  for (int i = 0; i < dist.values.rows(); ++i)
    for (int j = 0; j < dist.values.cols(); ++j) {
      const double p = dist.values(i, j) / total;
      v1 += (i - m1) * (i - m1) * p;
      v2 += (j - m2) * (j - m2) * p;
      c += (i - m1) * (j - m2) * p;
    }
  return {m1, m2, v1, v2, c};
}

}  // namespace

void OrderingContext::validate() const {
  for (double m : modes)
    if (!(m > 0.0) || !std::isfinite(m)) throw parameter_error("ordering mode counts must be positive");
}

double covariance_delta(const JointDist2D& dist) {
  const auto m = second_order(dist);
  if (!(m.v1 > 0.0) || !(m.v2 > 0.0)) throw degenerate_error("covariance needs both marginal variances positive");
  return std::clamp(m.c12 / std::sqrt(m.v1 * m.v2), -1.0, 1.0);
}

double noise_reduction_plus(const JointDist2D& dist) {
  const auto m = second_order(dist);
  if (!(m.m1 + m.m2 > 0.0)) throw degenerate_error("noise reduction parameter needs a positive mean");
  return (m.v1 + m.v2 + 2.0 * m.c12) / (m.m1 + m.m2);
}

double fano(const JointDist1D& marginal) {
  const double total = marginal.sum();
  if (!(total > 0.0)) throw degenerate_error("distribution has no mass");
  double mean = 0.0;
  for (int n = 0; n <= marginal.cutoff(); ++n) mean += n * marginal.values[n];
  mean /= total;
  if (!(mean > 0.0)) throw degenerate_error("Fano factor needs a positive mean");
  double var = 0.0;
  for (int n = 0; n <= marginal.cutoff(); ++n) var += (n - mean) * (n - mean) * marginal.values[n];
  return var / total / mean;
}

double ccs_value(const MomentLookup& m, const Index2& K, const Index2& L) { return ccs_eval(m, K, L).value; }

double matrix_value(const MomentLookup& m, const Index2& J, const Index2& K, const Index2& L) {
  return matrix_eval(m, J, K, L).value;
}

CriterionReport ccs_criterion(const MomentSet& m, const Index2& K, const Index2& L) {
  return make_report("C" + index_string(K) + "^" + index_string(L), {K, L}, ccs_eval(moment_lookup(m), K, L));
}

CriterionReport matrix_criterion(const MomentSet& m, const Index2& J, const Index2& K, const Index2& L) {
  return make_report("M" + index_string(J) + index_string(K) + index_string(L), {J, K, L},
                     matrix_eval(moment_lookup(m), J, K, L));
}

CriterionReport c_w(const MomentSet& m) {
  auto r = ccs_criterion(m, {1, 1}, {2, 2});
  r.name = "C_W";
  return r;
}

CriterionReport m_w(const MomentSet& m) {
  auto r = matrix_criterion(m, {0, 0}, {1, 0}, {0, 1});
  r.name = "M_W";
  return r;
}

MomentSet intensity_moments(const JointDist2D& dist, int max_order) {
  JointDist2D normalized = dist;
  const double total = dist.sum();
  if (!(total > 0.0)) throw degenerate_error("distribution has no mass");
  normalized.values /= total;
  return moments_photon_to_intensity(photon_moments(normalized, max_order));
}

MomentLookup probability_lookup(const JointDist2D& dist) {
  const double p00 = dist.values.size() ? dist.values(0, 0) : 0.0;
  if (!(p00 > 0.0)) throw undefined_mapping_error("probability criteria need p(0,0) > 0");
  // Indices beyond the stored grid carry no probability.
  return [&dist, p00](const Index2& k) {
    if (k[0] >= dist.values.rows() || k[1] >= dist.values.cols()) return 0.0;
    const double p = dist.values(k[0], k[1]);
    if (p == 0.0) return 0.0;
    return std::exp(log_factorial(k[0]) + log_factorial(k[1]) + std::log(p / p00));
  };
}

namespace {

Eval probability_eval(const MomentLookup& m, CriterionFamily family, const std::vector<Index2>& idx) {
  if (family == CriterionFamily::ccs) {
    if (idx.size() != 2) throw parameter_error("CCS criterion takes indices (K, L)");
    return ccs_eval(m, idx[0], idx[1]);
  }
  if (idx.size() != 3) throw parameter_error("matrix criterion takes indices (J, K, L)");
  return matrix_eval(m, idx[0], idx[1], idx[2]);
}

std::string probability_name(CriterionFamily family, const std::vector<Index2>& idx) {
  std::string n = family == CriterionFamily::ccs ? "Cbar" : "Mbar";
  for (const auto& k : idx) n += index_string(k);
  return n;
}

double prob_at(const JointDist2D& d, const Index2& k) {
  if (k[0] >= d.values.rows() || k[1] >= d.values.cols()) return 0.0;
  return d.values(k[0], k[1]);
}

// Unique non-trivial index sets (arranged as the criterion takes them) in the
// neighbourhood of K, with the distinct probability cells each one reads.
struct Candidate {
  std::vector<Index2> indices;
  std::vector<Index2> cells;
};

std::vector<Candidate> neighbour_candidates(const Index2& K, CriterionFamily family) {
  std::vector<Index2> nb;
  for (int a = -1; a <= 1; ++a)
    for (int b = -1; b <= 1; ++b) {
      const Index2 L{K[0] + a, K[1] + b};
      if (nonneg(L) && L != K) nb.push_back(L);
    }
  std::vector<Candidate> out;
  if (family == CriterionFamily::ccs) {
    // L and 2K - L give the same form; L = K gives zero identically.
    for (const auto& L : nb) {
      const Index2 R = sub(twice(K), L);
      if (!nonneg(R) || R < L) continue;
      std::set<Index2> cells{L, R, K};
      out.push_back({{K, L}, {cells.begin(), cells.end()}});
    }
  } else {
    // J = K, L = K or J = L make two matrix rows equal; (J, L) ~ (L, J).
    for (std::size_t x = 0; x < nb.size(); ++x)
      for (std::size_t y = x + 1; y < nb.size(); ++y) {
        const Index2& J = nb[x];
        const Index2& L = nb[y];
        std::set<Index2> cells{twice(J), add(J, K), add(J, L), twice(K), add(K, L), twice(L)};
        out.push_back({{J, K, L}, {cells.begin(), cells.end()}});
      }
  }
  return out;
}

std::vector<Candidate> passing_candidates(const JointDist2D& dist, const Index2& K, CriterionFamily family,
                                          double floor) {
  std::vector<Candidate> keep;
  for (auto& c : neighbour_candidates(K, family)) {
    double mean = 0.0;
    for (const auto& cell : c.cells) mean += prob_at(dist, cell);
    mean /= static_cast<double>(c.cells.size());
    if (mean > floor) keep.push_back(std::move(c));
  }
  return keep;
}

// Best (minimal normalized) candidate value.
std::pair<Eval, std::size_t> best_candidate(const MomentLookup& m, CriterionFamily family,
                                             const std::vector<Candidate>& cands) {
  Eval best;
  std::size_t at = 0;
  double best_key = INFINITY;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const Eval e = probability_eval(m, family, cands[i].indices);
    const double key = e.normalized();
    if (key < best_key) {
      best_key = key;
      best = e;
      at = i;
    }
  }
  return {best, at};
}

std::vector<double> scan_grid(const NcdSettings& st) {
  if (st.scan_points < 2) throw parameter_error("NCD scan needs at least two points");
  std::vector<double> s(st.scan_points);
  for (int i = 0; i < st.scan_points; ++i) s[i] = 1.0 - 2.0 * i / (st.scan_points - 1);
  s.back() = -1.0;
  return s;
}

NcdReport ncd_with_scan(const std::vector<double>& vals, const std::function<double(double)>& f,
                        const NcdSettings& st) {
  const auto grid = scan_grid(st);
  NcdReport r;
  r.value_at_s1 = vals.front();
  if (vals.front() >= 0.0) return r;
  int changes = 0;
  for (std::size_t i = 1; i < vals.size(); ++i)
    if ((vals[i] < 0.0) != (vals[i - 1] < 0.0)) ++changes;
  if (vals.back() < 0.0) {
    r.saturated = true;
    r.s_threshold = -1.0;
    r.tau = 1.0;
    r.non_monotone_warning = changes > 0;
    return r;
  }
  r.non_monotone_warning = changes > 1;
  std::size_t last_neg = 0;
  for (std::size_t i = 0; i < vals.size(); ++i)
    if (vals[i] < 0.0) last_neg = i;
  double hi = grid[last_neg], lo = grid[last_neg + 1];
  while (hi - lo > st.tolerance) {
    const double mid = 0.5 * (hi + lo);
    if (f(mid) < 0.0) hi = mid;
    else lo = mid;
  }
  r.s_threshold = 0.5 * (hi + lo);
  r.tau = (1.0 - r.s_threshold) / 2.0;
  return r;
}

void require_normal(const MomentSet& m) {
  if (m.rank() != 2 || m.kind() != MomentKind::intensity || m.s() != 1.0)
    throw parameter_error("depth from moments needs normally ordered rank-2 intensity moments");
}

double transform_coefficient(int k, int l, double M, double b) {
  // C(k,l) Gamma(M+k) / Gamma(M+l) b^{k-l}
  if (k == l) return 1.0;
  if (b == 0.0) return 0.0;
  const double lc = log_binomial(k, l) + std::lgamma(M + k) - std::lgamma(M + l);
  const double mag = std::exp(lc + (k - l) * std::log(std::abs(b)));
  return (b < 0.0 && (k - l) % 2) ? -mag : mag;
}

}  // namespace

CriterionReport probability_criterion(const JointDist2D& dist, CriterionFamily family,
                                      const std::vector<Index2>& indices) {
  const auto m = probability_lookup(dist);
  return make_report(probability_name(family, indices), indices, probability_eval(m, family, indices));
}

std::map<Index2, LocalEntry> local_criterion_maps(const JointDist2D& dist, CriterionFamily family,
                                                  const LocalMapSettings& settings) {
  const auto m = probability_lookup(dist);
  std::map<Index2, LocalEntry> out;
  for (int a = 0; a < dist.values.rows(); ++a)
    for (int b = 0; b < dist.values.cols(); ++b) {
      const Index2 K{a, b};
      auto cands = passing_candidates(dist, K, family, settings.floor);
      if (cands.empty()) continue;
      const auto [e, at] = best_candidate(m, family, cands);
      LocalEntry entry;
      entry.best = make_report(probability_name(family, cands[at].indices), cands[at].indices, e);
      for (auto& c : cands) entry.candidates.push_back(std::move(c.indices));
      out.emplace(K, std::move(entry));
    }
  return out;
}

namespace {

// <W2^k>, k = 0..3, of the normalized slice along the free axis.
std::array<double, 4> slice_moments(const Eigen::VectorXd& v) {
  JointDist1D d;
  const double total = v.sum();
  d.values.resize(v.size());
  for (int i = 0; i < v.size(); ++i) d.values[i] = v(i) / total;
  const auto w = moments_photon_to_intensity(photon_moments(d, 3));
  return {1.0, w.at(1), w.at(2), w.at(3)};
}

Eval l_eval(const std::array<double, 4>& w) {
  const double a = w[3] * w[1], c = w[2] * w[2];
  return {a - c, std::abs(a) + std::abs(c)};
}

Eigen::MatrixXd oriented(const JointDist2D& dist, int axis) {
  if (axis != 0 && axis != 1) throw parameter_error("conditioning axis must be 0 or 1");
  return axis == 0 ? Eigen::MatrixXd(dist.values) : Eigen::MatrixXd(dist.values.transpose());
}

}  // namespace

std::map<int, std::optional<CriterionReport>> hybrid_L(const JointDist2D& dist, int conditioning_axis) {
  const Eigen::MatrixXd p = oriented(dist, conditioning_axis);
  std::map<int, std::optional<CriterionReport>> out;
  for (int n = 0; n < p.rows(); ++n) {
    const Eigen::VectorXd v = p.row(n).transpose();
    if (!(v.sum() > 0.0)) {
      out.emplace(n, std::nullopt);
      continue;
    }
    out.emplace(n, make_report("L_Wp(" + std::to_string(n) + ")", {{n, 0}}, l_eval(slice_moments(v))));
  }
  return out;
}

MomentSet ordering_transform_moments(const MomentSet& m, const OrderingContext& ctx, double s_target) {
  if (m.rank() != 2 || m.kind() != MomentKind::intensity)
    throw parameter_error("ordering transform acts on rank-2 intensity moments");
  if (!std::isfinite(s_target) || s_target < -1.0 || s_target > 1.0)
    throw parameter_error("target ordering must lie in [-1, 1]");
  ctx.validate();
  const double b = (m.s() - s_target) / 2.0;
  MomentSet out(2, MomentKind::intensity, s_target);
  for (const auto& [k, value] : m.values()) {
    (void)value;
    CompensatedSum acc;
    for (int l1 = 0; l1 <= k[0]; ++l1) {
      const double c1 = transform_coefficient(k[0], l1, ctx.modes[0], b);
      if (c1 == 0.0) continue;
      for (int l2 = 0; l2 <= k[1]; ++l2) {
        const double c2 = transform_coefficient(k[1], l2, ctx.modes[1], b);
        if (c2 == 0.0) continue;
        acc.add(c1 * c2 * m.at(l1, l2));
      }
    }
    out.set(k, acc.value());
  }
  out.set_truncation_warning(m.truncation_warning());
  return out;
}

NcdReport ncd_from_function(const std::function<double(double)>& f, const NcdSettings& settings) {
  const auto grid = scan_grid(settings);
  std::vector<double> vals(grid.size());
  vals[0] = f(1.0);
  if (vals[0] >= 0.0) return ncd_with_scan({vals[0]}, f, settings);
  for (std::size_t i = 1; i < grid.size(); ++i) vals[i] = f(grid[i]);
  return ncd_with_scan(vals, f, settings);
}

namespace {

NcdReport moment_ncd(const MomentSet& normal, const OrderingContext& ctx, const NcdSettings& st,
                     const std::function<Eval(const MomentLookup&)>& crit) {
  require_normal(normal);
  auto f = [&](double s) {
    const MomentSet ms = ordering_transform_moments(normal, ctx, s);
    return crit(moment_lookup(ms)).normalized();
  };
  return ncd_from_function(f, st);
}

}  // namespace

NcdReport ncd_ccs(const MomentSet& normal, const Index2& K, const Index2& L, const OrderingContext& ctx,
                  const NcdSettings& settings) {
  auto r = moment_ncd(normal, ctx, settings, [&](const MomentLookup& m) { return ccs_eval(m, K, L); });
  r.criterion = "C" + index_string(K) + "^" + index_string(L);
  r.indices = {K, L};
  return r;
}

NcdReport ncd_matrix(const MomentSet& normal, const Index2& J, const Index2& K, const Index2& L,
                     const OrderingContext& ctx, const NcdSettings& settings) {
  auto r = moment_ncd(normal, ctx, settings, [&](const MomentLookup& m) { return matrix_eval(m, J, K, L); });
  r.criterion = "M" + index_string(J) + index_string(K) + index_string(L);
  r.indices = {J, K, L};
  return r;
}

NcdReport ncd_c_w(const MomentSet& normal, const OrderingContext& ctx, const NcdSettings& settings) {
  auto r = ncd_ccs(normal, {1, 1}, {2, 2}, ctx, settings);
  r.criterion = "C_W";
  return r;
}

NcdReport ncd_m_w(const MomentSet& normal, const OrderingContext& ctx, const NcdSettings& settings) {
  auto r = ncd_matrix(normal, {0, 0}, {1, 0}, {0, 1}, ctx, settings);
  r.criterion = "M_W";
  return r;
}

namespace {

// Evaluates s-ordered probabilities only at the cells a criterion reads.
class SmearedCells {
 public:
  SmearedCells(const JointDist2D& dist, double s) : p_(dist.values), s_(s) {}

  double at(const Index2& k) {
    if (k[0] >= p_.rows() || k[1] >= p_.cols()) return 0.0;
    auto it = cache_.find(k);
    if (it != cache_.end()) return it->second;
    const double v = row(0, k[0]).dot(p_ * row(1, k[1]));
    cache_.emplace(k, v);
    return v;
  }

  MomentLookup lookup() {
    const double p00 = at({0, 0});
    if (!(p00 > 0.0)) throw undefined_mapping_error("probability criteria need p(0,0) > 0");
    return [this, p00](const Index2& k) {
      const double p = at(k);
      if (p <= 0.0) return 0.0;
      return std::exp(log_factorial(k[0]) + log_factorial(k[1]) + std::log(p / p00));
    };
  }

 private:
  const Eigen::VectorXd& row(int axis, int n) {
    auto& rows = rows_[axis];
    auto it = rows.find(n);
    if (it == rows.end())
      it = rows.emplace(n, smearing_kernel_row(s_, n, static_cast<int>(axis == 0 ? p_.rows() : p_.cols()) - 1)).first;
    return it->second;
  }

  const Eigen::MatrixXd& p_;
  double s_;
  std::map<Index2, double> cache_;
  std::array<std::map<int, Eigen::VectorXd>, 2> rows_;
};

// The full smeared distribution on a shared s grid, once per grid point.
std::vector<JointDist2D> smeared_scan(const JointDist2D& dist, const NcdSettings& st) {
  const auto grid = scan_grid(st);
  std::vector<JointDist2D> out(grid.size());
  parallel_for(grid.size(), [&](std::size_t i) { out[i] = smeared_pmf(dist, grid[i]); });
  return out;
}

}  // namespace

NcdReport ncd_probability(const JointDist2D& dist, CriterionFamily family, const std::vector<Index2>& indices,
                          const NcdSettings& settings) {
  probability_lookup(dist);
  auto f = [&](double s) {
    SmearedCells cells(dist, s);
    return probability_eval(cells.lookup(), family, indices).normalized();
  };
  auto r = ncd_from_function(f, settings);
  r.criterion = probability_name(family, indices);
  r.indices = indices;
  return r;
}

std::map<Index2, LocalNcdEntry> local_ncd_map(const JointDist2D& dist, CriterionFamily family,
                                              const LocalMapSettings& settings, const NcdSettings& ncd) {
  const auto base = local_criterion_maps(dist, family, settings);
  std::map<Index2, LocalNcdEntry> out;
  if (base.empty()) return out;
  const auto scan = smeared_scan(dist, ncd);
  std::vector<std::pair<Index2, const LocalEntry*>> keys;
  for (const auto& [k, e] : base) keys.emplace_back(k, &e);
  std::vector<LocalNcdEntry> results(keys.size());

  parallel_for(keys.size(), [&](std::size_t i) {
    const auto& entry = *keys[i].second;
    const auto eval_min = [&](const MomentLookup& m) {
      double best = INFINITY;
      for (const auto& idx : entry.candidates) best = std::min(best, probability_eval(m, family, idx).normalized());
      return best;
    };
    std::vector<double> vals(scan.size());
    for (std::size_t j = 0; j < scan.size(); ++j) vals[j] = eval_min(probability_lookup(scan[j]));
    auto f = [&](double s) {
      SmearedCells cells(dist, s);
      return eval_min(cells.lookup());
    };
    results[i].best = entry.best;
    results[i].ncd = ncd_with_scan(vals, f, ncd);
    results[i].ncd.criterion = entry.best.name;
    results[i].ncd.indices = {keys[i].first};
  });
  for (std::size_t i = 0; i < keys.size(); ++i) out.emplace(keys[i].first, std::move(results[i]));
  return out;
}

namespace {

double l_at(const Eigen::VectorXd& slice, double s) {
  if (!(slice.sum() > 0.0)) return 0.0;
  auto w = slice_moments(slice);
  // One-mode re-ordering of the free-axis moments.
  const double b = (1.0 - s) / 2.0;
  std::array<double, 4> ws{};
  for (int k = 0; k <= 3; ++k) {
    double acc = 0.0;
    for (int l = 0; l <= k; ++l) acc += transform_coefficient(k, l, 1.0, b) * w[l];
    ws[k] = acc;
  }
  return l_eval(ws).normalized();
}

}  // namespace

std::map<int, NcdReport> hybrid_L_ncd(const JointDist2D& dist, int conditioning_axis, const NcdSettings& settings) {
  const Eigen::MatrixXd p = oriented(dist, conditioning_axis);
  const int m_max = static_cast<int>(p.rows()) - 1;
  const auto grid = scan_grid(settings);
  // Smeared conditioning axis at every scan point.
  std::vector<Eigen::MatrixXd> scan(grid.size());
  parallel_for(grid.size(), [&](std::size_t i) { scan[i] = smearing_kernel(grid[i], m_max, m_max) * p; });

  std::vector<int> rows;
  for (int n = 0; n <= m_max; ++n)
    if (p.row(n).sum() > 0.0) rows.push_back(n);
  std::vector<NcdReport> results(rows.size());
  parallel_for(rows.size(), [&](std::size_t i) {
    const int n = rows[i];
    std::vector<double> vals(grid.size());
    for (std::size_t j = 0; j < grid.size(); ++j) vals[j] = l_at(scan[j].row(n).transpose(), grid[j]);
    auto f = [&](double s) {
      const Eigen::VectorXd k = smearing_kernel_row(s, n, m_max);
      return l_at(p.transpose() * k, s);
    };
    results[i] = ncd_with_scan(vals, f, settings);
    results[i].criterion = "L_Wp(" + std::to_string(n) + ")";
    results[i].indices = {{n, 0}};
  });
  std::map<int, NcdReport> out;
  for (std::size_t i = 0; i < rows.size(); ++i) out.emplace(rows[i], std::move(results[i]));
  return out;
}

double bootstrap_std(const Eigen::MatrixXd& counts, const std::function<double(const JointDist2D&)>& stat,
                     int resamples, std::uint64_t seed) {
  if (resamples < 2) throw parameter_error("bootstrap needs at least two resamples");
  const double total = counts.sum();
  if (!(total > 0.0)) throw degenerate_error("bootstrap needs positive counts");
  const auto n = static_cast<long long>(std::llround(total));
  std::mt19937_64 rng(seed);
  std::vector<double> values;
  values.reserve(resamples);
  for (int r = 0; r < resamples; ++r) {
    JointDist2D d;
    d.values = Eigen::MatrixXd::Zero(counts.rows(), counts.cols());
    long long left = n;
    double mass_left = total;
    // Multinomial draw as a chain of conditional binomials.
    for (Eigen::Index i = 0; i < counts.size() && left > 0; ++i) {
      const double c = counts.data()[i];
      if (c <= 0.0) continue;
      const double q = std::min(1.0, c / mass_left);
      std::binomial_distribution<long long> bin(left, q);
      const long long k = bin(rng);
      d.values.data()[i] = static_cast<double>(k) / n;
      left -= k;
      mass_left -= c;
    }
    values.push_back(stat(d));
  }
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= resamples;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / (resamples - 1));
}

}  // namespace twinbeam

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "twinbeam/detector.hpp"
#include "twinbeam/field_model.hpp"
#include "twinbeam/gaussian_fit.hpp"
#include "twinbeam/nonclassicality.hpp"
#include "twinbeam/pipeline.hpp"
#include "twinbeam/quasidist.hpp"
#include "twinbeam/reconstruction.hpp"

using namespace twinbeam;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Detail {
 public:
  // Records "name=value in [lo, hi]" and whether it holds.
  void in(const std::string& name, double v, double lo, double hi) {
    const bool ok = v >= lo && v <= hi;
    add(name, v, ok, "[" + num(lo) + ", " + num(hi) + "]");
  }
  void below(const std::string& name, double v, double hi) { add(name, v, v < hi, "< " + num(hi)); }
  void check(const std::string& what, bool ok) {
    pass_ = pass_ && ok;
    out_ << (first_ ? "" : "; ") << what << (ok ? "" : " [x]");
    first_ = false;
  }
  Outcome done() const { return {pass_, out_.str()}; }

  static std::string num(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.4g", v);
    return b;
  }

 private:
  void add(const std::string& name, double v, bool ok, const std::string& bound) {
    check(name + "=" + num(v) + " " + bound, ok);
  }
  std::ostringstream out_;
  bool pass_ = true;
  bool first_ = true;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const PipelineConfig& fixture_config() {
  static const PipelineConfig c = PipelineConfig::fixture();
  return c;
}

const JointDist3D& fixture_photons() {
  static const JointDist3D p = compose_noisy_3d(fixture_config().fields);
  return p;
}

const Histogram3D& exact_histogram() {
  static const Histogram3D f = [] {
    const auto& p = fixture_photons();
    const auto cut = p.cutoffs();
    const auto& d = fixture_config().detectors;
    std::array<DetectionMatrix, 3> m;
    for (int k = 0; k < 3; ++k)
      m[k] = detection_matrix(d[k], std::min(count_cutoff(d[k], p.marginal(k).values, 1e-10), d[k].pixels), cut[k]);
    return forward_histogram(p, m[0], m[1], m[2]);
  }();
  return f;
}

const Histogram3D& sampled_histogram() {
  static const Histogram3D f = [] {
    const auto& c = fixture_config();
    return sample_histogram(fixture_photons(), c.detectors, 1200000, *c.simulation.seed);
  }();
  return f;
}

JointDist2D ideal_slice(int n_s) { return *photon_slice(fixture_photons(), n_s); }

const Fig2Row& em_row_cs5() {
  static const Fig2Row r = fig2_rows(exact_histogram(), fixture_config(), {5, 5})[0];
  return r;
}

Outcome fixture_statistics() {
  const auto t0 = std::chrono::steady_clock::now();
  const JointDist2D d = ideal_slice(10);
  Detail out;
  out.in("C_n", covariance_delta(d), -0.85, -0.60);
  out.in("R_n+", noise_reduction_plus(d), 0.10, 0.30);
  out.in("F_i1", fano(d.marginal(0)), 0.55, 0.75);
  out.in("F_i2", fano(d.marginal(1)), 0.55, 0.75);
  out.below("runtime_s", seconds_since(t0), 60.0);
  return out.done();
}

Outcome real_detector_route() {
  const auto t0 = std::chrono::steady_clock::now();
  exact_histogram();
  const Fig2Row& r = em_row_cs5();
  Detail out;
  out.check("em_iterations=" + std::to_string(r.em->iterations), true);
  out.in("R_n+", r.photons->R_plus, 0.80, 0.95);
  out.in("C_n", r.photons->C_delta, -0.25, -0.05);
  out.below("runtime_s", seconds_since(t0), 300.0);
  return out.done();
}

Outcome depths() {
  const MomentSet m = intensity_moments(ideal_slice(10), 4);
  Detail out;
  out.in("tau_MW(n_s=10)", ncd_m_w(m).tau, 0.35, 0.45);
  out.in("tau_MW(c_s=5)", em_row_cs5().photons->tau_MW, 0.02, 0.10);
  out.in("tau_CW(n_s=10)", ncd_c_w(m).tau, 0.33, 0.43);
  return out.done();
}

Outcome trends() {
  Detail out;
  PipelineConfig cfg = fixture_config();
  cfg.reconstruction.em_slices = false;
  const auto rows = fig2_rows(sampled_histogram(), cfg, {3, 9});
  double worst = 0.0;
  for (const auto& r : rows) worst = std::max(worst, r.empty ? INFINITY : r.counts.R_plus);
  out.below("max R_c+ over c_s 3..9", worst, 1.0);

  const auto fit = gaussian_fit(sampled_histogram(), {cfg.detectors[0], cfg.detectors[1], cfg.detectors[2]});
  const auto ns = fig3_rows(compose_noisy_3d(fit.params), {4, 20});
  double dev = 0.0;
  for (const auto& r : ns) dev = std::max(dev, r.empty ? INFINITY : std::abs(r.photons.mean_i1 / (0.5 * r.n_s) - 1.0));
  out.below("max |<n_i1>/(n_s/2) - 1| over n_s 4..20 (Gaussian route)", dev, 0.10);
  return out.done();
}

Outcome exact_states() {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_r = 0.0, worst_v = 0.0;
  int states = 0;
  for (int n = 0; n <= 25; ++n) {
    std::vector<std::vector<double>> sets = {bayes_postselection_weights(n),
                                             bayes_postselection_weights(n, fixture_config().fields.twb1),
                                             std::vector<double>(n + 1, 1.0)};
    std::vector<double> w(n + 1);
    for (double& x : w) x = u(rng);
    sets.push_back(w);
    for (auto ws : sets) {
      const double z = std::accumulate(ws.begin(), ws.end(), 0.0);
      for (double& x : ws) x /= z;
      const JointDist2D d = ideal_postselected_state(n, ws);
      worst_v = std::max(worst_v, std::abs(d.sum_distribution().variance()));
      if (n > 0) worst_r = std::max(worst_r, std::abs(noise_reduction_plus(d)));
      ++states;
    }
  }
  Detail out;
  out.check(std::to_string(states) + " states", true);
  out.below("max |R_n+|", worst_r, 1e-13);
  out.below("max |Var(n_i1+n_i2)|", worst_v, 1e-12);
  return out.done();
}

bool trace_ok(const EmReport& r) {
  for (std::size_t i = 1; i < r.trace.size(); ++i)
    if (r.trace[i] < r.trace[i - 1] - 1e-12 * std::max(1.0, std::abs(r.trace[i - 1]))) return false;
  return r.monotone;
}

Outcome inversion_suite() {
  std::mt19937_64 rng(5151);
  std::uniform_real_distribution<double> u(0.2, 1.0), eta(0.55, 0.95), dark(0.0, 0.1);
  auto det = [&](int pixels) { return DetectorConfig{eta(rng), pixels, dark(rng)}; };
  EmSettings st;
  st.tolerance = 1e-13;
  st.max_iterations = 2000000;
  st.record_trace = true;
  int ok3 = 0, ok2 = 0, monotone = 0, runs = 0;
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto a = detection_matrix(det(2), 2, 2), b = detection_matrix(det(2), 2, 2), c = detection_matrix(det(2), 2, 2);
    JointDist3D p;
    p.values = Tensor3(3, 3, 3);
    for (double& v : p.values.data()) v = u(rng);
    const double z = p.values.sum();
    for (double& v : p.values.data()) v /= z;
    const auto r = em_reconstruct_3d(forward_histogram(p, a, b, c), a, b, c, st);
    const double tv = total_variation(r.dist.values, p.values);
    worst = std::max(worst, tv);
    ok3 += tv < 1e-3;
    monotone += trace_ok(r.report);
    ++runs;
  }
  for (int t = 0; t < 20; ++t) {
    const int n = 1 + t % 3;
    const auto a = detection_matrix(det(n), n, n), b = detection_matrix(det(n), n, n);
    Eigen::MatrixXd p(n + 1, n + 1);
    for (int i = 0; i <= n; ++i)
      for (int j = 0; j <= n; ++j) p(i, j) = u(rng);
    p /= p.sum();
    JointDist2D f;
    f.kind = AxisKind::photocounts;
    f.values = forward_2d(p, a, b);
    const auto r = em_reconstruct_2d(f, a, b, st);
    const double tv = total_variation(r.dist.values, p);
    worst = std::max(worst, tv);
    ok2 += tv < 1e-3;
    monotone += trace_ok(r.report);
    ++runs;
  }
  Detail out;
  out.check("3D round trips " + std::to_string(ok3) + "/20 with TV < 1e-3", ok3 == 20);
  out.check("2D round trips " + std::to_string(ok2) + "/20 with TV < 1e-3", ok2 == 20);
  out.check("worst TV=" + Detail::num(worst), true);
  out.check("log-likelihood non-decreasing in " + std::to_string(monotone) + "/" + std::to_string(runs) + " runs",
            monotone == runs);
  return out.done();
}

JointDist2D product(const std::function<double(int)>& a, const std::function<double(int)>& b, int cut) {
  JointDist2D d;
  d.values = Eigen::MatrixXd::Zero(cut + 1, cut + 1);
  for (int i = 0; i <= cut; ++i)
    for (int j = 0; j <= cut; ++j) d.values(i, j) = a(i) * b(j);
  d.values /= d.values.sum();
  return d;
}

Outcome classical_boundary() {
  auto poisson = [](double m) {
    return [m](int n) { return std::exp(-m + n * std::log(m) - std::lgamma(n + 1.0)); };
  };
  auto thermal = [](ModeField f) { return [f](int n) { return mandel_rice_pmf(n, f); }; };
  const std::vector<std::pair<std::string, JointDist2D>> inputs = {
      {"coherent(2,1)", product(poisson(2.0), poisson(1.0), 50)},
      {"coherent(0.7,3.5)", product(poisson(0.7), poisson(3.5), 60)},
      {"thermal(0.9,1.4)", product(thermal({1, 0.9}), thermal({1, 1.4}), 120)},
      {"thermal M=3", product(thermal({3, 0.6}), thermal({3, 0.4}), 80)}};
  const std::vector<std::pair<Index2, Index2>> ccs = {{{1, 1}, {2, 2}}, {{1, 0}, {2, 0}}, {{0, 1}, {0, 2}},
                                                      {{1, 1}, {2, 0}}, {{1, 1}, {0, 2}}, {{2, 1}, {4, 2}}};
  const std::vector<std::array<Index2, 3>> mat = {{{{0, 0}, {1, 0}, {0, 1}}}, {{{0, 0}, {1, 0}, {2, 0}}},
                                                  {{{0, 0}, {0, 1}, {0, 2}}}};
  const std::vector<std::pair<CriterionFamily, std::vector<Index2>>> prob = {
      {CriterionFamily::ccs, {{1, 1}, {2, 2}}},
      {CriterionFamily::ccs, {{1, 0}, {2, 0}}},
      {CriterionFamily::matrix, {{0, 0}, {1, 0}, {0, 1}}},
      {CriterionFamily::matrix, {{0, 0}, {1, 1}, {2, 2}}}};

  double min_value = INFINITY, max_tau = 0.0;
  std::string argmin;
  int evaluated = 0;
  std::string input;
  auto value = [&](double v, const std::string& what) {
    if (v < min_value) {
      min_value = v;
      argmin = what + " on " + input;
    }
    ++evaluated;
  };
  auto depth = [&](double t) { max_tau = std::max(max_tau, t); };
  for (const auto& [name, d] : inputs) {
    input = name;
    const MomentSet m = intensity_moments(d, 6);
    value(c_w(m).value, "C_W");
    value(m_w(m).value, "M_W");
    depth(ncd_c_w(m).tau);
    depth(ncd_m_w(m).tau);
    for (const auto& [K, L] : ccs) {
      value(ccs_criterion(m, K, L).value, "ccs moments");
      depth(ncd_ccs(m, K, L).tau);
    }
    for (const auto& [J, K, L] : mat) {
      value(matrix_criterion(m, J, K, L).value, "matrix moments");
      depth(ncd_matrix(m, J, K, L).tau);
    }
    for (const auto& [fam, idx] : prob) {
      value(probability_criterion(d, fam, idx).value, "probability");
      depth(ncd_probability(d, fam, idx).tau);
    }
    for (auto fam : {CriterionFamily::ccs, CriterionFamily::matrix}) {
      for (const auto& [k, e] : local_criterion_maps(d, fam, {0.01})) value(e.best.value, "local map");
      for (const auto& [k, e] : local_ncd_map(d, fam, {0.01})) depth(e.ncd.tau);
    }
    for (const auto& [n, r] : hybrid_L(d))
      if (r) value(r->value, "hybrid L");
    for (const auto& [n, r] : hybrid_L_ncd(d)) depth(r.tau);
  }
  Detail out;
  out.check(std::to_string(evaluated) + " criterion values on 4 inputs", true);
  out.check("min value=" + Detail::num(min_value) + " (" + argmin + ") >= -1e-10", min_value >= -1e-10);
  out.check("max tau=" + Detail::num(max_tau) + " == 0", max_tau == 0.0);
  return out.done();
}

Outcome fit_round_trip() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& c = fixture_config();
  const auto fit = gaussian_fit(sampled_histogram(), {c.detectors[0], c.detectors[1], c.detectors[2]});
  Detail out;
  out.in("eta_s", fit.eta_s, 0.22 - 0.015, 0.22 + 0.015);
  out.in("eta_i", fit.eta_i, 0.207 - 0.015, 0.207 + 0.015);
  const std::pair<const char*, std::pair<ModeField, ModeField>> parts[] = {
      {"twb1", {fit.params.twb1, c.fields.twb1}},         {"twb2", {fit.params.twb2, c.fields.twb2}},
      {"noise_s", {fit.params.noise_s, c.fields.noise_s}}, {"noise_i1", {fit.params.noise_i1, c.fields.noise_i1}},
      {"noise_i2", {fit.params.noise_i2, c.fields.noise_i2}}};
  for (const auto& [name, pr] : parts) {
    const double want = pr.second.mean();
    out.in(std::string(name) + " M*B", pr.first.mean(), 0.95 * want, 1.05 * want);
  }
  out.below("runtime_s", seconds_since(t0), 900.0);
  return out.done();
}

Outcome quasi_distributions() {
  Detail out;
  const QuasiGrid q = quasi_distribution(ideal_slice(10), -0.15);
  const NegativityReport r = negativity_report(q);
  out.below("fixture n_s=10 min P", r.min_value, 0.0);
  const auto lo = r.min_location, hi = r.lobe_max_location;
  out.check("min at (" + Detail::num(lo[0]) + ", " + Detail::num(lo[1]) + ") between origin and maximum at (" +
                Detail::num(hi[0]) + ", " + Detail::num(hi[1]) + ")",
            lo[0] >= 0 && lo[1] >= 0 && lo[0] <= hi[0] && lo[1] <= hi[1] && lo[0] + lo[1] < hi[0] + hi[1]);
  double worst_norm = std::abs(q.integral() - 1.0);

  JointDist2D vac;
  vac.values = Eigen::MatrixXd::Zero(4, 4);
  vac.values(0, 0) = 1.0;
  const JointDist2D th = product([](int n) { return mandel_rice_pmf(n, {1, 0.8}); },
                                 [](int n) { return mandel_rice_pmf(n, {1, 1.5}); }, 150);
  double neg = 0.0;
  for (const JointDist2D* d : {static_cast<const JointDist2D*>(&vac), &th})
    for (double s : {-0.15, -0.6, -1.0}) {
      const QuasiGrid g = quasi_distribution(*d, s);
      neg = std::max(neg, negativity_report(g).negative_mass);
      worst_norm = std::max(worst_norm, std::abs(g.integral() - 1.0));
    }
  out.check("vacuum/thermal negative mass=" + Detail::num(neg), neg == 0.0);
  out.below("max |integral - 1|", worst_norm, 1e-3);
  return out.done();
}

Outcome detector_model() {
  Detail out;
  double worst = 0.0;
  for (const auto& d : {fixture_config().detectors[0], fixture_config().detectors[1]}) {
    const auto T = detection_matrix(d, d.pixels, 50);
    for (int n = 0; n <= 50; ++n) worst = std::max(worst, std::abs(T.T.col(n).sum() - 1.0));
  }
  out.below("max |column sum - 1| (n <= 50)", worst, 1e-8);

  const DetectorConfig blind{0.0, 4410, 0.22};
  const auto T = detection_matrix(blind, 30, 20);
  const long double D = static_cast<long double>(blind.dark_rate());
  double rel = 0.0;
  for (int c = 0; c <= 30; ++c) {
    const long double lb = std::lgammal(4411.0L) - std::lgammal(c + 1.0L) - std::lgammal(4411.0L - c) +
                           c * std::log(D) + (4410 - c) * std::log1p(-D);
    const double expect = static_cast<double>(std::exp(lb));
    for (int n = 0; n <= 20; ++n) rel = std::max(rel, std::abs(T.T(c, n) - expect) / expect);
  }
  out.below("eta=0 max relative deviation from Bin(N, d/N)", rel, 1e-12);
  return out.done();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> expected;
  app.add_option("--expect-fail", expected,
                 "Criteria known to fail; the exit status is 0 when exactly these fail");
  CLI11_PARSE(app, argc, argv);

  const std::pair<const char*, Outcome (*)()> criteria[] = {
      {"fixture statistics, ideal postselection at n_s=10", fixture_statistics},
      {"real detectors, 2D EM at c_s=5", real_detector_route},
      {"nonclassicality depths", depths},
      {"trends on the sampled histogram", trends},
      {"ideal postselected states", exact_states},
      {"EM inversion oracle suite", inversion_suite},
      {"classical boundary", classical_boundary},
      {"Gaussian fit round trip at 1.2e6 trials", fit_round_trip},
      {"quasi-distributions", quasi_distributions},
      {"detector model", detector_model}};

  std::set<int> failed;
  int id = 0;
  for (const auto& [name, fn] : criteria) {
    ++id;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) failed.insert(id);
    std::printf("%s %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  const std::set<int> want(expected.begin(), expected.end());
  std::printf("%zu/10 criteria pass\n", 10 - failed.size());
  if (!want.empty()) {
    const bool same = want == failed;
    std::printf("failures %s the expected set\n", same ? "match" : "differ from");
    return same ? 0 : 1;
  }
  return failed.empty() ? 0 : 1;
}

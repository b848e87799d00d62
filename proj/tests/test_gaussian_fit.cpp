#include <cmath>
#include <random>

#include "doctest.h"
#include "fixture.hpp"
#include "twinbeam/errors.hpp"
#include "twinbeam/gaussian_fit.hpp"
#include "twinbeam/reconstruction.hpp"

using namespace twinbeam;

namespace {

FitDetectors fixture_detectors() {
  return {fixture::signal_detector(), fixture::idler_detector(), fixture::idler_detector()};
}

// Histogram through the library route: composite photons, detection matrices, contraction.
Histogram3D library_histogram(const CompositeFieldParams& p, const DetectorConfig& s, const DetectorConfig& i1,
                              const DetectorConfig& i2) {
  const JointDist3D d = compose_noisy_3d(p);
  const auto cut = d.cutoffs();
  const int cs = std::min(count_cutoff(s, d.marginal(0).values, 1e-10), s.pixels);
  const int c1 = std::min(count_cutoff(i1, d.marginal(1).values, 1e-10), i1.pixels);
  const int c2 = std::min(count_cutoff(i2, d.marginal(2).values, 1e-10), i2.pixels);
  return forward_histogram(d, detection_matrix(s, cs, cut[0]), detection_matrix(i1, c1, cut[1]),
                           detection_matrix(i2, c2, cut[2]));
}

double mb(const ModeField& f) { return f.M * f.B; }

// The idler-noise variance relation is only implied when the two idler arms
// are uncorrelated; otherwise it is off by exactly the cross term.
void check_chain(const GaussianFitResult& r, const FitMoments& m) {
  CHECK(r.relation_rank == 7);
  for (int i = 0; i < 9; ++i) CHECK(std::abs(r.relation_residuals[i]) < 1e-8);
  const double cross = -2.0 * m.cov_12 / (r.eta_i * r.eta_i * r.step1.V_ni);
  CHECK(std::abs(r.relation_residuals[9] - cross) < 1e-10);
  CHECK(r.free_parameter > r.free_interval[0]);
  CHECK(r.free_parameter < r.free_interval[1]);
  CHECK(r.declination >= 0.0);
}

}  // namespace

TEST_CASE("fit forward model agrees with the library detection chain") {
  const auto& f = fixture::exact_histogram();
  const Tensor3 m = model_histogram(fixture::params(), 0.22, 0.207, fixture_detectors(), f.values.shape());
  CHECK(declination(m, f.values) < 1e-9);

  // few pixels: saturation dominates and photon tails pile up at full occupancy
  const CompositeFieldParams p{{2, 0.4}, {1.5, 0.5}, {0.3, 1.0}, {0.2, 2.0}, {0.1, 3.0}};
  const DetectorConfig s{0.6, 5, 0.3}, i{0.45, 4, 0.2};
  const Histogram3D g = library_histogram(p, s, i, i);
  const Tensor3 mg = model_histogram(p, 0.6, 0.45, {s, i, i}, g.values.shape());
  CHECK(declination(mg, g.values) < 1e-9);
  CHECK(std::abs(mg.sum() - 1.0) < 1e-9);
}

TEST_CASE("moment chain reproduces consistent ground-truth moments") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.1, 2.0), e(0.1, 0.9);
  for (int trial = 0; trial < 50; ++trial) {
    FitComponentMoments t{u(rng), u(rng), u(rng), u(rng), u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
    const double es = e(rng), ei = e(rng);
    FitMoments m;
    m.mean = {es * (t.W_p1 + t.W_p2 + t.W_ns), ei * (t.W_p1 + t.W_ni1), ei * (t.W_p2 + t.W_ni2)};
    m.var = {es * es * (t.V_p1 + t.V_p2 + t.V_ns), ei * ei * (t.V_p1 + t.V_ni1), ei * ei * (t.V_p2 + t.V_ni2)};
    m.cov_s1 = es * ei * (t.W_p1 + t.V_p1);
    m.cov_s2 = es * ei * (t.W_p2 + t.V_p2);
    Step1Result s1;
    s1.eta_s = es;
    s1.eta_i = ei;
    s1.W_p = t.W_p1 + t.W_p2;
    s1.V_p = t.V_p1 + t.V_p2;
    s1.W_ns = t.W_ns;
    s1.V_ns = t.V_ns;
    s1.W_ni = t.W_ni1 + t.W_ni2;
    s1.V_ni = t.V_ni1 + t.V_ni2;
    const auto c = solve_moment_chain(s1, m, t.V_p1);
    CHECK(c.W_p1 == doctest::Approx(t.W_p1).epsilon(1e-12));
    CHECK(c.W_p2 == doctest::Approx(t.W_p2).epsilon(1e-12));
    CHECK(c.V_p2 == doctest::Approx(t.V_p2).epsilon(1e-12));
    CHECK(c.W_ni1 == doctest::Approx(t.W_ni1).epsilon(1e-12));
    CHECK(c.W_ni2 == doctest::Approx(t.W_ni2).epsilon(1e-12));
    CHECK(c.V_ni1 == doctest::Approx(t.V_ni1).epsilon(1e-12));
    CHECK(c.V_ni2 == doctest::Approx(t.V_ni2).epsilon(1e-12));
  }
  Eigen::JacobiSVD<Eigen::Matrix<double, 10, 8>> svd(moment_relation_matrix());
  svd.setThreshold(1e-12);
  CHECK(svd.rank() == 7);
}

TEST_CASE("noiseless twin beams: step one recovers the efficiencies") {
  const DetectorConfig s{0.3, 4410, 0.22}, i{0.3, 4410, 0.22};
  const Histogram3D f = library_histogram({{20, 0.2}, {15, 0.3}, {1, 0}, {1, 0}, {1, 0}}, s, i, i);
  const Step1Result r = gaussian_fit_step1(f, {s, i, i});
  CHECK(r.converged);
  CHECK(std::abs(r.eta_s - 0.3) < 0.01);
  CHECK(std::abs(r.eta_i - 0.3) < 0.01);
}

TEST_CASE("independent thermal beams: the paired moments vanish") {
  const DetectorConfig d{0.3, 4410, 0.22};
  const Histogram3D f = library_histogram({{1, 1e-6}, {1, 1e-6}, {5, 0.5}, {4, 0.5}, {3, 0.6}}, d, d, d);
  const Step1Result r = gaussian_fit_step1(f, {d, d, d});
  CHECK(r.converged);
  const double ms = fit_moments(f, {d, d, d}).mean[0];
  CHECK(r.W_p + r.V_p < 1e-4 * ms / r.eta_s);
}

TEST_CASE("symmetric model: both twin beams come out equal") {
  const DetectorConfig d{0.3, 4410, 0.22};
  const Histogram3D f = library_histogram({{30, 0.15}, {30, 0.15}, {0.02, 5}, {0.01, 8}, {0.01, 8}}, d, d, d);
  const auto r = gaussian_fit(f, {d, d, d});
  CHECK(fit_moments(f, {d, d, d}).cov_12 == doctest::Approx(0.0).scale(1e-6));
  CHECK(r.params.twb1.B == doctest::Approx(r.params.twb2.B).epsilon(0.02));
  CHECK(r.params.twb1.M == doctest::Approx(r.params.twb2.M).epsilon(0.02));
  CHECK(r.unimodal);
  check_chain(r, fit_moments(f, {d, d, d}));
}

TEST_CASE("exact fixture histogram") {
  const auto r = gaussian_fit(fixture::exact_histogram(), fixture_detectors());
  check_chain(r, fit_moments(fixture::exact_histogram(), fixture_detectors()));
  CHECK(std::abs(r.eta_s - 0.22) < 0.005);
  CHECK(std::abs(r.eta_i - 0.207) < 0.005);
  CHECK(mb(r.params.twb1) == doctest::Approx(58 * 0.106).epsilon(0.02));
  CHECK(mb(r.params.twb2) == doctest::Approx(51 * 0.117).epsilon(0.02));
  CHECK(r.params.twb1.B == doctest::Approx(0.106).epsilon(0.1));
  CHECK(r.params.twb2.B == doctest::Approx(0.117).epsilon(0.1));

  const auto j = r.to_json();
  for (const char* k : {"W_p1", "var_W_p1", "W_p2", "var_W_p2", "W_ni1", "var_W_ni1", "W_ni2", "var_W_ni2", "W_ns",
                        "var_W_ns"})
    CHECK(j["moments"].contains(k));
  for (const char* k : {"twb1", "twb2", "noise_s", "noise_i1", "noise_i2"}) CHECK(j["fields"][k].contains("M"));
  CHECK(j["eta_s"].get<double>() == r.eta_s);
  CHECK(j["declination"].get<double>() == r.declination);
}

TEST_CASE("sampled fixture at 1.2e6 trials") {
  const auto dets = fixture_detectors();
  const Histogram3D f = sample_histogram(fixture::photons(), {dets.s, dets.i1, dets.i2}, 1200000, 2024);
  const auto r = gaussian_fit(f, dets);
  check_chain(r, fit_moments(f, dets));
  CHECK(std::abs(r.eta_s - 0.22) < 0.015);
  CHECK(std::abs(r.eta_i - 0.207) < 0.015);
  CHECK(mb(r.params.twb1) == doctest::Approx(58 * 0.106).epsilon(0.05));
  CHECK(mb(r.params.twb2) == doctest::Approx(51 * 0.117).epsilon(0.05));
}

TEST_CASE("unequal idler efficiencies bias the paired split toward the better arm") {
  // The fit assumes one idler efficiency, so the arm with the lower true
  // efficiency is assigned fewer pairs and the other arm more.
  const auto truth = fixture::params();
  const DetectorConfig s = fixture::signal_detector();
  DetectorConfig lo = fixture::idler_detector(), hi = lo;
  lo.eta = 0.18;
  hi.eta = 0.24;
  const auto a = gaussian_fit(library_histogram(truth, s, lo, hi), {s, lo, hi});
  CHECK(a.step1.converged);
  CHECK(mb(a.params.twb1) < 0.95 * mb(truth.twb1));
  CHECK(mb(a.params.twb2) > 1.05 * mb(truth.twb2));
  const auto b = gaussian_fit(library_histogram(truth, s, hi, lo), {s, hi, lo});
  CHECK(mb(b.params.twb1) > 1.05 * mb(truth.twb1));
  CHECK(mb(b.params.twb2) < 0.95 * mb(truth.twb2));
}

TEST_CASE("fit errors") {
  Histogram3D delta;
  delta.values = Tensor3(4, 4, 4);
  delta.values(2, 2, 2) = 1.0;
  CHECK_THROWS_AS(fit_moments(delta, fixture_detectors()), insufficient_statistics_error);

  Step1Result s1;
  s1.eta_s = 0.2;
  s1.eta_i = 0.2;
  s1.W_p = 1.0;
  s1.V_p = 0.1;
  FitMoments m;
  m.mean = {1, 1, 1};
  m.var = {1, 1, 1};
  m.cov_s1 = -0.1;
  CHECK_THROWS_AS(gaussian_fit_step2(s1, m, fixture::exact_histogram(), fixture_detectors()), infeasible_error);

  FitSettings st;
  st.step1_max_iterations = 2;
  st.step1_stall_window = 1000;
  CHECK_THROWS_AS(gaussian_fit_step1(fixture::exact_histogram(), fixture_detectors(), st), fit_error);

  FitSettings bad;
  bad.grid_points = 2;
  CHECK_THROWS_AS(bad.validate(), parameter_error);
  bad = FitSettings{};
  bad.tail_budget = 0.0;
  CHECK_THROWS_AS(bad.validate(), parameter_error);
}

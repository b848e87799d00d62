#include "twinbeam/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "twinbeam/histogram_io.hpp"

namespace twinbeam {

using nlohmann::json;

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---- config parsing ----

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw config_error(path.empty() ? "<root>" : path, "expected an object");
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw config_error(join(path, k), "unknown key");
  }
}

const json& require(const json& obj, const std::string& path, const char* key) {
  if (!obj.contains(key)) throw config_error(join(path, key), "missing");
  return obj.at(key);
}

double as_double(const json& v, const std::string& path) {
  if (!v.is_number()) throw config_error(path, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw config_error(path, "must be finite");
  return x;
}

std::int64_t as_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw config_error(path, "expected an integer");
  return v.get<std::int64_t>();
}

std::uint64_t as_uint(const json& v, const std::string& path) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  const auto x = as_int(v, path);
  if (x < 0) throw config_error(path, "must be non-negative");
  return static_cast<std::uint64_t>(x);
}

bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw config_error(path, "expected true or false");
  return v.get<bool>();
}

int as_small_int(const json& v, const std::string& path) {
  const auto x = as_int(v, path);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
    throw config_error(path, "out of range");
  return static_cast<int>(x);
}

std::array<int, 2> as_range(const json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 2) throw config_error(path, "expected [lo, hi]");
  return {as_small_int(v[0], path + "[0]"), as_small_int(v[1], path + "[1]")};
}

Index2 as_index(const json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 2) throw config_error(path, "expected a two-component index");
  return {as_small_int(v[0], path + "[0]"), as_small_int(v[1], path + "[1]")};
}

ModeField parse_mode(const json& j, const std::string& path) {
  check_keys(j, path, {"M", "B"});
  return {as_double(require(j, path, "M"), join(path, "M")), as_double(require(j, path, "B"), join(path, "B"))};
}

json mode_json(const ModeField& f) { return {{"M", f.M}, {"B", f.B}}; }

DetectorConfig parse_detector(const json& j, const std::string& path) {
  check_keys(j, path, {"eta", "pixels", "dark", "ideal"});
  DetectorConfig d;
  if (j.contains("ideal") && as_bool(j["ideal"], join(path, "ideal"))) return DetectorConfig::ideal_detector();
  d.eta = as_double(require(j, path, "eta"), join(path, "eta"));
  d.pixels = as_small_int(require(j, path, "pixels"), join(path, "pixels"));
  d.dark = as_double(require(j, path, "dark"), join(path, "dark"));
  return d;
}

json detector_json(const DetectorConfig& d) {
  if (d.ideal) return {{"ideal", true}};
  return {{"eta", d.eta}, {"pixels", d.pixels}, {"dark", d.dark}};
}

const char* kFieldNames[] = {"twb1", "twb2", "noise_s", "noise_i1", "noise_i2"};
const char* kDetectorNames[] = {"signal", "idler1", "idler2"};

std::array<ModeField*, 5> field_refs(CompositeFieldParams& p) {
  return {&p.twb1, &p.twb2, &p.noise_s, &p.noise_i1, &p.noise_i2};
}
std::array<const ModeField*, 5> field_refs(const CompositeFieldParams& p) {
  return {&p.twb1, &p.twb2, &p.noise_s, &p.noise_i1, &p.noise_i2};
}

std::string index_list(const std::vector<Index2>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ';';
    s += "(" + std::to_string(v[i][0]) + "," + std::to_string(v[i][1]) + ")";
  }
  return s;
}

// ---- output helpers ----

std::string cell(double x) { return std::isfinite(x) ? format_double(x) : "NA"; }

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write " + path);
  return out;
}

void write_json(const std::string& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw io_error("failed writing " + path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw io_error("cannot create output directory " + dir);
}

std::string out_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

std::string slug(double s) {
  std::string t = format_double(s);
  for (char& c : t)
    if (c == '.') c = 'p';
  return t;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Runs fn; failures other than degeneracies are tagged with the slice.
template <class Fn>
auto in_slice(const std::string& label, Fn&& fn) {
  try {
    return fn();
  } catch (const slice_error&) {
    throw;
  } catch (const error& e) {
    throw slice_error(label, e.kind(), e.what());
  }
}

template <class Fn>
double or_nan(Fn&& fn) {
  try {
    return fn();
  } catch (const degenerate_error&) {
    return kNaN;
  }
}

int quantile_index(const std::vector<double>& v, double budget) {
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (acc >= (1.0 - budget) * total) return static_cast<int>(i);
  }
  return static_cast<int>(v.size()) - 1;
}

// Drops the photon-number tail beyond 1 - budget of each marginal before the
// expansion-based analyses, whose cost grows with the grid.
JointDist2D trim_mass(const JointDist2D& d, double budget) {
  const int a = quantile_index(d.marginal(0).values, budget);
  const int b = quantile_index(d.marginal(1).values, budget);
  JointDist2D t;
  t.kind = d.kind;
  t.values = d.values.topLeftCorner(a + 1, b + 1);
  t.values /= t.values.sum();
  return t;
}

JointDist3D photon_dist_from(const HistogramFile& hf) {
  JointDist3D p;
  p.kind = AxisKind::photons;
  p.values = hf.histogram.values;
  const double z = p.values.sum();
  if (!(z > 0.0)) throw config_error("input", "histogram has no mass");
  for (double& v : p.values.data()) v /= z;
  return p;
}

HistogramFile read_input(const std::string& input) {
  if (input.empty()) throw config_error("input", "an input histogram is required");
  if (!std::filesystem::exists(input)) throw io_error("input file " + input + " does not exist");
  return read_histogram(input);
}

std::array<std::string, 20> fig2_header() {
  return {"c_s",        "status",     "probability", "mean_c_i1",  "mean_c_i2", "fano_c_i1",    "fano_c_i2",
          "R_c_plus",   "C_c_delta",  "tau_c_CW",    "tau_c_MW",   "mean_n_i1", "mean_n_i2",    "fano_n_i1",
          "fano_n_i2",  "R_n_plus",   "C_n_delta",   "tau_n_CW",   "tau_n_MW",  "em_iterations"};
}

void put_stats(std::ostream& out, const SliceStats* s) {
  const double v[8] = {s ? s->mean_i1 : kNaN, s ? s->mean_i2 : kNaN, s ? s->fano_i1 : kNaN, s ? s->fano_i2 : kNaN,
                       s ? s->R_plus : kNaN,  s ? s->C_delta : kNaN, s ? s->tau_CW : kNaN,  s ? s->tau_MW : kNaN};
  for (double x : v) out << ',' << cell(x);
}

json stats_json(const SliceStats& s) {
  auto n = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  return {{"mean_i1", n(s.mean_i1)}, {"mean_i2", n(s.mean_i2)}, {"fano_i1", n(s.fano_i1)},
          {"fano_i2", n(s.fano_i2)}, {"R_plus", n(s.R_plus)},   {"C_delta", n(s.C_delta)},
          {"tau_CW", n(s.tau_CW)},   {"tau_MW", n(s.tau_MW)}};
}

json em_json(const EmReport& r) {
  return {{"iterations", r.iterations},
          {"converged", r.converged},
          {"log_likelihood", r.log_likelihood},
          {"monotone", r.monotone},
          {"worst_decrease", r.worst_decrease}};
}

}  // namespace

// ---- config ----

std::string CriterionSpec::name() const {
  return std::string(family == Family::ccs ? "C" : "M") + index_list(indices);
}

PipelineConfig PipelineConfig::fixture() {
  PipelineConfig c;
  c.fields = {{58, 0.106}, {51, 0.117}, {0.011, 10}, {0.007, 10}, {0.0005, 39}};
  c.detectors = {DetectorConfig{0.22, 4410, 0.22}, DetectorConfig{0.207, 4410, 0.22},
                 DetectorConfig{0.207, 4410, 0.22}};
  c.simulation.trials = 1200000;
  c.simulation.seed = 2024;
  c.reconstruction.em.max_iterations = 3000;
  c.reconstruction.em.tolerance = 1e-9;
  c.analysis.criteria = {{CriterionSpec::Family::ccs, {{1, 1}, {2, 2}}},
                         {CriterionSpec::Family::matrix, {{0, 0}, {1, 0}, {0, 1}}},
                         {CriterionSpec::Family::ccs, {{1, 0}, {2, 0}}},
                         {CriterionSpec::Family::ccs, {{0, 1}, {0, 2}}}};
  return c;
}

json PipelineConfig::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  const auto f = field_refs(fields);
  for (int k = 0; k < 5; ++k) j["fields"][kFieldNames[k]] = mode_json(*f[k]);
  for (int k = 0; k < 3; ++k) j["detectors"][kDetectorNames[k]] = detector_json(detectors[k]);
  j["simulation"] = {{"trials", simulation.trials},
                     {"seed", simulation.seed ? json(*simulation.seed) : json(nullptr)},
                     {"tail_budget", simulation.tail_budget}};
  const auto& r = reconstruction;
  j["reconstruction"] = {{"em", {{"max_iterations", r.em.max_iterations}, {"tolerance", r.em.tolerance}}},
                         {"count_budget", r.count_budget},
                         {"photon_margin", r.photon_margin},
                         {"em_slices", r.em_slices},
                         {"gaussian_fit", r.gaussian_fit}};
  const auto& a = analysis;
  json crit = json::array();
  for (const auto& c : a.criteria) {
    json idx = json::array();
    for (const auto& i : c.indices) idx.push_back({i[0], i[1]});
    crit.push_back({{"family", c.family == CriterionSpec::Family::ccs ? "ccs" : "matrix"}, {"indices", idx}});
  }
  j["analysis"] = {{"cs_range", a.cs_range},       {"ns_range", a.ns_range},   {"criteria", crit},
                   {"cs_slices", a.cs_slices},     {"ns_slices", a.ns_slices}, {"s_grid", a.s_grid},
                   {"quasi_step", a.quasi_step},   {"probability_floor", a.probability_floor},
                   {"local_maps", a.local_maps}};
  j["output_dir"] = output_dir;
  return j;
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  check_keys(j, "", {"schema_version", "fields", "detectors", "simulation", "reconstruction", "analysis", "output_dir"});
  PipelineConfig c;
  c.schema_version = as_small_int(require(j, "", "schema_version"), "schema_version");
  if (c.schema_version != kConfigSchemaVersion)
    throw config_error("schema_version", "unsupported version " + std::to_string(c.schema_version) + ", expected " +
                                             std::to_string(kConfigSchemaVersion));

  const json& fj = require(j, "", "fields");
  check_keys(fj, "fields", {"twb1", "twb2", "noise_s", "noise_i1", "noise_i2"});
  const auto f = field_refs(c.fields);
  for (int k = 0; k < 5; ++k)
    *f[k] = parse_mode(require(fj, "fields", kFieldNames[k]), join("fields", kFieldNames[k]));

  const json& dj = require(j, "", "detectors");
  check_keys(dj, "detectors", {"signal", "idler1", "idler2"});
  for (int k = 0; k < 3; ++k)
    c.detectors[k] = parse_detector(require(dj, "detectors", kDetectorNames[k]), join("detectors", kDetectorNames[k]));

  if (j.contains("simulation")) {
    const json& s = j["simulation"];
    check_keys(s, "simulation", {"trials", "seed", "tail_budget"});
    if (s.contains("trials")) c.simulation.trials = as_uint(s["trials"], "simulation.trials");
    if (s.contains("seed") && !s["seed"].is_null()) c.simulation.seed = as_uint(s["seed"], "simulation.seed");
    if (s.contains("tail_budget")) c.simulation.tail_budget = as_double(s["tail_budget"], "simulation.tail_budget");
  }

  if (j.contains("reconstruction")) {
    const json& r = j["reconstruction"];
    check_keys(r, "reconstruction", {"em", "count_budget", "photon_margin", "em_slices", "gaussian_fit"});
    auto& rc = c.reconstruction;
    if (r.contains("em")) {
      const json& e = r["em"];
      check_keys(e, "reconstruction.em", {"max_iterations", "tolerance"});
      if (e.contains("max_iterations"))
        rc.em.max_iterations = as_small_int(e["max_iterations"], "reconstruction.em.max_iterations");
      if (e.contains("tolerance")) rc.em.tolerance = as_double(e["tolerance"], "reconstruction.em.tolerance");
    }
    if (r.contains("count_budget")) rc.count_budget = as_double(r["count_budget"], "reconstruction.count_budget");
    if (r.contains("photon_margin")) rc.photon_margin = as_double(r["photon_margin"], "reconstruction.photon_margin");
    if (r.contains("em_slices")) rc.em_slices = as_bool(r["em_slices"], "reconstruction.em_slices");
    if (r.contains("gaussian_fit")) rc.gaussian_fit = as_bool(r["gaussian_fit"], "reconstruction.gaussian_fit");
  }

  if (j.contains("analysis")) {
    const json& a = j["analysis"];
    check_keys(a, "analysis",
               {"cs_range", "ns_range", "criteria", "cs_slices", "ns_slices", "s_grid", "quasi_step",
                "probability_floor", "local_maps"});
    auto& ac = c.analysis;
    if (a.contains("cs_range")) ac.cs_range = as_range(a["cs_range"], "analysis.cs_range");
    if (a.contains("ns_range")) ac.ns_range = as_range(a["ns_range"], "analysis.ns_range");
    if (a.contains("criteria")) {
      const json& cr = a["criteria"];
      if (!cr.is_array()) throw config_error("analysis.criteria", "expected an array");
      for (std::size_t i = 0; i < cr.size(); ++i) {
        const std::string p = "analysis.criteria[" + std::to_string(i) + "]";
        check_keys(cr[i], p, {"family", "indices"});
        const json& fam = require(cr[i], p, "family");
        CriterionSpec spec;
        if (fam == "ccs")
          spec.family = CriterionSpec::Family::ccs;
        else if (fam == "matrix")
          spec.family = CriterionSpec::Family::matrix;
        else
          throw config_error(p + ".family", "expected \"ccs\" or \"matrix\"");
        const json& idx = require(cr[i], p, "indices");
        if (!idx.is_array()) throw config_error(p + ".indices", "expected an array of indices");
        for (std::size_t k = 0; k < idx.size(); ++k)
          spec.indices.push_back(as_index(idx[k], p + ".indices[" + std::to_string(k) + "]"));
        ac.criteria.push_back(spec);
      }
    }
    auto int_list = [&](const char* key, std::vector<int>& out) {
      if (!a.contains(key)) return;
      const std::string p = join("analysis", key);
      if (!a[key].is_array()) throw config_error(p, "expected an array");
      out.clear();
      for (std::size_t i = 0; i < a[key].size(); ++i)
        out.push_back(as_small_int(a[key][i], p + "[" + std::to_string(i) + "]"));
    };
    int_list("cs_slices", ac.cs_slices);
    int_list("ns_slices", ac.ns_slices);
    if (a.contains("s_grid")) {
      if (!a["s_grid"].is_array()) throw config_error("analysis.s_grid", "expected an array");
      ac.s_grid.clear();
      for (std::size_t i = 0; i < a["s_grid"].size(); ++i)
        ac.s_grid.push_back(as_double(a["s_grid"][i], "analysis.s_grid[" + std::to_string(i) + "]"));
    }
    if (a.contains("quasi_step")) ac.quasi_step = as_double(a["quasi_step"], "analysis.quasi_step");
    if (a.contains("probability_floor"))
      ac.probability_floor = as_double(a["probability_floor"], "analysis.probability_floor");
    if (a.contains("local_maps")) ac.local_maps = as_bool(a["local_maps"], "analysis.local_maps");
  }

  if (j.contains("output_dir")) {
    if (!j["output_dir"].is_string()) throw config_error("output_dir", "expected a string");
    c.output_dir = j["output_dir"].get<std::string>();
  }
  c.validate();
  return c;
}

void PipelineConfig::validate() const {
  const auto f = field_refs(fields);
  for (int k = 0; k < 5; ++k) {
    try {
      f[k]->validate();
    } catch (const parameter_error& e) {
      throw config_error(join("fields", kFieldNames[k]), e.what());
    }
  }
  for (int k = 0; k < 3; ++k) {
    try {
      detectors[k].validate();
    } catch (const parameter_error& e) {
      throw config_error(join("detectors", kDetectorNames[k]), e.what());
    }
  }
  const auto& s = simulation;
  if (s.trials > 0 && !s.seed) throw config_error("simulation.seed", "required when trials > 0");
  if (!(s.tail_budget > 0.0 && s.tail_budget < 1e-2)) throw config_error("simulation.tail_budget", "must lie in (0, 0.01)");

  const auto& r = reconstruction;
  try {
    r.em.validate();
  } catch (const parameter_error& e) {
    throw config_error("reconstruction.em", e.what());
  }
  if (!(r.count_budget > 0.0 && r.count_budget < 1.0)) throw config_error("reconstruction.count_budget", "must lie in (0, 1)");
  if (!(r.photon_margin >= 1.0)) throw config_error("reconstruction.photon_margin", "must be at least 1");

  const auto& a = analysis;
  const int max_cs = detectors[0].ideal ? std::numeric_limits<int>::max() : detectors[0].pixels;
  const int max_ns = composite_cutoffs(fields, s.tail_budget)[0];
  auto check_range = [](const std::array<int, 2>& rg, int hi, const char* path) {
    if (rg[0] < 0 || rg[1] < rg[0]) throw config_error(path, "expected 0 <= lo <= hi");
    if (rg[1] > hi) throw config_error(path, "upper end " + std::to_string(rg[1]) + " exceeds the cutoff " + std::to_string(hi));
  };
  check_range(a.cs_range, max_cs, "analysis.cs_range");
  check_range(a.ns_range, max_ns, "analysis.ns_range");
  for (std::size_t i = 0; i < a.cs_slices.size(); ++i)
    if (a.cs_slices[i] < 0 || a.cs_slices[i] > max_cs)
      throw config_error("analysis.cs_slices[" + std::to_string(i) + "]", "outside the signal count range");
  for (std::size_t i = 0; i < a.ns_slices.size(); ++i)
    if (a.ns_slices[i] < 0 || a.ns_slices[i] > max_ns)
      throw config_error("analysis.ns_slices[" + std::to_string(i) + "]",
                         "outside the model photon cutoff " + std::to_string(max_ns));
  for (std::size_t i = 0; i < a.criteria.size(); ++i) {
    const auto& c = a.criteria[i];
    const std::string p = "analysis.criteria[" + std::to_string(i) + "].indices";
    const std::size_t want = c.family == CriterionSpec::Family::ccs ? 2 : 3;
    if (c.indices.size() != want) throw config_error(p, "expected " + std::to_string(want) + " indices");
    for (const auto& k : c.indices)
      if (k[0] < 0 || k[1] < 0) throw config_error(p, "indices must be non-negative");
  }
  for (std::size_t i = 0; i < a.s_grid.size(); ++i)
    if (!(a.s_grid[i] >= -1.0 && a.s_grid[i] < 1.0))
      throw config_error("analysis.s_grid[" + std::to_string(i) + "]", "ordering parameter must lie in [-1, 1)");
  if (!(a.quasi_step > 0.0)) throw config_error("analysis.quasi_step", "must be positive");
  if (!(a.probability_floor >= 0.0 && a.probability_floor < 1.0))
    throw config_error("analysis.probability_floor", "must lie in [0, 1)");
  if (output_dir.empty()) throw config_error("output_dir", "must not be empty");
}

std::string PipelineConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json().dump())));
  return buf;
}

PipelineConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw config_error(path, std::string("invalid JSON: ") + e.what());
  }
  if (seed_override && j.is_object()) {
    if (!j.contains("simulation")) j["simulation"] = json::object();
    if (j["simulation"].is_object()) j["simulation"]["seed"] = *seed_override;
  }
  return PipelineConfig::from_json(j);
}

std::string Slice::label() const { return std::string(axis == Axis::c_s ? "c_s=" : "n_s=") + std::to_string(value); }

Slice parse_slice(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw config_error("--slice", "expected c_s=K or n_s=K");
  const std::string key = text.substr(0, eq), val = text.substr(eq + 1);
  Slice s;
  if (key == "c_s")
    s.axis = Slice::Axis::c_s;
  else if (key == "n_s")
    s.axis = Slice::Axis::n_s;
  else
    throw config_error("--slice", "unknown axis '" + key + "'");
  std::size_t used = 0;
  try {
    s.value = std::stoi(val, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (val.empty() || used != val.size() || s.value < 0) throw config_error("--slice", "invalid index '" + val + "'");
  return s;
}

// ---- analyses ----

SliceStats slice_stats(const JointDist2D& d) {
  SliceStats s;
  const auto m1 = d.marginal(0), m2 = d.marginal(1);
  s.mean_i1 = m1.mean();
  s.mean_i2 = m2.mean();
  s.fano_i1 = or_nan([&] { return fano(m1); });
  s.fano_i2 = or_nan([&] { return fano(m2); });
  s.R_plus = or_nan([&] { return noise_reduction_plus(d); });
  s.C_delta = or_nan([&] { return covariance_delta(d); });
  const MomentSet m = intensity_moments(d, 4);
  s.tau_CW = or_nan([&] { return ncd_c_w(m).tau; });
  s.tau_MW = or_nan([&] { return ncd_m_w(m).tau; });
  return s;
}

IdlerInversion idler_inversion(const JointDist2D& conditional, const PipelineConfig& cfg) {
  const auto& d1 = cfg.detectors[1];
  const auto& d2 = cfg.detectors[2];
  const auto& rc = cfg.reconstruction;
  int c1 = conditional.cutoffs()[0], c2 = conditional.cutoffs()[1];
  if (!d1.ideal) c1 = quantile_index(conditional.marginal(0).values, rc.count_budget);
  if (!d2.ideal) c2 = quantile_index(conditional.marginal(1).values, rc.count_budget);
  auto photon_max = [&](const DetectorConfig& d, int c) {
    if (d.ideal) return c;
    if (!(d.eta > 0.0)) throw config_error("detectors", "EM needs a positive detector efficiency");
    return static_cast<int>(std::ceil(rc.photon_margin * (c + 1) / d.eta));
  };
  IdlerInversion inv{JointDist2D{}, detection_matrix(d1, c1, photon_max(d1, c1)),
                     detection_matrix(d2, c2, photon_max(d2, c2))};
  inv.trimmed.kind = conditional.kind;
  inv.trimmed.values = conditional.values.topLeftCorner(c1 + 1, c2 + 1);
  inv.trimmed.values /= inv.trimmed.values.sum();
  return inv;
}

std::vector<Fig2Row> fig2_rows(const Histogram3D& f, const PipelineConfig& cfg, std::array<int, 2> cs_range,
                               bool keep_distributions) {
  const double total = f.sum();
  if (!(total > 0.0)) throw config_error("input", "histogram has no mass");
  std::vector<Fig2Row> rows;
  for (int cs = cs_range[0]; cs <= cs_range[1]; ++cs) {
    Fig2Row row;
    row.c_s = cs;
    JointDist2D cond;
    try {
      cond = conditional_histogram(f, cs);
    } catch (const empty_postselection_error&) {
      row.empty = true;
      rows.push_back(row);
      continue;
    }
    const std::string label = "c_s=" + std::to_string(cs);
    in_slice(label, [&] {
      double z = 0.0;
      const auto sh = f.values.shape();
      for (int a = 0; a < sh[1]; ++a)
        for (int b = 0; b < sh[2]; ++b) z += f.values(cs, a, b);
      row.probability = z / total;
      row.counts = slice_stats(cond);
      if (cfg.reconstruction.em_slices) {
        const IdlerInversion inv = idler_inversion(cond, cfg);
        EmResult2D em = em_reconstruct_2d(inv.trimmed, inv.i1, inv.i2, cfg.reconstruction.em);
        row.photons = slice_stats(em.dist);
        row.em = em.report;
        if (keep_distributions) row.photon_dist = std::move(em.dist);
      }
      return 0;
    });
    rows.push_back(std::move(row));
  }
  return rows;
}

std::optional<JointDist2D> photon_slice(const JointDist3D& p, int n_s) {
  if (n_s < 0 || n_s > p.cutoffs()[0]) return std::nullopt;
  JointDist2D d;
  d.values = p.slice(n_s);
  const double z = d.values.sum();
  if (!(z > 0.0)) return std::nullopt;
  d.values /= z;
  d.tail_mass = 0.0;
  return d;
}

std::vector<Fig3Row> fig3_rows(const JointDist3D& p, std::array<int, 2> ns_range) {
  const double total = p.sum();
  std::vector<Fig3Row> rows;
  for (int ns = ns_range[0]; ns <= ns_range[1]; ++ns) {
    Fig3Row row;
    row.n_s = ns;
    const auto d = photon_slice(p, ns);
    if (!d) {
      row.empty = true;
    } else {
      row.probability = p.slice(ns).sum() / total;
      row.photons = in_slice("n_s=" + std::to_string(ns), [&] { return slice_stats(*d); });
    }
    rows.push_back(row);
  }
  return rows;
}

// ---- writers ----

void write_criteria(const std::string& csv_path, const std::vector<CriterionReport>& values,
                    const std::vector<NcdReport>& depths, const json& extra) {
  auto out = open_out(csv_path);
  out << "criterion,indices,value,tau,s_th,saturated\n";
  json arr = json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& v = values[i];
    const NcdReport* d = i < depths.size() ? &depths[i] : nullptr;
    out << '"' << v.name << "\",\"" << index_list(v.indices) << "\"," << cell(v.value) << ','
        << (d ? cell(d->tau) : "NA") << ',' << (d ? cell(d->s_threshold) : "NA") << ','
        << (d ? (d->saturated ? "true" : "false") : "NA") << '\n';
    json e = {{"criterion", v.name}, {"indices", index_list(v.indices)}, {"value", v.value},
              {"nonclassical", v.nonclassical}};
    if (d) {
      e["tau"] = d->tau;
      e["s_th"] = d->s_threshold;
      e["saturated"] = d->saturated;
      e["non_monotone_warning"] = d->non_monotone_warning;
    }
    arr.push_back(e);
  }
  if (!out) throw io_error("failed writing " + csv_path);
  json side = extra;
  side["criteria"] = arr;
  write_json(sidecar_path(csv_path), side);
}

void write_quasi_grid(const std::string& csv_path, const QuasiGrid& q, const json& extra) {
  auto out = open_out(csv_path);
  out << "W_i1,W_i2,P\n";
  for (int i = 0; i < q.values.rows(); ++i)
    for (int j = 0; j < q.values.cols(); ++j)
      out << format_double(q.w1(i)) << ',' << format_double(q.w2(j)) << ',' << format_double(q.values(i, j)) << '\n';
  if (!out) throw io_error("failed writing " + csv_path);
  const NegativityReport r = negativity_report(q);
  json neg = {{"min_value", r.min_value},
              {"min_location", r.min_location},
              {"negative_mass", r.negative_mass},
              {"max_value", r.max_value},
              {"max_location", r.max_location},
              {"lobe_max_value", r.lobe_max_value},
              {"lobe_max_location", r.lobe_max_location}};
  neg["bounding_box"] = r.bounding_box ? json(*r.bounding_box) : json(nullptr);
  neg["negative_centroid"] = r.negative_centroid ? json(*r.negative_centroid) : json(nullptr);
  json side = extra;
  side["s"] = q.s;
  side["step"] = q.step;
  side["truncation_order"] = q.truncation_order;
  side["integral"] = q.integral();
  side["cancellation"] = q.cancellation;
  side["precision_warning"] = q.precision_warning;
  side["negativity"] = neg;
  write_json(sidecar_path(csv_path), side);
}

json provenance(const PipelineConfig& cfg, const std::string& command) {
  return {{"tool", "twinbeam"},
          {"tool_version", kToolVersion},
          {"command", command},
          {"schema_version", cfg.schema_version},
          {"config_hash", cfg.hash()},
          {"seed", cfg.simulation.seed ? json(*cfg.simulation.seed) : json(nullptr)}};
}

namespace {

json with_provenance(const PipelineConfig& cfg, const std::string& command, json extra = json::object()) {
  extra["provenance"] = provenance(cfg, command);
  return extra;
}

json input_info(const std::string& input, const HistogramFile& hf) {
  json j = {{"path", input}, {"axis_kind", to_string(hf.kind)}, {"trial_count", hf.histogram.trial_count}};
  if (hf.sidecar.contains("provenance")) j["provenance"] = hf.sidecar["provenance"];
  return j;
}

std::array<DetectionMatrix, 3> reconstruction_matrices(const PipelineConfig& cfg, const Histogram3D& f,
                                                       Histogram3D& trimmed) {
  const auto& rc = cfg.reconstruction;
  const auto cut = f.cutoffs();
  std::array<int, 3> c = cut;
  JointDist3D as_dist;
  as_dist.values = f.values;
  for (int k = 0; k < 3; ++k)
    if (!cfg.detectors[k].ideal) c[k] = quantile_index(as_dist.marginal(k).values, rc.count_budget);
  trimmed.trial_count = f.trial_count;
  trimmed.values = f.values.resized(c[0] + 1, c[1] + 1, c[2] + 1);
  std::array<DetectionMatrix, 3> m;
  for (int k = 0; k < 3; ++k) {
    const auto& d = cfg.detectors[k];
    int n = c[k];
    if (!d.ideal) {
      if (!(d.eta > 0.0)) throw config_error("detectors", "EM needs a positive detector efficiency");
      n = static_cast<int>(std::ceil(rc.photon_margin * (c[k] + 1) / d.eta));
    }
    m[k] = d.ideal ? DetectionMatrix::identity(n) : detection_matrix(d, c[k], n);
  }
  return m;
}

FitDetectors fit_detectors(const PipelineConfig& cfg) {
  for (const auto& d : cfg.detectors)
    if (d.ideal) throw config_error("detectors", "the Gaussian fit needs pixel detectors");
  return {cfg.detectors[0], cfg.detectors[1], cfg.detectors[2]};
}

// Local maps, hybrid L, criteria and quasi-distribution grids for one slice.
void slice_reports(const PipelineConfig& cfg, const JointDist2D& dist_full, const std::string& tag,
                   const std::string& dir, const json& base, std::vector<std::string>& files) {
  const auto& a = cfg.analysis;
  const JointDist2D dist = trim_mass(dist_full, 1e-10);
  json side = base;
  side["slice"] = tag;

  {
    const MomentSet m = intensity_moments(dist, 4);
    std::vector<CriterionReport> vals;
    std::vector<NcdReport> depths;
    for (const auto& c : a.criteria) {
      if (c.family == CriterionSpec::Family::ccs) {
        vals.push_back(ccs_criterion(m, c.indices[0], c.indices[1]));
        depths.push_back(ncd_ccs(m, c.indices[0], c.indices[1]));
      } else {
        vals.push_back(matrix_criterion(m, c.indices[0], c.indices[1], c.indices[2]));
        depths.push_back(ncd_matrix(m, c.indices[0], c.indices[1], c.indices[2]));
      }
      vals.back().name = c.name();
    }
    const std::string p = out_path(dir, "criteria_" + tag + ".csv");
    write_criteria(p, vals, depths, side);
    files.push_back(p);
  }

  if (a.local_maps) {
    const std::string p = out_path(dir, "local_map_" + tag + ".csv");
    auto out = open_out(p);
    out << "family,K_i1,K_i2,value,tau,s_th,indices\n";
    for (auto fam : {CriterionFamily::ccs, CriterionFamily::matrix}) {
      const auto map = local_ncd_map(dist, fam, {a.probability_floor});
      for (const auto& [k, e] : map)
        out << (fam == CriterionFamily::ccs ? "ccs" : "matrix") << ',' << k[0] << ',' << k[1] << ','
            << cell(e.best.value) << ',' << cell(e.ncd.tau) << ',' << cell(e.ncd.s_threshold) << ",\""
            << index_list(e.best.indices) << "\"\n";
    }
    if (!out) throw io_error("failed writing " + p);
    json s = side;
    s["probability_floor"] = a.probability_floor;
    write_json(sidecar_path(p), s);
    files.push_back(p);

    const std::string h = out_path(dir, "hybrid_L_" + tag + ".csv");
    auto hout = open_out(h);
    hout << "n_i1,L,tau,s_th\n";
    const auto L = hybrid_L(dist);
    const auto Ln = hybrid_L_ncd(dist);
    for (const auto& [n, r] : L) {
      const auto it = Ln.find(n);
      hout << n << ',' << (r ? cell(r->value) : "NA") << ',' << (it != Ln.end() ? cell(it->second.tau) : "NA") << ','
           << (it != Ln.end() ? cell(it->second.s_threshold) : "NA") << '\n';
    }
    if (!hout) throw io_error("failed writing " + h);
    write_json(sidecar_path(h), side);
    files.push_back(h);
  }

  for (double s : a.s_grid) {
    GridSpec g;
    g.step = a.quasi_step;
    const QuasiGrid q = quasi_distribution(dist, s, g);
    const std::string p = out_path(dir, "quasi_" + tag + "_s" + slug(s) + ".csv");
    write_quasi_grid(p, q, side);
    files.push_back(p);
  }
}

void write_fig2(const std::string& path, const std::vector<Fig2Row>& rows, const json& side) {
  auto out = open_out(path);
  const auto h = fig2_header();
  for (std::size_t i = 0; i < h.size(); ++i) out << (i ? "," : "") << h[i];
  out << '\n';
  json arr = json::array();
  for (const auto& r : rows) {
    out << r.c_s << ',' << (r.empty ? "NA" : "ok") << ',' << (r.empty ? "NA" : cell(r.probability));
    put_stats(out, r.empty ? nullptr : &r.counts);
    put_stats(out, r.photons ? &*r.photons : nullptr);
    out << ',' << (r.em ? std::to_string(r.em->iterations) : "NA") << '\n';
    json e = {{"c_s", r.c_s}, {"empty", r.empty}};
    if (!r.empty) e["counts"] = stats_json(r.counts);
    if (r.photons) e["photons"] = stats_json(*r.photons);
    if (r.em) e["em"] = em_json(*r.em);
    arr.push_back(e);
  }
  if (!out) throw io_error("failed writing " + path);
  json s = side;
  s["rows"] = arr;
  write_json(sidecar_path(path), s);
}

void write_fig3(const std::string& path, const std::vector<Fig3Row>& rows, const std::string& route, const json& side) {
  auto out = open_out(path);
  out << "n_s,route,status,probability,mean_n_i1,mean_n_i2,fano_n_i1,fano_n_i2,R_n_plus,C_n_delta,tau_n_CW,tau_n_MW\n";
  for (const auto& r : rows) {
    out << r.n_s << ',' << route << ',' << (r.empty ? "NA" : "ok") << ',' << (r.empty ? "NA" : cell(r.probability));
    put_stats(out, r.empty ? nullptr : &r.photons);
    out << '\n';
  }
  if (!out) throw io_error("failed writing " + path);
  json s = side;
  s["route"] = route;
  write_json(sidecar_path(path), s);
}

}  // namespace

// ---- commands ----

CommandResult cmd_simulate(const PipelineConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  ensure_dir(out_dir);
  CommandResult res;
  const JointDist3D p = compose_noisy_3d(cfg.fields, std::nullopt, cfg.simulation.tail_budget);
  const auto cut = p.cutoffs();
  std::array<DetectionMatrix, 3> m;
  std::array<int, 3> cmax{};
  for (int k = 0; k < 3; ++k) {
    const auto& d = cfg.detectors[k];
    cmax[k] = count_cutoff(d, p.marginal(k).values, cfg.simulation.tail_budget);
    if (!d.ideal) cmax[k] = std::min(cmax[k], d.pixels);
    m[k] = d.ideal ? DetectionMatrix::identity(cut[k]) : detection_matrix(d, cmax[k], cut[k]);
    if (d.ideal) cmax[k] = cut[k];
  }
  const Histogram3D f = forward_histogram(p, m[0], m[1], m[2]);
  json dets;
  for (int k = 0; k < 3; ++k) dets[kDetectorNames[k]] = detector_json(cfg.detectors[k]);
  json side = with_provenance(cfg, "simulate");
  side["detectors"] = dets;
  side["fields"] = cfg.to_json()["fields"];
  side["photon_cutoffs"] = cut;
  side["photon_tail_mass"] = p.tail_mass;
  side["tail_mass"] = 1.0 - f.sum();
  side["route"] = "exact";
  const std::string exact = out_path(out_dir, "exact_histogram.csv");
  write_histogram(exact, f.values, AxisKind::photocounts, 0, side);
  res.files.push_back(exact);
  res.summary["tail_mass"] = 1.0 - f.sum();

  if (cfg.simulation.trials > 0) {
    const Histogram3D h = sample_histogram(p, cfg.detectors, cfg.simulation.trials, *cfg.simulation.seed);
    json s = with_provenance(cfg, "simulate");
    s["detectors"] = dets;
    s["route"] = "sampled";
    s["seed"] = *cfg.simulation.seed;
    const std::string sampled = out_path(out_dir, "sampled_histogram.csv");
    write_histogram(sampled, h.values, AxisKind::photocounts, h.trial_count, s);
    res.files.push_back(sampled);
  }
  return res;
}

CommandResult cmd_fit(const PipelineConfig& cfg, const std::string& input, const std::string& out_dir) {
  cfg.validate();
  const HistogramFile hf = read_input(input);
  if (hf.kind != AxisKind::photocounts) throw config_error("input", "the fit needs a photocount histogram");
  const FitDetectors dets = fit_detectors(cfg);
  ensure_dir(out_dir);
  const GaussianFitResult r = gaussian_fit(hf.histogram, dets, cfg.reconstruction.fit);
  json j = r.to_json();
  j["provenance"] = provenance(cfg, "fit");
  j["input"] = input_info(input, hf);
  const std::string p = out_path(out_dir, "fit.json");
  write_json(p, j);
  CommandResult res;
  res.files.push_back(p);
  res.summary["eta_s"] = r.eta_s;
  res.summary["eta_i"] = r.eta_i;
  return res;
}

CommandResult cmd_reconstruct(const PipelineConfig& cfg, const std::string& input, const std::string& out_dir,
                              const std::optional<Slice>& slice) {
  cfg.validate();
  const HistogramFile hf = read_input(input);
  if (hf.kind != AxisKind::photocounts) throw config_error("input", "reconstruction needs a photocount histogram");
  if (slice && slice->axis != Slice::Axis::c_s) throw config_error("--slice", "reconstruct slices on c_s only");
  ensure_dir(out_dir);
  CommandResult res;
  json side = with_provenance(cfg, "reconstruct");
  side["input"] = input_info(input, hf);

  if (slice) {
    const std::string label = slice->label();
    const JointDist2D cond = in_slice(label, [&] { return conditional_histogram(hf.histogram, slice->value); });
    const IdlerInversion inv = in_slice(label, [&] { return idler_inversion(cond, cfg); });
    const EmResult2D em = in_slice(label, [&] { return em_reconstruct_2d(inv.trimmed, inv.i1, inv.i2, cfg.reconstruction.em); });
    Tensor3 t(slice->value + 1, em.dist.values.rows(), em.dist.values.cols());
    for (int a = 0; a < em.dist.values.rows(); ++a)
      for (int b = 0; b < em.dist.values.cols(); ++b) t(slice->value, a, b) = em.dist.values(a, b);
    side["slice"] = label;
    side["axes"] = {"photocounts", "photons", "photons"};
    side["em"] = em_json(em.report);
    const std::string p = out_path(out_dir, "reconstruction_c_s" + std::to_string(slice->value) + ".csv");
    write_histogram(p, t, AxisKind::photons, hf.histogram.trial_count, side);
    res.files.push_back(p);
    res.summary["em"] = em_json(em.report);
    return res;
  }

  Histogram3D trimmed;
  const auto m = reconstruction_matrices(cfg, hf.histogram, trimmed);
  const EmResult3D em = em_reconstruct_3d(trimmed, m[0], m[1], m[2], cfg.reconstruction.em);
  side["axes"] = {"photons", "photons", "photons"};
  side["em"] = em_json(em.report);
  side["photon_cutoffs"] = em.dist.cutoffs();
  side["trimmed_mass"] = 1.0 - trimmed.sum() / hf.histogram.sum();
  const std::string p = out_path(out_dir, "reconstruction.csv");
  write_histogram(p, em.dist.values, AxisKind::photons, hf.histogram.trial_count, side);
  res.files.push_back(p);
  res.summary["em"] = em_json(em.report);
  return res;
}

CommandResult cmd_analyze(const PipelineConfig& cfg, const std::string& input, const std::string& out_dir,
                          const std::optional<Slice>& slice) {
  cfg.validate();
  const HistogramFile hf = read_input(input);
  const bool counts = hf.kind == AxisKind::photocounts;
  if (hf.kind == AxisKind::quasi) throw config_error("input", "cannot analyze a quasi-distribution file");
  if (!counts && slice && slice->axis == Slice::Axis::c_s)
    throw config_error("--slice", "a photon-number input has no c_s axis");
  ensure_dir(out_dir);
  CommandResult res;
  const auto& a = cfg.analysis;
  const json base = with_provenance(cfg, "analyze", {{"input", input_info(input, hf)}});

  const bool do_cs = counts && (!slice || slice->axis == Slice::Axis::c_s);
  const bool do_ns = !slice || slice->axis == Slice::Axis::n_s;

  if (do_cs) {
    const std::array<int, 2> rg = slice ? std::array<int, 2>{slice->value, slice->value} : a.cs_range;
    const auto rows = fig2_rows(hf.histogram, cfg, rg, true);
    const std::string p = out_path(out_dir, "fig2_postselected_counts.csv");
    write_fig2(p, rows, base);
    res.files.push_back(p);
    std::vector<int> picks = slice ? std::vector<int>{slice->value} : a.cs_slices;
    for (int cs : picks)
      for (const auto& r : rows)
        if (r.c_s == cs && r.photon_dist) {
          const std::string label = "c_s" + std::to_string(cs);
          in_slice("c_s=" + std::to_string(cs), [&] {
            slice_reports(cfg, *r.photon_dist, label, out_dir, base, res.files);
            return 0;
          });
        }
  }

  if (do_ns && (!counts || cfg.reconstruction.gaussian_fit)) {
    JointDist3D p;
    std::string route;
    json side = base;
    if (counts) {
      const GaussianFitResult fit = gaussian_fit(hf.histogram, fit_detectors(cfg), cfg.reconstruction.fit);
      p = compose_noisy_3d(fit.params, std::nullopt, cfg.simulation.tail_budget);
      route = "gaussian";
      side["fit"] = fit.to_json();
      side["fit"].erase("scan");
    } else {
      p = photon_dist_from(hf);
      route = "ml";
    }
    const std::array<int, 2> rg = slice ? std::array<int, 2>{slice->value, slice->value} : a.ns_range;
    const auto rows = fig3_rows(p, rg);
    const std::string path = out_path(out_dir, "fig3_postselected_photons.csv");
    write_fig3(path, rows, route, side);
    res.files.push_back(path);
    std::vector<int> picks = slice ? std::vector<int>{slice->value} : a.ns_slices;
    for (int ns : picks) {
      const auto d = photon_slice(p, ns);
      if (!d) continue;
      in_slice("n_s=" + std::to_string(ns), [&] {
        slice_reports(cfg, *d, "n_s" + std::to_string(ns), out_dir, base, res.files);
        return 0;
      });
    }
  }
  return res;
}

int exit_code_for(const std::exception& e) {
  if (const auto* te = dynamic_cast<const error*>(&e)) {
    const std::string k = te->kind();
    if (k == "config_error" || k == "parse_error" || k == "io_error" || k == "incomplete_input_error") return 2;
  }
  return 1;
}

json error_json(const std::exception& e, const std::string& command) {
  json j = {{"command", command}, {"message", e.what()}, {"exit_code", exit_code_for(e)}};
  if (const auto* te = dynamic_cast<const error*>(&e)) {
    j["kind"] = te->kind();
  } else {
    j["kind"] = "internal";
  }
  if (const auto* pe = dynamic_cast<const parse_error*>(&e)) j["line"] = pe->line;
  if (const auto* ce = dynamic_cast<const config_error*>(&e)) j["field"] = ce->field;
  if (const auto* se = dynamic_cast<const slice_error*>(&e)) j["slice"] = se->slice;
  if (const auto* fe = dynamic_cast<const fit_error*>(&e)) j["residual"] = fe->residual;
  j["tool_version"] = kToolVersion;
  return j;
}

}  // namespace twinbeam

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "twinbeam/detector.hpp"
#include "twinbeam/errors.hpp"
#include "twinbeam/field_model.hpp"
#include "twinbeam/gaussian_fit.hpp"
#include "twinbeam/nonclassicality.hpp"
#include "twinbeam/quasidist.hpp"
#include "twinbeam/reconstruction.hpp"

namespace twinbeam {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr int kConfigSchemaVersion = 1;

// Invalid configuration; `field` is the JSON path of the offending entry.
class config_error : public error {
 public:
  config_error(const std::string& field, const std::string& what)
      : error(field + ": " + what), field(field) {}
  const char* kind() const noexcept override { return "config_error"; }
  std::string field;
};

// Failure inside one postselection slice, keeping the kind of the original error.
class slice_error : public error {
 public:
  slice_error(const std::string& slice, const std::string& inner_kind, const std::string& what)
      : error(slice + ": " + what), slice(slice), inner_kind(inner_kind) {}
  const char* kind() const noexcept override { return inner_kind.c_str(); }
  std::string slice;
  std::string inner_kind;
};

struct SimulationConfig {
  std::uint64_t trials = 0;
  std::optional<std::uint64_t> seed;
  double tail_budget = kDefaultTailBudget;
};

struct ReconstructionConfig {
  EmSettings em;
  // Count cells beyond the 1 - count_budget quantile of each idler marginal are
  // dropped before EM; photon grids reach photon_margin * (c_max + 1) / eta.
  double count_budget = 1e-8;
  double photon_margin = 1.2;
  bool em_slices = true;     // per-c_s 2D EM in analyze
  bool gaussian_fit = true;  // Gaussian-fit route for per-n_s tables of photocount input
  FitSettings fit;
};

struct CriterionSpec {
  enum class Family { ccs, matrix };
  Family family = Family::ccs;
  // ccs: {K, L}; matrix: {J, K, L}
  std::vector<Index2> indices;
  std::string name() const;
};

struct AnalysisConfig {
  std::array<int, 2> cs_range{0, 10};
  std::array<int, 2> ns_range{0, 25};
  std::vector<CriterionSpec> criteria;
  // Slices expanded into local maps, hybrid L and quasi-distribution grids.
  std::vector<int> cs_slices{5};
  std::vector<int> ns_slices{10};
  std::vector<double> s_grid{-0.15};
  double quasi_step = 0.05;
  double probability_floor = 0.01;
  bool local_maps = true;
};

struct PipelineConfig {
  int schema_version = kConfigSchemaVersion;
  CompositeFieldParams fields;
  std::array<DetectorConfig, 3> detectors;  // s, i1, i2
  SimulationConfig simulation;
  ReconstructionConfig reconstruction;
  AnalysisConfig analysis;
  std::string output_dir = "out";

  static PipelineConfig fixture();
  static PipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
  // FNV-1a over the canonical JSON form, as 16 hex digits.
  std::string hash() const;
};

// The seed override replaces simulation.seed before validation.
PipelineConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt);

struct Slice {
  enum class Axis { c_s, n_s };
  Axis axis = Axis::c_s;
  int value = 0;
  std::string label() const;
};

// "c_s=K" or "n_s=K".
Slice parse_slice(const std::string& text);

// Detected or photon statistics of a postselected idler pair; NaN marks an
// undefined quantity (e.g. a Fano factor of a vacuum marginal).
struct SliceStats {
  double mean_i1 = 0, mean_i2 = 0;
  double fano_i1 = 0, fano_i2 = 0;
  double R_plus = 0, C_delta = 0;
  double tau_CW = 0, tau_MW = 0;
};

SliceStats slice_stats(const JointDist2D& d);

struct Fig2Row {
  int c_s = 0;
  bool empty = false;
  double probability = 0.0;  // fraction of frames with this signal count
  SliceStats counts;
  std::optional<SliceStats> photons;  // from 2D EM when enabled
  std::optional<EmReport> em;
  std::optional<JointDist2D> photon_dist;
};

struct Fig3Row {
  int n_s = 0;
  bool empty = false;
  double probability = 0.0;
  SliceStats photons;
};

// Detection matrices of the two idlers for 2D EM of a conditional histogram;
// the histogram is trimmed to the matrices' count range.
struct IdlerInversion {
  JointDist2D trimmed;
  DetectionMatrix i1, i2;
};
IdlerInversion idler_inversion(const JointDist2D& conditional, const PipelineConfig& cfg);

std::vector<Fig2Row> fig2_rows(const Histogram3D& f, const PipelineConfig& cfg, std::array<int, 2> cs_range,
                               bool keep_distributions = false);
std::vector<Fig3Row> fig3_rows(const JointDist3D& p, std::array<int, 2> ns_range);

// Ideal postselection of a photon distribution on the signal axis.
std::optional<JointDist2D> photon_slice(const JointDist3D& p, int n_s);

struct CommandResult {
  std::vector<std::string> files;
  nlohmann::json summary = nlohmann::json::object();
};

CommandResult cmd_simulate(const PipelineConfig& cfg, const std::string& out_dir);
CommandResult cmd_fit(const PipelineConfig& cfg, const std::string& input, const std::string& out_dir);
CommandResult cmd_reconstruct(const PipelineConfig& cfg, const std::string& input, const std::string& out_dir,
                              const std::optional<Slice>& slice = std::nullopt);
CommandResult cmd_analyze(const PipelineConfig& cfg, const std::string& input, const std::string& out_dir,
                          const std::optional<Slice>& slice = std::nullopt);

// 0 success, 1 numerical or model failure, 2 input error.
int exit_code_for(const std::exception& e);
nlohmann::json error_json(const std::exception& e, const std::string& command);

// Provenance block carried by every sidecar.
nlohmann::json provenance(const PipelineConfig& cfg, const std::string& command);

// Long-format writers for the report files.
void write_criteria(const std::string& csv_path, const std::vector<CriterionReport>& values,
                    const std::vector<NcdReport>& depths, const nlohmann::json& extra);
void write_quasi_grid(const std::string& csv_path, const QuasiGrid& q, const nlohmann::json& extra);

}  // namespace twinbeam

#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "twinbeam/distributions.hpp"

namespace twinbeam {

struct HistogramFile {
  Histogram3D histogram;
  AxisKind kind = AxisKind::photocounts;
  nlohmann::json sidecar;
};

// Sidecar path for a CSV file: foo.csv -> foo.json.
std::string sidecar_path(const std::string& csv_path);

// Writes `c_s,c_i1,c_i2,frequency` rows for every non-zero cell and the JSON
// sidecar (trial_count, axis_kind and any caller-provided fields).
void write_histogram(const std::string& csv_path, const Tensor3& values, AxisKind kind, std::uint64_t trial_count,
                     const nlohmann::json& extra = nlohmann::json::object());

// Reads a histogram CSV; the sidecar is optional.  Throws parse_error with the
// offending line number on malformed input.
HistogramFile read_histogram(const std::string& csv_path);

std::string format_double(double x);

}  // namespace twinbeam

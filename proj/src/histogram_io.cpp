#include "twinbeam/histogram_io.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "twinbeam/errors.hpp"

namespace twinbeam {

namespace {

const char* kHeader = "c_s,c_i1,c_i2,frequency";

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

int parse_index(const std::string& s, long line) {
  int v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || v < 0 || v > 1'000'000)
    throw parse_error("line " + std::to_string(line) + ": invalid count index '" + s + "'", line);
  return v;
}

double parse_value(const std::string& s, long line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v) || v < 0.0)
    throw parse_error("line " + std::to_string(line) + ": invalid frequency '" + s + "'", line);
  return v;
}

}  // namespace

std::string format_double(double x) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return ec == std::errc() ? std::string(buf, ptr) : std::to_string(x);
}

std::string sidecar_path(const std::string& csv_path) {
  std::filesystem::path p(csv_path);
  p.replace_extension(".json");
  return p.string();
}

void write_histogram(const std::string& csv_path, const Tensor3& values, AxisKind kind, std::uint64_t trial_count,
                     const nlohmann::json& extra) {
  std::ofstream out(csv_path);
  if (!out) throw io_error("cannot write " + csv_path);
  out << kHeader << '\n';
  const auto sh = values.shape();
  for (int a = 0; a < sh[0]; ++a)
    for (int b = 0; b < sh[1]; ++b)
      for (int c = 0; c < sh[2]; ++c) {
        const double v = values(a, b, c);
        if (v != 0.0) out << a << ',' << b << ',' << c << ',' << format_double(v) << '\n';
      }
  if (!out) throw io_error("failed writing " + csv_path);
  nlohmann::json side = extra;
  side["axis_kind"] = to_string(kind);
  side["trial_count"] = trial_count;
  side["extents"] = {sh[0], sh[1], sh[2]};
  std::ofstream js(sidecar_path(csv_path));
  if (!js) throw io_error("cannot write " + sidecar_path(csv_path));
  js << side.dump(2) << '\n';
}

HistogramFile read_histogram(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw io_error("cannot open " + csv_path);
  std::string line;
  long line_no = 0;
  if (!std::getline(in, line)) throw parse_error("line 1: empty file", 1);
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHeader) throw parse_error("line 1: expected header '" + std::string(kHeader) + "'", 1);
  struct Cell {
    int a, b, c;
    double v;
  };
  std::vector<Cell> cells;
  std::array<int, 3> ext{0, 0, 0};
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != 4)
      throw parse_error("line " + std::to_string(line_no) + ": expected 4 fields, got " + std::to_string(f.size()),
                        line_no);
    Cell cell{parse_index(f[0], line_no), parse_index(f[1], line_no), parse_index(f[2], line_no),
              parse_value(f[3], line_no)};
    ext[0] = std::max(ext[0], cell.a + 1);
    ext[1] = std::max(ext[1], cell.b + 1);
    ext[2] = std::max(ext[2], cell.c + 1);
    cells.push_back(cell);
  }
  HistogramFile hf;
  const std::string side = sidecar_path(csv_path);
  if (std::filesystem::exists(side)) {
    std::ifstream js(side);
    try {
      hf.sidecar = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
      throw parse_error(side + ": " + e.what(), 0);
    }
    if (hf.sidecar.contains("axis_kind")) hf.kind = axis_kind_from_string(hf.sidecar["axis_kind"].get<std::string>());
    if (hf.sidecar.contains("trial_count")) hf.histogram.trial_count = hf.sidecar["trial_count"].get<std::uint64_t>();
    if (hf.sidecar.contains("extents")) {
      const auto e = hf.sidecar["extents"].get<std::vector<int>>();
      if (e.size() == 3)
        for (int k = 0; k < 3; ++k) ext[k] = std::max(ext[k], e[k]);
    }
  }
  hf.histogram.values = Tensor3(ext[0], ext[1], ext[2]);
  for (const auto& c : cells) hf.histogram.values(c.a, c.b, c.c) += c.v;
  return hf;
}

}  // namespace twinbeam

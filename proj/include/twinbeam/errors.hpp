#pragma once

#include <array>
#include <stdexcept>
#include <string>

namespace twinbeam {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define TWINBEAM_ERROR(name)                                         \
  class name : public error {                                        \
   public:                                                           \
    using error::error;                                              \
    const char* kind() const noexcept override { return #name; }     \
  };

TWINBEAM_ERROR(parameter_error)
TWINBEAM_ERROR(shape_error)
TWINBEAM_ERROR(empty_postselection_error)
TWINBEAM_ERROR(degenerate_error)
TWINBEAM_ERROR(incomplete_input_error)
TWINBEAM_ERROR(index_domain_error)
TWINBEAM_ERROR(infeasible_error)
TWINBEAM_ERROR(insufficient_statistics_error)
TWINBEAM_ERROR(model_mismatch_error)
TWINBEAM_ERROR(io_error)
TWINBEAM_ERROR(undefined_mapping_error)

#undef TWINBEAM_ERROR

class truncation_error : public error {
 public:
  truncation_error(const std::string& what, std::array<int, 3> suggested)
      : error(what), suggested_cutoffs(suggested) {}
  const char* kind() const noexcept override { return "truncation_error"; }
  std::array<int, 3> suggested_cutoffs;
};

class precision_error : public error {
 public:
  precision_error(const std::string& what, int row, int col)
      : error(what), row(row), col(col) {}
  const char* kind() const noexcept override { return "precision_error"; }
  int row;
  int col;
};

class fit_error : public error {
 public:
  fit_error(const std::string& what, double residual)
      : error(what), residual(residual) {}
  const char* kind() const noexcept override { return "fit_error"; }
  double residual;
};

class parse_error : public error {
 public:
  parse_error(const std::string& what, long line)
      : error(what), line(line) {}
  const char* kind() const noexcept override { return "parse_error"; }
  long line;
};

}  // namespace twinbeam

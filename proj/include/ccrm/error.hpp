#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ccrm {

enum class ErrorCode {
  invalid_argument,
  dimension_mismatch,
  overflow,
  singular_design,
  no_variation,
  homogeneity,
  degenerate_support,
  infeasible_moments,
  reduced_rank,
  non_real_support,
  infeasible_joint,
  rank_deficient,
  non_convergence,
  parse,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::overflow: return "overflow";
    case ErrorCode::singular_design: return "singular_design";
    case ErrorCode::no_variation: return "no_variation";
    case ErrorCode::homogeneity: return "homogeneity";
    case ErrorCode::degenerate_support: return "degenerate_support";
    case ErrorCode::infeasible_moments: return "infeasible_moments";
    case ErrorCode::reduced_rank: return "reduced_rank";
    case ErrorCode::non_real_support: return "non_real_support";
    case ErrorCode::infeasible_joint: return "infeasible_joint";
    case ErrorCode::rank_deficient: return "rank_deficient";
    case ErrorCode::non_convergence: return "non_convergence";
    case ErrorCode::parse: return "parse";
  }
  return "unknown";
}

/// Errors that mean the data cannot pin down the distribution, as opposed to
/// malformed input. The CLI maps these to exit code 2.
constexpr bool is_identification_failure(ErrorCode code) {
  return code == ErrorCode::homogeneity || code == ErrorCode::degenerate_support ||
         code == ErrorCode::infeasible_moments || code == ErrorCode::reduced_rank ||
         code == ErrorCode::non_real_support;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ccrm

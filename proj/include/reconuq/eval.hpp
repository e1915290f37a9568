#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "reconuq/tensor.hpp"
#include "reconuq/uq.hpp"

namespace reconuq {

struct PearsonResult {
  double r = 0.0;
  double p = 1.0;
};

// Two-sided p from t = r*sqrt((n-2)/(1-r^2)) via the regularized incomplete
// beta function.
PearsonResult pearson(std::span<const double> x, std::span<const double> y);
double pearson_p_from_r(double r, std::int64_t n);

// Continued-fraction I_x(a,b), accurate to ~1e-12 for the arguments used here.
double reg_inc_beta(double a, double b, double x);

// (mean(ood) - mean(id)) / population std(id).
double z_score(std::span<const double> id_values, std::span<const double> ood_values);

// Number of values from both lists inside [max(min_id, min_ood),
// min(max_id, max_ood)]; 0 when the interval is empty.
int overlap_count(std::span<const double> id_values, std::span<const double> ood_values);

enum class DvhKind { kDmean, kD2, kD95, kD99 };
const char* dvh_kind_name(DvhKind kind);

struct DvhMetric {
  DvhKind kind;
  std::string structure;
  double value = 0.0;
};

// Dmean = mean dose over the structure; Dx = (100-x)th linear-interpolation
// percentile of the structure's dose values (D95 -> 5th, D2 -> 98th).
double dvh_metric(const Volume& dose, const Mask& structure, DvhKind kind);

// Paired two-sided test on a-b. Zero differences are dropped; all-zero input
// returns 1.0 by convention. Exact sign-pattern enumeration for n <= 12,
// normal approximation with tie and continuity corrections above that.
double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

struct IdAnalysis {
  // method -> Pearson of (uncertainty, dose error) over the shared sample ids
  std::vector<std::pair<std::string, PearsonResult>> pearson_by_method;
};

IdAnalysis run_id_analysis(const std::vector<UncertaintyScore>& scores,
                           const std::vector<std::pair<std::string, double>>& dose_mse);

struct EvalReport {
  struct OodRow {
    double z = 0.0;
    int overlap = 0;
  };
  struct DvhImpactRow {
    std::string structure;
    std::string metric;
    double p = 1.0;
  };

  std::vector<std::pair<std::string, PearsonResult>> pearson_by_method;
  std::vector<std::pair<std::string, OodRow>> ood_by_method;
  std::vector<DvhImpactRow> dvh_impact;
  std::string config_hash;
  std::uint64_t dataset_seed = 0;
  std::uint64_t train_seed = 0;
  int n_id_scored = 0;
  int n_ood_scored = 0;
};

// Includes the correlation/separation values reported on the original
// clinical cohort as reference metadata (never asserted against).
nlohmann::json report_to_json(const EvalReport& report);

}  // namespace reconuq

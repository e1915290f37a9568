#include "reconuq/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include <nlohmann/json.hpp>

#include "reconuq/errors.hpp"
#include "reconuq/grid.hpp"

namespace reconuq {

double reg_inc_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;

  // Lentz's continued fraction for I_x(a,b); converges fast when
  // x < (a+1)/(a+b+2), otherwise use the symmetry I_x(a,b) = 1-I_{1-x}(b,a).
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - reg_inc_beta(b, a, 1.0 - x);

  const double ln_front = a * std::log(x) + b * std::log1p(-x) -
                          (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
  constexpr double kTiny = 1e-300;
  constexpr double kEps = 1e-15;

  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + num / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;

    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + num / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::exp(ln_front) * h / a;
}

double pearson_p_from_r(double r, std::int64_t n) {
  const double df = static_cast<double>(n - 2);
  const double denom = 1.0 - r * r;
  if (denom <= 0.0) return 0.0;
  const double t2 = r * r * df / denom;
  // Two-sided p for Student's t: I_x(df/2, 1/2) with x = df/(df + t^2).
  return reg_inc_beta(df / 2.0, 0.5, df / (df + t2));
}

PearsonResult pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw LengthMismatch("pearson: value lists differ in length");
  const std::int64_t n = static_cast<std::int64_t>(x.size());
  if (n < 3) throw TooFewSamples("pearson: need at least 3 pairs");

  double mx = 0.0, my = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    mx += x[static_cast<std::size_t>(i)];
    my += y[static_cast<std::size_t>(i)];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);

  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double dx = x[static_cast<std::size_t>(i)] - mx;
    const double dy = y[static_cast<std::size_t>(i)] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw DegenerateVariance("pearson: an input has zero variance");

  PearsonResult res;
  res.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  res.p = pearson_p_from_r(res.r, n);
  return res;
}

double z_score(std::span<const double> id_values, std::span<const double> ood_values) {
  if (id_values.size() < 2) throw DegenerateID("z_score: need at least 2 ID values");
  if (ood_values.empty()) throw TooFewSamples("z_score: no OOD values");

  double mean_id = 0.0;
  for (double v : id_values) mean_id += v;
  mean_id /= static_cast<double>(id_values.size());
  double var_id = 0.0;
  for (double v : id_values) var_id += (v - mean_id) * (v - mean_id);
  var_id /= static_cast<double>(id_values.size());  // population convention
  if (var_id == 0.0) throw DegenerateID("z_score: ID values have zero spread");

  double mean_ood = 0.0;
  for (double v : ood_values) mean_ood += v;
  mean_ood /= static_cast<double>(ood_values.size());

  return (mean_ood - mean_id) / std::sqrt(var_id);
}

int overlap_count(std::span<const double> id_values, std::span<const double> ood_values) {
  if (id_values.empty() || ood_values.empty())
    throw TooFewSamples("overlap_count: empty value list");
  const auto [id_min, id_max] = std::minmax_element(id_values.begin(), id_values.end());
  const auto [ood_min, ood_max] = std::minmax_element(ood_values.begin(), ood_values.end());
  const double lo = std::max(*id_min, *ood_min);
  const double hi = std::min(*id_max, *ood_max);
  if (lo > hi) return 0;

  int count = 0;
  for (double v : id_values) count += (v >= lo && v <= hi);
  for (double v : ood_values) count += (v >= lo && v <= hi);
  return count;
}

const char* dvh_kind_name(DvhKind kind) {
  switch (kind) {
    case DvhKind::kDmean: return "Dmean";
    case DvhKind::kD2: return "D2";
    case DvhKind::kD95: return "D95";
    case DvhKind::kD99: return "D99";
  }
  return "?";
}

double dvh_metric(const Volume& dose, const Mask& structure, DvhKind kind) {
  require_same_shape(dose, structure, "dvh_metric");
  std::vector<double> values;
  for (std::int64_t i = 0; i < structure.size(); ++i)
    if (structure.data[i]) values.push_back(dose.data[i]);
  if (values.empty()) throw EmptyStructure("dvh_metric: structure mask is empty");

  if (kind == DvhKind::kDmean) {
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc / static_cast<double>(values.size());
  }

  // Dx is the dose received by at least x% of the structure: the (100-x)th
  // percentile, interpolated linearly between order statistics. The position
  // q*(n-1)/100 is split with integer arithmetic so the fractional part (and
  // with it the interpolated value) carries no product rounding.
  std::int64_t q = 0;
  switch (kind) {
    case DvhKind::kD2: q = 98; break;
    case DvhKind::kD95: q = 5; break;
    case DvhKind::kD99: q = 1; break;
    default: break;
  }
  std::sort(values.begin(), values.end());
  const std::int64_t pos_num = q * static_cast<std::int64_t>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(pos_num / 100);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = static_cast<double>(pos_num % 100) / 100.0;
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

namespace {

struct RankedDiff {
  double abs;
  int sign;  // +1 or -1
  double rank = 0.0;
};

double normal_tail_two_sided(double delta_over_sigma) {
  // 2*P(Z <= -|delta|/sigma) for the standard normal.
  return std::erfc(delta_over_sigma / std::sqrt(2.0));
}

}  // namespace

double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw LengthMismatch("wilcoxon: paired lists differ in length");

  std::vector<RankedDiff> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d == 0.0) continue;  // classic zero handling: drop
    diffs.push_back({std::abs(d), d > 0.0 ? 1 : -1});
  }
  if (diffs.empty()) return 1.0;  // no evidence of any shift
  const int n = static_cast<int>(diffs.size());
  if (n < 5) throw TooFew("wilcoxon: fewer than 5 nonzero differences");

  std::sort(diffs.begin(), diffs.end(),
            [](const RankedDiff& p, const RankedDiff& q) { return p.abs < q.abs; });
  // Midranks over tied |d| groups; tie sizes feed the variance correction.
  std::vector<int> tie_sizes;
  for (int i = 0; i < n;) {
    int j = i;
    while (j < n && diffs[static_cast<std::size_t>(j)].abs == diffs[static_cast<std::size_t>(i)].abs) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (int t = i; t < j; ++t) diffs[static_cast<std::size_t>(t)].rank = mid;
    tie_sizes.push_back(j - i);
    i = j;
  }

  double w_pos = 0.0, w_neg = 0.0;
  for (const auto& d : diffs) (d.sign > 0 ? w_pos : w_neg) += d.rank;
  const double w_min = std::min(w_pos, w_neg);

  if (n <= 12) {
    // Exact: midranks are halves, so every achievable statistic is an exact
    // double and the <= comparison below is exact too.
    const std::uint32_t patterns = 1u << n;
    std::uint32_t count = 0;
    for (std::uint32_t mask = 0; mask < patterns; ++mask) {
      double t = 0.0;
      for (int i = 0; i < n; ++i)
        if (mask & (1u << i)) t += diffs[static_cast<std::size_t>(i)].rank;
      count += (t <= w_min);
    }
    return std::min(1.0, 2.0 * static_cast<double>(count) / static_cast<double>(patterns));
  }

  const double nd = static_cast<double>(n);
  const double mean = nd * (nd + 1.0) / 4.0;
  double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0;
  for (int t : tie_sizes) {
    const double td = static_cast<double>(t);
    var -= (td * td * td - td) / 48.0;
  }
  const double sigma = std::sqrt(var);
  const double delta = std::max(0.0, mean - w_min - 0.5);  // continuity correction
  return std::min(1.0, normal_tail_two_sided(delta / sigma));
}

IdAnalysis run_id_analysis(const std::vector<UncertaintyScore>& scores,
                           const std::vector<std::pair<std::string, double>>& dose_mse) {
  std::map<std::string, double> mse_by_id(dose_mse.begin(), dose_mse.end());

  // Group scores per method, keeping first-appearance method order.
  std::vector<std::string> method_order;
  std::map<std::string, std::map<std::string, double>> by_method;
  for (const auto& s : scores) {
    if (!by_method.count(s.method)) method_order.push_back(s.method);
    by_method[s.method][s.sample_id] = s.value;
  }

  IdAnalysis out;
  for (const auto& method : method_order) {
    std::vector<double> x, y;
    for (const auto& [id, value] : by_method[method]) {
      const auto it = mse_by_id.find(id);
      if (it == mse_by_id.end()) continue;
      x.push_back(value);
      y.push_back(it->second);
    }
    if (x.empty())
      throw IdMismatch("run_id_analysis: no shared ids between scores and dose errors for " +
                       method);
    out.pearson_by_method.emplace_back(method, pearson(x, y));
  }
  return out;
}

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["config_hash"] = report.config_hash;
  j["seeds"] = {{"dataset", report.dataset_seed}, {"train", report.train_seed}};
  j["counts"] = {{"id_scored", report.n_id_scored}, {"ood_scored", report.n_ood_scored}};

  nlohmann::json pearson_j = nlohmann::json::object();
  for (const auto& [method, res] : report.pearson_by_method)
    pearson_j[method] = {{"r", res.r}, {"p", res.p}};
  j["pearson"] = std::move(pearson_j);

  nlohmann::json ood_j = nlohmann::json::object();
  for (const auto& [method, row] : report.ood_by_method)
    ood_j[method] = {{"z", row.z}, {"overlap", row.overlap}};
  j["ood"] = std::move(ood_j);

  nlohmann::json dvh_j = nlohmann::json::array();
  for (const auto& row : report.dvh_impact)
    dvh_j.push_back({{"structure", row.structure}, {"metric", row.metric}, {"p", row.p}});
  j["dvh_impact"] = std::move(dvh_j);

  // Values reported on the original clinical cohort, kept as context for
  // readers of the synthetic-benchmark numbers. Never asserted against.
  j["clinical_reference"] = {
      {"pearson",
       {{"DE", 0.447},
        {"MCDO(0.1)", 0.599},
        {"MCDO(0.2)", 0.606},
        {"MCDO(0.3)", 0.609},
        {"MCDO(0.4)", 0.613},
        {"MCDO(0.5)", 0.612},
        {"RECON", 0.620}}},
      {"z_score",
       {{"DE", 2.347},
        {"MCDO(0.1)", 0.368},
        {"MCDO(0.2)", 0.877},
        {"MCDO(0.3)", 1.098},
        {"MCDO(0.4)", 1.177},
        {"MCDO(0.5)", 1.124},
        {"RECON", 34.050}}},
      {"overlap",
       {{"DE", 0},
        {"MCDO(0.1)", 9},
        {"MCDO(0.2)", 4},
        {"MCDO(0.3)", 2},
        {"MCDO(0.4)", 2},
        {"MCDO(0.5)", 3},
        {"RECON", 0}}}};
  return j;
}

}  // namespace reconuq

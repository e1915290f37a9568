#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reconuq/errors.hpp"
#include "reconuq/eval.hpp"
#include "reconuq/rng.hpp"

#include "test_util.hpp"

using namespace reconuq;

namespace {

// Brute-force two-sided exact Wilcoxon signed-rank p by enumerating every
// sign pattern over the nonzero differences, midranks for tied magnitudes.
double wilcoxon_brute(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  const int n = static_cast<int>(d.size());
  if (n == 0) return 1.0;

  std::vector<double> mag(d.size());
  std::transform(d.begin(), d.end(), mag.begin(), [](double v) { return std::abs(v); });
  std::vector<int> order(d.size());
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(),
            [&](int x, int y) { return mag[static_cast<std::size_t>(x)] < mag[static_cast<std::size_t>(y)]; });
  std::vector<double> rank(d.size());
  for (int i = 0; i < n;) {
    int j = i;
    while (j < n && mag[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])] ==
                        mag[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])])
      ++j;
    const double mid = 0.5 * ((i + 1) + j);
    for (int k = i; k < j; ++k) rank[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = mid;
    i = j;
  }

  double w_obs = 0.0;
  for (int i = 0; i < n; ++i)
    if (d[static_cast<std::size_t>(i)] > 0) w_obs += rank[static_cast<std::size_t>(i)];
  const double total = std::accumulate(rank.begin(), rank.end(), 0.0);
  const double dev_obs = std::abs(w_obs - 0.5 * total);

  std::int64_t extreme = 0;
  const std::int64_t patterns = std::int64_t(1) << n;
  for (std::int64_t bits = 0; bits < patterns; ++bits) {
    double w = 0.0;
    for (int i = 0; i < n; ++i)
      if (bits & (std::int64_t(1) << i)) w += rank[static_cast<std::size_t>(i)];
    if (std::abs(w - 0.5 * total) >= dev_obs - 1e-12) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(patterns);
}

// Permutation estimate of the two-sided Pearson p-value.
double pearson_perm_p(const std::vector<double>& x, std::vector<double> y, int iters,
                      std::uint64_t seed) {
  const double r_obs = std::abs(pearson(x, y).r);
  Rng rng(seed);
  int extreme = 0;
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = y.size(); i > 1; --i)
      std::swap(y[i - 1], y[rng.below(i)]);
    if (std::abs(pearson(x, y).r) >= r_obs - 1e-12) ++extreme;
  }
  return static_cast<double>(extreme + 1) / static_cast<double>(iters + 1);
}

Volume uniform_dose(double v, int n = 16) {
  Volume d({n, n});
  d.data.setConstant(static_cast<float>(v));
  return d;
}

Mask full_mask(int n = 16) {
  Mask m({n, n});
  m.data.setConstant(1);
  return m;
}

}  // namespace

TEST_CASE("pearson reproduces the textbook example") {
  const std::vector<double> x{1, 2, 3};
  const std::vector<double> y{1, 2, 4};
  const auto res = pearson(x, y);
  CHECK(res.r == doctest::Approx(0.98198).epsilon(1e-4));
  CHECK(res.p > 0.0);
  CHECK(res.p < 1.0);
}

TEST_CASE("pearson is exactly signed one on affine images") {
  std::vector<double> x{0.3, 1.7, 2.2, 5.9, 8.1, 9.4};
  std::vector<double> y;
  for (double v : x) y.push_back(2.5 * v + 1.0);
  CHECK(pearson(x, y).r == doctest::Approx(1.0).epsilon(1e-9));
  for (double& v : y) v = -v;
  CHECK(pearson(x, y).r == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("pearson p-value shrinks with sample size on a strong signal") {
  std::vector<double> x, y;
  for (int i = 0; i < 10; ++i) {
    x.push_back(i);
    y.push_back(2.0 * i + ((i % 2) ? 0.3 : -0.3));
  }
  const double p10 = pearson(x, y).p;
  for (int i = 10; i < 40; ++i) {
    x.push_back(i);
    y.push_back(2.0 * i + ((i % 2) ? 0.3 : -0.3));
  }
  const double p40 = pearson(x, y).p;
  CHECK(p40 < p10);
  CHECK(p10 < 1e-4);
}

TEST_CASE("pearson input contracts") {
  const std::vector<double> x{1, 2, 3};
  const std::vector<double> bad{1, 2};
  CHECK_THROWS_AS(pearson(x, bad), LengthMismatch);
  const std::vector<double> two{1, 2};
  CHECK_THROWS_AS(pearson(two, two), TooFewSamples);
  const std::vector<double> flat{2, 2, 2};
  CHECK_THROWS_AS(pearson(flat, x), DegenerateVariance);
}

TEST_CASE("regularized incomplete beta identities") {
  for (double x : {0.05, 0.3, 0.5, 0.77, 0.99}) {
    CHECK(reg_inc_beta(1.0, 1.0, x) == doctest::Approx(x).epsilon(1e-12));
    for (double a : {0.5, 2.0, 5.5})
      for (double b : {0.5, 3.0}) {
        const double lhs = reg_inc_beta(a, b, x) + reg_inc_beta(b, a, 1.0 - x);
        CHECK(lhs == doctest::Approx(1.0).epsilon(1e-10));
      }
  }
  CHECK(reg_inc_beta(2.0, 2.0, 0.0) == 0.0);
  CHECK(reg_inc_beta(2.0, 2.0, 1.0) == 1.0);
}

TEST_CASE("pearson p matches the t-distribution reference point") {
  // t = 2.228 at 10 degrees of freedom is the classic two-sided 5% quantile.
  const std::int64_t n = 12;
  const double t = 2.228;
  const double r = t / std::sqrt(n - 2 + t * t);
  CHECK(pearson_p_from_r(r, n) == doctest::Approx(0.05).epsilon(2e-3));
}

TEST_CASE("pearson p tracks a permutation oracle") {
  Rng rng(2024);
  std::vector<double> x, y;
  for (int i = 0; i < 10; ++i) {
    const double v = rng.uniform();
    x.push_back(v);
    y.push_back(0.8 * v + 0.6 * rng.uniform());
  }
  const double p_exact = pearson(x, y).p;
  const double p_perm = pearson_perm_p(x, y, 4000, 7);
  CHECK(std::abs(p_exact - p_perm) < 0.03);
}

TEST_CASE("z-score matches the worked example") {
  const std::vector<double> id{0.0, 2.0};  // mean 1, population std 1
  const std::vector<double> ood{35.05, 35.05, 35.05};
  CHECK(z_score(id, ood) == doctest::Approx(34.05).epsilon(1e-12));
}

TEST_CASE("z-score invariances and degeneracies") {
  const std::vector<double> id{1.0, 2.0, 3.0, 4.0};
  const std::vector<double> ood{7.0, 9.0};
  const double base = z_score(id, ood);
  CHECK(base > 0.0);

  // Exact scale invariance: scaling both samples by 4 cancels bitwise.
  std::vector<double> id4, ood4;
  for (double v : id) id4.push_back(4.0 * v);
  for (double v : ood) ood4.push_back(4.0 * v);
  CHECK(z_score(id4, ood4) == base);

  // Translation invariance up to rounding.
  std::vector<double> idt, oodt;
  for (double v : id) idt.push_back(v + 100.0);
  for (double v : ood) oodt.push_back(v + 100.0);
  CHECK(z_score(idt, oodt) == doctest::Approx(base).epsilon(1e-9));

  CHECK(z_score(id, std::vector<double>(id)) == doctest::Approx(0.0).epsilon(1e-12));
  const std::vector<double> flat{5.0, 5.0, 5.0};
  CHECK_THROWS_AS(z_score(flat, ood), DegenerateID);
  const std::vector<double> none;
  CHECK_THROWS_AS(z_score(none, ood), DegenerateID);
  CHECK_THROWS_AS(z_score(id, none), TooFewSamples);
}

TEST_CASE("overlap counts values inside the shared range") {
  const std::vector<double> abc{1.0, 2.0, 3.0};
  const std::vector<double> shifted{2.5, 4.0, 5.0};
  const std::vector<double> far{10.0, 11.0};
  CHECK(overlap_count(abc, abc) == 6);
  CHECK(overlap_count(abc, shifted) == 2);
  CHECK(overlap_count(abc, far) == 0);
  CHECK(overlap_count(far, abc) == 0);
  // Symmetric by construction.
  const std::vector<double> a{0.0, 1.0, 4.0};
  const std::vector<double> b{0.5, 3.0, 9.0};
  CHECK(overlap_count(a, b) == overlap_count(b, a));
  // Touching endpoints are inside the closed interval.
  const std::vector<double> lo{1.0, 2.0};
  const std::vector<double> hi{2.0, 3.0};
  CHECK(overlap_count(lo, hi) == 2);
}

TEST_CASE("dvh metrics on a uniform dose all equal that dose") {
  const Volume d = uniform_dose(54.25);
  const Mask m = full_mask();
  for (DvhKind k : {DvhKind::kDmean, DvhKind::kD2, DvhKind::kD95, DvhKind::kD99})
    CHECK(dvh_metric(d, m, k) == doctest::Approx(54.25).epsilon(1e-12));
}

TEST_CASE("dvh percentiles interpolate linearly") {
  Volume d({10, 10});
  Mask m = full_mask(10);
  for (int i = 0; i < 100; ++i) d.data[i] = static_cast<float>(i + 1);  // 1..100
  // 5th percentile of 1..100 with linear interpolation sits at 5.95 exactly.
  CHECK(dvh_metric(d, m, DvhKind::kD95) == 5.95);
  CHECK(dvh_metric(d, m, DvhKind::kD2) == doctest::Approx(98.02).epsilon(1e-12));
  CHECK(dvh_metric(d, m, DvhKind::kD99) == doctest::Approx(1.99).epsilon(1e-12));
  CHECK(dvh_metric(d, m, DvhKind::kDmean) == doctest::Approx(50.5).epsilon(1e-12));
}

TEST_CASE("dvh cold-to-hot ordering holds on random fields") {
  Rng rng(5);
  Volume d({12, 12});
  Mask m = full_mask(12);
  for (std::int64_t i = 0; i < d.size(); ++i)
    d.data[i] = static_cast<float>(70.0 * rng.uniform());
  const double d99 = dvh_metric(d, m, DvhKind::kD99);
  const double d95 = dvh_metric(d, m, DvhKind::kD95);
  const double d2 = dvh_metric(d, m, DvhKind::kD2);
  CHECK(d99 <= d95);
  CHECK(d95 <= d2);
}

TEST_CASE("dvh metrics require a populated structure") {
  const Volume d = uniform_dose(10.0);
  Mask empty({16, 16});
  CHECK_THROWS_AS(dvh_metric(d, empty, DvhKind::kDmean), EmptyStructure);
  Volume wrong({8, 8});
  CHECK_THROWS_AS(dvh_metric(wrong, full_mask(16), DvhKind::kDmean), ShapeMismatch);
}

TEST_CASE("dvh kind names") {
  CHECK(std::string(dvh_kind_name(DvhKind::kDmean)) == "Dmean");
  CHECK(std::string(dvh_kind_name(DvhKind::kD2)) == "D2");
  CHECK(std::string(dvh_kind_name(DvhKind::kD95)) == "D95");
  CHECK(std::string(dvh_kind_name(DvhKind::kD99)) == "D99");
}

TEST_CASE("wilcoxon matches the hand-ranked five-pair case") {
  const std::vector<double> a{1, 2, 3, 4, 5};
  const std::vector<double> b{2, 4, 6, 8, 10};
  CHECK(wilcoxon_signed_rank(a, b) == doctest::Approx(0.0625).epsilon(1e-12));
}

TEST_CASE("wilcoxon conventions for degenerate input") {
  const std::vector<double> same{3, 3, 3, 3, 3};
  CHECK(wilcoxon_signed_rank(same, same) == 1.0);
  const std::vector<double> a{1, 2, 3};
  const std::vector<double> b{2, 3, 4};
  CHECK_THROWS_AS(wilcoxon_signed_rank(a, b), TooFew);  // 3 nonzero pairs
  const std::vector<double> x{1, 2};
  const std::vector<double> y{1, 2, 3};
  CHECK_THROWS_AS(wilcoxon_signed_rank(x, y), LengthMismatch);
}

TEST_CASE("wilcoxon agrees with brute-force enumeration") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 5 + static_cast<int>(rng.below(6));  // 5..10 pairs
    std::vector<double> a, b;
    bool any = false;
    for (int i = 0; i < n; ++i) {
      // Coarse grid induces frequent magnitude ties.
      const double av = std::round(rng.uniform(-3.0, 3.0) * 2.0) / 2.0;
      const double bv = std::round(rng.uniform(-3.0, 3.0) * 2.0) / 2.0;
      a.push_back(av);
      b.push_back(bv);
      any = any || av != bv;
    }
    if (!any) a[0] += 1.0;  // keep at least one nonzero difference
    int nonzero = 0;
    for (int i = 0; i < n; ++i) nonzero += a[static_cast<std::size_t>(i)] != b[static_cast<std::size_t>(i)];
    if (nonzero < 5) continue;
    const double got = wilcoxon_signed_rank(a, b);
    const double want = wilcoxon_brute(a, b);
    CHECK(got == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("wilcoxon normal approximation is close to exact at the crossover") {
  Rng rng(37);
  for (int n : {12, 13}) {
    std::vector<double> a, b;
    for (int i = 0; i < n; ++i) {
      a.push_back(rng.uniform(0.0, 2.0));
      b.push_back(rng.uniform(0.0, 2.0) + 0.4);
    }
    const double got = wilcoxon_signed_rank(a, b);
    const double brute = wilcoxon_brute(a, b);
    CHECK(std::abs(got - brute) < 0.03);
  }
}

TEST_CASE("id analysis correlates each method against the dose error") {
  std::vector<UncertaintyScore> scores;
  std::vector<std::pair<std::string, double>> mse;
  Rng rng(41);
  for (int i = 0; i < 8; ++i) {
    const std::string id = "p" + std::to_string(i);
    const double err = rng.uniform(0.1, 1.0);
    mse.emplace_back(id, err);
    scores.push_back({id, "RECON", 2.0 * err + 0.01 * rng.uniform(), {}});
    scores.push_back({id, "DE", rng.uniform(), {}});
  }
  const IdAnalysis out = run_id_analysis(scores, mse);
  REQUIRE(out.pearson_by_method.size() == 2);
  const auto& recon = out.pearson_by_method[0].first == "RECON"
                          ? out.pearson_by_method[0]
                          : out.pearson_by_method[1];
  CHECK(recon.second.r > 0.99);

  // Scores for samples missing a dose error are dropped, not correlated.
  scores.push_back({"ghost", "RECON", 1e6, {}});
  const IdAnalysis pruned = run_id_analysis(scores, mse);
  const auto& recon2 = pruned.pearson_by_method[0].first == "RECON"
                           ? pruned.pearson_by_method[0]
                           : pruned.pearson_by_method[1];
  CHECK(recon2.second.r == recon.second.r);

  // A method whose scores share no ids with the dose errors is a wiring bug.
  scores.push_back({"ghost", "LONER", 0.5, {}});
  CHECK_THROWS_AS(run_id_analysis(scores, mse), IdMismatch);
}

TEST_CASE("report serialization carries every summary block") {
  EvalReport rep;
  rep.pearson_by_method.emplace_back("RECON", PearsonResult{0.7, 0.001});
  rep.ood_by_method.emplace_back("RECON", EvalReport::OodRow{8.5, 0});
  rep.dvh_impact.push_back({"tv_high", "D95", 0.03});
  rep.config_hash = "deadbeef";
  rep.dataset_seed = 42;
  rep.train_seed = 0;
  rep.n_id_scored = 12;
  rep.n_ood_scored = 2;
  const auto j = report_to_json(rep);
  CHECK(j.contains("pearson"));
  CHECK(j.contains("ood"));
  CHECK(j.contains("dvh_impact"));
  CHECK(j.contains("clinical_reference"));
  CHECK(j["config_hash"] == "deadbeef");
  CHECK(j["counts"]["id_scored"] == 12);
  CHECK(j["seeds"]["dataset"] == 42);
  CHECK(j["pearson"]["RECON"]["r"] == doctest::Approx(0.7));
  CHECK(j["ood"]["RECON"]["z"] == doctest::Approx(8.5));
}

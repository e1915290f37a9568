#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "reconuq/errors.hpp"
#include "reconuq/rng.hpp"
#include "reconuq/synth.hpp"

#include "test_util.hpp"

using namespace reconuq;

namespace {

// Axis-0 centroid of a mask, in voxels.
double centroid0(const Mask& m) {
  double acc = 0.0;
  long n = 0;
  const int w = m.shape[1];
  for (long i = 0; i < m.size(); ++i)
    if (m.data[i]) {
      acc += static_cast<double>(i / w);
      ++n;
    }
  REQUIRE(n > 0);
  return acc / static_cast<double>(n);
}

bool subset(const Mask& inner, const Mask& outer) {
  for (long i = 0; i < inner.size(); ++i)
    if (inner.data[i] && !outer.data[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("generation is a pure function of (seed, family, index)") {
  const auto spec = testutil::small_spec(21);
  const Sample a = generate_sample(spec, Family::kId, 3);
  const Sample b = generate_sample(spec, Family::kId, 3);
  CHECK(a.id == b.id);
  CHECK((a.ct.data == b.ct.data).all());
  CHECK((a.body.data == b.body.data).all());
  CHECK((a.tv_high.data == b.tv_high.data).all());
  REQUIRE(a.dose.has_value());
  REQUIRE(b.dose.has_value());
  CHECK((a.dose->data == b.dose->data).all());

  const Sample c = generate_sample(spec, Family::kId, 4);
  CHECK_FALSE((a.ct.data == c.ct.data).all());

  auto spec2 = spec;
  spec2.seed = 22;
  const Sample d = generate_sample(spec2, Family::kId, 3);
  CHECK_FALSE((a.ct.data == d.ct.data).all());
}

TEST_CASE("generate yields the requested families with unique ids") {
  const auto spec = testutil::small_spec(5);
  const auto samples = generate(spec);
  REQUIRE(samples.size() == static_cast<std::size_t>(spec.n_id + spec.n_ood));

  std::set<std::string> ids;
  int n_id = 0, n_ood = 0;
  for (const auto& s : samples) {
    ids.insert(s.id);
    if (s.family == Family::kId) {
      ++n_id;
      CHECK(s.dose.has_value());
    } else {
      ++n_ood;
      CHECK_FALSE(s.dose.has_value());
    }
  }
  CHECK(ids.size() == samples.size());
  CHECK(n_id == spec.n_id);
  CHECK(n_ood == spec.n_ood);
}

TEST_CASE("structure, intensity, and prescription invariants hold per sample") {
  const auto spec = testutil::small_spec(9);
  for (const auto& s : generate(spec)) {
    CHECK(subset(s.tv_high, s.tv_low));
    CHECK(subset(s.tv_low, s.body));
    REQUIRE(s.oars.size() >= 3);
    for (const auto& [name, oar] : s.oars) {
      CHECK_FALSE(name.empty());
      CHECK(subset(oar, s.body));
    }
    CHECK(s.rx_high == 70.0);
    CHECK(s.rx_low == 54.25);
    CHECK((s.ct.data >= 0.0f).all());
    CHECK((s.ct.data <= 1.0f).all());
    int tv_count = 0;
    for (long i = 0; i < s.tv_high.size(); ++i) tv_count += s.tv_high.data[i];
    CHECK(tv_count > 0);
  }
}

TEST_CASE("dose contract: 70 on the high target, 0 outside the body, bounded") {
  const auto spec = testutil::small_spec(13);
  const Sample s = generate_sample(spec, Family::kId, 0);
  REQUIRE(s.dose.has_value());
  const auto& d = *s.dose;
  for (long i = 0; i < d.size(); ++i) {
    if (s.tv_high.data[i]) CHECK(d.data[i] == 70.0f);
    if (s.tv_low.data[i]) CHECK(d.data[i] >= 54.25f);
    if (!s.body.data[i]) CHECK(d.data[i] == 0.0f);
    CHECK(d.data[i] >= 0.0f);
    CHECK(d.data[i] <= 70.0f);
  }
}

TEST_CASE("dose decays along a ray leaving the targets") {
  const auto spec = testutil::small_spec(17);
  const Sample s = generate_sample(spec, Family::kId, 1);
  const auto& d = *s.dose;
  const int w = s.ct.shape[1];
  const int cy = static_cast<int>(std::lround(centroid0(s.tv_high)));
  // Walk rightwards from the target centroid row's center of tv_high. The
  // effective depth grows along the ray, so the dose falls up to the ripple
  // of the half-voxel ray sampling.
  double cx = 0.0;
  long n = 0;
  for (int x = 0; x < w; ++x)
    if (s.tv_high.data[cy * w + x]) {
      cx += x;
      ++n;
    }
  REQUIRE(n > 0);
  int x0 = static_cast<int>(std::lround(cx / static_cast<double>(n)));
  bool left_low = false;
  float first = -1.0f, last = -1.0f;
  for (int x = x0; x + 1 < w; ++x) {
    const long i = cy * w + x;
    if (!s.body.data[i + 1]) break;
    if (!s.tv_low.data[i] && !left_low) {
      left_low = true;
      first = d.data[i];
    }
    if (left_low) {
      CHECK(d.data[i + 1] <= d.data[i] + 1.0f);
      last = d.data[i + 1];
    }
  }
  REQUIRE(left_low);  // the ray actually left the low target before the border
  CHECK(last < 0.25f * first);
}

TEST_CASE("dose has no wild jumps between adjacent in-body voxels") {
  const auto spec = testutil::small_spec(23);
  // The falloff slope peaks at rx/(sigma*sqrt(e)) per effective voxel, and one
  // voxel adds at most 1/0.45 effective voxels of depth. Ray divergence and
  // sampling ripple make this a guideline rather than a hard bound (hence the
  // headroom factor); far from the target the exponential crushes divergence.
  // Dose is hard-zeroed outside the body, so only in-body pairs are smooth.
  const double bound = 1.25 * 70.0 / (spec.sigma * std::sqrt(std::exp(1.0))) / 0.45;
  for (const auto& s : generate(spec)) {
    if (!s.dose) continue;
    const auto& d = *s.dose;
    const auto& b = s.body;
    const int h = d.shape[0], w = d.shape[1];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const long i = static_cast<long>(y) * w + x;
        if (!b.data[i]) continue;
        if (x + 1 < w && b.data[i + 1])
          CHECK(std::abs(d.data[i + 1] - d.data[i]) <= bound);
        if (y + 1 < h && b.data[i + w])
          CHECK(std::abs(d.data[i + w] - d.data[i]) <= bound);
      }
  }
}

namespace {

// Hand-built sample: elliptical body of uniform 0.45 tissue with a single
// central ball target, so the effective depth equals geometric distance.
Sample uniform_sample(int extent, double target_r) {
  Sample s;
  s.id = "uniform";
  s.family = Family::kId;
  const std::vector<int> shape{extent, extent};
  s.ct = Volume(shape);
  s.body = Mask(shape);
  s.tv_high = Mask(shape);
  const double c = extent / 2.0 - 0.5;  // voxel-center symmetric
  const double body_r = 0.46 * extent;
  for (int y = 0; y < extent; ++y)
    for (int x = 0; x < extent; ++x) {
      const long i = static_cast<long>(y) * extent + x;
      const double r2 = (y - c) * (y - c) + (x - c) * (x - c);
      if (r2 > body_r * body_r) continue;
      s.body.data[i] = 1;
      s.ct.data[i] = 0.45f;
      if (r2 <= target_r * target_r) s.tv_high.data[i] = 1;
    }
  s.tv_low = s.tv_high;
  return s;
}

}  // namespace

TEST_CASE("uniform tissue reduces the dose to the geometric Gaussian") {
  const double sigma = 6.0, target_r = 3.0;
  const Sample s = uniform_sample(64, target_r);
  const Volume d = analytic_dose(s, sigma);
  const double c = 64 / 2.0 - 0.5;
  // In water-equivalent tissue the depth is the distance past the digitized
  // target surface; the surface position is only known to about a voxel, and
  // the kernel slope tops out at 70/(sigma*sqrt(e)) per voxel.
  const double tol = 1.2 * 70.0 / (sigma * std::sqrt(std::exp(1.0)));
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const long i = static_cast<long>(y) * 64 + x;
      if (!s.body.data[i]) continue;
      const double r = std::hypot(y - c, x - c);
      const double depth = std::max(0.0, r - (target_r + 0.5));
      const double want = 70.0 * std::exp(-depth * depth / (2.0 * sigma * sigma));
      CHECK(std::abs(d.data[i] - want) <= tol);
    }
}

TEST_CASE("dense tissue attenuates the dose behind it and nowhere else") {
  const double sigma = 6.0;
  const Sample base = uniform_sample(64, 3.0);
  Sample slab = base;
  // A dense vertical slab to the right of the target.
  for (int y = 20; y < 44; ++y)
    for (int x = 40; x < 46; ++x) {
      const long i = static_cast<long>(y) * 64 + x;
      if (slab.body.data[i]) slab.ct.data[i] = 0.95f;
    }
  const Volume d0 = analytic_dose(base, sigma);
  const Volume d1 = analytic_dose(slab, sigma);
  int shadowed = 0;
  for (int x = 47; x < 58; ++x) {
    const long i = 31L * 64 + x;  // row through the target center
    if (!base.body.data[i] || d0.data[i] <= 0.01f) continue;
    CHECK(d1.data[i] < d0.data[i]);
    ++shadowed;
  }
  CHECK(shadowed > 3);
  // Rays to the opposite side never cross the slab: bitwise unchanged.
  for (int x = 2; x < 31; ++x) {
    const long i = 31L * 64 + x;
    CHECK(d1.data[i] == d0.data[i]);
  }
}

TEST_CASE("ID and OOD target locations occupy disjoint axis-0 ranges") {
  const auto spec = testutil::small_spec(31);
  const auto samples = generate(spec);
  double id_max = -1e9, ood_min = 1e9;
  for (const auto& s : samples) {
    const double c = centroid0(s.tv_high);
    if (s.family == Family::kId)
      id_max = std::max(id_max, c);
    else
      ood_min = std::min(ood_min, c);
  }
  CHECK(id_max < ood_min);
}

TEST_CASE("squared distance transform matches brute force") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 7, w = 9;
    Mask seeds({h, w});
    int n_seeds = 0;
    for (long i = 0; i < seeds.size(); ++i) {
      seeds.data[i] = rng.bernoulli(0.15) ? 1 : 0;
      n_seeds += seeds.data[i];
    }
    if (n_seeds == 0) seeds.data[rng.below(h * w)] = 1;

    const auto dt = squared_distance_transform(seeds);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double best = 1e18;
        for (int sy = 0; sy < h; ++sy)
          for (int sx = 0; sx < w; ++sx)
            if (seeds.data[sy * w + sx])
              best = std::min(best, double((y - sy) * (y - sy) + (x - sx) * (x - sx)));
        CHECK(dt.data[y * w + x] == best);  // integer-valued, exact in double
      }
  }
}

TEST_CASE("distance transform with no seeds is infinite") {
  Mask seeds({4, 4});
  const auto dt = squared_distance_transform(seeds);
  CHECK((dt.data == std::numeric_limits<double>::infinity()).all());
}

TEST_CASE("analytic_dose requires a target") {
  const auto spec = testutil::small_spec(3);
  Sample s = generate_sample(spec, Family::kId, 0);
  s.tv_high = Mask(s.tv_high.shape);
  s.tv_low = Mask(s.tv_low.shape);
  CHECK_THROWS_AS(analytic_dose(s, spec.sigma), EmptyTarget);
}

TEST_CASE("dataset spec validation") {
  DatasetSpec s;
  s.n_id = 11;
  CHECK_THROWS_AS(s.validate(), SpecInvalid);
  s = DatasetSpec{};
  s.shape = {16, 64};
  CHECK_THROWS_AS(s.validate(), SpecInvalid);
  s = DatasetSpec{};
  s.sigma = 0.0;
  CHECK_THROWS_AS(s.validate(), SpecInvalid);
  CHECK_NOTHROW(DatasetSpec{}.validate());
}

TEST_CASE("samples survive a save/load round trip bitwise") {
  testutil::TempDir tmp;
  const auto spec = testutil::small_spec(41);
  const Sample s = generate_sample(spec, Family::kId, 2);
  save_sample(s, tmp.path / s.id);
  const Sample back = load_sample(tmp.path / s.id);

  CHECK(back.id == s.id);
  CHECK(back.family == s.family);
  CHECK(back.rx_high == s.rx_high);
  CHECK(back.rx_low == s.rx_low);
  CHECK((back.ct.data == s.ct.data).all());
  CHECK(back.ct.spacing == s.ct.spacing);
  CHECK((back.body.data == s.body.data).all());
  CHECK((back.tv_high.data == s.tv_high.data).all());
  CHECK((back.tv_low.data == s.tv_low.data).all());
  REQUIRE(back.oars.size() == s.oars.size());
  for (std::size_t i = 0; i < s.oars.size(); ++i) {
    CHECK(back.oars[i].first == s.oars[i].first);
    CHECK((back.oars[i].second.data == s.oars[i].second.data).all());
  }
  REQUIRE(back.dose.has_value());
  CHECK((back.dose->data == s.dose->data).all());

  const Sample ood = generate_sample(spec, Family::kOod, 0);
  save_sample(ood, tmp.path / ood.id);
  const Sample ood_back = load_sample(tmp.path / ood.id);
  CHECK(ood_back.family == Family::kOod);
  CHECK_FALSE(ood_back.dose.has_value());
}

TEST_CASE("load_dataset returns samples sorted by id") {
  testutil::TempDir tmp;
  const auto spec = testutil::small_spec(43);
  for (const auto& s : generate(spec)) save_sample(s, tmp.path / s.id);
  const auto back = load_dataset(tmp.path);
  REQUIRE(back.size() == static_cast<std::size_t>(spec.n_id + spec.n_ood));
  CHECK(std::is_sorted(back.begin(), back.end(),
                       [](const Sample& a, const Sample& b) { return a.id < b.id; }));
  CHECK_THROWS_AS(load_dataset(tmp.path / "nope"), IoError);
}

#include <doctest.h>

#include <set>
#include <vector>

#include "reconuq/errors.hpp"
#include "reconuq/grid.hpp"
#include "reconuq/synth.hpp"

#include "test_util.hpp"

using namespace reconuq;

namespace {

Volume make_volume(const std::vector<int>& shape, const std::vector<float>& values) {
  Volume v;
  static_cast<Tensor<float>&>(v) = Tensor<float>(shape);
  v.spacing.assign(shape.size(), 1.0f);
  REQUIRE(static_cast<std::size_t>(v.size()) == values.size());
  for (std::size_t i = 0; i < values.size(); ++i) v.data[static_cast<long>(i)] = values[i];
  return v;
}

Mask make_mask(const std::vector<int>& shape, const std::vector<uint8_t>& values) {
  Mask m(shape);
  REQUIRE(static_cast<std::size_t>(m.size()) == values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m.data[static_cast<long>(i)] = values[i];
  return m;
}

}  // namespace

TEST_CASE("masked_mse hand values and exact zero") {
  const auto a = make_volume({2, 2}, {1, 2, 3, 4});
  const auto b = make_volume({2, 2}, {3, 2, 3, 8});
  const auto m = make_mask({2, 2}, {1, 0, 0, 1});
  CHECK(masked_mse(a, b, m) == doctest::Approx((4.0 + 16.0) / 2.0).epsilon(1e-12));
  CHECK(masked_mse(a, a, m) == 0.0);  // identical volumes: exactly zero

  const auto full = make_mask({2, 2}, {1, 1, 1, 1});
  CHECK(masked_mse(a, b, full) == doctest::Approx((4 + 0 + 0 + 16) / 4.0));
}

TEST_CASE("masked_mse error contracts") {
  const auto a = make_volume({2, 2}, {1, 2, 3, 4});
  const auto b = make_volume({4}, {1, 2, 3, 4});
  const auto m = make_mask({2, 2}, {0, 0, 0, 0});
  CHECK_THROWS_AS(masked_mse(a, a, m), EmptyMask);
  const auto m2 = make_mask({2, 2}, {1, 0, 0, 0});
  CHECK_THROWS_AS(masked_mse(a, b, m2), ShapeMismatch);
}

TEST_CASE("extract_patch centers, clamps, and crops consistently") {
  const auto spec = testutil::small_spec();
  const Sample s = generate_sample(spec, Family::kId, 0);

  SUBCASE("interior center is exact") {
    const auto p = extract_patch(s, {16, 16}, {8, 8});
    CHECK(p.origin == std::vector<int>{12, 12});
    CHECK(p.size == std::vector<int>{8, 8});
    CHECK(p.channels.size() == static_cast<std::size_t>(input_channel_count(s)));
    for (const auto& c : p.channels) CHECK(c.shape == std::vector<int>{8, 8});
    CHECK(p.body.shape == std::vector<int>{8, 8});
    REQUIRE(p.dose.has_value());
    // Cropped content matches the source voxel for voxel.
    const auto chans = input_channels(s);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const long src = (12 + y) * 32 + (12 + x);
        const long dst = y * 8 + x;
        CHECK(p.channels[0].data[dst] == chans[0].data[src]);
        CHECK(p.dose->data[dst] == s.dose->data[src]);
        CHECK(p.body.data[dst] == s.body.data[src]);
      }
  }

  SUBCASE("borders clamp instead of padding") {
    CHECK(extract_patch(s, {0, 0}, {8, 8}).origin == std::vector<int>{0, 0});
    CHECK(extract_patch(s, {31, 31}, {8, 8}).origin == std::vector<int>{24, 24});
  }

  SUBCASE("oversized patch throws") {
    CHECK_THROWS_AS(extract_patch(s, {16, 16}, {8, 64}), PatchTooLarge);
    CHECK_THROWS_AS(extract_patch(s, {16, 16}, {0, 8}), PatchTooLarge);
  }
}

TEST_CASE("flip is an involution and mirrors content") {
  const auto spec = testutil::small_spec();
  const Sample s = generate_sample(spec, Family::kId, 1);
  const auto p = extract_patch(s, {16, 16}, {8, 8});

  const auto once = flip(p, {0});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      CHECK(once.channels[0].data[y * 8 + x] == p.channels[0].data[(7 - y) * 8 + x]);

  const auto twice = flip(once, {0});
  CHECK((twice.channels[0].data == p.channels[0].data).all());
  CHECK((twice.body.data == p.body.data).all());

  const auto both = flip(flip(p, {0, 1}), {0, 1});
  CHECK((both.channels[1].data == p.channels[1].data).all());
  REQUIRE(both.dose.has_value());
  CHECK((both.dose->data == p.dose->data).all());
}

TEST_CASE("flip_tensor rejects bad axes") {
  Tensor<float> t({2, 3});
  CHECK_THROWS_AS(flip_tensor(t, std::set<int>{2}), BadAxis);
  CHECK_THROWS_AS(flip_tensor(t, std::set<int>{-1}), BadAxis);
}

TEST_CASE("input channels: masked image plus prescriptions plus OARs") {
  const auto spec = testutil::small_spec();
  const Sample s = generate_sample(spec, Family::kId, 2);
  const auto chans = input_channels(s);
  REQUIRE(chans.size() == 3 + s.oars.size());

  for (long i = 0; i < s.ct.size(); ++i) {
    if (!s.body.data[i]) {
      CHECK(chans[0].data[i] == 0.0f);
    } else {
      CHECK(chans[0].data[i] == s.ct.data[i]);
    }
    CHECK(chans[1].data[i] == (s.tv_high.data[i] ? 1.0f : 0.0f));
    const float lo = static_cast<float>(s.rx_low / s.rx_high);
    CHECK(chans[2].data[i] == (s.tv_low.data[i] ? lo : 0.0f));
    for (std::size_t k = 0; k < s.oars.size(); ++k)
      CHECK(chans[3 + k].data[i] == (s.oars[k].second.data[i] ? 1.0f : 0.0f));
  }
  for (const auto& c : chans) CHECK(c.spacing == s.ct.spacing);
}

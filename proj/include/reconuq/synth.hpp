#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "reconuq/sample.hpp"

namespace reconuq {

struct DatasetSpec {
  int n_id = 60;
  int n_ood = 10;
  std::vector<int> shape = {64, 64};
  std::uint64_t seed = 42;
  double sigma = 6.0;  // dose falloff, in voxels

  void validate() const;  // throws SpecInvalid
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

// Each sample is a pure function of (spec.seed, family, index): regenerating
// with the same spec is bitwise reproducible regardless of call order.
std::vector<Sample> generate(const DatasetSpec& spec);
Sample generate_sample(const DatasetSpec& spec, Family family, int index);

// dose(x) = max over targets t of P_t * exp(-d(x,t)^2 / (2 sigma^2)) inside
// the body, 0 outside; d is the water-equivalent tissue depth from the target
// surface to x, raytraced through the CT along the segment from the target
// centroid (uniform 0.45 tissue makes d the geometric distance). Denser
// tissue between target and voxel therefore attenuates the dose faster.
Volume analytic_dose(const Sample& s, double sigma);

// Exact squared Euclidean distance to the set of seed voxels (separable
// lower-envelope scan). `inf` where the tensor has no seed at all.
Tensor<double> squared_distance_transform(const Mask& seeds);

void save_sample(const Sample& s, const std::filesystem::path& dir);
Sample load_sample(const std::filesystem::path& dir);

// Loads every sample directory under data_dir, sorted by directory name.
std::vector<Sample> load_dataset(const std::filesystem::path& data_dir);

}  // namespace reconuq

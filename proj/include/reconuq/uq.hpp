#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "reconuq/net.hpp"
#include "reconuq/sample.hpp"

namespace reconuq {

struct UncertaintyScore {
  std::string sample_id;
  std::string method;  // "RECON", "MCDO(p)", "DE"
  double value = 0.0;
  std::optional<Volume> aux;  // voxelwise std map for MCDO/DE
};

std::string mcdo_method_name(double drop_p);

struct InferResult {
  Volume dose_hat;  // rx_high-normalized units
  std::optional<Volume> ct_hat;
  int tiles = 0;
};

// Full-volume inference: tiles of size `tile` at 50% overlap (the last tile
// per axis is shifted flush with the border), overlaps averaged uniformly.
InferResult infer_full(const Params& p, const NetConfig& cfg, const Sample& s,
                       const std::vector<int>& tile, Mode mode,
                       std::uint64_t rng_seed);

// Mean over body voxels of the voxelwise population std across passes.
double std_over_passes(const std::vector<Volume>& passes, const Mask& body);

// Body-masked MSE between the CT and its reconstruction, read off the same
// tiled eval forward that yields the dose: one pass per tile, nothing extra.
UncertaintyScore recon_uncertainty(const Params& p, const NetConfig& cfg,
                                   const Sample& s, const std::vector<int>& tile);

UncertaintyScore mcdo_uncertainty(const Params& p, const NetConfig& cfg,
                                  const Sample& s, double drop_p, int n_passes,
                                  std::uint64_t seed, const std::vector<int>& tile);

UncertaintyScore de_uncertainty(const std::vector<Params>& models,
                                const NetConfig& cfg, const Sample& s,
                                const std::vector<int>& tile);

}  // namespace reconuq

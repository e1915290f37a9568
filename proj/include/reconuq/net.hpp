#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "reconuq/grid.hpp"
#include "reconuq/tensor.hpp"

namespace reconuq {

// Dual-decoder dense U-Net: one shared encoder, a dose decoder, and an
// optional input-reconstruction decoder grafted onto the same skips.
struct NetConfig {
  int levels = 3;
  int base_channels = 16;
  int growth = 8;
  int convs_per_block = 2;
  int in_channels = 6;
  double dropout_p = 0.0;
  bool recon_branch = true;

  void validate() const;  // throws ConfigError

  // Channel widths at encoder level l: a block grows its input by
  // convs_per_block * growth concatenated feature maps.
  int enc_in(int l) const { return base_channels << l; }
  int enc_out(int l) const { return enc_in(l) + convs_per_block * growth; }
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);
std::string net_config_hash(const NetConfig& c);

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> value;
};

template <typename S>
struct ParamsT {
  std::vector<NamedTensor<S>> tensors;

  int index_of(std::string_view name) const;
  std::int64_t count() const;
};
using Params = ParamsT<float>;

// He-normal kernels (std = sqrt(2 / fan_in)), zero biases, in a fixed tensor
// order with the recon decoder last: dropping the branch leaves the encoder
// and dose-decoder draws untouched.
Params init(const NetConfig& cfg, std::uint64_t seed);
ParamsT<double> widen(const Params& p);

enum class Mode { kTrain, kEval, kMcDropout };

template <typename S>
struct TapeT;

template <typename S>
struct ForwardOutputT {
  Tensor<S> dose_hat;                // [1, spatial...]
  std::optional<Tensor<S>> ct_hat;   // absent when recon_branch=false
  std::shared_ptr<TapeT<S>> tape;    // retained activations for backward
};
using ForwardOutput = ForwardOutputT<float>;

// x is channel-first [C, spatial...]; spatial extents must be divisible by
// 2^(levels-1). Dropout fires in mc_dropout mode, and in train mode when
// dropout_p > 0; eval is deterministic.
template <typename S>
ForwardOutputT<S> forward_t(const ParamsT<S>& p, const NetConfig& cfg,
                            const Tensor<S>& x, Mode mode, std::uint64_t rng_seed);
ForwardOutput forward(const Params& p, const NetConfig& cfg, const Patch& x,
                      Mode mode, std::uint64_t rng_seed);

// Counts completed forward passes process-wide; the uncertainty-method cost
// contract is asserted against this.
std::uint64_t forward_pass_count();
void reset_forward_pass_count();

// Inverted-dropout factors: 0 with probability p, 1/(1-p) otherwise.
template <typename S>
Tensor<S> dropout_multipliers(const std::vector<int>& shape, double p,
                              std::uint64_t seed);

template <typename S>
struct BatchItemT {
  Tensor<S> x;     // [C, spatial...]
  Tensor<S> dose;  // [1, spatial...], in rx_high-normalized units
};
using BatchItem = BatchItemT<float>;

// Dose target divided by rx_high so both loss terms are O(1); the recon
// target is channel 0 of x (the body-masked CT the net itself consumes).
BatchItem to_batch_item(const Patch& p, double rx_high = 70.0);

template <typename S>
struct LossGradT {
  double loss = 0.0;
  double dose_term = 0.0;
  double recon_term = 0.0;
  ParamsT<S> grads;
};
using LossGrad = LossGradT<float>;

// Mean over the batch of (full-patch dose MSE + full-patch recon MSE, when
// the branch exists). Exact reverse-mode gradients.
template <typename S>
LossGradT<S> loss_and_grad_t(const ParamsT<S>& p, const NetConfig& cfg,
                             const std::vector<BatchItemT<S>>& batch, Mode mode,
                             std::uint64_t rng_seed);
LossGrad loss_and_grad(const Params& p, const NetConfig& cfg,
                       const std::vector<Patch>& batch, std::uint64_t rng_seed);
double loss_only(const Params& p, const NetConfig& cfg,
                 const std::vector<Patch>& batch);

// One UQT1 file per tensor plus manifest.json (names, shapes, config, hash).
void save_params(const Params& p, const NetConfig& cfg,
                 const std::filesystem::path& dir);
Params load_params(const std::filesystem::path& dir, NetConfig* cfg = nullptr);

}  // namespace reconuq

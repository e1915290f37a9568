#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "reconuq/net.hpp"
#include "reconuq/sample.hpp"

namespace reconuq {

struct TrainConfig {
  int epochs = 50;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 4;
  std::vector<int> patch_size = {32, 32};
  int patches_per_patient = 4;  // steps per epoch = ceil(n_train * this / batch)
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamState {
  std::int64_t t = 0;
  std::vector<Tensor<float>> m, v;
};

// Standard Adam with bias correction; moments are lazily shaped on first use.
void adam_step(Params& p, const Params& g, AdamState& s, const TrainConfig& cfg);

struct CvPlan {
  struct Fold {
    std::vector<std::string> train_ids, val_ids, test_ids;
  };
  std::vector<std::string> outer_holdout;
  std::vector<Fold> folds;
};

// Deterministic shuffle by seed; the holdout comes off the top, then fold k
// tests pool[5k..5k+5) and validates on the next block (mod pool size), with
// everything else as training data.
CvPlan make_cv_plan(const std::vector<std::string>& ids, int n_folds, int outer_size,
                    int val_size, int test_size, std::uint64_t seed);

struct History {
  std::vector<double> train_loss;  // per-epoch mean step loss
  std::vector<double> val_loss;    // per-epoch validation loss (NaN-free)
};

// Per step: pick a patient uniformly, center a patch uniformly inside the
// tv_low bounding box dilated by patch_size/4, apply random axis flips, one
// Adam step. Bitwise deterministic for a given cfg.seed.
std::pair<Params, History> train_model(const std::vector<const Sample*>& train,
                                       const std::vector<const Sample*>& val,
                                       const TrainConfig& cfg, const NetConfig& net_cfg);

std::vector<Params> train_ensemble(const std::vector<const Sample*>& train,
                                   const TrainConfig& cfg, const NetConfig& net_cfg,
                                   int n_models, const std::vector<std::uint64_t>& seeds,
                                   int jobs = 1);

}  // namespace reconuq

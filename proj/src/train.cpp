#include "reconuq/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include <nlohmann/json.hpp>

#include "reconuq/errors.hpp"
#include "reconuq/grid.hpp"
#include "reconuq/parallel.hpp"
#include "reconuq/rng.hpp"

namespace reconuq {

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must be in (0,1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must be in (0,1)");
  if (eps < 0.0) throw ConfigError("train.eps must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (patch_size.empty()) throw ConfigError("train.patch_size must be non-empty");
  for (int d : patch_size)
    if (d < 4) throw ConfigError("train.patch_size axes must be >= 4");
  if (patches_per_patient < 1) throw ConfigError("train.patches_per_patient must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"batch_size", c.batch_size},
                     {"patch_size", c.patch_size},
                     {"patches_per_patient", c.patches_per_patient},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.patches_per_patient = j.value("patches_per_patient", c.patches_per_patient);
  c.seed = j.value("seed", c.seed);
}

void adam_step(Params& p, const Params& g, AdamState& s, const TrainConfig& cfg) {
  if (g.tensors.size() != p.tensors.size())
    throw ShapeMismatch("adam_step: param/grad tensor counts differ");
  for (std::size_t i = 0; i < g.tensors.size(); ++i) {
    if (g.tensors[i].value.shape != p.tensors[i].value.shape)
      throw ShapeMismatch("adam_step: shape mismatch at " + p.tensors[i].name);
    if (!g.tensors[i].value.data.isFinite().all())
      throw NonFiniteGradient("adam_step: non-finite gradient in " + g.tensors[i].name);
  }
  if (s.m.empty()) {
    for (const auto& t : p.tensors) {
      s.m.emplace_back(t.value.shape);
      s.v.emplace_back(t.value.shape);
    }
  }

  s.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.t));
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float inv_bc1 = static_cast<float>(1.0 / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float lr = static_cast<float>(cfg.lr), eps = static_cast<float>(cfg.eps);

  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    auto& w = p.tensors[i].value.data;
    const auto& gd = g.tensors[i].value.data;
    auto& m = s.m[i].data;
    auto& v = s.v[i].data;
    m = b1 * m + (1.0f - b1) * gd;
    v = b2 * v + (1.0f - b2) * gd.square();
    w -= lr * (m * inv_bc1) / ((v * inv_bc2).sqrt() + eps);
  }
}

CvPlan make_cv_plan(const std::vector<std::string>& ids, int n_folds, int outer_size,
                    int val_size, int test_size, std::uint64_t seed) {
  const int n = static_cast<int>(ids.size());
  if (n_folds < 1 || outer_size < 0 || val_size < 1 || test_size < 1)
    throw TooFewSamples("make_cv_plan: nonsensical sizes");
  if (n < outer_size + val_size + test_size + 1)
    throw TooFewSamples("make_cv_plan: need at least outer+val+test+1 ids");
  {
    std::set<std::string> uniq(ids.begin(), ids.end());
    if (static_cast<int>(uniq.size()) != n)
      throw TooFewSamples("make_cv_plan: duplicate ids");
  }

  std::vector<std::string> shuffled = ids;
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i)
    std::swap(shuffled[static_cast<std::size_t>(i)],
              shuffled[static_cast<std::size_t>(rng.range(0, i))]);

  CvPlan plan;
  plan.outer_holdout.assign(shuffled.begin(), shuffled.begin() + outer_size);
  const std::vector<std::string> pool(shuffled.begin() + outer_size, shuffled.end());
  const int pn = static_cast<int>(pool.size());
  if (n_folds * test_size > pn)
    throw TooFewSamples("make_cv_plan: test sets would have to reuse ids across folds");

  for (int k = 0; k < n_folds; ++k) {
    CvPlan::Fold fold;
    std::set<int> used;
    for (int j = 0; j < test_size; ++j) {
      const int idx = k * test_size + j;  // consecutive blocks: disjoint across folds
      fold.test_ids.push_back(pool[static_cast<std::size_t>(idx)]);
      used.insert(idx);
    }
    for (int j = 0; j < val_size; ++j) {
      const int idx = (k * test_size + test_size + j) % pn;
      fold.val_ids.push_back(pool[static_cast<std::size_t>(idx)]);
      used.insert(idx);
    }
    if (static_cast<int>(used.size()) != test_size + val_size)
      throw TooFewSamples("make_cv_plan: val wraps into the fold's own test block");
    for (int idx = 0; idx < pn; ++idx)
      if (!used.count(idx)) fold.train_ids.push_back(pool[static_cast<std::size_t>(idx)]);
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

namespace {

struct SampleBox {
  std::vector<int> lo, hi;  // inclusive center-sampling box, pre-dilated
};

SampleBox target_box(const Sample& s, const std::vector<int>& patch) {
  const int rank = static_cast<int>(s.ct.shape.size());
  SampleBox box;
  box.lo.assign(static_cast<std::size_t>(rank), std::numeric_limits<int>::max());
  box.hi.assign(static_cast<std::size_t>(rank), std::numeric_limits<int>::min());
  const auto strides = strides_of(s.ct.shape);
  bool any = false;
  for (std::int64_t i = 0; i < s.tv_low.size(); ++i) {
    if (!s.tv_low.data[i]) continue;
    any = true;
    std::int64_t rem = i;
    for (int a = 0; a < rank; ++a) {
      const int coord = static_cast<int>(rem / strides[a]);
      rem %= strides[a];
      box.lo[a] = std::min(box.lo[a], coord);
      box.hi[a] = std::max(box.hi[a], coord);
    }
  }
  if (!any) throw EmptyTarget("training sample has empty tv_low");
  for (int a = 0; a < rank; ++a) {
    box.lo[a] -= patch[a] / 4;
    box.hi[a] += patch[a] / 4;
  }
  return box;
}

}  // namespace

std::pair<Params, History> train_model(const std::vector<const Sample*>& train,
                                       const std::vector<const Sample*>& val,
                                       const TrainConfig& cfg, const NetConfig& net_cfg) {
  cfg.validate();
  net_cfg.validate();
  if (train.empty()) throw TooFewSamples("train_model: no training samples");
  for (const Sample* s : train)
    if (!s->dose) throw EmptyTarget("train_model: sample " + s->id + " has no dose label");

  Params params = init(net_cfg, mix64(cfg.seed, 1));
  History hist;
  if (cfg.epochs == 0) return {std::move(params), std::move(hist)};

  std::vector<SampleBox> boxes;
  boxes.reserve(train.size());
  for (const Sample* s : train) boxes.push_back(target_box(*s, cfg.patch_size));

  const int n = static_cast<int>(train.size());
  const int steps_per_epoch =
      (n * cfg.patches_per_patient + cfg.batch_size - 1) / cfg.batch_size;
  const int rank = static_cast<int>(cfg.patch_size.size());

  // Deterministic center patches for the validation loss.
  std::vector<Patch> val_patches;
  for (const Sample* s : val) {
    std::vector<int> center(s->ct.shape.size());
    for (std::size_t a = 0; a < center.size(); ++a) center[a] = s->ct.shape[a] / 2;
    val_patches.push_back(extract_patch(*s, center, cfg.patch_size));
  }

  Rng rng(mix64(cfg.seed, 2));
  AdamState adam;
  std::uint64_t step_id = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int step = 0; step < steps_per_epoch; ++step, ++step_id) {
      std::vector<Patch> batch;
      batch.reserve(static_cast<std::size_t>(cfg.batch_size));
      for (int b = 0; b < cfg.batch_size; ++b) {
        const int pi = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
        const Sample& s = *train[static_cast<std::size_t>(pi)];
        const SampleBox& box = boxes[static_cast<std::size_t>(pi)];
        std::vector<int> center(static_cast<std::size_t>(rank));
        for (int a = 0; a < rank; ++a) center[a] = rng.range(box.lo[a], box.hi[a]);
        Patch patch = extract_patch(s, center, cfg.patch_size);
        std::set<int> axes;
        for (int a = 0; a < rank; ++a)
          if (rng.bernoulli(0.5)) axes.insert(a);
        if (!axes.empty()) patch = flip(patch, axes);
        batch.push_back(std::move(patch));
      }
      const LossGrad lg = loss_and_grad(params, net_cfg, batch, mix64(cfg.seed, 3, step_id));
      if (!std::isfinite(lg.loss))
        throw NonFiniteGradient("train_model: non-finite loss at epoch " +
                                std::to_string(epoch));
      adam_step(params, lg.grads, adam, cfg);
      epoch_loss += lg.loss;
    }
    hist.train_loss.push_back(epoch_loss / steps_per_epoch);
    if (!val_patches.empty())
      hist.val_loss.push_back(loss_only(params, net_cfg, val_patches));
  }
  return {std::move(params), std::move(hist)};
}

std::vector<Params> train_ensemble(const std::vector<const Sample*>& train,
                                   const TrainConfig& cfg, const NetConfig& net_cfg,
                                   int n_models, const std::vector<std::uint64_t>& seeds,
                                   int jobs) {
  if (n_models < 1) throw TooFewSamples("train_ensemble: n_models must be >= 1");
  if (static_cast<int>(seeds.size()) != n_models)
    throw LengthMismatch("train_ensemble: need one seed per model");
  {
    std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
    if (static_cast<int>(uniq.size()) != n_models)
      throw DuplicateSeed("train_ensemble: member seeds must be distinct");
  }

  std::vector<Params> models(static_cast<std::size_t>(n_models));
  parallel_for(jobs, n_models, [&](int i) {
    TrainConfig c = cfg;
    c.seed = seeds[static_cast<std::size_t>(i)];
    models[static_cast<std::size_t>(i)] = train_model(train, {}, c, net_cfg).first;
  });
  return models;
}

}  // namespace reconuq

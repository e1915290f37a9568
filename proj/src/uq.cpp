#include "reconuq/uq.hpp"

#include <cmath>
#include <cstdio>

#include "reconuq/errors.hpp"
#include "reconuq/rng.hpp"

namespace reconuq {

std::string mcdo_method_name(double drop_p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "MCDO(%g)", drop_p);
  return buf;
}

namespace {

// Tile origins along one axis: stride tile/2, with the final tile pinned to
// the far border so the whole extent is covered.
std::vector<int> tile_origins(int extent, int tile) {
  if (tile > extent) throw PatchTooLarge("infer_full: tile exceeds volume");
  std::vector<int> origins;
  const int step = std::max(1, tile / 2);
  for (int o = 0;; o += step) {
    if (o + tile >= extent) {
      origins.push_back(extent - tile);
      break;
    }
    origins.push_back(o);
  }
  return origins;
}

Volume voxelwise_std(const std::vector<Volume>& passes) {
  Volume aux(passes.front().shape);
  aux.spacing = passes.front().spacing;
  const double inv_n = 1.0 / static_cast<double>(passes.size());
  for (std::int64_t i = 0; i < aux.size(); ++i) {
    double mean = 0.0, sq = 0.0;
    for (const auto& v : passes) {
      const double x = v.data[i];
      mean += x;
      sq += x * x;
    }
    mean *= inv_n;
    aux.data[i] = static_cast<float>(std::sqrt(std::max(0.0, sq * inv_n - mean * mean)));
  }
  return aux;
}

}  // namespace

InferResult infer_full(const Params& p, const NetConfig& cfg, const Sample& s,
                       const std::vector<int>& tile, Mode mode,
                       std::uint64_t rng_seed) {
  const auto& shape = s.ct.shape;
  if (tile.size() != shape.size())
    throw ShapeMismatch("infer_full: tile rank != volume rank");

  std::vector<std::vector<int>> axis_origins;
  for (std::size_t a = 0; a < shape.size(); ++a)
    axis_origins.push_back(tile_origins(shape[a], tile[a]));

  Volume dose_sum(shape);
  dose_sum.spacing = s.ct.spacing;
  std::optional<Volume> ct_sum;
  if (cfg.recon_branch) {
    ct_sum.emplace(shape);
    ct_sum->spacing = s.ct.spacing;
  }
  Tensor<float> weight(shape);

  const auto strides = strides_of(shape);
  std::vector<std::size_t> which(shape.size(), 0);
  int tiles = 0;
  bool more = true;
  while (more) {
    std::vector<int> origin(shape.size());
    std::vector<int> center(shape.size());
    for (std::size_t a = 0; a < shape.size(); ++a) {
      origin[a] = axis_origins[a][which[a]];
      center[a] = origin[a] + tile[a] / 2;
    }
    const Patch patch = extract_patch(s, center, tile);
    const ForwardOutput fo =
        forward(p, cfg, patch, mode, mix64(rng_seed, static_cast<std::uint64_t>(tiles)));
    ++tiles;

    // Paste the tile back; overlaps collect uniform weights.
    std::vector<int> local(shape.size(), 0);
    const auto tile_shape = tile;
    do {
      std::int64_t flat = 0;
      std::int64_t tflat = 0;
      for (std::size_t a = 0; a < shape.size(); ++a) {
        flat += (origin[a] + local[a]) * strides[a];
        tflat = tflat * tile_shape[a] + local[a];
      }
      dose_sum.data[flat] += fo.dose_hat.data[tflat];
      if (ct_sum) ct_sum->data[flat] += fo.ct_hat->data[tflat];
      weight.data[flat] += 1.0f;
    } while (advance_index(local, tile_shape));

    // Next tile combination.
    more = false;
    for (int a = static_cast<int>(shape.size()) - 1; a >= 0; --a) {
      if (++which[static_cast<std::size_t>(a)] < axis_origins[static_cast<std::size_t>(a)].size()) {
        more = true;
        break;
      }
      which[static_cast<std::size_t>(a)] = 0;
    }
  }

  InferResult r;
  r.tiles = tiles;
  r.dose_hat = std::move(dose_sum);
  for (std::int64_t i = 0; i < r.dose_hat.size(); ++i)
    r.dose_hat.data[i] /= weight.data[i];
  if (ct_sum) {
    for (std::int64_t i = 0; i < ct_sum->size(); ++i)
      ct_sum->data[i] /= weight.data[i];
    r.ct_hat = std::move(ct_sum);
  }
  return r;
}

double std_over_passes(const std::vector<Volume>& passes, const Mask& body) {
  if (passes.empty()) throw EmptyEnsemble("std_over_passes: no passes");
  for (const auto& v : passes) require_same_shape(v, body, "std_over_passes");

  const double inv_n = 1.0 / static_cast<double>(passes.size());
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < body.size(); ++i) {
    if (!body.data[i]) continue;
    double mean = 0.0, sq = 0.0;
    for (const auto& v : passes) {
      const double x = v.data[i];
      mean += x;
      sq += x * x;
    }
    mean *= inv_n;
    const double var = std::max(0.0, sq * inv_n - mean * mean);
    acc += std::sqrt(var);
    ++count;
  }
  if (count == 0) throw EmptyMask("std_over_passes: body mask empty");
  return acc / static_cast<double>(count);
}

UncertaintyScore recon_uncertainty(const Params& p, const NetConfig& cfg,
                                   const Sample& s, const std::vector<int>& tile) {
  if (!cfg.recon_branch)
    throw NoReconBranch("recon_uncertainty: net has no reconstruction branch");
  const InferResult r = infer_full(p, cfg, s, tile, Mode::kEval, 0);

  UncertaintyScore score;
  score.sample_id = s.id;
  score.method = "RECON";
  score.value = masked_mse(s.ct, *r.ct_hat, s.body);
  return score;
}

UncertaintyScore mcdo_uncertainty(const Params& p, const NetConfig& cfg,
                                  const Sample& s, double drop_p, int n_passes,
                                  std::uint64_t seed, const std::vector<int>& tile) {
  if (!(drop_p >= 0.0 && drop_p < 1.0))
    throw BadDropProb("mcdo_uncertainty: drop_p must be in [0,1)");
  if (n_passes < 2) throw TooFewSamples("mcdo_uncertainty: need at least 2 passes");

  NetConfig mc_cfg = cfg;
  mc_cfg.dropout_p = drop_p;

  std::vector<Volume> passes;
  passes.reserve(static_cast<std::size_t>(n_passes));
  for (int k = 0; k < n_passes; ++k) {
    InferResult r = infer_full(p, mc_cfg, s, tile, Mode::kMcDropout,
                               mix64(seed, static_cast<std::uint64_t>(k)));
    passes.push_back(std::move(r.dose_hat));
  }

  UncertaintyScore score;
  score.sample_id = s.id;
  score.method = mcdo_method_name(drop_p);
  score.value = std_over_passes(passes, s.body);
  score.aux = voxelwise_std(passes);
  return score;
}

UncertaintyScore de_uncertainty(const std::vector<Params>& models,
                                const NetConfig& cfg, const Sample& s,
                                const std::vector<int>& tile) {
  if (models.empty()) throw EmptyEnsemble("de_uncertainty: no models");

  std::vector<Volume> passes;
  passes.reserve(models.size());
  for (std::size_t k = 0; k < models.size(); ++k)
    passes.push_back(infer_full(models[k], cfg, s, tile, Mode::kEval, 0).dose_hat);

  UncertaintyScore score;
  score.sample_id = s.id;
  score.method = "DE";
  if (models.size() == 1) {  // std over a single member is 0 by definition
    score.value = 0.0;
    Volume aux(s.ct.shape);
    aux.spacing = s.ct.spacing;
    score.aux = std::move(aux);
    return score;
  }
  score.value = std_over_passes(passes, s.body);
  score.aux = voxelwise_std(passes);
  return score;
}

}  // namespace reconuq

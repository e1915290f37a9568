#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "reconuq/eval.hpp"
#include "reconuq/net.hpp"
#include "reconuq/synth.hpp"
#include "reconuq/train.hpp"

namespace reconuq {

struct CvConfig {
  int n_folds = 11;
  int outer = 3;
  int val = 5;
  int test = 5;
};

struct UqConfig {
  std::vector<double> mcdo_probs = {0.1, 0.2, 0.3, 0.4, 0.5};
  int mcdo_passes = 20;
  int de_models = 20;
  std::vector<int> tile = {32, 32};
};

struct RunConfig {
  DatasetSpec dataset;
  NetConfig net;
  TrainConfig train;
  CvConfig cv;
  UqConfig uq;
  std::string output_dir = "runs/out";
  int jobs = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
// from_json with bad types rethrown as ConfigError.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& json_path);
std::string run_config_hash(const RunConfig& c);

// Applies "a.b.c=value" style overrides onto the config's JSON form.
void apply_override(nlohmann::json& j, const std::string& dotted_key,
                    const std::string& value);

// Pipeline stages. Each stage reads only files produced by earlier stages
// under output_dir, so any stage can be rerun from config.json alone.
void cmd_gen_data(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);      // CV folds (dual + no-recon) + DE ensemble
void cmd_uq(const RunConfig& cfg);         // scores.csv + dose_mse.csv
void cmd_ablation(const RunConfig& cfg);   // branch-impact Wilcoxon: table1.csv
void cmd_eval(const RunConfig& cfg);       // report.json, table2/3.csv, hist_*.csv
void cmd_pipeline(const RunConfig& cfg);   // all of the above in order

// Per-run seeds, all derived from cfg.train.seed. The fold seed is shared by
// the dual-branch and no-recon variants so the ablation pair differs in
// architecture only.
std::uint64_t fold_seed(const RunConfig& cfg, int fold);
std::uint64_t member_seed(const RunConfig& cfg, int member);

}  // namespace reconuq

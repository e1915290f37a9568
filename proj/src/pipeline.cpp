#include "reconuq/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "reconuq/csv.hpp"
#include "reconuq/errors.hpp"
#include "reconuq/grid.hpp"
#include "reconuq/parallel.hpp"
#include "reconuq/rng.hpp"
#include "reconuq/uq.hpp"

namespace reconuq {

using nlohmann::json;
namespace fs = std::filesystem;

void to_json(json& j, const CvConfig& c) {
  j = json{{"n_folds", c.n_folds}, {"outer", c.outer}, {"val", c.val}, {"test", c.test}};
}

void from_json(const json& j, CvConfig& c) {
  c.n_folds = j.value("n_folds", c.n_folds);
  c.outer = j.value("outer", c.outer);
  c.val = j.value("val", c.val);
  c.test = j.value("test", c.test);
}

void to_json(json& j, const UqConfig& c) {
  j = json{{"mcdo_probs", c.mcdo_probs},
           {"mcdo_passes", c.mcdo_passes},
           {"de_models", c.de_models},
           {"tile", c.tile}};
}

void from_json(const json& j, UqConfig& c) {
  c.mcdo_probs = j.value("mcdo_probs", c.mcdo_probs);
  c.mcdo_passes = j.value("mcdo_passes", c.mcdo_passes);
  c.de_models = j.value("de_models", c.de_models);
  c.tile = j.value("tile", c.tile);
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"dataset", c.dataset}, {"net", c.net},
           {"train", c.train},     {"cv", c.cv},
           {"uq", c.uq},           {"output_dir", c.output_dir},
           {"jobs", c.jobs}};
}

void from_json(const json& j, RunConfig& c) {
  if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
  if (j.contains("net")) j.at("net").get_to(c.net);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("cv")) j.at("cv").get_to(c.cv);
  if (j.contains("uq")) j.at("uq").get_to(c.uq);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.jobs = j.value("jobs", c.jobs);
}

void RunConfig::validate() const {
  dataset.validate();
  net.validate();
  train.validate();
  if (cv.n_folds < 1) throw ConfigError("cv.n_folds must be >= 1");
  if (cv.outer < 0) throw ConfigError("cv.outer must be >= 0");
  if (cv.val < 1 || cv.test < 1) throw ConfigError("cv.val and cv.test must be >= 1");
  if (uq.mcdo_passes < 2) throw ConfigError("uq.mcdo_passes must be >= 2");
  if (uq.de_models < 1) throw ConfigError("uq.de_models must be >= 1");
  for (double p : uq.mcdo_probs)
    if (!(p > 0.0 && p < 1.0))
      throw ConfigError("uq.mcdo_probs entries must lie in (0, 1)");
  const int div = 1 << (net.levels - 1);
  if (uq.tile.size() != dataset.shape.size())
    throw ConfigError("uq.tile rank must match dataset.shape");
  for (std::size_t i = 0; i < uq.tile.size(); ++i) {
    if (uq.tile[i] < div || uq.tile[i] % div != 0)
      throw ConfigError("uq.tile axes must be positive multiples of " +
                        std::to_string(div));
    if (uq.tile[i] > dataset.shape[i])
      throw ConfigError("uq.tile must fit inside dataset.shape");
  }
  if (train.patch_size.size() != dataset.shape.size())
    throw ConfigError("train.patch_size rank must match dataset.shape");
  for (std::size_t i = 0; i < train.patch_size.size(); ++i) {
    if (train.patch_size[i] < div || train.patch_size[i] % div != 0)
      throw ConfigError("train.patch_size axes must be positive multiples of " +
                        std::to_string(div));
    if (train.patch_size[i] > dataset.shape[i])
      throw ConfigError("train.patch_size must fit inside dataset.shape");
  }
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

RunConfig parse_run_config(const json& j) {
  try {
    return j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
}

RunConfig load_run_config(const fs::path& json_path) {
  std::ifstream in(json_path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + json_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + json_path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

void apply_override(json& j, const std::string& dotted_key, const std::string& value) {
  if (dotted_key.empty()) throw ConfigError("empty override key");
  try {
    json* cur = &j;
    std::size_t start = 0;
    while (true) {
      const std::size_t dot = dotted_key.find('.', start);
      const std::string part =
          dotted_key.substr(start, dot == std::string::npos ? std::string::npos
                                                            : dot - start);
      if (part.empty())
        throw ConfigError("bad override key '" + dotted_key + "'");
      if (dot == std::string::npos) {
        json v = json::parse(value, nullptr, false);
        (*cur)[part] = v.is_discarded() ? json(value) : std::move(v);
        return;
      }
      cur = &(*cur)[part];
      start = dot + 1;
    }
  } catch (const json::exception& e) {
    throw ConfigError("override '" + dotted_key + "' does not address a field: " +
                      e.what());
  }
}

std::uint64_t fold_seed(const RunConfig& cfg, int fold) {
  return mix64(cfg.train.seed, 0x11, static_cast<std::uint64_t>(fold));
}

std::uint64_t member_seed(const RunConfig& cfg, int member) {
  return mix64(cfg.train.seed, 0x33, static_cast<std::uint64_t>(member));
}

namespace {

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

void write_text_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing " + p.string());
}

std::string read_text_file_or_empty(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return {};
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

void write_run_config(const RunConfig& cfg) {
  write_text_file(fs::path(cfg.output_dir) / "config.json", dump_json(json(cfg)));
}

std::map<std::string, const Sample*> index_by_id(const std::vector<Sample>& all) {
  std::map<std::string, const Sample*> idx;
  for (const auto& s : all) idx[s.id] = &s;
  return idx;
}

const Sample& sample_by_id(const std::map<std::string, const Sample*>& idx,
                           const std::string& id) {
  const auto it = idx.find(id);
  if (it == idx.end()) throw IoError("sample '" + id + "' missing from the dataset");
  return *it->second;
}

std::vector<const Sample*> select_ids(const std::map<std::string, const Sample*>& idx,
                                      const std::vector<std::string>& ids) {
  std::vector<const Sample*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(&sample_by_id(idx, id));
  return out;
}

std::vector<std::string> id_family_ids(const std::vector<Sample>& all) {
  std::vector<std::string> ids;
  for (const auto& s : all)
    if (s.family == Family::kId) ids.push_back(s.id);
  return ids;
}

CvPlan plan_for(const RunConfig& cfg, const std::vector<std::string>& ids) {
  return make_cv_plan(ids, cfg.cv.n_folds, cfg.cv.outer, cfg.cv.val, cfg.cv.test,
                      mix64(cfg.train.seed, 0xC4));
}

void check_channels(const RunConfig& cfg, const Sample& s) {
  if (input_channel_count(s) != cfg.net.in_channels)
    throw ConfigError("net.in_channels = " + std::to_string(cfg.net.in_channels) +
                      " but the dataset provides " +
                      std::to_string(input_channel_count(s)) + " input channels");
}

fs::path fold_dir(const RunConfig& cfg, int k, bool recon) {
  char buf[32];
  std::snprintf(buf, sizeof buf, recon ? "fold_%02d" : "fold_nr_%02d", k);
  return fs::path(cfg.output_dir) / "models" / buf;
}

fs::path member_dir(const RunConfig& cfg, int m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "member_%02d", m);
  return fs::path(cfg.output_dir) / "models" / buf;
}

struct TrainTask {
  fs::path dir;
  NetConfig net;
  TrainConfig tc;
  std::vector<std::string> train_ids, val_ids;
  std::string label;
};

json task_fingerprint(const TrainTask& t, const RunConfig& cfg) {
  json j;
  j["dataset"] = cfg.dataset;
  j["net"] = t.net;
  j["train"] = t.tc;
  j["train_ids"] = t.train_ids;
  j["val_ids"] = t.val_ids;
  return j;
}

void run_train_task(const TrainTask& t, const json& fingerprint,
                    const std::map<std::string, const Sample*>& idx) {
  const auto train = select_ids(idx, t.train_ids);
  const auto val = select_ids(idx, t.val_ids);
  auto [params, hist] = train_model(train, val, t.tc, t.net);
  save_params(params, t.net, t.dir / "params");
  CsvWriter csv({"epoch", "train_loss", "val_loss"});
  for (std::size_t e = 0; e < hist.train_loss.size(); ++e)
    csv.add_row({csv_field(static_cast<std::int64_t>(e + 1)),
                 csv_field(hist.train_loss[e]), csv_field(hist.val_loss[e])});
  csv.save(t.dir / "history.csv");
  // Written last so an interrupted run never looks cached.
  write_text_file(t.dir / "config.json", dump_json(fingerprint));
  const double last_val =
      hist.val_loss.empty() ? std::numeric_limits<double>::quiet_NaN()
                            : hist.val_loss.back();
  std::fprintf(stderr, "[train] %s done (val %.5g)\n", t.label.c_str(), last_val);
}

std::vector<TrainTask> cv_tasks(const RunConfig& cfg, const CvPlan& plan) {
  NetConfig dual = cfg.net;
  dual.recon_branch = true;
  NetConfig single = cfg.net;
  single.recon_branch = false;
  std::vector<TrainTask> tasks;
  for (int k = 0; k < static_cast<int>(plan.folds.size()); ++k) {
    TrainConfig tc = cfg.train;
    tc.seed = fold_seed(cfg, k);
    const auto& f = plan.folds[k];
    char label[32];
    std::snprintf(label, sizeof label, "fold_%02d", k);
    tasks.push_back({fold_dir(cfg, k, true), dual, tc, f.train_ids, f.val_ids, label});
    std::snprintf(label, sizeof label, "fold_nr_%02d", k);
    tasks.push_back(
        {fold_dir(cfg, k, false), single, tc, f.train_ids, f.val_ids, label});
  }
  return tasks;
}

std::vector<TrainTask> de_tasks(const RunConfig& cfg, const CvPlan& plan) {
  NetConfig single = cfg.net;
  single.recon_branch = false;
  const auto& f0 = plan.folds.front();
  std::vector<TrainTask> tasks;
  for (int m = 0; m < cfg.uq.de_models; ++m) {
    TrainConfig tc = cfg.train;
    tc.seed = member_seed(cfg, m);
    char label[32];
    std::snprintf(label, sizeof label, "member_%02d", m);
    tasks.push_back({member_dir(cfg, m), single, tc, f0.train_ids, f0.val_ids, label});
  }
  return tasks;
}

// Trains every task whose run directory does not already hold a completed,
// fingerprint-matching result. Tasks write to disjoint directories, so they
// parallelize without affecting the outputs.
void run_tasks(const RunConfig& cfg, const std::vector<TrainTask>& tasks,
               const std::map<std::string, const Sample*>& idx) {
  std::vector<json> fps;
  fps.reserve(tasks.size());
  for (const auto& t : tasks) fps.push_back(task_fingerprint(t, cfg));
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const bool done = fs::exists(tasks[i].dir / "params" / "manifest.json") &&
                      read_text_file_or_empty(tasks[i].dir / "config.json") ==
                          dump_json(fps[i]);
    if (!done) todo.push_back(i);
  }
  if (todo.size() < tasks.size())
    std::fprintf(stderr, "[train] reusing %zu cached models\n",
                 tasks.size() - todo.size());
  parallel_for(cfg.jobs, todo.size(),
               [&](std::size_t q) { run_train_task(tasks[todo[q]], fps[todo[q]], idx); });
}

Params load_model_checked(const fs::path& dir, const NetConfig& expected) {
  NetConfig got;
  Params p = load_params(dir / "params", &got);
  if (net_config_hash(got) != net_config_hash(expected))
    throw IoError("params under " + dir.string() +
                  " were trained with a different net config; delete or retrain");
  return p;
}

// Test patients of every fold, each paired with the fold whose model scores
// it, sorted by id. The blocks are disjoint by construction.
struct ScoredPatient {
  std::string id;
  const Sample* s = nullptr;
  int fold = 0;
};

std::vector<ScoredPatient> scored_patients(
    const CvPlan& plan, const std::map<std::string, const Sample*>& idx) {
  std::vector<ScoredPatient> out;
  for (int k = 0; k < static_cast<int>(plan.folds.size()); ++k)
    for (const auto& id : plan.folds[k].test_ids)
      out.push_back({id, &sample_by_id(idx, id), k});
  std::sort(out.begin(), out.end(),
            [](const ScoredPatient& a, const ScoredPatient& b) { return a.id < b.id; });
  return out;
}

const Volume& require_dose(const Sample& s) {
  if (!s.dose) throw IoError("sample '" + s.id + "' has no ground-truth dose");
  return *s.dose;
}

Volume physical_dose(const Volume& normalized, const Sample& s) {
  Volume v = normalized;
  v.data *= static_cast<float>(s.rx_high);
  return v;
}

std::string method_tag(const std::string& method) {
  std::string t;
  for (char c : method) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '.')
      t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (!t.empty() && t.back() != '_')
      t += '_';
  }
  while (!t.empty() && t.back() == '_') t.pop_back();
  return t;
}

double to_double(const std::string& field) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(field, &pos);
    if (pos != field.size()) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    throw IoError("bad numeric field '" + field + "'");
  }
}

int require_column(const CsvTable& t, const std::string& name, const char* file) {
  const int c = t.column(name);
  if (c < 0)
    throw IoError(std::string(file) + " is missing the '" + name + "' column");
  return c;
}

}  // namespace

std::string run_config_hash(const RunConfig& c) {
  json j = c;
  // Where results land and how many workers computed them cannot change
  // them, so neither participates in the experiment identity.
  j.erase("output_dir");
  j.erase("jobs");
  return fnv1a_hex(j.dump());
}

void cmd_gen_data(const RunConfig& cfg) {
  cfg.validate();
  const auto samples = generate(cfg.dataset);
  const fs::path data = fs::path(cfg.output_dir) / "data";
  for (const auto& s : samples) save_sample(s, data / s.id);
  write_run_config(cfg);
  std::fprintf(stderr, "[gen-data] wrote %zu samples under %s\n", samples.size(),
               data.c_str());
}

void cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const auto all = load_dataset(fs::path(cfg.output_dir) / "data");
  check_channels(cfg, all.front());
  const auto idx = index_by_id(all);
  const auto plan = plan_for(cfg, id_family_ids(all));
  auto tasks = cv_tasks(cfg, plan);
  auto de = de_tasks(cfg, plan);
  std::move(de.begin(), de.end(), std::back_inserter(tasks));
  run_tasks(cfg, tasks, idx);
  write_run_config(cfg);
}

void cmd_uq(const RunConfig& cfg) {
  cfg.validate();
  const fs::path out = cfg.output_dir;
  const auto all = load_dataset(out / "data");
  check_channels(cfg, all.front());
  const auto idx = index_by_id(all);
  const auto plan = plan_for(cfg, id_family_ids(all));
  const int n_folds = static_cast<int>(plan.folds.size());

  NetConfig dual = cfg.net;
  dual.recon_branch = true;
  NetConfig single = cfg.net;
  single.recon_branch = false;

  std::vector<Params> fold_params(n_folds);
  for (int k = 0; k < n_folds; ++k)
    fold_params[k] = load_model_checked(fold_dir(cfg, k, true), dual);

  const auto scored = scored_patients(plan, idx);
  std::vector<const Sample*> ood;
  for (const auto& s : all)
    if (s.family == Family::kOod) ood.push_back(&s);

  struct Row {
    std::string id;
    Family fam;
    std::string method;
    double value;
  };
  std::vector<Row> rows;
  std::vector<std::pair<std::string, double>> mse_rows;

  // RECON and the dose error both read off one eval forward per patient:
  // ID patients under their own fold's model, OOD under the selected fold 0.
  {
    std::vector<double> recon_id(scored.size()), mse(scored.size());
    parallel_for(cfg.jobs, scored.size(), [&](std::size_t i) {
      const auto& sc = scored[i];
      const auto r = infer_full(fold_params[sc.fold], dual, *sc.s, cfg.uq.tile,
                                Mode::kEval, mix64(cfg.train.seed, 0x55, i));
      recon_id[i] = masked_mse(sc.s->ct, *r.ct_hat, sc.s->body);
      mse[i] = masked_mse(require_dose(*sc.s), physical_dose(r.dose_hat, *sc.s),
                          sc.s->body);
    });
    std::vector<double> recon_ood(ood.size());
    parallel_for(cfg.jobs, ood.size(), [&](std::size_t i) {
      const auto r = infer_full(fold_params[0], dual, *ood[i], cfg.uq.tile,
                                Mode::kEval, mix64(cfg.train.seed, 0x56, i));
      recon_ood[i] = masked_mse(ood[i]->ct, *r.ct_hat, ood[i]->body);
    });
    for (std::size_t i = 0; i < scored.size(); ++i) {
      rows.push_back({scored[i].id, Family::kId, "RECON", recon_id[i]});
      mse_rows.emplace_back(scored[i].id, mse[i]);
    }
    for (std::size_t i = 0; i < ood.size(); ++i)
      rows.push_back({ood[i]->id, Family::kOod, "RECON", recon_ood[i]});
  }

  // MCDO at each probability, always on the fold-0 model.
  for (std::size_t pi = 0; pi < cfg.uq.mcdo_probs.size(); ++pi) {
    const double prob = cfg.uq.mcdo_probs[pi];
    const std::string method = mcdo_method_name(prob);
    const std::uint64_t base = mix64(cfg.train.seed, 0x66, pi);
    std::vector<double> vid(scored.size()), vood(ood.size());
    parallel_for(cfg.jobs, scored.size(), [&](std::size_t i) {
      vid[i] = mcdo_uncertainty(fold_params[0], dual, *scored[i].s, prob,
                                cfg.uq.mcdo_passes, mix64(base, i), cfg.uq.tile)
                   .value;
    });
    parallel_for(cfg.jobs, ood.size(), [&](std::size_t i) {
      vood[i] = mcdo_uncertainty(fold_params[0], dual, *ood[i], prob,
                                 cfg.uq.mcdo_passes, mix64(base, 1u << 20, i),
                                 cfg.uq.tile)
                    .value;
    });
    for (std::size_t i = 0; i < scored.size(); ++i)
      rows.push_back({scored[i].id, Family::kId, method, vid[i]});
    for (std::size_t i = 0; i < ood.size(); ++i)
      rows.push_back({ood[i]->id, Family::kOod, method, vood[i]});
  }

  // DE across the ensemble members.
  {
    std::vector<Params> members(static_cast<std::size_t>(cfg.uq.de_models));
    for (int m = 0; m < cfg.uq.de_models; ++m)
      members[static_cast<std::size_t>(m)] =
          load_model_checked(member_dir(cfg, m), single);
    if (cfg.uq.de_models == 1)
      std::fprintf(stderr,
                   "[uq] warning: de_models=1, the DE spread is identically 0\n");
    std::vector<double> vid(scored.size()), vood(ood.size());
    parallel_for(cfg.jobs, scored.size(), [&](std::size_t i) {
      vid[i] = de_uncertainty(members, single, *scored[i].s, cfg.uq.tile).value;
    });
    parallel_for(cfg.jobs, ood.size(), [&](std::size_t i) {
      vood[i] = de_uncertainty(members, single, *ood[i], cfg.uq.tile).value;
    });
    for (std::size_t i = 0; i < scored.size(); ++i)
      rows.push_back({scored[i].id, Family::kId, "DE", vid[i]});
    for (std::size_t i = 0; i < ood.size(); ++i)
      rows.push_back({ood[i]->id, Family::kOod, "DE", vood[i]});
  }

  CsvWriter sc({"sample_id", "family", "method", "value"});
  for (const auto& r : rows)
    sc.add_row({r.id, family_name(r.fam), r.method, csv_field(r.value)});
  sc.save(out / "scores.csv");

  CsvWriter dm({"sample_id", "mse"});
  for (const auto& [id, v] : mse_rows) dm.add_row({id, csv_field(v)});
  dm.save(out / "dose_mse.csv");
  std::fprintf(stderr, "[uq] scored %zu ID and %zu OOD patients\n", scored.size(),
               ood.size());
}

void cmd_ablation(const RunConfig& cfg) {
  cfg.validate();
  const fs::path out = cfg.output_dir;
  const auto all = load_dataset(out / "data");
  check_channels(cfg, all.front());
  const auto idx = index_by_id(all);
  const auto plan = plan_for(cfg, id_family_ids(all));
  run_tasks(cfg, cv_tasks(cfg, plan), idx);

  NetConfig dual = cfg.net;
  dual.recon_branch = true;
  NetConfig single = cfg.net;
  single.recon_branch = false;
  const int n_folds = static_cast<int>(plan.folds.size());
  std::vector<Params> dual_params(n_folds), single_params(n_folds);
  for (int k = 0; k < n_folds; ++k) {
    dual_params[k] = load_model_checked(fold_dir(cfg, k, true), dual);
    single_params[k] = load_model_checked(fold_dir(cfg, k, false), single);
  }

  const auto scored = scored_patients(plan, idx);

  struct Sm {
    std::string structure;
    DvhKind kind;
  };
  std::vector<Sm> sms = {{"tv_high", DvhKind::kD95},
                         {"tv_high", DvhKind::kD99},
                         {"tv_low", DvhKind::kD95},
                         {"tv_low", DvhKind::kD99}};
  for (const auto& [name, mask] : all.front().oars) {
    (void)mask;
    sms.push_back({name, DvhKind::kDmean});
    sms.push_back({name, DvhKind::kD2});
  }

  struct PatientErrors {
    std::vector<double> dual_err, single_err;  // indexed like sms
  };
  std::vector<PatientErrors> per_patient(scored.size());
  parallel_for(cfg.jobs, scored.size(), [&](std::size_t i) {
    const Sample& s = *scored[i].s;
    const Volume& gt_dose = require_dose(s);
    const auto structure_mask = [&](const std::string& name) -> const Mask& {
      if (name == "tv_high") return s.tv_high;
      if (name == "tv_low") return s.tv_low;
      for (const auto& [n, m] : s.oars)
        if (n == name) return m;
      throw IoError("structure '" + name + "' missing on sample '" + s.id + "'");
    };
    const Volume pred_dual = physical_dose(
        infer_full(dual_params[scored[i].fold], dual, s, cfg.uq.tile, Mode::kEval, 0)
            .dose_hat,
        s);
    const Volume pred_single = physical_dose(
        infer_full(single_params[scored[i].fold], single, s, cfg.uq.tile,
                   Mode::kEval, 0)
            .dose_hat,
        s);
    for (const auto& sm : sms) {
      const Mask& m = structure_mask(sm.structure);
      const double gt = dvh_metric(gt_dose, m, sm.kind);
      per_patient[i].dual_err.push_back(dvh_metric(pred_dual, m, sm.kind) - gt);
      per_patient[i].single_err.push_back(dvh_metric(pred_single, m, sm.kind) - gt);
    }
  });

  CsvWriter detail({"sample_id", "structure", "metric", "dual_err", "single_err"});
  for (std::size_t i = 0; i < scored.size(); ++i)
    for (std::size_t j = 0; j < sms.size(); ++j)
      detail.add_row({scored[i].id, sms[j].structure, dvh_kind_name(sms[j].kind),
                      csv_field(per_patient[i].dual_err[j]),
                      csv_field(per_patient[i].single_err[j])});
  detail.save(out / "dvh_errors.csv");

  // The branch-impact table pairs, per patient, the two variants' errors on
  // the same metric; the control pairs the dual branch against itself and
  // must sit at p = 1 exactly.
  CsvWriter t1({"structure", "metric", "wilcoxon_p"});
  CsvWriter control({"structure", "metric", "wilcoxon_p"});
  for (std::size_t j = 0; j < sms.size(); ++j) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < scored.size(); ++i) {
      a.push_back(per_patient[i].dual_err[j]);
      b.push_back(per_patient[i].single_err[j]);
    }
    t1.add_row({sms[j].structure, dvh_kind_name(sms[j].kind),
                csv_field(wilcoxon_signed_rank(a, b))});
    control.add_row({sms[j].structure, dvh_kind_name(sms[j].kind),
                     csv_field(wilcoxon_signed_rank(a, a))});
  }
  t1.save(out / "table1.csv");
  control.save(out / "ablation_control.csv");
  std::fprintf(stderr, "[ablation] %zu patients, %zu structure/metric rows\n",
               scored.size(), sms.size());
}

void cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  const fs::path out = cfg.output_dir;
  const CsvTable st = read_csv(out / "scores.csv");
  const CsvTable mt = read_csv(out / "dose_mse.csv");
  const CsvTable dt = read_csv(out / "dvh_errors.csv");

  const int sid = require_column(st, "sample_id", "scores.csv");
  const int sfam = require_column(st, "family", "scores.csv");
  const int smeth = require_column(st, "method", "scores.csv");
  const int sval = require_column(st, "value", "scores.csv");
  const int mid = require_column(mt, "sample_id", "dose_mse.csv");
  const int mval = require_column(mt, "mse", "dose_mse.csv");
  const int dstruct = require_column(dt, "structure", "dvh_errors.csv");
  const int dmetric = require_column(dt, "metric", "dvh_errors.csv");
  const int ddual = require_column(dt, "dual_err", "dvh_errors.csv");
  const int dsingle = require_column(dt, "single_err", "dvh_errors.csv");

  std::vector<UncertaintyScore> scores;
  std::vector<std::string> method_order;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_method;
  std::set<std::string> ood_ids;
  for (const auto& row : st.rows) {
    const std::string& method = row[smeth];
    const double v = to_double(row[sval]);
    scores.push_back({row[sid], method, v});
    const auto [it, inserted] = by_method.try_emplace(method);
    if (inserted) method_order.push_back(method);
    if (row[sfam] == family_name(Family::kId)) {
      it->second.first.push_back(v);
    } else if (row[sfam] == family_name(Family::kOod)) {
      it->second.second.push_back(v);
      ood_ids.insert(row[sid]);
    } else {
      throw IoError("unknown family '" + row[sfam] + "' in scores.csv");
    }
  }

  std::vector<std::pair<std::string, double>> mse_rows;
  for (const auto& row : mt.rows) mse_rows.emplace_back(row[mid], to_double(row[mval]));

  EvalReport rep;
  rep.pearson_by_method = run_id_analysis(scores, mse_rows).pearson_by_method;

  for (const auto& method : method_order) {
    const auto& [idv, oodv] = by_method[method];
    EvalReport::OodRow row;
    if (oodv.empty()) {
      std::fprintf(stderr, "[eval] warning: no OOD scores for %s\n", method.c_str());
      row.z = std::numeric_limits<double>::quiet_NaN();
      row.overlap = 0;
    } else {
      try {
        row.z = z_score(idv, oodv);
      } catch (const DegenerateID&) {
        std::fprintf(stderr,
                     "[eval] warning: degenerate ID scores for %s, z undefined\n",
                     method.c_str());
        row.z = std::numeric_limits<double>::quiet_NaN();
      }
      row.overlap = overlap_count(idv, oodv);
    }
    rep.ood_by_method.emplace_back(method, row);
  }

  std::vector<std::pair<std::string, std::string>> sm_order;
  std::map<std::pair<std::string, std::string>,
           std::pair<std::vector<double>, std::vector<double>>>
      sm_map;
  for (const auto& row : dt.rows) {
    const auto key = std::make_pair(row[dstruct], row[dmetric]);
    const auto [it, inserted] = sm_map.try_emplace(key);
    if (inserted) sm_order.push_back(key);
    it->second.first.push_back(to_double(row[ddual]));
    it->second.second.push_back(to_double(row[dsingle]));
  }
  for (const auto& key : sm_order) {
    const auto& [a, b] = sm_map[key];
    rep.dvh_impact.push_back({key.first, key.second, wilcoxon_signed_rank(a, b)});
  }

  rep.config_hash = run_config_hash(cfg);
  rep.dataset_seed = cfg.dataset.seed;
  rep.train_seed = cfg.train.seed;
  rep.n_id_scored = static_cast<int>(mse_rows.size());
  rep.n_ood_scored = static_cast<int>(ood_ids.size());

  CsvWriter t2({"method", "r", "p"});
  for (const auto& [method, pr] : rep.pearson_by_method)
    t2.add_row({method, csv_field(pr.r), csv_field(pr.p)});
  t2.save(out / "table2.csv");

  CsvWriter t3({"method", "z", "overlap"});
  for (const auto& [method, row] : rep.ood_by_method)
    t3.add_row({method, csv_field(row.z),
                csv_field(static_cast<std::int64_t>(row.overlap))});
  t3.save(out / "table3.csv");

  CsvWriter t1({"structure", "metric", "wilcoxon_p"});
  for (const auto& r : rep.dvh_impact)
    t1.add_row({r.structure, r.metric, csv_field(r.p)});
  t1.save(out / "table1.csv");

  for (const auto& method : method_order) {
    CsvWriter h({"value", "family"});
    for (const auto& row : st.rows)
      if (row[smeth] == method) h.add_row({row[sval], row[sfam]});
    h.save(out / ("hist_" + method_tag(method) + ".csv"));
  }

  write_text_file(out / "report.json", dump_json(report_to_json(rep)));
  std::fprintf(stderr, "[eval] wrote %s\n", (out / "report.json").c_str());
}

namespace {

template <typename Fn>
void run_stage(const char* name, Fn&& fn) {
  std::fprintf(stderr, "[pipeline] stage %s\n", name);
  const auto prefixed = [name](const char* what) {
    return std::string("stage ") + name + ": " + what;
  };
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError(prefixed(e.what()));
  } catch (const SpecInvalid& e) {
    throw SpecInvalid(prefixed(e.what()));
  } catch (const NonFiniteGradient& e) {
    throw NonFiniteGradient(prefixed(e.what()));
  } catch (const IoError& e) {
    throw IoError(prefixed(e.what()));
  } catch (const Error& e) {
    throw Error(prefixed(e.what()));
  } catch (const std::exception& e) {
    throw std::runtime_error(prefixed(e.what()));
  }
}

}  // namespace

void cmd_pipeline(const RunConfig& cfg) {
  run_stage("gen-data", [&] { cmd_gen_data(cfg); });
  run_stage("train", [&] { cmd_train(cfg); });
  run_stage("uq", [&] { cmd_uq(cfg); });
  run_stage("ablation", [&] { cmd_ablation(cfg); });
  run_stage("eval", [&] { cmd_eval(cfg); });
}

}  // namespace reconuq

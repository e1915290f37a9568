#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "reconuq/errors.hpp"
#include "reconuq/pipeline.hpp"

namespace {

using nlohmann::json;
using reconuq::ConfigError;
using reconuq::IoError;
using reconuq::RunConfig;

json load_config_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path + " must hold a JSON object");
  return j;
}

std::uint64_t parse_seed(const char* text, const char* origin) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(text, &end, 10);
  if (*text == '\0' || end == nullptr || *end != '\0')
    throw ConfigError(std::string(origin) + " must be an unsigned integer, got '" +
                      text + "'");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reconstruction-based uncertainty workbench for dose prediction"};
  app.require_subcommand(1);

  struct SubSpec {
    const char* name;
    const char* desc;
    void (*fn)(const RunConfig&);
  };
  const SubSpec specs[] = {
      {"gen-data", "Generate the synthetic dataset", reconuq::cmd_gen_data},
      {"train", "Train CV folds (dual and no-recon) plus the DE ensemble",
       reconuq::cmd_train},
      {"uq", "Score all uncertainty methods (scores.csv, dose_mse.csv)",
       reconuq::cmd_uq},
      {"ablation", "Branch-impact DVH comparison (table1.csv)",
       reconuq::cmd_ablation},
      {"eval", "Aggregate statistics (report.json, tables, histograms)",
       reconuq::cmd_eval},
      {"pipeline", "Run every stage in order", reconuq::cmd_pipeline},
  };

  std::string config_path;
  std::string out_dir;
  int jobs = 1;
  std::uint64_t seed = 0;
  for (const auto& spec : specs) {
    auto* sub = app.add_subcommand(spec.name, spec.desc);
    // Unmatched --a.b=c arguments become dotted-path config overrides.
    sub->allow_extras(true);
    sub->add_option("--config", config_path, "JSON run configuration file");
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    sub->add_option("--jobs", jobs, "parallel workers for fold/ensemble/scoring work");
    sub->add_option("--seed", seed, "override both dataset and train seeds");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const SubSpec* chosen = nullptr;
  for (const auto& spec : specs)
    if (sub->get_name() == spec.name) chosen = &spec;

  try {
    json j = json::object();
    if (!config_path.empty()) j = load_config_json(config_path);
    for (const std::string& extra : sub->remaining()) {
      if (extra.rfind("--", 0) != 0)
        throw ConfigError("unrecognized argument '" + extra + "'");
      const std::size_t eq = extra.find('=');
      if (eq == std::string::npos || eq <= 2)
        throw ConfigError("expected --key=value, got '" + extra + "'");
      reconuq::apply_override(j, extra.substr(2, eq - 2), extra.substr(eq + 1));
    }
    if (sub->count("--out")) j["output_dir"] = out_dir;
    if (sub->count("--jobs")) j["jobs"] = jobs;

    RunConfig cfg = reconuq::parse_run_config(j);
    if (sub->count("--seed")) {
      cfg.dataset.seed = seed;
      cfg.train.seed = seed;
    }
    if (const char* env = std::getenv("RECONUQ_SEED")) {
      const std::uint64_t v = parse_seed(env, "RECONUQ_SEED");
      cfg.dataset.seed = v;
      cfg.train.seed = v;
    }

    chosen->fn(cfg);
    return 0;
  } catch (const reconuq::ConfigError& e) {
    std::fprintf(stderr, "reconuq: config error: %s\n", e.what());
    return 2;
  } catch (const reconuq::SpecInvalid& e) {
    std::fprintf(stderr, "reconuq: config error: %s\n", e.what());
    return 2;
  } catch (const reconuq::NonFiniteGradient& e) {
    std::fprintf(stderr, "reconuq: numeric failure: %s\n", e.what());
    return 4;
  } catch (const reconuq::Error& e) {
    std::fprintf(stderr, "reconuq: data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "reconuq: internal error: %s\n", e.what());
    return 5;
  }
}

// cirf: run pipeline stages against a working directory.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cirf/config.hpp"
#include "cirf/container.hpp"
#include "cirf/log.hpp"
#include "cirf/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"cirf pipeline runner"};
  std::string config_path, stage_name = "all", workdir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma;
  std::optional<std::size_t> k;
  std::optional<std::string> center_mode, provider_url, scorer_url, mock_scorer, preset;
  bool csv = false, reseed_empty = false, verbose = false, quiet = false;

  app.add_option("--config", config_path, "pipeline config (JSON)")->required();
  app.add_option("--stage", stage_name, "segment|embed|center|init|train|assign|targets|compress|diagnose|all");
  app.add_option("--workdir", workdir, "artifact directory (CIRF_DIR overrides)");
  app.add_option("--seed", seed);
  app.add_option("--gamma", gamma, "compression threshold");
  app.add_option("--preset", preset, "full|fast|faster");
  app.add_option("--k", k, "codebook size");
  app.add_option("--center-mode", center_mode, "raw|question|mean");
  app.add_option("--provider-url", provider_url);
  app.add_option("--scorer-url", scorer_url);
  app.add_option("--mock-scorer", mock_scorer, "mock score table (JSON)");
  app.add_flag("--reseed-empty", reseed_empty, "move empty codes to the farthest point each epoch");
  app.add_flag("--csv", csv, "also write report.csv");
  app.add_flag("-v,--verbose", verbose);
  app.add_flag("-q,--quiet", quiet);
  CLI11_PARSE(app, argc, argv);

  if (verbose) cirf::log_threshold() = cirf::LogLevel::debug;
  if (quiet) cirf::log_threshold() = cirf::LogLevel::quiet;

  const auto stage = cirf::parse_stage(stage_name);
  if (!stage) {
    std::cerr << "unknown stage '" << stage_name << "'\n";
    return cirf::kExitConfig;
  }

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(cirf::read_file_text(config_path));
  } catch (const std::exception& e) {
    std::cerr << "ConfigInvalid: " << e.what() << "\n";
    return cirf::kExitConfig;
  }
  // Input files named in the config are relative to the config file.
  const auto base = std::filesystem::absolute(config_path).parent_path();
  auto anchor = [&](nlohmann::json& obj, const char* key) {
    if (obj.is_object() && obj.contains(key) && obj[key].is_string()) {
      const std::filesystem::path p = obj[key].get<std::string>();
      if (!p.empty() && p.is_relative()) obj[key] = (base / p).lexically_normal().string();
    }
  };
  if (doc.is_object()) {
    if (doc.contains("paths"))
      for (const char* key : {"corpus", "results", "embedding_store"}) anchor(doc["paths"], key);
    if (doc.contains("scorer")) anchor(doc["scorer"], "mock");
  }
  // Flags are folded into the document so they pass the same validation.
  if (seed) doc["seed"] = *seed;
  if (preset) {
    const auto g = cirf::preset_gamma(*preset);
    if (!g) {
      std::cerr << "ConfigInvalid: unknown preset '" << *preset << "'\n";
      return cirf::kExitConfig;
    }
    doc["gamma"] = *g;
  }
  if (gamma) doc["gamma"] = *gamma;
  if (k) doc["k"] = *k;
  if (center_mode) doc["center_mode"] = *center_mode;
  if (provider_url) doc["provider"]["url"] = *provider_url;
  if (scorer_url) doc["scorer"]["url"] = *scorer_url;
  if (mock_scorer) doc["scorer"]["mock"] = std::filesystem::absolute(*mock_scorer).string();
  if (reseed_empty) doc["reseed_empty"] = true;
  if (csv) doc["csv"] = true;

  const auto v = cirf::validate_config(doc);
  for (const auto& w : v.warnings) cirf::log_warn() << w;
  if (!v.config) {
    for (const auto& msg : v.violations) std::cerr << "ConfigInvalid: " << msg << "\n";
    return cirf::kExitConfig;
  }

  const auto dir = cirf::resolve_workdir(workdir);
  const auto outcome = cirf::run_pipeline(*stage, *v.config, dir);
  for (const auto& line : outcome.summary) std::cout << line << "\n";
  if (outcome.exit_code != cirf::kExitOk) std::cerr << outcome.error << "\n";
  return outcome.exit_code;
}

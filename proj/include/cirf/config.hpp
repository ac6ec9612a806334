#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cirf/embedding.hpp"
#include "cirf/sinkhorn.hpp"
#include "cirf/vq.hpp"

namespace cirf {

struct PipelinePaths {
  std::string corpus = "corpus.jsonl";
  std::string results;          // optional result units file
  std::string embedding_store;  // file-store provider input
  std::string segments = "segments.jsonl";
  std::string embeddings = "embeddings.emb";
  std::string question_embeddings = "questions.emb";
  std::string centered = "centered.emb";
  std::string codebook_init = "codebook.init.cbk";
  std::string codebook = "codebook.cbk";
  std::string assignments = "assignments.asn";
  std::string targets = "targets.jsonl";
  std::string manifest = "manifest.json";
  std::string token_embeddings = "token_embeddings.emb";
  std::string compressed = "targets.compressed.jsonl";
  std::string compression = "compression.json";
  std::string train_log = "train_log.jsonl";
  std::string reports = "report";  // prefix: report.json, report.txt, report.csv
};

struct PipelineConfig {
  PipelinePaths paths;
  std::size_t d_s = 64;
  std::size_t hidden = 64;
  std::size_t d_e = 64;
  std::size_t k = 32;
  double lambda = 0.05;
  int sinkhorn_iterations = 3;
  double beta = 1.0;
  double alpha = 0.01;
  double learning_rate = 1e-4;
  std::size_t batch_size = 128;
  int pretrain_epochs = 30;
  int vq_epochs = 10;
  double grad_clip = 1.0;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  CenterMode center_mode = CenterMode::mean;
  AnchorMethod anchor_method = AnchorMethod::kmeanspp;
  bool straight_through = true;
  bool reseed_empty = false;
  std::string provider_url;
  std::size_t provider_batch_size = 64;
  std::string scorer_url;
  std::string mock_scorer;
  bool csv = false;

  VqTrainConfig vq() const {
    VqTrainConfig c;
    c.beta = beta;
    c.learning_rate = learning_rate;
    c.batch_size = batch_size;
    c.pretrain_epochs = pretrain_epochs;
    c.vq_epochs = vq_epochs;
    c.grad_clip = grad_clip;
    c.seed = seed;
    c.lambda = lambda;
    c.sinkhorn_iterations = sinkhorn_iterations;
    c.hidden = hidden;
    c.code_dim = d_e;
    c.anchor_method = anchor_method;
    c.straight_through = straight_through;
    c.reseed_empty = reseed_empty;
    return c;
  }
};

inline const std::set<std::size_t>& allowed_codebook_sizes() {
  static const std::set<std::size_t> sizes{32, 64, 128, 256};
  return sizes;
}

struct ConfigValidation {
  std::optional<PipelineConfig> config;  // set only when there are no violations
  std::vector<std::string> violations;
  std::vector<std::string> warnings;
};

/// Fills defaults, checks every field and returns all violations at once;
/// nothing is applied when any check fails.
inline ConfigValidation validate_config(const nlohmann::json& doc) {
  ConfigValidation out;
  PipelineConfig c;
  auto& v = out.violations;
  if (!doc.is_object()) {
    v.push_back("config: document must be a JSON object");
    return out;
  }

  auto read = [&](const nlohmann::json& obj, const char* key, auto& target, const std::string& prefix) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return;
    try {
      using T = std::decay_t<decltype(target)>;
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw std::invalid_argument("expected a boolean");
        target = it->template get<bool>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw std::invalid_argument("expected a string");
        target = it->template get<std::string>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw std::invalid_argument("expected an integer");
        const auto raw = it->template get<long long>();
        if (std::is_unsigned_v<T> && raw < 0) throw std::invalid_argument("must not be negative");
        target = static_cast<T>(raw);
      } else {
        if (!it->is_number()) throw std::invalid_argument("expected a number");
        target = it->template get<double>();
      }
    } catch (const std::exception& e) {
      v.push_back(prefix + key + ": " + e.what());
    }
  };

  static const std::set<std::string> known{"paths", "d_s", "hidden", "d_e", "k", "lambda", "sinkhorn_iterations",
                                           "beta", "alpha", "learning_rate", "batch_size", "pretrain_epochs",
                                           "vq_epochs", "grad_clip", "gamma", "seed", "center_mode", "anchor_method",
                                           "straight_through", "reseed_empty", "provider", "scorer", "csv"};
  for (const auto& [key, _] : doc.items())
    if (!known.count(key)) v.push_back(key + ": unknown field");

  long long k_raw = static_cast<long long>(c.k);
  read(doc, "d_s", c.d_s, "");
  read(doc, "hidden", c.hidden, "");
  read(doc, "d_e", c.d_e, "");
  read(doc, "k", k_raw, "");
  read(doc, "lambda", c.lambda, "");
  read(doc, "sinkhorn_iterations", c.sinkhorn_iterations, "");
  read(doc, "beta", c.beta, "");
  read(doc, "alpha", c.alpha, "");
  read(doc, "learning_rate", c.learning_rate, "");
  read(doc, "batch_size", c.batch_size, "");
  read(doc, "pretrain_epochs", c.pretrain_epochs, "");
  read(doc, "vq_epochs", c.vq_epochs, "");
  read(doc, "grad_clip", c.grad_clip, "");
  read(doc, "gamma", c.gamma, "");
  long long seed_raw = 0;
  read(doc, "seed", seed_raw, "");
  read(doc, "straight_through", c.straight_through, "");
  read(doc, "reseed_empty", c.reseed_empty, "");
  read(doc, "csv", c.csv, "");

  std::string mode = "mean", anchors = "kmeans++";
  read(doc, "center_mode", mode, "");
  read(doc, "anchor_method", anchors, "");
  if (auto m = parse_center_mode(mode)) c.center_mode = *m;
  else v.push_back("center_mode: must be raw, question or mean");
  if (anchors == "uniform") c.anchor_method = AnchorMethod::uniform;
  else if (anchors == "kmeans++") c.anchor_method = AnchorMethod::kmeanspp;
  else v.push_back("anchor_method: must be uniform or kmeans++");

  if (auto it = doc.find("provider"); it != doc.end() && it->is_object()) {
    for (const auto& [key, _] : it->items())
      if (key != "url" && key != "batch_size") v.push_back("provider." + key + ": unknown field");
    read(*it, "url", c.provider_url, "provider.");
    read(*it, "batch_size", c.provider_batch_size, "provider.");
  }
  if (auto it = doc.find("scorer"); it != doc.end() && it->is_object()) {
    for (const auto& [key, _] : it->items())
      if (key != "url" && key != "mock") v.push_back("scorer." + key + ": unknown field");
    read(*it, "url", c.scorer_url, "scorer.");
    read(*it, "mock", c.mock_scorer, "scorer.");
  }

  auto& p = c.paths;
  std::vector<std::pair<const char*, std::string*>> path_fields{
      {"corpus", &p.corpus},
      {"results", &p.results},
      {"embedding_store", &p.embedding_store},
      {"segments", &p.segments},
      {"embeddings", &p.embeddings},
      {"question_embeddings", &p.question_embeddings},
      {"centered", &p.centered},
      {"codebook_init", &p.codebook_init},
      {"codebook", &p.codebook},
      {"assignments", &p.assignments},
      {"targets", &p.targets},
      {"manifest", &p.manifest},
      {"token_embeddings", &p.token_embeddings},
      {"compressed", &p.compressed},
      {"compression", &p.compression},
      {"train_log", &p.train_log},
      {"reports", &p.reports}};
  if (auto it = doc.find("paths"); it != doc.end()) {
    if (!it->is_object()) {
      v.push_back("paths: must be an object");
    } else {
      for (const auto& [key, _] : it->items()) {
        bool ok = false;
        for (const auto& [name, _2] : path_fields) ok = ok || key == name;
        if (!ok) v.push_back("paths." + key + ": unknown field");
      }
      for (auto& [name, target] : path_fields) read(*it, name, *target, "paths.");
    }
  }

  auto positive = [&](const char* name, double value) {
    if (!(value > 0.0)) v.push_back(std::string(name) + ": must be positive");
  };
  positive("d_s", static_cast<double>(c.d_s));
  positive("hidden", static_cast<double>(c.hidden));
  positive("d_e", static_cast<double>(c.d_e));
  positive("k", static_cast<double>(k_raw));
  positive("lambda", c.lambda);
  positive("sinkhorn_iterations", c.sinkhorn_iterations);
  positive("beta", c.beta);
  positive("alpha", c.alpha);
  positive("learning_rate", c.learning_rate);
  positive("batch_size", static_cast<double>(c.batch_size));
  positive("grad_clip", c.grad_clip);
  positive("provider.batch_size", static_cast<double>(c.provider_batch_size));
  if (c.pretrain_epochs < 0) v.push_back("pretrain_epochs: must not be negative");
  if (c.vq_epochs < 0) v.push_back("vq_epochs: must not be negative");
  if (!(c.gamma >= 0.0)) v.push_back("gamma: must not be negative");
  if (seed_raw < 0) v.push_back("seed: must not be negative");
  c.seed = static_cast<std::uint64_t>(seed_raw);
  if (k_raw > 0) {
    c.k = static_cast<std::size_t>(k_raw);
    if (!allowed_codebook_sizes().count(c.k))
      out.warnings.push_back("k: " + std::to_string(c.k) + " is outside the usual set {32, 64, 128, 256}");
  }

  std::set<std::string> seen;
  for (const auto& [name, target] : path_fields) {
    if (target->empty()) continue;
    if (!seen.insert(*target).second) v.push_back(std::string("paths.") + name + ": duplicates another path");
  }

  if (v.empty()) out.config = c;
  return out;
}

}  // namespace cirf

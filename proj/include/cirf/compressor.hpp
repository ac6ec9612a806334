#pragma once

// Greedy result-unit pruning: repeatedly drop the unit whose removal raises
// the scorer loss the least, stopping once that increase exceeds gamma.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cirf/container.hpp"
#include "cirf/error.hpp"
#include "cirf/http.hpp"
#include "cirf/sequence.hpp"
#include "cirf/trace.hpp"

namespace cirf {

/// Comma-joined sorted step indices; "" for the empty set.
inline std::string subset_fingerprint(const std::set<int>& kept) {
  std::string out;
  for (const int idx : kept) {
    if (!out.empty()) out += ',';
    out += std::to_string(idx);
  }
  return out;
}

struct ScoreQuery {
  std::string trace_id;
  std::string question;
  std::string rendered_prefix;
  std::string answer;
  std::set<int> kept;  // step indices whose result text is present
};

/// Mean answer-token negative log-likelihood for a target variant.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual double score(const ScoreQuery& query) = 0;
};

/// Fixed table keyed by subset fingerprint. A table may be global or keyed
/// per trace id (per-trace entries win).
class MockScorer final : public Scorer {
 public:
  using Table = std::map<std::string, double>;

  explicit MockScorer(Table global, std::map<std::string, Table> per_trace = {})
      : global_(std::move(global)), per_trace_(std::move(per_trace)) {}

  /// JSON map "idx1,idx2" -> f64; object values are per-trace tables.
  static MockScorer from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorKind::ScorerUnavailable, "mock table must be a JSON object");
    Table global;
    std::map<std::string, Table> per_trace;
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        for (const auto& [k2, v2] : value.items()) per_trace[key][k2] = v2.get<double>();
      } else if (value.is_number()) {
        global[key] = value.get<double>();
      } else {
        throw Error(ErrorKind::ScorerUnavailable, "mock table entry '" + key + "' is not a number");
      }
    }
    return MockScorer(std::move(global), std::move(per_trace));
  }

  static MockScorer from_file(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(read_file_text(path)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::ScorerUnavailable, std::string("mock table unreadable: ") + e.what());
    }
  }

  double score(const ScoreQuery& q) override {
    const std::string fp = subset_fingerprint(q.kept);
    if (auto t = per_trace_.find(q.trace_id); t != per_trace_.end())
      if (auto it = t->second.find(fp); it != t->second.end()) return it->second;
    if (auto it = global_.find(fp); it != global_.end()) return it->second;
    throw Error(ErrorKind::ScorerUnavailable, "mock table has no entry for {" + fp + "} of '" + q.trace_id + "'");
  }

 private:
  Table global_;
  std::map<std::string, Table> per_trace_;
};

class FunctionScorer final : public Scorer {
 public:
  explicit FunctionScorer(std::function<double(const ScoreQuery&)> fn) : fn_(std::move(fn)) {}
  double score(const ScoreQuery& q) override { return fn_(q); }

 private:
  std::function<double(const ScoreQuery&)> fn_;
};

/// POST {url}/score with {"question", "rendered_prefix", "answer"} -> {"nll"}.
class RemoteScorer final : public Scorer {
 public:
  explicit RemoteScorer(std::string url) : url_(std::move(url)) {}

  double score(const ScoreQuery& q) override {
    nlohmann::json body{{"question", q.question}, {"rendered_prefix", q.rendered_prefix}, {"answer", q.answer}};
    auto reply = post_json(url_, "/score", body);
    if (!reply) throw Error(ErrorKind::ScorerUnavailable, "no response from " + url_);
    if (reply->status != 200)
      throw Error(ErrorKind::ScorerUnavailable, "HTTP " + std::to_string(reply->status) + " from " + url_);
    try {
      return nlohmann::json::parse(reply->body).at("nll").get<double>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorKind::ScorerUnavailable, "response lacks a numeric 'nll'");
    }
  }

 private:
  std::string url_;
};

/// Memoizes on (trace_id, kept-subset fingerprint).
class CachingScorer final : public Scorer {
 public:
  explicit CachingScorer(Scorer& inner) : inner_(inner) {}

  double score(const ScoreQuery& q) override {
    auto key = std::make_pair(q.trace_id, subset_fingerprint(q.kept));
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const double v = inner_.score(q);
    cache_.emplace(std::move(key), v);
    return v;
  }

  std::size_t size() const noexcept { return cache_.size(); }

 private:
  Scorer& inner_;
  std::map<std::pair<std::string, std::string>, double> cache_;
};

/// Scores the target with only the results of `kept` present.
inline double score_target(Scorer& scorer, const std::string& question, const SupervisionTarget& target,
                           const std::set<int>& kept, std::size_t k) {
  const SupervisionTarget variant = target.with_results(kept);
  ScoreQuery q{target.trace_id, question, render_prefix(variant, k), target.answer(), kept};
  const double loss = scorer.score(q);
  if (!std::isfinite(loss) || loss < 0.0)
    throw Error(ErrorKind::NonFiniteScore, "score " + std::to_string(loss) + " for '" + target.trace_id + "'");
  return loss;
}

struct Removal {
  int step_index = 0;
  double delta = 0.0;

  bool operator==(const Removal&) const = default;
};

struct CompressionResult {
  std::string trace_id;
  std::set<int> kept_units;
  std::vector<Removal> removal_order;
  double gamma = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t scorer_calls = 0;
};

/// Greedy pruning from C = all non-empty units. Each round evaluates
/// delta(u) = L(C \ {u}) - L(C) for every u in C; the smallest (lowest step on
/// ties) is removed when delta <= gamma, otherwise the search stops.
inline CompressionResult greedy_compress(const SupervisionTarget& target, const std::string& question, Scorer& scorer,
                                         double gamma, std::size_t k) {
  if (!(gamma >= 0.0)) throw Error(ErrorKind::ConfigInvalid, "gamma must be non-negative");
  CompressionResult r;
  r.trace_id = target.trace_id;
  r.gamma = gamma;
  const auto steps = target.result_steps();
  std::set<int> current(steps.begin(), steps.end());

  double loss = score_target(scorer, question, target, current, k);
  ++r.scorer_calls;
  r.initial_loss = loss;
  while (!current.empty()) {
    int best = 0;
    double best_delta = 0.0, best_loss = 0.0;
    bool have = false;
    for (const int u : current) {  // ascending, so strict < keeps the lowest step on ties
      std::set<int> without = current;
      without.erase(u);
      const double l = score_target(scorer, question, target, without, k);
      ++r.scorer_calls;
      const double delta = l - loss;
      if (!have || delta < best_delta) {
        have = true;
        best = u;
        best_delta = delta;
        best_loss = l;
      }
    }
    if (best_delta > gamma) break;
    current.erase(best);
    r.removal_order.push_back({best, best_delta});
    loss = best_loss;
  }
  r.kept_units = std::move(current);
  r.final_loss = loss;
  return r;
}

struct CompressionPreset {
  const char* name;
  double gamma;
};

inline constexpr CompressionPreset kCompressionPresets[] = {{"full", 0.0}, {"fast", 0.1}, {"faster", 0.2}};

inline std::optional<double> preset_gamma(std::string_view name) {
  for (const auto& p : kCompressionPresets)
    if (name == p.name) return p.gamma;
  return std::nullopt;
}

struct CompressionFailure {
  std::string trace_id;
  std::string message;
};

struct CorpusCompression {
  std::vector<CompressionResult> results;  // successful traces, corpus order
  std::vector<SupervisionTarget> targets;  // compressed where successful, original otherwise
  std::vector<CompressionFailure> errors;
  std::size_t total_units = 0;
  std::size_t kept_units = 0;
  double kept_fraction = 1.0;
  double mean_removed = 0.0;
};

/// Runs greedy_compress per trace behind a score cache; a failing trace is
/// recorded in the error ledger and left uncompressed.
inline CorpusCompression compress_corpus(const TraceDataset& dataset, const std::vector<SupervisionTarget>& targets,
                                         Scorer& scorer, double gamma, std::size_t k) {
  std::map<std::string, const ReasoningTrace*> by_id;
  for (const auto& t : dataset.traces) by_id[t.trace_id] = &t;
  CachingScorer cached(scorer);
  CorpusCompression out;
  std::size_t removed = 0;
  for (const auto& target : targets) {
    auto it = by_id.find(target.trace_id);
    if (it == by_id.end()) {
      out.errors.push_back({target.trace_id, "UnknownTraceId: target without a trace"});
      out.targets.push_back(target);
      continue;
    }
    try {
      CompressionResult r = greedy_compress(target, it->second->question, cached, gamma, k);
      out.total_units += r.kept_units.size() + r.removal_order.size();
      out.kept_units += r.kept_units.size();
      removed += r.removal_order.size();
      out.targets.push_back(target.with_results(r.kept_units));
      out.results.push_back(std::move(r));
    } catch (const Error& e) {
      out.errors.push_back({target.trace_id, e.what()});
      out.targets.push_back(target);
    }
  }
  if (out.total_units > 0)
    out.kept_fraction = static_cast<double>(out.kept_units) / static_cast<double>(out.total_units);
  if (!out.results.empty()) out.mean_removed = static_cast<double>(removed) / static_cast<double>(out.results.size());
  return out;
}

inline nlohmann::json compression_to_json(const CorpusCompression& c) {
  nlohmann::json traces = nlohmann::json::array();
  for (const auto& r : c.results) {
    nlohmann::json removals = nlohmann::json::array();
    for (const auto& rm : r.removal_order) removals.push_back({{"step", rm.step_index}, {"delta", rm.delta}});
    traces.push_back({{"id", r.trace_id},
                      {"kept", std::vector<int>(r.kept_units.begin(), r.kept_units.end())},
                      {"removed", std::move(removals)},
                      {"initial_loss", r.initial_loss},
                      {"final_loss", r.final_loss}});
  }
  nlohmann::json errors = nlohmann::json::array();
  for (const auto& e : c.errors) errors.push_back({{"id", e.trace_id}, {"error", e.message}});
  return {{"traces", std::move(traces)},
          {"errors", std::move(errors)},
          {"total_units", c.total_units},
          {"kept_units", c.kept_units},
          {"kept_fraction", c.kept_fraction},
          {"mean_removed", c.mean_removed}};
}

}  // namespace cirf

#pragma once

// Stage orchestration: each stage reads its prerequisites from the working
// directory, writes its artifacts and returns one key=value summary line.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cirf/compressor.hpp"
#include "cirf/config.hpp"
#include "cirf/diagnostics.hpp"
#include "cirf/embedding.hpp"
#include "cirf/error.hpp"
#include "cirf/log.hpp"
#include "cirf/sequence.hpp"
#include "cirf/sinkhorn.hpp"
#include "cirf/trace.hpp"
#include "cirf/vq.hpp"

namespace cirf {

enum class Stage { segment, embed, center, init, train, assign, targets, compress, diagnose, all };

inline constexpr std::pair<Stage, std::string_view> kStageNames[] = {
    {Stage::segment, "segment"}, {Stage::embed, "embed"},     {Stage::center, "center"},
    {Stage::init, "init"},       {Stage::train, "train"},     {Stage::assign, "assign"},
    {Stage::targets, "targets"}, {Stage::compress, "compress"}, {Stage::diagnose, "diagnose"},
    {Stage::all, "all"}};

inline std::string_view to_string(Stage s) {
  for (const auto& [stage, name] : kStageNames)
    if (stage == s) return name;
  return "?";
}

inline std::optional<Stage> parse_stage(std::string_view name) {
  for (const auto& [stage, n] : kStageNames)
    if (n == name) return stage;
  return std::nullopt;
}

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitMissingPrerequisite = 3,
  kExitExternal = 4,
  kExitNumeric = 5
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigInvalid: return kExitConfig;
    case ErrorKind::MissingPrerequisite: return kExitMissingPrerequisite;
    case ErrorKind::ProviderUnavailable:
    case ErrorKind::ScorerUnavailable: return kExitExternal;
    case ErrorKind::NonFiniteLoss:
    case ErrorKind::NonFiniteInput:
    case ErrorKind::NumericalUnderflow:
    case ErrorKind::NonFiniteScore:
    case ErrorKind::ZeroNormCode: return kExitNumeric;
    default: return kExitFailure;
  }
}

/// Exclusive `.cirf.lock` in the working directory, removed on destruction.
class ArtifactLock {
 public:
  explicit ArtifactLock(const std::filesystem::path& dir) : path_(dir / ".cirf.lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw Error(ErrorKind::Io, "working directory is locked (" + path_.string() + ")");
    std::fclose(f);
  }
  ~ArtifactLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  ArtifactLock(const ArtifactLock&) = delete;
  ArtifactLock& operator=(const ArtifactLock&) = delete;

 private:
  std::filesystem::path path_;
};

class Pipeline {
 public:
  Pipeline(PipelineConfig config, std::filesystem::path workdir)
      : cfg_(std::move(config)), dir_(std::move(workdir)) {}

  const PipelineConfig& config() const noexcept { return cfg_; }

  std::filesystem::path path(const std::string& p) const {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : dir_ / fp;
  }

  bool has_scorer() const { return !cfg_.scorer_url.empty() || !cfg_.mock_scorer.empty(); }

  /// Runs one stage (or all of them), appending a summary line per stage.
  void run(Stage stage, std::vector<std::string>& out) {
    switch (stage) {
      case Stage::segment: out.push_back(segment()); return;
      case Stage::embed: out.push_back(embed()); return;
      case Stage::center: out.push_back(center()); return;
      case Stage::init: out.push_back(init()); return;
      case Stage::train: out.push_back(train()); return;
      case Stage::assign: out.push_back(assign()); return;
      case Stage::targets: out.push_back(targets()); return;
      case Stage::compress: out.push_back(compress()); return;
      case Stage::diagnose: out.push_back(diagnose()); return;
      case Stage::all: break;
    }
    for (Stage s : {Stage::segment, Stage::embed, Stage::center, Stage::init, Stage::train, Stage::assign,
                    Stage::targets, Stage::compress, Stage::diagnose}) {
      if (s == Stage::compress && !has_scorer()) {
        out.push_back("stage=compress skipped=no_scorer");
        continue;
      }
      run(s, out);
    }
  }

  std::vector<std::string> run(Stage stage) {
    std::vector<std::string> out;
    run(stage, out);
    return out;
  }

  std::string segment() {
    const auto corpus = require(cfg_.paths.corpus, "corpus");
    TraceDataset ds = load_dataset(corpus);
    if (!cfg_.paths.results.empty()) ingest_result_units(require(cfg_.paths.results, "results"), ds);
    write_dataset(ds, path(cfg_.paths.segments));
    std::ostringstream s;
    s << "stage=segment traces=" << ds.traces.size() << " rejected=" << ds.rejected_count
      << " segments=" << ds.segment_count();
    return s.str();
  }

  std::string embed() {
    const TraceDataset ds = segments();
    std::unique_ptr<EmbeddingProvider> provider;
    if (!cfg_.provider_url.empty()) {
      provider = std::make_unique<RemoteProvider>(cfg_.provider_url, cfg_.d_s, cfg_.provider_batch_size);
    } else {
      if (cfg_.paths.embedding_store.empty())
        throw Error(ErrorKind::MissingPrerequisite, "no embedding provider configured (provider.url or paths.embedding_store)");
      provider = std::make_unique<FileStoreProvider>(require(cfg_.paths.embedding_store, "embedding store"), cfg_.d_s);
    }
    const EmbeddingMatrix rows = fetch_embeddings(ds, *provider);
    write_embedding_file(rows, path(cfg_.paths.embeddings));
    std::ostringstream s;
    s << "stage=embed rows=" << rows.rows.rows() << " dim=" << rows.dim;
    if (cfg_.center_mode == CenterMode::question) {
      const EmbeddingMatrix q = fetch_question_embeddings(ds, *provider);
      write_embedding_file(q, path(cfg_.paths.question_embeddings));
      s << " question_rows=" << q.rows.rows();
    }
    return s.str();
  }

  std::string center() {
    const TraceDataset ds = segments();
    const EmbeddingMatrix raw = read_embedding_file(require(cfg_.paths.embeddings, "embeddings"));
    std::optional<EmbeddingMatrix> questions;
    if (cfg_.center_mode == CenterMode::question)
      questions = read_embedding_file(require(cfg_.paths.question_embeddings, "question embeddings"));
    const EmbeddingMatrix centered = apply_center_mode(cfg_.center_mode, raw, ds, questions ? &*questions : nullptr);
    write_embedding_file(centered, path(cfg_.paths.centered));
    const auto [points, keys] = ordered_points(centered, ds);
    std::ostringstream s;
    s << "stage=center mode=" << to_string(cfg_.center_mode) << " rows=" << points.rows()
      << " bias_share=" << (points.rows() ? bias_share(points) : 0.0);
    return s.str();
  }

  std::string init() {
    const auto [points, keys] = centered_points();
    check_dims(points);
    const VqTrainConfig vc = cfg_.vq();
    std::vector<double> losses;
    const Autoencoder ae = pretrain_autoencoder(points, vc, &losses);
    auto [codebook, assignment] = init_codebook(ae.encoder, points, cfg_.k, vc);
    const auto usage = usage_stats(assignment.hard, cfg_.k);
    write_codebook_file({VqModel{ae.encoder, ae.decoder, std::move(codebook)}, cfg_.alpha},
                        path(cfg_.paths.codebook_init));
    std::ostringstream s;
    s << "stage=init k=" << cfg_.k << " pretrain_loss=" << (losses.empty() ? 0.0 : losses.back())
      << " used=" << usage.used_fraction << " min_code_count=" << usage.min_code_count
      << " log_domain=" << assignment.log_domain;
    return s.str();
  }

  std::string train() {
    const auto [points, keys] = centered_points();
    check_dims(points);
    CodebookArtifact init = read_codebook_file(require(cfg_.paths.codebook_init, "initial codebook"));
    if (init.model.codebook.k() != cfg_.k)
      throw Error(ErrorKind::ConfigInvalid, "initial codebook has K=" + std::to_string(init.model.codebook.k()) +
                                                 ", config asks for " + std::to_string(cfg_.k));
    VqTrainResult r = train_vq(points, std::move(init.model), cfg_.vq());
    write_codebook_file({r.model, cfg_.alpha}, path(cfg_.paths.codebook));
    std::string log;
    for (const auto& e : r.epochs) {
      nlohmann::json j{{"epoch", e.epoch},
                       {"reconstruction", e.loss.reconstruction},
                       {"codebook", e.loss.codebook},
                       {"commitment", e.loss.commitment},
                       {"total", e.loss.total},
                       {"empty_codes", e.empty_codes}};
      log += j.dump() + "\n";
    }
    write_file_text(path(cfg_.paths.train_log), log);
    std::ostringstream s;
    s << "stage=train epochs=" << r.epochs.size()
      << " final_loss=" << (r.epochs.empty() ? 0.0 : r.epochs.back().loss.total);
    return s.str();
  }

  std::string assign() {
    const auto [points, keys] = centered_points();
    const CodebookArtifact art = read_codebook_file(require(cfg_.paths.codebook, "codebook"));
    const VqTrainConfig vc = cfg_.vq();
    AssignmentFile file{balanced_reassign(encode_all(art.model.encoder, points), art.model.codebook, vc), keys};
    write_assignment_file(file, path(cfg_.paths.assignments));
    const auto usage = usage_stats(file.assignment.hard, art.model.codebook.k());
    std::ostringstream s;
    s << "stage=assign rows=" << keys.size() << " used=" << usage.used_fraction
      << " min_code_count=" << usage.min_code_count << " log_domain=" << file.assignment.log_domain;
    return s.str();
  }

  std::string targets() {
    const TraceDataset ds = segments();
    const CodebookArtifact art = read_codebook_file(require(cfg_.paths.codebook, "codebook"));
    const auto labels = labels_by_trace(ds);
    std::vector<SupervisionTarget> out;
    double functional = 0.0;
    for (const auto& t : ds.traces) {
      out.push_back(build_target(t, labels.at(t.trace_id)));
      functional += static_cast<double>(functional_count(out.back()));
    }
    write_targets(out, art.model.codebook.k(), path(cfg_.paths.targets));
    VocabularyManifest m = make_manifest(art.model.codebook, cfg_.alpha);
    emit_vocabulary_manifest(m, path(cfg_.paths.manifest), cfg_.paths.token_embeddings);
    std::ostringstream s;
    s << "stage=targets traces=" << out.size()
      << " mean_functional_tokens=" << (out.empty() ? 0.0 : functional / static_cast<double>(out.size()))
      << " vocabulary=" << m.k() + m.boundary_tokens.size();
    return s.str();
  }

  std::string compress() {
    if (!has_scorer()) throw Error(ErrorKind::MissingPrerequisite, "no scorer configured (scorer.url or scorer.mock)");
    const TraceDataset ds = segments();
    const auto tgts = read_targets(require(cfg_.paths.targets, "targets"));
    const VocabularyManifest m = read_vocabulary_manifest(require(cfg_.paths.manifest, "manifest"));
    std::unique_ptr<Scorer> scorer;
    if (!cfg_.scorer_url.empty()) scorer = std::make_unique<RemoteScorer>(cfg_.scorer_url);
    else scorer = std::make_unique<MockScorer>(MockScorer::from_file(require(cfg_.mock_scorer, "mock scorer table")));
    const CorpusCompression c = compress_corpus(ds, tgts, *scorer, cfg_.gamma, m.k());
    write_targets(c.targets, m.k(), path(cfg_.paths.compressed));
    write_file_text(path(cfg_.paths.compression), compression_to_json(c).dump(2) + "\n");
    if (!c.errors.empty() && c.errors.size() == tgts.size() && !tgts.empty())
      throw Error(ErrorKind::ScorerUnavailable, "every trace failed to score: " + c.errors.front().message);
    std::ostringstream s;
    s << "stage=compress gamma=" << cfg_.gamma << " kept_fraction=" << c.kept_fraction
      << " mean_removed=" << c.mean_removed << " errors=" << c.errors.size();
    return s.str();
  }

  std::string diagnose() {
    const TraceDataset ds = segments();
    const CodebookArtifact art = read_codebook_file(require(cfg_.paths.codebook, "codebook"));
    const VocabularyManifest m = read_vocabulary_manifest(require(cfg_.paths.manifest, "manifest"));
    const auto tgts = read_targets(require(cfg_.paths.targets, "targets"));
    const AssignmentFile asn = read_assignment_file(require(cfg_.paths.assignments, "assignments"));

    DiagnosticsReport r;
    r.center_mode = std::string(to_string(cfg_.center_mode));
    r.k = m.k();
    r.geometry.emplace_back("token_embeddings", geometry_report(m.initial_embeddings));
    r.geometry.emplace_back("codebook", geometry_report(art.model.codebook.vectors));
    std::vector<int> labels;
    for (const auto& [id, codes] : labels_in_order(ds, asn)) labels.insert(labels.end(), codes.begin(), codes.end());
    r.clustering = cluster_report(ds, labels, m.k());
    double functional = 0.0;
    for (const auto& t : tgts) functional += static_cast<double>(functional_count(t));
    r.mean_functional_tokens = tgts.empty() ? 0.0 : functional / static_cast<double>(tgts.size());

    const std::string prefix = path(cfg_.paths.reports).string();
    write_file_text(prefix + ".json", report_to_json(r).dump(2) + "\n");
    write_file_text(prefix + ".txt", report_to_text(r));
    if (cfg_.csv) write_file_text(prefix + ".csv", report_to_csv(r));
    std::ostringstream s;
    s << "stage=diagnose used=" << r.clustering.used_fraction << " ami=" << r.clustering.ami
      << " purity=" << r.clustering.purity << " bias_share=" << r.geometry.front().second.bias_share;
    return s.str();
  }

 private:
  std::filesystem::path require(const std::string& p, const std::string& what) const {
    if (p.empty()) throw Error(ErrorKind::MissingPrerequisite, what + " path is not configured");
    auto fp = path(p);
    if (!std::filesystem::exists(fp))
      throw Error(ErrorKind::MissingPrerequisite, what + " not found at " + fp.string());
    return fp;
  }

  TraceDataset segments() const { return load_dataset(require(cfg_.paths.segments, "segments")); }

  static std::pair<Matrix<double>, std::vector<RowKey>> ordered_points(const EmbeddingMatrix& m,
                                                                        const TraceDataset& ds) {
    const auto order = dataset_row_order(m, ds);
    std::vector<RowKey> keys;
    for (const auto& t : ds.traces)
      for (const auto& s : t.segments) keys.emplace_back(t.trace_id, s.step_index);
    Matrix<double> points(order.size(), m.dim);
    for (std::size_t n = 0; n < order.size(); ++n) {
      const auto src = m.rows.row(order[n]);
      auto dst = points.row(n);
      for (std::size_t c = 0; c < m.dim; ++c) dst[c] = static_cast<double>(src[c]);
    }
    return {std::move(points), std::move(keys)};
  }

  std::pair<Matrix<double>, std::vector<RowKey>> centered_points() const {
    const TraceDataset ds = segments();
    return ordered_points(read_embedding_file(require(cfg_.paths.centered, "centered embeddings")), ds);
  }

  void check_dims(const Matrix<double>& points) const {
    if (points.cols() != cfg_.d_s)
      throw Error(ErrorKind::ConfigInvalid, "embedding dimension " + std::to_string(points.cols()) +
                                                 " differs from d_s=" + std::to_string(cfg_.d_s));
    if (points.rows() < cfg_.k)
      throw Error(ErrorKind::TooFewPoints, std::to_string(points.rows()) + " segments for K=" + std::to_string(cfg_.k));
  }

  static std::vector<std::pair<std::string, std::vector<int>>> labels_in_order(const TraceDataset& ds,
                                                                              const AssignmentFile& asn) {
    std::map<RowKey, int> by_key;
    for (std::size_t n = 0; n < asn.keys.size(); ++n) by_key[asn.keys[n]] = asn.assignment.hard.at(n);
    std::vector<std::pair<std::string, std::vector<int>>> out;
    for (const auto& t : ds.traces) {
      std::vector<int> codes;
      for (const auto& s : t.segments) {
        auto it = by_key.find({t.trace_id, s.step_index});
        if (it == by_key.end())
          throw Error(ErrorKind::MissingLabel,
                      "no code for (" + t.trace_id + "," + std::to_string(s.step_index) + ")");
        codes.push_back(it->second);
      }
      out.emplace_back(t.trace_id, std::move(codes));
    }
    return out;
  }

  std::map<std::string, std::vector<int>> labels_by_trace(const TraceDataset& ds) const {
    const AssignmentFile asn = read_assignment_file(require(cfg_.paths.assignments, "assignments"));
    std::map<std::string, std::vector<int>> out;
    for (auto& [id, codes] : labels_in_order(ds, asn)) out.emplace(id, std::move(codes));
    return out;
  }

  PipelineConfig cfg_;
  std::filesystem::path dir_;
};

struct StageOutcome {
  int exit_code = kExitOk;
  std::vector<std::string> summary;
  std::string error;
};

/// Lock, run, and map failures onto exit codes.
inline StageOutcome run_pipeline(Stage stage, const PipelineConfig& config, const std::filesystem::path& workdir) {
  StageOutcome out;
  try {
    std::filesystem::create_directories(workdir);
    ArtifactLock lock(workdir);
    Pipeline p(config, workdir);
    p.run(stage, out.summary);
  } catch (const Error& e) {
    out.exit_code = exit_code_for(e.kind());
    out.error = e.what();
  } catch (const std::exception& e) {
    out.exit_code = kExitFailure;
    out.error = e.what();
  }
  return out;
}

/// CIRF_DIR wins over the supplied default.
inline std::filesystem::path resolve_workdir(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv("CIRF_DIR"); env && *env) return env;
  return fallback;
}

}  // namespace cirf

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cirf/embedding.hpp"
#include "cirf/error.hpp"
#include "cirf/log.hpp"
#include "cirf/trace.hpp"
#include "cirf/vq.hpp"

namespace cirf {

inline constexpr std::string_view kStartSurface = "<SOF>";
inline constexpr std::string_view kEndSurface = "<EOF>";

/// Surface of functional token `code_id` (0-based, matching hard labels).
inline std::string functional_surface(int code_id) { return "<F_" + std::to_string(code_id) + ">"; }

// ---------------------------------------------------------------------------
// Result units

/// Attaches result units from a JSONL file of {"id", "results": [str]}.
/// Traces without an entry get m empty units.
inline void ingest_result_units(const std::filesystem::path& path, TraceDataset& dataset) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open results file " + path.string());
  std::map<std::string, std::vector<std::string>> by_id;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      by_id[j.at("id").get<std::string>()] = j.at("results").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::MalformedLine, "results line " + std::to_string(line_no) + ": " + e.what());
    }
  }

  std::set<std::string> known;
  for (const auto& t : dataset.traces) known.insert(t.trace_id);
  for (const auto& [id, _] : by_id)
    if (!known.count(id)) throw Error(ErrorKind::UnknownTraceId, "results for unknown trace '" + id + "'");

  for (auto& t : dataset.traces) {
    auto it = by_id.find(t.trace_id);
    if (it == by_id.end()) {
      t.result_units = make_result_units(std::vector<std::string>(t.segments.size()));
      continue;
    }
    if (it->second.size() != t.segments.size())
      throw Error(ErrorKind::ResultLengthMismatch, "trace '" + t.trace_id + "' has " +
                                                       std::to_string(it->second.size()) + " results for " +
                                                       std::to_string(t.segments.size()) + " steps");
    for (const auto& r : it->second)
      if (contains_reserved_surface(r))
        throw Error(ErrorKind::ReservedSurface, "result for '" + t.trace_id + "' contains a reserved token surface");
    t.result_units = make_result_units(it->second);
  }
}

// ---------------------------------------------------------------------------
// Supervision targets

struct TargetItem {
  enum class Kind { start, functional, text, end };
  Kind kind = Kind::text;
  int code_id = -1;
  std::string text;

  static TargetItem start() { return {Kind::start, -1, {}}; }
  static TargetItem end() { return {Kind::end, -1, {}}; }
  static TargetItem functional(int code) { return {Kind::functional, code, {}}; }
  static TargetItem literal(std::string s) { return {Kind::text, -1, std::move(s)}; }

  bool operator==(const TargetItem&) const = default;
};

struct SupervisionTarget {
  std::string trace_id;
  std::vector<TargetItem> tokens;  // <SOF> (f [txt])* <EOF> answer
  std::vector<int> code_sequence;

  /// Step indices (1-based) whose functional token is followed by result text.
  std::vector<int> result_steps() const {
    std::vector<int> steps;
    int step = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].kind == TargetItem::Kind::functional) {
        ++step;
        if (i + 1 < tokens.size() && tokens[i + 1].kind == TargetItem::Kind::text) steps.push_back(step);
      }
    }
    return steps;
  }

  /// Copy with result texts removed for every step not in `keep`.
  SupervisionTarget with_results(const std::set<int>& keep) const {
    SupervisionTarget out{trace_id, {}, code_sequence};
    int step = 0;
    bool after_eof = false;
    for (const auto& item : tokens) {
      if (item.kind == TargetItem::Kind::end) after_eof = true;
      if (item.kind == TargetItem::Kind::functional) ++step;
      if (item.kind == TargetItem::Kind::text && !after_eof && !keep.count(step)) continue;
      out.tokens.push_back(item);
    }
    return out;
  }

  const std::string& answer() const { return tokens.back().text; }

  bool operator==(const SupervisionTarget&) const = default;
};

/// [<SOF>] + for each step (F_code, result iff non-empty) + [<EOF>, answer].
inline SupervisionTarget build_target(const ReasoningTrace& trace, std::span<const int> codes,
                                      const std::vector<ResultUnit>* units = nullptr) {
  const std::size_t m = trace.segments.size();
  if (codes.size() != m)
    throw Error(ErrorKind::LengthMismatch, "trace '" + trace.trace_id + "' has " + std::to_string(m) + " steps but " +
                                               std::to_string(codes.size()) + " codes");
  if (!units && trace.result_units) units = &*trace.result_units;
  if (units && !units->empty() && units->size() != m)
    throw Error(ErrorKind::LengthMismatch, "trace '" + trace.trace_id + "' has misaligned result units");

  SupervisionTarget t;
  t.trace_id = trace.trace_id;
  t.code_sequence.assign(codes.begin(), codes.end());
  t.tokens.push_back(TargetItem::start());
  for (std::size_t j = 0; j < m; ++j) {
    t.tokens.push_back(TargetItem::functional(codes[j]));
    if (units && !units->empty() && !(*units)[j].text.empty()) t.tokens.push_back(TargetItem::literal((*units)[j].text));
  }
  t.tokens.push_back(TargetItem::end());
  t.tokens.push_back(TargetItem::literal(trace.answer));
  return t;
}

inline std::size_t functional_count(const SupervisionTarget& t) {
  std::size_t n = 0;
  for (const auto& item : t.tokens)
    if (item.kind == TargetItem::Kind::functional) ++n;
  return n;
}

/// Checks the structural invariants of a target; returns a reason or "".
inline std::string validate_target(const SupervisionTarget& t) {
  using K = TargetItem::Kind;
  if (t.tokens.size() < 3 || t.tokens.front().kind != K::start) return "target must begin with <SOF>";
  if (t.tokens[t.tokens.size() - 2].kind != K::end || t.tokens.back().kind != K::text)
    return "target must end with <EOF> followed by the answer";
  std::vector<int> codes;
  for (std::size_t i = 1; i + 2 < t.tokens.size(); ++i) {
    const auto& item = t.tokens[i];
    if (item.kind == K::functional) codes.push_back(item.code_id);
    else if (item.kind == K::text) {
      if (t.tokens[i - 1].kind != K::functional) return "result text must directly follow a functional token";
    } else return "boundary token inside the reasoning span";
  }
  if (codes != t.code_sequence) return "code_sequence disagrees with functional tokens";
  return {};
}

// ---------------------------------------------------------------------------
// Vocabulary manifest

struct VocabularyManifest {
  std::vector<std::string> functional_tokens;
  std::vector<std::string> boundary_tokens{std::string(kStartSurface), std::string(kEndSurface)};
  Matrix<float> initial_embeddings;
  double alpha = 0.01;
  std::string embedding_file;  // relative to the manifest's directory

  std::size_t k() const noexcept { return functional_tokens.size(); }
};

inline VocabularyManifest make_manifest(const Codebook& codebook, double alpha) {
  VocabularyManifest m;
  m.alpha = alpha;
  for (std::size_t k = 0; k < codebook.k(); ++k) m.functional_tokens.push_back(functional_surface(static_cast<int>(k)));
  m.initial_embeddings = export_token_embeddings(codebook, alpha);
  return m;
}

inline EmbeddingMatrix manifest_payload(const VocabularyManifest& m) {
  EmbeddingMatrix payload;
  payload.dim = m.initial_embeddings.cols();
  payload.rows = m.initial_embeddings;
  for (std::size_t k = 0; k < m.k(); ++k) payload.index.emplace(RowKey{m.functional_tokens[k], static_cast<int>(k)}, k);
  return payload;
}

/// Writes the manifest JSON and its embedding payload next to it.
inline void emit_vocabulary_manifest(VocabularyManifest& m, const std::filesystem::path& manifest_path,
                                     const std::string& embedding_file = "token_embeddings.emb") {
  m.embedding_file = embedding_file;
  nlohmann::json j;
  j["functional"] = m.functional_tokens;
  j["boundary"] = m.boundary_tokens;
  j["alpha"] = m.alpha;
  j["embedding_file"] = m.embedding_file;
  write_file_text(manifest_path, j.dump(2) + "\n");
  write_embedding_file(manifest_payload(m), manifest_path.parent_path() / embedding_file);
}

inline VocabularyManifest read_vocabulary_manifest(const std::filesystem::path& manifest_path) {
  VocabularyManifest m;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_text(manifest_path));
    m.functional_tokens = j.at("functional").get<std::vector<std::string>>();
    m.boundary_tokens = j.at("boundary").get<std::vector<std::string>>();
    m.alpha = j.at("alpha").get<double>();
    m.embedding_file = j.at("embedding_file").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidManifest, e.what());
  }
  std::set<std::string> seen;
  for (const auto* list : {&m.functional_tokens, &m.boundary_tokens})
    for (const auto& s : *list)
      if (!seen.insert(s).second) throw Error(ErrorKind::InvalidManifest, "duplicate surface " + s);
  if (m.boundary_tokens != std::vector<std::string>{std::string(kStartSurface), std::string(kEndSurface)})
    throw Error(ErrorKind::InvalidManifest, "boundary surfaces must be <SOF>, <EOF>");
  for (std::size_t k = 0; k < m.k(); ++k)
    if (m.functional_tokens[k] != functional_surface(static_cast<int>(k)))
      throw Error(ErrorKind::InvalidManifest, "unexpected functional surface " + m.functional_tokens[k]);

  const EmbeddingMatrix payload = read_embedding_file(manifest_path.parent_path() / m.embedding_file);
  if (payload.rows.rows() != m.k()) throw Error(ErrorKind::InvalidManifest, "embedding row count differs from K");
  m.initial_embeddings = Matrix<float>(m.k(), payload.dim);
  for (std::size_t k = 0; k < m.k(); ++k) {
    const auto row = payload.at({m.functional_tokens[k], static_cast<int>(k)});
    std::copy(row.begin(), row.end(), m.initial_embeddings.row(k).begin());
    if (std::abs(l2_norm(row) - m.alpha) > 1e-7)
      throw Error(ErrorKind::InvalidManifest, "row " + std::to_string(k) + " norm differs from alpha");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Rendering

/// Surfaces and texts joined by single spaces; texts pass through verbatim.
inline std::string render_target_text(const SupervisionTarget& t, std::size_t k) {
  std::string out;
  for (const auto& item : t.tokens) {
    if (&item != &t.tokens.front()) out += ' ';
    switch (item.kind) {
      case TargetItem::Kind::start: out += kStartSurface; break;
      case TargetItem::Kind::end: out += kEndSurface; break;
      case TargetItem::Kind::text: out += item.text; break;
      case TargetItem::Kind::functional:
        if (item.code_id < 0 || static_cast<std::size_t>(item.code_id) >= k)
          throw Error(ErrorKind::UnknownCodeId, "code " + std::to_string(item.code_id) + " with K=" + std::to_string(k));
        out += functional_surface(item.code_id);
        break;
    }
  }
  if (t.answer().empty()) log_warn() << "lint: target '" << t.trace_id << "' has an empty answer";
  return out;
}

inline std::string render_target_text(const SupervisionTarget& t, const VocabularyManifest& m) {
  return render_target_text(t, m.k());
}

/// Rendering up to and including <EOF> (the answer excluded); the scorer's prefix.
inline std::string render_prefix(const SupervisionTarget& t, std::size_t k) {
  SupervisionTarget head = t;
  head.tokens.pop_back();
  std::string out;
  for (const auto& item : head.tokens) {
    if (!out.empty()) out += ' ';
    switch (item.kind) {
      case TargetItem::Kind::start: out += kStartSurface; break;
      case TargetItem::Kind::end: out += kEndSurface; break;
      case TargetItem::Kind::text: out += item.text; break;
      case TargetItem::Kind::functional:
        if (item.code_id < 0 || static_cast<std::size_t>(item.code_id) >= k)
          throw Error(ErrorKind::UnknownCodeId, "code " + std::to_string(item.code_id));
        out += functional_surface(item.code_id);
        break;
    }
  }
  return out;
}

/// Inverse of render_target_text for texts that contain no token surfaces.
inline SupervisionTarget parse_rendered_target(std::string_view rendered, std::string trace_id) {
  static const std::regex surface_re(R"(<SOF>|<EOF>|<F_(\d+)>)");
  SupervisionTarget t;
  t.trace_id = std::move(trace_id);
  auto begin = rendered.begin();
  std::match_results<std::string_view::const_iterator> m;
  std::size_t cursor = 0;
  bool after_eof = false;
  auto flush_text = [&](std::size_t stop) {
    std::string_view gap = rendered.substr(cursor, stop - cursor);
    if (!gap.empty() && gap.front() == ' ') gap.remove_prefix(1);
    if (!gap.empty() && gap.back() == ' ') gap.remove_suffix(1);
    if (!gap.empty()) t.tokens.push_back(TargetItem::literal(std::string(gap)));
  };
  while (!after_eof && std::regex_search(begin + static_cast<std::ptrdiff_t>(cursor), rendered.end(), m, surface_re)) {
    const std::size_t at = cursor + static_cast<std::size_t>(m.position(0));
    flush_text(at);
    const std::string surface = m.str(0);
    if (surface == kStartSurface) t.tokens.push_back(TargetItem::start());
    else if (surface == kEndSurface) {
      t.tokens.push_back(TargetItem::end());
      after_eof = true;
    } else {
      const int code = std::stoi(m.str(1));
      t.tokens.push_back(TargetItem::functional(code));
      t.code_sequence.push_back(code);
    }
    cursor = at + static_cast<std::size_t>(m.length(0));
  }
  if (!after_eof) throw Error(ErrorKind::LengthMismatch, "rendered target lacks <EOF>");
  std::string_view answer = rendered.substr(cursor);
  if (!answer.empty() && answer.front() == ' ') answer.remove_prefix(1);
  t.tokens.push_back(TargetItem::literal(std::string(answer)));
  return t;
}

// ---------------------------------------------------------------------------
// Targets file: {"id", "tokens": [...], "rendered"}

inline nlohmann::json target_to_json(const SupervisionTarget& t, std::size_t k) {
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& item : t.tokens) {
    switch (item.kind) {
      case TargetItem::Kind::start: tokens.push_back({{"t", "sof"}}); break;
      case TargetItem::Kind::end: tokens.push_back({{"t", "eof"}}); break;
      case TargetItem::Kind::functional: tokens.push_back({{"t", "f"}, {"k", item.code_id}}); break;
      case TargetItem::Kind::text: tokens.push_back({{"t", "txt"}, {"s", item.text}}); break;
    }
  }
  return {{"id", t.trace_id}, {"tokens", std::move(tokens)}, {"rendered", render_target_text(t, k)}};
}

inline SupervisionTarget target_from_json(const nlohmann::json& j) {
  SupervisionTarget t;
  try {
    t.trace_id = j.at("id").get<std::string>();
    for (const auto& tok : j.at("tokens")) {
      const auto kind = tok.at("t").get<std::string>();
      if (kind == "sof") t.tokens.push_back(TargetItem::start());
      else if (kind == "eof") t.tokens.push_back(TargetItem::end());
      else if (kind == "f") {
        t.tokens.push_back(TargetItem::functional(tok.at("k").get<int>()));
        t.code_sequence.push_back(t.tokens.back().code_id);
      } else if (kind == "txt") t.tokens.push_back(TargetItem::literal(tok.at("s").get<std::string>()));
      else throw Error(ErrorKind::MalformedLine, "unknown token kind " + kind);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedLine, e.what());
  }
  if (auto why = validate_target(t); !why.empty()) throw Error(ErrorKind::MalformedLine, why);
  return t;
}

inline void write_targets(const std::vector<SupervisionTarget>& targets, std::size_t k,
                          const std::filesystem::path& path) {
  std::string text;
  for (const auto& t : targets) text += target_to_json(t, k).dump() + "\n";
  write_file_text(path, text);
}

inline std::vector<SupervisionTarget> read_targets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open targets " + path.string());
  std::vector<SupervisionTarget> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(target_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::MalformedLine, "targets line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cirf

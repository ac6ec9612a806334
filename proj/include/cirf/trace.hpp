#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cirf/error.hpp"
#include "cirf/log.hpp"

namespace cirf {

enum class DelimiterKind { step_word, numbered_dot, numbered_paren };

inline std::string_view to_string(DelimiterKind kind) {
  switch (kind) {
    case DelimiterKind::step_word: return "step_word";
    case DelimiterKind::numbered_dot: return "numbered_dot";
    case DelimiterKind::numbered_paren: return "numbered_paren";
  }
  return "unknown";
}

struct Segment {
  int step_index = 0;  // 1-based
  std::string text;
  DelimiterKind delimiter_kind = DelimiterKind::step_word;
  std::string delimiter;  // the marker exactly as it appeared, e.g. "Step 2:"

  bool operator==(const Segment&) const = default;
};

struct ResultUnit {
  int step_index = 0;
  std::string text;  // may be empty

  bool operator==(const ResultUnit&) const = default;
};

struct ReasoningTrace {
  std::string trace_id;
  std::string question;
  std::string rationale_raw;
  std::string preamble;  // text before the first marker, kept for reconstruction
  std::vector<Segment> segments;
  std::string answer;
  std::optional<std::vector<ResultUnit>> result_units;
  std::string dataset_tag;

  std::size_t step_count() const noexcept { return segments.size(); }
  bool operator==(const ReasoningTrace&) const = default;
};

struct Rejection {
  std::size_t line_no = 0;
  std::string trace_id;
  std::string reason;
};

struct TraceDataset {
  std::vector<ReasoningTrace> traces;
  std::size_t rejected_count = 0;
  std::string source_path;
  std::vector<Rejection> rejections;

  std::size_t segment_count() const noexcept {
    std::size_t n = 0;
    for (const auto& t : traces) n += t.segments.size();
    return n;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (const char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(c);
    }
  }
  return out;
}

struct Boundary {
  std::size_t line_start;  // offset of the line in the rationale
  std::size_t text_start;  // offset just past the marker
  int number;
  DelimiterKind kind;
  std::string marker;
};

inline std::optional<Boundary> match_boundary(std::string_view line, std::size_t offset) {
  // Step <k> followed by ':' or '.'
  static const std::regex step_re(R"(^\s*(step\s+(\d+)\s*[:.]))", std::regex::icase);
  // <k>. or <k>) ; a '.' directly followed by a digit is a decimal, not a marker
  static const std::regex number_re(R"(^\s*((\d+)([.)]))(?!\d))");
  std::match_results<std::string_view::const_iterator> m;
  if (std::regex_search(line.begin(), line.end(), m, step_re)) {
    return Boundary{offset, offset + static_cast<std::size_t>(m.position(1) + m.length(1)),
                    std::stoi(m.str(2)), DelimiterKind::step_word, m.str(1)};
  }
  if (std::regex_search(line.begin(), line.end(), m, number_re)) {
    const auto kind = m.str(3) == "." ? DelimiterKind::numbered_dot : DelimiterKind::numbered_paren;
    return Boundary{offset, offset + static_cast<std::size_t>(m.position(1) + m.length(1)),
                    std::stoi(m.str(2)), kind, m.str(1)};
  }
  return std::nullopt;
}

inline std::regex& reserved_surface_regex() {
  static std::regex re(R"(<F_\d+>|<SOF>|<EOF>)");
  return re;
}

}  // namespace detail

inline bool contains_reserved_surface(std::string_view text) {
  return std::regex_search(text.begin(), text.end(), detail::reserved_surface_regex());
}

struct Segmentation {
  std::vector<Segment> segments;
  std::string preamble;  // text before the first marker
};

/// Splits a rationale at line-initial step markers. The first marker found
/// fixes the marker family; lines of other families are ordinary text.
/// Throws Error{SegmentationRejected} when no marker is found, numbering is
/// not 1..m, or a segment is empty.
inline Segmentation segment_rationale_full(std::string_view rationale) {
  std::vector<detail::Boundary> boundaries;
  std::size_t pos = 0;
  while (pos <= rationale.size()) {
    std::size_t end = rationale.find('\n', pos);
    if (end == std::string_view::npos) end = rationale.size();
    if (auto b = detail::match_boundary(rationale.substr(pos, end - pos), pos)) {
      if (boundaries.empty() || b->kind == boundaries.front().kind) boundaries.push_back(std::move(*b));
    }
    pos = end + 1;
  }
  if (boundaries.empty()) throw Error(ErrorKind::SegmentationRejected, "no step markers found");

  Segmentation out;
  out.preamble = detail::trim(rationale.substr(0, boundaries.front().line_start));
  out.segments.reserve(boundaries.size());
  for (std::size_t i = 0; i < boundaries.size(); ++i) {
    const auto& b = boundaries[i];
    if (b.number != static_cast<int>(i) + 1)
      throw Error(ErrorKind::SegmentationRejected,
                  "step numbering not consecutive from 1 (found " + std::to_string(b.number) + " at position " +
                      std::to_string(i + 1) + ")");
    const std::size_t stop = i + 1 < boundaries.size() ? boundaries[i + 1].line_start : rationale.size();
    std::string text = detail::trim(rationale.substr(b.text_start, stop - b.text_start));
    if (text.empty()) throw Error(ErrorKind::SegmentationRejected, "empty step " + std::to_string(b.number));
    out.segments.push_back(Segment{b.number, std::move(text), b.kind, b.marker});
  }
  return out;
}

inline std::vector<Segment> segment_rationale(std::string_view rationale) {
  return segment_rationale_full(rationale).segments;
}

/// Rebuilds the rationale from its preamble, markers and segment texts with
/// whitespace collapsed.
inline std::string reconstruct_rationale(const ReasoningTrace& trace) {
  std::string out = trace.preamble;
  for (const auto& s : trace.segments) {
    if (!out.empty()) out += ' ';
    out += s.delimiter;
    out += ' ';
    out += s.text;
  }
  return detail::collapse_whitespace(out);
}

inline std::string normalize_whitespace(std::string_view text) { return detail::collapse_whitespace(text); }

inline std::vector<ResultUnit> make_result_units(const std::vector<std::string>& texts) {
  std::vector<ResultUnit> units;
  units.reserve(texts.size());
  for (std::size_t j = 0; j < texts.size(); ++j) units.push_back({static_cast<int>(j) + 1, detail::trim(texts[j])});
  return units;
}

inline ReasoningTrace parse_trace(const nlohmann::json& record) {
  if (!record.is_object()) throw Error(ErrorKind::MissingField, "record is not an object");
  auto field = [&](const char* name) -> std::string {
    auto it = record.find(name);
    if (it == record.end() || !it->is_string())
      throw Error(ErrorKind::MissingField, std::string("field '") + name + "' missing or not a string");
    return it->get<std::string>();
  };

  ReasoningTrace trace;
  trace.trace_id = field("id");
  trace.question = field("question");
  trace.rationale_raw = field("rationale");
  trace.answer = field("answer");
  if (auto it = record.find("dataset"); it != record.end() && it->is_string()) trace.dataset_tag = it->get<std::string>();

  for (const std::string* text : {&trace.question, &trace.rationale_raw, &trace.answer})
    if (contains_reserved_surface(*text))
      throw Error(ErrorKind::ReservedSurface, "record '" + trace.trace_id + "' contains a reserved token surface");

  auto segmentation = segment_rationale_full(trace.rationale_raw);
  trace.segments = std::move(segmentation.segments);
  trace.preamble = std::move(segmentation.preamble);

  if (auto it = record.find("results"); it != record.end() && !it->is_null()) {
    if (!it->is_array()) throw Error(ErrorKind::MissingField, "field 'results' is not an array");
    std::vector<std::string> texts;
    for (const auto& r : *it) {
      if (!r.is_string()) throw Error(ErrorKind::MissingField, "field 'results' holds a non-string");
      if (contains_reserved_surface(r.get<std::string>()))
        throw Error(ErrorKind::ReservedSurface, "record '" + trace.trace_id + "' result contains a reserved token surface");
      texts.push_back(r.get<std::string>());
    }
    if (!texts.empty()) {
      if (texts.size() != trace.segments.size())
        throw Error(ErrorKind::ResultLengthMismatch, "record '" + trace.trace_id + "' has " +
                                                         std::to_string(texts.size()) + " results for " +
                                                         std::to_string(trace.segments.size()) + " steps");
      trace.result_units = make_result_units(texts);
    }
  }
  return trace;
}

/// Loads a line-delimited corpus. Records that fail parse_trace are counted
/// as rejections; lines that are not valid JSON abort with MalformedLine.
inline TraceDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open corpus " + path.string());

  TraceDataset dataset;
  dataset.source_path = path.string();
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::MalformedLine, "line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      ReasoningTrace trace = parse_trace(record);
      if (!seen.insert(trace.trace_id).second)
        throw Error(ErrorKind::DuplicateTraceId, "duplicate id '" + trace.trace_id + "'");
      dataset.traces.push_back(std::move(trace));
    } catch (const Error& e) {
      ++dataset.rejected_count;
      std::string id = record.is_object() && record.contains("id") && record["id"].is_string()
                           ? record["id"].get<std::string>()
                           : std::string();
      dataset.rejections.push_back({line_no, std::move(id), e.what()});
    }
  }
  const std::size_t total = dataset.traces.size() + dataset.rejected_count;
  log_info() << "loaded " << dataset.traces.size() << " traces from " << path.string() << ", rejected "
             << dataset.rejected_count << " ("
             << (total ? 100.0 * static_cast<double>(dataset.rejected_count) / static_cast<double>(total) : 0.0)
             << "%)";
  return dataset;
}

inline nlohmann::json trace_to_json(const ReasoningTrace& trace) {
  nlohmann::json j;
  j["id"] = trace.trace_id;
  j["question"] = trace.question;
  j["rationale"] = trace.rationale_raw;
  j["answer"] = trace.answer;
  if (!trace.dataset_tag.empty()) j["dataset"] = trace.dataset_tag;
  if (trace.result_units) {
    auto results = nlohmann::json::array();
    for (const auto& u : *trace.result_units) results.push_back(u.text);
    j["results"] = std::move(results);
  }
  auto segments = nlohmann::json::array();
  auto delimiters = nlohmann::json::array();
  for (const auto& s : trace.segments) {
    segments.push_back(s.text);
    delimiters.push_back(s.delimiter);
  }
  j["segments"] = std::move(segments);
  j["delimiters"] = std::move(delimiters);
  return j;
}

inline void write_dataset(const TraceDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  for (const auto& t : dataset.traces) out << trace_to_json(t).dump() << '\n';
  if (!out) throw Error(ErrorKind::Io, "short write to " + path.string());
}

}  // namespace cirf

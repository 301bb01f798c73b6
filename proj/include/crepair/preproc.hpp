#pragma once

#include <string>
#include <vector>

#include "crepair/corpus.hpp"
#include "crepair/errors.hpp"

namespace crepair {

inline constexpr const char* kStartLoc = "<StartLoc>";
inline constexpr const char* kEndLoc = "<EndLoc>";
inline constexpr const char* kEmptyPatch = "<Empty>";

// Model-facing rendering of one record: a prompted input sequence and the
// replacement text for the marked region.
struct PromptedExample {
  std::string input_text;
  std::string target_text;
};

enum class PromptMode {
  kPrompted,  // CWE tag + <StartLoc>/<EndLoc> markers
  kStripped,  // plain serialized function, no prompt elements
};

// Flattens a code block to a single line: C-family comments dropped, every
// whitespace run collapsed to one space, ends trimmed. Comment markers inside
// string/char literals are left alone.
inline std::string serialize(const std::string& code) {
  if (code.empty()) throw DataError("serialize: empty code");
  enum class State { kNormal, kLine, kBlock, kString, kChar };
  State state = State::kNormal;
  std::string out;
  out.reserve(code.size());
  bool pending_space = false;
  auto emit = [&](char c) {
    if (pending_space && !out.empty()) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  };
  for (std::size_t i = 0; i < code.size(); ++i) {
    char c = code[i];
    char next = i + 1 < code.size() ? code[i + 1] : '\0';
    switch (state) {
      case State::kNormal:
        if (c == '/' && next == '/') {
          state = State::kLine;
          ++i;
        } else if (c == '/' && next == '*') {
          state = State::kBlock;
          ++i;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
          pending_space = true;
        } else {
          if (c == '"') state = State::kString;
          if (c == '\'') state = State::kChar;
          emit(c);
        }
        break;
      case State::kLine:
        if (c == '\n') {
          state = State::kNormal;
          pending_space = true;
        }
        break;
      case State::kBlock:
        if (c == '*' && next == '/') {
          state = State::kNormal;
          ++i;
        }
        break;
      case State::kString:
      case State::kChar: {
        char quote = state == State::kString ? '"' : '\'';
        if (std::isspace(static_cast<unsigned char>(c))) {
          pending_space = true;
        } else {
          emit(c);
        }
        if (c == '\\' && next != '\0') {
          emit(next);
          ++i;
        } else if (c == quote) {
          state = State::kNormal;
        }
        break;
      }
    }
  }
  if (state == State::kBlock) throw DataError("serialize: unterminated block comment");
  return out;
}

namespace detail {

inline void append_part(std::string& joined, const std::string& part) {
  if (part.empty()) return;
  if (!joined.empty()) joined.push_back(' ');
  joined.append(part);
}

// Serialize that tolerates empty or whitespace-only input.
inline std::string serialize_or_empty(const std::string& code) {
  if (code.empty()) return "";
  return serialize(code);
}

}  // namespace detail

// Builds the prompted input: CWE tag first, then the serialized code with the
// vulnerable span bracketed by location markers. Offsets are applied in the
// raw code; each side is serialized independently.
inline std::string build_input(const SampleRecord& rec,
                               PromptMode mode = PromptMode::kPrompted) {
  validate_record(rec);
  if (mode == PromptMode::kStripped) return serialize(rec.vulnerable_code);
  std::string prefix = rec.vulnerable_code.substr(
      0, static_cast<std::size_t>(rec.vuln_start));
  std::string span = rec.vulnerable_code.substr(
      static_cast<std::size_t>(rec.vuln_start),
      static_cast<std::size_t>(rec.vuln_end - rec.vuln_start));
  std::string suffix =
      rec.vulnerable_code.substr(static_cast<std::size_t>(rec.vuln_end));
  std::string span_text = detail::serialize_or_empty(span);
  if (span_text.empty()) throw DataError("empty vulnerable span in record " + rec.id);
  std::string joined = rec.cwe_id;
  detail::append_part(joined, detail::serialize_or_empty(prefix));
  detail::append_part(joined, kStartLoc);
  detail::append_part(joined, span_text);
  detail::append_part(joined, kEndLoc);
  detail::append_part(joined, detail::serialize_or_empty(suffix));
  return joined;
}

// The replacement text the model should produce: whatever fixed_code contains
// where vulnerable_code had the span, serialized. A deletion becomes the
// <Empty> sentinel. Requires the two versions to agree outside the span.
inline std::string build_target(const SampleRecord& rec) {
  validate_record(rec);
  const std::string& vuln = rec.vulnerable_code;
  const std::string& fixed = rec.fixed_code;
  std::size_t prefix_len = static_cast<std::size_t>(rec.vuln_start);
  std::size_t suffix_len = vuln.size() - static_cast<std::size_t>(rec.vuln_end);
  if (fixed.size() < prefix_len + suffix_len ||
      fixed.compare(0, prefix_len, vuln, 0, prefix_len) != 0 ||
      fixed.compare(fixed.size() - suffix_len, suffix_len, vuln,
                    vuln.size() - suffix_len, suffix_len) != 0)
    throw DataError("region alignment failure in record " + rec.id +
                    ": code differs outside the marked span");
  std::string replacement =
      fixed.substr(prefix_len, fixed.size() - suffix_len - prefix_len);
  std::string target = detail::serialize_or_empty(replacement);
  return target.empty() ? kEmptyPatch : target;
}

inline PromptedExample build_prompted(const SampleRecord& rec,
                                      PromptMode mode = PromptMode::kPrompted) {
  return PromptedExample{build_input(rec, mode), build_target(rec)};
}

// Splices a candidate patch back over the marked span and returns the
// serialized patched function. The <Empty> sentinel (or an empty candidate)
// deletes the span.
inline std::string extract_patch(const std::string& candidate_text,
                                 const SampleRecord& rec) {
  validate_record(rec);
  std::string patch = candidate_text == kEmptyPatch ? "" : candidate_text;
  std::string spliced =
      rec.vulnerable_code.substr(0, static_cast<std::size_t>(rec.vuln_start)) +
      patch + rec.vulnerable_code.substr(static_cast<std::size_t>(rec.vuln_end));
  return detail::serialize_or_empty(spliced);
}

}  // namespace crepair

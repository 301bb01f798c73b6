#pragma once

#include <array>
#include <string>
#include <vector>

#include "crepair/corpus.hpp"
#include "crepair/rng.hpp"

namespace crepair {

// Synthetic stand-in for a real vulnerability-pair corpus: small C-like
// functions rendered from templates, each with exactly one injected bug from
// a four-class catalog. The class determines the pseudo-CWE label, so the
// type prompt carries usable signal at toy scale.
//
//   off-by-one loop bound          -> CWE-787
//   swapped comparison operator    -> CWE-697
//   missing null check             -> CWE-476
//   wrong buffer length constant   -> CWE-805

namespace synth_detail {

inline const std::array<const char*, 10> kVerbs = {
    "sum", "scan", "scale", "copy", "clamp", "store", "init", "find", "reset",
    "fill"};
inline const std::array<const char*, 6> kNouns = {
    "_array", "_buffer", "_range", "_items", "_block", "_data"};
inline const std::array<const char*, 8> kArrays = {
    "arr", "data", "items", "values", "nums", "samples", "cells", "entries"};
inline const std::array<const char*, 6> kCounts = {"n",     "len",  "count",
                                                   "size",  "total", "limit"};
inline const std::array<const char*, 6> kScalars = {"value", "key",   "factor",
                                                    "delta", "amount", "step"};
inline const std::array<const char*, 6> kPointers = {"p",    "ptr",  "dest",
                                                     "slot", "out",  "cell"};
inline const std::array<const char*, 4> kDsts = {"dst", "out", "dest", "to"};
inline const std::array<const char*, 4> kSrcs = {"src", "input", "from", "raw"};
inline const std::array<int, 5> kBufSizes = {4, 8, 16, 32, 64};
inline const std::array<const char*, 5> kComments = {
    "// fast path", "// caller owns the data", "/* update in place */",
    "// keep in sync with header", "/* no allocation here */"};

template <std::size_t N>
const char* pick(const std::array<const char*, N>& pool, Rng& rng) {
  return pool[static_cast<std::size_t>(rng.next_below(N))];
}

struct Rendered {
  std::string fixed;   // correct function text
  std::string good;    // text of the edit region in the fixed version
  std::string bad;     // text of the edit region with the bug injected
  std::size_t at = 0;  // offset of the edit region in `fixed`
  const char* cwe = "";
};

// Each builder writes the fixed function and marks the edit site with
// `good`/`bad` alternatives. The site is located by unique substring search
// after rendering, which keeps the templates easy to edit.
inline Rendered make_off_by_one(Rng& rng) {
  Rendered r;
  r.cwe = "CWE-787";
  std::string fn = std::string(pick(kVerbs, rng)) + pick(kNouns, rng);
  std::string arr = pick(kArrays, rng);
  std::string len = pick(kCounts, rng);
  std::string val = pick(kScalars, rng);
  bool comment = rng.next_below(3) == 0;
  bool reading = rng.next_below(2) == 0;
  r.good = "i < " + len;
  r.bad = "i <= " + len;
  std::string body;
  if (reading) {
    body = "int " + fn + "(const int *" + arr + ", int " + len + ") {\n";
    body += "    int acc = 0;\n";
    if (comment) body += "    " + std::string(pick(kComments, rng)) + "\n";
    body += "    for (int i = 0; " + r.good + "; i++) {\n";
    body += "        acc += " + arr + "[i];\n";
    body += "    }\n";
    body += "    return acc;\n}";
  } else {
    body = "void " + fn + "(int *" + arr + ", int " + len + ", int " + val +
           ") {\n";
    if (comment) body += "    " + std::string(pick(kComments, rng)) + "\n";
    body += "    for (int i = 0; " + r.good + "; i++) {\n";
    body += "        " + arr + "[i] = " + arr + "[i] * " + val + ";\n";
    body += "    }\n}";
  }
  r.fixed = body;
  r.at = body.find(r.good);
  return r;
}

inline Rendered make_swapped_comparison(Rng& rng) {
  Rendered r;
  r.cwe = "CWE-697";
  std::string fn = std::string(pick(kVerbs, rng)) + pick(kNouns, rng);
  bool guard = rng.next_below(2) == 0;
  if (guard) {
    std::string dst = pick(kDsts, rng);
    std::string src = pick(kSrcs, rng);
    std::string len = pick(kCounts, rng);
    std::string cap = len == "size" ? "cap" : "size";
    r.good = len + " < " + cap;
    r.bad = len + " > " + cap;
    std::string body = "void " + fn + "(char *" + dst + ", const char *" +
                       src + ", int " + len + ", int " + cap + ") {\n";
    if (rng.next_below(3) == 0)
      body += "    " + std::string(pick(kComments, rng)) + "\n";
    body += "    if (" + r.good + ") {\n";
    body += "        memcpy(" + dst + ", " + src + ", " + len + ");\n";
    body += "    }\n}";
    r.fixed = body;
  } else {
    std::string idx = rng.next_below(2) ? "idx" : "pos";
    std::string lim = pick(kCounts, rng);
    r.good = idx + " >= " + lim;
    r.bad = idx + " <= " + lim;
    std::string body = "int " + fn + "(int " + idx + ", int " + lim + ") {\n";
    body += "    if (" + r.good + ") {\n";
    body += "        return " + lim + " - 1;\n";
    body += "    }\n";
    body += "    return " + idx + ";\n}";
    r.fixed = body;
  }
  r.at = r.fixed.find(r.good);
  return r;
}

inline Rendered make_missing_null_check(Rng& rng) {
  Rendered r;
  r.cwe = "CWE-476";
  std::string fn = std::string(pick(kVerbs, rng)) + pick(kNouns, rng);
  std::string ptr = pick(kPointers, rng);
  bool pair_form = rng.next_below(2) == 0;
  std::string body;
  if (pair_form) {
    r.good = "if (" + ptr + " != NULL) {\n        " + ptr +
             "[0] = 0;\n        " + ptr + "[1] = 0;\n    }";
    r.bad = ptr + "[0] = 0;\n    " + ptr + "[1] = 0;";
    body = "void " + fn + "(int *" + ptr + ") {\n    " + r.good + "\n}";
  } else {
    std::string val = pick(kScalars, rng);
    r.good = "if (" + ptr + " != NULL) {\n        *" + ptr + " = " + val +
             ";\n    }";
    r.bad = "*" + ptr + " = " + val + ";";
    body = "void " + fn + "(int *" + ptr + ", int " + val + ") {\n    " +
           r.good + "\n}";
  }
  r.fixed = body;
  r.at = body.find(r.good);
  return r;
}

inline Rendered make_wrong_buffer_length(Rng& rng) {
  Rendered r;
  r.cwe = "CWE-805";
  std::string fn = std::string(pick(kVerbs, rng)) + pick(kNouns, rng);
  std::string src = pick(kSrcs, rng);
  std::string buf = rng.next_below(2) ? "buf" : "tmp";
  int good_n = kBufSizes[static_cast<std::size_t>(rng.next_below(kBufSizes.size()))];
  int bad_n = good_n;
  while (bad_n == good_n)
    bad_n = kBufSizes[static_cast<std::size_t>(rng.next_below(kBufSizes.size()))];
  std::string n = std::to_string(good_n);
  r.good = "memcpy(" + buf + ", " + src + ", " + n + ");";
  r.bad = "memcpy(" + buf + ", " + src + ", " + std::to_string(bad_n) + ");";
  std::string body = "void " + fn + "(const char *" + src + ") {\n";
  body += "    char " + buf + "[" + n + "];\n";
  if (rng.next_below(3) == 0)
    body += "    " + std::string(pick(kComments, rng)) + "\n";
  body += "    " + r.good + "\n";
  body += "    " + buf + "[" + n + " - 1] = '\\0';\n}";
  r.fixed = body;
  r.at = body.find(r.good);
  return r;
}

}  // namespace synth_detail

inline std::vector<SampleRecord> gen_synthetic(int count, std::uint64_t seed) {
  if (count < 0) throw DataError("gen_synthetic: negative count");
  Rng rng(seed, /*stream=*/0x5e17);
  std::vector<SampleRecord> records;
  records.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    synth_detail::Rendered r;
    switch (rng.next_below(4)) {
      case 0: r = synth_detail::make_off_by_one(rng); break;
      case 1: r = synth_detail::make_swapped_comparison(rng); break;
      case 2: r = synth_detail::make_missing_null_check(rng); break;
      default: r = synth_detail::make_wrong_buffer_length(rng); break;
    }
    SampleRecord rec;
    char id[16];
    std::snprintf(id, sizeof id, "syn-%06d", i);
    rec.id = id;
    rec.cwe_id = r.cwe;
    rec.fixed_code = r.fixed;
    rec.vulnerable_code =
        r.fixed.substr(0, r.at) + r.bad + r.fixed.substr(r.at + r.good.size());
    rec.vuln_start = static_cast<int>(r.at);
    rec.vuln_end = static_cast<int>(r.at + r.bad.size());
    validate_record(rec);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace crepair

#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "crepair/errors.hpp"
#include "crepair/preproc.hpp"

namespace crepair {

// Token ids with a padding mask (1 = real token). Padding, when present, is a
// contiguous suffix.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;

  static TokenSequence of(std::vector<int> token_ids) {
    TokenSequence seq;
    seq.mask.assign(token_ids.size(), 1);
    seq.ids = std::move(token_ids);
    return seq;
  }

  int length() const { return static_cast<int>(ids.size()); }

  int real_length() const {
    int n = 0;
    for (std::uint8_t m : mask) n += m;
    return n;
  }

  void pad_to(int len, int pad_id) {
    while (length() < len) {
      ids.push_back(pad_id);
      mask.push_back(0);
    }
  }

  void validate(int vocab_size) const {
    if (ids.size() != mask.size())
      throw DataError("token sequence: ids/mask length mismatch");
    bool in_padding = false;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= vocab_size)
        throw DataError("token sequence: id " + std::to_string(ids[i]) +
                        " outside vocabulary of " + std::to_string(vocab_size));
      if (!mask[i]) in_padding = true;
      else if (in_padding)
        throw DataError("token sequence: padding must be a contiguous suffix");
    }
  }
};

// Byte-pair vocabulary over UTF-8 characters with reserved special tokens.
// Merge rules never cross whitespace: text is pre-chunked into
// (space + word) pieces, so decoding is exact concatenation.
class BpeVocab {
 public:
  static constexpr const char* kPad = "<Pad>";
  static constexpr const char* kBos = "<Bos>";
  static constexpr const char* kEos = "<Eos>";
  static constexpr const char* kUnk = "<Unk>";

  // Trains from scratch on `texts`: alphabet = corpus characters, then the
  // most frequent adjacent pair merges repeatedly until the id budget is
  // spent or no pair occurs at least twice. Ties break on the
  // lexicographically smallest (left, right) pair.
  static BpeVocab train(const std::vector<std::string>& texts, int vocab_size,
                        const std::vector<std::string>& extra_specials) {
    if (texts.empty()) throw DataError("bpe: cannot train on an empty corpus");
    BpeVocab vocab;
    vocab.specials_ = builtin_specials();
    {
      std::set<std::string> extras(extra_specials.begin(), extra_specials.end());
      for (const std::string& s : extras) {
        if (std::find(vocab.specials_.begin(), vocab.specials_.end(), s) ==
            vocab.specials_.end())
          vocab.specials_.push_back(s);
      }
    }

    // Chunk frequency table; special surfaces are atomic and excluded.
    std::map<std::vector<std::string>, long long> chunks;
    std::set<std::string> alphabet;
    for (const std::string& text : texts) {
      for (const auto& segment : split_specials(text, vocab.specials_)) {
        if (segment.is_special) continue;
        for (auto& chunk : chunk_text(segment.text)) {
          std::vector<std::string> symbols = utf8_chars(chunk);
          for (const std::string& c : symbols) alphabet.insert(c);
          ++chunks[std::move(symbols)];
        }
      }
    }
    vocab.alphabet_.assign(alphabet.begin(), alphabet.end());
    int base = static_cast<int>(vocab.specials_.size() + vocab.alphabet_.size());
    if (vocab_size <= base)
      throw DataError("bpe: vocab size " + std::to_string(vocab_size) +
                      " does not cover " + std::to_string(base) +
                      " specials + base characters");

    int budget = vocab_size - base;
    for (int m = 0; m < budget; ++m) {
      std::map<std::pair<std::string, std::string>, long long> pair_counts;
      for (const auto& [symbols, freq] : chunks)
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i)
          pair_counts[{symbols[i], symbols[i + 1]}] += freq;
      // std::map iteration is lexicographic, so the first maximal entry is
      // the tie-break winner.
      std::pair<std::string, std::string> best;
      long long best_count = 0;
      for (const auto& [pair, count] : pair_counts)
        if (count > best_count) {
          best = pair;
          best_count = count;
        }
      if (best_count < 2) break;
      vocab.merges_.push_back(best);

      std::map<std::vector<std::string>, long long> next;
      std::string merged = best.first + best.second;
      for (const auto& [symbols, freq] : chunks) {
        std::vector<std::string> out;
        out.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size(); ++i) {
          if (i + 1 < symbols.size() && symbols[i] == best.first &&
              symbols[i + 1] == best.second) {
            out.push_back(merged);
            ++i;
          } else {
            out.push_back(symbols[i]);
          }
        }
        next[std::move(out)] += freq;
      }
      chunks = std::move(next);
    }

    vocab.assign_ids();
    return vocab;
  }

  // Applies the learned merges; unknown characters map to <Unk>. The result
  // is framed with <Bos>/<Eos> and carries an all-real mask.
  TokenSequence encode(const std::string& text) const {
    std::vector<int> ids;
    ids.push_back(bos_id());
    for (const auto& segment : split_specials(text, specials_)) {
      if (segment.is_special) {
        ids.push_back(token_to_id_.at(segment.text));
        continue;
      }
      for (const std::string& chunk : chunk_text(segment.text)) {
        std::vector<std::string> symbols = utf8_chars(chunk);
        merge_symbols(symbols);
        for (const std::string& s : symbols) {
          auto it = token_to_id_.find(s);
          ids.push_back(it == token_to_id_.end() ? unk_id() : it->second);
        }
      }
    }
    ids.push_back(eos_id());
    return TokenSequence::of(std::move(ids));
  }

  // Concatenates token surfaces. <Pad>/<Bos>/<Eos> are dropped, <Empty>
  // decodes to nothing, every other special (including <Unk>) reproduces its
  // marker verbatim.
  std::string decode(const TokenSequence& seq) const {
    std::string out;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
      int id = seq.ids[i];
      if (id < 0 || id >= size())
        throw DataError("decode: id " + std::to_string(id) +
                        " outside vocabulary of " + std::to_string(size()));
      if (id == pad_id() || id == bos_id() || id == eos_id()) continue;
      if (id == empty_id()) continue;
      out += id_to_token_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int pad_id() const { return 0; }
  int bos_id() const { return 1; }
  int eos_id() const { return 2; }
  int unk_id() const { return 3; }
  int empty_id() const { return 4; }
  int startloc_id() const { return 5; }
  int endloc_id() const { return 6; }

  // Id for a token, or -1 when absent.
  int token_id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? -1 : it->second;
  }

  const std::string& token(int id) const {
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  bool is_special(int id) const {
    return id >= 0 && id < static_cast<int>(specials_.size());
  }

  const std::vector<std::pair<std::string, std::string>>& merges() const {
    return merges_;
  }
  const std::vector<std::string>& specials() const { return specials_; }
  const std::vector<std::string>& alphabet() const { return alphabet_; }

  // -------------------------------------------------------------------------
  // Portable text format:
  //   crepair-bpe v1
  //   merges <N>    followed by N lines "left<TAB>right"
  //   specials <M>  followed by M lines, one token each
  //   alphabet <K>  followed by K lines, one character each
  // Ids are reassigned on load in the canonical order (specials, alphabet,
  // merge outputs), so the file round-trips exactly.
  // -------------------------------------------------------------------------
  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary file: " + path);
    auto check_clean = [](const std::string& t) {
      if (t.find('\t') != std::string::npos || t.find('\n') != std::string::npos)
        throw DataError("vocabulary token contains tab/newline: cannot save");
    };
    out << "crepair-bpe v1\n";
    out << "merges " << merges_.size() << "\n";
    for (const auto& [l, r] : merges_) {
      check_clean(l);
      check_clean(r);
      out << l << "\t" << r << "\n";
    }
    out << "specials " << specials_.size() << "\n";
    for (const std::string& s : specials_) out << s << "\n";
    out << "alphabet " << alphabet_.size() << "\n";
    for (const std::string& c : alphabet_) {
      check_clean(c);
      out << c << "\n";
    }
  }

  static BpeVocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary file: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "crepair-bpe v1")
      throw DataError("vocabulary file " + path + ": bad header");
    BpeVocab vocab;
    auto read_count = [&](const char* section) {
      if (!std::getline(in, line))
        throw DataError("vocabulary file " + path + ": missing " + section);
      std::istringstream is(line);
      std::string tag;
      long long n = -1;
      is >> tag >> n;
      if (tag != section || n < 0)
        throw DataError("vocabulary file " + path + ": bad " +
                        std::string(section) + " header");
      return static_cast<std::size_t>(n);
    };
    std::size_t n_merges = read_count("merges");
    for (std::size_t i = 0; i < n_merges; ++i) {
      if (!std::getline(in, line))
        throw DataError("vocabulary file " + path + ": truncated merges");
      std::size_t tab = line.find('\t');
      if (tab == std::string::npos)
        throw DataError("vocabulary file " + path + ": merge line " +
                        std::to_string(i + 1) + " lacks a tab separator");
      vocab.merges_.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    std::size_t n_specials = read_count("specials");
    for (std::size_t i = 0; i < n_specials; ++i) {
      if (!std::getline(in, line))
        throw DataError("vocabulary file " + path + ": truncated specials");
      vocab.specials_.push_back(line);
    }
    std::size_t n_alpha = read_count("alphabet");
    for (std::size_t i = 0; i < n_alpha; ++i) {
      if (!std::getline(in, line))
        throw DataError("vocabulary file " + path + ": truncated alphabet");
      vocab.alphabet_.push_back(line);
    }
    auto builtins = builtin_specials();
    if (vocab.specials_.size() < builtins.size() ||
        !std::equal(builtins.begin(), builtins.end(), vocab.specials_.begin()))
      throw DataError("vocabulary file " + path +
                      ": reserved specials missing or reordered");
    vocab.assign_ids();
    return vocab;
  }

 private:
  static std::vector<std::string> builtin_specials() {
    return {kPad, kBos, kEos, kUnk, kEmptyPatch, kStartLoc, kEndLoc};
  }

  struct Segment {
    std::string text;
    bool is_special;
  };

  // Leftmost, longest-match scan for special-token surfaces.
  static std::vector<Segment> split_specials(
      const std::string& text, const std::vector<std::string>& specials) {
    std::vector<Segment> segments;
    std::string pending;
    std::size_t i = 0;
    while (i < text.size()) {
      const std::string* hit = nullptr;
      for (const std::string& s : specials) {
        if (s.size() > text.size() - i) continue;
        if ((hit == nullptr || s.size() > hit->size()) &&
            text.compare(i, s.size(), s) == 0)
          hit = &s;
      }
      if (hit != nullptr) {
        if (!pending.empty()) {
          segments.push_back({std::move(pending), false});
          pending.clear();
        }
        segments.push_back({*hit, true});
        i += hit->size();
      } else {
        pending.push_back(text[i]);
        ++i;
      }
    }
    if (!pending.empty()) segments.push_back({std::move(pending), false});
    return segments;
  }

  // Chunks = (optional leading space + run of non-spaces) or a lone space.
  // Merges never span chunk boundaries; concatenating chunks restores the
  // text exactly.
  static std::vector<std::string> chunk_text(const std::string& text) {
    std::vector<std::string> chunks;
    std::size_t i = 0;
    while (i < text.size()) {
      std::size_t start = i;
      if (text[i] == ' ') ++i;
      while (i < text.size() && text[i] != ' ') ++i;
      chunks.push_back(text.substr(start, i - start));
    }
    return chunks;
  }

  static std::vector<std::string> utf8_chars(const std::string& text) {
    std::vector<std::string> chars;
    std::size_t i = 0;
    while (i < text.size()) {
      unsigned char c = static_cast<unsigned char>(text[i]);
      std::size_t len = c < 0x80 ? 1 : c < 0xE0 ? 2 : c < 0xF0 ? 3 : 4;
      len = std::min(len, text.size() - i);
      chars.push_back(text.substr(i, len));
      i += len;
    }
    return chars;
  }

  // Repeatedly applies the earliest-learned merge present in the symbol
  // list; equivalent to replaying the merge list in order.
  void merge_symbols(std::vector<std::string>& symbols) const {
    while (symbols.size() >= 2) {
      int best_rank = -1;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = merge_rank_.find(symbols[i] + "\x01" + symbols[i + 1]);
        if (it != merge_rank_.end() &&
            (best_rank < 0 || it->second < best_rank))
          best_rank = it->second;
      }
      if (best_rank < 0) break;
      const auto& [left, right] = merges_[static_cast<std::size_t>(best_rank)];
      std::vector<std::string> out;
      out.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == left &&
            symbols[i + 1] == right) {
          out.push_back(left + right);
          ++i;
        } else {
          out.push_back(symbols[i]);
        }
      }
      symbols = std::move(out);
    }
  }

  void assign_ids() {
    id_to_token_.clear();
    token_to_id_.clear();
    merge_rank_.clear();
    auto add = [&](const std::string& t) {
      if (token_to_id_.count(t)) return;
      token_to_id_[t] = static_cast<int>(id_to_token_.size());
      id_to_token_.push_back(t);
    };
    for (const std::string& s : specials_) add(s);
    for (const std::string& c : alphabet_) add(c);
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [l, rt] = merges_[r];
      merge_rank_[l + "\x01" + rt] = static_cast<int>(r);
      add(l + rt);
    }
  }

  std::vector<std::string> specials_;
  std::vector<std::string> alphabet_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
  std::unordered_map<std::string, int> merge_rank_;
};

// The per-CWE special tokens are whatever distinct ids the training corpus
// mentions, in sorted order.
inline std::vector<std::string> collect_cwe_specials(
    const std::vector<SampleRecord>& records) {
  std::set<std::string> cwes;
  for (const SampleRecord& rec : records) cwes.insert(rec.cwe_id);
  return {cwes.begin(), cwes.end()};
}

}  // namespace crepair

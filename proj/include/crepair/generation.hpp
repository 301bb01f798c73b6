#pragma once

#include <algorithm>
#include <iostream>
#include <string>
#include <vector>

#include "crepair/bpe.hpp"
#include "crepair/model.hpp"

namespace crepair {

struct CandidatePatch {
  std::string text;
  TokenSequence token_ids;  // full decoded token sequence including <Bos>
  double log_prob = 0.0;
  int rank = 0;
};

struct BeamOptions {
  int beam_width = 50;
  int max_len = 64;  // generated tokens, <Eos> included, <Bos> excluded
  bool length_normalize = false;
  bool sample_latent = false;  // draw Z instead of using mu
  std::uint64_t sample_seed = 0;
};

// Right-truncates an over-long inference input, keeping the <Eos> frame, and
// says so on stderr.
inline TokenSequence truncate_for_inference(const TokenSequence& seq,
                                            int max_len, int eos_id) {
  if (seq.length() <= max_len) return seq;
  std::cerr << "warning: input of " << seq.length()
            << " tokens right-truncated to " << max_len << "\n";
  TokenSequence out;
  out.ids.assign(seq.ids.begin(), seq.ids.begin() + max_len);
  out.mask.assign(seq.mask.begin(), seq.mask.begin() + max_len);
  out.ids.back() = eos_id;
  out.mask.back() = 1;
  return out;
}

struct BeamHypothesis {
  std::vector<int> ids;  // starts with <Bos>
  double score = 0.0;
};

// Length-wise beam search in noise-off mode with the null condition. Each
// step expands every live hypothesis over the vocabulary (<Pad>/<Bos>
// excluded), keeps the beam_width best by cumulative log probability
// (ties to the lower token id), moves <Eos> picks to the completed pool, and
// stops once the pool holds beam_width entries or max_len is hit; leftover
// live hypotheses then pad out the pool. Works at the id level so toy models
// without a trained vocabulary can drive it.
inline std::vector<BeamHypothesis> beam_search_ids(const CrepairModel& model,
                                                   const TokenSequence& input,
                                                   const BeamOptions& opt,
                                                   int pad_id, int bos_id,
                                                   int eos_id) {
  if (opt.beam_width < 1)
    throw UsageError("beam width must be >= 1, got " +
                     std::to_string(opt.beam_width));
  if (opt.max_len < 1) throw UsageError("generation max_len must be >= 1");
  NoGradGuard guard;

  TokenSequence trimmed =
      truncate_for_inference(input, model.config().max_len, eos_id);
  EncoderOutput enc = model.encode_forward(trimmed);
  LatentStats stats = model.latent_stats(enc);
  Rng sample_rng(opt.sample_seed, /*stream=*/0xbea3);
  Tensor z = opt.sample_latent
                 ? model.sample_fused_latent(stats, model.config().sample_count,
                                             &sample_rng)
                 : model.sample_fused_latent(stats, 1, nullptr);
  Tensor c = model.extract_condition(nullptr);

  int vocab_size = model.config().vocab_size;
  int gen_budget = std::min(opt.max_len, model.config().max_len - 1);
  std::vector<BeamHypothesis> live{{{bos_id}, 0.0}};
  std::vector<BeamHypothesis> completed;

  struct Expansion {
    double score;
    int token;
    std::size_t parent;
  };

  for (int step = 0; step < gen_budget; ++step) {
    if (live.empty() ||
        static_cast<int>(completed.size()) >= opt.beam_width)
      break;
    std::vector<Expansion> expansions;
    expansions.reserve(live.size() * static_cast<std::size_t>(vocab_size));
    for (std::size_t h = 0; h < live.size(); ++h) {
      TokenSequence prefix = TokenSequence::of(live[h].ids);
      Tensor logits = model.decode_forward(enc, z, c, prefix);
      int last = logits.dim(0) - 1;
      Tensor lp = log_softmax(slice_rows(logits, last, last + 1));
      for (int v = 0; v < vocab_size; ++v) {
        if (v == pad_id || v == bos_id) continue;
        expansions.push_back({live[h].score + lp.at(0, v), v, h});
      }
    }
    std::sort(expansions.begin(), expansions.end(),
              [](const Expansion& a, const Expansion& b) {
                if (a.score != b.score) return a.score > b.score;
                if (a.token != b.token) return a.token < b.token;
                return a.parent < b.parent;
              });
    std::vector<BeamHypothesis> next_live;
    std::size_t take = std::min(expansions.size(),
                                static_cast<std::size_t>(opt.beam_width));
    for (std::size_t i = 0; i < take; ++i) {
      const Expansion& e = expansions[i];
      BeamHypothesis hyp = live[e.parent];
      hyp.ids.push_back(e.token);
      hyp.score = e.score;
      if (e.token == eos_id)
        completed.push_back(std::move(hyp));
      else
        next_live.push_back(std::move(hyp));
    }
    live = std::move(next_live);
  }

  // Unfinished hypotheses fill the pool when fewer than beam_width ended
  // with <Eos> inside the budget.
  for (BeamHypothesis& hyp : live) {
    if (static_cast<int>(completed.size()) >= opt.beam_width) break;
    completed.push_back(std::move(hyp));
  }

  auto ranking_score = [&](const BeamHypothesis& h) {
    if (!opt.length_normalize) return h.score;
    double generated = static_cast<double>(h.ids.size()) - 1.0;
    return generated > 0.0 ? h.score / generated : h.score;
  };
  std::sort(completed.begin(), completed.end(),
            [&](const BeamHypothesis& a, const BeamHypothesis& b) {
              double sa = ranking_score(a), sb = ranking_score(b);
              if (sa != sb) return sa > sb;
              return a.ids < b.ids;
            });
  if (static_cast<int>(completed.size()) > opt.beam_width)
    completed.resize(static_cast<std::size_t>(opt.beam_width));
  return completed;
}

inline std::vector<CandidatePatch> beam_search(const CrepairModel& model,
                                               const BpeVocab& vocab,
                                               const TokenSequence& input,
                                               const BeamOptions& opt) {
  std::vector<BeamHypothesis> pool =
      beam_search_ids(model, input, opt, vocab.pad_id(), vocab.bos_id(),
                      vocab.eos_id());
  std::vector<CandidatePatch> candidates;
  candidates.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CandidatePatch patch;
    patch.token_ids = TokenSequence::of(pool[i].ids);
    patch.text = vocab.decode(patch.token_ids);
    patch.log_prob = pool[i].score;
    patch.rank = static_cast<int>(i) + 1;
    candidates.push_back(std::move(patch));
  }
  return candidates;
}

// Candidates for one raw record: prompt it, encode, decode with beam search.
inline std::vector<CandidatePatch> repair_record(const CrepairModel& model,
                                                 const BpeVocab& vocab,
                                                 const SampleRecord& rec,
                                                 const BeamOptions& opt,
                                                 PromptMode mode) {
  TokenSequence input = vocab.encode(build_input(rec, mode));
  return beam_search(model, vocab, input, opt);
}

}  // namespace crepair

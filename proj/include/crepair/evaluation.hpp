#pragma once

#include <atomic>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "crepair/generation.hpp"
#include "crepair/training.hpp"

namespace crepair {

// Collapse whitespace runs and trim; a patch that normalizes to nothing is
// the explicit deletion sentinel, so deletions compare equal whether they
// arrive as "" or as "<Empty>".
inline std::string normalize_patch_text(const std::string& text) {
  std::string out;
  bool pending = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending = !out.empty();
    } else {
      if (pending) out.push_back(' ');
      pending = false;
      out.push_back(ch);
    }
  }
  return out.empty() ? kEmptyPatch : out;
}

struct RecordOutcome {
  std::string id;
  int hit_rank = 0;  // 1-based rank of the first exact match, 0 = miss
};

struct EvalResult {
  int total = 0;
  int perfect = 0;
  double ratio = 0.0;
  std::vector<RecordOutcome> outcomes;

  std::string format() const {
    std::ostringstream os;
    os << "evaluated    " << total << "\n"
       << "perfect      " << perfect << "\n"
       << "ratio        " << std::fixed << std::setprecision(4) << ratio
       << "\n";
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write eval results: " + path);
    for (const RecordOutcome& o : outcomes) {
      nlohmann::json j{{"id", o.id}, {"hit_rank", o.hit_rank}};
      out << j.dump() << "\n";
    }
    nlohmann::json summary{{"total", total}, {"perfect", perfect}, {"ratio", ratio}};
    out << summary.dump() << "\n";
  }
};

// A record is perfectly repaired iff any candidate text, whitespace
// normalized, is byte-identical to the normalized target.
inline EvalResult perfect_repair_ratio(
    const std::vector<std::vector<std::string>>& candidates_per_record,
    const std::vector<std::string>& targets,
    const std::vector<std::string>* record_ids = nullptr) {
  if (candidates_per_record.size() != targets.size())
    throw DataError("perfect_repair_ratio: " +
                    std::to_string(candidates_per_record.size()) +
                    " candidate lists for " + std::to_string(targets.size()) +
                    " targets");
  EvalResult result;
  result.total = static_cast<int>(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i].empty())
      throw DataError("perfect_repair_ratio: empty target at index " +
                      std::to_string(i));
    std::string want = normalize_patch_text(targets[i]);
    RecordOutcome outcome;
    outcome.id = record_ids ? (*record_ids)[i] : std::to_string(i);
    for (std::size_t c = 0; c < candidates_per_record[i].size(); ++c) {
      if (normalize_patch_text(candidates_per_record[i][c]) == want) {
        outcome.hit_rank = static_cast<int>(c) + 1;
        ++result.perfect;
        break;
      }
    }
    result.outcomes.push_back(std::move(outcome));
  }
  result.ratio = result.total == 0
                     ? 0.0
                     : static_cast<double>(result.perfect) / result.total;
  return result;
}

// End-to-end scoring of a trained model over raw records. Records decode
// concurrently (parameters are read-only during inference); results are
// gathered by record index, so the outcome is identical to a sequential run.
inline EvalResult evaluate_model(const CrepairModel& model,
                                 const BpeVocab& vocab,
                                 const std::vector<SampleRecord>& records,
                                 const BeamOptions& beam, PromptMode mode) {
  std::vector<std::vector<std::string>> candidates(records.size());
  std::vector<std::string> targets(records.size());
  std::vector<std::string> ids(records.size());

  std::size_t workers = std::min<std::size_t>(
      records.size(), std::max(1u, std::thread::hardware_concurrency()));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::string first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= records.size() || failed.load()) break;
      try {
        std::vector<std::string> texts;
        for (const CandidatePatch& patch :
             repair_record(model, vocab, records[i], beam, mode))
          texts.push_back(patch.text);
        candidates[i] = std::move(texts);
        targets[i] = build_target(records[i]);
        ids[i] = records[i].id;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!failed.exchange(true)) first_error = e.what();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failed.load()) throw DataError("evaluation failed: " + first_error);
  return perfect_repair_ratio(candidates, targets, &ids);
}

// ---------------------------------------------------------------------------
// Experiment harnesses: one tokenizer is trained on the prompted corpus and
// shared across every cell so ids are comparable; each cell trains a fresh
// model under the same seed.
// ---------------------------------------------------------------------------

struct HarnessConfig {
  ModelConfig model;       // vocab_size filled in by the harness
  TrainConfig train;
  int vocab_budget = 2000;
  double valid_fraction = 0.1238;
  int beam_width = 10;
  int gen_max_len = 48;
};

namespace detail {

struct PreparedCorpus {
  BpeVocab vocab;
  DatasetSplit split;
};

inline PreparedCorpus prepare_corpus(const std::vector<SampleRecord>& train_records,
                                     const HarnessConfig& cfg) {
  std::vector<std::string> texts;
  for (const SampleRecord& rec : train_records) {
    PromptedExample ex = build_prompted(rec, PromptMode::kPrompted);
    texts.push_back(ex.input_text);
    texts.push_back(ex.target_text);
  }
  PreparedCorpus prep{
      BpeVocab::train(texts, cfg.vocab_budget, collect_cwe_specials(train_records)),
      split_train_valid(train_records, cfg.valid_fraction, cfg.train.seed)};
  return prep;
}

}  // namespace detail

// Trains one model and reports its perfect-repair ratio on the test records.
inline double train_and_score(const std::vector<SampleRecord>& train_records,
                              const std::vector<SampleRecord>& test_records,
                              const HarnessConfig& cfg, bool multi_sample,
                              PromptMode mode) {
  detail::PreparedCorpus prep = detail::prepare_corpus(train_records, cfg);
  ModelConfig mcfg = cfg.model;
  mcfg.vocab_size = prep.vocab.size();
  CrepairModel model(mcfg, cfg.train.seed);
  auto train_set = encode_examples(prep.split.train, prep.vocab, mode, mcfg.max_len);
  auto valid_set = encode_examples(prep.split.valid, prep.vocab, mode, mcfg.max_len);
  train(model, cfg.train, train_set, valid_set, multi_sample);
  BeamOptions beam;
  beam.beam_width = cfg.beam_width;
  beam.max_len = cfg.gen_max_len;
  return evaluate_model(model, prep.vocab, test_records, beam, mode).ratio;
}

// 2x2 ablation over {multi-sampling, prompting}. Cell names follow the
// sampling-first convention: MP = multi-sampling + prompts, NP = no sampling
// + prompts, MN = multi-sampling + no prompts, NN = neither.
struct AblationResult {
  double mp = 0, np = 0, mn = 0, nn = 0;

  std::string format() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "cell   prompts   sampling   ratio\n";
    os << "MP     yes       multi      " << mp << "\n";
    os << "NP     yes       none       " << np << "\n";
    os << "MN     no        multi      " << mn << "\n";
    os << "NN     no        none       " << nn << "\n";
    os << "full-scale reference (CVEFixes/Big-Vul): MP 0.5189, NP 0.4621, "
          "MN 0.4304, NN 0.3834\n";
    return os.str();
  }
};

inline nlohmann::json ablation_row(std::uint64_t seed, const AblationResult& r) {
  return {{"seed", seed}, {"mp", r.mp}, {"np", r.np}, {"mn", r.mn}, {"nn", r.nn}};
}

inline AblationResult run_ablation(const std::vector<SampleRecord>& train_records,
                                   const std::vector<SampleRecord>& test_records,
                                   const HarnessConfig& cfg) {
  AblationResult result;
  result.mp = train_and_score(train_records, test_records, cfg, true,
                              PromptMode::kPrompted);
  result.np = train_and_score(train_records, test_records, cfg, false,
                              PromptMode::kPrompted);
  result.mn = train_and_score(train_records, test_records, cfg, true,
                              PromptMode::kStripped);
  result.nn = train_and_score(train_records, test_records, cfg, false,
                              PromptMode::kStripped);
  return result;
}

// Sample-size sweep: one model per fusion count, shared seed and data.
struct SweepRow {
  int sample_count = 0;
  double ratio = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  int best_index = 0;

  std::string format() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "samples   ratio\n";
    for (std::size_t i = 0; i < rows.size(); ++i)
      os << std::setw(7) << rows[i].sample_count << "   " << rows[i].ratio
         << (static_cast<int>(i) == best_index ? "  <- best" : "") << "\n";
    os << "full-scale reference (CVEFixes/Big-Vul): 1 -> 0.4634, 3 -> 0.4716, "
          "5 -> 0.5086, 7 -> 0.4825, 9 -> 0.4847\n";
    return os.str();
  }
};

inline nlohmann::json sweep_row(std::uint64_t seed, const SweepRow& row,
                                bool best) {
  return {{"seed", seed},
          {"sample_count", row.sample_count},
          {"ratio", row.ratio},
          {"best", best}};
}

inline SweepResult run_sample_sweep(const std::vector<SampleRecord>& train_records,
                                    const std::vector<SampleRecord>& test_records,
                                    const HarnessConfig& cfg,
                                    const std::vector<int>& sample_counts) {
  if (sample_counts.empty())
    throw UsageError("sample sweep: no sample counts given");
  SweepResult result;
  for (int n : sample_counts) {
    if (n < 1) throw UsageError("sample sweep: counts must be >= 1");
    HarnessConfig cell = cfg;
    cell.model.sample_count = n;
    SweepRow row{n, train_and_score(train_records, test_records, cell, true,
                                    PromptMode::kPrompted)};
    result.rows.push_back(row);
  }
  for (std::size_t i = 1; i < result.rows.size(); ++i)
    if (result.rows[i].ratio > result.rows[static_cast<std::size_t>(result.best_index)].ratio)
      result.best_index = static_cast<int>(i);
  return result;
}

}  // namespace crepair

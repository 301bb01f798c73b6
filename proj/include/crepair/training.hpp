#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "crepair/corpus.hpp"
#include "crepair/model.hpp"
#include "crepair/preproc.hpp"

namespace crepair {

struct TrainConfig {
  int epochs = 20;
  double learning_rate = 1e-3;
  int batch_size = 16;
  double kl_warmup_fraction = 0.2;
  double condition_dropout = 0.3;  // probability of training on the null condition
  std::uint64_t seed = 1;
  std::string checkpoint_dir;
  double grad_clip = 1.0;

  void validate() const {
    if (epochs < 1) throw DataError("train config: epochs must be >= 1");
    if (!(learning_rate > 0.0 && learning_rate < 1.0))
      throw DataError("train config: learning rate must be in (0, 1)");
    if (batch_size < 1) throw DataError("train config: batch_size must be >= 1");
    if (kl_warmup_fraction < 0.0 || kl_warmup_fraction > 1.0)
      throw DataError("train config: kl_warmup_fraction must be in [0, 1]");
    if (condition_dropout < 0.0 || condition_dropout > 1.0)
      throw DataError("train config: condition_dropout must be in [0, 1]");
  }
};

struct EpochMetrics {
  double train_total = 0, train_rc = 0, train_kl = 0;
  double valid_total = 0, valid_rc = 0, valid_kl = 0;
  double seconds = 0;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  int best_epoch = 0;  // zero-based index into `epochs`

  std::string format() const {
    std::ostringstream os;
    os << "epoch   train        rc        kl     valid        rc        kl   seconds\n";
    for (std::size_t e = 0; e < epochs.size(); ++e) {
      const EpochMetrics& m = epochs[e];
      os << std::setw(5) << e + 1 << std::fixed << std::setprecision(4)
         << std::setw(10) << m.train_total << std::setw(10) << m.train_rc
         << std::setw(10) << m.train_kl << std::setw(10) << m.valid_total
         << std::setw(10) << m.valid_rc << std::setw(10) << m.valid_kl
         << std::setprecision(1) << std::setw(10) << m.seconds << "\n";
    }
    os << "best epoch " << best_epoch + 1 << " (validation loss "
       << std::setprecision(4) << epochs[static_cast<std::size_t>(best_epoch)].valid_total
       << ")\n";
    return os.str();
  }

  void save_metrics(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write metrics file: " + path);
    for (std::size_t e = 0; e < epochs.size(); ++e) {
      const EpochMetrics& m = epochs[e];
      nlohmann::json j{{"epoch", e + 1},
                       {"train_total", m.train_total},
                       {"train_rc", m.train_rc},
                       {"train_kl", m.train_kl},
                       {"valid_total", m.valid_total},
                       {"valid_rc", m.valid_rc},
                       {"valid_kl", m.valid_kl},
                       {"seconds", m.seconds},
                       {"best", static_cast<int>(e) == best_epoch}};
      out << j.dump() << "\n";
    }
  }
};

// ---------------------------------------------------------------------------
// Adam with bias correction. Moment slots are keyed by position in the
// parameter store, which is fixed for a model's lifetime.
// ---------------------------------------------------------------------------
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                         double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& params) {
    auto& entries = params.entries();
    if (m_.empty()) {
      m_.resize(entries.size());
      v_.resize(entries.size());
      for (std::size_t i = 0; i < entries.size(); ++i) {
        m_[i].assign(static_cast<std::size_t>(entries[i].second.size()), 0.0);
        v_[i].assign(static_cast<std::size_t>(entries[i].second.size()), 0.0);
      }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      Tensor& p = entries[i].second;
      const std::vector<double>& g = p.grad();
      double* value = p.data_mut();
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (!std::isfinite(g[j]))
          throw NumericError("adam: non-finite gradient in " + entries[i].first);
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params.entries())
    for (double g : p.grad()) sq += g * g;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double factor = max_norm / norm;
    for (auto& [name, p] : params.entries())
      for (double& g : p.grad_mut()) g *= factor;
  }
  return norm;
}

// Linear warm-up: weight at optimizer step s (1-based) out of total_steps.
inline double kl_weight_at(std::int64_t step, std::int64_t total_steps,
                           double warmup_fraction) {
  double horizon = warmup_fraction * static_cast<double>(total_steps);
  if (horizon <= 0.0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / horizon);
}

// ---------------------------------------------------------------------------
// Batching: pre-encoded examples, shuffled each epoch, locally sorted by
// input length inside a shuffle window so batches see similar lengths, then
// batch order reshuffled. All draws come from the run's seed.
// ---------------------------------------------------------------------------
struct EncodedExample {
  TokenSequence input;
  TokenSequence target;
};

inline std::vector<EncodedExample> encode_examples(
    const std::vector<SampleRecord>& records, const BpeVocab& vocab,
    PromptMode mode, int max_len) {
  std::vector<EncodedExample> out;
  out.reserve(records.size());
  for (const SampleRecord& rec : records) {
    PromptedExample prompted = build_prompted(rec, mode);
    EncodedExample ex{vocab.encode(prompted.input_text),
                      vocab.encode(prompted.target_text)};
    if (ex.input.length() > max_len || ex.target.length() > max_len)
      throw DataError("record " + rec.id + " exceeds max_len " +
                      std::to_string(max_len) + " after tokenization");
    out.push_back(std::move(ex));
  }
  return out;
}

// Length bucketing: stable-sort each shuffle window of 8 batches by input
// length before chunking.
inline std::vector<std::vector<std::size_t>> make_length_batches(
    const std::vector<EncodedExample>& examples, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  std::size_t window = static_cast<std::size_t>(batch_size) * 8;
  for (std::size_t at = 0; at < order.size(); at += window) {
    std::size_t end = std::min(order.size(), at + window);
    std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(at),
                     order.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) {
                       return examples[a].input.length() <
                              examples[b].input.length();
                     });
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < order.size();
       at += static_cast<std::size_t>(batch_size)) {
    std::size_t end =
        std::min(order.size(), at + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  shuffle(batches, rng);
  return batches;
}

struct ForwardOptions {
  int sample_count = 1;
  bool noise_off = false;
  bool null_condition = false;
};

// One full training/evaluation forward pass for a single example.
inline LossParts example_loss(const CrepairModel& model,
                              const EncodedExample& ex,
                              const ForwardOptions& opt, double kl_weight,
                              Rng* rng) {
  EncoderOutput enc = model.encode_forward(ex.input);
  LatentStats stats = model.latent_stats(enc);
  Tensor z = model.sample_fused_latent(stats, opt.sample_count,
                                       opt.noise_off ? nullptr : rng);
  Tensor c = model.extract_condition(opt.null_condition ? nullptr : &ex.target);
  Tensor logits = model.decode_forward(enc, z, c, ex.target);
  return model.loss(logits, ex.target, stats, kl_weight);
}

// ---------------------------------------------------------------------------
// The optimization loop. Per batch: accumulate example gradients, average,
// clip, Adam. Validation runs noise-off with the null condition after every
// epoch; the best-validation parameter snapshot is restored at the end.
// ---------------------------------------------------------------------------
inline TrainReport train(CrepairModel& model, const TrainConfig& tcfg,
                         const std::vector<EncodedExample>& train_set,
                         const std::vector<EncodedExample>& valid_set,
                         bool multi_sample = true) {
  tcfg.validate();
  if (train_set.empty()) throw DataError("train: empty training set");
  const ModelConfig& mcfg = model.config();
  Rng rng(tcfg.seed, /*stream=*/0x7124);
  AdamOptimizer adam(tcfg.learning_rate);

  std::int64_t steps_per_epoch =
      static_cast<std::int64_t>((train_set.size() + tcfg.batch_size - 1) /
                                static_cast<std::size_t>(tcfg.batch_size));
  std::int64_t total_steps = steps_per_epoch * tcfg.epochs;
  std::int64_t step = 0;

  TrainReport report;
  double best_valid = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_snapshot;

  ForwardOptions train_opt;
  train_opt.sample_count = multi_sample ? mcfg.sample_count : 1;
  train_opt.noise_off = !multi_sample;

  ForwardOptions valid_opt;
  valid_opt.sample_count = 1;
  valid_opt.noise_off = true;
  valid_opt.null_condition = true;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    auto batches = make_length_batches(train_set, tcfg.batch_size, rng);
    double sum_total = 0, sum_rc = 0, sum_kl = 0;
    std::int64_t seen = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      ++step;
      double klw = kl_weight_at(step, total_steps, tcfg.kl_warmup_fraction);
      bool use_null = rng.next_uniform() < tcfg.condition_dropout;
      model.params().zero_grads();
      ForwardOptions opt = train_opt;
      opt.null_condition = use_null;
      double inv = 1.0 / static_cast<double>(batches[b].size());
      try {
        for (std::size_t idx : batches[b]) {
          LossParts parts = example_loss(model, train_set[idx], opt, klw, &rng);
          sum_total += parts.total.item();
          sum_rc += parts.rc.item();
          sum_kl += parts.kl.item();
          ++seen;
          backward(scale(parts.total, inv));
        }
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " +
                           std::to_string(epoch + 1) + ", batch " +
                           std::to_string(b + 1) + ": " + e.what());
      }
      clip_grad_norm(model.params(), tcfg.grad_clip);
      adam.step(model.params());
    }

    EpochMetrics m;
    m.train_total = sum_total / static_cast<double>(seen);
    m.train_rc = sum_rc / static_cast<double>(seen);
    m.train_kl = sum_kl / static_cast<double>(seen);
    if (valid_set.empty()) {
      m.valid_total = m.train_total;
      m.valid_rc = m.train_rc;
      m.valid_kl = m.train_kl;
    } else {
      NoGradGuard guard;
      double vt = 0, vr = 0, vk = 0;
      for (const EncodedExample& ex : valid_set) {
        LossParts parts = example_loss(model, ex, valid_opt, 1.0, nullptr);
        vt += parts.total.item();
        vr += parts.rc.item();
        vk += parts.kl.item();
      }
      m.valid_total = vt / static_cast<double>(valid_set.size());
      m.valid_rc = vr / static_cast<double>(valid_set.size());
      m.valid_kl = vk / static_cast<double>(valid_set.size());
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(m);

    if (m.valid_total < best_valid) {
      best_valid = m.valid_total;
      report.best_epoch = epoch;
      best_snapshot.clear();
      for (const auto& [name, p] : model.params().entries())
        best_snapshot.push_back(p.values());
    }
  }

  // Restore the best-validation snapshot.
  if (!best_snapshot.empty()) {
    auto& entries = model.params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      double* dst = entries[i].second.data_mut();
      std::copy(best_snapshot[i].begin(), best_snapshot[i].end(), dst);
    }
  }

  if (!tcfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(tcfg.checkpoint_dir);
    model.save(tcfg.checkpoint_dir + "/model.ckpt");
    report.save_metrics(tcfg.checkpoint_dir + "/metrics.jsonl");
  }
  return report;
}

}  // namespace crepair

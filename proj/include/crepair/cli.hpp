#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crepair/config.hpp"
#include "crepair/synth.hpp"

namespace crepair {

namespace cli_detail {

inline std::string slurp_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open input file: " + path);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

inline std::pair<int, int> parse_span(const std::string& span) {
  std::size_t colon = span.find(':');
  if (colon == std::string::npos)
    throw UsageError("span must be start:end, got '" + span + "'");
  try {
    int start = std::stoi(span.substr(0, colon));
    int end = std::stoi(span.substr(colon + 1));
    return {start, end};
  } catch (const std::exception&) {
    throw UsageError("span must be start:end with integers, got '" + span + "'");
  }
}

inline std::vector<std::uint64_t> parse_u64_list(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::istringstream is(csv);
  std::string item;
  while (std::getline(is, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw UsageError("bad list entry '" + item + "' in '" + csv + "'");
    }
  }
  if (out.empty()) throw UsageError("empty list: '" + csv + "'");
  return out;
}

inline std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  for (std::uint64_t v : parse_u64_list(csv)) out.push_back(static_cast<int>(v));
  return out;
}

inline void log_run_header(const RunConfig& cfg, const char* command) {
  std::cerr << "crepair " << command << " seed=" << cfg.train.seed
            << " config=" << cfg.to_json().dump() << "\n";
}

inline void require_readable(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " path required");
  if (!std::filesystem::exists(path))
    throw DataError(std::string(what) + " not found: " + path);
}

inline std::vector<std::string> prompted_texts(
    const std::vector<SampleRecord>& records) {
  std::vector<std::string> texts;
  texts.reserve(records.size() * 2);
  for (const SampleRecord& rec : records) {
    PromptedExample ex = build_prompted(rec);
    texts.push_back(ex.input_text);
    texts.push_back(ex.target_text);
  }
  return texts;
}

}  // namespace cli_detail

// Dispatches one command line (program name excluded). Exit codes: 0 ok,
// 1 usage, 2 data, 3 numeric.
inline int run_cli(std::vector<std::string> args) {
  using cli_detail::log_run_header;
  using cli_detail::require_readable;

  try {
    // Resolve preset defaults, then the seed fallback, then the config
    // file, then explicit flags (bound below; unset flags keep values).
    std::string preset = "toy";
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
      auto value_of = [&](const std::string& flag) -> std::string {
        const std::string& a = args[i];
        if (a.rfind(flag + "=", 0) == 0) return a.substr(flag.size() + 1);
        if (a == flag && i + 1 < args.size()) return args[i + 1];
        return "";
      };
      std::string v = value_of("--preset");
      if (!v.empty()) preset = v;
      v = value_of("--config");
      if (!v.empty()) config_path = v;
    }
    RunConfig cfg = RunConfig::for_preset(preset);
    if (const char* env_seed = std::getenv("CREPAIR_SEED")) {
      try {
        cfg.train.seed = std::stoull(env_seed);
      } catch (const std::exception&) {
        throw UsageError(std::string("CREPAIR_SEED is not an integer: ") + env_seed);
      }
    }
    if (!config_path.empty()) cfg.apply_file(config_path);

    CLI::App app{"CRepair: prompt-conditioned CVAE repair of vulnerable code"};
    app.set_version_flag("--version",
                         "crepair checkpoint format v" +
                             std::to_string(kCheckpointVersion));
    app.require_subcommand(1);
    std::string ignore;
    app.add_option("--preset", ignore, "preset: toy, trend, paper");
    app.add_option("--config", ignore, "flat JSON config file");

    auto add_common = [&](CLI::App* sub) {
      sub->add_option("--preset", ignore, "preset: toy, trend, paper");
      sub->add_option("--config", ignore, "flat JSON config file");
      sub->add_option("--seed", cfg.train.seed, "run seed");
    };
    auto add_model_flags = [&](CLI::App* sub) {
      sub->add_option("--d-model", cfg.model.d_model);
      sub->add_option("--heads", cfg.model.n_heads);
      sub->add_option("--enc-layers", cfg.model.n_enc_layers);
      sub->add_option("--dec-layers", cfg.model.n_dec_layers);
      sub->add_option("--ffn-dim", cfg.model.ffn_dim);
      sub->add_option("--latent-dim", cfg.model.latent_dim);
      sub->add_option("--model-max-len", cfg.model.max_len);
      sub->add_option("--sample-count", cfg.model.sample_count);
      sub->add_option("--epochs", cfg.train.epochs);
      sub->add_option("--learning-rate", cfg.train.learning_rate);
      sub->add_option("--batch-size", cfg.train.batch_size);
      sub->add_option("--kl-warmup", cfg.train.kl_warmup_fraction);
      sub->add_option("--condition-dropout", cfg.train.condition_dropout);
      sub->add_option("--valid-fraction", cfg.valid_fraction);
      sub->add_option("--vocab-size", cfg.vocab_budget);
    };

    // gen-synthetic
    int count = 0;
    auto* gen = app.add_subcommand("gen-synthetic",
                                   "generate a synthetic bug-pair corpus");
    add_common(gen);
    gen->add_option("--count", count, "number of records")->required();
    gen->add_option("--out", cfg.out, "output corpus file")->required();

    // stats
    auto* stats = app.add_subcommand("stats", "corpus statistics report");
    add_common(stats);
    stats->add_option("--corpus", cfg.corpus)->required();
    stats->add_option("--vocab", cfg.vocab,
                      "measure prompted token lengths with this vocabulary");
    stats->add_option("--max-len", cfg.model.max_len, "sequence-length limit");

    // preprocess
    bool stripped = false;
    auto* preprocess = app.add_subcommand(
        "preprocess", "dump prompted examples as line-delimited text");
    add_common(preprocess);
    preprocess->add_option("--corpus", cfg.corpus)->required();
    preprocess->add_option("--out", cfg.out)->required();
    preprocess->add_flag("--no-prompt", stripped, "strip prompt elements");

    // train-tokenizer
    auto* train_tok = app.add_subcommand("train-tokenizer",
                                         "learn a BPE vocabulary");
    add_common(train_tok);
    train_tok->add_option("--corpus", cfg.corpus)->required();
    train_tok->add_option("--vocab-size", cfg.vocab_budget);
    train_tok->add_option("--out", cfg.out)->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "train a repair model");
    add_common(train_cmd);
    add_model_flags(train_cmd);
    train_cmd->add_option("--corpus", cfg.corpus);
    train_cmd->add_option("--vocab", cfg.vocab);
    train_cmd->add_option("--out", cfg.out, "checkpoint/metrics directory");

    // repair
    std::string input_path, cwe_id, span_text;
    auto* repair = app.add_subcommand("repair",
                                      "rank candidate patches for one function");
    add_common(repair);
    repair->add_option("--checkpoint", cfg.checkpoint)->required();
    repair->add_option("--vocab", cfg.vocab)->required();
    repair->add_option("--input", input_path, "file with the vulnerable function")
        ->required();
    repair->add_option("--cwe", cwe_id, "CWE id, e.g. CWE-787")->required();
    repair->add_option("--span", span_text, "vulnerable span start:end")
        ->required();
    repair->add_option("--beam", cfg.beam_width, "beam width");
    repair->add_option("--max-len", cfg.gen_max_len, "generation budget");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "perfect-repair evaluation");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", cfg.checkpoint);
    eval_cmd->add_option("--vocab", cfg.vocab);
    eval_cmd->add_option("--corpus", cfg.corpus, "test corpus");
    eval_cmd->add_option("--beam", cfg.beam_width);
    eval_cmd->add_option("--max-len", cfg.gen_max_len);
    eval_cmd->add_option("--out", cfg.out, "per-record results file");
    eval_cmd->add_flag("--no-prompt", stripped, "evaluate without prompts");

    // ablate
    std::string seeds_text = "1";
    auto* ablate = app.add_subcommand(
        "ablate", "2x2 sampling/prompting ablation (trains 4 models per seed)");
    add_common(ablate);
    add_model_flags(ablate);
    ablate->add_option("--corpus", cfg.corpus, "training corpus");
    ablate->add_option("--test", cfg.test_corpus, "held-out corpus");
    ablate->add_option("--seeds", seeds_text, "comma-separated seed list");
    ablate->add_option("--beam", cfg.beam_width);
    ablate->add_option("--max-len", cfg.gen_max_len);
    ablate->add_option("--out", cfg.out, "machine-readable rows (one per seed)");

    // sweep
    std::string counts_text = "1,3,5,7,9";
    auto* sweep = app.add_subcommand(
        "sweep", "fusion sample-count sweep (trains one model per count)");
    add_common(sweep);
    add_model_flags(sweep);
    sweep->add_option("--corpus", cfg.corpus, "training corpus");
    sweep->add_option("--test", cfg.test_corpus, "held-out corpus");
    sweep->add_option("--counts", counts_text, "comma-separated sample counts");
    sweep->add_option("--seeds", seeds_text, "comma-separated seed list");
    sweep->add_option("--beam", cfg.beam_width);
    sweep->add_option("--max-len", cfg.gen_max_len);
    sweep->add_option("--out", cfg.out, "machine-readable rows (one per cell)");

    std::vector<const char*> argv;
    argv.push_back("crepair");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      std::cerr << "usage error: " << e.what() << "\n";
      std::cerr << app.help() << "\n";
      return 1;
    }

    if (gen->parsed()) {
      log_run_header(cfg, "gen-synthetic");
      auto records = gen_synthetic(count, cfg.train.seed);
      save_dataset(records, cfg.out);
      std::cout << "wrote " << records.size() << " records to " << cfg.out
                << "\n";
      return 0;
    }

    if (stats->parsed()) {
      log_run_header(cfg, "stats");
      require_readable(cfg.corpus, "corpus");
      auto records = load_dataset(cfg.corpus, "stats");
      CorpusStats report;
      if (!cfg.vocab.empty()) {
        require_readable(cfg.vocab, "vocabulary");
        BpeVocab vocab = BpeVocab::load(cfg.vocab);
        report = compute_stats(
            records,
            [&](const SampleRecord& rec) {
              return vocab.encode(build_input(rec)).length();
            },
            cfg.model.max_len, "tokens");
      } else {
        report = compute_stats(
            records,
            [](const SampleRecord& rec) {
              return static_cast<int>(rec.vulnerable_code.size());
            },
            cfg.model.max_len, "chars");
      }
      std::cout << format_stats(report);
      return 0;
    }

    if (preprocess->parsed()) {
      log_run_header(cfg, "preprocess");
      require_readable(cfg.corpus, "corpus");
      auto records = load_dataset(cfg.corpus, "preprocess");
      std::ofstream out(cfg.out);
      if (!out) throw DataError("cannot write output file: " + cfg.out);
      PromptMode mode = stripped ? PromptMode::kStripped : PromptMode::kPrompted;
      for (const SampleRecord& rec : records) {
        PromptedExample ex = build_prompted(rec, mode);
        nlohmann::json j{{"id", rec.id},
                         {"input_text", ex.input_text},
                         {"target_text", ex.target_text}};
        out << j.dump() << "\n";
      }
      std::cout << "wrote " << records.size() << " prompted examples to "
                << cfg.out << "\n";
      return 0;
    }

    if (train_tok->parsed()) {
      log_run_header(cfg, "train-tokenizer");
      require_readable(cfg.corpus, "corpus");
      auto records = load_dataset(cfg.corpus, "train");
      std::cout << "loaded " << records.size() << " records\n";
      BpeVocab vocab = BpeVocab::train(cli_detail::prompted_texts(records),
                                       cfg.vocab_budget,
                                       collect_cwe_specials(records));
      vocab.save(cfg.out);
      std::cout << "vocabulary: " << vocab.size() << " tokens ("
                << vocab.merges().size() << " merges, "
                << vocab.specials().size() << " specials) -> " << cfg.out
                << "\n";
      return 0;
    }

    if (train_cmd->parsed()) {
      log_run_header(cfg, "train");
      require_readable(cfg.corpus, "corpus");
      require_readable(cfg.vocab, "vocabulary");
      if (cfg.out.empty()) throw UsageError("train: --out directory required");
      std::filesystem::create_directories(cfg.out);
      auto records = load_dataset(cfg.corpus, "train");
      std::cout << "loaded " << records.size() << " records\n";
      BpeVocab vocab = BpeVocab::load(cfg.vocab);
      DatasetSplit split =
          split_train_valid(records, cfg.valid_fraction, cfg.train.seed);
      std::cout << "split: " << split.train.size() << " train, "
                << split.valid.size() << " valid\n";
      ModelConfig mcfg = cfg.model;
      mcfg.vocab_size = vocab.size();
      CrepairModel model(mcfg, cfg.train.seed);
      auto train_set =
          encode_examples(split.train, vocab, PromptMode::kPrompted, mcfg.max_len);
      auto valid_set =
          encode_examples(split.valid, vocab, PromptMode::kPrompted, mcfg.max_len);
      TrainConfig tcfg = cfg.train;
      tcfg.checkpoint_dir = cfg.out;
      TrainReport report = train(model, tcfg, train_set, valid_set);
      std::cout << report.format();
      std::cout << "checkpoint: " << cfg.out << "/model.ckpt\n";
      return 0;
    }

    if (repair->parsed()) {
      log_run_header(cfg, "repair");
      auto [start, end] = cli_detail::parse_span(span_text);
      require_readable(cfg.checkpoint, "checkpoint");
      require_readable(cfg.vocab, "vocabulary");
      require_readable(input_path, "input");
      CrepairModel model = CrepairModel::load(cfg.checkpoint);
      BpeVocab vocab = BpeVocab::load(cfg.vocab);
      SampleRecord rec;
      rec.id = input_path;
      rec.vulnerable_code = cli_detail::slurp_file(input_path);
      rec.fixed_code = rec.vulnerable_code;  // unknown; only the input side is used
      rec.cwe_id = cwe_id;
      rec.vuln_start = start;
      rec.vuln_end = end;
      validate_record(rec);
      BeamOptions beam;
      beam.beam_width = cfg.beam_width;
      beam.max_len = cfg.gen_max_len;
      auto candidates =
          repair_record(model, vocab, rec, beam, PromptMode::kPrompted);
      std::cout << "rank  log_prob      patch\n";
      for (const CandidatePatch& patch : candidates) {
        std::ostringstream line;
        line << std::setw(4) << patch.rank << "  " << std::fixed
             << std::setprecision(4) << std::setw(10) << patch.log_prob << "  "
             << (patch.text.empty() ? std::string(kEmptyPatch) : patch.text);
        std::cout << line.str() << "\n";
      }
      return 0;
    }

    if (eval_cmd->parsed()) {
      log_run_header(cfg, "eval");
      require_readable(cfg.checkpoint, "checkpoint");
      require_readable(cfg.vocab, "vocabulary");
      require_readable(cfg.corpus, "corpus");
      CrepairModel model = CrepairModel::load(cfg.checkpoint);
      BpeVocab vocab = BpeVocab::load(cfg.vocab);
      auto records = load_dataset(cfg.corpus, "test");
      std::cout << "loaded " << records.size() << " test records\n";
      BeamOptions beam;
      beam.beam_width = cfg.beam_width;
      beam.max_len = cfg.gen_max_len;
      PromptMode mode = stripped ? PromptMode::kStripped : PromptMode::kPrompted;
      EvalResult result = evaluate_model(model, vocab, records, beam, mode);
      std::cout << result.format();
      if (!cfg.out.empty()) {
        result.save(cfg.out);
        std::cout << "per-record results: " << cfg.out << "\n";
      }
      return 0;
    }

    if (ablate->parsed()) {
      log_run_header(cfg, "ablate");
      require_readable(cfg.corpus, "corpus");
      require_readable(cfg.test_corpus, "test corpus");
      auto train_records = load_dataset(cfg.corpus, "train");
      auto test_records = load_dataset(cfg.test_corpus, "test");
      std::cout << "loaded " << train_records.size() << " train / "
                << test_records.size() << " test records\n";
      std::ofstream rows;
      if (!cfg.out.empty()) {
        rows.open(cfg.out);
        if (!rows) throw DataError("cannot write output file: " + cfg.out);
      }
      for (std::uint64_t seed : cli_detail::parse_u64_list(seeds_text)) {
        HarnessConfig h = cfg.harness();
        h.train.seed = seed;
        AblationResult result = run_ablation(train_records, test_records, h);
        std::cout << "seed " << seed << "\n" << result.format() << "\n";
        if (rows.is_open()) rows << ablation_row(seed, result).dump() << "\n";
      }
      return 0;
    }

    if (sweep->parsed()) {
      log_run_header(cfg, "sweep");
      require_readable(cfg.corpus, "corpus");
      require_readable(cfg.test_corpus, "test corpus");
      auto train_records = load_dataset(cfg.corpus, "train");
      auto test_records = load_dataset(cfg.test_corpus, "test");
      std::cout << "loaded " << train_records.size() << " train / "
                << test_records.size() << " test records\n";
      std::vector<int> counts = cli_detail::parse_int_list(counts_text);
      std::ofstream rows;
      if (!cfg.out.empty()) {
        rows.open(cfg.out);
        if (!rows) throw DataError("cannot write output file: " + cfg.out);
      }
      for (std::uint64_t seed : cli_detail::parse_u64_list(seeds_text)) {
        HarnessConfig h = cfg.harness();
        h.train.seed = seed;
        SweepResult result = run_sample_sweep(train_records, test_records, h, counts);
        std::cout << "seed " << seed << "\n" << result.format() << "\n";
        if (rows.is_open())
          for (std::size_t i = 0; i < result.rows.size(); ++i)
            rows << sweep_row(seed, result.rows[i],
                              static_cast<int>(i) == result.best_index)
                        .dump()
                 << "\n";
      }
      return 0;
    }

    std::cerr << app.help() << "\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace crepair

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "crepair/cli.hpp"

using namespace crepair;

namespace {

const std::string kDir = "/tmp/crepair_cli_test";

void reset_dir() {
  std::filesystem::remove_all(kDir);
  std::filesystem::create_directories(kDir);
}

int cli(std::initializer_list<std::string> args) {
  return run_cli(std::vector<std::string>(args));
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

}  // namespace

TEST_CASE("gen-synthetic with count 0 exits 0 and writes an empty file") {
  reset_dir();
  REQUIRE(cli({"gen-synthetic", "--count", "0", "--seed", "1", "--out",
               kDir + "/d.jsonl"}) == 0);
  REQUIRE(std::filesystem::file_size(kDir + "/d.jsonl") == 0);
}

TEST_CASE("a missing config file exits 2 and names the path") {
  REQUIRE(cli({"train", "--config", "missing.json"}) == 2);
}

TEST_CASE("unknown flags and subcommands exit 1") {
  REQUIRE(cli({"gen-synthetic", "--count", "1", "--out", "/tmp/x.jsonl",
               "--definitely-not-a-flag"}) == 1);
  REQUIRE(cli({"frobnicate"}) == 1);
  REQUIRE(cli({}) == 1);
}

TEST_CASE("a malformed span exits 1") {
  reset_dir();
  std::ofstream(kDir + "/f.c") << "int x;";
  // Checkpoint/vocab existence is checked after flag syntax, so create them.
  std::ofstream(kDir + "/fake.ckpt") << "x";
  std::ofstream(kDir + "/fake_vocab.txt") << "x";
  REQUIRE(cli({"repair", "--checkpoint", kDir + "/fake.ckpt", "--vocab",
               kDir + "/fake_vocab.txt", "--input", kDir + "/f.c", "--cwe",
               "CWE-787", "--span", "oops"}) == 1);
}

TEST_CASE("the full pipeline runs through the CLI") {
  reset_dir();
  REQUIRE(cli({"gen-synthetic", "--count", "60", "--seed", "3", "--out",
               kDir + "/train.jsonl"}) == 0);
  REQUIRE(cli({"gen-synthetic", "--count", "12", "--seed", "4", "--out",
               kDir + "/test.jsonl"}) == 0);
  REQUIRE(cli({"train-tokenizer", "--corpus", kDir + "/train.jsonl",
               "--vocab-size", "320", "--out", kDir + "/vocab.txt"}) == 0);
  REQUIRE(cli({"stats", "--corpus", kDir + "/train.jsonl", "--vocab",
               kDir + "/vocab.txt"}) == 0);
  REQUIRE(cli({"preprocess", "--corpus", kDir + "/train.jsonl", "--out",
               kDir + "/prompted.jsonl"}) == 0);
  std::string prompted = slurp(kDir + "/prompted.jsonl");
  REQUIRE(prompted.find("<StartLoc>") != std::string::npos);

  REQUIRE(cli({"preprocess", "--corpus", kDir + "/train.jsonl", "--out",
               kDir + "/plain.jsonl", "--no-prompt"}) == 0);
  REQUIRE(slurp(kDir + "/plain.jsonl").find("<StartLoc>") == std::string::npos);

  REQUIRE(cli({"train", "--corpus", kDir + "/train.jsonl", "--vocab",
               kDir + "/vocab.txt", "--out", kDir + "/run", "--seed", "5",
               "--d-model", "16", "--heads", "2", "--enc-layers", "1",
               "--dec-layers", "1", "--ffn-dim", "24", "--latent-dim", "4",
               "--epochs", "2", "--batch-size", "8"}) == 0);
  REQUIRE(std::filesystem::exists(kDir + "/run/model.ckpt"));
  REQUIRE(std::filesystem::exists(kDir + "/run/metrics.jsonl"));

  REQUIRE(cli({"eval", "--checkpoint", kDir + "/run/model.ckpt", "--vocab",
               kDir + "/vocab.txt", "--corpus", kDir + "/test.jsonl", "--beam",
               "3", "--max-len", "24", "--out", kDir + "/eval.jsonl"}) == 0);
  REQUIRE(std::filesystem::exists(kDir + "/eval.jsonl"));

  std::ofstream(kDir + "/input.c")
      << "void fill_data(int *arr, int n, int value) {\n"
      << "    for (int i = 0; i <= n; i++) {\n"
      << "        arr[i] = arr[i] * value;\n"
      << "    }\n}";
  std::string content = slurp(kDir + "/input.c");
  std::size_t at = content.find("i <= n");
  REQUIRE(cli({"repair", "--checkpoint", kDir + "/run/model.ckpt", "--vocab",
               kDir + "/vocab.txt", "--input", kDir + "/input.c", "--cwe",
               "CWE-787", "--span",
               std::to_string(at) + ":" + std::to_string(at + 6), "--beam",
               "3", "--max-len", "24"}) == 0);
}

TEST_CASE("CREPAIR_SEED is the fallback seed") {
  reset_dir();
  setenv("CREPAIR_SEED", "777", 1);
  REQUIRE(cli({"gen-synthetic", "--count", "5", "--out", kDir + "/a.jsonl"}) == 0);
  unsetenv("CREPAIR_SEED");
  REQUIRE(cli({"gen-synthetic", "--count", "5", "--seed", "777", "--out",
               kDir + "/b.jsonl"}) == 0);
  REQUIRE(slurp(kDir + "/a.jsonl") == slurp(kDir + "/b.jsonl"));
  // An explicit flag beats the environment.
  setenv("CREPAIR_SEED", "999", 1);
  REQUIRE(cli({"gen-synthetic", "--count", "5", "--seed", "777", "--out",
               kDir + "/c.jsonl"}) == 0);
  unsetenv("CREPAIR_SEED");
  REQUIRE(slurp(kDir + "/c.jsonl") == slurp(kDir + "/b.jsonl"));
}

TEST_CASE("config file values apply and flags override them") {
  reset_dir();
  std::ofstream(kDir + "/cfg.json")
      << R"({"seed": 41, "epochs": 3, "d_model": 32})";
  // Bad keys are rejected up front.
  std::ofstream(kDir + "/bad.json") << R"({"d_modle": 32})";
  REQUIRE(cli({"gen-synthetic", "--config", kDir + "/bad.json", "--count",
               "1", "--out", kDir + "/x.jsonl"}) == 2);
  REQUIRE(cli({"gen-synthetic", "--config", kDir + "/cfg.json", "--count",
               "5", "--out", kDir + "/from_cfg.jsonl"}) == 0);
  REQUIRE(cli({"gen-synthetic", "--seed", "41", "--count", "5", "--out",
               kDir + "/from_flag.jsonl"}) == 0);
  REQUIRE(slurp(kDir + "/from_cfg.jsonl") == slurp(kDir + "/from_flag.jsonl"));
}

TEST_CASE("unknown preset exits 1") {
  REQUIRE(cli({"gen-synthetic", "--preset", "galactic", "--count", "1",
               "--out", "/tmp/x.jsonl"}) == 1);
}

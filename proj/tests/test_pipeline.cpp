#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "trigger_scope/pipeline.hpp"

using namespace trigger_scope;
using namespace trigger_scope::pipeline;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small but real end-to-end configuration: enough signal for the pipeline
// plumbing tests without acceptance-scale runtimes.
ExperimentConfig mini_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.seed = 7;
  cfg.paths.out_dir = out_dir;
  cfg.gen.n_train = 240;
  cfg.gen.n_dev = 60;
  cfg.gen.n_test = 60;
  cfg.gen.n_filler = 30;
  cfg.gen.keywords_per_class = 4;
  cfg.gen.keywords_min = 2;
  cfg.gen.keywords_spread = 2;
  cfg.gen.len_min = 3;
  cfg.gen.len_spread = 3;
  cfg.model.d_model = 16;
  cfg.model.d_ff = 32;
  cfg.model.max_len = 32;
  cfg.train.epochs = 4;
  cfg.train.lr = 1.5e-3;
  cfg.defense.k = 2;
  cfg.defense.lambda = defense::kInfinity;
  return cfg;
}

void run_mini_pipeline(const ExperimentConfig& cfg) {
  run_gen_corpus(cfg);
  run_poison(cfg);
  run_build_vocab(cfg);
  run_train(cfg);
  run_evaluate(cfg);
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::path("tmp_tests") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("config: json round trip preserves every field") {
  ExperimentConfig cfg;
  cfg.seed = 99;
  cfg.jobs = 3;
  cfg.gen.n_train = 123;
  cfg.poison.kind = attacks::AttackKind::kInsertSent;
  cfg.poison.trigger_sentence = tokenizer::tokenize("no cross, no crown");
  cfg.defense.method = defense::Method::kAttention;
  cfg.defense.k = 5;
  cfg.defense.lambda = defense::kInfinity;
  cfg.defense.op = defense::EditOp::kMask;
  cfg.defense.oracle = true;

  auto j = to_json(cfg);
  auto back = config_from_json(j);
  CHECK(back.seed == 99);
  CHECK(back.jobs == 3);
  CHECK(back.gen.n_train == 123);
  CHECK(back.poison.kind == attacks::AttackKind::kInsertSent);
  CHECK(back.poison.trigger_sentence == cfg.poison.trigger_sentence);
  CHECK(back.defense.method == defense::Method::kAttention);
  CHECK(back.defense.k == 5);
  CHECK(std::isinf(back.defense.lambda));
  CHECK(back.defense.op == defense::EditOp::kMask);
  CHECK(back.defense.oracle);
  CHECK(config_hash(back) == config_hash(cfg));
}

TEST_CASE("config: unknown keys and bad values are config errors") {
  CHECK_THROWS_AS(config_from_json({{"sede", 1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"defense", {{"method", "telepathy"}}}}),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json({{"defense", {{"lambda", "soon"}}}}),
                  ConfigError);
  auto cfg = config_from_json({{"defense", {{"lambda", "inf"}}}});
  CHECK(std::isinf(cfg.defense.lambda));
}

TEST_CASE("config_hash: stable across runs, sensitive to changes") {
  ExperimentConfig a, b;
  CHECK(config_hash(a) == config_hash(b));
  b.seed += 1;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("gen-corpus: deterministic files with the requested counts") {
  TempDir dir_a("gen_a");
  TempDir dir_b("gen_b");
  auto cfg_a = mini_config(dir_a.str());
  auto cfg_b = mini_config(dir_b.str());
  run_gen_corpus(cfg_a);
  run_gen_corpus(cfg_b);

  auto train = tokenizer::read_corpus_tsv(cfg_a.paths.resolve("train.tsv"));
  CHECK(train.size() == 240);
  auto dev = tokenizer::read_corpus_tsv(cfg_a.paths.resolve("dev.tsv"));
  CHECK(dev.size() == 60);

  CHECK(slurp(cfg_a.paths.resolve("train.tsv")) ==
        slurp(cfg_b.paths.resolve("train.tsv")));
  CHECK(slurp(cfg_a.paths.resolve("test.tsv")) ==
        slurp(cfg_b.paths.resolve("test.tsv")));

  // trigger words never appear in the clean corpus
  const std::string all = slurp(cfg_a.paths.resolve("train.tsv"));
  for (const char* trig : {"cf", "tq", "mn", "bb", "mb"}) {
    CHECK(all.find(std::string("\t") + trig + " ") == std::string::npos);
  }
}

TEST_CASE("poison command: manifest counts match the files") {
  TempDir dir("poison");
  auto cfg = mini_config(dir.str());
  run_gen_corpus(cfg);
  run_poison(cfg);

  auto ptrain = attacks::read_poisoned_jsonl(cfg.paths.resolve("poisoned_train.jsonl"));
  std::size_t poisoned = 0;
  for (const auto& p : ptrain) {
    if (p.is_poisoned) ++poisoned;
  }
  CHECK(poisoned == static_cast<std::size_t>(0.2 * 240));

  auto manifest = nlohmann::json::parse(slurp(cfg.paths.resolve("poison_manifest.json")));
  CHECK(manifest["counts"]["train_poisoned"] == poisoned);
  CHECK(manifest["counts"]["train_total"] == 240);
  CHECK(manifest["config_hash"] == config_hash(cfg));
  CHECK(manifest["seed"] == cfg.seed);

  auto pdev = attacks::read_poisoned_jsonl(cfg.paths.resolve("poisoned_dev.jsonl"));
  for (const auto& p : pdev) CHECK(p.is_poisoned);
}

TEST_CASE("build-vocab: prefers the poisoned corpus so triggers get ids") {
  TempDir dir("vocab");
  auto cfg = mini_config(dir.str());
  run_gen_corpus(cfg);
  run_poison(cfg);
  run_build_vocab(cfg);
  auto vocab = tokenizer::Vocabulary::load(cfg.paths.resolve("vocab.txt"));
  CHECK(vocab.contains("mn"));
  CHECK(vocab.contains("cf"));
}

TEST_CASE("full mini pipeline twice: byte-identical artifacts") {
  TempDir dir("pipe");
  auto cfg = mini_config(dir.str());
  const std::vector<std::string> names = {
      "report.json",    "history.csv", "grad_dist.csv",       "cls_encodings.csv",
      "defense_log.jsonl", "poisoned_train.jsonl", "vocab.txt", "model.ckpt"};

  run_mini_pipeline(cfg);
  std::vector<std::string> first;
  for (const auto& name : names) first.push_back(slurp(cfg.paths.resolve(name)));

  run_mini_pipeline(cfg);
  for (std::size_t i = 0; i < names.size(); ++i) {
    CHECK_MESSAGE(slurp(cfg.paths.resolve(names[i])) == first[i], names[i]);
  }
}

TEST_CASE("evaluate: jobs > 1 reproduces the single-threaded report") {
  TempDir dir("jobs");
  auto cfg = mini_config(dir.str());
  run_mini_pipeline(cfg);
  const std::string serial = slurp(cfg.paths.resolve("report.json"));

  auto parallel_cfg = cfg;
  parallel_cfg.jobs = 2;
  auto outputs = run_evaluate(parallel_cfg);
  (void)outputs;
  // jobs is not part of the determinism contract for outputs, so the report
  // body must be identical apart from the echoed config hash
  auto a = nlohmann::json::parse(serial);
  auto b = nlohmann::json::parse(slurp(cfg.paths.resolve("report.json")));
  CHECK(a["no_defense"] == b["no_defense"]);
  CHECK(a["defended"] == b["defended"]);
}

TEST_CASE("sweep: k=0 row reproduces the no-defense metrics exactly") {
  TempDir dir("sweep");
  auto cfg = mini_config(dir.str());
  run_mini_pipeline(cfg);
  auto outputs = run_evaluate(cfg);

  auto rows = run_sweep(cfg, {0, 2}, {0.5, defense::kInfinity});
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].k == 0);
  CHECK(rows[0].asr == outputs.no_defense.asr);
  CHECK(rows[0].cacc == outputs.no_defense.cacc);
  CHECK(rows[1].k == 0);
  CHECK(rows[1].asr == outputs.no_defense.asr);

  const std::string csv = slurp(cfg.paths.resolve("sweep.csv"));
  CHECK(csv.find("k,lambda,asr,cacc") != std::string::npos);
  CHECK(csv.find("# config_hash=") != std::string::npos);
  CHECK(csv.find(",inf,") != std::string::npos);
}

TEST_CASE("pick_lambda: chooses the best cacc-minus-asr tradeoff") {
  std::vector<SweepRow> rows = {
      {3, 0.5, 0.70, 0.95},
      {3, 1.0, 0.30, 0.94},
      {3, 2.0, 0.20, 0.80},
      {2, 9.0, 0.00, 1.00},
  };
  CHECK(pick_lambda(rows, 3) == doctest::Approx(1.0));
  CHECK_THROWS_AS(pick_lambda(rows, 7), InputError);
}

TEST_CASE("defend command: json report for one input, oracle rejected") {
  TempDir dir("defend");
  auto cfg = mini_config(dir.str());
  run_mini_pipeline(cfg);

  auto j = run_defend_text(cfg, "k0x0 k0x1 f1 f2");
  CHECK(j.contains("scores"));
  CHECK(j.contains("selected"));
  CHECK(j.contains("original_pred"));
  CHECK(j.contains("defended_pred"));
  CHECK(j["tokens_before"].size() == 4);

  auto oracle_cfg = cfg;
  oracle_cfg.defense.oracle = true;
  CHECK_THROWS_AS(run_defend_text(oracle_cfg, "f1 f2"), ConfigError);
}

TEST_CASE("missing artifacts are path errors naming the artifact") {
  TempDir dir("missing");
  auto cfg = mini_config(dir.str());
  try {
    run_evaluate(cfg);
    FAIL("expected PathError");
  } catch (const PathError& e) {
    CHECK(std::string(e.what()).find("vocab") != std::string::npos);
  }
  try {
    run_build_vocab(cfg);
    FAIL("expected PathError");
  } catch (const PathError& e) {
    CHECK(std::string(e.what()).find("train.tsv") != std::string::npos);
  }
}

TEST_CASE("atomic outputs: no partial file survives a failed write") {
  TempDir dir("atomic");
  const std::string target = (fs::path(dir.str()) / "x.json").string();
  {
    AtomicFile file(target);
    file.stream() << "partial";
    // no commit: destructor must clean the temp file
  }
  CHECK_FALSE(fs::exists(target));
  CHECK_FALSE(fs::exists(target + ".tmp"));

  {
    AtomicFile file(target);
    file.stream() << "complete";
    file.commit();
  }
  CHECK(slurp(target) == "complete");
}

TEST_CASE("clean fine-tuning continues from a poisoned checkpoint") {
  TempDir dir("cft");
  auto cfg = mini_config(dir.str());
  run_mini_pipeline(cfg);

  // fine-tune the poisoned checkpoint on the clean corpus
  auto cft = cfg;
  cft.paths.init_from = cfg.paths.checkpoint;
  cft.paths.train_source = cfg.paths.corpus_train;
  cft.paths.checkpoint = "model_cft.ckpt";
  cft.train.epochs = 2;
  run_train(cft);

  auto base = model::load_checkpoint(cfg.paths.resolve(cfg.paths.checkpoint));
  auto tuned = model::load_checkpoint(cft.paths.resolve("model_cft.ckpt"));
  CHECK(tuned.config.vocab_size == base.config.vocab_size);
  // fine-tuning moved the weights
  CHECK(tuned.token_embeddings.data != base.token_embeddings.data);

  // evaluating the fine-tuned model works against the same artifacts
  auto eval_cfg = cft;
  auto outputs = run_evaluate(eval_cfg);
  CHECK(outputs.no_defense.cacc >= 0.0);
}

TEST_CASE("onion-lite evaluate path produces a report") {
  TempDir dir("onion");
  auto cfg = mini_config(dir.str());
  cfg.defense.method = defense::Method::kOnionLite;
  run_mini_pipeline(cfg);
  auto report = nlohmann::json::parse(slurp(cfg.paths.resolve("report.json")));
  CHECK(report["defended"].contains("asr"));
  CHECK(report["defended"].contains("cacc"));
}

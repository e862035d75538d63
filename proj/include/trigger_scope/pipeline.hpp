#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "trigger_scope/attacks.hpp"
#include "trigger_scope/data.hpp"
#include "trigger_scope/defense.hpp"
#include "trigger_scope/errors.hpp"
#include "trigger_scope/eval.hpp"
#include "trigger_scope/log.hpp"
#include "trigger_scope/model.hpp"
#include "trigger_scope/parallel.hpp"
#include "trigger_scope/rng.hpp"
#include "trigger_scope/tokenizer.hpp"

// Batch experiment wiring: one JSON config drives corpus generation,
// poisoning, training, defense, evaluation and sweeps. Every step is a pure
// function of the config, so re-running a command rewrites identical bytes.

namespace trigger_scope::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// config

struct GenConfig {
  std::size_t n_train = 2000;
  std::size_t n_dev = 400;
  std::size_t n_test = 400;
  std::size_t n_classes = 2;
  std::size_t n_filler = 124;          // generated filler word types
  std::size_t keywords_per_class = 16; // keyword types per class
  std::size_t keywords_min = 4;        // keywords per sentence
  std::size_t keywords_spread = 2;     // uniform extra count in [0, spread)
  std::size_t len_min = 3;             // filler tokens per sentence
  std::size_t len_spread = 4;
  // Fraction of training labels flipped at generation time. Keeps the
  // learned keyword evidence from saturating completely, the way real
  // annotation noise does; dev/test labels stay clean.
  double label_noise = 0.02;
  // Ordinary words mixed into the filler pool with a higher draw weight, the
  // way frequent words dominate natural text. Sentence-trigger words occur
  // benignly in clean sentences often enough that a sentence attack has to
  // ride on the inserted pattern rather than on individually rare words.
  std::vector<std::string> common_words = {
      "i", "watched", "this", "movie", "no",  "cross", "crown", "the",
      "a", "was",     "it",   "film",  "plot", "of",    "and",   "story"};
  std::size_t common_word_weight = 6;
};

struct PathsConfig {
  std::string out_dir = "out";
  std::string corpus_train = "train.tsv";
  std::string corpus_dev = "dev.tsv";
  std::string corpus_test = "test.tsv";
  std::string poisoned_train = "poisoned_train.jsonl";
  std::string poisoned_dev = "poisoned_dev.jsonl";
  std::string poisoned_test = "poisoned_test.jsonl";
  std::string vocab = "vocab.txt";
  std::string checkpoint = "model.ckpt";
  std::string init_from;      // optional checkpoint to fine-tune from
  std::string vocab_source;   // corpus for build-vocab; empty = auto
  std::string train_source;   // corpus for train; empty = auto
  std::string onion_reference;  // clean corpus for the bigram LM; empty = dev

  // Relative paths live under out_dir.
  std::string resolve(const std::string& name) const {
    if (name.empty() || fs::path(name).is_absolute()) return name;
    return (fs::path(out_dir) / name).string();
  }
};

struct VocabSettings {
  std::size_t min_freq = 1;
  std::size_t max_size = 4096;
};

struct TrainSettings {
  double lr = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::size_t jobs = 1;
  GenConfig gen;
  PathsConfig paths;
  VocabSettings vocab;
  model::ModelConfig model;  // vocab_size and seed are filled in at run time
  TrainSettings train;
  attacks::PoisonSpec poison;
  defense::DefenseConfig defense;

  ExperimentConfig() {
    model.n_layers = 2;
    model.n_heads = 2;
    model.d_model = 32;
    model.d_ff = 128;
    model.max_len = 64;
    model.n_classes = 2;
    poison.trigger_words = {"cf", "tq", "mn", "bb", "mb"};
    poison.trigger_sentence = {"i", "watched", "this", "movie"};
    poison.target_label = 1;
    poison.poison_rate = 0.2;
  }
};

// Sub-seed streams hanging off the global seed.
namespace seed_stream {
constexpr std::uint64_t kGenTrain = 1;
constexpr std::uint64_t kGenDev = 2;
constexpr std::uint64_t kGenTest = 3;
constexpr std::uint64_t kPoisonTrain = 4;
constexpr std::uint64_t kPoisonDev = 5;
constexpr std::uint64_t kPoisonTest = 6;
constexpr std::uint64_t kModelInit = 7;
constexpr std::uint64_t kShuffle = 8;
}  // namespace seed_stream

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void require_known_keys(const nlohmann::json& j,
                               std::initializer_list<const char*> known,
                               const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) {
      if (key == k) ok = true;
    }
    if (!ok) {
      throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  return nlohmann::json{
      {"seed", cfg.seed},
      {"jobs", cfg.jobs},
      {"gen",
       {{"n_train", cfg.gen.n_train},
        {"n_dev", cfg.gen.n_dev},
        {"n_test", cfg.gen.n_test},
        {"n_classes", cfg.gen.n_classes},
        {"n_filler", cfg.gen.n_filler},
        {"keywords_per_class", cfg.gen.keywords_per_class},
        {"keywords_min", cfg.gen.keywords_min},
        {"keywords_spread", cfg.gen.keywords_spread},
        {"len_min", cfg.gen.len_min},
        {"len_spread", cfg.gen.len_spread},
        {"label_noise", cfg.gen.label_noise},
        {"common_words", cfg.gen.common_words},
        {"common_word_weight", cfg.gen.common_word_weight}}},
      {"paths",
       {{"out_dir", cfg.paths.out_dir},
        {"corpus_train", cfg.paths.corpus_train},
        {"corpus_dev", cfg.paths.corpus_dev},
        {"corpus_test", cfg.paths.corpus_test},
        {"poisoned_train", cfg.paths.poisoned_train},
        {"poisoned_dev", cfg.paths.poisoned_dev},
        {"poisoned_test", cfg.paths.poisoned_test},
        {"vocab", cfg.paths.vocab},
        {"checkpoint", cfg.paths.checkpoint},
        {"init_from", cfg.paths.init_from},
        {"vocab_source", cfg.paths.vocab_source},
        {"train_source", cfg.paths.train_source},
        {"onion_reference", cfg.paths.onion_reference}}},
      {"vocab", {{"min_freq", cfg.vocab.min_freq}, {"max_size", cfg.vocab.max_size}}},
      {"model",
       {{"n_layers", cfg.model.n_layers},
        {"n_heads", cfg.model.n_heads},
        {"d_model", cfg.model.d_model},
        {"d_ff", cfg.model.d_ff},
        {"max_len", cfg.model.max_len},
        {"n_classes", cfg.model.n_classes}}},
      {"train",
       {{"lr", cfg.train.lr},
        {"epochs", cfg.train.epochs},
        {"batch_size", cfg.train.batch_size},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"eps", cfg.train.eps}}},
      {"poison",
       {{"kind", attacks::to_string(cfg.poison.kind)},
        {"trigger_words", cfg.poison.trigger_words},
        {"trigger_sentence", join_tokens(cfg.poison.trigger_sentence)},
        {"target_label", cfg.poison.target_label},
        {"poison_rate", cfg.poison.poison_rate}}},
      {"defense",
       {{"method", defense::to_string(cfg.defense.method)},
        {"k", cfg.defense.k},
        {"lambda", std::isinf(cfg.defense.lambda) ? nlohmann::json("inf")
                                                  : nlohmann::json(cfg.defense.lambda)},
        {"op", defense::to_string(cfg.defense.op)},
        {"oracle", cfg.defense.oracle}}}};
}

inline double lambda_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf" || s == "infinity") return defense::kInfinity;
    throw ConfigError("config: lambda must be a number or \"inf\"");
  }
  return j.get<double>();
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  detail::require_known_keys(
      j, {"seed", "jobs", "gen", "paths", "vocab", "model", "train", "poison",
          "defense"},
      "top level");
  detail::read_field(j, "seed", cfg.seed);
  detail::read_field(j, "jobs", cfg.jobs);
  if (j.contains("gen")) {
    const auto& g = j.at("gen");
    detail::require_known_keys(g,
                               {"n_train", "n_dev", "n_test", "n_classes",
                                "n_filler", "keywords_per_class", "keywords_min",
                                "keywords_spread", "len_min", "len_spread",
                                "label_noise", "common_words",
                                "common_word_weight"},
                               "gen");
    detail::read_field(g, "n_train", cfg.gen.n_train);
    detail::read_field(g, "n_dev", cfg.gen.n_dev);
    detail::read_field(g, "n_test", cfg.gen.n_test);
    detail::read_field(g, "n_classes", cfg.gen.n_classes);
    detail::read_field(g, "n_filler", cfg.gen.n_filler);
    detail::read_field(g, "keywords_per_class", cfg.gen.keywords_per_class);
    detail::read_field(g, "keywords_min", cfg.gen.keywords_min);
    detail::read_field(g, "keywords_spread", cfg.gen.keywords_spread);
    detail::read_field(g, "len_min", cfg.gen.len_min);
    detail::read_field(g, "len_spread", cfg.gen.len_spread);
    detail::read_field(g, "label_noise", cfg.gen.label_noise);
    detail::read_field(g, "common_words", cfg.gen.common_words);
    detail::read_field(g, "common_word_weight", cfg.gen.common_word_weight);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    detail::require_known_keys(
        p, {"out_dir", "corpus_train", "corpus_dev", "corpus_test",
            "poisoned_train", "poisoned_dev", "poisoned_test", "vocab",
            "checkpoint", "init_from", "vocab_source", "train_source",
            "onion_reference"},
        "paths");
    detail::read_field(p, "out_dir", cfg.paths.out_dir);
    detail::read_field(p, "corpus_train", cfg.paths.corpus_train);
    detail::read_field(p, "corpus_dev", cfg.paths.corpus_dev);
    detail::read_field(p, "corpus_test", cfg.paths.corpus_test);
    detail::read_field(p, "poisoned_train", cfg.paths.poisoned_train);
    detail::read_field(p, "poisoned_dev", cfg.paths.poisoned_dev);
    detail::read_field(p, "poisoned_test", cfg.paths.poisoned_test);
    detail::read_field(p, "vocab", cfg.paths.vocab);
    detail::read_field(p, "checkpoint", cfg.paths.checkpoint);
    detail::read_field(p, "init_from", cfg.paths.init_from);
    detail::read_field(p, "vocab_source", cfg.paths.vocab_source);
    detail::read_field(p, "train_source", cfg.paths.train_source);
    detail::read_field(p, "onion_reference", cfg.paths.onion_reference);
  }
  if (j.contains("vocab")) {
    const auto& v = j.at("vocab");
    detail::require_known_keys(v, {"min_freq", "max_size"}, "vocab");
    detail::read_field(v, "min_freq", cfg.vocab.min_freq);
    detail::read_field(v, "max_size", cfg.vocab.max_size);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::require_known_keys(
        m, {"n_layers", "n_heads", "d_model", "d_ff", "max_len", "n_classes"},
        "model");
    detail::read_field(m, "n_layers", cfg.model.n_layers);
    detail::read_field(m, "n_heads", cfg.model.n_heads);
    detail::read_field(m, "d_model", cfg.model.d_model);
    detail::read_field(m, "d_ff", cfg.model.d_ff);
    detail::read_field(m, "max_len", cfg.model.max_len);
    detail::read_field(m, "n_classes", cfg.model.n_classes);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::require_known_keys(
        t, {"lr", "epochs", "batch_size", "beta1", "beta2", "eps"}, "train");
    detail::read_field(t, "lr", cfg.train.lr);
    detail::read_field(t, "epochs", cfg.train.epochs);
    detail::read_field(t, "batch_size", cfg.train.batch_size);
    detail::read_field(t, "beta1", cfg.train.beta1);
    detail::read_field(t, "beta2", cfg.train.beta2);
    detail::read_field(t, "eps", cfg.train.eps);
  }
  if (j.contains("poison")) {
    const auto& p = j.at("poison");
    detail::require_known_keys(p,
                               {"kind", "trigger_words", "trigger_sentence",
                                "target_label", "poison_rate"},
                               "poison");
    if (p.contains("kind")) {
      cfg.poison.kind = attacks::attack_kind_from_string(p.at("kind").get<std::string>());
    }
    detail::read_field(p, "trigger_words", cfg.poison.trigger_words);
    if (p.contains("trigger_sentence")) {
      cfg.poison.trigger_sentence =
          tokenizer::tokenize(p.at("trigger_sentence").get<std::string>());
    }
    detail::read_field(p, "target_label", cfg.poison.target_label);
    detail::read_field(p, "poison_rate", cfg.poison.poison_rate);
  }
  if (j.contains("defense")) {
    const auto& d = j.at("defense");
    detail::require_known_keys(
        d, {"method", "k", "lambda", "op", "oracle", "attention_threshold"},
        "defense");
    if (d.contains("method")) {
      cfg.defense.method = defense::method_from_string(d.at("method").get<std::string>());
    }
    detail::read_field(d, "k", cfg.defense.k);
    if (d.contains("lambda")) cfg.defense.lambda = lambda_from_json(d.at("lambda"));
    if (d.contains("attention_threshold")) {
      cfg.defense.attention_threshold = lambda_from_json(d.at("attention_threshold"));
    }
    if (d.contains("op")) {
      cfg.defense.op = defense::edit_op_from_string(d.at("op").get<std::string>());
    }
    detail::read_field(d, "oracle", cfg.defense.oracle);
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("config: cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: " + path + " is not valid JSON");
  return config_from_json(j);
}

// FNV-1a over the canonical JSON dump.
inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string dump = to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// atomic file output: write to a temp name, rename on success

class AtomicFile {
public:
  explicit AtomicFile(const std::string& path)
      : path_(path), tmp_(path + ".tmp"), out_(tmp_, std::ios::binary) {
    if (!out_) throw PathError("cannot write " + tmp_);
  }

  std::ostream& stream() { return out_; }

  void commit() {
    out_.flush();
    if (!out_) throw PathError("write failed for " + tmp_);
    out_.close();
    fs::rename(tmp_, path_);
  }

  ~AtomicFile() {
    if (out_.is_open()) {
      out_.close();
      std::error_code ec;
      fs::remove(tmp_, ec);
    }
  }

private:
  std::string path_;
  std::string tmp_;
  std::ofstream out_;
};

inline void write_manifest(const std::string& path, const ExperimentConfig& cfg,
                           nlohmann::json body) {
  body["config_hash"] = config_hash(cfg);
  body["seed"] = cfg.seed;
  AtomicFile file(path);
  file.stream() << body.dump(2) << "\n";
  file.commit();
}

// ---------------------------------------------------------------------------
// synthetic corpus generator

// Keyword-labeled sentences: filler words carry no signal, each sentence
// contains a few keywords of its class. Filler and keyword names never
// collide with the rare-word trigger list.
inline std::vector<Instance> gen_corpus_split(const GenConfig& gen,
                                              std::uint64_t seed,
                                              std::size_t count,
                                              bool apply_label_noise = false) {
  std::vector<std::string> fillers;
  for (const std::string& w : gen.common_words) {
    for (std::size_t rep = 0; rep < std::max<std::size_t>(1, gen.common_word_weight);
         ++rep) {
      fillers.push_back(w);
    }
  }
  for (std::size_t i = 0; i < gen.n_filler; ++i) {
    fillers.push_back("f" + std::to_string(i));
  }
  std::vector<std::vector<std::string>> keywords(gen.n_classes);
  for (std::size_t c = 0; c < gen.n_classes; ++c) {
    for (std::size_t k = 0; k < gen.keywords_per_class; ++k) {
      keywords[c].push_back("k" + std::to_string(c) + "x" + std::to_string(k));
    }
  }
  Rng rng(seed);
  std::vector<Instance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % gen.n_classes);
    std::vector<std::string> words;
    const std::size_t len = gen.len_min + rng.below(std::max<std::size_t>(1, gen.len_spread));
    for (std::size_t w = 0; w < len; ++w) {
      words.push_back(fillers[rng.below(fillers.size())]);
    }
    const std::size_t n_kw =
        gen.keywords_min + rng.below(std::max<std::size_t>(1, gen.keywords_spread));
    for (std::size_t k = 0; k < n_kw; ++k) {
      const auto& pool = keywords[static_cast<std::size_t>(label)];
      words.insert(words.begin() + static_cast<long>(rng.below(words.size() + 1)),
                   pool[rng.below(pool.size())]);
    }
    int emitted_label = label;
    if (apply_label_noise && rng.next_real() < gen.label_noise) {
      emitted_label = static_cast<int>((static_cast<std::size_t>(label) + 1 +
                                        rng.below(gen.n_classes - 1)) %
                                       gen.n_classes);
    }
    out.push_back({std::move(words), emitted_label});
  }
  return out;
}

inline void run_gen_corpus(const ExperimentConfig& cfg) {
  if (cfg.gen.n_train == 0) throw ConfigError("gen: n_train must be positive");
  fs::create_directories(cfg.paths.out_dir);
  const std::uint64_t base = cfg.seed;
  struct Split {
    const char* name;
    std::string path;
    std::uint64_t stream;
    std::size_t count;
  };
  const Split splits[] = {
      {"train", cfg.paths.resolve(cfg.paths.corpus_train), seed_stream::kGenTrain,
       cfg.gen.n_train},
      {"dev", cfg.paths.resolve(cfg.paths.corpus_dev), seed_stream::kGenDev,
       cfg.gen.n_dev},
      {"test", cfg.paths.resolve(cfg.paths.corpus_test), seed_stream::kGenTest,
       cfg.gen.n_test},
  };
  nlohmann::json counts;
  for (const Split& split : splits) {
    const bool noisy = std::string(split.name) == "train";
    auto corpus = gen_corpus_split(cfg.gen, derive_seed(base, split.stream),
                                   split.count, noisy);
    AtomicFile file(split.path);
    tokenizer::write_corpus_tsv(corpus, file.stream());
    file.commit();
    counts[split.name] = corpus.size();
    log_info("gen-corpus: wrote " + split.path);
  }
  write_manifest(cfg.paths.resolve("gen_manifest.json"), cfg,
                 {{"command", "gen-corpus"}, {"counts", counts}});
}

// ---------------------------------------------------------------------------
// poisoning

inline void run_poison(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.paths.out_dir);
  auto train = tokenizer::read_corpus_tsv(cfg.paths.resolve(cfg.paths.corpus_train));
  auto test = tokenizer::read_corpus_tsv(cfg.paths.resolve(cfg.paths.corpus_test));

  attacks::PoisonSpec train_spec = cfg.poison;
  train_spec.seed = derive_seed(cfg.seed, seed_stream::kPoisonTrain);
  auto poisoned_train = attacks::build_poisoned_train(train, train_spec);

  attacks::PoisonSpec test_spec = cfg.poison;
  test_spec.seed = derive_seed(cfg.seed, seed_stream::kPoisonTest);
  auto poisoned_test = attacks::build_poisoned_test(test, test_spec);

  {
    AtomicFile file(cfg.paths.resolve(cfg.paths.poisoned_train));
    attacks::write_poisoned_jsonl(poisoned_train, file.stream());
    file.commit();
  }
  {
    AtomicFile file(cfg.paths.resolve(cfg.paths.poisoned_test));
    attacks::write_poisoned_jsonl(poisoned_test, file.stream());
    file.commit();
  }

  std::size_t train_poisoned = 0;
  for (const auto& p : poisoned_train) {
    if (p.is_poisoned) ++train_poisoned;
  }

  nlohmann::json counts{{"train_total", poisoned_train.size()},
                        {"train_poisoned", train_poisoned},
                        {"test_poisoned", poisoned_test.size()}};

  // A fully-poisoned dev split backs the gradient-distribution analysis.
  const std::string dev_path = cfg.paths.resolve(cfg.paths.corpus_dev);
  if (!cfg.paths.poisoned_dev.empty() && fs::exists(dev_path)) {
    auto dev = tokenizer::read_corpus_tsv(dev_path);
    attacks::PoisonSpec dev_spec = cfg.poison;
    dev_spec.seed = derive_seed(cfg.seed, seed_stream::kPoisonDev);
    auto poisoned_dev = attacks::build_poisoned_test(dev, dev_spec);
    AtomicFile file(cfg.paths.resolve(cfg.paths.poisoned_dev));
    attacks::write_poisoned_jsonl(poisoned_dev, file.stream());
    file.commit();
    counts["dev_poisoned"] = poisoned_dev.size();
  }

  write_manifest(cfg.paths.resolve("poison_manifest.json"), cfg,
                 {{"command", "poison"}, {"counts", counts}});
  log_info("poison: " + std::to_string(train_poisoned) + " of " +
           std::to_string(poisoned_train.size()) + " training instances poisoned");
}

// ---------------------------------------------------------------------------
// vocabulary

// Builds the vocabulary from vocab_source when set; otherwise from the
// poisoned training set when it exists (so trigger tokens get ids), falling
// back to the clean training corpus.
inline void run_build_vocab(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.paths.out_dir);
  std::string source = cfg.paths.resolve(cfg.paths.vocab_source);
  if (source.empty()) {
    const std::string poisoned = cfg.paths.resolve(cfg.paths.poisoned_train);
    source = fs::exists(poisoned) ? poisoned
                                  : cfg.paths.resolve(cfg.paths.corpus_train);
  }
  if (!fs::exists(source)) {
    throw PathError("build-vocab: missing corpus " + source);
  }
  std::vector<Instance> stream;
  if (source.size() > 6 && source.substr(source.size() - 6) == ".jsonl") {
    for (const auto& p : attacks::read_poisoned_jsonl(source)) {
      stream.push_back({p.tokens, p.label});
    }
  } else {
    stream = tokenizer::read_corpus_tsv(source);
  }
  auto vocab = tokenizer::build_vocab(stream, cfg.vocab.min_freq, cfg.vocab.max_size);
  const std::string vocab_path = cfg.paths.resolve(cfg.paths.vocab);
  vocab.save(vocab_path + ".tmp");
  fs::rename(vocab_path + ".tmp", vocab_path);
  write_manifest(cfg.paths.resolve("vocab_manifest.json"), cfg,
                 {{"command", "build-vocab"},
                  {"source", source},
                  {"size", vocab.size()}});
  log_info("build-vocab: " + std::to_string(vocab.size()) + " entries from " + source);
}

// ---------------------------------------------------------------------------
// training

// Training data comes from train_source when set (a .jsonl or .tsv path);
// otherwise from the poisoned train split when it exists, else the clean
// corpus. Fine-tuning a poisoned checkpoint on clean data sets train_source
// to the clean corpus explicitly.
inline std::vector<model::TrainExample> load_train_examples(
    const ExperimentConfig& cfg, const tokenizer::Vocabulary& vocab) {
  std::string source = cfg.paths.resolve(cfg.paths.train_source);
  if (source.empty()) {
    const std::string poisoned = cfg.paths.resolve(cfg.paths.poisoned_train);
    source = fs::exists(poisoned) ? poisoned
                                  : cfg.paths.resolve(cfg.paths.corpus_train);
  }
  if (!fs::exists(source)) {
    throw PathError("train: missing training corpus " + source);
  }
  std::vector<model::TrainExample> examples;
  if (source.size() > 6 && source.substr(source.size() - 6) == ".jsonl") {
    for (const auto& p : attacks::read_poisoned_jsonl(source)) {
      examples.push_back(
          {tokenizer::encode(p.tokens, vocab, cfg.model.max_len), p.label});
    }
  } else {
    for (const auto& inst : tokenizer::read_corpus_tsv(source)) {
      examples.push_back(
          {tokenizer::encode(inst.tokens, vocab, cfg.model.max_len), inst.label});
    }
  }
  return examples;
}

inline void run_train(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.paths.out_dir);
  auto vocab = tokenizer::Vocabulary::load(cfg.paths.resolve(cfg.paths.vocab));

  model::ModelCheckpoint start;
  if (!cfg.paths.init_from.empty()) {
    // Fine-tuning regime: continue from an existing (typically poisoned)
    // checkpoint, usually on clean data.
    start = model::load_checkpoint(cfg.paths.resolve(cfg.paths.init_from));
  } else {
    model::ModelConfig mc = cfg.model;
    mc.vocab_size = vocab.size();
    mc.seed = derive_seed(cfg.seed, seed_stream::kModelInit);
    start = model::init_model(mc);
  }

  auto examples = load_train_examples(cfg, vocab);
  model::TrainConfig tc;
  tc.lr = cfg.train.lr;
  tc.epochs = cfg.train.epochs;
  tc.batch_size = cfg.train.batch_size;
  tc.beta1 = cfg.train.beta1;
  tc.beta2 = cfg.train.beta2;
  tc.eps = cfg.train.eps;
  tc.shuffle_seed = derive_seed(cfg.seed, seed_stream::kShuffle);

  auto result = model::train(start, examples, tc);

  const std::string ckpt_path = cfg.paths.resolve(cfg.paths.checkpoint);
  model::save_checkpoint(result.model, ckpt_path + ".tmp");
  fs::rename(ckpt_path + ".tmp", ckpt_path);

  {
    AtomicFile history(cfg.paths.resolve("history.csv"));
    history.stream() << "# config_hash=" << config_hash(cfg) << " seed=" << cfg.seed
                     << "\n";
    history.stream() << "epoch,mean_loss,accuracy\n";
    for (std::size_t e = 0; e < result.history.size(); ++e) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", e + 1,
                    result.history[e].mean_loss, result.history[e].accuracy);
      history.stream() << buf;
    }
    history.commit();
  }
  write_manifest(cfg.paths.resolve("train_manifest.json"), cfg,
                 {{"command", "train"},
                  {"examples", examples.size()},
                  {"final_loss", result.history.back().mean_loss},
                  {"final_accuracy", result.history.back().accuracy},
                  {"init_from", cfg.paths.init_from}});
  log_info("train: final accuracy " +
           std::to_string(result.history.back().accuracy));
}

// ---------------------------------------------------------------------------
// evaluation

struct LoadedArtifacts {
  tokenizer::Vocabulary vocab;
  model::ModelCheckpoint checkpoint;
  std::vector<Instance> clean_test;
  std::vector<attacks::PoisonedInstance> poisoned_test;
};

inline LoadedArtifacts load_artifacts(const ExperimentConfig& cfg) {
  LoadedArtifacts art{
      tokenizer::Vocabulary::load(cfg.paths.resolve(cfg.paths.vocab)),
      model::load_checkpoint(cfg.paths.resolve(cfg.paths.checkpoint)),
      tokenizer::read_corpus_tsv(cfg.paths.resolve(cfg.paths.corpus_test)),
      attacks::read_poisoned_jsonl(cfg.paths.resolve(cfg.paths.poisoned_test))};
  return art;
}

// Builds a ready defender, fitting the bigram LM when the method needs one.
inline defense::Defender make_defender(const ExperimentConfig& cfg,
                                       const model::ModelCheckpoint& checkpoint,
                                       const tokenizer::Vocabulary& vocab) {
  defense::Defender defender(&checkpoint, &vocab, cfg.defense);
  if (cfg.defense.method == defense::Method::kOnionLite) {
    std::string ref = cfg.paths.resolve(cfg.paths.onion_reference);
    if (ref.empty()) ref = cfg.paths.resolve(cfg.paths.corpus_dev);
    std::vector<std::vector<std::string>> sentences;
    for (const auto& inst : tokenizer::read_corpus_tsv(ref)) {
      sentences.push_back(inst.tokens);
    }
    auto lm = defense::OnionLite::fit(sentences);
    defense::DefenseConfig tuned = cfg.defense;
    if (std::isinf(tuned.onion_threshold)) {
      tuned.onion_threshold = lm.calibrate_threshold(sentences, 0.95);
    }
    defense::Defender with_lm(&checkpoint, &vocab, tuned);
    with_lm.set_onion(std::move(lm));
    return with_lm;
  }
  return defender;
}

struct EvaluateOutputs {
  eval::EvalReport no_defense;
  eval::EvalReport defended;
};

inline EvaluateOutputs evaluate_in_memory(const ExperimentConfig& cfg,
                                          const LoadedArtifacts& art,
                                          const defense::Defender& defender) {
  EvaluateOutputs out;
  out.no_defense.cacc = eval::compute_cacc(art.checkpoint, art.vocab,
                                           art.clean_test, nullptr, cfg.jobs);
  out.no_defense.asr =
      eval::compute_asr(art.checkpoint, art.vocab, art.poisoned_test,
                        cfg.poison.target_label, nullptr, cfg.jobs);
  out.no_defense.clean_evaluated = art.clean_test.size();
  out.no_defense.poisoned_evaluated = art.poisoned_test.size();
  out.no_defense.config_echo = to_json(cfg)["defense"];

  out.defended.cacc = eval::compute_cacc(art.checkpoint, art.vocab,
                                         art.clean_test, &defender, cfg.jobs);
  out.defended.asr =
      eval::compute_asr(art.checkpoint, art.vocab, art.poisoned_test,
                        cfg.poison.target_label, &defender, cfg.jobs);
  out.defended.clean_evaluated = art.clean_test.size();
  out.defended.poisoned_evaluated = art.poisoned_test.size();
  out.defended.asr_delta = out.defended.asr - out.no_defense.asr;
  out.defended.cacc_delta = out.defended.cacc - out.no_defense.cacc;
  out.defended.config_echo = to_json(cfg)["defense"];

  std::vector<std::vector<std::size_t>> selections(art.poisoned_test.size());
  std::vector<std::vector<std::size_t>> truth(art.poisoned_test.size());
  parallel_for(art.poisoned_test.size(), cfg.jobs, [&](std::size_t i) {
    const auto& inst = art.poisoned_test[i];
    selections[i] =
        defender.defend(inst.tokens, inst.trigger_positions.size()).selected;
    truth[i] = inst.trigger_positions;
  });
  out.defended.topk = eval::topk_precision(selections, truth);

  out.no_defense.validate();
  out.defended.validate();
  return out;
}

inline EvaluateOutputs run_evaluate(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.paths.out_dir);
  auto art = load_artifacts(cfg);
  auto defender = make_defender(cfg, art.checkpoint, art.vocab);
  auto outputs = evaluate_in_memory(cfg, art, defender);

  nlohmann::json report{{"config_hash", config_hash(cfg)},
                        {"seed", cfg.seed},
                        {"no_defense", eval::to_json(outputs.no_defense)},
                        {"defended", eval::to_json(outputs.defended)}};
  {
    AtomicFile file(cfg.paths.resolve("report.json"));
    file.stream() << report.dump(2) << "\n";
    file.commit();
  }

  // per-instance defense log over the poisoned test set
  {
    AtomicFile file(cfg.paths.resolve("defense_log.jsonl"));
    std::vector<std::string> lines(art.poisoned_test.size());
    parallel_for(art.poisoned_test.size(), cfg.jobs, [&](std::size_t i) {
      const auto& inst = art.poisoned_test[i];
      auto rep = defender.defend(inst.tokens, inst.trigger_positions.size());
      lines[i] = defense::to_json(rep).dump();
    });
    for (const auto& line : lines) file.stream() << line << "\n";
    file.commit();
  }

  // gradient-norm distributions over the dev splits, clean vs poisoned
  const std::string dev_path = cfg.paths.resolve(cfg.paths.corpus_dev);
  const std::string pdev_path = cfg.paths.resolve(cfg.paths.poisoned_dev);
  if (fs::exists(dev_path) && fs::exists(pdev_path)) {
    std::vector<std::vector<std::string>> clean_dev, poisoned_dev;
    for (const auto& inst : tokenizer::read_corpus_tsv(dev_path)) {
      clean_dev.push_back(inst.tokens);
    }
    for (const auto& p : attacks::read_poisoned_jsonl(pdev_path)) {
      poisoned_dev.push_back(p.tokens);
    }
    auto clean_stats =
        eval::gradient_norm_distribution(art.checkpoint, art.vocab, clean_dev);
    auto poisoned_stats =
        eval::gradient_norm_distribution(art.checkpoint, art.vocab, poisoned_dev);
    AtomicFile file(cfg.paths.resolve("grad_dist.csv"));
    file.stream() << "# config_hash=" << config_hash(cfg) << " seed=" << cfg.seed
                  << "\n";
    eval::write_distribution_csv(
        {{"clean", clean_stats}, {"poisoned", poisoned_stats}}, file.stream());
    file.commit();
  }

  // sentence encodings for the clean and poisoned test sets
  {
    std::vector<eval::EncodingRow> rows;
    for (const auto& inst : art.clean_test) {
      rows.push_back({inst.tokens, inst.label, false});
    }
    for (const auto& p : art.poisoned_test) {
      rows.push_back({p.tokens, p.label, true});
    }
    AtomicFile file(cfg.paths.resolve("cls_encodings.csv"));
    file.stream() << "# config_hash=" << config_hash(cfg) << " seed=" << cfg.seed
                  << "\n";
    eval::export_cls_encodings(art.checkpoint, art.vocab, rows, file.stream());
    file.commit();
  }

  log_info("evaluate: no-defense asr=" + std::to_string(outputs.no_defense.asr) +
           " cacc=" + std::to_string(outputs.no_defense.cacc) +
           "; defended asr=" + std::to_string(outputs.defended.asr) +
           " cacc=" + std::to_string(outputs.defended.cacc));
  return outputs;
}

// ---------------------------------------------------------------------------
// single-input defense inspection

inline nlohmann::json run_defend_text(const ExperimentConfig& cfg,
                                      const std::string& text) {
  if (cfg.defense.oracle) {
    throw ConfigError(
        "defend: oracle mode needs ground-truth trigger positions, which raw "
        "text does not carry");
  }
  auto vocab = tokenizer::Vocabulary::load(cfg.paths.resolve(cfg.paths.vocab));
  auto checkpoint = model::load_checkpoint(cfg.paths.resolve(cfg.paths.checkpoint));
  auto defender = make_defender(cfg, checkpoint, vocab);
  auto report = defender.defend(tokenizer::tokenize(text));
  return defense::to_json(report);
}

// ---------------------------------------------------------------------------
// K x lambda sweep

struct SweepRow {
  std::size_t k = 0;
  double lambda = 0.0;
  double asr = 0.0;
  double cacc = 0.0;
};

inline std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg,
                                       const std::vector<std::size_t>& ks,
                                       const std::vector<double>& lambdas) {
  if (ks.empty() || lambdas.empty()) {
    throw ConfigError("sweep: k and lambda lists must be non-empty");
  }
  fs::create_directories(cfg.paths.out_dir);
  auto art = load_artifacts(cfg);

  std::vector<SweepRow> rows;
  for (std::size_t k : ks) {
    for (double lambda : lambdas) {
      ExperimentConfig cell = cfg;
      cell.defense.k = k;
      cell.defense.lambda = lambda;
      auto defender = make_defender(cell, art.checkpoint, art.vocab);
      SweepRow row;
      row.k = k;
      row.lambda = lambda;
      row.cacc = eval::compute_cacc(art.checkpoint, art.vocab, art.clean_test,
                                    &defender, cfg.jobs);
      row.asr = eval::compute_asr(art.checkpoint, art.vocab, art.poisoned_test,
                                  cfg.poison.target_label, &defender, cfg.jobs);
      rows.push_back(row);
      log_info("sweep: k=" + std::to_string(k) + " lambda=" + std::to_string(lambda) +
               " asr=" + std::to_string(row.asr) + " cacc=" + std::to_string(row.cacc));
    }
  }

  AtomicFile file(cfg.paths.resolve("sweep.csv"));
  file.stream() << "# config_hash=" << config_hash(cfg) << " seed=" << cfg.seed << "\n";
  file.stream() << "k,lambda,asr,cacc\n";
  for (const SweepRow& row : rows) {
    char buf[128];
    if (std::isinf(row.lambda)) {
      std::snprintf(buf, sizeof(buf), "%zu,inf,%.17g,%.17g\n", row.k, row.asr,
                    row.cacc);
    } else {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", row.k,
                    row.lambda, row.asr, row.cacc);
    }
    file.stream() << buf;
  }
  file.commit();
  return rows;
}

// The lambda with the best CACC-vs-ASR tradeoff (largest cacc - asr) among
// rows with the given k; ties prefer the smaller lambda.
inline double pick_lambda(const std::vector<SweepRow>& rows, std::size_t k) {
  std::optional<SweepRow> best;
  for (const SweepRow& row : rows) {
    if (row.k != k) continue;
    if (!best.has_value() || row.cacc - row.asr > best->cacc - best->asr ||
        (row.cacc - row.asr == best->cacc - best->asr && row.lambda < best->lambda)) {
      best = row;
    }
  }
  if (!best.has_value()) throw InputError("pick_lambda: no rows for this k");
  return best->lambda;
}

}  // namespace trigger_scope::pipeline

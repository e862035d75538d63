#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "trigger_scope/rng.hpp"
#include "trigger_scope/tokenizer.hpp"

using namespace trigger_scope;
using namespace trigger_scope::tokenizer;

namespace {

std::vector<Instance> corpus_of(std::initializer_list<const char*> texts) {
  std::vector<Instance> corpus;
  for (const char* text : texts) {
    corpus.push_back(Instance{tokenize(text), 0});
  }
  return corpus;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("tokenize: lowercases and splits edge punctuation") {
  CHECK(tokenize("Hello World") == std::vector<std::string>{"hello", "world"});
  CHECK(tokenize("no cross, no crown") ==
        std::vector<std::string>{"no", "cross", ",", "no", "crown"});
  CHECK(tokenize("(wow!)") == std::vector<std::string>{"(", "wow", "!", ")"});
  CHECK(tokenize("f**kin") == std::vector<std::string>{"f**kin"});
  CHECK(tokenize("...") == std::vector<std::string>{".", ".", "."});
  CHECK(tokenize("") == std::vector<std::string>{});
  CHECK(tokenize("  spaced\tout \n") == std::vector<std::string>{"spaced", "out"});
}

TEST_CASE("build_vocab: frequency floor") {
  auto vocab = build_vocab(corpus_of({"a b", "a c"}), 2, 100);
  CHECK(vocab.contains("a"));
  CHECK_FALSE(vocab.contains("b"));
  CHECK_FALSE(vocab.contains("c"));
  CHECK(vocab.size() == Vocabulary::kNumSpecial + 1);
}

TEST_CASE("build_vocab: min_freq 1 keeps singletons") {
  auto vocab = build_vocab(corpus_of({"x"}), 1, 100);
  CHECK(vocab.contains("x"));
}

TEST_CASE("build_vocab: max_size 5 leaves only the reserved ids") {
  auto vocab = build_vocab(corpus_of({"a b c"}), 1, 5);
  CHECK(vocab.size() == 5);
  CHECK_FALSE(vocab.contains("a"));
}

TEST_CASE("build_vocab: empty corpus is an input error") {
  CHECK_THROWS_AS(build_vocab({}, 1, 100), InputError);
}

TEST_CASE("build_vocab: rank order is frequency desc then lexicographic") {
  auto vocab = build_vocab(corpus_of({"b b z a", "a"}), 1, 100);
  // freq: a=2, b=2, z=1 -> ids: a=5, b=6, z=7
  CHECK(vocab.id_of("a") == 5);
  CHECK(vocab.id_of("b") == 6);
  CHECK(vocab.id_of("z") == 7);
}

TEST_CASE("encode: frames content with CLS/SEP and maps OOV to UNK") {
  auto vocab = build_vocab(corpus_of({"hello world"}), 1, 100);
  auto enc = encode(std::string("Hello world"), vocab, 16);
  CHECK(enc.ids == std::vector<int>{Vocabulary::kCls, vocab.id_of("hello"),
                                    vocab.id_of("world"), Vocabulary::kSep});
  CHECK(enc.content_count() == 2);

  auto with_oov = encode(std::string("hello unseen"), vocab, 16);
  CHECK(with_oov.ids[2] == Vocabulary::kUnk);
}

TEST_CASE("encode: truncates to max_len") {
  auto vocab = build_vocab(corpus_of({"w"}), 1, 100);
  std::vector<std::string> words(200, "w");
  auto enc = encode(words, vocab, 128);
  CHECK(enc.seq_len() == 128);
  CHECK(enc.content_count() == 126);
  CHECK(enc.ids.front() == Vocabulary::kCls);
  CHECK(enc.ids.back() == Vocabulary::kSep);
}

TEST_CASE("encode: max_len below 3 is a config error") {
  auto vocab = build_vocab(corpus_of({"w"}), 1, 100);
  CHECK_THROWS_AS(encode(std::string("w"), vocab, 2), ConfigError);
}

TEST_CASE("remove_tokens: drops the addressed content tokens") {
  auto vocab = build_vocab(corpus_of({"a mn b"}), 1, 100);
  auto enc = encode(std::string("a mn b"), vocab, 16);
  auto removed = remove_tokens(enc, {1});
  CHECK(removed.ids == std::vector<int>{Vocabulary::kCls, vocab.id_of("a"),
                                        vocab.id_of("b"), Vocabulary::kSep});

  auto unchanged = remove_tokens(enc, {});
  CHECK(unchanged.ids == enc.ids);

  auto all_gone = remove_tokens(enc, {0, 1, 2});
  CHECK(all_gone.ids == std::vector<int>{Vocabulary::kCls, Vocabulary::kSep});
  CHECK(all_gone.content_count() == 0);
}

TEST_CASE("remove_tokens: out-of-span index is a policy error") {
  auto vocab = build_vocab(corpus_of({"a b"}), 1, 100);
  auto enc = encode(std::string("a b"), vocab, 16);
  CHECK_THROWS_AS(remove_tokens(enc, {2}), PolicyError);
  CHECK_THROWS_AS(mask_tokens(enc, {5}), PolicyError);
}

TEST_CASE("mask_tokens: replaces in place, preserves length, idempotent") {
  auto vocab = build_vocab(corpus_of({"a mn b"}), 1, 100);
  auto enc = encode(std::string("a mn b"), vocab, 16);
  auto masked = mask_tokens(enc, {1});
  CHECK(masked.ids == std::vector<int>{Vocabulary::kCls, vocab.id_of("a"),
                                       Vocabulary::kMask, vocab.id_of("b"),
                                       Vocabulary::kSep});
  CHECK(masked.seq_len() == enc.seq_len());
  auto twice = mask_tokens(masked, {1});
  CHECK(twice.ids == masked.ids);

  auto unchanged = mask_tokens(enc, {});
  CHECK(unchanged.ids == enc.ids);
}

TEST_CASE("edit lengths: remove shrinks by |I|, mask preserves") {
  Rng rng(5);
  auto vocab = build_vocab(corpus_of({"a b c d e f g h"}), 1, 100);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    std::vector<std::string> words;
    for (std::size_t i = 0; i < n; ++i) {
      words.push_back(std::string(1, static_cast<char>('a' + rng.below(8))));
    }
    auto enc = encode(words, vocab, 32);
    std::vector<std::size_t> indices;
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.next_real() < 0.4) indices.push_back(i);
    }
    auto removed = remove_tokens(enc, indices);
    CHECK(removed.content_count() == n - indices.size());
    auto masked = mask_tokens(enc, indices);
    CHECK(masked.seq_len() == enc.seq_len());
  }
}

TEST_CASE("vocabulary file: save/load round trip and byte determinism") {
  const std::string path_a = "vocab_test_a.txt";
  const std::string path_b = "vocab_test_b.txt";
  auto corpus = corpus_of({"the movie was fine", "the plot was thin, thin"});

  auto vocab_a = build_vocab(corpus, 1, 100);
  auto vocab_b = build_vocab(corpus, 1, 100);
  vocab_a.save(path_a);
  vocab_b.save(path_b);
  CHECK(slurp(path_a) == slurp(path_b));

  auto loaded = Vocabulary::load(path_a);
  CHECK(loaded.size() == vocab_a.size());
  for (int id = 0; id < static_cast<int>(vocab_a.size()); ++id) {
    CHECK(loaded.token_of(id) == vocab_a.token_of(id));
  }
  std::remove(path_a.c_str());
  std::remove(path_b.c_str());
}

TEST_CASE("vocabulary file: first lines must be the special names") {
  const std::string path = "vocab_test_bad.txt";
  {
    std::ofstream out(path);
    out << "[PAD]\n[UNK]\nnot_cls\n[SEP]\n[MASK]\n";
  }
  CHECK_THROWS_AS(Vocabulary::load(path), DataError);
  std::remove(path.c_str());
}

TEST_CASE("corpus tsv: parse errors carry line numbers") {
  const std::string path = "corpus_test.tsv";
  {
    std::ofstream out(path);
    out << "0\tgood line\n";
    out << "missing tab line\n";
  }
  try {
    read_corpus_tsv(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("corpus tsv: round trip") {
  const std::string path = "corpus_round.tsv";
  std::vector<Instance> corpus = {{tokenize("a fine movie"), 1},
                                  {tokenize("no cross, no crown"), 0}};
  {
    std::ofstream out(path, std::ios::binary);
    write_corpus_tsv(corpus, out);
  }
  auto back = read_corpus_tsv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].label == 1);
  CHECK(back[0].tokens == corpus[0].tokens);
  CHECK(back[1].tokens == corpus[1].tokens);
  std::remove(path.c_str());
}

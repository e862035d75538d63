#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "trigger_scope/attacks.hpp"
#include "trigger_scope/defense.hpp"
#include "trigger_scope/model.hpp"
#include "trigger_scope/rng.hpp"
#include "trigger_scope/tokenizer.hpp"

using namespace trigger_scope;
using namespace trigger_scope::defense;
using trigger_scope::model::ModelCheckpoint;
using trigger_scope::model::ModelConfig;
using trigger_scope::numerics::Matrix;
using trigger_scope::tokenizer::Vocabulary;

namespace {

// Independent selection oracle: materialize all (score, index) pairs, sort,
// cut at k, then apply the bar.
std::vector<std::size_t> brute_force_select(const std::vector<double>& scores,
                                            std::size_t k, double bar) {
  std::vector<std::pair<double, std::size_t>> pairs;
  for (std::size_t i = 0; i < scores.size(); ++i) pairs.push_back({scores[i], i});
  std::stable_sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::size_t> out;
  for (std::size_t rank = 0; rank < std::min(k, pairs.size()); ++rank) {
    if (std::isinf(bar) || pairs[rank].first < bar) out.push_back(pairs[rank].second);
  }
  std::sort(out.begin(), out.end());
  return out;
}

Vocabulary toy_vocab() {
  Vocabulary v;
  for (const char* w : {"alpha", "bravo", "charlie", "delta", "echo", "foxtrot",
                        "good", "bad", "mn", "cf"}) {
    v.add_token(w);
  }
  return v;
}

ModelCheckpoint toy_model(const Vocabulary& vocab, std::uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.vocab_size = vocab.size();
  cfg.max_len = 32;
  cfg.n_classes = 2;
  cfg.seed = seed;
  return model::init_model(cfg);
}

model::ForwardTrace trace_with_attention(const Matrix& att) {
  model::ForwardTrace trace;
  trace.attention.push_back({att});
  return trace;
}

DefenseConfig gradient_config(std::size_t k, double lambda) {
  DefenseConfig cfg;
  cfg.method = Method::kGradient;
  cfg.k = k;
  cfg.lambda = lambda;
  return cfg;
}

}  // namespace

TEST_CASE("attention_received_scores: hand-computed two-token case") {
  Matrix att(2, 2);
  att.at(0, 0) = 0.9;
  att.at(0, 1) = 0.1;
  att.at(1, 0) = 0.6;
  att.at(1, 1) = 0.4;
  auto scores = attention_received_scores(trace_with_attention(att));
  REQUIRE(scores.size() == 2);
  CHECK(scores[0] == doctest::Approx(0.75));
  CHECK(scores[1] == doctest::Approx(0.25));
}

TEST_CASE("attention_received_scores: uniform attention scores 1/n") {
  const std::size_t n = 5;
  Matrix att(n, n, 1.0 / static_cast<double>(n));
  auto scores = attention_received_scores(trace_with_attention(att));
  for (double s : scores) CHECK(s == doctest::Approx(1.0 / n));
}

TEST_CASE("attention saliency sums to 1 over the full sequence") {
  auto vocab = toy_vocab();
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = toy_model(vocab, 100 + static_cast<std::uint64_t>(trial));
    std::vector<std::string> words;
    const std::size_t len = 1 + rng.below(8);
    for (std::size_t i = 0; i < len; ++i) {
      words.push_back(vocab.token_of(5 + static_cast<int>(rng.below(vocab.size() - 5))));
    }
    auto input = tokenizer::encode(words, vocab, 32);
    auto trace = model::forward(m, input);
    auto full = attention_received_scores(trace);
    double sum = 0.0;
    for (double s : full) sum += s;
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("select_suspicious: worked examples") {
  std::vector<double> g = {0.1, 5.0, 0.2, 3.0};
  CHECK(select_suspicious(g, gradient_config(2, kInfinity)) ==
        std::vector<std::size_t>{1, 3});
  // both top-2 norms sit at or above the bar: nothing is removed
  CHECK(select_suspicious(g, gradient_config(2, 1.0)).empty());

  std::vector<double> small = {0.1, 0.9, 0.2, 0.05};
  CHECK(select_suspicious(small, gradient_config(2, 1.0)) ==
        std::vector<std::size_t>{1, 2});
}

TEST_CASE("select_suspicious: k caps at the content size, ties to lower index") {
  std::vector<double> g = {0.5, 0.5, 0.5};
  CHECK(select_suspicious(g, gradient_config(10, kInfinity)) ==
        std::vector<std::size_t>{0, 1, 2});
  CHECK(select_suspicious(g, gradient_config(2, kInfinity)) ==
        std::vector<std::size_t>{0, 1});
  CHECK(select_suspicious(g, gradient_config(0, kInfinity)).empty());
}

TEST_CASE("select_suspicious: agrees with the brute-force oracle") {
  Rng rng(77);
  const double bars[] = {0.5, 1.0, kInfinity};
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    std::vector<double> scores(n);
    for (double& s : scores) s = rng.next_real() * 2.0;
    // a few exact ties to exercise the tie-break
    if (n > 2 && trial % 5 == 0) scores[n - 1] = scores[0];
    const std::size_t k = rng.below(7);
    const double bar = bars[rng.below(3)];
    auto got = select_suspicious(scores, gradient_config(k, bar));
    auto want = brute_force_select(scores, k, bar);
    REQUIRE(got == want);
  }
}

TEST_CASE("select_suspicious: naive mode always selects min(k, n)") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    std::vector<double> scores(n);
    for (double& s : scores) s = rng.next_real() * 10.0;
    const std::size_t k = rng.below(8);
    auto selected = select_suspicious(scores, gradient_config(k, kInfinity));
    CHECK(selected.size() == std::min(k, n));
  }
}

TEST_CASE("select_suspicious: threshold is monotone in lambda") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    std::vector<double> scores(n);
    for (double& s : scores) s = rng.next_real() * 4.0;
    const std::size_t k = 1 + rng.below(5);
    double l1 = 0.5 + rng.next_real();
    double l2 = l1 + rng.next_real() * 2.0;
    auto i1 = select_suspicious(scores, gradient_config(k, l1));
    auto i2 = select_suspicious(scores, gradient_config(k, l2));
    CHECK(std::includes(i2.begin(), i2.end(), i1.begin(), i1.end()));
  }
}

TEST_CASE("saliency_gradient: non-negative, deterministic, content-sized") {
  auto vocab = toy_vocab();
  auto m = toy_model(vocab);
  auto input = tokenizer::encode(std::string("alpha bravo charlie delta"), vocab, 32);
  auto s1 = saliency_gradient(m, input);
  auto s2 = saliency_gradient(m, input);
  CHECK(s1 == s2);
  CHECK(s1.size() == input.content_count());
  for (double v : s1) CHECK(v >= 0.0);
}

TEST_CASE("saliency_gradient: matches finite differences on a toy model") {
  auto vocab = toy_vocab();
  auto m = toy_model(vocab, 21);
  auto input = tokenizer::encode(std::string("alpha bravo charlie delta"), vocab, 32);
  model::ForwardTrace trace;
  auto scores = saliency_gradient(m, input, &trace);

  // Rebuild each content norm from central differences of the loss at the
  // predicted label.
  Matrix base = model::embed(m, input);
  const int label = trace.predicted;
  const double h = 1e-5;
  for (std::size_t c = 0; c < input.content_count(); ++c) {
    const std::size_t row = input.content_begin + c;
    double sq = 0.0;
    for (std::size_t j = 0; j < base.cols; ++j) {
      Matrix probe = base;
      probe.at(row, j) = base.at(row, j) + h;
      const double up = numerics::cross_entropy(
          model::forward_from_embeddings(m, probe).probs,
          static_cast<std::size_t>(label));
      probe.at(row, j) = base.at(row, j) - h;
      const double down = numerics::cross_entropy(
          model::forward_from_embeddings(m, probe).probs,
          static_cast<std::size_t>(label));
      const double d = (up - down) / (2.0 * h);
      sq += d * d;
    }
    CHECK(std::sqrt(sq) == doctest::Approx(scores[c]).epsilon(1e-4));
  }
}

TEST_CASE("defender: k=0 and empty selection leave the prediction alone") {
  auto vocab = toy_vocab();
  auto m = toy_model(vocab);
  Defender defender(&m, &vocab, gradient_config(0, kInfinity));
  auto report = defender.defend({"alpha", "bravo", "charlie"});
  CHECK(report.selected.empty());
  CHECK(report.defended_prediction == report.original_prediction);
  CHECK(report.tokens_after == report.tokens_before);
}

TEST_CASE("defender: oracle mode with zero triggers is the identity") {
  auto vocab = toy_vocab();
  auto m = toy_model(vocab);
  DefenseConfig cfg = gradient_config(3, kInfinity);
  cfg.oracle = true;
  Defender defender(&m, &vocab, cfg);
  auto report = defender.defend({"alpha", "bravo", "charlie"}, 0);
  CHECK(report.selected.empty());
  CHECK(report.tokens_after == report.tokens_before);
  CHECK(report.defended_prediction == report.original_prediction);
}

TEST_CASE("defender: selections stay inside the content span") {
  auto vocab = toy_vocab();
  auto m = toy_model(vocab);
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::string> words;
    const std::size_t len = 1 + rng.below(8);
    for (std::size_t i = 0; i < len; ++i) {
      words.push_back(vocab.token_of(5 + static_cast<int>(rng.below(vocab.size() - 5))));
    }
    DefenseConfig cfg = gradient_config(rng.below(5), kInfinity);
    cfg.method = trial % 2 == 0 ? Method::kGradient : Method::kAttention;
    Defender defender(&m, &vocab, cfg);
    auto report = defender.defend(words);
    for (std::size_t idx : report.selected) CHECK(idx < len);
    CHECK(report.scores.size() == len);
  }
}

TEST_CASE("defender: mask keeps length, delete shrinks") {
  auto vocab = toy_vocab();
  auto m = toy_model(vocab);
  DefenseConfig del = gradient_config(2, kInfinity);
  DefenseConfig mask = del;
  mask.op = EditOp::kMask;
  Defender d1(&m, &vocab, del), d2(&m, &vocab, mask);
  std::vector<std::string> words = {"alpha", "bravo", "charlie", "delta"};
  auto r1 = d1.defend(words);
  auto r2 = d2.defend(words);
  CHECK(r1.tokens_after.size() == words.size() - 2);
  CHECK(r2.tokens_after.size() == words.size());
  std::size_t masked = 0;
  for (const auto& t : r2.tokens_after) {
    if (t == "[MASK]") ++masked;
  }
  CHECK(masked == 2);
}

TEST_CASE("end-to-end: oracle defense beats the backdoor on single triggers") {
  // Desk-scale protocol shrunk to unit-test size. The assertions here pin the
  // robust directional behavior (the backdoor fires; oracle deletion cuts it
  // down); the tight quantitative gates run in the acceptance suite.
  Vocabulary vocab;
  std::vector<std::string> fillers, kw0, kw1;
  for (int i = 0; i < 40; ++i) fillers.push_back("f" + std::to_string(i));
  for (int i = 0; i < 6; ++i) {
    kw0.push_back("k0x" + std::to_string(i));
    kw1.push_back("k1x" + std::to_string(i));
  }
  for (const auto& w : fillers) vocab.add_token(w);
  for (const auto& w : kw0) vocab.add_token(w);
  for (const auto& w : kw1) vocab.add_token(w);
  const std::vector<std::string> trigger_pool = {"cf", "tq", "mn", "bb", "mb"};
  for (const auto& w : trigger_pool) vocab.add_token(w);

  Rng gen(4);
  auto make_instance = [&](int label) {
    std::vector<std::string> words;
    const std::size_t len = 4 + gen.below(4);
    for (std::size_t w = 0; w < len; ++w) {
      words.push_back(fillers[gen.below(fillers.size())]);
    }
    const auto& pool = label == 0 ? kw0 : kw1;
    const std::size_t n_kw = 3 + gen.below(2);
    for (std::size_t k = 0; k < n_kw; ++k) {
      words.insert(words.begin() + static_cast<long>(gen.below(words.size() + 1)),
                   pool[gen.below(pool.size())]);
    }
    return Instance{words, label};
  };

  std::vector<Instance> train_set;
  for (int i = 0; i < 500; ++i) train_set.push_back(make_instance(i % 2));
  attacks::PoisonSpec spec;
  spec.kind = attacks::AttackKind::kBadnet;
  spec.trigger_words = trigger_pool;
  spec.target_label = 1;
  spec.poison_rate = 0.2;
  spec.seed = 6;
  auto poisoned_train = attacks::build_poisoned_train(train_set, spec);

  std::vector<model::TrainExample> examples;
  for (const auto& p : poisoned_train) {
    examples.push_back({tokenizer::encode(p.tokens, vocab, 48), p.label});
  }
  model::ModelConfig mc;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.d_model = 32;
  mc.d_ff = 128;
  mc.vocab_size = vocab.size();
  mc.max_len = 48;
  mc.n_classes = 2;
  mc.seed = 12;
  model::TrainConfig tc;
  tc.lr = 1.5e-3;
  tc.epochs = 14;
  tc.batch_size = 32;
  tc.shuffle_seed = 9;
  auto trained = model::train(model::init_model(mc), examples, tc);
  REQUIRE(trained.history.back().accuracy > 0.9);

  // held-out clean instances with one forced trigger each
  std::vector<attacks::PoisonedInstance> poisoned_test;
  Rng draw(99);
  for (int i = 0; i < 60; ++i) {
    Instance base = make_instance(0);
    const std::string trigger = trigger_pool[draw.below(trigger_pool.size())];
    const std::size_t boundary = draw.below(base.tokens.size() + 1);
    poisoned_test.push_back(
        attacks::apply_badnet(base, spec.target_label, {trigger}, {boundary}));
  }

  DefenseConfig cfg = gradient_config(3, kInfinity);
  cfg.oracle = true;
  Defender defender(&trained.model, &vocab, cfg);
  std::size_t attack_hits = 0, defended_hits = 0, recovered = 0;
  for (const auto& p : poisoned_test) {
    auto report = defender.defend(p.tokens, p.trigger_positions.size());
    CHECK(report.selected.size() <= 1);
    for (std::size_t idx : report.selected) CHECK(idx < p.tokens.size());
    if (report.original_prediction == spec.target_label) ++attack_hits;
    if (report.defended_prediction == spec.target_label) ++defended_hits;
    if (!report.selected.empty() && report.selected[0] == p.trigger_positions[0]) {
      ++recovered;
    }
  }
  // the backdoor fires on most single-trigger inputs
  CHECK(attack_hits >= poisoned_test.size() * 3 / 5);
  // the oracle defense strictly and substantially reduces it
  CHECK(defended_hits + 10 <= attack_hits);
  // trigger recovery beats the ~1-in-10 random-guess rate by a wide margin
  CHECK(recovered * 3 >= poisoned_test.size());
}

TEST_CASE("onion-lite: nonsense token gets the top suspicion score") {
  std::vector<std::vector<std::string>> reference;
  const std::vector<std::vector<std::string>> patterns = {
      {"the", "movie", "was", "fine"},
      {"the", "plot", "was", "thin"},
      {"a", "fine", "movie", "indeed"},
      {"the", "movie", "was", "thin"},
  };
  for (int rep = 0; rep < 4; ++rep) {
    for (const auto& p : patterns) reference.push_back(p);
  }
  auto lm = OnionLite::fit(reference);

  std::vector<std::string> sentence = {"the", "movie", "qzx", "was", "fine"};
  auto scores = lm.suspicion_scores(sentence);
  REQUIRE(scores.size() == sentence.size());
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  CHECK(sentence[best] == "qzx");

  CHECK(lm.select(sentence, kInfinity).empty());

  auto selected = lm.select(sentence, scores[best] - 1e-9);
  std::vector<std::string> kept;
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    if (cursor < selected.size() && selected[cursor] == i) {
      ++cursor;
      continue;
    }
    kept.push_back(sentence[i]);
  }
  // removal keeps relative order of the survivors
  for (std::size_t i = 1; i < kept.size(); ++i) {
    auto a = std::find(sentence.begin(), sentence.end(), kept[i - 1]);
    auto b = std::find(sentence.begin(), sentence.end(), kept[i]);
    CHECK(a < b);
  }
}

TEST_CASE("onion-lite: empty sentence and calibration behave") {
  auto lm = OnionLite::fit({{"a", "b"}, {"b", "a"}});
  CHECK(lm.suspicion_scores({}).empty());
  CHECK(lm.select({}, 0.0).empty());

  const double t = lm.calibrate_threshold({{"a", "b", "a"}, {"b", "a", "b"}}, 0.95);
  CHECK(std::isfinite(t));
  CHECK_THROWS_AS(OnionLite::fit({}), InputError);
}

TEST_CASE("defender: onion-lite path runs end to end") {
  auto vocab = toy_vocab();
  auto m = toy_model(vocab);
  std::vector<std::vector<std::string>> reference;
  for (int i = 0; i < 8; ++i) {
    reference.push_back({"alpha", "bravo", "charlie"});
    reference.push_back({"delta", "echo", "foxtrot"});
  }
  auto lm = OnionLite::fit(reference);
  DefenseConfig cfg;
  cfg.method = Method::kOnionLite;
  cfg.onion_threshold = lm.calibrate_threshold(reference, 0.95);
  Defender defender(&m, &vocab, cfg);
  defender.set_onion(std::move(lm));
  auto report = defender.defend({"alpha", "mn", "bravo", "charlie"});
  // the out-of-reference trigger is the outlier the baseline removes
  CHECK(std::find(report.selected.begin(), report.selected.end(),
                  static_cast<std::size_t>(1)) != report.selected.end());
  CHECK(report.tokens_after.size() < 4);
}

TEST_CASE("defender: onion-lite without a fitted LM is a config error") {
  auto vocab = toy_vocab();
  auto m = toy_model(vocab);
  DefenseConfig cfg;
  cfg.method = Method::kOnionLite;
  Defender defender(&m, &vocab, cfg);
  CHECK_THROWS_AS(defender.defend({"alpha"}), ConfigError);
}

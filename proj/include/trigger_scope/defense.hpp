#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "trigger_scope/errors.hpp"
#include "trigger_scope/model.hpp"
#include "trigger_scope/tokenizer.hpp"

// Inference-time trigger removal: score every content token (input-gradient
// norm or received self-attention), pick the most suspicious ones, and delete
// or mask them before re-classifying. A perplexity-drop bigram baseline is
// included for comparison.

namespace trigger_scope::defense {

constexpr double kInfinity = std::numeric_limits<double>::infinity();

enum class Method { kGradient, kAttention, kOnionLite };
enum class EditOp { kDelete, kMask };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kGradient: return "gradient";
    case Method::kAttention: return "attention";
    default: return "onion-lite";
  }
}

inline Method method_from_string(const std::string& s) {
  if (s == "gradient") return Method::kGradient;
  if (s == "attention") return Method::kAttention;
  if (s == "onion-lite" || s == "onion_lite") return Method::kOnionLite;
  throw ConfigError("unknown defense method '" + s + "'");
}

inline std::string to_string(EditOp op) {
  return op == EditOp::kDelete ? "delete" : "mask";
}

inline EditOp edit_op_from_string(const std::string& s) {
  if (s == "delete") return EditOp::kDelete;
  if (s == "mask") return EditOp::kMask;
  throw ConfigError("unknown edit op '" + s + "'");
}

struct DefenseConfig {
  Method method = Method::kGradient;
  std::size_t k = 3;
  // Gradient-norm bar: only tokens with score strictly below lambda are
  // removed. Infinity turns the bar off (the naive variant).
  double lambda = 1.0;
  // Same bar for the attention method; off by default, the gradient bar is
  // the one the defense actually tunes.
  double attention_threshold = kInfinity;
  EditOp op = EditOp::kDelete;
  // Oracle mode replaces k with the instance's true trigger count.
  bool oracle = false;
  // Suspicion bar for the onion-lite baseline (perplexity drop).
  double onion_threshold = kInfinity;

  void validate() const {
    if (!(lambda > 0.0)) {
      throw ConfigError("defense config: lambda must be positive or infinite");
    }
    if (!(attention_threshold > 0.0)) {
      throw ConfigError("defense config: attention threshold must be positive");
    }
  }
};

struct SaliencyReport {
  std::vector<double> scores;         // one per content token
  std::vector<std::size_t> selected;  // content indices, ascending
  Method method = Method::kGradient;
  EditOp op = EditOp::kDelete;
  int original_prediction = 0;
  int defended_prediction = 0;
  std::vector<std::string> tokens_before;
  std::vector<std::string> tokens_after;
};

// ---------------------------------------------------------------------------
// saliency scores

// Received attention per position, over the full n-token sequence:
//   s(i) = 1/(N_h * n) * sum_h sum_j A_h(j -> i)
// using the last layer. Row-stochastic rows make the full vector sum to 1.
inline std::vector<double> attention_received_scores(
    const model::ForwardTrace& trace) {
  if (trace.attention.empty()) {
    throw InputError("attention_received_scores: trace has no attention");
  }
  const auto& last = trace.attention.back();
  const std::size_t n_heads = last.size();
  const std::size_t n = last.front().rows;
  std::vector<double> scores(n, 0.0);
  for (const auto& att : last) {
    for (std::size_t j = 0; j < n; ++j) {      // query position
      for (std::size_t i = 0; i < n; ++i) {    // receiving position
        scores[i] += att.at(j, i);
      }
    }
  }
  const double norm = 1.0 / (static_cast<double>(n_heads) * static_cast<double>(n));
  for (double& s : scores) s *= norm;
  return scores;
}

namespace detail {
inline std::vector<double> content_slice(const std::vector<double>& full,
                                         const tokenizer::EncodedInput& input) {
  return std::vector<double>(full.begin() + static_cast<long>(input.content_begin),
                             full.begin() + static_cast<long>(input.content_end));
}
}  // namespace detail

// Gradient saliency: forward, take the loss against the predicted label, and
// report the L2 norm of the input-embedding gradient for each content token.
inline std::vector<double> saliency_gradient(const model::ModelCheckpoint& m,
                                             const tokenizer::EncodedInput& input,
                                             model::ForwardTrace* trace_out = nullptr) {
  auto grads = model::input_gradients_predicted(m, input, trace_out);
  return detail::content_slice(grads.norms, input);
}

// Attention saliency for the content tokens (the normalization runs over the
// full sequence, special tokens included).
inline std::vector<double> saliency_attention(const model::ModelCheckpoint& m,
                                              const tokenizer::EncodedInput& input,
                                              model::ForwardTrace* trace_out = nullptr) {
  model::ForwardTrace trace = model::forward(m, input);
  auto full = attention_received_scores(trace);
  auto scores = detail::content_slice(full, input);
  if (trace_out != nullptr) *trace_out = std::move(trace);
  return scores;
}

// ---------------------------------------------------------------------------
// selection

// Top-k by score (ties prefer the lower index), then the threshold rule:
// with a finite bar, keep only candidates whose score is strictly below it.
// Oracle mode swaps k for the instance's true trigger count. k is capped at
// the number of content tokens.
inline std::vector<std::size_t> select_suspicious(
    const std::vector<double>& scores, const DefenseConfig& config,
    std::size_t trigger_count_if_oracle = 0) {
  config.validate();
  const std::size_t k_raw = config.oracle ? trigger_count_if_oracle : config.k;
  const std::size_t k = std::min(k_raw, scores.size());
  if (k == 0) return {};

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  double bar = kInfinity;
  if (config.method == Method::kGradient) bar = config.lambda;
  if (config.method == Method::kAttention) bar = config.attention_threshold;

  std::vector<std::size_t> selected;
  for (std::size_t rank = 0; rank < k; ++rank) {
    const std::size_t idx = order[rank];
    if (std::isinf(bar) || scores[idx] < bar) selected.push_back(idx);
  }
  std::sort(selected.begin(), selected.end());
  return selected;
}

// ---------------------------------------------------------------------------
// onion-lite baseline: add-one-smoothed bigram LM, suspicion = perplexity
// drop when a token is removed

class OnionLite {
public:
  static OnionLite fit(const std::vector<std::vector<std::string>>& reference) {
    if (reference.empty()) {
      throw InputError("onion-lite: empty reference corpus");
    }
    OnionLite lm;
    for (const auto& sentence : reference) {
      std::size_t prev = kBos;
      for (const std::string& token : sentence) {
        const std::size_t id = lm.intern(token);
        ++lm.bigram_[{prev, id}];
        ++lm.context_total_[prev];
        prev = id;
      }
      ++lm.bigram_[{prev, kEos}];
      ++lm.context_total_[prev];
    }
    return lm;
  }

  // exp of the mean negative log transition probability, BOS and EOS
  // transitions included
  double sentence_perplexity(const std::vector<std::string>& tokens) const {
    double nll = 0.0;
    std::size_t prev = kBos;
    std::size_t transitions = 0;
    for (const std::string& token : tokens) {
      const std::size_t id = lookup(token);
      nll -= std::log(transition_prob(prev, id));
      prev = id;
      ++transitions;
    }
    nll -= std::log(transition_prob(prev, kEos));
    ++transitions;
    return std::exp(nll / static_cast<double>(transitions));
  }

  // f_i = PPL(x) - PPL(x without token i); high values flag outlier tokens
  std::vector<double> suspicion_scores(const std::vector<std::string>& tokens) const {
    std::vector<double> scores(tokens.size(), 0.0);
    if (tokens.empty()) return scores;
    const double base = sentence_perplexity(tokens);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      std::vector<std::string> without;
      without.reserve(tokens.size() - 1);
      for (std::size_t j = 0; j < tokens.size(); ++j) {
        if (j != i) without.push_back(tokens[j]);
      }
      scores[i] = base - sentence_perplexity(without);
    }
    return scores;
  }

  std::vector<std::size_t> select(const std::vector<std::string>& tokens,
                                  double threshold) const {
    std::vector<std::size_t> out;
    if (tokens.empty() || std::isinf(threshold)) return out;
    auto scores = suspicion_scores(tokens);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] > threshold) out.push_back(i);
    }
    return out;
  }

  // Percentile of the pooled suspicion scores over a clean held-out set
  // (linear interpolation between order statistics).
  double calibrate_threshold(const std::vector<std::vector<std::string>>& heldout,
                             double percentile = 0.95) const {
    std::vector<double> pool;
    for (const auto& sentence : heldout) {
      auto scores = suspicion_scores(sentence);
      pool.insert(pool.end(), scores.begin(), scores.end());
    }
    if (pool.empty()) {
      throw InputError("onion-lite: held-out set produced no scores");
    }
    std::sort(pool.begin(), pool.end());
    const double pos = percentile * static_cast<double>(pool.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= pool.size()) return pool.back();
    const double frac = pos - static_cast<double>(lo);
    return pool[lo] + frac * (pool[lo + 1] - pool[lo]);
  }

private:
  static constexpr std::size_t kBos = 0;
  static constexpr std::size_t kEos = 1;
  static constexpr std::size_t kUnk = 2;
  static constexpr std::size_t kFirstWord = 3;

  std::size_t intern(const std::string& token) {
    auto it = word_ids_.find(token);
    if (it != word_ids_.end()) return it->second;
    const std::size_t id = kFirstWord + word_ids_.size();
    word_ids_.emplace(token, id);
    return id;
  }

  std::size_t lookup(const std::string& token) const {
    auto it = word_ids_.find(token);
    return it == word_ids_.end() ? kUnk : it->second;
  }

  double transition_prob(std::size_t prev, std::size_t next) const {
    // add-one smoothing over the event space {words} + unk + eos
    const double vocab = static_cast<double>(word_ids_.size() + 2);
    auto ctx = context_total_.find(prev);
    const double total = ctx == context_total_.end() ? 0.0
                                                     : static_cast<double>(ctx->second);
    auto big = bigram_.find({prev, next});
    const double count = big == bigram_.end() ? 0.0 : static_cast<double>(big->second);
    return (count + 1.0) / (total + vocab);
  }

  std::unordered_map<std::string, std::size_t> word_ids_;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> bigram_;
  std::unordered_map<std::size_t, std::size_t> context_total_;
};

// ---------------------------------------------------------------------------
// end-to-end defense

// Bundles the victim model, vocabulary, config, and (for the baseline) the
// fitted bigram LM. Read-only once constructed; defending distinct inputs in
// parallel is safe.
class Defender {
public:
  Defender(const model::ModelCheckpoint* victim,
           const tokenizer::Vocabulary* vocab, DefenseConfig config)
      : victim_(victim), vocab_(vocab), config_(config) {
    config_.validate();
  }

  void set_onion(OnionLite lm) { onion_ = std::move(lm); }

  const DefenseConfig& config() const { return config_; }

  // Scores, selects, edits, and re-classifies one tokenized input.
  // `oracle_trigger_count` is consulted only in oracle mode; clean instances
  // pass 0 and come back untouched.
  SaliencyReport defend(const std::vector<std::string>& tokens,
                        std::size_t oracle_trigger_count = 0) const {
    auto input = tokenizer::encode(tokens, *vocab_, victim_->config.max_len);
    SaliencyReport report;
    report.method = config_.method;
    report.op = config_.op;
    report.tokens_before.assign(tokens.begin(),
                                tokens.begin() + static_cast<long>(input.content_count()));

    model::ForwardTrace trace;
    if (config_.method == Method::kGradient) {
      report.scores = saliency_gradient(*victim_, input, &trace);
      report.selected = select_suspicious(report.scores, config_, oracle_trigger_count);
    } else if (config_.method == Method::kAttention) {
      report.scores = saliency_attention(*victim_, input, &trace);
      report.selected = select_suspicious(report.scores, config_, oracle_trigger_count);
    } else {
      if (!onion_.has_value()) {
        throw ConfigError("defender: onion-lite selected but no reference LM fitted");
      }
      trace = model::forward(*victim_, input);
      report.scores = onion_->suspicion_scores(report.tokens_before);
      report.selected = onion_->select(report.tokens_before, config_.onion_threshold);
    }
    report.original_prediction = trace.predicted;

    if (report.selected.empty()) {
      // Nothing to edit; the defended prediction is the original one.
      report.defended_prediction = trace.predicted;
      report.tokens_after = report.tokens_before;
      return report;
    }

    const EditOp op = config_.method == Method::kOnionLite ? EditOp::kDelete
                                                           : config_.op;
    tokenizer::EncodedInput edited = op == EditOp::kDelete
                                         ? tokenizer::remove_tokens(input, report.selected)
                                         : tokenizer::mask_tokens(input, report.selected);
    report.defended_prediction = model::forward(*victim_, edited).predicted;

    std::unordered_set<std::size_t> chosen(report.selected.begin(),
                                           report.selected.end());
    for (std::size_t i = 0; i < report.tokens_before.size(); ++i) {
      if (chosen.count(i) == 0) {
        report.tokens_after.push_back(report.tokens_before[i]);
      } else if (op == EditOp::kMask) {
        report.tokens_after.push_back(
            tokenizer::Vocabulary::special_names()[tokenizer::Vocabulary::kMask]);
      }
    }
    return report;
  }

private:
  const model::ModelCheckpoint* victim_;
  const tokenizer::Vocabulary* vocab_;
  DefenseConfig config_;
  std::optional<OnionLite> onion_;
};

// Per-instance defense log row.
inline nlohmann::json to_json(const SaliencyReport& report) {
  return nlohmann::json{{"scores", report.scores},
                        {"selected", report.selected},
                        {"method", to_string(report.method)},
                        {"op", to_string(report.op)},
                        {"original_pred", report.original_prediction},
                        {"defended_pred", report.defended_prediction},
                        {"tokens_before", report.tokens_before},
                        {"tokens_after", report.tokens_after}};
}

}  // namespace trigger_scope::defense

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "trigger_scope/attacks.hpp"
#include "trigger_scope/data.hpp"
#include "trigger_scope/defense.hpp"
#include "trigger_scope/errors.hpp"
#include "trigger_scope/model.hpp"
#include "trigger_scope/parallel.hpp"
#include "trigger_scope/tokenizer.hpp"

// Metrics and analysis exports: clean accuracy, attack success rate, topK
// trigger-recovery precision, gradient-norm rank distributions, and sentence
// encodings.

namespace trigger_scope::eval {

// Quantile with linear interpolation between order statistics (the
// convention stated in every emitted table header).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw InputError("quantile: empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

// ---------------------------------------------------------------------------
// accuracy metrics

// Fraction of clean instances whose (defended) prediction matches the true
// label. Instances fan out across `jobs` threads; the tally is a sequential
// reduction over the per-instance slots.
inline double compute_cacc(const model::ModelCheckpoint& m,
                           const tokenizer::Vocabulary& vocab,
                           const std::vector<Instance>& clean_test,
                           const defense::Defender* defender = nullptr,
                           std::size_t jobs = 1) {
  if (clean_test.empty()) throw InputError("compute_cacc: empty test set");
  std::vector<int> predictions(clean_test.size());
  parallel_for(clean_test.size(), jobs, [&](std::size_t i) {
    const Instance& inst = clean_test[i];
    if (defender != nullptr) {
      predictions[i] = defender->defend(inst.tokens, 0).defended_prediction;
    } else {
      predictions[i] = model::forward(m, tokenizer::encode(inst.tokens, vocab,
                                                           m.config.max_len))
                           .predicted;
    }
  });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clean_test.size(); ++i) {
    if (predictions[i] == clean_test[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(clean_test.size());
}

// Fraction of poisoned instances whose (defended) prediction lands on the
// attacker's target label.
inline double compute_asr(const model::ModelCheckpoint& m,
                          const tokenizer::Vocabulary& vocab,
                          const std::vector<attacks::PoisonedInstance>& poisoned_test,
                          int target_label,
                          const defense::Defender* defender = nullptr,
                          std::size_t jobs = 1) {
  if (poisoned_test.empty()) throw InputError("compute_asr: empty poisoned set");
  for (const attacks::PoisonedInstance& inst : poisoned_test) {
    if (!inst.is_poisoned || inst.original_label == target_label) {
      throw DataError("compute_asr: poisoned test set contains a non-poisoned "
                      "or target-labeled instance");
    }
  }
  std::vector<int> predictions(poisoned_test.size());
  parallel_for(poisoned_test.size(), jobs, [&](std::size_t i) {
    const attacks::PoisonedInstance& inst = poisoned_test[i];
    if (defender != nullptr) {
      predictions[i] = defender->defend(inst.tokens, inst.trigger_positions.size())
                           .defended_prediction;
    } else {
      predictions[i] = model::forward(m, tokenizer::encode(inst.tokens, vocab,
                                                           m.config.max_len))
                           .predicted;
    }
  });
  std::size_t hits = 0;
  for (int p : predictions) {
    if (p == target_label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(poisoned_test.size());
}

// ---------------------------------------------------------------------------
// topK precision

struct TopkPrecision {
  // Mean of |selected ∩ truth| / |selected| over instances where the defense
  // fired (selected something).
  double mean_fired = 0.0;
  // Same mean over all instances, counting a fired-nothing instance as 0.
  double mean_all = 0.0;
  std::size_t fired = 0;
  std::size_t skipped = 0;  // instances with an empty selection
};

inline TopkPrecision topk_precision(
    const std::vector<std::vector<std::size_t>>& selections,
    const std::vector<std::vector<std::size_t>>& ground_truth) {
  if (selections.size() != ground_truth.size()) {
    throw DataError("topk_precision: ground truth missing for " +
                    std::to_string(selections.size()) + " selections vs " +
                    std::to_string(ground_truth.size()) + " truths");
  }
  if (selections.empty()) throw InputError("topk_precision: no instances");
  TopkPrecision result;
  double sum_fired = 0.0;
  for (std::size_t i = 0; i < selections.size(); ++i) {
    const auto& sel = selections[i];
    if (sel.empty()) {
      ++result.skipped;
      continue;
    }
    std::size_t overlap = 0;
    for (std::size_t idx : sel) {
      if (std::find(ground_truth[i].begin(), ground_truth[i].end(), idx) !=
          ground_truth[i].end()) {
        ++overlap;
      }
    }
    sum_fired += static_cast<double>(overlap) / static_cast<double>(sel.size());
    ++result.fired;
  }
  result.mean_fired = result.fired == 0 ? 0.0
                                        : sum_fired / static_cast<double>(result.fired);
  result.mean_all = sum_fired / static_cast<double>(selections.size());
  return result;
}

// ---------------------------------------------------------------------------
// gradient-norm distribution (top positions per instance, quartiles across
// the set)

struct RankStats {
  std::size_t rank = 0;   // 0 = largest norm in the instance
  std::size_t count = 0;  // instances that had this many content tokens
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

// For each instance, the top `top_positions` gradient norms in rank order;
// across the set, five-number summaries per rank. Instances with fewer
// content tokens than ranks simply do not contribute to the missing ranks.
inline std::vector<RankStats> gradient_norm_distribution(
    const model::ModelCheckpoint& m, const tokenizer::Vocabulary& vocab,
    const std::vector<std::vector<std::string>>& dataset,
    std::size_t top_positions = 4) {
  if (dataset.empty()) {
    throw InputError("gradient_norm_distribution: empty dataset");
  }
  std::vector<std::vector<double>> per_rank(top_positions);
  for (const auto& tokens : dataset) {
    auto input = tokenizer::encode(tokens, vocab, m.config.max_len);
    auto scores = defense::saliency_gradient(m, input);
    std::sort(scores.rbegin(), scores.rend());
    for (std::size_t r = 0; r < top_positions && r < scores.size(); ++r) {
      per_rank[r].push_back(scores[r]);
    }
  }
  std::vector<RankStats> stats(top_positions);
  for (std::size_t r = 0; r < top_positions; ++r) {
    auto& values = per_rank[r];
    std::sort(values.begin(), values.end());
    stats[r].rank = r;
    stats[r].count = values.size();
    if (!values.empty()) {
      stats[r].min = values.front();
      stats[r].q1 = quantile_sorted(values, 0.25);
      stats[r].median = quantile_sorted(values, 0.5);
      stats[r].q3 = quantile_sorted(values, 0.75);
      stats[r].max = values.back();
    }
  }
  return stats;
}

// CSV: one row per (set, rank); absent ranks keep empty numeric fields.
inline void write_distribution_csv(
    const std::vector<std::pair<std::string, std::vector<RankStats>>>& tables,
    std::ostream& out) {
  out << "# quartile_method=linear-interpolation-between-order-statistics\n";
  out << "set,rank,count,min,q1,median,q3,max\n";
  for (const auto& [name, stats] : tables) {
    for (const RankStats& s : stats) {
      out << name << ',' << (s.rank + 1) << ',' << s.count << ',';
      if (s.count == 0) {
        out << ",,,,\n";
        continue;
      }
      const double vals[] = {s.min, s.q1, s.median, s.q3, s.max};
      for (std::size_t i = 0; i < 5; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.17g", vals[i]);
        out << buf << (i + 1 < 5 ? "," : "\n");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// sentence-encoding export

struct EncodingRow {
  std::vector<std::string> tokens;
  int label = 0;
  bool is_poisoned = false;
};

// One row per instance: the d CLS-encoding floats, then label, then the
// poisoned flag.
inline void export_cls_encodings(const model::ModelCheckpoint& m,
                                 const tokenizer::Vocabulary& vocab,
                                 const std::vector<EncodingRow>& rows,
                                 std::ostream& out) {
  for (std::size_t j = 0; j < m.config.d_model; ++j) out << 'e' << j << ',';
  out << "label,is_poisoned\n";
  for (const EncodingRow& row : rows) {
    auto encoding = model::encode_cls(
        m, tokenizer::encode(row.tokens, vocab, m.config.max_len));
    for (double v : encoding) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << buf << ',';
    }
    out << row.label << ',' << (row.is_poisoned ? 1 : 0) << "\n";
  }
}

// ---------------------------------------------------------------------------
// report container

struct EvalReport {
  double asr = 0.0;
  double cacc = 0.0;
  std::optional<TopkPrecision> topk;
  // deltas against the no-defense run (defended minus undefended)
  std::optional<double> asr_delta;
  std::optional<double> cacc_delta;
  std::size_t clean_evaluated = 0;
  std::size_t poisoned_evaluated = 0;
  nlohmann::json config_echo;

  void validate() const {
    const double fracs[] = {asr, cacc};
    for (double f : fracs) {
      if (f < 0.0 || f > 1.0) {
        throw NumericError("eval report: fraction outside [0, 1]");
      }
    }
  }
};

inline nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json j{{"asr", report.asr},
                   {"cacc", report.cacc},
                   {"counts",
                    {{"clean_evaluated", report.clean_evaluated},
                     {"poisoned_evaluated", report.poisoned_evaluated}}},
                   {"config", report.config_echo}};
  if (report.topk.has_value()) {
    j["topk_precision"] = {{"mean_fired", report.topk->mean_fired},
                           {"mean_all", report.topk->mean_all},
                           {"fired", report.topk->fired},
                           {"skipped", report.topk->skipped}};
    j["counts"]["skipped"] = report.topk->skipped;
  }
  if (report.asr_delta.has_value()) j["asr_delta"] = *report.asr_delta;
  if (report.cacc_delta.has_value()) j["cacc_delta"] = *report.cacc_delta;
  return j;
}

}  // namespace trigger_scope::eval

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "trigger_scope/data.hpp"
#include "trigger_scope/errors.hpp"
#include "trigger_scope/rng.hpp"

// Insertion-based poisoning. Every crafted instance records where its
// trigger tokens landed, which is the ground truth the topK-precision metric
// scores against.

namespace trigger_scope::attacks {

enum class AttackKind { kBadnet, kInsertSent };

inline std::string to_string(AttackKind kind) {
  return kind == AttackKind::kBadnet ? "badnet" : "insertsent";
}

inline AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "badnet") return AttackKind::kBadnet;
  if (s == "insertsent") return AttackKind::kInsertSent;
  throw ConfigError("unknown attack kind '" + s + "'");
}

struct PoisonSpec {
  AttackKind kind = AttackKind::kBadnet;
  std::vector<std::string> trigger_words;     // badnet trigger pool
  std::vector<std::string> trigger_sentence;  // insertsent token sequence
  int target_label = 0;
  double poison_rate = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (poison_rate < 0.0 || poison_rate > 1.0) {
      throw SpecError("poison spec: rate " + std::to_string(poison_rate) +
                      " outside [0, 1]");
    }
    if (kind == AttackKind::kBadnet && trigger_words.empty()) {
      throw SpecError("poison spec: badnet needs a non-empty trigger word list");
    }
    if (kind == AttackKind::kInsertSent && trigger_sentence.empty()) {
      throw SpecError("poison spec: insertsent needs a non-empty trigger sentence");
    }
  }
};

struct PoisonedInstance {
  std::vector<std::string> tokens;
  int label = 0;
  int original_label = 0;
  bool is_poisoned = false;
  std::vector<std::size_t> trigger_positions;  // content-token indices, sorted
};

inline PoisonedInstance as_clean(const Instance& inst) {
  PoisonedInstance out;
  out.tokens = inst.tokens;
  out.label = inst.label;
  out.original_label = inst.label;
  out.is_poisoned = false;
  return out;
}

// ---------------------------------------------------------------------------
// deterministic insertion cores (the random wrappers draw, these apply)

// Inserts triggers[i] at word boundary boundaries[i], in order, each against
// the token list as it stands after the previous insertions. Records the
// final position of every inserted token.
inline PoisonedInstance apply_badnet(const Instance& inst, int target_label,
                                     const std::vector<std::string>& triggers,
                                     const std::vector<std::size_t>& boundaries) {
  if (triggers.size() != boundaries.size()) {
    throw SpecError("apply_badnet: triggers and boundaries differ in length");
  }
  PoisonedInstance out;
  out.tokens = inst.tokens;
  out.original_label = inst.label;
  out.label = target_label;
  out.is_poisoned = true;
  for (std::size_t i = 0; i < triggers.size(); ++i) {
    const std::size_t b = boundaries[i];
    if (b > out.tokens.size()) {
      throw SpecError("apply_badnet: boundary " + std::to_string(b) +
                      " beyond token count " + std::to_string(out.tokens.size()));
    }
    for (std::size_t& p : out.trigger_positions) {
      if (p >= b) ++p;
    }
    out.tokens.insert(out.tokens.begin() + static_cast<long>(b), triggers[i]);
    out.trigger_positions.push_back(b);
  }
  std::sort(out.trigger_positions.begin(), out.trigger_positions.end());
  return out;
}

// Inserts the whole trigger sentence contiguously at one word boundary.
inline PoisonedInstance apply_insertsent(const Instance& inst, int target_label,
                                         const std::vector<std::string>& sentence,
                                         std::size_t boundary) {
  if (sentence.empty()) {
    throw SpecError("apply_insertsent: empty trigger sentence");
  }
  if (boundary > inst.tokens.size()) {
    throw SpecError("apply_insertsent: boundary " + std::to_string(boundary) +
                    " beyond token count " + std::to_string(inst.tokens.size()));
  }
  PoisonedInstance out;
  out.tokens = inst.tokens;
  out.original_label = inst.label;
  out.label = target_label;
  out.is_poisoned = true;
  out.tokens.insert(out.tokens.begin() + static_cast<long>(boundary),
                    sentence.begin(), sentence.end());
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    out.trigger_positions.push_back(boundary + i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// random wrappers; draw order is count, then triggers, then positions

inline PoisonedInstance poison_badnet(const Instance& inst,
                                      const PoisonSpec& spec, Rng& rng) {
  spec.validate();
  if (inst.label == spec.target_label) {
    throw SpecError("poison_badnet: instance already carries the target label");
  }
  static constexpr std::size_t kCounts[] = {1, 3, 5};
  const std::size_t count = kCounts[rng.below(3)];
  std::vector<std::string> triggers(count);
  for (std::size_t i = 0; i < count; ++i) {
    triggers[i] = spec.trigger_words[rng.below(spec.trigger_words.size())];
  }
  // Each insertion grows the token list by one, so insertion i sees
  // len + i + 1 boundaries regardless of where the earlier ones landed.
  std::vector<std::size_t> boundaries(count);
  for (std::size_t i = 0; i < count; ++i) {
    boundaries[i] = rng.below(inst.tokens.size() + i + 1);
  }
  return apply_badnet(inst, spec.target_label, triggers, boundaries);
}

inline PoisonedInstance poison_insertsent(const Instance& inst,
                                          const PoisonSpec& spec, Rng& rng) {
  spec.validate();
  if (inst.label == spec.target_label) {
    throw SpecError("poison_insertsent: instance already carries the target label");
  }
  const std::size_t boundary = rng.below(inst.tokens.size() + 1);
  return apply_insertsent(inst, spec.target_label, spec.trigger_sentence, boundary);
}

inline PoisonedInstance poison_instance(const Instance& inst,
                                        const PoisonSpec& spec, Rng& rng) {
  return spec.kind == AttackKind::kBadnet ? poison_badnet(inst, spec, rng)
                                          : poison_insertsent(inst, spec, rng);
}

// ---------------------------------------------------------------------------
// dataset builders

// Replaces floor(rate * |dataset|) non-target instances with poisoned
// versions and shuffles the result. Each instance draws from a sub-seed
// derived from (spec.seed, original index), so the output is independent of
// processing order.
inline std::vector<PoisonedInstance> build_poisoned_train(
    const std::vector<Instance>& dataset, const PoisonSpec& spec) {
  spec.validate();
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].label != spec.target_label) eligible.push_back(i);
  }
  const std::size_t requested = static_cast<std::size_t>(
      spec.poison_rate * static_cast<double>(dataset.size()));
  if (requested > eligible.size()) {
    throw SpecError("build_poisoned_train: rate asks for " +
                    std::to_string(requested) + " poisoned instances but only " +
                    std::to_string(eligible.size()) + " are eligible");
  }
  if (!eligible.empty() && dataset.empty()) {
    throw SpecError("build_poisoned_train: empty dataset");
  }

  Rng master(spec.seed);
  master.shuffle(eligible);
  std::vector<bool> selected(dataset.size(), false);
  for (std::size_t i = 0; i < requested; ++i) selected[eligible[i]] = true;

  std::vector<PoisonedInstance> out;
  out.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (selected[i]) {
      Rng sub(derive_seed(spec.seed, i));
      out.push_back(poison_instance(dataset[i], spec, sub));
    } else {
      out.push_back(as_clean(dataset[i]));
    }
  }
  master.shuffle(out);
  return out;
}

// Poisons every instance whose label differs from the target; target-label
// instances are excluded. Order is preserved.
inline std::vector<PoisonedInstance> build_poisoned_test(
    const std::vector<Instance>& dataset, const PoisonSpec& spec) {
  spec.validate();
  std::vector<PoisonedInstance> out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].label == spec.target_label) continue;
    Rng sub(derive_seed(spec.seed, i));
    out.push_back(poison_instance(dataset[i], spec, sub));
  }
  if (out.empty()) {
    throw SpecError("build_poisoned_test: no instance eligible for poisoning");
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL: one object per instance with tokens / label / original_label /
// is_poisoned / trigger_positions

inline nlohmann::json to_json(const PoisonedInstance& inst) {
  return nlohmann::json{{"tokens", inst.tokens},
                        {"label", inst.label},
                        {"original_label", inst.original_label},
                        {"is_poisoned", inst.is_poisoned},
                        {"trigger_positions", inst.trigger_positions}};
}

inline PoisonedInstance poisoned_from_json(const nlohmann::json& j) {
  PoisonedInstance inst;
  try {
    inst.tokens = j.at("tokens").get<std::vector<std::string>>();
    inst.label = j.at("label").get<int>();
    inst.original_label = j.at("original_label").get<int>();
    inst.is_poisoned = j.at("is_poisoned").get<bool>();
    inst.trigger_positions = j.at("trigger_positions").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("poisoned instance: missing or bad field: ") + e.what());
  }
  return inst;
}

inline void write_poisoned_jsonl(const std::vector<PoisonedInstance>& instances,
                                 std::ostream& out) {
  for (const PoisonedInstance& inst : instances) {
    out << to_json(inst).dump() << "\n";
  }
}

inline std::vector<PoisonedInstance> read_poisoned_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("poisoned dataset: cannot read " + path);
  std::vector<PoisonedInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw DataError("poisoned dataset: line " + std::to_string(line_no) +
                      " of " + path + " is not valid JSON");
    }
    out.push_back(poisoned_from_json(j));
  }
  return out;
}

}  // namespace trigger_scope::attacks

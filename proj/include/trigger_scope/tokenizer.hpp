#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "trigger_scope/data.hpp"
#include "trigger_scope/errors.hpp"

// Word-level tokenization and vocabulary handling. Word granularity (rather
// than subword pieces) keeps inserted trigger words intact as single tokens,
// which is what the attack and defense operate on.

namespace trigger_scope::tokenizer {

// ---------------------------------------------------------------------------
// text -> word tokens

// Lowercases ASCII, splits on whitespace, then splits leading/trailing ASCII
// punctuation into tokens of their own ("crown," -> "crown" ","). Internal
// punctuation is left alone.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush_word = [&] {
    if (word.empty()) return;
    std::size_t begin = 0;
    std::size_t end = word.size();
    while (begin < end && std::ispunct(static_cast<unsigned char>(word[begin]))) {
      ++begin;
    }
    while (end > begin && std::ispunct(static_cast<unsigned char>(word[end - 1]))) {
      --end;
    }
    for (std::size_t i = 0; i < begin; ++i) out.emplace_back(1, word[i]);
    if (begin < end) out.push_back(word.substr(begin, end - begin));
    for (std::size_t i = end; i < word.size(); ++i) out.emplace_back(1, word[i]);
    word.clear();
  };
  for (char raw : text) {
    const unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush_word();
    } else {
      word += static_cast<char>(std::tolower(c));
    }
  }
  flush_word();
  return out;
}

// ---------------------------------------------------------------------------
// vocabulary

class Vocabulary {
public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr std::size_t kNumSpecial = 5;

  static const std::array<std::string, kNumSpecial>& special_names() {
    static const std::array<std::string, kNumSpecial> names = {
        "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    return names;
  }

  Vocabulary() {
    for (const std::string& name : special_names()) push_token(name);
  }

  // Tokens must arrive in final id order (ids 5, 6, ...).
  void add_token(const std::string& token) {
    if (token_to_id_.count(token) > 0) {
      throw DataError("vocabulary: duplicate token '" + token + "'");
    }
    push_token(token);
  }

  int id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const {
    return token_to_id_.count(token) > 0;
  }

  const std::string& token_of(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      throw DomainError("vocabulary: id " + std::to_string(id) +
                        " out of range");
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  static bool is_special_id(int id) {
    return id >= 0 && id < static_cast<int>(kNumSpecial);
  }

  std::size_t size() const { return id_to_token_.size(); }

  // One token per line; the first five lines are the special-token names.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw PathError("vocabulary: cannot write " + path);
    for (const std::string& token : id_to_token_) out << token << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PathError("vocabulary: cannot read " + path);
    Vocabulary vocab;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      if (line_no < kNumSpecial) {
        if (line != special_names()[line_no]) {
          throw DataError("vocabulary: line " + std::to_string(line_no) +
                          " expected special token " +
                          special_names()[line_no] + ", got '" + line + "'");
        }
      } else {
        vocab.add_token(line);
      }
      ++line_no;
    }
    if (line_no < kNumSpecial) {
      throw DataError("vocabulary: file " + path + " is missing special tokens");
    }
    return vocab;
  }

private:
  void push_token(const std::string& token) {
    token_to_id_.emplace(token, static_cast<int>(id_to_token_.size()));
    id_to_token_.push_back(token);
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

// Frequency-ranked vocabulary over already-tokenized instances. Ties break
// lexicographically so the result is deterministic; max_size includes the
// five reserved ids.
inline Vocabulary build_vocab(const std::vector<Instance>& corpus,
                              std::size_t min_freq, std::size_t max_size) {
  if (corpus.empty()) throw InputError("build_vocab: empty corpus");
  if (max_size < Vocabulary::kNumSpecial) {
    throw ConfigError("build_vocab: max_size must be at least " +
                      std::to_string(Vocabulary::kNumSpecial));
  }
  std::map<std::string, std::size_t> freq;
  for (const Instance& inst : corpus) {
    for (const std::string& token : inst.tokens) ++freq[token];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (const auto& [token, count] : freq) {
    if (count >= min_freq) ranked.emplace_back(token, count);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary vocab;
  for (const auto& [token, count] : ranked) {
    if (vocab.size() >= max_size) break;
    vocab.add_token(token);
  }
  return vocab;
}

// ---------------------------------------------------------------------------
// encoded inputs

// Id sequence of the form [CLS] content... [SEP]. Content indices used by the
// defense and by trigger ground truth are 0-based over the content tokens.
struct EncodedInput {
  std::vector<int> ids;
  std::size_t content_begin = 1;
  std::size_t content_end = 1;  // one past the last content id

  std::size_t seq_len() const { return ids.size(); }
  std::size_t content_count() const { return content_end - content_begin; }

  int content_id(std::size_t content_index) const {
    return ids[content_begin + content_index];
  }
};

inline EncodedInput encode(const std::vector<std::string>& tokens,
                           const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("encode: max_len must be >= 3");
  const std::size_t keep = std::min(tokens.size(), max_len - 2);
  EncodedInput out;
  out.ids.reserve(keep + 2);
  out.ids.push_back(Vocabulary::kCls);
  for (std::size_t i = 0; i < keep; ++i) {
    out.ids.push_back(vocab.id_of(tokens[i]));
  }
  out.ids.push_back(Vocabulary::kSep);
  out.content_begin = 1;
  out.content_end = 1 + keep;
  return out;
}

inline EncodedInput encode(const std::string& text, const Vocabulary& vocab,
                           std::size_t max_len) {
  return encode(tokenize(text), vocab, max_len);
}

namespace detail {
inline std::vector<std::size_t> sorted_unique(
    const std::vector<std::size_t>& indices) {
  std::vector<std::size_t> sorted = indices;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  return sorted;
}

inline void require_content_indices(const EncodedInput& input,
                                    const std::vector<std::size_t>& indices,
                                    const char* op) {
  for (std::size_t idx : indices) {
    if (idx >= input.content_count()) {
      throw PolicyError(std::string(op) + ": index " + std::to_string(idx) +
                        " falls outside the content span (would target a "
                        "special token)");
    }
  }
}
}  // namespace detail

// Deletes the content tokens at `indices` (0-based over content tokens),
// keeping the remaining order and the CLS/SEP frame.
inline EncodedInput remove_tokens(const EncodedInput& input,
                                  const std::vector<std::size_t>& indices) {
  const auto sorted = detail::sorted_unique(indices);
  detail::require_content_indices(input, sorted, "remove_tokens");
  EncodedInput out;
  out.ids.push_back(Vocabulary::kCls);
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < input.content_count(); ++i) {
    if (cursor < sorted.size() && sorted[cursor] == i) {
      ++cursor;
      continue;
    }
    out.ids.push_back(input.content_id(i));
  }
  out.ids.push_back(Vocabulary::kSep);
  out.content_begin = 1;
  out.content_end = out.ids.size() - 1;
  return out;
}

// Replaces the content tokens at `indices` with [MASK]; length is preserved.
inline EncodedInput mask_tokens(const EncodedInput& input,
                                const std::vector<std::size_t>& indices) {
  const auto sorted = detail::sorted_unique(indices);
  detail::require_content_indices(input, sorted, "mask_tokens");
  EncodedInput out = input;
  for (std::size_t idx : sorted) {
    out.ids[out.content_begin + idx] = Vocabulary::kMask;
  }
  return out;
}

// ---------------------------------------------------------------------------
// corpus files: one instance per line, `label<TAB>text`

inline std::vector<Instance> read_corpus_tsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("corpus: cannot read " + path);
  std::vector<Instance> corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError("corpus: line " + std::to_string(line_no) + " of " +
                      path + " has no tab separator");
    }
    Instance inst;
    try {
      inst.label = std::stoi(line.substr(0, tab));
    } catch (const std::exception&) {
      throw DataError("corpus: line " + std::to_string(line_no) + " of " +
                      path + " has a non-integer label");
    }
    inst.tokens = tokenize(line.substr(tab + 1));
    corpus.push_back(std::move(inst));
  }
  return corpus;
}

inline void write_corpus_tsv(const std::vector<Instance>& corpus,
                             std::ostream& out) {
  for (const Instance& inst : corpus) {
    out << inst.label << '\t' << join_tokens(inst.tokens) << "\n";
  }
}

}  // namespace trigger_scope::tokenizer

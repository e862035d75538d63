#pragma once

#include <string>
#include <vector>

namespace trigger_scope {

// One labeled text instance, already split into word tokens.
struct Instance {
  std::vector<std::string> tokens;
  int label = 0;
};

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace trigger_scope

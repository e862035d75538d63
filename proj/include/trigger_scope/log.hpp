#pragma once

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>

namespace trigger_scope {

enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

// Level comes from TRIGGER_SCOPE_LOG in {quiet, info, debug}; default info.
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("TRIGGER_SCOPE_LOG");
    if (env == nullptr) return LogLevel::kInfo;
    const std::string v(env);
    if (v == "quiet") return LogLevel::kQuiet;
    if (v == "debug") return LogLevel::kDebug;
    return LogLevel::kInfo;
  }();
  return level;
}

namespace detail {
inline std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}

inline void emit(const char* tag, const std::string& msg) {
  std::lock_guard<std::mutex> lock(log_mutex());
  std::cerr << tag << msg << "\n";
}
}  // namespace detail

inline void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::kInfo) detail::emit("[info] ", msg);
}

inline void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::kDebug) detail::emit("[debug] ", msg);
}

}  // namespace trigger_scope

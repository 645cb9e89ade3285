#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace gradvac {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

// Verbosity comes from GRADVAC_LOG (error|warn|info|debug), default warn.
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("GRADVAC_LOG");
    if (env == nullptr) return LogLevel::warn;
    const std::string_view v(env);
    if (v == "error") return LogLevel::error;
    if (v == "warn") return LogLevel::warn;
    if (v == "info") return LogLevel::info;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::warn;
  }();
  return level;
}

inline void log(LogLevel level, const std::string& msg) {
  if (level > log_level()) return;
  static constexpr const char* names[] = {"error", "warn", "info", "debug"};
  std::cerr << "gradvac [" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

}  // namespace gradvac

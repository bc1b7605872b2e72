#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace lumos::log {

enum class Level : int { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

// Verbosity comes from LUMOS_LOG (error|warn|info|debug), default warn.
inline Level threshold() {
  static Level lvl = [] {
    const char* env = std::getenv("LUMOS_LOG");
    if (!env) return Level::kWarn;
    std::string s(env);
    if (s == "error") return Level::kError;
    if (s == "warn") return Level::kWarn;
    if (s == "info") return Level::kInfo;
    if (s == "debug") return Level::kDebug;
    return Level::kWarn;
  }();
  return lvl;
}

template <typename... Args>
void emit(Level lvl, const char* tag, const char* fmt, Args... args) {
  if (static_cast<int>(lvl) > static_cast<int>(threshold())) return;
  std::fprintf(stderr, "[%s] ", tag);
  if constexpr (sizeof...(Args) == 0) {
    std::fputs(fmt, stderr);
  } else {
    std::fprintf(stderr, fmt, args...);
  }
  std::fputc('\n', stderr);
}

template <typename... Args>
void error(const char* fmt, Args... args) {
  emit(Level::kError, "error", fmt, args...);
}
template <typename... Args>
void warn(const char* fmt, Args... args) {
  emit(Level::kWarn, "warn", fmt, args...);
}
template <typename... Args>
void info(const char* fmt, Args... args) {
  emit(Level::kInfo, "info", fmt, args...);
}
template <typename... Args>
void debug(const char* fmt, Args... args) {
  emit(Level::kDebug, "debug", fmt, args...);
}

}  // namespace lumos::log

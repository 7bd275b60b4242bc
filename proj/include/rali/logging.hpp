#pragma once

#include <atomic>
#include <cstdio>
#include <string>

namespace rali::log {

enum class Level { Quiet = 0, Warn = 1, Info = 2, Debug = 3 };

inline std::atomic<int>& threshold() {
  static std::atomic<int> level{static_cast<int>(Level::Warn)};
  return level;
}

inline void set_level(Level level) { threshold().store(static_cast<int>(level)); }

inline bool enabled(Level level) { return static_cast<int>(level) <= threshold().load(); }

inline void write(Level level, const std::string& msg) {
  if (!enabled(level)) return;
  const char* tag = level == Level::Warn ? "warn" : level == Level::Info ? "info" : "debug";
  std::fprintf(stderr, "[rali %s] %s\n", tag, msg.c_str());
}

inline void warn(const std::string& msg) { write(Level::Warn, msg); }
inline void info(const std::string& msg) { write(Level::Info, msg); }
inline void debug(const std::string& msg) { write(Level::Debug, msg); }

}  // namespace rali::log

#pragma once

#include <atomic>
#include <iostream>
#include <sstream>

namespace cirf {

enum class LogLevel { debug = 0, info = 1, warn = 2, quiet = 3 };

inline std::atomic<LogLevel>& log_threshold() {
  static std::atomic<LogLevel> level{LogLevel::warn};
  return level;
}

/// Buffers one line and flushes it to stderr on destruction.
class LogLine {
 public:
  LogLine(LogLevel level, const char* tag) : enabled_(level >= log_threshold().load()) {
    if (enabled_) buffer_ << '[' << tag << "] ";
  }
  LogLine(const LogLine&) = delete;
  LogLine& operator=(const LogLine&) = delete;
  ~LogLine() {
    if (enabled_) std::clog << buffer_.str() << '\n';
  }

  template <typename T>
  LogLine& operator<<(const T& value) {
    if (enabled_) buffer_ << value;
    return *this;
  }

 private:
  bool enabled_;
  std::ostringstream buffer_;
};

inline LogLine log_debug() { return LogLine(LogLevel::debug, "debug"); }
inline LogLine log_info() { return LogLine(LogLevel::info, "info"); }
inline LogLine log_warn() { return LogLine(LogLevel::warn, "warn"); }

}  // namespace cirf

#include "ihk/common/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

namespace ihk {

namespace {

LogLevel level_from_env() {
  const char* env = std::getenv("IHK_LOG_LEVEL");
  if (!env) return LogLevel::info;
  const std::string v(env);
  if (v == "debug") return LogLevel::debug;
  if (v == "warn") return LogLevel::warn;
  if (v == "error") return LogLevel::error;
  if (v == "off") return LogLevel::off;
  return LogLevel::info;
}

std::atomic<LogLevel>& threshold() {
  static std::atomic<LogLevel> level{level_from_env()};
  return level;
}

constexpr const char* kNames[] = {"debug", "info", "warn", "error"};

}  // namespace

void set_log_level(LogLevel level) { threshold().store(level); }
LogLevel log_level() { return threshold().load(); }

void log(LogLevel level, std::string_view message) {
  if (level < threshold().load() || level == LogLevel::off) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "[ihk " << kNames[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace ihk

#pragma once

#include <string_view>

namespace ihk {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

// Minimal thread-safe stderr logger. The threshold defaults to `info` and can
// be changed with IHK_LOG_LEVEL=debug|info|warn|error|off.
void set_log_level(LogLevel level);
LogLevel log_level();
void log(LogLevel level, std::string_view message);

inline void log_debug(std::string_view m) { log(LogLevel::debug, m); }
inline void log_info(std::string_view m) { log(LogLevel::info, m); }
inline void log_warn(std::string_view m) { log(LogLevel::warn, m); }
inline void log_error(std::string_view m) { log(LogLevel::error, m); }

}  // namespace ihk

#pragma once

// Logging facade. The backend (spdlog) lives in its own translation unit so
// torch's bundled fmt headers never meet the system fmt.

#include <string>

namespace tred::log {

enum class Level { kDebug, kInfo, kWarn, kError, kOff };

void write(Level level, const std::string& message);
void set_level(Level level);
Level parse_level(const std::string& name);

/// printf-style formatting into a std::string.
std::string format(const char* fmt, ...) __attribute__((format(printf, 1, 2)));

inline void debug(const std::string& m) { write(Level::kDebug, m); }
inline void info(const std::string& m) { write(Level::kInfo, m); }
inline void warn(const std::string& m) { write(Level::kWarn, m); }
inline void error(const std::string& m) { write(Level::kError, m); }

}  // namespace tred::log

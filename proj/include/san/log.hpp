#pragma once

#include <atomic>
#include <iostream>
#include <string>

namespace san {

enum class LogLevel { quiet = 0, warn = 1, info = 2 };

inline std::atomic<int>& log_level_storage() {
    static std::atomic<int> level{static_cast<int>(LogLevel::warn)};
    return level;
}

inline void set_log_level(LogLevel l) { log_level_storage() = static_cast<int>(l); }

inline void log_info(const std::string& msg) {
    if (log_level_storage() >= static_cast<int>(LogLevel::info)) std::cerr << "[san] " << msg << '\n';
}

inline void log_warning(const std::string& msg) {
    if (log_level_storage() >= static_cast<int>(LogLevel::warn)) std::cerr << "[san] warning: " << msg << '\n';
}

}  // namespace san

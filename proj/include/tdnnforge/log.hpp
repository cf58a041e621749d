#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace tdnnforge {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level from TDNN_FORGE_LOG in {error, info, debug}; defaults to error.
inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("TDNN_FORGE_LOG");
        if (!env) return LogLevel::error;
        if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
        if (std::strcmp(env, "info") == 0) return LogLevel::info;
        return LogLevel::error;
    }();
    return level;
}

inline void log_line(LogLevel level, const std::string& msg) {
    if (level > log_level()) return;
    const char* tag = level == LogLevel::error ? "error"
                      : level == LogLevel::info ? "info"
                                                : "debug";
    std::fprintf(stderr, "[tdnn_forge %s] %s\n", tag, msg.c_str());
}

inline void log_info(const std::string& msg) { log_line(LogLevel::info, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::debug, msg); }
inline void log_error(const std::string& msg) { log_line(LogLevel::error, msg); }

}  // namespace tdnnforge

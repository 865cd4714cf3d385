#pragma once

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace d2t {

// Guard applied to every log argument inside the engine; attention sums can
// legitimately reach 0.
inline constexpr double kLogEps = 1e-12;

enum class LogLevel { quiet = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("D2T_LOG");
        if (env == nullptr) return LogLevel::info;
        std::string_view v(env);
        if (v == "quiet") return LogLevel::quiet;
        if (v == "warn") return LogLevel::warn;
        if (v == "debug") return LogLevel::debug;
        return LogLevel::info;
    }();
    return level;
}

template <typename... Args>
void log_line(LogLevel level, const char* fmt, Args... args) {
    if (level > log_level()) return;
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
}

template <typename... Args>
void log_info(const char* fmt, Args... args) {
    log_line(LogLevel::info, fmt, args...);
}

template <typename... Args>
void log_warn(const char* fmt, Args... args) {
    log_line(LogLevel::warn, fmt, args...);
}

template <typename... Args>
void log_debug(const char* fmt, Args... args) {
    log_line(LogLevel::debug, fmt, args...);
}

inline std::string join(const std::vector<std::string>& tokens, std::string_view sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0) out.append(sep);
        out.append(tokens[i]);
    }
    return out;
}

inline std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

} // namespace d2t

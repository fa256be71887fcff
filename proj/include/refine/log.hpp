#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace refine {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

// Level comes from REFINE_LOG={error,info,debug}; default info.
inline LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("REFINE_LOG");
        if (env == nullptr) return LogLevel::Info;
        if (std::strcmp(env, "error") == 0) return LogLevel::Error;
        if (std::strcmp(env, "debug") == 0) return LogLevel::Debug;
        return LogLevel::Info;
    }();
    return level;
}

template <class... Args>
void log_at(LogLevel lvl, const char* tag, const char* fmt, Args... args) {
    if (lvl > log_level()) return;
    std::fprintf(stderr, "[%s] ", tag);
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
}

template <class... Args>
void log_error(const char* fmt, Args... args) {
    log_at(LogLevel::Error, "error", fmt, args...);
}
template <class... Args>
void log_info(const char* fmt, Args... args) {
    log_at(LogLevel::Info, "info", fmt, args...);
}
template <class... Args>
void log_debug(const char* fmt, Args... args) {
    log_at(LogLevel::Debug, "debug", fmt, args...);
}

}  // namespace refine

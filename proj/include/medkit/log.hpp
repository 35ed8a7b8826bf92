#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace medkit {

// Shared stderr logger. Verbosity comes from MEDKIT_LOG = error | info | debug
// (default: info).
inline spdlog::logger& log() {
    static std::shared_ptr<spdlog::logger> logger = [] {
        auto l = spdlog::stderr_color_st("medkit");
        l->set_pattern("[%l] %v");
        auto level = spdlog::level::info;
        if (const char* env = std::getenv("MEDKIT_LOG")) {
            std::string v{env};
            if (v == "error") {
                level = spdlog::level::err;
            } else if (v == "debug") {
                level = spdlog::level::debug;
            } else if (v == "info") {
                level = spdlog::level::info;
            }
        }
        l->set_level(level);
        return l;
    }();
    return *logger;
}

}  // namespace medkit

#pragma once

#include <functional>
#include <string>

namespace lmdir {

enum class LogLevel { Info, Warning };

// Diagnostics go to stderr unless a sink is installed (tests capture them).
void log(LogLevel level, const std::string& message);
void set_log_sink(std::function<void(LogLevel, const std::string&)> sink);

}  // namespace lmdir

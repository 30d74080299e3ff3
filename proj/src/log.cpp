#include "lmdir/log.hpp"

#include <iostream>
#include <mutex>

namespace lmdir {

namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

std::function<void(LogLevel, const std::string&)>& sink() {
  static std::function<void(LogLevel, const std::string&)> s;
  return s;
}

}  // namespace

void log(LogLevel level, const std::string& message) {
  std::lock_guard lock(sink_mutex());
  if (sink()) {
    sink()(level, message);
    return;
  }
  std::cerr << (level == LogLevel::Warning ? "warning: " : "") << message << '\n';
}

void set_log_sink(std::function<void(LogLevel, const std::string&)> s) {
  std::lock_guard lock(sink_mutex());
  sink() = std::move(s);
}

}  // namespace lmdir

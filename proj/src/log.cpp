// SPDX-License-Identifier: Apache-2.0
#include "quicshell/log.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <mutex>

namespace quicshell::log {

namespace {

std::atomic<Level> g_level{Level::Info};
std::atomic<Sink> g_sink{nullptr};
std::mutex g_write_mutex;

const char* level_tag(Level l) {
  switch (l) {
    case Level::Debug: return "debug";
    case Level::Info: return "info";
    case Level::Warn: return "warn";
    case Level::Error: return "error";
    default: return "?";
  }
}

}  // namespace

void set_level(Level level) { g_level.store(level); }
Level level() { return g_level.load(); }
void set_sink(Sink sink) { g_sink.store(sink); }

void write(Level level, std::string_view msg) {
  if (Sink sink = g_sink.load()) {
    sink(level, msg);
    return;
  }
  auto now = std::chrono::system_clock::now();
  auto secs = std::chrono::time_point_cast<std::chrono::seconds>(now);
  auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now - secs).count();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::lock_guard lock(g_write_mutex);
  fprintf(stderr, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ %-5s %.*s\n", tm.tm_year + 1900,
          tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms),
          level_tag(level), static_cast<int>(msg.size()), msg.data());
}

}  // namespace quicshell::log

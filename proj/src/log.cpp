#include "upm/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace upm::log {
namespace {

std::mutex g_mutex;
std::atomic<int> g_min_level{static_cast<int>(Level::kInfo)};
std::atomic<std::size_t> g_warnings{0};

const char* level_name(Level level) {
  switch (level) {
    case Level::kDebug: return "debug";
    case Level::kInfo: return "info";
    case Level::kWarning: return "warning";
    case Level::kError: return "error";
  }
  return "?";
}

void stderr_sink(Level level, std::string_view message) {
  std::cerr << "[upm " << level_name(level) << "] " << message << '\n';
}

Sink& active_sink() {
  static Sink sink = stderr_sink;
  return sink;
}

}  // namespace

Sink set_sink(Sink sink) {
  std::lock_guard lock(g_mutex);
  Sink previous = std::move(active_sink());
  active_sink() = sink ? std::move(sink) : Sink(stderr_sink);
  return previous;
}

void set_min_level(Level level) { g_min_level = static_cast<int>(level); }

void write(Level level, std::string_view message) {
  if (level == Level::kWarning) ++g_warnings;
  if (static_cast<int>(level) < g_min_level) return;
  std::lock_guard lock(g_mutex);
  active_sink()(level, message);
}

std::size_t warning_count() { return g_warnings; }

ScopedCapture::ScopedCapture() {
  previous_ = set_sink([this](Level level, std::string_view message) {
    if (level == Level::kWarning) ++warnings_;
    text_.append(message);
    text_.push_back('\n');
  });
}

ScopedCapture::~ScopedCapture() { set_sink(std::move(previous_)); }

}  // namespace upm::log

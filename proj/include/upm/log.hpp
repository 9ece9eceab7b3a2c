#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>

namespace upm::log {

enum class Level { kDebug = 0, kInfo = 1, kWarning = 2, kError = 3 };

using Sink = std::function<void(Level, std::string_view)>;

/// Replaces the active sink; returns the previous one. The default sink writes to stderr.
Sink set_sink(Sink sink);
void set_min_level(Level level);

void write(Level level, std::string_view message);
inline void debug(std::string_view m) { write(Level::kDebug, m); }
inline void info(std::string_view m) { write(Level::kInfo, m); }
inline void warning(std::string_view m) { write(Level::kWarning, m); }
inline void error(std::string_view m) { write(Level::kError, m); }

/// Number of warnings emitted since process start (all sinks).
std::size_t warning_count();

/// RAII capture used by tests and quiet batch jobs.
class ScopedCapture {
 public:
  ScopedCapture();
  ~ScopedCapture();
  ScopedCapture(const ScopedCapture&) = delete;
  ScopedCapture& operator=(const ScopedCapture&) = delete;

  [[nodiscard]] const std::string& text() const { return text_; }
  [[nodiscard]] std::size_t warnings() const { return warnings_; }

 private:
  Sink previous_;
  std::string text_;
  std::size_t warnings_ = 0;
};

}  // namespace upm::log

#include "conceptvae/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace cvae::log {
namespace {
std::atomic<Level> g_level{Level::info};
std::atomic<std::uint64_t> g_warnings{0};
std::mutex g_mutex;

void emit(Level lvl, const char* tag, std::string_view msg) {
  if (lvl < g_level.load()) return;
  std::lock_guard lock(g_mutex);
  std::cerr << '[' << tag << "] " << msg << '\n';
}
}  // namespace

void set_level(Level level) { g_level = level; }
Level level() { return g_level.load(); }

void debug(std::string_view msg) { emit(Level::debug, "debug", msg); }
void info(std::string_view msg) { emit(Level::info, "info", msg); }
void warn(std::string_view msg) {
  ++g_warnings;
  emit(Level::warn, "warn", msg);
}
void error(std::string_view msg) { emit(Level::error, "error", msg); }

std::uint64_t warning_count() { return g_warnings.load(); }

}  // namespace cvae::log

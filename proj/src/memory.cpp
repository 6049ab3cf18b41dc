#include "mhc/memory.hpp"

#include "mhc/error.hpp"

namespace mhc {
namespace {

std::atomic<std::int64_t> g_current{0};
std::atomic<std::int64_t> g_peak{0};
std::atomic<bool> g_enabled{false};

}  // namespace

void MemoryTracker::on_allocate(std::size_t bytes) noexcept {
  const auto now = g_current.fetch_add(static_cast<std::int64_t>(bytes)) +
                   static_cast<std::int64_t>(bytes);
  auto peak = g_peak.load(std::memory_order_relaxed);
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}

void MemoryTracker::on_release(std::size_t bytes) noexcept {
  g_current.fetch_sub(static_cast<std::int64_t>(bytes));
}

void MemoryTracker::enable() noexcept { g_enabled = true; }
void MemoryTracker::disable() noexcept { g_enabled = false; }
bool MemoryTracker::enabled() noexcept { return g_enabled; }

void MemoryTracker::reset_peak() noexcept { g_peak = g_current.load(); }

std::int64_t MemoryTracker::current_bytes() noexcept { return g_current.load(); }

std::int64_t peak_memory_probe() {
  MHC_CHECK(g_enabled.load(), InternalError, "peak_memory_probe: tracking not enabled");
  return g_peak.load();
}

MemoryRegion::MemoryRegion() : was_enabled_(MemoryTracker::enabled()) {
  MemoryTracker::enable();
  MemoryTracker::reset_peak();
}

MemoryRegion::~MemoryRegion() {
  if (!was_enabled_) MemoryTracker::disable();
}

}  // namespace mhc

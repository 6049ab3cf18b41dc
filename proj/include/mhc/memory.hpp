#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <new>

namespace mhc {

/// Process-wide byte counters for tensor storage. Current and high-water
/// bytes are always maintained; `enable()` only arms the probe.
class MemoryTracker {
 public:
  static void on_allocate(std::size_t bytes) noexcept;
  static void on_release(std::size_t bytes) noexcept;

  static void enable() noexcept;
  static void disable() noexcept;
  static bool enabled() noexcept;

  /// Starts a new region: the high-water mark drops to the bytes live now.
  static void reset_peak() noexcept;
  static std::int64_t current_bytes() noexcept;
};

/// High-water mark of tensor bytes since the last `reset_peak()`.
/// Throws `mhc::Error` (internal) when tracking is not enabled.
std::int64_t peak_memory_probe();

/// Enables tracking for the lifetime of the guard and starts a fresh region.
class MemoryRegion {
 public:
  MemoryRegion();
  ~MemoryRegion();
  MemoryRegion(const MemoryRegion&) = delete;
  MemoryRegion& operator=(const MemoryRegion&) = delete;

  std::int64_t peak() const { return peak_memory_probe(); }

 private:
  bool was_enabled_;
};

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = static_cast<T*>(::operator new(n * sizeof(T)));
    MemoryTracker::on_allocate(n * sizeof(T));
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    MemoryTracker::on_release(n * sizeof(T));
    ::operator delete(p);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

}  // namespace mhc

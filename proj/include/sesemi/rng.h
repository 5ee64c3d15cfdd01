#pragma once

#include <cstdint>
#include <mutex>

#include "sesemi/bytes.h"

namespace sesemi {

/// SHA-256 counter-mode generator. Seeded explicitly it is fully
/// deterministic; the process-global instance is seeded from the OS unless a
/// test seed is installed.
class DeterministicRng {
  public:
    explicit DeterministicRng(uint64_t seed);
    DeterministicRng();  // OS-seeded

    void fill(uint8_t* out, size_t n);
    Bytes bytes(size_t n);
    uint64_t next_u64();
    void reseed(uint64_t seed);

  private:
    void refill();

    std::array<uint8_t, 32> seed_{};
    std::array<uint8_t, 32> block_{};
    size_t avail_ = 0;
    uint64_t counter_ = 0;
    std::mutex mtx_;
};

DeterministicRng& global_rng();

/// Replaces the global generator state with a deterministic stream.
void seed_global_rng(uint64_t seed);

}  // namespace sesemi

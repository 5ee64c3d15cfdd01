#pragma once

#include <cstddef>
#include <cstdint>

namespace sesemi::runtime {

/// Peak enclave bytes for k concurrent same-model requests sharing one
/// enclave: one model copy plus a runtime buffer per context.
inline uint64_t shared_enclave_bytes(uint64_t model_bytes, uint64_t buffer_bytes,
                                     uint64_t fixed_overhead, unsigned k) {
    return model_bytes + static_cast<uint64_t>(k) * buffer_bytes + fixed_overhead;
}

/// The same k requests served by k independent enclaves.
inline uint64_t separate_enclave_bytes(uint64_t model_bytes, uint64_t buffer_bytes,
                                       uint64_t fixed_overhead, unsigned k) {
    return static_cast<uint64_t>(k) * (model_bytes + buffer_bytes + fixed_overhead);
}

/// Fraction of memory saved by sharing; monotone in k for any positive model
/// size.
inline double memory_saving_ratio(uint64_t model_bytes, uint64_t buffer_bytes,
                                  uint64_t fixed_overhead, unsigned k) {
    double shared =
        static_cast<double>(shared_enclave_bytes(model_bytes, buffer_bytes, fixed_overhead, k));
    double separate =
        static_cast<double>(separate_enclave_bytes(model_bytes, buffer_bytes, fixed_overhead, k));
    return 1.0 - shared / separate;
}

}  // namespace sesemi::runtime

#include "sesemi/rng.h"

#include <openssl/rand.h>

#include "sesemi/crypto.h"

namespace sesemi {

DeterministicRng::DeterministicRng(uint64_t seed) {
    reseed(seed);
}

void DeterministicRng::reseed(uint64_t seed) {
    std::lock_guard lk(mtx_);
    Bytes s;
    append(s, std::string("sesemi-drbg|"));
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<uint8_t>(seed >> (8 * i)));
    seed_ = crypto::sha256(s).bytes;
    avail_ = 0;
    counter_ = 0;
}

DeterministicRng::DeterministicRng() {
    if (RAND_bytes(seed_.data(), static_cast<int>(seed_.size())) != 1)
        throw std::runtime_error("OS entropy unavailable");
}

void DeterministicRng::refill() {
    Bytes block;
    append(block, seed_);
    for (int i = 0; i < 8; ++i) block.push_back(static_cast<uint8_t>(counter_ >> (8 * i)));
    ++counter_;
    block_ = crypto::sha256(block).bytes;
    avail_ = block_.size();
}

void DeterministicRng::fill(uint8_t* out, size_t n) {
    std::lock_guard lk(mtx_);
    while (n > 0) {
        if (avail_ == 0) refill();
        size_t take = std::min(n, avail_);
        std::memcpy(out, block_.data() + (block_.size() - avail_), take);
        avail_ -= take;
        out += take;
        n -= take;
    }
}

Bytes DeterministicRng::bytes(size_t n) {
    Bytes out(n);
    fill(out.data(), n);
    return out;
}

uint64_t DeterministicRng::next_u64() {
    uint8_t buf[8];
    fill(buf, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = v << 8 | buf[i];
    return v;
}

DeterministicRng& global_rng() {
    static DeterministicRng rng;
    return rng;
}

void seed_global_rng(uint64_t seed) {
    global_rng().reseed(seed);
}

}  // namespace sesemi

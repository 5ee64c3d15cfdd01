#pragma once

#include <array>
#include <atomic>
#include <compare>
#include <optional>
#include <stdexcept>
#include <utility>

#include "sesemi/bytes.h"
#include "sesemi/rng.h"

namespace sesemi::crypto {

struct IntegrityError : std::runtime_error {
    IntegrityError() : std::runtime_error("authentication failure") {}
    explicit IntegrityError(const std::string& what) : std::runtime_error(what) {}
};

struct MalformedError : std::runtime_error {
    explicit MalformedError(const std::string& what) : std::runtime_error(what) {}
};

struct NonceExhaustedError : std::runtime_error {
    NonceExhaustedError() : std::runtime_error("nonce counter overflow") {}
};

struct SymKey {
    std::array<uint8_t, 32> bytes{};

    static SymKey random(DeterministicRng& rng);
    static SymKey random() { return random(global_rng()); }
    static SymKey from_bytes(ByteView b);

    auto operator<=>(const SymKey&) const = default;
};

struct Digest {
    std::array<uint8_t, 32> bytes{};

    static Digest from_bytes(ByteView b);
    std::string hex() const { return to_hex(bytes); }

    auto operator<=>(const Digest&) const = default;
};

Digest sha256(ByteView data);

/// id = SHA-256 of the key bytes; used for owner/user identities.
Digest hash_identity(const SymKey& key);

struct AeadEnvelope {
    std::array<uint8_t, 12> nonce{};
    Bytes ciphertext;
    std::array<uint8_t, 16> tag{};

    /// nonce || u32-BE ciphertext length || ciphertext || tag
    Bytes serialize() const;
    static AeadEnvelope deserialize(ByteView wire);

    bool operator==(const AeadEnvelope&) const = default;
};

/// Per-key nonce source: 4-byte random prefix plus a 64-bit counter. A key
/// must not be used with two different sequences in one process run.
class NonceSequence {
  public:
    NonceSequence();
    explicit NonceSequence(uint64_t start_counter);
    NonceSequence(NonceSequence&& o) noexcept
        : prefix_(o.prefix_), counter_(o.counter_.load()) {}

    std::array<uint8_t, 12> next();

  private:
    std::array<uint8_t, 4> prefix_{};
    std::atomic<uint64_t> counter_;
};

AeadEnvelope aead_encrypt(const SymKey& key, ByteView plaintext, ByteView aad,
                          NonceSequence& nonces);

/// Throws IntegrityError if key, nonce, tag, or aad do not match.
Bytes aead_decrypt(const SymKey& key, const AeadEnvelope& env, ByteView aad);

/// HKDF-SHA256 over the handshake secret and transcript. Returns the
/// (initiator-to-responder, responder-to-initiator) key pair.
std::pair<SymKey, SymKey> derive_session_keys(ByteView shared_secret, ByteView transcript);

/// Test-mode audit of (key, nonce) pairs seen by aead_encrypt.
class NonceAudit {
  public:
    static void enable();
    static void disable();
    static size_t duplicates();

  private:
    friend AeadEnvelope aead_encrypt(const SymKey&, ByteView, ByteView, NonceSequence&);
    static void record(const SymKey& key, const std::array<uint8_t, 12>& nonce);
};

}  // namespace sesemi::crypto

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sesemi/crypto.h"

namespace sesemi::attest {

using crypto::Digest;
using crypto::SymKey;

struct HandshakeError : std::runtime_error {
    explicit HandshakeError(const std::string& what) : std::runtime_error(what) {}
};

/// Descriptor of the code running inside an enclave. Configuration flags are
/// part of the identity, so e.g. disabling the key cache yields a different
/// measurement.
struct CodeIdentity {
    std::string runtime_name;
    std::string runtime_version;
    std::string backend_name;
    std::vector<std::pair<std::string, std::string>> config_flags;

    Bytes canonical() const;

    bool operator==(const CodeIdentity&) const = default;
};

struct Measurement {
    Digest digest;

    std::string hex() const { return digest.hex(); }
    static Measurement from_hex(const std::string& h) {
        return Measurement{Digest::from_bytes(sesemi::from_hex(h))};
    }

    auto operator<=>(const Measurement&) const = default;
};

Measurement measure_code(const CodeIdentity& identity);

struct AttestationReport {
    Measurement measurement;
    Bytes channel_pubkey;
    std::array<uint8_t, 16> nonce{};
    Bytes platform_sig;

    std::string to_json() const;
    static AttestationReport from_json(const std::string& s);
};

class PlatformAuthority;

/// Holds the platform verification key, distributed out-of-band.
class PlatformVerifier {
  public:
    PlatformVerifier() = default;
    explicit PlatformVerifier(Bytes ed25519_pub) : pub_(std::move(ed25519_pub)) {}

    bool verify_report(const AttestationReport& report) const;
    bool verify_report(const AttestationReport& report, const Measurement& expected) const;

    const Bytes& public_key() const { return pub_; }

  private:
    Bytes pub_;
};

/// Simulated platform root signing key (one per deployment).
class PlatformAuthority {
  public:
    PlatformAuthority();
    ~PlatformAuthority();
    PlatformAuthority(const PlatformAuthority&) = delete;
    PlatformAuthority& operator=(const PlatformAuthority&) = delete;

    AttestationReport generate_report(const Measurement& enclave_measurement,
                                      ByteView channel_pubkey,
                                      const std::array<uint8_t, 16>& nonce) const;

    PlatformVerifier verifier() const;

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Directional keys plus the verified peer identity. Only handshakes mint
/// these.
class SecureChannel {
  public:
    Bytes seal(ByteView plaintext, const std::string& purpose);
    Bytes open(ByteView wire, const std::string& purpose);

    const std::optional<Measurement>& peer_measurement() const { return peer_; }
    const Digest& session_id() const { return session_id_; }

  private:
    friend class HandshakeInitiator;
    friend class HandshakeResponder;
    friend struct HandshakeState;
    SecureChannel(SymKey send, SymKey recv, std::optional<Measurement> peer, Digest session_id);

    SymKey send_key_;
    SymKey recv_key_;
    std::optional<Measurement> peer_;
    Digest session_id_;
    crypto::NonceSequence send_nonces_;
};

/// Observed wire bytes, recorded so tests can scan for leaked secrets.
struct Transcript {
    std::vector<Bytes> messages;

    void record(const std::string& msg) { messages.push_back(to_bytes(msg)); }
    void record(ByteView msg) { messages.emplace_back(msg.begin(), msg.end()); }
    Bytes concat() const;
};

struct HandshakeConfig {
    /// Present on sides that attest; the platform authority signs their report.
    std::optional<CodeIdentity> attest_identity;
    const PlatformAuthority* authority = nullptr;
    /// Present on sides that verify the peer; nullopt measurement = wildcard.
    bool require_peer_report = false;
    std::optional<Measurement> expected_peer;
    PlatformVerifier verifier;
};

/// Three-message handshake: msg1 carries the initiator's ephemeral share and
/// challenge nonce, msg2 the responder's share, nonce, and report (bound to
/// the initiator's nonce), msg3 the initiator's report when attestation is
/// mutual. Messages are JSON with base64 fields.
class HandshakeInitiator {
  public:
    explicit HandshakeInitiator(HandshakeConfig cfg);
    ~HandshakeInitiator();
    HandshakeInitiator(HandshakeInitiator&&) noexcept;

    std::string msg1();
    /// Consumes msg2; returns msg3 (empty string when not attesting).
    std::string finish(const std::string& msg2);
    SecureChannel take_channel();

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

class HandshakeResponder {
  public:
    explicit HandshakeResponder(HandshakeConfig cfg);
    ~HandshakeResponder();
    HandshakeResponder(HandshakeResponder&&) noexcept;

    std::string respond(const std::string& msg1);
    /// msg3 may be empty when the initiator does not attest.
    void finish(const std::string& msg3);
    SecureChannel take_channel();

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Runs both ends in-process; wire messages are appended to `transcript` when
/// provided. Throws HandshakeError (and releases no keys) on any verification
/// failure.
std::pair<SecureChannel, SecureChannel> establish_channel(const HandshakeConfig& initiator,
                                                          const HandshakeConfig& responder,
                                                          Transcript* transcript = nullptr);

}  // namespace sesemi::attest

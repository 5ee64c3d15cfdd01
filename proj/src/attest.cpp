#include "sesemi/attest.h"

#include <openssl/evp.h>

#include <algorithm>

#include "json.hpp"

namespace sesemi::attest {

using nlohmann::json;

namespace {

struct PkeyFree {
    void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }
};
using Pkey = std::unique_ptr<EVP_PKEY, PkeyFree>;

struct MdCtxFree {
    void operator()(EVP_MD_CTX* p) const { EVP_MD_CTX_free(p); }
};
using MdCtx = std::unique_ptr<EVP_MD_CTX, MdCtxFree>;

[[noreturn]] void ossl_fail(const char* where) {
    throw std::runtime_error(std::string("openssl failure in ") + where);
}

Pkey gen_key(int type) {
    std::unique_ptr<EVP_PKEY_CTX, decltype(&EVP_PKEY_CTX_free)> ctx(
        EVP_PKEY_CTX_new_id(type, nullptr), EVP_PKEY_CTX_free);
    if (!ctx || EVP_PKEY_keygen_init(ctx.get()) != 1) ossl_fail("keygen init");
    EVP_PKEY* raw = nullptr;
    if (EVP_PKEY_keygen(ctx.get(), &raw) != 1) ossl_fail("keygen");
    return Pkey(raw);
}

Bytes raw_public(EVP_PKEY* key) {
    size_t len = 0;
    if (EVP_PKEY_get_raw_public_key(key, nullptr, &len) != 1) ossl_fail("raw pub len");
    Bytes out(len);
    if (EVP_PKEY_get_raw_public_key(key, out.data(), &len) != 1) ossl_fail("raw pub");
    return out;
}

Bytes x25519_shared(EVP_PKEY* own, ByteView peer_pub) {
    Pkey peer(EVP_PKEY_new_raw_public_key(EVP_PKEY_X25519, nullptr, peer_pub.data(),
                                          peer_pub.size()));
    if (!peer) throw HandshakeError("bad peer public key");
    std::unique_ptr<EVP_PKEY_CTX, decltype(&EVP_PKEY_CTX_free)> ctx(
        EVP_PKEY_CTX_new(own, nullptr), EVP_PKEY_CTX_free);
    if (!ctx || EVP_PKEY_derive_init(ctx.get()) != 1 ||
        EVP_PKEY_derive_set_peer(ctx.get(), peer.get()) != 1)
        ossl_fail("x25519 derive init");
    size_t len = 0;
    if (EVP_PKEY_derive(ctx.get(), nullptr, &len) != 1) ossl_fail("x25519 derive len");
    Bytes secret(len);
    if (EVP_PKEY_derive(ctx.get(), secret.data(), &len) != 1) ossl_fail("x25519 derive");
    return secret;
}

Bytes report_signing_input(const Measurement& m, ByteView pubkey,
                           const std::array<uint8_t, 16>& nonce) {
    Bytes msg;
    append(msg, std::string("report|"));
    append(msg, m.digest.bytes);
    append(msg, pubkey);
    append(msg, nonce);
    return msg;
}

}  // namespace

Bytes CodeIdentity::canonical() const {
    auto flags = config_flags;
    std::sort(flags.begin(), flags.end());
    Bytes out;
    append(out, "ci|" + runtime_name + "|" + runtime_version + "|" + backend_name);
    for (const auto& [k, v] : flags) append(out, "|" + k + "=" + v);
    return out;
}

Measurement measure_code(const CodeIdentity& identity) {
    return Measurement{crypto::sha256(identity.canonical())};
}

std::string AttestationReport::to_json() const {
    json j{{"measurement", b64_encode(measurement.digest.bytes)},
           {"pubkey", b64_encode(channel_pubkey)},
           {"nonce", b64_encode(nonce)},
           {"sig", b64_encode(platform_sig)}};
    return j.dump();
}

AttestationReport AttestationReport::from_json(const std::string& s) {
    try {
        json j = json::parse(s);
        AttestationReport r;
        r.measurement = Measurement{Digest::from_bytes(b64_decode(j.at("measurement")))};
        r.channel_pubkey = b64_decode(j.at("pubkey"));
        Bytes n = b64_decode(j.at("nonce"));
        if (n.size() != 16) throw HandshakeError("bad report nonce size");
        std::memcpy(r.nonce.data(), n.data(), 16);
        r.platform_sig = b64_decode(j.at("sig"));
        return r;
    } catch (const json::exception& e) {
        throw HandshakeError(std::string("malformed report: ") + e.what());
    }
}

struct PlatformAuthority::Impl {
    Pkey key;
    Bytes pub;
};

PlatformAuthority::PlatformAuthority() : impl_(std::make_unique<Impl>()) {
    impl_->key = gen_key(EVP_PKEY_ED25519);
    impl_->pub = raw_public(impl_->key.get());
}

PlatformAuthority::~PlatformAuthority() = default;

AttestationReport PlatformAuthority::generate_report(const Measurement& enclave_measurement,
                                                     ByteView channel_pubkey,
                                                     const std::array<uint8_t, 16>& nonce) const {
    AttestationReport r;
    r.measurement = enclave_measurement;
    r.channel_pubkey.assign(channel_pubkey.begin(), channel_pubkey.end());
    r.nonce = nonce;
    Bytes msg = report_signing_input(r.measurement, r.channel_pubkey, r.nonce);
    MdCtx ctx(EVP_MD_CTX_new());
    if (!ctx ||
        EVP_DigestSignInit(ctx.get(), nullptr, nullptr, nullptr, impl_->key.get()) != 1)
        ossl_fail("sign init");
    size_t siglen = 0;
    if (EVP_DigestSign(ctx.get(), nullptr, &siglen, msg.data(), msg.size()) != 1)
        ossl_fail("sign len");
    r.platform_sig.resize(siglen);
    if (EVP_DigestSign(ctx.get(), r.platform_sig.data(), &siglen, msg.data(), msg.size()) != 1)
        ossl_fail("sign");
    r.platform_sig.resize(siglen);
    return r;
}

PlatformVerifier PlatformAuthority::verifier() const {
    return PlatformVerifier(impl_->pub);
}

bool PlatformVerifier::verify_report(const AttestationReport& report) const {
    if (pub_.empty()) return false;
    Pkey key(EVP_PKEY_new_raw_public_key(EVP_PKEY_ED25519, nullptr, pub_.data(), pub_.size()));
    if (!key) return false;
    Bytes msg = report_signing_input(report.measurement, report.channel_pubkey, report.nonce);
    MdCtx ctx(EVP_MD_CTX_new());
    if (!ctx || EVP_DigestVerifyInit(ctx.get(), nullptr, nullptr, nullptr, key.get()) != 1)
        return false;
    return EVP_DigestVerify(ctx.get(), report.platform_sig.data(), report.platform_sig.size(),
                            msg.data(), msg.size()) == 1;
}

bool PlatformVerifier::verify_report(const AttestationReport& report,
                                     const Measurement& expected) const {
    return verify_report(report) && report.measurement == expected;
}

SecureChannel::SecureChannel(SymKey send, SymKey recv, std::optional<Measurement> peer,
                             Digest session_id)
    : send_key_(send), recv_key_(recv), peer_(std::move(peer)), session_id_(session_id) {}

Bytes SecureChannel::seal(ByteView plaintext, const std::string& purpose) {
    std::string aad = "chan|" + session_id_.hex() + "|" + purpose;
    return crypto::aead_encrypt(send_key_, plaintext, to_bytes(aad), send_nonces_).serialize();
}

Bytes SecureChannel::open(ByteView wire, const std::string& purpose) {
    std::string aad = "chan|" + session_id_.hex() + "|" + purpose;
    return crypto::aead_decrypt(recv_key_, crypto::AeadEnvelope::deserialize(wire),
                                to_bytes(aad));
}

Bytes Transcript::concat() const {
    Bytes out;
    for (const auto& m : messages) append(out, m);
    return out;
}

struct HandshakeState {
    HandshakeConfig cfg;
    Pkey eph;
    Bytes own_pub;
    std::array<uint8_t, 16> own_nonce{};
    Bytes peer_pub;
    std::array<uint8_t, 16> peer_nonce{};
    Bytes transcript;
    std::optional<Measurement> peer_measurement;
    std::optional<SecureChannel> channel;

    HandshakeState(HandshakeConfig c) : cfg(std::move(c)) {
        if (cfg.attest_identity && !cfg.authority)
            throw HandshakeError("attesting side needs a platform authority");
        eph = gen_key(EVP_PKEY_X25519);
        own_pub = raw_public(eph.get());
        global_rng().fill(own_nonce.data(), own_nonce.size());
    }

    /// Verifies a peer report against our challenge and the pinned pubkey.
    void check_peer_report(const AttestationReport& report, ByteView expected_pubkey) {
        if (!cfg.verifier.verify_report(report))
            throw HandshakeError("report signature verification failed");
        if (report.channel_pubkey.size() != expected_pubkey.size() ||
            !std::equal(expected_pubkey.begin(), expected_pubkey.end(),
                        report.channel_pubkey.begin()))
            throw HandshakeError("report bound to a different channel key");
        if (report.nonce != own_nonce) throw HandshakeError("report nonce mismatch");
        if (cfg.expected_peer && report.measurement != *cfg.expected_peer)
            throw HandshakeError("unexpected enclave measurement");
        peer_measurement = report.measurement;
    }

    void derive(bool initiator) {
        Bytes secret = x25519_shared(eph.get(), peer_pub);
        auto [i2r, r2i] = crypto::derive_session_keys(secret, transcript);
        Digest sid = crypto::sha256(transcript);
        if (initiator)
            channel.emplace(SecureChannel(i2r, r2i, peer_measurement, sid));
        else
            channel.emplace(SecureChannel(r2i, i2r, peer_measurement, sid));
    }

    std::string own_report_json(const std::array<uint8_t, 16>& challenge) const {
        Measurement m = measure_code(*cfg.attest_identity);
        return cfg.authority->generate_report(m, own_pub, challenge).to_json();
    }
};

namespace {

json parse_msg(const std::string& s) {
    try {
        return json::parse(s);
    } catch (const json::exception& e) {
        throw HandshakeError(std::string("malformed handshake message: ") + e.what());
    }
}

std::array<uint8_t, 16> nonce_field(const json& j) {
    Bytes n = b64_decode(j.at("nonce").get<std::string>());
    if (n.size() != 16) throw HandshakeError("bad nonce size");
    std::array<uint8_t, 16> out;
    std::memcpy(out.data(), n.data(), 16);
    return out;
}

}  // namespace

struct HandshakeInitiator::Impl : HandshakeState {
    using HandshakeState::HandshakeState;
};

HandshakeInitiator::HandshakeInitiator(HandshakeConfig cfg)
    : impl_(std::make_unique<Impl>(std::move(cfg))) {}
HandshakeInitiator::~HandshakeInitiator() = default;
HandshakeInitiator::HandshakeInitiator(HandshakeInitiator&&) noexcept = default;

std::string HandshakeInitiator::msg1() {
    json j{{"pubkey", b64_encode(impl_->own_pub)}, {"nonce", b64_encode(impl_->own_nonce)}};
    std::string s = j.dump();
    append(impl_->transcript, s);
    return s;
}

std::string HandshakeInitiator::finish(const std::string& msg2) {
    json j = parse_msg(msg2);
    append(impl_->transcript, msg2);
    try {
        impl_->peer_pub = b64_decode(j.at("pubkey").get<std::string>());
        impl_->peer_nonce = nonce_field(j);
        if (impl_->cfg.require_peer_report) {
            if (!j.contains("report")) throw HandshakeError("peer did not attest");
            impl_->check_peer_report(
                AttestationReport::from_json(j.at("report").get<std::string>()),
                impl_->peer_pub);
        }
    } catch (const json::exception& e) {
        throw HandshakeError(std::string("malformed msg2: ") + e.what());
    }
    std::string msg3;
    if (impl_->cfg.attest_identity) {
        json j3{{"report", impl_->own_report_json(impl_->peer_nonce)}};
        msg3 = j3.dump();
        append(impl_->transcript, msg3);
    }
    impl_->derive(/*initiator=*/true);
    return msg3;
}

SecureChannel HandshakeInitiator::take_channel() {
    if (!impl_->channel) throw HandshakeError("handshake incomplete");
    SecureChannel out = std::move(*impl_->channel);
    impl_->channel.reset();
    return out;
}

struct HandshakeResponder::Impl : HandshakeState {
    using HandshakeState::HandshakeState;
    bool responded = false;
};

HandshakeResponder::HandshakeResponder(HandshakeConfig cfg)
    : impl_(std::make_unique<Impl>(std::move(cfg))) {}
HandshakeResponder::~HandshakeResponder() = default;
HandshakeResponder::HandshakeResponder(HandshakeResponder&&) noexcept = default;

std::string HandshakeResponder::respond(const std::string& msg1) {
    json j = parse_msg(msg1);
    append(impl_->transcript, msg1);
    try {
        impl_->peer_pub = b64_decode(j.at("pubkey").get<std::string>());
        impl_->peer_nonce = nonce_field(j);
    } catch (const json::exception& e) {
        throw HandshakeError(std::string("malformed msg1: ") + e.what());
    }
    json j2{{"pubkey", b64_encode(impl_->own_pub)}, {"nonce", b64_encode(impl_->own_nonce)}};
    if (impl_->cfg.attest_identity)
        j2["report"] = impl_->own_report_json(impl_->peer_nonce);
    std::string s = j2.dump();
    append(impl_->transcript, s);
    impl_->responded = true;
    return s;
}

void HandshakeResponder::finish(const std::string& msg3) {
    if (!impl_->responded) throw HandshakeError("finish before respond");
    if (impl_->cfg.require_peer_report) {
        if (msg3.empty()) throw HandshakeError("peer did not attest");
        json j = parse_msg(msg3);
        append(impl_->transcript, msg3);
        try {
            impl_->check_peer_report(
                AttestationReport::from_json(j.at("report").get<std::string>()),
                impl_->peer_pub);
        } catch (const json::exception& e) {
            throw HandshakeError(std::string("malformed msg3: ") + e.what());
        }
    } else if (!msg3.empty()) {
        append(impl_->transcript, msg3);
    }
    impl_->derive(/*initiator=*/false);
}

SecureChannel HandshakeResponder::take_channel() {
    if (!impl_->channel) throw HandshakeError("handshake incomplete");
    SecureChannel out = std::move(*impl_->channel);
    impl_->channel.reset();
    return out;
}

std::pair<SecureChannel, SecureChannel> establish_channel(const HandshakeConfig& initiator,
                                                          const HandshakeConfig& responder,
                                                          Transcript* transcript) {
    HandshakeInitiator init(initiator);
    HandshakeResponder resp(responder);
    std::string m1 = init.msg1();
    if (transcript) transcript->record(m1);
    std::string m2 = resp.respond(m1);
    if (transcript) transcript->record(m2);
    std::string m3 = init.finish(m2);
    if (transcript && !m3.empty()) transcript->record(m3);
    resp.finish(m3);
    return {init.take_channel(), resp.take_channel()};
}

}  // namespace sesemi::attest

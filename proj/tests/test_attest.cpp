#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "sesemi/attest.h"

using namespace sesemi;
using namespace sesemi::attest;

namespace {

CodeIdentity demo_identity() {
    CodeIdentity ci;
    ci.runtime_name = "semirt";
    ci.runtime_version = "0.1";
    ci.backend_name = "linear";
    ci.config_flags = {{"tcs_count", "1"}, {"key_cache_enabled", "1"}};
    return ci;
}

HandshakeConfig attesting_side(const PlatformAuthority& auth, CodeIdentity id,
                               std::optional<Measurement> expect) {
    HandshakeConfig cfg;
    cfg.attest_identity = std::move(id);
    cfg.authority = &auth;
    cfg.require_peer_report = true;
    cfg.expected_peer = std::move(expect);
    cfg.verifier = auth.verifier();
    return cfg;
}

}  // namespace

TEST_CASE("measurements depend on every identity component") {
    CodeIdentity base = demo_identity();
    Measurement m0 = measure_code(base);
    CHECK(m0 == measure_code(base));  // stable

    CodeIdentity v = base;
    v.runtime_version = "0.2";
    CHECK(measure_code(v) != m0);

    CodeIdentity b = base;
    b.backend_name = "other";
    CHECK(measure_code(b) != m0);

    // configuration settings are part of the enclave code identity
    CodeIdentity tcs = base;
    tcs.config_flags[0].second = "8";
    CHECK(measure_code(tcs) != m0);

    CodeIdentity extra = base;
    extra.config_flags.push_back({"zz", "1"});
    CHECK(measure_code(extra) != m0);

    // flag order does not matter; canonical form sorts them
    CodeIdentity swapped = base;
    std::swap(swapped.config_flags[0], swapped.config_flags[1]);
    CHECK(measure_code(swapped) == m0);
}

TEST_CASE("reports verify and survive json roundtrip") {
    PlatformAuthority auth;
    Measurement m = measure_code(demo_identity());
    Bytes pub = to_bytes("0123456789abcdef0123456789abcdef");
    std::array<uint8_t, 16> nonce{};
    nonce[3] = 7;
    AttestationReport rep = auth.generate_report(m, pub, nonce);

    PlatformVerifier ver = auth.verifier();
    CHECK(ver.verify_report(rep));
    CHECK(ver.verify_report(rep, m));

    AttestationReport back = AttestationReport::from_json(rep.to_json());
    CHECK(back.measurement == rep.measurement);
    CHECK(back.channel_pubkey == rep.channel_pubkey);
    CHECK(back.nonce == rep.nonce);
    CHECK(ver.verify_report(back));
}

TEST_CASE("tampered reports are rejected") {
    PlatformAuthority auth;
    Measurement m = measure_code(demo_identity());
    Bytes pub = to_bytes("0123456789abcdef0123456789abcdef");
    std::array<uint8_t, 16> nonce{};
    AttestationReport rep = auth.generate_report(m, pub, nonce);
    PlatformVerifier ver = auth.verifier();

    AttestationReport t = rep;
    t.measurement.digest.bytes[0] ^= 1;
    CHECK(!ver.verify_report(t));

    t = rep;
    t.channel_pubkey[0] ^= 1;
    CHECK(!ver.verify_report(t));

    t = rep;
    t.nonce[0] ^= 1;  // nonce is bound into the signature: replay fails
    CHECK(!ver.verify_report(t));

    t = rep;
    t.platform_sig[0] ^= 1;
    CHECK(!ver.verify_report(t));

    // a different platform root does not verify this report
    PlatformAuthority other;
    CHECK(!other.verifier().verify_report(rep));
    // expected-measurement pinning
    Measurement wrong = m;
    wrong.digest.bytes[5] ^= 0xff;
    CHECK(!ver.verify_report(rep, wrong));
}

TEST_CASE("nonce replay property over many reports") {
    PlatformAuthority auth;
    Measurement m = measure_code(demo_identity());
    Bytes pub = to_bytes("0123456789abcdef0123456789abcdef");
    DeterministicRng rng(11);
    for (int i = 0; i < 200; ++i) {
        std::array<uint8_t, 16> nonce;
        rng.fill(nonce.data(), nonce.size());
        AttestationReport rep = auth.generate_report(m, pub, nonce);
        REQUIRE(auth.verifier().verify_report(rep));
        size_t bit = rng.next_u64() % 128;
        rep.nonce[bit / 8] ^= static_cast<uint8_t>(1u << (bit % 8));
        REQUIRE(!auth.verifier().verify_report(rep));
    }
}

TEST_CASE("mutual handshake yields working channel with peer identities") {
    PlatformAuthority auth;
    CodeIdentity enclave_id = demo_identity();
    CodeIdentity service_id = demo_identity();
    service_id.runtime_name = "ksvc";

    Transcript tr;
    auto [a, b] = establish_channel(
        attesting_side(auth, enclave_id, measure_code(service_id)),
        attesting_side(auth, service_id, measure_code(enclave_id)), &tr);

    CHECK(a.peer_measurement() == measure_code(service_id));
    CHECK(b.peer_measurement() == measure_code(enclave_id));
    CHECK(a.session_id() == b.session_id());
    CHECK(tr.messages.size() == 3);

    Bytes wire = a.seal(to_bytes("hello"), "purpose");
    CHECK(sesemi::to_string(b.open(wire, "purpose")) == "hello");
    Bytes wire2 = b.seal(to_bytes("reply"), "purpose");
    CHECK(sesemi::to_string(a.open(wire2, "purpose")) == "reply");
}

TEST_CASE("channel enforces purpose binding and integrity") {
    PlatformAuthority auth;
    auto [a, b] = establish_channel(attesting_side(auth, demo_identity(), std::nullopt),
                                    attesting_side(auth, demo_identity(), std::nullopt));
    Bytes wire = a.seal(to_bytes("x"), "deposit");
    CHECK_THROWS_AS(b.open(wire, "other"), crypto::IntegrityError);
    wire[wire.size() - 1] ^= 1;
    CHECK_THROWS_AS(b.open(wire, "deposit"), crypto::IntegrityError);
}

TEST_CASE("handshake fails closed on identity mismatch") {
    PlatformAuthority auth;
    CodeIdentity good = demo_identity();
    CodeIdentity rogue = demo_identity();
    rogue.runtime_version = "0.1-evil";

    // initiator expects `good` but the responder runs `rogue`
    CHECK_THROWS_AS(establish_channel(attesting_side(auth, good, measure_code(good)),
                                      attesting_side(auth, rogue, measure_code(good))),
                    HandshakeError);
    // responder expects `good` but the initiator runs `rogue`
    CHECK_THROWS_AS(establish_channel(attesting_side(auth, rogue, std::nullopt),
                                      attesting_side(auth, good, measure_code(good))),
                    HandshakeError);
    // reports signed by a different platform root are rejected
    PlatformAuthority other;
    HandshakeConfig bad = attesting_side(auth, good, std::nullopt);
    bad.authority = &other;
    CHECK_THROWS_AS(establish_channel(bad, attesting_side(auth, good, std::nullopt)),
                    HandshakeError);
    // responder that refuses to attest is rejected by a verifying initiator
    HandshakeConfig silent;
    silent.verifier = auth.verifier();
    CHECK_THROWS_AS(
        establish_channel(attesting_side(auth, good, std::nullopt), silent),
        HandshakeError);
}

TEST_CASE("mismatched handshakes release no keys") {
    PlatformAuthority auth;
    CodeIdentity good = demo_identity();
    CodeIdentity rogue = demo_identity();
    rogue.backend_name = "evil";
    DeterministicRng rng(12);
    int keys_released = 0;
    for (int i = 0; i < 50; ++i) {
        HandshakeInitiator init(attesting_side(auth, good, measure_code(good)));
        HandshakeResponder resp(attesting_side(auth, rogue, std::nullopt));
        try {
            std::string m2 = resp.respond(init.msg1());
            std::string m3 = init.finish(m2);
            resp.finish(m3);
            ++keys_released;
        } catch (const HandshakeError&) {
            // the aborting side must not hand out a channel either
            CHECK_THROWS_AS(init.take_channel(), HandshakeError);
        }
    }
    CHECK(keys_released == 0);
}

TEST_CASE("handshake transcript carries no session key material") {
    PlatformAuthority auth;
    Transcript tr;
    auto [a, b] = establish_channel(attesting_side(auth, demo_identity(), std::nullopt),
                                    attesting_side(auth, demo_identity(), std::nullopt), &tr);
    Bytes all = tr.concat();
    Bytes probe = a.seal(to_bytes("canary-plaintext-e1b7"), "p");
    CHECK(!contains_bytes(all, to_bytes("canary-plaintext-e1b7")));
    // sealing later traffic never leaks the plaintext either
    CHECK(!contains_bytes(probe, to_bytes("canary-plaintext-e1b7")));
}

TEST_CASE("tampered handshake messages abort") {
    PlatformAuthority auth;
    HandshakeInitiator init(attesting_side(auth, demo_identity(), std::nullopt));
    HandshakeResponder resp(attesting_side(auth, demo_identity(), std::nullopt));
    std::string msg1 = init.msg1();
    std::string msg2 = resp.respond(msg1);
    // flip a character inside the base64 payload region
    std::string bad = msg2;
    size_t pos = bad.find("\"report\"");
    REQUIRE(pos != std::string::npos);
    bad[pos + 12] = bad[pos + 12] == 'A' ? 'B' : 'A';
    CHECK_THROWS_AS(init.finish(bad), HandshakeError);
    CHECK_THROWS_AS(init.take_channel(), HandshakeError);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>
#include <set>

#include "sesemi/crypto.h"

using namespace sesemi;
using namespace sesemi::crypto;

TEST_CASE("hex and base64 roundtrip") {
    DeterministicRng rng(1);
    for (size_t n : {0u, 1u, 31u, 32u, 33u, 1000u}) {
        Bytes b = rng.bytes(n);
        CHECK(from_hex(to_hex(b)) == b);
        CHECK(b64_decode(b64_encode(b)) == b);
    }
    CHECK(to_hex(Bytes{0x00, 0xff, 0x10}) == "00ff10");
    CHECK_THROWS(from_hex("abc"));   // odd length
    CHECK_THROWS(from_hex("zz"));    // non-hex
}

TEST_CASE("sha256 matches pinned reference values") {
    // Pinned from an independent SHA-256 implementation.
    CHECK(sha256(Bytes(32, 0)).hex() ==
          "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925");
    CHECK(sha256(to_bytes("abc")).hex() ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256(Bytes{}).hex() ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("hash_identity is sha256 of the key bytes and collision-free") {
    DeterministicRng rng(2);
    SymKey k = SymKey::random(rng);
    CHECK(hash_identity(k) == sha256(k.bytes));

    std::set<Digest> ids;
    for (int i = 0; i < 10'000; ++i) ids.insert(hash_identity(SymKey::random(rng)));
    CHECK(ids.size() == 10'000);
}

TEST_CASE("deterministic rng reproduces streams") {
    DeterministicRng a(42), b(42), c(43);
    CHECK(a.bytes(64) == b.bytes(64));
    CHECK(a.next_u64() == b.next_u64());
    CHECK(a.bytes(16) != c.bytes(16));
    a.reseed(7);
    b.reseed(7);
    CHECK(a.bytes(40) == b.bytes(40));
}

TEST_CASE("aead roundtrip with and without aad") {
    DeterministicRng rng(3);
    SymKey k = SymKey::random(rng);
    NonceSequence seq;
    Bytes pt = rng.bytes(300);
    AeadEnvelope env = aead_encrypt(k, pt, to_bytes("ctx"), seq);
    CHECK(env.ciphertext.size() == pt.size());
    CHECK(aead_decrypt(k, env, to_bytes("ctx")) == pt);

    AeadEnvelope env2 = aead_encrypt(k, pt, {}, seq);
    CHECK(aead_decrypt(k, env2, {}) == pt);
    CHECK(env.ciphertext != env2.ciphertext);  // distinct nonces
}

TEST_CASE("envelope wire format adds exactly nonce+len+tag") {
    DeterministicRng rng(4);
    SymKey k = SymKey::random(rng);
    NonceSequence seq;
    // 17 MB payload, the size of the small image model blob
    Bytes pt = rng.bytes(17u * 1024 * 1024);
    AeadEnvelope env = aead_encrypt(k, pt, to_bytes("model|m"), seq);
    CHECK(env.ciphertext.size() == pt.size());
    Bytes wire = env.serialize();
    // 12-byte nonce + 16-byte tag = 28 bytes of AEAD framing, plus the u32
    // length prefix of this container format.
    CHECK(wire.size() == pt.size() + 28 + 4);
    AeadEnvelope back = AeadEnvelope::deserialize(wire);
    CHECK(back == env);
    CHECK(aead_decrypt(k, back, to_bytes("model|m")) == pt);
}

TEST_CASE("envelope deserialize rejects malformed wire") {
    CHECK_THROWS_AS(AeadEnvelope::deserialize(Bytes(10, 0)), MalformedError);
    DeterministicRng rng(5);
    SymKey k = SymKey::random(rng);
    NonceSequence seq;
    Bytes wire = aead_encrypt(k, rng.bytes(50), {}, seq).serialize();
    wire.pop_back();
    CHECK_THROWS_AS(AeadEnvelope::deserialize(wire), MalformedError);
    Bytes truncated(wire.begin(), wire.begin() + 14);
    CHECK_THROWS_AS(AeadEnvelope::deserialize(truncated), MalformedError);
}

TEST_CASE("single-bit mutations are always rejected") {
    DeterministicRng rng(6);
    std::mt19937_64 gen(99);
    SymKey k = SymKey::random(rng);
    NonceSequence seq;
    int false_accepts = 0;
    for (int i = 0; i < 10'000; ++i) {
        Bytes pt = rng.bytes(1 + gen() % 64);
        Bytes aad = rng.bytes(gen() % 16);
        AeadEnvelope env = aead_encrypt(k, pt, aad, seq);
        Bytes wire = env.serialize();
        size_t bit = gen() % (wire.size() * 8);
        wire[bit / 8] ^= static_cast<uint8_t>(1u << (bit % 8));
        try {
            AeadEnvelope tampered = AeadEnvelope::deserialize(wire);
            aead_decrypt(k, tampered, aad);
            ++false_accepts;  // any accepted mutation is a failure
        } catch (const IntegrityError&) {
        } catch (const MalformedError&) {
        }
    }
    CHECK(false_accepts == 0);
}

TEST_CASE("wrong key and wrong aad are rejected") {
    DeterministicRng rng(7);
    SymKey k1 = SymKey::random(rng), k2 = SymKey::random(rng);
    NonceSequence seq;
    AeadEnvelope env = aead_encrypt(k1, to_bytes("secret"), to_bytes("a"), seq);
    CHECK_THROWS_AS(aead_decrypt(k2, env, to_bytes("a")), IntegrityError);
    CHECK_THROWS_AS(aead_decrypt(k1, env, to_bytes("b")), IntegrityError);
    AeadEnvelope bad_nonce = env;
    bad_nonce.nonce[0] ^= 1;
    CHECK_THROWS_AS(aead_decrypt(k1, bad_nonce, to_bytes("a")), IntegrityError);
}

TEST_CASE("nonce sequences never repeat within a key") {
    NonceSequence seq;
    std::set<std::array<uint8_t, 12>> seen;
    for (int i = 0; i < 10'000; ++i) CHECK(seen.insert(seq.next()).second);

    NonceAudit::enable();
    DeterministicRng rng(8);
    SymKey k = SymKey::random(rng);
    NonceSequence s1, s2;
    for (int i = 0; i < 500; ++i) {
        aead_encrypt(k, to_bytes("x"), {}, s1);
        aead_encrypt(k, to_bytes("y"), {}, s2);
    }
    CHECK(NonceAudit::duplicates() == 0);
    NonceAudit::disable();
}

TEST_CASE("session key derivation is deterministic and direction-separated") {
    DeterministicRng rng(9);
    Bytes secret = rng.bytes(32);
    Bytes transcript = rng.bytes(200);
    auto [a1, a2] = derive_session_keys(secret, transcript);
    auto [b1, b2] = derive_session_keys(secret, transcript);
    CHECK(a1 == b1);
    CHECK(a2 == b2);
    CHECK(a1 != a2);

    // one transcript bit flips both keys
    Bytes t2 = transcript;
    t2[17] ^= 0x01;
    auto [c1, c2] = derive_session_keys(secret, t2);
    CHECK(c1 != a1);
    CHECK(c2 != a2);

    CHECK_THROWS_AS(derive_session_keys(Bytes{}, transcript), MalformedError);
}

TEST_CASE("transcript bit flips never collide over many trials") {
    DeterministicRng rng(10);
    std::set<std::array<uint8_t, 32>> keys;
    Bytes secret = rng.bytes(32);
    for (int i = 0; i < 2000; ++i) {
        Bytes tr = rng.bytes(64);
        keys.insert(derive_session_keys(secret, tr).first.bytes);
    }
    CHECK(keys.size() == 2000);
}

TEST_CASE("contains_bytes finds embedded sequences") {
    Bytes hay = to_bytes("the quick brown fox");
    CHECK(contains_bytes(hay, to_bytes("quick")));
    CHECK(contains_bytes(hay, to_bytes("fox")));
    CHECK(!contains_bytes(hay, to_bytes("wolf")));
    CHECK(contains_bytes(hay, Bytes{}));
}

#include "sesemi/crypto.h"

#include <openssl/evp.h>
#include <openssl/kdf.h>

#include <memory>
#include <mutex>
#include <set>

namespace sesemi::crypto {

namespace {

struct CipherCtxFree {
    void operator()(EVP_CIPHER_CTX* p) const { EVP_CIPHER_CTX_free(p); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CipherCtxFree>;

[[noreturn]] void ossl_fail(const char* where) {
    throw std::runtime_error(std::string("openssl failure in ") + where);
}

}  // namespace

SymKey SymKey::random(DeterministicRng& rng) {
    SymKey k;
    rng.fill(k.bytes.data(), k.bytes.size());
    return k;
}

SymKey SymKey::from_bytes(ByteView b) {
    if (b.size() != 32) throw MalformedError("symmetric key must be 32 bytes");
    SymKey k;
    std::memcpy(k.bytes.data(), b.data(), 32);
    return k;
}

Digest Digest::from_bytes(ByteView b) {
    if (b.size() != 32) throw MalformedError("digest must be 32 bytes");
    Digest d;
    std::memcpy(d.bytes.data(), b.data(), 32);
    return d;
}

Digest sha256(ByteView data) {
    Digest d;
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), d.bytes.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != 32)
        ossl_fail("sha256");
    return d;
}

Digest hash_identity(const SymKey& key) {
    return sha256(key.bytes);
}

Bytes AeadEnvelope::serialize() const {
    Bytes out;
    out.reserve(12 + 4 + ciphertext.size() + 16);
    append(out, nonce);
    put_u32_be(out, static_cast<uint32_t>(ciphertext.size()));
    append(out, ciphertext);
    append(out, tag);
    return out;
}

AeadEnvelope AeadEnvelope::deserialize(ByteView wire) {
    try {
        ByteReader r(wire);
        AeadEnvelope env;
        env.nonce = r.take_array<12>();
        uint32_t len = r.u32_be();
        if (r.remaining() != static_cast<size_t>(len) + 16)
            throw MalformedError("envelope length mismatch");
        env.ciphertext = r.take(len);
        env.tag = r.take_array<16>();
        return env;
    } catch (const std::out_of_range&) {
        throw MalformedError("truncated envelope");
    }
}

NonceSequence::NonceSequence() : counter_(0) {
    global_rng().fill(prefix_.data(), prefix_.size());
}

NonceSequence::NonceSequence(uint64_t start_counter) : counter_(start_counter) {
    global_rng().fill(prefix_.data(), prefix_.size());
}

std::array<uint8_t, 12> NonceSequence::next() {
    uint64_t c = counter_.fetch_add(1);
    if (c == UINT64_MAX) throw NonceExhaustedError();
    std::array<uint8_t, 12> n;
    std::memcpy(n.data(), prefix_.data(), 4);
    for (int i = 0; i < 8; ++i) n[4 + i] = static_cast<uint8_t>(c >> (8 * (7 - i)));
    return n;
}

namespace {

bool g_audit_enabled = false;
std::mutex g_audit_mtx;
std::set<std::string> g_audit_seen;
size_t g_audit_dups = 0;

}  // namespace

void NonceAudit::enable() {
    std::lock_guard lk(g_audit_mtx);
    g_audit_enabled = true;
    g_audit_seen.clear();
    g_audit_dups = 0;
}

void NonceAudit::disable() {
    std::lock_guard lk(g_audit_mtx);
    g_audit_enabled = false;
}

size_t NonceAudit::duplicates() {
    std::lock_guard lk(g_audit_mtx);
    return g_audit_dups;
}

void NonceAudit::record(const SymKey& key, const std::array<uint8_t, 12>& nonce) {
    std::lock_guard lk(g_audit_mtx);
    if (!g_audit_enabled) return;
    std::string entry(reinterpret_cast<const char*>(key.bytes.data()), 32);
    entry.append(reinterpret_cast<const char*>(nonce.data()), 12);
    if (!g_audit_seen.insert(entry).second) ++g_audit_dups;
}

AeadEnvelope aead_encrypt(const SymKey& key, ByteView plaintext, ByteView aad,
                          NonceSequence& nonces) {
    AeadEnvelope env;
    env.nonce = nonces.next();
    NonceAudit::record(key, env.nonce);

    CipherCtx ctx(EVP_CIPHER_CTX_new());
    if (!ctx) ossl_fail("ctx alloc");
    if (EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.bytes.data(),
                           env.nonce.data()) != 1)
        ossl_fail("encrypt init");
    int outl = 0;
    if (!aad.empty() &&
        EVP_EncryptUpdate(ctx.get(), nullptr, &outl, aad.data(), static_cast<int>(aad.size())) != 1)
        ossl_fail("aad");
    env.ciphertext.resize(plaintext.size());
    if (!plaintext.empty() &&
        EVP_EncryptUpdate(ctx.get(), env.ciphertext.data(), &outl, plaintext.data(),
                          static_cast<int>(plaintext.size())) != 1)
        ossl_fail("encrypt");
    if (EVP_EncryptFinal_ex(ctx.get(), env.ciphertext.data() + env.ciphertext.size(), &outl) != 1)
        ossl_fail("encrypt final");
    if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, 16, env.tag.data()) != 1)
        ossl_fail("get tag");
    return env;
}

Bytes aead_decrypt(const SymKey& key, const AeadEnvelope& env, ByteView aad) {
    CipherCtx ctx(EVP_CIPHER_CTX_new());
    if (!ctx) ossl_fail("ctx alloc");
    if (EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, key.bytes.data(),
                           env.nonce.data()) != 1)
        ossl_fail("decrypt init");
    int outl = 0;
    if (!aad.empty() &&
        EVP_DecryptUpdate(ctx.get(), nullptr, &outl, aad.data(), static_cast<int>(aad.size())) != 1)
        ossl_fail("aad");
    Bytes plain(env.ciphertext.size());
    if (!env.ciphertext.empty() &&
        EVP_DecryptUpdate(ctx.get(), plain.data(), &outl, env.ciphertext.data(),
                          static_cast<int>(env.ciphertext.size())) != 1)
        ossl_fail("decrypt");
    std::array<uint8_t, 16> tag = env.tag;
    if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, 16, tag.data()) != 1)
        ossl_fail("set tag");
    if (EVP_DecryptFinal_ex(ctx.get(), plain.data() + plain.size(), &outl) != 1)
        throw IntegrityError();
    return plain;
}

std::pair<SymKey, SymKey> derive_session_keys(ByteView shared_secret, ByteView transcript) {
    if (shared_secret.empty()) throw MalformedError("empty shared secret");

    auto hkdf = [&](const char* label) {
        std::unique_ptr<EVP_PKEY_CTX, decltype(&EVP_PKEY_CTX_free)> ctx(
            EVP_PKEY_CTX_new_id(EVP_PKEY_HKDF, nullptr), EVP_PKEY_CTX_free);
        if (!ctx) ossl_fail("hkdf ctx");
        Bytes info;
        append(info, std::string(label));
        append(info, transcript);
        if (EVP_PKEY_derive_init(ctx.get()) != 1 ||
            EVP_PKEY_CTX_set_hkdf_md(ctx.get(), EVP_sha256()) != 1 ||
            EVP_PKEY_CTX_set1_hkdf_key(ctx.get(), shared_secret.data(),
                                       static_cast<int>(shared_secret.size())) != 1 ||
            EVP_PKEY_CTX_add1_hkdf_info(ctx.get(), info.data(), static_cast<int>(info.size())) != 1)
            ossl_fail("hkdf setup");
        SymKey k;
        size_t len = 32;
        if (EVP_PKEY_derive(ctx.get(), k.bytes.data(), &len) != 1 || len != 32)
            ossl_fail("hkdf derive");
        return k;
    };
    return {hkdf("i2r|"), hkdf("r2i|")};
}

}  // namespace sesemi::crypto

#include "sesemi/keyservice.h"

#include "json.hpp"

namespace sesemi::keyservice {

using nlohmann::json;

std::string deposit_aad(const std::string& op, const Digest& caller) {
    return op + "|" + caller.hex();
}

std::string triple_key(const std::string& model_id, const Measurement& enclave,
                       const Digest& uid) {
    return model_id + "|" + enclave.hex() + "|" + uid.hex();
}

AeadEnvelope seal_model_key(const SymKey& caller_key, crypto::NonceSequence& nonces,
                            const Digest& caller, const std::string& model_id,
                            const SymKey& model_key) {
    json j{{"model_id", model_id}, {"key_b64", b64_encode(model_key.bytes)}};
    return crypto::aead_encrypt(caller_key, to_bytes(j.dump()),
                                to_bytes(deposit_aad("add_model_key", caller)), nonces);
}

AeadEnvelope seal_grant(const SymKey& caller_key, crypto::NonceSequence& nonces,
                        const Digest& caller, const std::string& model_id,
                        const Measurement& enclave, const Digest& uid) {
    json j{{"model_id", model_id}, {"measurement", enclave.hex()}, {"uid", uid.hex()}};
    return crypto::aead_encrypt(caller_key, to_bytes(j.dump()),
                                to_bytes(deposit_aad("grant_access", caller)), nonces);
}

AeadEnvelope seal_req_key(const SymKey& caller_key, crypto::NonceSequence& nonces,
                          const Digest& caller, const std::string& model_id,
                          const Measurement& enclave, const SymKey& req_key) {
    json j{{"model_id", model_id},
           {"measurement", enclave.hex()},
           {"key_b64", b64_encode(req_key.bytes)}};
    return crypto::aead_encrypt(caller_key, to_bytes(j.dump()),
                                to_bytes(deposit_aad("add_req_key", caller)), nonces);
}

KeyService::KeyService(const attest::PlatformAuthority& authority, attest::CodeIdentity identity)
    : authority_(authority),
      identity_(std::move(identity)),
      measurement_(attest::measure_code(identity_)) {}

Digest KeyService::user_registration(const SymKey& identity_key) {
    Digest id = crypto::hash_identity(identity_key);
    std::lock_guard lk(mtx_);
    ks_i_.insert_or_assign(id, identity_key);
    return id;
}

SymKey KeyService::identity_key_of(const Digest& id) const {
    auto it = ks_i_.find(id);
    if (it == ks_i_.end()) throw NotRegisteredError();
    return it->second;
}

namespace {

json open_deposit(const SymKey& key, const AeadEnvelope& sealed, const std::string& op,
                  const Digest& caller) {
    Bytes plain;
    try {
        plain = crypto::aead_decrypt(key, sealed, to_bytes(deposit_aad(op, caller)));
    } catch (const crypto::IntegrityError&) {
        throw AuthorizationError("payload not sealed by the caller's identity key");
    }
    try {
        return json::parse(to_string(plain));
    } catch (const json::exception&) {
        throw AuthorizationError("malformed deposit payload");
    }
}

}  // namespace

void KeyService::add_model_key(const Digest& oid, const AeadEnvelope& sealed) {
    std::lock_guard lk(mtx_);
    json j = open_deposit(identity_key_of(oid), sealed, "add_model_key", oid);
    std::string model_id = j.at("model_id");
    SymKey k = SymKey::from_bytes(b64_decode(j.at("key_b64")));
    auto [owner, claimed] = model_owner_.try_emplace(model_id, oid);
    if (owner->second != oid)
        throw AuthorizationError("model " + model_id + " belongs to another owner");
    ks_m_.insert_or_assign(model_id, k);
}

void KeyService::grant_access(const Digest& oid, const AeadEnvelope& sealed) {
    std::lock_guard lk(mtx_);
    json j = open_deposit(identity_key_of(oid), sealed, "grant_access", oid);
    std::string model_id = j.at("model_id");
    // First depositor or granter claims the model id; later callers must match.
    auto [owner, claimed] = model_owner_.try_emplace(model_id, oid);
    if (owner->second != oid)
        throw AuthorizationError("grant for a model owned by someone else");
    Measurement enclave = Measurement::from_hex(j.at("measurement"));
    Digest uid = Digest::from_bytes(from_hex(j.at("uid")));
    ac_m_.insert(triple_key(model_id, enclave, uid));
}

void KeyService::add_req_key(const Digest& uid, const AeadEnvelope& sealed) {
    std::lock_guard lk(mtx_);
    json j = open_deposit(identity_key_of(uid), sealed, "add_req_key", uid);
    std::string model_id = j.at("model_id");
    Measurement enclave = Measurement::from_hex(j.at("measurement"));
    SymKey k = SymKey::from_bytes(b64_decode(j.at("key_b64")));
    ks_r_.insert_or_assign(triple_key(model_id, enclave, uid), k);
}

std::optional<std::pair<SymKey, SymKey>> KeyService::key_provisioning(
    const Digest& uid, const std::string& model_id, const Measurement& enclave) const {
    std::lock_guard lk(mtx_);
    std::string triple = triple_key(model_id, enclave, uid);
    // Uniform denial: callers cannot tell which membership check failed.
    if (!ac_m_.contains(triple)) return std::nullopt;
    auto rk = ks_r_.find(triple);
    if (rk == ks_r_.end()) return std::nullopt;
    auto mk = ks_m_.find(model_id);
    if (mk == ks_m_.end()) return std::nullopt;
    return std::make_pair(mk->second, rk->second);
}

size_t KeyService::identity_count() const {
    std::lock_guard lk(mtx_);
    return ks_i_.size();
}
size_t KeyService::model_key_count() const {
    std::lock_guard lk(mtx_);
    return ks_m_.size();
}
size_t KeyService::req_key_count() const {
    std::lock_guard lk(mtx_);
    return ks_r_.size();
}
size_t KeyService::grant_count() const {
    std::lock_guard lk(mtx_);
    return ac_m_.size();
}

Digest KeyService::state_hash() const {
    std::lock_guard lk(mtx_);
    Bytes acc;
    for (const auto& [id, k] : ks_i_) {
        append(acc, id.bytes);
        append(acc, k.bytes);
    }
    for (const auto& [m, k] : ks_m_) {
        append(acc, m);
        append(acc, k.bytes);
    }
    for (const auto& [t, k] : ks_r_) {
        append(acc, t);
        append(acc, k.bytes);
    }
    for (const auto& t : ac_m_) append(acc, t);
    return crypto::sha256(acc);
}

}  // namespace sesemi::keyservice

#pragma once

#include <map>
#include <mutex>
#include <set>
#include <string>

#include "sesemi/attest.h"

namespace sesemi::keyservice {

using attest::Measurement;
using crypto::AeadEnvelope;
using crypto::Digest;
using crypto::SymKey;

struct NotRegisteredError : std::runtime_error {
    NotRegisteredError() : std::runtime_error("identity not registered") {}
};

/// Deposit payload not sealed by the caller's identity key, or a grant for a
/// model the caller does not own.
struct AuthorizationError : std::runtime_error {
    explicit AuthorizationError(const std::string& what) : std::runtime_error(what) {}
};

/// AAD strings binding sealed payloads to their purpose.
std::string deposit_aad(const std::string& op, const Digest& caller);

/// KS_R / AC_M lookup key: model_id || measurement || uid.
std::string triple_key(const std::string& model_id, const Measurement& enclave,
                       const Digest& uid);

/// Client-side builders for the sealed deposit payloads of Algorithm-style
/// operations below. `caller_key` is the depositor's identity key.
AeadEnvelope seal_model_key(const SymKey& caller_key, crypto::NonceSequence& nonces,
                            const Digest& caller, const std::string& model_id,
                            const SymKey& model_key);
AeadEnvelope seal_grant(const SymKey& caller_key, crypto::NonceSequence& nonces,
                        const Digest& caller, const std::string& model_id,
                        const Measurement& enclave, const Digest& uid);
AeadEnvelope seal_req_key(const SymKey& caller_key, crypto::NonceSequence& nonces,
                          const Digest& caller, const std::string& model_id,
                          const Measurement& enclave, const SymKey& req_key);

/// The always-on key broker. Stores are in-memory; all access is serialized.
class KeyService {
  public:
    KeyService(const attest::PlatformAuthority& authority, attest::CodeIdentity identity);

    Measurement measurement() const { return measurement_; }
    const attest::CodeIdentity& identity() const { return identity_; }

    Digest user_registration(const SymKey& identity_key);

    /// sealed = [model_id || K_M] under the owner's identity key.
    void add_model_key(const Digest& oid, const AeadEnvelope& sealed);

    /// sealed = [model_id || E_S || uid] under the owner's identity key.
    void grant_access(const Digest& oid, const AeadEnvelope& sealed);

    /// sealed = [model_id || E_S || K_R] under the user's identity key.
    void add_req_key(const Digest& uid, const AeadEnvelope& sealed);

    /// Returns (K_M, K_R) iff the triple is in both AC_M and KS_R and the
    /// model key exists. All failures produce the same uniform denial.
    std::optional<std::pair<SymKey, SymKey>> key_provisioning(const Digest& uid,
                                                              const std::string& model_id,
                                                              const Measurement& enclave) const;

    size_t identity_count() const;
    size_t model_key_count() const;
    size_t req_key_count() const;
    size_t grant_count() const;

    /// Hash over the full store contents; unchanged by denied requests.
    Digest state_hash() const;

  private:
    SymKey identity_key_of(const Digest& id) const;  // callers hold mtx_

    const attest::PlatformAuthority& authority_;
    attest::CodeIdentity identity_;
    Measurement measurement_;

    mutable std::mutex mtx_;
    std::map<Digest, SymKey> ks_i_;
    std::map<std::string, SymKey> ks_m_;
    std::map<std::string, SymKey> ks_r_;
    std::set<std::string> ac_m_;
    std::map<std::string, Digest> model_owner_;  // claimed on first deposit/grant
};

}  // namespace sesemi::keyservice

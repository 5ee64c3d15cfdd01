#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>

#include "sesemi/keyservice.h"
#include "sesemi/model.h"
#include "sesemi/runtime.h"

namespace sesemi::clients {

using crypto::AeadEnvelope;
using crypto::Digest;
using crypto::SymKey;

/// Key-broker operations used by owner and user flows; implemented in-process
/// and over HTTP so the same client code drives both.
class KeyServiceClient {
  public:
    virtual ~KeyServiceClient() = default;
    virtual Digest register_identity(const SymKey& identity_key) = 0;
    virtual void add_model_key(const Digest& oid, const AeadEnvelope& sealed) = 0;
    virtual void grant_access(const Digest& oid, const AeadEnvelope& sealed) = 0;
    virtual void add_req_key(const Digest& uid, const AeadEnvelope& sealed) = 0;
};

class InProcKeyServiceClient : public KeyServiceClient {
  public:
    explicit InProcKeyServiceClient(keyservice::KeyService& ks) : ks_(ks) {}
    Digest register_identity(const SymKey& identity_key) override;
    void add_model_key(const Digest& oid, const AeadEnvelope& sealed) override;
    void grant_access(const Digest& oid, const AeadEnvelope& sealed) override;
    void add_req_key(const Digest& uid, const AeadEnvelope& sealed) override;

  private:
    keyservice::KeyService& ks_;
};

/// Destination for encrypted model files (local dir, in-memory store, ...).
class ModelSink {
  public:
    virtual ~ModelSink() = default;
    virtual void store(const std::string& model_id, const Bytes& file) = 0;
};

class DirModelSink : public ModelSink {
  public:
    explicit DirModelSink(std::string dir) : dir_(std::move(dir)) {}
    void store(const std::string& model_id, const Bytes& file) override;

  private:
    std::string dir_;
};

class MemModelSink : public ModelSink {
  public:
    explicit MemModelSink(runtime::MemModelStore& store) : store_(store) {}
    void store(const std::string& model_id, const Bytes& file) override {
        store_.put(model_id, file);
    }

  private:
    runtime::MemModelStore& store_;
};

/// Model owner: registers an identity, encrypts and publishes models, and
/// deposits model keys and access grants.
class OwnerContext {
  public:
    OwnerContext(SymKey identity_key, KeyServiceClient& ks);

    const Digest& oid() const { return oid_; }

    /// Encrypt-then-deposit: the model file must be stored successfully before
    /// the model key is deposited; a sink failure leaves the broker untouched.
    void publish_model(const model::Model& m, ModelSink& sink);

    void grant(const std::string& model_id, const attest::Measurement& enclave,
               const Digest& uid);

    const SymKey& model_key(const std::string& model_id) const;

  private:
    SymKey key_;
    Digest oid_;
    crypto::NonceSequence nonces_;
    KeyServiceClient& ks_;
    std::map<std::string, SymKey> model_keys_;
};

/// Model user: registers an identity, deposits per-model request keys for a
/// trusted enclave measurement, and seals/opens request payloads.
class UserContext {
  public:
    UserContext(SymKey identity_key, KeyServiceClient& ks);

    const Digest& uid() const { return uid_; }

    const SymKey& deposit_req_key(const std::string& model_id,
                                  const attest::Measurement& enclave);

    runtime::InferenceRequest build_request(const std::string& model_id,
                                            const std::vector<double>& input,
                                            const std::string& keyservice_addr = "inproc");

    model::InferenceResult open_result(const std::string& model_id, uint64_t seq,
                                       const AeadEnvelope& sealed) const;

  private:
    SymKey key_;
    Digest uid_;
    crypto::NonceSequence deposit_nonces_;
    KeyServiceClient& ks_;
    std::map<std::string, SymKey> req_keys_;
    std::map<std::string, crypto::NonceSequence> req_nonces_;
    std::map<std::string, uint64_t> seq_;
};

}  // namespace sesemi::clients

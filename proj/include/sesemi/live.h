#pragma once

#include <memory>
#include <string>
#include <thread>

#include "sesemi/clients.h"
#include "sesemi/fnpacker.h"
#include "sesemi/keyservice.h"
#include "sesemi/runtime.h"

namespace sesemi::live {

/// HTTP front end for the key broker. Deposits arrive as base64 envelope
/// wire; key provisioning runs over an attested channel bootstrapped by the
/// /handshake endpoints.
class KeyServiceServer {
  public:
    KeyServiceServer(keyservice::KeyService& ks, const attest::PlatformAuthority& authority);
    ~KeyServiceServer();

    /// Binds 127.0.0.1 on a free port and serves in a background thread.
    int start();
    void stop();
    int port() const { return port_; }

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int port_ = 0;
};

class HttpKeyServiceClient : public clients::KeyServiceClient {
  public:
    explicit HttpKeyServiceClient(std::string addr) : addr_(std::move(addr)) {}

    crypto::Digest register_identity(const crypto::SymKey& identity_key) override;
    void add_model_key(const crypto::Digest& oid, const crypto::AeadEnvelope& sealed) override;
    void grant_access(const crypto::Digest& oid, const crypto::AeadEnvelope& sealed) override;
    void add_req_key(const crypto::Digest& uid, const crypto::AeadEnvelope& sealed) override;

  private:
    std::string addr_;  // host:port
};

/// Key provisioner that handshakes with a KeyServiceServer over HTTP and
/// keeps the attested channel for the enclave's lifetime.
class HttpProvisioner : public runtime::KeyProvisioner {
  public:
    HttpProvisioner(std::string addr, const attest::PlatformAuthority& authority,
                    attest::CodeIdentity enclave_identity,
                    std::optional<attest::Measurement> expected_ks);

    std::optional<std::pair<crypto::SymKey, crypto::SymKey>> provision(
        const crypto::Digest& uid, const std::string& model_id) override;
    uint64_t channels_established() const override { return channels_; }

  private:
    std::string addr_;
    const attest::PlatformAuthority& authority_;
    attest::CodeIdentity enclave_identity_;
    std::optional<attest::Measurement> expected_ks_;
    std::optional<attest::SecureChannel> chan_;
    std::string session_;
    uint64_t channels_ = 0;
};

/// One serverless worker endpoint. /init builds the enclave; /run refuses
/// requests until then.
class WorkerServer {
  public:
    WorkerServer(const attest::PlatformAuthority& authority,
                 std::shared_ptr<runtime::ModelStore> store);
    ~WorkerServer();

    int start();
    void stop();
    int port() const { return port_; }

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int port_ = 0;
};

/// Routing proxy in front of worker endpoints; /invoke picks an endpoint via
/// the packing router and forwards the request.
class FnPackerProxy {
  public:
    FnPackerProxy();
    ~FnPackerProxy();

    /// endpoint id -> "host:port" of a WorkerServer
    void add_pool(fnpack::FnPool pool, std::map<std::string, std::string> endpoint_addrs);

    int start();
    void stop();
    int port() const { return port_; }

    fnpack::FnPacker& router();

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int port_ = 0;
};

}  // namespace sesemi::live

#pragma once

#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>

#include "sesemi/attest.h"
#include "sesemi/keyservice.h"
#include "sesemi/model.h"

namespace sesemi::runtime {

using attest::Measurement;
using crypto::AeadEnvelope;
using crypto::Digest;
using crypto::SymKey;

enum class InvocationPath { Cold, Warm, Hot };
const char* to_string(InvocationPath p);

struct RequestDenied : std::runtime_error {
    RequestDenied() : std::runtime_error("key provisioning denied") {}
};

struct ReplayError : std::runtime_error {
    ReplayError() : std::runtime_error("stale request sequence number") {}
};

struct NoOutputError : std::runtime_error {
    NoOutputError() : std::runtime_error("no pending output on this context") {}
};

struct ModelNotFoundError : std::runtime_error {
    explicit ModelNotFoundError(const std::string& id)
        : std::runtime_error("model not found: " + id) {}
};

/// Sink for everything that crosses to the untrusted side; tests scan it for
/// plaintext leaks.
class UntrustedCapture {
  public:
    void record(ByteView b);
    void record(const std::string& s) { record(ByteView(to_bytes(s))); }
    Bytes concat() const;
    void clear();

  private:
    mutable std::mutex mtx_;
    std::vector<Bytes> buffers_;
};

/// Untrusted storage holding encrypted model files.
class ModelStore {
  public:
    virtual ~ModelStore() = default;
    virtual Bytes fetch(const std::string& model_id) = 0;  // throws ModelNotFoundError
};

class DirModelStore : public ModelStore {
  public:
    explicit DirModelStore(std::string dir) : dir_(std::move(dir)) {}
    Bytes fetch(const std::string& model_id) override;
    std::string path_for(const std::string& model_id) const;

  private:
    std::string dir_;
};

class MemModelStore : public ModelStore {
  public:
    void put(const std::string& model_id, Bytes file);
    Bytes fetch(const std::string& model_id) override;

  private:
    std::mutex mtx_;
    std::map<std::string, Bytes> files_;
};

/// Fetches (K_M, K_R) from a KeyService over an attested channel. The channel
/// is established on first use and kept for the enclave's lifetime.
class KeyProvisioner {
  public:
    virtual ~KeyProvisioner() = default;
    virtual std::optional<std::pair<SymKey, SymKey>> provision(const Digest& uid,
                                                               const std::string& model_id) = 0;
    virtual uint64_t channels_established() const { return 0; }
};

/// Mutually attested in-process link to a KeyService, used by tests and the
/// platform simulator. Both handshake ends run here; wire bytes go to the
/// transcript capture.
class InProcProvisioner : public KeyProvisioner {
  public:
    InProcProvisioner(keyservice::KeyService& ks, const attest::PlatformAuthority& authority,
                      attest::CodeIdentity enclave_identity,
                      std::optional<Measurement> expected_ks,
                      UntrustedCapture* wire_capture = nullptr);

    std::optional<std::pair<SymKey, SymKey>> provision(const Digest& uid,
                                                       const std::string& model_id) override;
    uint64_t channels_established() const override { return channels_; }

  private:
    keyservice::KeyService& ks_;
    const attest::PlatformAuthority& authority_;
    attest::CodeIdentity enclave_identity_;
    std::optional<Measurement> expected_ks_;
    UntrustedCapture* capture_;
    std::optional<attest::SecureChannel> client_chan_;
    std::optional<attest::SecureChannel> service_chan_;
    uint64_t channels_ = 0;
};

struct ModelRuntime {
    std::string model_id;
    Bytes scratch;
    bool initialized = false;
    model::InferenceResult last;
};

/// Inference backend contract; the default is the deterministic linear
/// scorer. model_load is handed the staged ciphertext from oc_load_model.
class InferenceBackend {
  public:
    virtual ~InferenceBackend() = default;
    virtual model::Model model_load(const std::string& model_id, const SymKey& model_key,
                                    ByteView staged_file) = 0;
    virtual ModelRuntime runtime_init(const model::Model& m) = 0;
    virtual void model_exec(ByteView data, const model::Model& m, ModelRuntime& rt) = 0;
    virtual Bytes prepare_output(ModelRuntime& rt) = 0;
    virtual size_t runtime_buffer_bytes(const model::Model& m) const = 0;
};

std::unique_ptr<InferenceBackend> make_linear_backend();

struct EnclaveConfig {
    int tcs_count = 1;
    bool key_cache_enabled = true;
    bool fixed_model = false;
    /// tcs_count 1, key cache off, runtime cleared after every request.
    bool sequential_isolation = false;
    std::string runtime_version = "0.1";
    std::string backend_name = "linear";
    size_t fixed_overhead_bytes = 1 << 20;

    EnclaveConfig normalized() const;
    attest::CodeIdentity code_identity() const;
};

struct InferenceRequest {
    Digest user_id;
    std::string model_id;
    std::string keyservice_addr;
    AeadEnvelope payload;
    uint64_t seq = 0;
};

std::string request_aad(const std::string& model_id, const Digest& uid, uint64_t seq);
std::string result_aad(const std::string& model_id, const Digest& uid, uint64_t seq);

struct EnclaveCounters {
    uint64_t provisioning_calls = 0;
    uint64_t model_loads = 0;
    uint64_t runtime_inits = 0;
    uint64_t channels_established = 0;
};

InvocationPath classify_invocation(bool new_sandbox, bool keys_cached, bool model_loaded,
                                   bool runtime_ready);

/// The model-serving enclave. Up to tcs_count request contexts execute
/// concurrently; the shared model slot and key cache are replaced only after
/// in-flight requests drain.
class Enclave {
  public:
    Enclave(EnclaveConfig cfg, std::shared_ptr<ModelStore> store,
            std::unique_ptr<KeyProvisioner> provisioner,
            std::unique_ptr<InferenceBackend> backend = make_linear_backend(),
            UntrustedCapture* capture = nullptr);

    Measurement measurement() const { return measurement_; }
    const EnclaveConfig& config() const { return cfg_; }

    InvocationPath ec_model_inf(const InferenceRequest& req, int ctx);
    AeadEnvelope ec_get_output(int ctx);
    void ec_clear_exec_ctx(int ctx);
    /// Drops the model slot and all runtimes but keeps keys and the channel;
    /// used to emulate enclave reuse without model caching.
    void reset_model_state();

    EnclaveCounters counters() const;
    bool model_resident(const std::string& model_id) const;
    bool keys_cached(const std::string& model_id, const Digest& uid) const;
    bool runtime_ready(int ctx, const std::string& model_id) const;
    int free_context() const;  // -1 if none
    size_t staged_bytes() const;
    size_t current_enclave_bytes() const;
    size_t peak_enclave_bytes() const;

  private:
    struct Slot {
        std::optional<ModelRuntime> rt;
        std::optional<AeadEnvelope> output;
        bool busy = false;
    };

    void check_ctx(int ctx) const;
    size_t unsafe_current_bytes() const;
    void bump_peak();

    EnclaveConfig cfg_;
    Measurement measurement_;
    std::shared_ptr<ModelStore> store_;
    std::unique_ptr<KeyProvisioner> provisioner_;
    std::unique_ptr<InferenceBackend> backend_;
    UntrustedCapture* capture_;

    mutable std::mutex mtx_;
    std::condition_variable cv_;
    std::optional<model::Model> model_slot_;
    struct KeyCache {
        std::string model_id;
        Digest uid;
        SymKey k_m;
        SymKey k_r;
    };
    std::optional<KeyCache> kc_;
    std::vector<Slot> slots_;
    std::map<std::pair<Digest, std::string>, uint64_t> last_seq_;
    std::map<Digest, crypto::NonceSequence> out_nonces_;  // per request key
    int inflight_ = 0;
    EnclaveCounters counters_;
    size_t staged_bytes_ = 0;
    size_t peak_bytes_ = 0;
};

}  // namespace sesemi::runtime

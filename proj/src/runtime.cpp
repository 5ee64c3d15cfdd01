#include "sesemi/runtime.h"

#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace sesemi::runtime {

using nlohmann::json;

const char* to_string(InvocationPath p) {
    switch (p) {
        case InvocationPath::Cold: return "cold";
        case InvocationPath::Warm: return "warm";
        case InvocationPath::Hot: return "hot";
    }
    return "?";
}

void UntrustedCapture::record(ByteView b) {
    std::lock_guard lk(mtx_);
    buffers_.emplace_back(b.begin(), b.end());
}

Bytes UntrustedCapture::concat() const {
    std::lock_guard lk(mtx_);
    Bytes out;
    for (const auto& b : buffers_) append(out, b);
    return out;
}

void UntrustedCapture::clear() {
    std::lock_guard lk(mtx_);
    buffers_.clear();
}

std::string DirModelStore::path_for(const std::string& model_id) const {
    return dir_ + "/" + model_id + ".ssmi";
}

Bytes DirModelStore::fetch(const std::string& model_id) {
    std::ifstream f(path_for(model_id), std::ios::binary);
    if (!f) throw ModelNotFoundError(model_id);
    Bytes out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return out;
}

void MemModelStore::put(const std::string& model_id, Bytes file) {
    std::lock_guard lk(mtx_);
    files_[model_id] = std::move(file);
}

Bytes MemModelStore::fetch(const std::string& model_id) {
    std::lock_guard lk(mtx_);
    auto it = files_.find(model_id);
    if (it == files_.end()) throw ModelNotFoundError(model_id);
    return it->second;
}

InProcProvisioner::InProcProvisioner(keyservice::KeyService& ks,
                                     const attest::PlatformAuthority& authority,
                                     attest::CodeIdentity enclave_identity,
                                     std::optional<Measurement> expected_ks,
                                     UntrustedCapture* wire_capture)
    : ks_(ks),
      authority_(authority),
      enclave_identity_(std::move(enclave_identity)),
      expected_ks_(std::move(expected_ks)),
      capture_(wire_capture) {}

std::optional<std::pair<SymKey, SymKey>> InProcProvisioner::provision(
    const Digest& uid, const std::string& model_id) {
    if (!client_chan_) {
        attest::HandshakeConfig enclave_side;
        enclave_side.attest_identity = enclave_identity_;
        enclave_side.authority = &authority_;
        enclave_side.require_peer_report = true;
        enclave_side.expected_peer = expected_ks_;
        enclave_side.verifier = authority_.verifier();

        attest::HandshakeConfig service_side;
        service_side.attest_identity = ks_.identity();
        service_side.authority = &authority_;
        service_side.require_peer_report = true;  // mutual
        service_side.verifier = authority_.verifier();

        attest::Transcript tr;
        auto [c, s] = attest::establish_channel(enclave_side, service_side, &tr);
        if (capture_)
            for (const auto& m : tr.messages) capture_->record(ByteView(m));
        client_chan_.emplace(std::move(c));
        service_chan_.emplace(std::move(s));
        ++channels_;
    }

    json req{{"uid", uid.hex()}, {"model_id", model_id}};
    Bytes wire = client_chan_->seal(to_bytes(req.dump()), "provision");
    if (capture_) capture_->record(ByteView(wire));

    // Service side: the enclave identity comes from the verified report held
    // by the channel, never from request fields.
    json sreq = json::parse(sesemi::to_string(service_chan_->open(wire, "provision")));
    Measurement es = *service_chan_->peer_measurement();
    auto keys = ks_.key_provisioning(Digest::from_bytes(from_hex(sreq.at("uid"))),
                                     sreq.at("model_id"), es);
    json resp;
    if (keys) {
        resp = {{"granted", true},
                {"km", b64_encode(keys->first.bytes)},
                {"kr", b64_encode(keys->second.bytes)}};
    } else {
        resp = {{"granted", false}};
    }
    Bytes rwire = service_chan_->seal(to_bytes(resp.dump()), "provision_result");
    if (capture_) capture_->record(ByteView(rwire));

    json cresp = json::parse(sesemi::to_string(client_chan_->open(rwire, "provision_result")));
    if (!cresp.at("granted").get<bool>()) return std::nullopt;
    return std::make_pair(SymKey::from_bytes(b64_decode(cresp.at("km"))),
                          SymKey::from_bytes(b64_decode(cresp.at("kr"))));
}

namespace {

class LinearBackend : public InferenceBackend {
  public:
    model::Model model_load(const std::string& model_id, const SymKey& model_key,
                            ByteView staged_file) override {
        model::ModelFile mf = model::decode_model_file(staged_file);
        if (mf.model_id != model_id)
            throw model::ModelFormatError("model file id mismatch");
        return model::decrypt_model(mf, model_key);
    }

    ModelRuntime runtime_init(const model::Model& m) override {
        ModelRuntime rt;
        rt.model_id = m.model_id;
        rt.scratch.assign(runtime_buffer_bytes(m), 0);
        rt.initialized = true;
        return rt;
    }

    void model_exec(ByteView data, const model::Model& m, ModelRuntime& rt) override {
        std::vector<double> input = model::decode_input(data);
        std::vector<double> scores = m.score(input);
        uint32_t argmax = 0;
        for (uint32_t i = 1; i < scores.size(); ++i)
            if (scores[i] > scores[argmax]) argmax = i;
        rt.last = model::InferenceResult{argmax, std::move(scores)};
    }

    Bytes prepare_output(ModelRuntime& rt) override { return rt.last.serialize(); }

    size_t runtime_buffer_bytes(const model::Model& m) const override {
        return std::max<size_t>(256, (m.rows + m.cols) * 2 * sizeof(double));
    }
};

}  // namespace

std::unique_ptr<InferenceBackend> make_linear_backend() {
    return std::make_unique<LinearBackend>();
}

EnclaveConfig EnclaveConfig::normalized() const {
    EnclaveConfig c = *this;
    if (c.sequential_isolation) {
        c.tcs_count = 1;
        c.key_cache_enabled = false;
    }
    return c;
}

attest::CodeIdentity EnclaveConfig::code_identity() const {
    EnclaveConfig c = normalized();
    attest::CodeIdentity ci;
    ci.runtime_name = "semirt";
    ci.runtime_version = c.runtime_version;
    ci.backend_name = c.backend_name;
    ci.config_flags = {
        {"tcs_count", std::to_string(c.tcs_count)},
        {"key_cache_enabled", c.key_cache_enabled ? "1" : "0"},
        {"fixed_model", c.fixed_model ? "1" : "0"},
        {"sequential_isolation", c.sequential_isolation ? "1" : "0"},
    };
    return ci;
}

std::string request_aad(const std::string& model_id, const Digest& uid, uint64_t seq) {
    return "request|" + model_id + "|" + uid.hex() + "|" + std::to_string(seq);
}

std::string result_aad(const std::string& model_id, const Digest& uid, uint64_t seq) {
    return "result|" + model_id + "|" + uid.hex() + "|" + std::to_string(seq);
}

InvocationPath classify_invocation(bool new_sandbox, bool keys_cached, bool model_loaded,
                                   bool runtime_ready) {
    if (new_sandbox) return InvocationPath::Cold;
    if (keys_cached && model_loaded && runtime_ready) return InvocationPath::Hot;
    return InvocationPath::Warm;
}

Enclave::Enclave(EnclaveConfig cfg, std::shared_ptr<ModelStore> store,
                 std::unique_ptr<KeyProvisioner> provisioner,
                 std::unique_ptr<InferenceBackend> backend, UntrustedCapture* capture)
    : cfg_(cfg.normalized()),
      measurement_(attest::measure_code(cfg_.code_identity())),
      store_(std::move(store)),
      provisioner_(std::move(provisioner)),
      backend_(std::move(backend)),
      capture_(capture),
      slots_(static_cast<size_t>(cfg_.tcs_count)) {}

void Enclave::check_ctx(int ctx) const {
    if (ctx < 0 || ctx >= static_cast<int>(slots_.size()))
        throw std::out_of_range("bad request context index");
}

size_t Enclave::unsafe_current_bytes() const {
    size_t total = cfg_.fixed_overhead_bytes;
    if (model_slot_)
        total += model_slot_->weights.size() * 8 + model_slot_->bias.size() * 8;
    for (const auto& s : slots_)
        if (s.rt) total += s.rt->scratch.size();
    return total;
}

void Enclave::bump_peak() {
    peak_bytes_ = std::max(peak_bytes_, unsafe_current_bytes() + staged_bytes_);
}

InvocationPath Enclave::ec_model_inf(const InferenceRequest& req, int ctx) {
    check_ctx(ctx);
    std::unique_lock lk(mtx_);
    if (slots_[ctx].busy) throw std::logic_error("context already in flight");

    auto needs = [&] {
        bool keys = !(kc_ && kc_->model_id == req.model_id && kc_->uid == req.user_id);
        bool model = !(model_slot_ && model_slot_->model_id == req.model_id);
        return std::make_pair(keys, model);
    };
    auto [need_keys, need_model] = needs();
    // Shared-state replacement drains in-flight requests first; waiting
    // requests queue here rather than fail.
    while ((need_keys || need_model) && inflight_ > 0) {
        cv_.wait(lk);
        std::tie(need_keys, need_model) = needs();
    }
    if (cfg_.fixed_model && model_slot_ && need_model)
        throw std::logic_error("enclave pinned to model " + model_slot_->model_id);

    bool runtime_ok = slots_[ctx].rt && slots_[ctx].rt->initialized &&
                      slots_[ctx].rt->model_id == req.model_id;
    bool was_hot = !need_keys && !need_model && runtime_ok;

    SymKey k_m, k_r;
    if (need_keys) {
        ++counters_.provisioning_calls;
        auto keys = provisioner_->provision(req.user_id, req.model_id);
        counters_.channels_established = provisioner_->channels_established();
        if (!keys) throw RequestDenied();
        k_m = keys->first;
        k_r = keys->second;
        if (cfg_.key_cache_enabled)
            kc_ = KeyCache{req.model_id, req.user_id, k_m, k_r};
        else
            kc_.reset();
    } else {
        k_m = kc_->k_m;
        k_r = kc_->k_r;
    }

    if (need_model) {
        // oc_load_model: ciphertext staged in untrusted memory, copied in,
        // then freed (oc_free_loaded).
        Bytes staged = store_->fetch(req.model_id);
        staged_bytes_ += staged.size();
        if (capture_) capture_->record(ByteView(staged));
        bump_peak();
        try {
            model::Model m = backend_->model_load(req.model_id, k_m, staged);
            ++counters_.model_loads;
            model_slot_ = std::move(m);
            for (auto& s : slots_) s.rt.reset();  // runtimes of the old model
        } catch (...) {
            staged_bytes_ -= staged.size();
            throw;
        }
        staged_bytes_ -= staged.size();
    }

    if (!slots_[ctx].rt || !slots_[ctx].rt->initialized ||
        slots_[ctx].rt->model_id != req.model_id) {
        slots_[ctx].rt = backend_->runtime_init(*model_slot_);
        ++counters_.runtime_inits;
    }
    bump_peak();

    auto seq_key = std::make_pair(req.user_id, req.model_id);
    auto seq_it = last_seq_.find(seq_key);
    if (seq_it != last_seq_.end() && req.seq <= seq_it->second) throw ReplayError();

    Bytes data = crypto::aead_decrypt(k_r, req.payload,
                                      to_bytes(request_aad(req.model_id, req.user_id, req.seq)));
    last_seq_[seq_key] = req.seq;

    slots_[ctx].busy = true;
    ++inflight_;
    const model::Model& m = *model_slot_;
    ModelRuntime& rt = *slots_[ctx].rt;
    crypto::NonceSequence& out_seq =
        out_nonces_.try_emplace(crypto::hash_identity(k_r)).first->second;
    lk.unlock();

    // Per-context work only; the model slot cannot be swapped while we are
    // counted in-flight.
    AeadEnvelope out_env;
    try {
        backend_->model_exec(data, m, rt);
        Bytes result = backend_->prepare_output(rt);
        out_env = crypto::aead_encrypt(
            k_r, result, to_bytes(result_aad(req.model_id, req.user_id, req.seq)), out_seq);
    } catch (...) {
        lk.lock();
        slots_[ctx].busy = false;
        --inflight_;
        cv_.notify_all();
        throw;
    }

    lk.lock();
    slots_[ctx].output = std::move(out_env);
    slots_[ctx].busy = false;
    --inflight_;
    cv_.notify_all();
    return was_hot ? InvocationPath::Hot : InvocationPath::Warm;
}

AeadEnvelope Enclave::ec_get_output(int ctx) {
    check_ctx(ctx);
    std::lock_guard lk(mtx_);
    if (!slots_[ctx].output) throw NoOutputError();
    AeadEnvelope env = *slots_[ctx].output;
    // Copy-out of ciphertext to untrusted memory.
    if (capture_) capture_->record(ByteView(env.serialize()));
    return env;
}

void Enclave::ec_clear_exec_ctx(int ctx) {
    check_ctx(ctx);
    std::lock_guard lk(mtx_);
    if (slots_[ctx].busy) throw std::logic_error("context mid-inference");
    slots_[ctx].rt.reset();
    slots_[ctx].output.reset();
    if (cfg_.sequential_isolation) kc_.reset();
}

void Enclave::reset_model_state() {
    std::lock_guard lk(mtx_);
    if (inflight_ > 0) throw std::logic_error("requests in flight");
    model_slot_.reset();
    for (auto& s : slots_) {
        s.rt.reset();
        s.output.reset();
    }
}

EnclaveCounters Enclave::counters() const {
    std::lock_guard lk(mtx_);
    return counters_;
}

bool Enclave::model_resident(const std::string& model_id) const {
    std::lock_guard lk(mtx_);
    return model_slot_ && model_slot_->model_id == model_id;
}

bool Enclave::keys_cached(const std::string& model_id, const Digest& uid) const {
    std::lock_guard lk(mtx_);
    return kc_ && kc_->model_id == model_id && kc_->uid == uid;
}

bool Enclave::runtime_ready(int ctx, const std::string& model_id) const {
    check_ctx(ctx);
    std::lock_guard lk(mtx_);
    return slots_[ctx].rt && slots_[ctx].rt->initialized &&
           slots_[ctx].rt->model_id == model_id;
}

int Enclave::free_context() const {
    std::lock_guard lk(mtx_);
    for (size_t i = 0; i < slots_.size(); ++i)
        if (!slots_[i].busy) return static_cast<int>(i);
    return -1;
}

size_t Enclave::staged_bytes() const {
    std::lock_guard lk(mtx_);
    return staged_bytes_;
}

size_t Enclave::current_enclave_bytes() const {
    std::lock_guard lk(mtx_);
    return unsafe_current_bytes();
}

size_t Enclave::peak_enclave_bytes() const {
    std::lock_guard lk(mtx_);
    return peak_bytes_;
}

}  // namespace sesemi::runtime

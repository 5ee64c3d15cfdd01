#include "sesemi/clients.h"

#include <fstream>

namespace sesemi::clients {

Digest InProcKeyServiceClient::register_identity(const SymKey& identity_key) {
    return ks_.user_registration(identity_key);
}

void InProcKeyServiceClient::add_model_key(const Digest& oid, const AeadEnvelope& sealed) {
    ks_.add_model_key(oid, sealed);
}

void InProcKeyServiceClient::grant_access(const Digest& oid, const AeadEnvelope& sealed) {
    ks_.grant_access(oid, sealed);
}

void InProcKeyServiceClient::add_req_key(const Digest& uid, const AeadEnvelope& sealed) {
    ks_.add_req_key(uid, sealed);
}

void DirModelSink::store(const std::string& model_id, const Bytes& file) {
    std::string path = dir_ + "/" + model_id + ".ssmi";
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path);
    f.write(reinterpret_cast<const char*>(file.data()),
            static_cast<std::streamsize>(file.size()));
    if (!f) throw std::runtime_error("short write to " + path);
}

OwnerContext::OwnerContext(SymKey identity_key, KeyServiceClient& ks)
    : key_(identity_key), oid_(ks.register_identity(identity_key)), ks_(ks) {}

void OwnerContext::publish_model(const model::Model& m, ModelSink& sink) {
    SymKey km = SymKey::random();
    crypto::NonceSequence file_nonces;
    Bytes file = model::encode_model_file(m, km, file_nonces);
    // The file goes out first; if storing it fails, no key is deposited.
    sink.store(m.model_id, file);
    ks_.add_model_key(oid_, keyservice::seal_model_key(key_, nonces_, oid_, m.model_id, km));
    model_keys_[m.model_id] = km;
}

void OwnerContext::grant(const std::string& model_id, const attest::Measurement& enclave,
                         const Digest& uid) {
    if (!model_keys_.contains(model_id))
        throw std::logic_error("granting access to an unpublished model: " + model_id);
    ks_.grant_access(oid_, keyservice::seal_grant(key_, nonces_, oid_, model_id, enclave, uid));
}

const SymKey& OwnerContext::model_key(const std::string& model_id) const {
    auto it = model_keys_.find(model_id);
    if (it == model_keys_.end())
        throw std::logic_error("model not published: " + model_id);
    return it->second;
}

UserContext::UserContext(SymKey identity_key, KeyServiceClient& ks)
    : key_(identity_key), uid_(ks.register_identity(identity_key)), ks_(ks) {}

const SymKey& UserContext::deposit_req_key(const std::string& model_id,
                                           const attest::Measurement& enclave) {
    SymKey kr = SymKey::random();
    ks_.add_req_key(uid_, keyservice::seal_req_key(key_, deposit_nonces_, uid_, model_id,
                                                   enclave, kr));
    req_keys_[model_id] = kr;
    req_nonces_.try_emplace(model_id);
    seq_.try_emplace(model_id, 0);
    return req_keys_.at(model_id);
}

runtime::InferenceRequest UserContext::build_request(const std::string& model_id,
                                                     const std::vector<double>& input,
                                                     const std::string& keyservice_addr) {
    auto it = req_keys_.find(model_id);
    if (it == req_keys_.end())
        throw std::logic_error("no request key deposited for " + model_id);
    runtime::InferenceRequest req;
    req.user_id = uid_;
    req.model_id = model_id;
    req.keyservice_addr = keyservice_addr;
    req.seq = ++seq_.at(model_id);
    Bytes pt = model::encode_input(input);
    req.payload = crypto::aead_encrypt(
        it->second, pt, to_bytes(runtime::request_aad(model_id, uid_, req.seq)),
        req_nonces_.at(model_id));
    return req;
}

model::InferenceResult UserContext::open_result(const std::string& model_id, uint64_t seq,
                                                const AeadEnvelope& sealed) const {
    auto it = req_keys_.find(model_id);
    if (it == req_keys_.end())
        throw std::logic_error("no request key deposited for " + model_id);
    Bytes plain = crypto::aead_decrypt(it->second, sealed,
                                       to_bytes(runtime::result_aad(model_id, uid_, seq)));
    return model::InferenceResult::deserialize(plain);
}

}  // namespace sesemi::clients

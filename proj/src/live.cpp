#include "sesemi/live.h"

#include <chrono>
#include <mutex>

#include "httplib.h"
#include "json.hpp"

namespace sesemi::live {

using nlohmann::json;

namespace {

void reply_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

struct ServerRunner {
    httplib::Server svr;
    std::thread thread;
    int port = 0;

    int start() {
        port = svr.bind_to_any_port("127.0.0.1");
        if (port <= 0) throw std::runtime_error("cannot bind server port");
        thread = std::thread([this] { svr.listen_after_bind(); });
        svr.wait_until_ready();
        return port;
    }

    void stop() {
        if (thread.joinable()) {
            svr.stop();
            thread.join();
        }
    }
};

}  // namespace

struct KeyServiceServer::Impl {
    keyservice::KeyService& ks;
    const attest::PlatformAuthority& authority;
    ServerRunner runner;

    std::mutex mtx;
    std::map<std::string, attest::HandshakeResponder> pending;
    std::map<std::string, attest::SecureChannel> sessions;
    uint64_t next_session = 0;

    Impl(keyservice::KeyService& k, const attest::PlatformAuthority& a) : ks(k), authority(a) {
        auto& svr = runner.svr;

        svr.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            reply_json(res, 200, {{"ok", true}});
        });

        svr.Post("/register", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, [&] {
                json b = json::parse(req.body);
                auto key = crypto::SymKey::from_bytes(b64_decode(b.at("identity_key")));
                return json{{"id", ks.user_registration(key).hex()}};
            });
        });

        auto deposit = [this](const httplib::Request& req, httplib::Response& res,
                              void (keyservice::KeyService::*op)(const crypto::Digest&,
                                                                 const crypto::AeadEnvelope&)) {
            handle(res, [&] {
                json b = json::parse(req.body);
                auto caller = crypto::Digest::from_bytes(from_hex(b.at("caller")));
                auto sealed = crypto::AeadEnvelope::deserialize(b64_decode(b.at("sealed")));
                (ks.*op)(caller, sealed);
                return json{{"ok", true}};
            });
        };
        svr.Post("/model_key", [deposit](const httplib::Request& req, httplib::Response& res) {
            deposit(req, res, &keyservice::KeyService::add_model_key);
        });
        svr.Post("/grant", [deposit](const httplib::Request& req, httplib::Response& res) {
            deposit(req, res, &keyservice::KeyService::grant_access);
        });
        svr.Post("/req_key", [deposit](const httplib::Request& req, httplib::Response& res) {
            deposit(req, res, &keyservice::KeyService::add_req_key);
        });

        svr.Post("/handshake", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, [&] {
                json b = json::parse(req.body);
                attest::HandshakeConfig cfg;
                cfg.attest_identity = ks.identity();
                cfg.authority = &authority;
                cfg.require_peer_report = true;  // only attested enclaves get keys
                cfg.verifier = authority.verifier();
                attest::HandshakeResponder resp(std::move(cfg));
                std::string msg2 = resp.respond(b.at("msg1"));
                std::lock_guard lk(mtx);
                std::string session = "s" + std::to_string(next_session++);
                pending.emplace(session, std::move(resp));
                return json{{"session", session}, {"msg2", msg2}};
            });
        });

        svr.Post("/handshake_finish", [this](const httplib::Request& req,
                                             httplib::Response& res) {
            handle(res, [&] {
                json b = json::parse(req.body);
                std::string session = b.at("session");
                std::lock_guard lk(mtx);
                auto it = pending.find(session);
                if (it == pending.end()) throw attest::HandshakeError("unknown session");
                it->second.finish(b.at("msg3"));
                sessions.emplace(session, it->second.take_channel());
                pending.erase(it);
                return json{{"ok", true}};
            });
        });

        svr.Post("/provision", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, [&] {
                json b = json::parse(req.body);
                std::string session = b.at("session");
                std::lock_guard lk(mtx);
                auto it = sessions.find(session);
                if (it == sessions.end()) throw attest::HandshakeError("unknown session");
                attest::SecureChannel& chan = it->second;
                json inner =
                    json::parse(to_string(chan.open(b64_decode(b.at("wire")), "provision")));
                // Enclave identity comes from the verified report bound to the
                // channel, never from request fields.
                attest::Measurement es = *chan.peer_measurement();
                auto keys = ks.key_provisioning(
                    crypto::Digest::from_bytes(from_hex(inner.at("uid"))),
                    inner.at("model_id"), es);
                json resp_inner;
                if (keys) {
                    resp_inner = {{"granted", true},
                                  {"km", b64_encode(keys->first.bytes)},
                                  {"kr", b64_encode(keys->second.bytes)}};
                } else {
                    resp_inner = {{"granted", false}};
                }
                return json{{"wire", b64_encode(chan.seal(to_bytes(resp_inner.dump()),
                                                          "provision_result"))}};
            });
        });
    }

    template <typename F>
    static void handle(httplib::Response& res, F f) {
        try {
            reply_json(res, 200, f());
        } catch (const keyservice::AuthorizationError& e) {
            reply_json(res, 403, {{"error", e.what()}});
        } catch (const keyservice::NotRegisteredError& e) {
            reply_json(res, 403, {{"error", e.what()}});
        } catch (const attest::HandshakeError& e) {
            reply_json(res, 403, {{"error", e.what()}});
        } catch (const crypto::IntegrityError& e) {
            reply_json(res, 400, {{"error", e.what()}});
        } catch (const std::exception& e) {
            reply_json(res, 400, {{"error", e.what()}});
        }
    }
};

KeyServiceServer::KeyServiceServer(keyservice::KeyService& ks,
                                   const attest::PlatformAuthority& authority)
    : impl_(std::make_unique<Impl>(ks, authority)) {}

KeyServiceServer::~KeyServiceServer() { stop(); }

int KeyServiceServer::start() { return port_ = impl_->runner.start(); }

void KeyServiceServer::stop() { impl_->runner.stop(); }

namespace {

json post_json(const std::string& addr, const std::string& path, const json& body) {
    auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw std::runtime_error("bad address: " + addr);
    httplib::Client cli(addr.substr(0, colon), std::stoi(addr.substr(colon + 1)));
    cli.set_read_timeout(30, 0);
    auto res = cli.Post(path, body.dump(), "application/json");
    if (!res) throw std::runtime_error("no response from " + addr + path);
    json parsed = json::parse(res->body);
    if (res->status != 200) {
        std::string err = parsed.value("error", "http " + std::to_string(res->status));
        if (res->status == 403) throw keyservice::AuthorizationError(err);
        throw std::runtime_error(err);
    }
    return parsed;
}

}  // namespace

crypto::Digest HttpKeyServiceClient::register_identity(const crypto::SymKey& identity_key) {
    json r = post_json(addr_, "/register", {{"identity_key", b64_encode(identity_key.bytes)}});
    return crypto::Digest::from_bytes(from_hex(r.at("id")));
}

void HttpKeyServiceClient::add_model_key(const crypto::Digest& oid,
                                         const crypto::AeadEnvelope& sealed) {
    post_json(addr_, "/model_key",
              {{"caller", oid.hex()}, {"sealed", b64_encode(sealed.serialize())}});
}

void HttpKeyServiceClient::grant_access(const crypto::Digest& oid,
                                        const crypto::AeadEnvelope& sealed) {
    post_json(addr_, "/grant",
              {{"caller", oid.hex()}, {"sealed", b64_encode(sealed.serialize())}});
}

void HttpKeyServiceClient::add_req_key(const crypto::Digest& uid,
                                       const crypto::AeadEnvelope& sealed) {
    post_json(addr_, "/req_key",
              {{"caller", uid.hex()}, {"sealed", b64_encode(sealed.serialize())}});
}

HttpProvisioner::HttpProvisioner(std::string addr, const attest::PlatformAuthority& authority,
                                 attest::CodeIdentity enclave_identity,
                                 std::optional<attest::Measurement> expected_ks)
    : addr_(std::move(addr)),
      authority_(authority),
      enclave_identity_(std::move(enclave_identity)),
      expected_ks_(std::move(expected_ks)) {}

std::optional<std::pair<crypto::SymKey, crypto::SymKey>> HttpProvisioner::provision(
    const crypto::Digest& uid, const std::string& model_id) {
    if (!chan_) {
        attest::HandshakeConfig cfg;
        cfg.attest_identity = enclave_identity_;
        cfg.authority = &authority_;
        cfg.require_peer_report = true;
        cfg.expected_peer = expected_ks_;
        cfg.verifier = authority_.verifier();
        attest::HandshakeInitiator init(std::move(cfg));
        json r1 = post_json(addr_, "/handshake", {{"msg1", init.msg1()}});
        std::string msg3 = init.finish(r1.at("msg2"));
        post_json(addr_, "/handshake_finish", {{"session", r1.at("session")}, {"msg3", msg3}});
        session_ = r1.at("session");
        chan_.emplace(init.take_channel());
        ++channels_;
    }
    json inner{{"uid", uid.hex()}, {"model_id", model_id}};
    json r = post_json(addr_, "/provision",
                       {{"session", session_},
                        {"wire", b64_encode(chan_->seal(to_bytes(inner.dump()), "provision"))}});
    json resp = json::parse(
        to_string(chan_->open(b64_decode(r.at("wire")), "provision_result")));
    if (!resp.at("granted").get<bool>()) return std::nullopt;
    return std::make_pair(crypto::SymKey::from_bytes(b64_decode(resp.at("km"))),
                          crypto::SymKey::from_bytes(b64_decode(resp.at("kr"))));
}

struct WorkerServer::Impl {
    const attest::PlatformAuthority& authority;
    std::shared_ptr<runtime::ModelStore> store;
    ServerRunner runner;

    std::mutex mtx;
    std::unique_ptr<runtime::Enclave> enclave;

    Impl(const attest::PlatformAuthority& a, std::shared_ptr<runtime::ModelStore> s)
        : authority(a), store(std::move(s)) {
        auto& svr = runner.svr;

        svr.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            reply_json(res, 200, {{"ok", true}});
        });

        svr.Post("/init", [this](const httplib::Request& req, httplib::Response& res) {
            try {
                json b = json::parse(req.body);
                runtime::EnclaveConfig cfg;
                cfg.tcs_count = b.value("tcs_count", 1);
                cfg.sequential_isolation = b.value("sequential_isolation", false);
                cfg = cfg.normalized();
                std::string ks_addr = b.at("keyservice_addr");
                std::optional<attest::Measurement> expected;
                if (b.contains("keyservice_measurement"))
                    expected = attest::Measurement::from_hex(b.at("keyservice_measurement"));
                auto prov = std::make_unique<HttpProvisioner>(ks_addr, authority,
                                                              cfg.code_identity(), expected);
                std::lock_guard lk(mtx);
                enclave = std::make_unique<runtime::Enclave>(cfg, store, std::move(prov));
                reply_json(res, 200, {{"measurement", enclave->measurement().hex()}});
            } catch (const std::exception& e) {
                reply_json(res, 400, {{"error", e.what()}});
            }
        });

        svr.Post("/run", [this](const httplib::Request& req, httplib::Response& res) {
            std::lock_guard lk(mtx);
            if (!enclave) {
                reply_json(res, 409, {{"error", "worker not initialized"}});
                return;
            }
            try {
                json b = json::parse(req.body);
                runtime::InferenceRequest ireq;
                ireq.user_id = crypto::Digest::from_bytes(from_hex(b.at("user_id")));
                ireq.model_id = b.at("model_id");
                ireq.keyservice_addr = b.value("keyservice_addr", "");
                ireq.payload = crypto::AeadEnvelope::deserialize(b64_decode(b.at("payload")));
                ireq.seq = b.at("seq").get<uint64_t>();
                int ctx = enclave->free_context();
                if (ctx < 0) {
                    reply_json(res, 503, {{"error", "no free context"}});
                    return;
                }
                runtime::InvocationPath path = enclave->ec_model_inf(ireq, ctx);
                crypto::AeadEnvelope out = enclave->ec_get_output(ctx);
                if (enclave->config().sequential_isolation) enclave->ec_clear_exec_ctx(ctx);
                reply_json(res, 200,
                           {{"result", b64_encode(out.serialize())},
                            {"path", runtime::to_string(path)}});
            } catch (const runtime::RequestDenied& e) {
                reply_json(res, 403, {{"error", e.what()}});
            } catch (const runtime::ReplayError& e) {
                reply_json(res, 409, {{"error", e.what()}});
            } catch (const crypto::IntegrityError& e) {
                reply_json(res, 400, {{"error", e.what()}});
            } catch (const std::exception& e) {
                reply_json(res, 400, {{"error", e.what()}});
            }
        });
    }
};

WorkerServer::WorkerServer(const attest::PlatformAuthority& authority,
                           std::shared_ptr<runtime::ModelStore> store)
    : impl_(std::make_unique<Impl>(authority, std::move(store))) {}

WorkerServer::~WorkerServer() { stop(); }

int WorkerServer::start() { return port_ = impl_->runner.start(); }

void WorkerServer::stop() { impl_->runner.stop(); }

struct FnPackerProxy::Impl {
    ServerRunner runner;
    fnpack::FnPacker router;
    std::mutex mtx;
    std::map<std::string, std::string> addrs;
    std::chrono::steady_clock::time_point epoch = std::chrono::steady_clock::now();

    double now_ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                         epoch)
            .count();
    }

    Impl() {
        auto& svr = runner.svr;

        svr.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            reply_json(res, 200, {{"ok", true}});
        });

        svr.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
            json out = json::object();
            for (const auto& [ep, st] : router.all_stats()) {
                int pending = 0;
                for (const auto& [m, p] : st.pending) pending += p;
                out[ep] = {{"pending", pending},
                           {"exclusive_for", st.exclusive_for ? json(*st.exclusive_for)
                                                              : json(nullptr)}};
            }
            reply_json(res, 200, out);
        });

        svr.Post("/invoke", [this](const httplib::Request& req, httplib::Response& res) {
            std::string model_id;
            std::string endpoint;
            try {
                json b = json::parse(req.body);
                model_id = b.at("model_id");
                double t = now_ms();
                endpoint = router.route(model_id, t);
                std::string addr;
                {
                    std::lock_guard lk(mtx);
                    addr = addrs.at(endpoint);
                }
                double t0 = now_ms();
                json r = post_json(addr, "/run", b);
                double t1 = now_ms();
                runtime::InvocationPath path = runtime::InvocationPath::Warm;
                std::string ps = r.value("path", "warm");
                if (ps == "cold") path = runtime::InvocationPath::Cold;
                if (ps == "hot") path = runtime::InvocationPath::Hot;
                router.complete(model_id, endpoint, t1 - t0, path, t1);
                r["endpoint"] = endpoint;
                reply_json(res, 200, r);
            } catch (const keyservice::AuthorizationError& e) {
                if (!endpoint.empty())
                    router.complete(model_id, endpoint, 0, runtime::InvocationPath::Warm,
                                    now_ms());
                reply_json(res, 403, {{"error", e.what()}});
            } catch (const std::exception& e) {
                if (!endpoint.empty())
                    router.complete(model_id, endpoint, 0, runtime::InvocationPath::Warm,
                                    now_ms());
                reply_json(res, 400, {{"error", e.what()}});
            }
        });
    }
};

FnPackerProxy::FnPackerProxy() : impl_(std::make_unique<Impl>()) {}

FnPackerProxy::~FnPackerProxy() { stop(); }

void FnPackerProxy::add_pool(fnpack::FnPool pool,
                             std::map<std::string, std::string> endpoint_addrs) {
    {
        std::lock_guard lk(impl_->mtx);
        for (auto& [ep, addr] : endpoint_addrs) impl_->addrs[ep] = addr;
    }
    impl_->router.deploy_pool(std::move(pool));
}

int FnPackerProxy::start() { return port_ = impl_->runner.start(); }

void FnPackerProxy::stop() { impl_->runner.stop(); }

fnpack::FnPacker& FnPackerProxy::router() { return impl_->router; }

}  // namespace sesemi::live

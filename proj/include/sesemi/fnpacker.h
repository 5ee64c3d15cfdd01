#pragma once

#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "sesemi/runtime.h"

namespace sesemi::fnpack {

using runtime::InvocationPath;

struct PoolError : std::runtime_error {
    explicit PoolError(const std::string& what) : std::runtime_error(what) {}
};

struct FnPool {
    std::string pool_id;
    std::vector<std::string> models;
    int memory_budget_mb = 128;
    std::vector<std::string> endpoints;
};

struct EndpointStats {
    std::map<std::string, int> pending;              // per model
    std::map<std::string, double> last_invocation;   // per model, ms
    std::optional<std::string> exclusive_for;
    double exclusive_since = 0;
    double last_request = -1e18;                     // any model
    std::map<std::string, double> latency_ewma;      // key "model|path"
};

struct RouterConfig {
    double idle_interval_floor_ms = 10'000;
    double ewma_alpha = 0.2;
};

/// Request router: pins models with pending responses to exclusive endpoints
/// and packs one-shot traffic onto idle ones.
class FnPacker {
  public:
    explicit FnPacker(RouterConfig cfg = {}) : cfg_(cfg) {}

    void deploy_pool(FnPool pool);
    const FnPool& pool_of(const std::string& model_id) const;

    std::string route(const std::string& model_id, double t_ms);
    void complete(const std::string& model_id, const std::string& endpoint_id,
                  double latency_ms, InvocationPath path, double t_ms);

    EndpointStats stats(const std::string& endpoint_id) const;
    std::vector<std::pair<std::string, EndpointStats>> all_stats() const;
    uint64_t accounting_errors() const;
    int total_pending(const std::string& model_id) const;

  private:
    bool endpoint_not_busy(const EndpointStats& ep, double t_ms) const;
    double idle_interval(const EndpointStats& ep) const;

    RouterConfig cfg_;
    mutable std::mutex mtx_;
    std::map<std::string, FnPool> pools_;
    std::map<std::string, std::string> model_pool_;          // model -> pool
    std::map<std::string, EndpointStats> endpoints_;
    std::map<std::string, std::string> pinned_;              // model with pending -> endpoint
    uint64_t accounting_errors_ = 0;
};

}  // namespace sesemi::fnpack

#include "sesemi/fnpacker.h"

#include <algorithm>

namespace sesemi::fnpack {

void FnPacker::deploy_pool(FnPool pool) {
    std::lock_guard lk(mtx_);
    if (pool.pool_id.empty() || pool.models.empty() || pool.endpoints.empty())
        throw PoolError("pool needs an id, models, and at least one endpoint");
    if (pools_.contains(pool.pool_id)) throw PoolError("duplicate pool id " + pool.pool_id);
    for (const auto& m : pool.models)
        if (model_pool_.contains(m))
            throw PoolError("model " + m + " already belongs to pool " + model_pool_[m]);
    for (const auto& m : pool.models) model_pool_[m] = pool.pool_id;
    for (const auto& e : pool.endpoints) endpoints_.try_emplace(e);
    pools_.emplace(pool.pool_id, std::move(pool));
}

const FnPool& FnPacker::pool_of(const std::string& model_id) const {
    std::lock_guard lk(mtx_);
    auto it = model_pool_.find(model_id);
    if (it == model_pool_.end()) throw PoolError("model not deployed: " + model_id);
    return pools_.at(it->second);
}

double FnPacker::idle_interval(const EndpointStats& ep) const {
    double iv = cfg_.idle_interval_floor_ms;
    if (ep.exclusive_for) {
        auto it = ep.latency_ewma.find(*ep.exclusive_for + "|hot");
        if (it != ep.latency_ewma.end()) iv = std::max(iv, 2.0 * it->second);
    }
    return iv;
}

bool FnPacker::endpoint_not_busy(const EndpointStats& ep, double t_ms) const {
    int pending = 0;
    for (const auto& [m, p] : ep.pending) pending += p;
    if (pending == 0 && !ep.exclusive_for) return true;
    if (ep.exclusive_for && pending == 0 && t_ms - ep.last_request >= idle_interval(ep))
        return true;
    return false;
}

std::string FnPacker::route(const std::string& model_id, double t_ms) {
    std::lock_guard lk(mtx_);
    auto pit = model_pool_.find(model_id);
    if (pit == model_pool_.end()) throw PoolError("model not deployed: " + model_id);
    const FnPool& pool = pools_.at(pit->second);

    std::string chosen;
    auto pinned = pinned_.find(model_id);
    if (pinned != pinned_.end()) {
        // Pending responses exist: stick to the model's endpoint and mark it
        // exclusive.
        chosen = pinned->second;
        EndpointStats& ep = endpoints_.at(chosen);
        if (!ep.exclusive_for || *ep.exclusive_for != model_id) {
            ep.exclusive_for = model_id;
            ep.exclusive_since = t_ms;
        }
    } else {
        // An endpoint held exclusively for this model keeps its warm state;
        // prefer it over any free one.
        for (const auto& e : pool.endpoints) {
            EndpointStats& ep = endpoints_.at(e);
            int pending = 0;
            for (const auto& [m, p] : ep.pending) pending += p;
            if (ep.exclusive_for && *ep.exclusive_for == model_id && pending == 0) {
                chosen = e;
                break;
            }
        }
        for (const auto& e : pool.endpoints) {
            if (!chosen.empty()) break;
            EndpointStats& ep = endpoints_.at(e);
            if (endpoint_not_busy(ep, t_ms)) {
                chosen = e;
                if (ep.exclusive_for && *ep.exclusive_for != model_id)
                    ep.exclusive_for.reset();  // expired marking is released
                break;
            }
        }
        if (chosen.empty()) {
            // Overflow: least-recently-used exclusive endpoint, falling back
            // to least-recently-used overall.
            double best = 1e300;
            for (const auto& e : pool.endpoints) {
                const EndpointStats& ep = endpoints_.at(e);
                if (ep.exclusive_for && ep.last_request < best) {
                    best = ep.last_request;
                    chosen = e;
                }
            }
            if (chosen.empty()) {
                for (const auto& e : pool.endpoints) {
                    const EndpointStats& ep = endpoints_.at(e);
                    if (ep.last_request < best) {
                        best = ep.last_request;
                        chosen = e;
                    }
                }
            }
        }
    }

    EndpointStats& ep = endpoints_.at(chosen);
    ++ep.pending[model_id];
    ep.last_request = t_ms;
    ep.last_invocation[model_id] = t_ms;
    pinned_[model_id] = chosen;
    return chosen;
}

void FnPacker::complete(const std::string& model_id, const std::string& endpoint_id,
                        double latency_ms, InvocationPath path, double t_ms) {
    std::lock_guard lk(mtx_);
    auto eit = endpoints_.find(endpoint_id);
    if (eit == endpoints_.end() || eit->second.pending[model_id] <= 0) {
        ++accounting_errors_;
        return;
    }
    EndpointStats& ep = eit->second;
    --ep.pending[model_id];
    ep.last_invocation[model_id] = t_ms;
    ep.last_request = std::max(ep.last_request, t_ms);  // idle clock restarts
    std::string key = model_id + "|" + runtime::to_string(path);
    auto [it, inserted] = ep.latency_ewma.try_emplace(key, latency_ms);
    if (!inserted) it->second += cfg_.ewma_alpha * (latency_ms - it->second);

    int total = 0;
    for (const auto& [e, stats] : endpoints_) {
        auto p = stats.pending.find(model_id);
        if (p != stats.pending.end()) total += p->second;
    }
    if (total == 0) pinned_.erase(model_id);
}

EndpointStats FnPacker::stats(const std::string& endpoint_id) const {
    std::lock_guard lk(mtx_);
    return endpoints_.at(endpoint_id);
}

std::vector<std::pair<std::string, EndpointStats>> FnPacker::all_stats() const {
    std::lock_guard lk(mtx_);
    return {endpoints_.begin(), endpoints_.end()};
}

uint64_t FnPacker::accounting_errors() const {
    std::lock_guard lk(mtx_);
    return accounting_errors_;
}

int FnPacker::total_pending(const std::string& model_id) const {
    std::lock_guard lk(mtx_);
    int total = 0;
    for (const auto& [e, stats] : endpoints_) {
        auto p = stats.pending.find(model_id);
        if (p != stats.pending.end()) total += p->second;
    }
    return total;
}

}  // namespace sesemi::fnpack

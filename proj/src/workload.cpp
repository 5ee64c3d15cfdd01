#include "sesemi/workload.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace sesemi::workload {

namespace {

// Inter-arrival sampling is hand-rolled so traces are identical across
// standard library implementations.
double exp_sample(std::mt19937_64& gen, double rate_rps) {
    double u;
    do {
        u = static_cast<double>(gen()) / static_cast<double>(UINT64_MAX);
    } while (u <= 0.0);
    return -std::log(u) / rate_rps * 1000.0;  // ms
}

}  // namespace

Trace poisson_trace(double rate_rps, double duration_s, const std::string& user,
                    const std::string& model, uint64_t seed) {
    if (rate_rps < 0) throw std::invalid_argument("negative rate");
    Trace out;
    if (rate_rps == 0 || duration_s <= 0) return out;
    std::mt19937_64 gen(seed);
    double t = exp_sample(gen, rate_rps);
    double end = duration_s * 1000.0;
    while (t < end) {
        out.push_back({t, user, model});
        t += exp_sample(gen, rate_rps);
    }
    return out;
}

Trace mmpp_trace(double rate_low, double rate_high, double switch_interval_s,
                 double duration_s, const std::string& user, const std::string& model,
                 uint64_t seed) {
    if (rate_low < 0 || rate_high < 0) throw std::invalid_argument("negative rate");
    if (switch_interval_s <= 0) throw std::invalid_argument("switch interval must be positive");
    Trace out;
    if (duration_s <= 0) return out;
    std::mt19937_64 gen(seed);
    double end = duration_s * 1000.0;
    double interval = switch_interval_s * 1000.0;
    double t = 0;
    // The state index is tracked as an integer so accumulated floating-point
    // error can never skip or double a switch at an interval boundary.
    uint64_t k = 0;
    while (t < end) {
        bool high = k % 2 == 1;
        double rate = high ? rate_high : rate_low;
        double state_end = std::min(end, static_cast<double>(k + 1) * interval);
        double next = rate == 0 ? state_end : t + exp_sample(gen, rate);
        if (next >= state_end) {
            t = state_end;
            ++k;
        } else {
            out.push_back({next, user, model});
            t = next;
        }
    }
    return out;
}

Trace interactive_sessions(const std::vector<std::string>& models,
                           const std::vector<double>& session_times_ms,
                           const std::string& user, double gap_ms) {
    if (models.empty()) throw std::invalid_argument("session needs at least one model");
    Trace out;
    for (double start : session_times_ms) {
        double t = start;
        for (const auto& m : models) {
            out.push_back({t, user, m});
            t += gap_ms;
        }
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const TraceEvent& a, const TraceEvent& b) { return a.t_ms < b.t_ms; });
    return out;
}

Trace merge(const std::vector<Trace>& traces) {
    Trace out;
    for (const auto& t : traces) out.insert(out.end(), t.begin(), t.end());
    std::stable_sort(out.begin(), out.end(),
                     [](const TraceEvent& a, const TraceEvent& b) { return a.t_ms < b.t_ms; });
    return out;
}

std::string to_csv(const Trace& trace) {
    std::ostringstream os;
    os << "t_ms,user_id,model_id\n";
    char buf[64];
    for (const auto& e : trace) {
        std::snprintf(buf, sizeof buf, "%.3f", e.t_ms);
        os << buf << "," << e.user_id << "," << e.model_id << "\n";
    }
    return os.str();
}

Trace from_csv(const std::string& csv) {
    Trace out;
    std::istringstream is(csv);
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line.rfind("t_ms", 0) == 0) continue;
        }
        auto c1 = line.find(',');
        auto c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw std::invalid_argument("bad trace row: " + line);
        out.push_back({std::stod(line.substr(0, c1)), line.substr(c1 + 1, c2 - c1 - 1),
                       line.substr(c2 + 1)});
    }
    return out;
}

}  // namespace sesemi::workload

#pragma once

#include <string>
#include <vector>

#include "sesemi/bytes.h"

namespace sesemi::workload {

struct TraceEvent {
    double t_ms = 0;
    std::string user_id;
    std::string model_id;

    bool operator==(const TraceEvent&) const = default;
};

using Trace = std::vector<TraceEvent>;

Trace poisson_trace(double rate_rps, double duration_s, const std::string& user,
                    const std::string& model, uint64_t seed);

/// Two-state modulated arrivals: Poisson at rate_low / rate_high, switching
/// every switch_interval_s, starting in the low state.
Trace mmpp_trace(double rate_low, double rate_high, double switch_interval_s,
                 double duration_s, const std::string& user, const std::string& model,
                 uint64_t seed);

/// One request per model, in order, at each session start; gap_ms between
/// consecutive queries (closed-loop pacing is applied by the harness).
Trace interactive_sessions(const std::vector<std::string>& models,
                           const std::vector<double>& session_times_ms,
                           const std::string& user, double gap_ms);

Trace merge(const std::vector<Trace>& traces);

std::string to_csv(const Trace& trace);
Trace from_csv(const std::string& csv);

}  // namespace sesemi::workload

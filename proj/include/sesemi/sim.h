#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sesemi/fnpacker.h"
#include "sesemi/runtime.h"
#include "sesemi/workload.h"

namespace sesemi::sim {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class Policy { Native, IsoReuse, SeSeMI };
enum class DeploymentMode { OneToOne, AllInOne, FnPacker };

Policy policy_from_string(const std::string& s);
const char* to_string(Policy p);
DeploymentMode deployment_from_string(const std::string& s);
const char* to_string(DeploymentMode d);

/// Cost-model parameters for one model; sizes drive the memory model, the
/// per-stage costs drive virtual time.
struct ModelSpec {
    std::string model_id;
    double model_mb = 17;
    double buffer_mb = 30;
    double exec_ms = 65;
    double runtime_init_ms = 26;
    double fetch_ms = 180;
    double decrypt_ms = 20;
    size_t rows = 4;
    size_t cols = 4;
};

struct StageCosts {
    double sandbox_init_ms = 100;
    double enclave_init_base_ms = 200;
    double enclave_init_per_mb_ms = 1.0;
    double enclave_init_concurrency_factor = 0.15;
    double attestation_base_ms = 250;
    double attestation_concurrency_factor = 0.2;
    /// Key provisioning over an already-attested channel.
    double key_fetch_ms = 20;
    double request_decrypt_ms = 2;
    double result_encrypt_ms = 2;
    double epc_exec_penalty = 2.0;

    double enclave_init_ms(double enclave_mb, int concurrent_launches) const;
    double attestation_ms(int concurrent_attestations) const;
    double exec_time_ms(const ModelSpec& m, int concurrent_execs, int cores,
                        bool epc_pressure) const;
};

struct ClusterConfig {
    int nodes = 1;
    double invoker_memory_mb = 65536;
    int cores = 12;
    double epc_limit_mb = 0;  // 0 disables the EPC-pressure mode
};

struct PoissonStreamSpec {
    std::string model_id;
    std::string user_id;
    double rate_rps = 1;
    double duration_s = 60;
    double start_s = 0;
};

struct MmppSpec {
    std::string model_id;
    std::string user_id;
    double rate_low = 20;
    double rate_high = 40;
    double switch_interval_s = 60;
    double duration_s = 240;
};

struct SessionSpec {
    double start_s = 0;
    std::string user_id;
    std::vector<std::string> models;
    double gap_ms = 0;  // between completion and the next query
};

struct WorkloadSpec {
    std::vector<PoissonStreamSpec> streams;
    std::optional<MmppSpec> mmpp;
    std::vector<SessionSpec> sessions;
    workload::Trace events;  // explicit extra events
};

struct ExperimentConfig {
    ClusterConfig cluster;
    StageCosts costs;
    std::vector<ModelSpec> models;
    Policy policy = Policy::SeSeMI;
    DeploymentMode deployment = DeploymentMode::OneToOne;
    int endpoints_per_pool = 4;
    int tcs_count = 1;
    bool sequential_isolation = false;
    std::optional<int> memory_budget_mb;  // default: derived per endpoint
    double keep_warm_timeout_ms = 180'000;
    uint64_t seed = 1;
    double horizon_ms = 3'600'000;
    WorkloadSpec workload;

    /// Strict parse: unknown fields are rejected.
    static ExperimentConfig from_json_text(const std::string& text);
    const ModelSpec& model(const std::string& id) const;
};

/// Container budget: smallest multiple of 128 MB covering the enclave plus
/// sandbox overhead.
int required_budget_mb(double enclave_mb);
double enclave_memory_mb(const ModelSpec& m, int tcs_count);

struct RequestRecord {
    uint64_t request_id = 0;
    double submit_ms = 0;
    double complete_ms = 0;
    double latency_ms = 0;
    std::string path;
    std::string endpoint;
    std::string instance;
    int node = 0;
    // not serialized to the metrics CSV
    std::string user_id;
    std::string model_id;
    std::string origin;
    double queue_ms = 0;
    double stage_sum_ms = 0;
};

struct LedgerRecord {
    std::string instance;
    std::string endpoint;
    int budget_mb = 0;
    double start_ms = 0;
    std::optional<double> end_ms;  // open records are clipped at the horizon
};

double account_gb_seconds(const std::vector<LedgerRecord>& ledger, double horizon_ms);

struct SimResult {
    std::vector<RequestRecord> records;
    std::vector<LedgerRecord> ledger;
    double gb_seconds = 0;
    std::map<std::string, uint64_t> path_counts;
    uint64_t queued_at_horizon = 0;

    std::string metrics_csv() const;
    std::string summary_json() const;
};

SimResult run_simulation(const ExperimentConfig& cfg);

}  // namespace sesemi::sim

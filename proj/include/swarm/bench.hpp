#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swarm/client.hpp"
#include "swarm/server_node.hpp"

namespace swarm::bench {

/// Seconds to stream every parameter over the host link once, latency zero.
double offload_upper_bound(double params, int bits, double link_gbit_s);

/// How to launch one server.
struct ServerLaunch {
    std::optional<BlockRange> blocks;  // unset means auto placement with `span`
    int span = 0;
    float throughput = 0.0f;  // > 0 pins it
    transport::LinkShape shape;
    server::QuantizeMode quantize = server::QuantizeMode::None;
    bool rebalance = false;
    double rebalance_min_s = 5.0;
    double rebalance_max_s = 10.0;
    int64_t ttl_ms = registry::kDefaultTtlMs;
    int gossip_ms = registry::kDefaultGossipMs;
};

/// A running swarm that benches and churn scripts can drive.
class SwarmControl {
public:
    virtual ~SwarmControl() = default;
    virtual size_t start_server(const ServerLaunch& spec) = 0;
    virtual void kill_server(size_t i) = 0;
    /// Graceful stop with an offline announcement.
    virtual void stop_server(size_t i) = 0;
    virtual bool alive(size_t i) const = 0;
    virtual size_t size() const = 0;
    virtual std::string address(size_t i) const = 0;
    /// Addresses of every live server, usable as registries.
    std::vector<std::string> registries() const;
};

/// Servers as ServerNode objects inside this process.
class InProcessSwarm : public SwarmControl {
public:
    explicit InProcessSwarm(std::shared_ptr<const model::Checkpoint> ckpt, bool background = false);
    ~InProcessSwarm() override;
    size_t start_server(const ServerLaunch& spec) override;
    void kill_server(size_t i) override;
    void stop_server(size_t i) override;
    bool alive(size_t i) const override;
    size_t size() const override { return nodes_.size(); }
    std::string address(size_t i) const override;
    server::ServerNode& node(size_t i) { return *nodes_.at(i); }
    /// One gossip round on every live server.
    void sync();

private:
    std::shared_ptr<const model::Checkpoint> ckpt_;
    bool background_;
    std::deque<std::unique_ptr<server::ServerNode>> nodes_;
    std::vector<std::string> addresses_;
};

/// Servers as child processes of `exe server ...`; each prints "READY <address>" once serving.
class ProcessSwarm : public SwarmControl {
public:
    ProcessSwarm(std::string exe, std::string checkpoint_path);
    ~ProcessSwarm() override;
    size_t start_server(const ServerLaunch& spec) override;
    void kill_server(size_t i) override;
    void stop_server(size_t i) override;
    bool alive(size_t i) const override;
    size_t size() const override { return procs_.size(); }
    std::string address(size_t i) const override { return procs_.at(i).address; }

private:
    struct Proc {
        int pid = -1;
        std::string address;
        bool alive = false;
    };
    std::string exe_, checkpoint_;
    std::vector<Proc> procs_;
};

/// Mean seconds per single-token inference step over `steps` steps. The
/// session is first prefilled with `context` rows (at least one).
double time_inference_step(client::SwarmClient& client, const model::Checkpoint& ckpt, size_t steps,
                           transport::Encoding enc = transport::Encoding::F32, size_t context = 1);
/// Tokens per second of one distributed forward over [batch x seq_len].
double parallel_forward_tokens_per_s(client::SwarmClient& client, const model::Checkpoint& ckpt, size_t batch,
                                     size_t seq_len);

struct Concurrency {
    double solo_step_s = 0.0;
    std::vector<double> client_step_s;
    std::vector<double> slowdown;  // client_step_s / solo_step_s - 1
    double mean_slowdown = 0.0;
};
/// Solo step time, then the same run by `n_clients` clients at once, each with its own connections.
Concurrency measure_concurrency(const client::ClientConfig& cfg, const model::Checkpoint& ckpt, size_t n_clients,
                                size_t steps);

struct BenchReport {
    std::string scenario;
    nlohmann::json config;
    double single_batch_steps_per_s = 0.0;
    double parallel_forward_tokens_per_s = 0.0;
    std::vector<double> client_slowdown;
    double mean_slowdown = 0.0;
};
void to_json(nlohmann::json& j, const BenchReport& r);

struct BenchOptions {
    size_t seq_len = 32;      // inference steps per run
    size_t n_clients = 1;
    size_t runs = 3;          // median over runs
    size_t forward_batch = 0;  // 0 skips the parallel forward
    size_t forward_seq = 128;
    transport::LinkShape client_shape;
};
BenchReport bench_inference(const std::string& scenario, const std::vector<std::string>& registries,
                            const model::Checkpoint& ckpt, const BenchOptions& opts);

/// One row of the shaping matrix.
struct ShapeRow {
    std::string name;
    transport::LinkShape shape;
};
/// Table of single-batch steps/s and batch forward tokens/s per shaping row,
/// seq x batch grid; sequence lengths are capped at max_seq.
struct BenchTable {
    std::vector<std::string> rows;
    std::vector<size_t> seq_lens;
    std::vector<size_t> batches;
    // cells[row][seq][batch]: steps/s for batch 1, tokens/s otherwise
    std::vector<std::vector<std::vector<double>>> cells;
    nlohmann::json to_json() const;
    std::string format() const;
};
/// `launch(shape)` builds a fresh swarm for a row and returns its registries.
BenchTable bench_table(const std::vector<ShapeRow>& rows, const model::Checkpoint& ckpt,
                       const std::function<std::vector<std::string>(const transport::LinkShape&)>& launch,
                       size_t steps = 16, std::vector<size_t> seq_lens = {128, 2048},
                       std::vector<size_t> batches = {1, 64});

struct ChurnEvent {
    int64_t t_ms = 0;
    enum class Kind { Kill, Stop, Start, Partition, Heal } kind = Kind::Kill;
    size_t server = 0;  // Kill, Stop, Partition, Heal
    ServerLaunch launch;  // Start
};
struct ChurnScenario {
    std::vector<ServerLaunch> initial;
    std::vector<ChurnEvent> events;
    int64_t duration_ms = 10000;
    uint64_t seed = 0;
    size_t tokens_per_session = 32;
    double poll_ms = 100.0;
};
/// Throws InputError when the script is malformed or events are out of order.
ChurnScenario parse_churn_scenario(const nlohmann::json& j);

struct ChurnMetrics {
    uint64_t sessions = 0;
    uint64_t failed_sessions = 0;
    uint64_t mismatched_sessions = 0;  // completed but differing from the local oracle
    uint64_t recoveries = 0;
    uint64_t events = 0;
    uint64_t rebalances = 0;  // range changes seen in the registry
    std::vector<double> recover_s;      // step latency of steps that needed a recovery
    std::vector<double> gap_durations_s;  // closed coverage gaps
    bool gap_open_at_end = false;
    std::vector<std::string> log;
};
void to_json(nlohmann::json& j, const ChurnMetrics& m);
/// Runs the script against `swarm` while one client generates continuously.
ChurnMetrics churn_sim(const ChurnScenario& sc, SwarmControl& swarm, const model::Checkpoint& ckpt);

}  // namespace swarm::bench

#pragma once

#include <atomic>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "swarm/model.hpp"
#include "swarm/protocol.hpp"
#include "swarm/registry_node.hpp"
#include "swarm/transport/rpc.hpp"

namespace swarm::server {

enum class QuantizeMode { None, Activations, Weights, Both };
QuantizeMode parse_quantize(const std::string& s);
std::string to_string(QuantizeMode m);

struct ServerConfig {
    std::string host = "127.0.0.1";
    uint16_t port = 0;
    std::optional<BlockRange> blocks;  // explicit range; unset means auto placement
    int span = 0;                      // auto placement span, 0 = whole model
    QuantizeMode quantize = QuantizeMode::None;
    std::vector<std::string> bootstrap;
    transport::LinkShape shape;
    size_t capacity = 64;               // concurrent sessions
    uint64_t cache_budget_tokens = 65536;
    double idle_timeout_s = 120.0;
    double tape_ttl_s = 60.0;
    int64_t ttl_ms = registry::kDefaultTtlMs;
    int gossip_ms = registry::kDefaultGossipMs;
    bool rebalance = true;
    double rebalance_min_s = 5.0;
    double rebalance_max_s = 10.0;
    float eps = 0.2f;
    double remeasure_s = 60.0;
    float throughput = 0.0f;  // > 0 pins the announced throughput instead of measuring
    size_t workers = 4;
    bool background = true;   // run announce / gossip / rebalance loops
};

/// A server hosting a contiguous range of blocks.
class ServerNode {
public:
    ServerNode(std::shared_ptr<const model::Checkpoint> ckpt, ServerConfig cfg);
    ~ServerNode();
    ServerNode(const ServerNode&) = delete;
    ServerNode& operator=(const ServerNode&) = delete;

    /// Binds, picks and loads blocks, measures throughput, announces
    /// joining then online and starts the background loops.
    void start();
    /// Announces an offline tombstone, then stops.
    void shutdown();
    /// Stops abruptly without telling anyone.
    void kill();

    std::string address() const;
    BlockRange range() const;
    registry::ServerId id() const { return id_; }
    std::string id_hex() const { return registry::to_hex(id_); }
    float throughput() const { return throughput_.load(); }
    registry::Registry& registry() { return reg_; }
    uint64_t weights_hash() const;
    size_t session_count() const;
    protocol::ServerInfo info() const;
    bool running() const { return running_.load(); }

    /// Compute term from timing 100 single-token steps over `span` blocks,
    /// combined with the link's network term.
    float measure_throughput(int span);
    void announce(registry::ServerState state);
    void gossip_once() { gossip_.round(); }
    /// One rebalancing check; returns the new range if the server moved.
    std::optional<BlockRange> rebalance_once();
    /// Moves to [start, start + span).
    void move_to(int start);
    /// Drops idle sessions and expired tapes.
    void janitor(double now);

private:
    struct Slot {
        std::mutex mu;
        BlockRange blocks;
        std::vector<model::KvCache> kv;
        uint32_t position = 0;
        uint32_t max_len = 0;
        uint32_t version = 0;
        double last_active = 0.0;
        bool has_last = false;
        uint32_t last_start = 0;
        uint64_t last_input_hash = 0;
        std::vector<uint8_t> last_reply;
    };
    struct Tape {
        double created = 0.0;
        BlockRange blocks;
        uint32_t version = 0;
        std::vector<std::vector<model::ActivationTape>> items;  // [batch][block]
    };

    std::vector<uint8_t> on_open(std::span<const uint8_t> p);
    std::vector<uint8_t> on_step(std::span<const uint8_t> p);
    std::vector<uint8_t> on_close(std::span<const uint8_t> p);
    std::vector<uint8_t> on_forward(std::span<const uint8_t> p);
    std::vector<uint8_t> on_backward(std::span<const uint8_t> p);
    std::vector<uint8_t> on_info(std::span<const uint8_t> p);

    void load_blocks(BlockRange r);
    std::vector<model::BlockWeights> make_blocks(BlockRange r) const;
    void enforce_cache_budget(const protocol::SessionId& keep);
    void drop_all_sessions();
    BlockRange choose_auto_range(int span, float tp);
    std::vector<std::string> peer_list();
    void maintenance_loop();
    int span() const;

    std::shared_ptr<const model::Checkpoint> ckpt_;
    ServerConfig cfg_;
    registry::ServerId id_;
    registry::Registry reg_;
    transport::RpcPool pool_;
    registry::GossipLoop gossip_;

    mutable std::shared_mutex blocks_mu_;
    BlockRange range_;
    std::vector<model::BlockWeights> blocks_;
    uint32_t version_ = 0;

    mutable std::mutex sessions_mu_;
    std::map<protocol::SessionId, std::shared_ptr<Slot>> sessions_;
    std::set<protocol::SessionId> evicted_;

    std::mutex tapes_mu_;
    std::map<uint64_t, Tape> tapes_;
    uint64_t next_tape_ = 1;

    std::atomic<float> throughput_{0.0f};
    std::mutex announce_mu_;
    int64_t last_announced_at_ = 0;
    std::atomic<bool> running_{false};

    std::mutex loop_mu_;
    std::condition_variable loop_cv_;
    bool loop_stop_ = false;
    std::thread loop_;

    std::unique_ptr<transport::RpcServer> rpc_;
};

}  // namespace swarm::server

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "swarm/model.hpp"
#include "swarm/protocol.hpp"
#include "swarm/registry.hpp"
#include "swarm/transport/rpc.hpp"

namespace swarm::client {

using registry::ServerEntry;
using registry::ServerId;

/// Round-trip times in milliseconds keyed by server.
using RttMap = std::map<ServerId, double>;

/// Median of `attempts` PINGs per server, at most 16 in flight. Unreachable
/// servers are left out.
RttMap ping_servers(transport::RpcPool& pool, const std::vector<ServerEntry>& entries, int attempts = 3,
                    int deadline_ms = 2000);

struct HopPlan {
    ServerEntry server;
    BlockRange blocks;
    float est_rtt_ms = 0.0f;
    float est_cost_s = 0.0f;  // cumulative chain cost up to and including this hop
};

/// Seconds to carry `payload_bytes` across one hop and run `blocks` there.
double hop_cost(const ServerEntry& s, int blocks, double payload_bytes);
/// Estimated time of a whole chain, client to client.
double chain_cost(const std::vector<HopPlan>& chain, const RttMap& rtts, double payload_bytes);

/// Beam search over (next_block, last_server). Each server containing the next
/// block may take it up to the end of its range (capped at need.end). Exact
/// when beam_width >= number of usable servers. Only online servers with a
/// known rtt are used. Throws NoRouteError listing uncovered blocks.
std::vector<HopPlan> plan_chain(const std::vector<ServerEntry>& entries, const RttMap& rtts, BlockRange need,
                                double payload_bytes, int beam_width = 8);

/// Rows per server proportional to throughput, remainder handed out one by one in order.
std::vector<size_t> split_batch(size_t batch, const std::vector<float>& throughputs);

struct ClientConfig {
    std::vector<std::string> registries;
    transport::LinkShape shape;
    int beam_width = 8;
    int rpc_deadline_ms = 30000;
    int connect_timeout_ms = 2000;
};

/// Shared client state: registry lookups, cached pings and a connection pool.
class SwarmClient {
public:
    explicit SwarmClient(ClientConfig cfg);

    /// Online entries from the first registry that answers.
    std::vector<ServerEntry> lookup_all();
    /// Pings entries that have no cached rtt yet; forget() drops a cached value.
    RttMap rtts_for(const std::vector<ServerEntry>& entries);
    void forget(const ServerId& id);
    std::vector<HopPlan> plan(BlockRange need, double payload_bytes, const std::set<ServerId>& banned);
    /// Entries seen by the most recent lookup.
    std::vector<ServerEntry> last_entries();
    std::vector<uint8_t> call(const std::string& address, transport::MsgType type, std::span<const uint8_t> payload);

    transport::RpcPool& pool() { return pool_; }
    const ClientConfig& config() const { return cfg_; }

private:
    ClientConfig cfg_;
    transport::RpcPool pool_;
    std::mutex mu_;
    RttMap rtt_cache_;
    std::vector<ServerEntry> last_entries_;
};

struct SessionConfig {
    uint32_t max_len = 0;
    transport::Encoding encoding = transport::Encoding::F32;
    std::vector<double> backoff_s = {1.0, 2.0, 4.0};
};

/// Stateful generation context over a chain of servers. Each hop keeps an
/// fp32 log of every input it has processed so a replacement can rebuild the
/// attention caches.
class InferenceSession {
public:
    InferenceSession(SwarmClient& client, uint32_t n_blocks, uint32_t hidden, SessionConfig cfg);
    ~InferenceSession();
    InferenceSession(const InferenceSession&) = delete;
    InferenceSession& operator=(const InferenceSession&) = delete;

    /// Feeds [t x d] rows at the current position through every hop.
    Tensor step(const Tensor& hidden);
    void close();

    uint32_t position() const { return position_; }
    std::vector<HopPlan> chain() const;
    uint64_t recoveries() const { return recoveries_; }
    uint64_t wire_bytes() const { return wire_bytes_; }

private:
    struct Hop {
        HopPlan plan;
        protocol::SessionId id{};
        std::vector<Tensor> log;  // inputs in position order
    };

    Tensor send_step(Hop& hop, uint32_t start, const Tensor& x);
    /// Plans and opens hops for `need`, replaying `replay` (rows 0..position) through them.
    std::vector<Hop> build_hops(BlockRange need, const Tensor& replay);
    void recover(size_t failed);
    void close_hop(const Hop& hop);

    SwarmClient& client_;
    uint32_t n_blocks_;
    uint32_t hidden_;
    SessionConfig cfg_;
    std::vector<Hop> hops_;
    std::set<ServerId> banned_;
    uint32_t position_ = 0;
    uint64_t recoveries_ = 0;
    uint64_t wire_bytes_ = 0;
    bool closed_ = false;
};

struct GenerateResult {
    std::vector<int> tokens;  // new tokens only
    uint64_t recoveries = 0;
    uint64_t wire_bytes = 0;
    std::vector<HopPlan> chain;  // chain at the end of generation
};

/// Greedy or sampled generation with local embeddings and head. `on_token`
/// sees each new token with its index as soon as it is sampled.
GenerateResult generate(SwarmClient& client, const model::Checkpoint& ckpt, std::span<const int> prompt,
                        size_t n_new, const model::Sampling& sampling = model::Sampling::greedy(), uint64_t seed = 0,
                        transport::Encoding enc = transport::Encoding::F32,
                        const std::function<void(size_t, int)>& on_token = {});

/// Handle for one distributed forward pass: per stage, which rows went where.
struct ForwardHandle {
    struct Part {
        ServerEntry server;
        size_t row_begin = 0, row_end = 0;  // batch rows
        uint64_t tape_id = 0;
        Tensor input;  // [rows x t x d], kept for a re-forward
    };
    struct Stage {
        BlockRange blocks;
        std::vector<Part> parts;
    };
    std::vector<Stage> stages;
    std::vector<uint32_t> shape;
};

struct TrainOptions {
    bool split = true;  // spread each stage's batch over every server holding the same blocks
    transport::Encoding encoding = transport::Encoding::F32;
};

/// Runs [B x t x d] through the chain with tapes kept on the servers.
Tensor distributed_forward(SwarmClient& client, const std::vector<HopPlan>& chain, const Tensor& batch,
                           ForwardHandle& handle, const TrainOptions& opts = {});
/// Gradient w.r.t. the batch given the gradient w.r.t. the output. Expired
/// tapes are re-forwarded once.
Tensor distributed_backward(SwarmClient& client, ForwardHandle& handle, const Tensor& grad);

struct PromptTuneConfig {
    uint32_t pre_seq_len = 4;
    uint32_t n_classes = 2;
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float adam_eps = 1e-8f;
    uint64_t seed = 1;
};

struct PromptGrads {
    Tensor prompts;  // [p x d]
    Tensor head;     // [d x C]
    std::vector<float> bias;
};

/// Client-owned soft prompts and classification head over a frozen remote chain.
class PromptTuner {
public:
    PromptTuner(SwarmClient& client, std::shared_ptr<const model::Checkpoint> ckpt, PromptTuneConfig cfg,
                TrainOptions opts = {});

    /// Mean cross-entropy and, when `grads` is set, its gradient.
    float loss(const std::vector<std::vector<int>>& tokens, const std::vector<int>& labels,
               PromptGrads* grads = nullptr);
    /// One Adam step on prompts and head; returns the loss before the update.
    float train_step(const std::vector<std::vector<int>>& tokens, const std::vector<int>& labels);
    /// Predicted class per example.
    std::vector<int> predict(const std::vector<std::vector<int>>& tokens);

    Tensor& prompts() { return prompts_; }
    Tensor& head() { return head_; }
    std::vector<float>& bias() { return bias_; }
    uint64_t steps() const { return step_; }
    const PromptTuneConfig& config() const { return cfg_; }

    /// "PTAD" file: config header then prompts, head, bias and Adam moments as f32.
    void save(const std::filesystem::path& path) const;
    void load(const std::filesystem::path& path);

private:
    Tensor logits_for(const std::vector<std::vector<int>>& tokens, ForwardHandle* handle, Tensor* pooled,
                      model::LayerNormCache* ln, Tensor* chain_out);
    const std::vector<HopPlan>& chain();

    SwarmClient& client_;
    std::shared_ptr<const model::Checkpoint> ckpt_;
    PromptTuneConfig cfg_;
    TrainOptions opts_;
    Tensor prompts_, head_;
    std::vector<float> bias_;
    std::vector<float> m_, v_;
    uint64_t step_ = 0;
    std::vector<HopPlan> chain_;
};

}  // namespace swarm::client

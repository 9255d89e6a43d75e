#include "swarm/server_node.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <spdlog/spdlog.h>

namespace swarm::server {

using transport::Encoding;
using transport::ErrorCode;
using transport::MsgType;
using transport::RemoteError;

QuantizeMode parse_quantize(const std::string& s) {
    if (s == "none") return QuantizeMode::None;
    if (s == "activations") return QuantizeMode::Activations;
    if (s == "weights") return QuantizeMode::Weights;
    if (s == "both") return QuantizeMode::Both;
    throw InputError("quantize must be none|activations|weights|both, got '" + s + "'");
}

std::string to_string(QuantizeMode m) {
    switch (m) {
        case QuantizeMode::None: return "none";
        case QuantizeMode::Activations: return "activations";
        case QuantizeMode::Weights: return "weights";
        case QuantizeMode::Both: return "both";
    }
    return "none";
}

namespace {

uint64_t fnv1a(std::span<const uint8_t> bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

Encoding peek_encoding(std::span<const uint8_t> p, size_t offset) {
    if (p.size() <= offset) throw ProtocolError("truncated message");
    return Encoding(p[offset]);
}

}  // namespace

ServerNode::ServerNode(std::shared_ptr<const model::Checkpoint> ckpt, ServerConfig cfg)
    : ckpt_(std::move(ckpt)),
      cfg_(std::move(cfg)),
      id_(registry::random_server_id()),
      reg_(ckpt_ ? int(ckpt_->config.n_layers) : 0),
      pool_(cfg_.shape, 1000),
      gossip_(reg_, pool_, [this] { return peer_list(); }, cfg_.gossip_ms) {
    if (!ckpt_) throw InputError("server needs a checkpoint");
    const int L = int(ckpt_->config.n_layers);
    if (cfg_.blocks && !cfg_.blocks->valid(L)) throw InputError("block range " + cfg_.blocks->str() + " outside model");
    if (cfg_.span < 0 || cfg_.span > L) throw InputError("span must be in [1, L]");
    if (cfg_.cache_budget_tokens < ckpt_->config.max_seq) throw InputError("cache budget must be at least max_seq");
    if (cfg_.capacity == 0) throw InputError("capacity must be positive");
    std::mt19937_64 rng{std::random_device{}()};
    next_tape_ = (rng() & 0xffffffffull) << 20;
}

ServerNode::~ServerNode() { kill(); }

int ServerNode::span() const {
    if (cfg_.blocks) return cfg_.blocks->size();
    return cfg_.span > 0 ? cfg_.span : int(ckpt_->config.n_layers);
}

void ServerNode::start() {
    rpc_ = std::make_unique<transport::RpcServer>(cfg_.shape, cfg_.workers);
    rpc_->on(MsgType::OpenSession, [this](auto p) { return on_open(p); });
    rpc_->on(MsgType::Step, [this](auto p) { return on_step(p); });
    rpc_->on(MsgType::CloseSession, [this](auto p) { return on_close(p); });
    rpc_->on(MsgType::Forward, [this](auto p) { return on_forward(p); });
    rpc_->on(MsgType::Backward, [this](auto p) { return on_backward(p); });
    rpc_->on(MsgType::Info, [this](auto p) { return on_info(p); });
    registry::serve_registry(*rpc_, reg_);
    rpc_->start(cfg_.host, cfg_.port);

    const int k = span();
    const float tp = cfg_.throughput > 0.0f ? cfg_.throughput : measure_throughput(k);
    throughput_ = tp;
    const BlockRange r = cfg_.blocks ? *cfg_.blocks : choose_auto_range(k, tp);
    load_blocks(r);
    running_ = true;
    announce(registry::ServerState::Joining);
    announce(registry::ServerState::Online);
    spdlog::info("server {} at {} serving blocks {} ({:.1f} tok/s)", id_hex().substr(0, 8), address(), r.str(), tp);

    if (cfg_.background) {
        gossip_.start();
        {
            std::lock_guard lock(loop_mu_);
            loop_stop_ = false;
        }
        loop_ = std::thread([this] { maintenance_loop(); });
    }
}

void ServerNode::shutdown() {
    if (!running_) return;
    announce(registry::ServerState::Offline);
    kill();
}

void ServerNode::kill() {
    running_ = false;
    {
        std::lock_guard lock(loop_mu_);
        loop_stop_ = true;
    }
    loop_cv_.notify_all();
    if (loop_.joinable()) loop_.join();
    gossip_.stop();
    if (rpc_) rpc_->stop();
}

std::string ServerNode::address() const { return rpc_ ? rpc_->address() : std::string(); }

BlockRange ServerNode::range() const {
    std::shared_lock lock(blocks_mu_);
    return range_;
}

uint64_t ServerNode::weights_hash() const {
    std::shared_lock lock(blocks_mu_);
    return model::weights_hash(blocks_);
}

size_t ServerNode::session_count() const {
    std::lock_guard lock(sessions_mu_);
    return sessions_.size();
}

protocol::ServerInfo ServerNode::info() const {
    protocol::ServerInfo i;
    i.server_id = id_hex();
    i.address = address();
    {
        std::shared_lock lock(blocks_mu_);
        i.range = range_;
        i.version = version_;
        i.weights_hash = model::weights_hash(blocks_);
    }
    i.throughput = throughput_;
    i.position_capacity = ckpt_->config.max_seq;
    i.sessions = session_count();
    i.quantize = to_string(cfg_.quantize);
    return i;
}

std::vector<model::BlockWeights> ServerNode::make_blocks(BlockRange r) const {
    std::vector<model::BlockWeights> out;
    const bool q = cfg_.quantize == QuantizeMode::Weights || cfg_.quantize == QuantizeMode::Both;
    for (int b = r.start; b < r.end; ++b)
        out.push_back(q ? model::quantize_block(ckpt_->blocks[size_t(b)]) : ckpt_->blocks[size_t(b)]);
    return out;
}

void ServerNode::load_blocks(BlockRange r) {
    auto blocks = make_blocks(r);
    std::unique_lock lock(blocks_mu_);
    range_ = r;
    blocks_ = std::move(blocks);
    ++version_;
}

float ServerNode::measure_throughput(int k) {
    const auto& cfg = ckpt_->config;
    const auto blocks = make_blocks({0, k});
    std::vector<model::KvCache> caches(blocks.size());
    Tensor x = Tensor::matrix(1, cfg.hidden);
    SplitMix64 rng(7);
    for (float& v : x.data) v = rng.uniform(-1.0, 1.0);
    constexpr int kSteps = 100;
    uint32_t pos = 0;
    const double t0 = monotonic_seconds();
    for (int s = 0; s < kSteps; ++s) {
        if (pos >= cfg.max_seq) {
            for (auto& c : caches) c.clear();
            pos = 0;
        }
        Tensor h = x;
        for (size_t i = 0; i < blocks.size(); ++i) h = model::block_forward(blocks[i], cfg, h, caches[i], pos, false).hidden;
        ++pos;
    }
    const double elapsed = std::max(monotonic_seconds() - t0, 1e-9);
    const float compute = float(kSteps / elapsed);
    const bool int8 = cfg_.quantize == QuantizeMode::Activations || cfg_.quantize == QuantizeMode::Both;
    const float bytes_per_token =
        int8 ? float(cfg.hidden + 4 * ((cfg.hidden + quant::kDefaultBlockSize - 1) / quant::kDefaultBlockSize))
             : float(4 * cfg.hidden);
    const float net = float(cfg_.shape.bandwidth_bps / 8.0);
    return allocation::server_throughput(compute, net, bytes_per_token);
}

BlockRange ServerNode::choose_auto_range(int k, float tp) {
    for (const auto& addr : cfg_.bootstrap) {
        try {
            registry::RegistrySnapshot remote;
            for (const auto& e : registry::lookup_all(pool_, addr)) remote.entries[e.server_id] = e;
            reg_.merge_from(remote);
            break;
        } catch (const Error& e) {
            spdlog::warn("bootstrap {} unreachable: {}", addr, e.what());
        }
    }
    auto entries = reg_.live_entries(unix_millis());
    std::erase_if(entries, [&](const auto& e) { return e.server_id == id_; });
    const auto view = registry::swarm_view(entries, int(ckpt_->config.n_layers));
    const int start = allocation::choose_interval(allocation::block_throughputs(view), k, tp);
    return {start, start + k};
}

std::vector<std::string> ServerNode::peer_list() {
    std::vector<std::string> out;
    const std::string self = address();
    auto add = [&](const std::string& a) {
        if (!a.empty() && a != self && std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
    };
    for (const auto& b : cfg_.bootstrap) add(b);
    for (const auto& e : reg_.live_entries(unix_millis()))
        if (e.state != registry::ServerState::Offline) add(e.address);
    return out;
}

void ServerNode::announce(registry::ServerState state) {
    registry::ServerEntry e;
    e.server_id = id_;
    e.address = address();
    e.range = range();
    e.throughput = throughput_;
    e.bandwidth_bps = std::isinf(cfg_.shape.bandwidth_bps) ? 0.0 : cfg_.shape.bandwidth_bps;
    e.ttl_ms = cfg_.ttl_ms;
    e.state = state;
    {
        std::lock_guard lock(announce_mu_);
        e.announced_at = std::max(unix_millis(), last_announced_at_ + 1);
        last_announced_at_ = e.announced_at;
    }
    reg_.announce(e);
    for (const auto& peer : peer_list()) {
        try {
            registry::announce_to(pool_, peer, e, 1000);
        } catch (const Error& err) {
            spdlog::debug("announce to {} failed: {}", peer, err.what());
        }
    }
}

std::optional<BlockRange> ServerNode::rebalance_once() {
    const auto view = registry::swarm_view(reg_.live_entries(unix_millis()), int(ckpt_->config.n_layers));
    const auto target = allocation::should_rebalance(view, id_hex(), cfg_.eps);
    if (!target) return std::nullopt;
    move_to(*target);
    return range();
}

void ServerNode::move_to(int start) {
    const BlockRange old = range();
    const BlockRange next{start, start + old.size()};
    if (!next.valid(int(ckpt_->config.n_layers))) throw InputError("move target " + next.str() + " outside model");
    spdlog::info("server {} rebalancing {} -> {}", id_hex().substr(0, 8), old.str(), next.str());
    announce(registry::ServerState::Offline);
    drop_all_sessions();
    load_blocks(next);
    announce(registry::ServerState::Online);
}

void ServerNode::drop_all_sessions() {
    std::lock_guard lock(sessions_mu_);
    for (const auto& [id, _] : sessions_) evicted_.insert(id);
    sessions_.clear();
    std::lock_guard tl(tapes_mu_);
    tapes_.clear();
}

void ServerNode::janitor(double now) {
    {
        std::lock_guard lock(sessions_mu_);
        for (auto it = sessions_.begin(); it != sessions_.end();) {
            if (now - it->second->last_active > cfg_.idle_timeout_s) {
                evicted_.insert(it->first);
                it = sessions_.erase(it);
            } else {
                ++it;
            }
        }
        if (evicted_.size() > 4096) evicted_.clear();
    }
    std::lock_guard lock(tapes_mu_);
    std::erase_if(tapes_, [&](const auto& kv) { return now - kv.second.created > cfg_.tape_ttl_s; });
}

void ServerNode::maintenance_loop() {
    std::mt19937_64 rng(std::hash<std::string>{}(id_hex()));
    std::uniform_real_distribution<double> jitter(cfg_.rebalance_min_s, std::max(cfg_.rebalance_min_s, cfg_.rebalance_max_s));
    double now = monotonic_seconds();
    double next_announce = now + double(cfg_.ttl_ms) / 3000.0;
    double next_rebalance = now + jitter(rng);
    double next_janitor = now + 1.0;
    double next_measure = now + cfg_.remeasure_s;
    std::unique_lock lock(loop_mu_);
    while (!loop_cv_.wait_for(lock, std::chrono::milliseconds(50), [&] { return loop_stop_; })) {
        lock.unlock();
        now = monotonic_seconds();
        try {
            if (now >= next_janitor) {
                janitor(now);
                next_janitor = now + 1.0;
            }
            if (cfg_.throughput <= 0.0f && now >= next_measure) {
                throughput_ = measure_throughput(range().size());
                next_measure = now + cfg_.remeasure_s;
                next_announce = now;
            }
            if (now >= next_announce) {
                announce(registry::ServerState::Online);
                next_announce = now + double(cfg_.ttl_ms) / 3000.0;
            }
            if (cfg_.rebalance && now >= next_rebalance) {
                rebalance_once();
                next_rebalance = monotonic_seconds() + jitter(rng);
            }
        } catch (const std::exception& e) {
            spdlog::warn("server maintenance: {}", e.what());
        }
        lock.lock();
    }
}

std::vector<uint8_t> ServerNode::on_open(std::span<const uint8_t> p) {
    const auto m = protocol::decode_open_session(p);
    if (m.max_len == 0 || m.max_len > ckpt_->config.max_seq)
        throw RemoteError(ErrorCode::BadRequest, "max_len must be in [1, max_seq]");
    auto slot = std::make_shared<Slot>();
    {
        std::shared_lock lock(blocks_mu_);
        if (!range_.covers(m.blocks))
            throw RemoteError(ErrorCode::WrongRange, "blocks " + m.blocks.str() + " not within " + range_.str());
        slot->version = version_;
    }
    slot->blocks = m.blocks;
    slot->kv.resize(size_t(m.blocks.size()));
    slot->max_len = m.max_len;
    slot->last_active = monotonic_seconds();
    std::lock_guard lock(sessions_mu_);
    if (sessions_.contains(m.session_id)) throw RemoteError(ErrorCode::DuplicateSession, "session id already open");
    if (sessions_.size() >= cfg_.capacity) throw RemoteError(ErrorCode::Busy, "session capacity exhausted");
    evicted_.erase(m.session_id);
    sessions_.emplace(m.session_id, std::move(slot));
    return {};
}

std::vector<uint8_t> ServerNode::on_step(std::span<const uint8_t> p) {
    const Encoding req_enc = peek_encoding(p, 20);
    const auto m = protocol::decode_step(p);
    std::shared_ptr<Slot> slot;
    {
        std::lock_guard lock(sessions_mu_);
        auto it = sessions_.find(m.session_id);
        if (it == sessions_.end()) {
            if (evicted_.contains(m.session_id)) throw RemoteError(ErrorCode::Desync, "session was evicted");
            throw RemoteError(ErrorCode::UnknownSession, "unknown session");
        }
        slot = it->second;
    }
    const auto& cfg = ckpt_->config;
    const Tensor& h = m.hidden;
    if (h.shape.size() != 2 || h.cols() != cfg.hidden || h.rows() == 0)
        throw RemoteError(ErrorCode::BadRequest, "step hidden must be [t x d]");
    const uint32_t t = uint32_t(h.rows());
    const uint64_t input_hash = fnv1a(p.subspan(20));

    std::vector<uint8_t> reply;
    {
        std::lock_guard sl(slot->mu);
        slot->last_active = monotonic_seconds();
        if (m.start_pos != slot->position) {
            if (slot->has_last && m.start_pos == slot->last_start && m.start_pos + t == slot->position &&
                input_hash == slot->last_input_hash)
                return slot->last_reply;
            throw RemoteError(ErrorCode::Desync, "start_pos " + std::to_string(m.start_pos) + " but session is at " +
                                                     std::to_string(slot->position));
        }
        if (slot->position + t > slot->max_len) throw RemoteError(ErrorCode::Capacity, "session max_len exceeded");
        Tensor x = h;
        {
            std::shared_lock bl(blocks_mu_);
            if (slot->version != version_) throw RemoteError(ErrorCode::Desync, "server moved to other blocks");
            for (int b = slot->blocks.start; b < slot->blocks.end; ++b)
                x = model::block_forward(blocks_[size_t(b - range_.start)], cfg, x,
                                         slot->kv[size_t(b - slot->blocks.start)], m.start_pos, false)
                        .hidden;
        }
        const bool int8 = cfg_.quantize == QuantizeMode::Activations || cfg_.quantize == QuantizeMode::Both;
        reply = transport::encode_tensor(x, int8 ? Encoding::Int8 : req_enc);
        slot->position += t;
        slot->has_last = true;
        slot->last_start = m.start_pos;
        slot->last_input_hash = input_hash;
        slot->last_reply = reply;
    }
    enforce_cache_budget(m.session_id);
    return reply;
}

void ServerNode::enforce_cache_budget(const protocol::SessionId& keep) {
    std::lock_guard lock(sessions_mu_);
    auto used = [&] {
        uint64_t total = 0;
        for (const auto& [_, s] : sessions_) total += s->kv.empty() ? 0 : s->kv.front().length();
        return total;
    };
    while (used() > cfg_.cache_budget_tokens) {
        auto victim = sessions_.end();
        for (auto it = sessions_.begin(); it != sessions_.end(); ++it)
            if (it->first != keep && (victim == sessions_.end() || it->second->last_active < victim->second->last_active))
                victim = it;
        if (victim == sessions_.end()) break;
        spdlog::info("evicting session to stay within the cache budget");
        evicted_.insert(victim->first);
        sessions_.erase(victim);
    }
}

std::vector<uint8_t> ServerNode::on_close(std::span<const uint8_t> p) {
    const auto id = protocol::decode_close(p);
    std::lock_guard lock(sessions_mu_);
    sessions_.erase(id);
    return {};
}

std::vector<uint8_t> ServerNode::on_forward(std::span<const uint8_t> p) {
    const Encoding req_enc = peek_encoding(p, 8);
    auto m = protocol::decode_forward(p);
    const auto& cfg = ckpt_->config;
    Tensor& h = m.hidden;
    if (h.shape.size() == 2) h.shape.insert(h.shape.begin(), 1u);
    if (h.shape.size() != 3 || h.shape[2] != cfg.hidden || h.shape[1] == 0)
        throw RemoteError(ErrorCode::BadRequest, "forward hidden must be [B x t x d]");
    if (h.shape[1] > cfg.max_seq) throw RemoteError(ErrorCode::Capacity, "sequence exceeds max_seq");
    const size_t B = h.shape[0], t = h.shape[1], d = cfg.hidden;

    Tape tape;
    tape.created = monotonic_seconds();
    tape.blocks = m.blocks;
    tape.items.resize(B);
    Tensor out = Tensor::zeros(h.shape);
    {
        std::shared_lock bl(blocks_mu_);
        if (!range_.covers(m.blocks))
            throw RemoteError(ErrorCode::WrongRange, "blocks " + m.blocks.str() + " not within " + range_.str());
        tape.version = version_;
        for (size_t b = 0; b < B; ++b) {
            Tensor x({uint32_t(t), uint32_t(d)}, std::vector<float>(h.data.begin() + long(b * t * d),
                                                                    h.data.begin() + long((b + 1) * t * d)));
            for (int blk = m.blocks.start; blk < m.blocks.end; ++blk) {
                model::KvCache cache;
                auto r = model::block_forward(blocks_[size_t(blk - range_.start)], cfg, x, cache, 0, true);
                tape.items[b].push_back(std::move(*r.tape));
                x = std::move(r.hidden);
            }
            std::copy(x.data.begin(), x.data.end(), out.data.begin() + long(b * t * d));
        }
    }
    uint64_t tape_id;
    {
        std::lock_guard lock(tapes_mu_);
        tape_id = next_tape_++;
        tapes_.emplace(tape_id, std::move(tape));
    }
    const bool int8 = cfg_.quantize == QuantizeMode::Activations || cfg_.quantize == QuantizeMode::Both;
    return protocol::encode(protocol::ForwardReply{tape_id, std::move(out)}, int8 ? Encoding::Int8 : req_enc);
}

std::vector<uint8_t> ServerNode::on_backward(std::span<const uint8_t> p) {
    const Encoding req_enc = peek_encoding(p, 8);
    auto m = protocol::decode_backward(p);
    Tape tape;
    {
        std::lock_guard lock(tapes_mu_);
        auto it = tapes_.find(m.tape_id);
        if (it == tapes_.end()) throw RemoteError(ErrorCode::UnknownTape, "unknown or consumed tape");
        tape = std::move(it->second);
        tapes_.erase(it);
    }
    if (monotonic_seconds() - tape.created > cfg_.tape_ttl_s) throw RemoteError(ErrorCode::UnknownTape, "tape expired");
    const auto& cfg = ckpt_->config;
    Tensor& g = m.grad;
    if (g.shape.size() == 2) g.shape.insert(g.shape.begin(), 1u);
    const size_t B = tape.items.size();
    const size_t t = B ? tape.items[0][0].input.rows() : 0, d = cfg.hidden;
    if (g.shape != std::vector<uint32_t>{uint32_t(B), uint32_t(t), uint32_t(d)})
        throw RemoteError(ErrorCode::BadRequest, "gradient shape does not match the forward pass");
    Tensor out = Tensor::zeros(g.shape);
    {
        std::shared_lock bl(blocks_mu_);
        if (tape.version != version_) throw RemoteError(ErrorCode::UnknownTape, "server moved since the forward pass");
        for (size_t b = 0; b < B; ++b) {
            Tensor x({uint32_t(t), uint32_t(d)},
                     std::vector<float>(g.data.begin() + long(b * t * d), g.data.begin() + long((b + 1) * t * d)));
            for (int blk = tape.blocks.end - 1; blk >= tape.blocks.start; --blk)
                x = model::block_backward(blocks_[size_t(blk - range_.start)], cfg,
                                          tape.items[b][size_t(blk - tape.blocks.start)], x);
            std::copy(x.data.begin(), x.data.end(), out.data.begin() + long(b * t * d));
        }
    }
    return transport::encode_tensor(out, req_enc);
}

std::vector<uint8_t> ServerNode::on_info(std::span<const uint8_t>) {
    return registry::json_payload(info());
}

}  // namespace swarm::server

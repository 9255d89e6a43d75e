#include "swarm/registry_node.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

namespace swarm::registry {

using transport::MsgType;

std::vector<uint8_t> json_payload(const nlohmann::json& j) {
    const std::string s = j.dump();
    return {s.begin(), s.end()};
}

nlohmann::json parse_json_payload(std::span<const uint8_t> bytes) {
    try {
        return nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("bad JSON payload: ") + e.what());
    }
}

namespace {

template <typename T>
T json_as(const nlohmann::json& j) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("bad JSON payload: ") + e.what());
    }
}

}  // namespace

void serve_registry(transport::RpcServer& server, Registry& reg) {
    server.on(MsgType::Announce, [&reg](std::span<const uint8_t> p) {
        const bool stored = reg.announce(json_as<ServerEntry>(parse_json_payload(p)));
        return json_payload({{"stored", stored}});
    });
    server.on(MsgType::Lookup, [&reg](std::span<const uint8_t> p) {
        const auto q = parse_json_payload(p);
        const int64_t now = unix_millis();
        const auto entries = q.value("all", false)
                                 ? reg.live_entries(now)
                                 : reg.get_module_infos({q.value("start", 0), q.value("end", 0)}, now);
        return json_payload(entries);
    });
    server.on(MsgType::Gossip, [&reg](std::span<const uint8_t> p) {
        reg.merge_from(json_as<RegistrySnapshot>(parse_json_payload(p)));
        return json_payload(reg.snapshot());
    });
}

void announce_to(transport::RpcPool& pool, const std::string& address, const ServerEntry& e, int deadline_ms) {
    pool.call(address, MsgType::Announce, json_payload(e), deadline_ms);
}

std::vector<ServerEntry> lookup(transport::RpcPool& pool, const std::string& address, const BlockRange& range,
                                int deadline_ms) {
    const auto reply =
        pool.call(address, MsgType::Lookup, json_payload({{"start", range.start}, {"end", range.end}}), deadline_ms);
    return json_as<std::vector<ServerEntry>>(parse_json_payload(reply));
}

std::vector<ServerEntry> lookup_all(transport::RpcPool& pool, const std::string& address, int deadline_ms) {
    const auto reply = pool.call(address, MsgType::Lookup, json_payload({{"all", true}}), deadline_ms);
    return json_as<std::vector<ServerEntry>>(parse_json_payload(reply));
}

bool gossip_round(Registry& self, transport::RpcPool& pool, const std::string& peer, int deadline_ms) {
    try {
        const auto reply = pool.call(peer, MsgType::Gossip, json_payload(self.snapshot()), deadline_ms);
        self.merge_from(json_as<RegistrySnapshot>(parse_json_payload(reply)));
        return true;
    } catch (const Error& e) {
        spdlog::debug("gossip with {} failed: {}", peer, e.what());
        return false;
    }
}

GossipLoop::GossipLoop(Registry& reg, transport::RpcPool& pool, PeerFn peers, int period_ms)
    : reg_(reg), pool_(pool), peers_(std::move(peers)), period_ms_(period_ms) {}

GossipLoop::~GossipLoop() { stop(); }

void GossipLoop::start() {
    {
        std::lock_guard lock(mu_);
        stop_ = false;
    }
    thread_ = std::thread([this] {
        std::unique_lock lock(mu_);
        while (!cv_.wait_for(lock, std::chrono::milliseconds(period_ms_), [&] { return stop_; })) {
            lock.unlock();
            round();
            lock.lock();
        }
    });
}

void GossipLoop::stop() {
    {
        std::lock_guard lock(mu_);
        stop_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
}

void GossipLoop::round() {
    for (const auto& peer : peers_()) gossip_round(reg_, pool_, peer, std::max(period_ms_, 500));
    // Entries dead for two more TTLs cannot matter to any read.
    reg_.prune(unix_millis(), 2 * kDefaultTtlMs);
}

RegistryNode::RegistryNode(int n_blocks, std::vector<std::string> peers, transport::LinkShape shape, int gossip_ms)
    : reg_(n_blocks),
      pool_(shape),
      peers_(std::move(peers)),
      gossip_(reg_, pool_, [this] { return peer_list(); }, gossip_ms),
      server_(shape) {
    serve_registry(server_, reg_);
}

RegistryNode::~RegistryNode() { stop(); }

void RegistryNode::start(const std::string& host, uint16_t port, bool background_gossip) {
    server_.start(host, port);
    if (background_gossip) gossip_.start();
}

void RegistryNode::stop() {
    gossip_.stop();
    server_.stop();
}

void RegistryNode::add_peer(const std::string& address) {
    std::lock_guard lock(peers_mu_);
    if (std::find(peers_.begin(), peers_.end(), address) == peers_.end()) peers_.push_back(address);
}

std::vector<std::string> RegistryNode::peer_list() {
    std::vector<std::string> out;
    {
        std::lock_guard lock(peers_mu_);
        out = peers_;
    }
    // Servers announce their own addresses; they embed replicas too.
    const std::string self = server_.running() ? server_.address() : "";
    for (const auto& e : reg_.live_entries(unix_millis()))
        if (e.state != ServerState::Offline && e.address != self &&
            std::find(out.begin(), out.end(), e.address) == out.end())
            out.push_back(e.address);
    return out;
}

}  // namespace swarm::registry

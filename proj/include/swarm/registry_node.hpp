#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "swarm/registry.hpp"
#include "swarm/transport/rpc.hpp"

namespace swarm::registry {

inline constexpr int kDefaultGossipMs = 2000;
inline constexpr int kRegistryDeadlineMs = 2000;

std::vector<uint8_t> json_payload(const nlohmann::json& j);
/// Parse failure is a ProtocolError.
nlohmann::json parse_json_payload(std::span<const uint8_t> bytes);

/// Installs ANNOUNCE, LOOKUP and GOSSIP handlers backed by `reg`.
///   ANNOUNCE: entry JSON -> {"stored": bool}
///   LOOKUP:   {"start", "end"} -> entries (online, unexpired, intersecting);
///             {"all": true} -> every unexpired entry
///   GOSSIP:   snapshot JSON -> the replica's snapshot after merging
void serve_registry(transport::RpcServer& server, Registry& reg);

void announce_to(transport::RpcPool& pool, const std::string& address, const ServerEntry& e,
                 int deadline_ms = kRegistryDeadlineMs);
std::vector<ServerEntry> lookup(transport::RpcPool& pool, const std::string& address, const BlockRange& range,
                                int deadline_ms = kRegistryDeadlineMs);
std::vector<ServerEntry> lookup_all(transport::RpcPool& pool, const std::string& address,
                                    int deadline_ms = kRegistryDeadlineMs);

/// Pushes our snapshot to `peer` and merges its reply. On any transport
/// failure the local replica is left untouched and false is returned.
bool gossip_round(Registry& self, transport::RpcPool& pool, const std::string& peer,
                  int deadline_ms = kRegistryDeadlineMs);

/// Periodic anti-entropy: every period, one gossip round with each peer.
class GossipLoop {
public:
    using PeerFn = std::function<std::vector<std::string>()>;
    GossipLoop(Registry& reg, transport::RpcPool& pool, PeerFn peers, int period_ms = kDefaultGossipMs);
    ~GossipLoop();
    void start();
    void stop();
    /// One synchronous round over the current peer list.
    void round();

private:
    Registry& reg_;
    transport::RpcPool& pool_;
    PeerFn peers_;
    int period_ms_;
    std::thread thread_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stop_ = false;
};

/// Standalone registry replica: a bootstrap seed for servers and clients.
class RegistryNode {
public:
    RegistryNode(int n_blocks, std::vector<std::string> peers, transport::LinkShape shape = {},
                 int gossip_ms = kDefaultGossipMs);
    ~RegistryNode();
    void start(const std::string& host, uint16_t port, bool background_gossip = true);
    void stop();
    void gossip_once() { gossip_.round(); }
    void add_peer(const std::string& address);
    std::string address() const { return server_.address(); }
    Registry& registry() { return reg_; }

private:
    std::vector<std::string> peer_list();

    Registry reg_;
    transport::RpcPool pool_;
    std::mutex peers_mu_;
    std::vector<std::string> peers_;
    GossipLoop gossip_;
    transport::RpcServer server_;
};

}  // namespace swarm::registry

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swarm/allocation.hpp"

namespace swarm::registry {

inline constexpr int64_t kDefaultTtlMs = 30000;

using ServerId = std::array<uint8_t, 16>;

ServerId random_server_id();
std::string to_hex(const ServerId& id);
ServerId server_id_from_hex(const std::string& hex);

enum class ServerState { Joining, Online, Offline };
std::string to_string(ServerState s);
ServerState state_from_string(const std::string& s);

/// A server's announcement: which blocks it hosts and how fast it is.
struct ServerEntry {
    ServerId server_id{};
    std::string address;        // host:port
    BlockRange range;
    float throughput = 0.0f;    // tokens/s
    double bandwidth_bps = 0.0; // announced link bandwidth in bit/s, 0 = unknown
    int64_t announced_at = 0;   // unix millis
    int64_t ttl_ms = kDefaultTtlMs;
    ServerState state = ServerState::Joining;

    bool expired(int64_t now) const { return now >= announced_at + ttl_ms; }
    bool operator==(const ServerEntry&) const = default;
};

void to_json(nlohmann::json& j, const ServerEntry& e);
void from_json(const nlohmann::json& j, ServerEntry& e);

/// Throws InputError if the entry breaks an invariant for a model of n_blocks
/// blocks (pass 0 to skip the upper bound check).
void validate_entry(const ServerEntry& e, int n_blocks = 0);

/// Last-writer-wins order: true when `a` replaces `b` for the same server id.
/// Newer announced_at wins; equal timestamps fall back to a canonical
/// comparison of the remaining fields so the order is total.
bool supersedes(const ServerEntry& a, const ServerEntry& b);

struct RegistrySnapshot {
    std::map<ServerId, ServerEntry> entries;

    int64_t version() const;
    bool operator==(const RegistrySnapshot&) const = default;
};

void to_json(nlohmann::json& j, const RegistrySnapshot& s);
void from_json(const nlohmann::json& j, RegistrySnapshot& s);

/// Join of two snapshots: per server id, the LWW winner. Commutative,
/// associative and idempotent.
RegistrySnapshot merge(const RegistrySnapshot& a, const RegistrySnapshot& b);

/// Unexpired online entries whose range intersects `query`, sorted by
/// (range.start, server_id).
std::vector<ServerEntry> module_infos(const RegistrySnapshot& s, const BlockRange& query, int64_t now);

/// Thread-safe replica: single writer, many readers.
class Registry {
public:
    explicit Registry(int n_blocks = 0) : n_blocks_(n_blocks) {}

    /// Stores the entry if it supersedes the current one; returns whether it did.
    bool announce(const ServerEntry& entry);
    std::vector<ServerEntry> get_module_infos(const BlockRange& query, int64_t now) const;
    /// Every unexpired entry regardless of state.
    std::vector<ServerEntry> live_entries(int64_t now) const;
    RegistrySnapshot snapshot() const;
    void merge_from(const RegistrySnapshot& remote);
    /// Drops entries that expired more than `grace_ms` ago.
    void prune(int64_t now, int64_t grace_ms);
    int n_blocks() const { return n_blocks_; }

private:
    int n_blocks_;
    mutable std::shared_mutex mu_;
    RegistrySnapshot snap_;
};

/// Builds the allocation view (online, unexpired servers) from registry entries.
allocation::SwarmView swarm_view(const std::vector<ServerEntry>& entries, int n_blocks);

}  // namespace swarm::registry

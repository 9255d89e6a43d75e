#include "swarm/registry.hpp"

#include <algorithm>
#include <mutex>
#include <random>

#include "swarm/common.hpp"

namespace swarm::registry {

ServerId random_server_id() {
    static thread_local std::random_device rd;
    ServerId id;
    for (size_t i = 0; i < id.size(); i += 4) {
        const uint32_t r = rd();
        for (size_t k = 0; k < 4; ++k) id[i + k] = uint8_t(r >> (8 * k));
    }
    return id;
}

std::string to_hex(const ServerId& id) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s;
    s.reserve(32);
    for (uint8_t b : id) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 15]);
    }
    return s;
}

ServerId server_id_from_hex(const std::string& hex) {
    if (hex.size() != 32) throw InputError("server id must be 32 hex digits");
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw InputError("server id is not hex");
    };
    ServerId id;
    for (size_t i = 0; i < 16; ++i) id[i] = uint8_t(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
    return id;
}

std::string to_string(ServerState s) {
    switch (s) {
        case ServerState::Joining: return "joining";
        case ServerState::Online: return "online";
        case ServerState::Offline: return "offline";
    }
    return "offline";
}

ServerState state_from_string(const std::string& s) {
    if (s == "joining") return ServerState::Joining;
    if (s == "online") return ServerState::Online;
    if (s == "offline") return ServerState::Offline;
    throw InputError("unknown server state '" + s + "'");
}

void to_json(nlohmann::json& j, const ServerEntry& e) {
    j = nlohmann::json{{"server_id", to_hex(e.server_id)},
                       {"address", e.address},
                       {"start", e.range.start},
                       {"end", e.range.end},
                       {"throughput", e.throughput},
                       {"bandwidth_bps", e.bandwidth_bps},
                       {"announced_at", e.announced_at},
                       {"ttl_ms", e.ttl_ms},
                       {"state", to_string(e.state)}};
}

void from_json(const nlohmann::json& j, ServerEntry& e) {
    e.server_id = server_id_from_hex(j.at("server_id").get<std::string>());
    e.address = j.at("address").get<std::string>();
    e.range = {j.at("start").get<int>(), j.at("end").get<int>()};
    e.throughput = j.at("throughput").get<float>();
    e.bandwidth_bps = j.value("bandwidth_bps", 0.0);
    e.announced_at = j.at("announced_at").get<int64_t>();
    e.ttl_ms = j.value("ttl_ms", kDefaultTtlMs);
    e.state = state_from_string(j.at("state").get<std::string>());
}

void validate_entry(const ServerEntry& e, int n_blocks) {
    if (e.range.start < 0 || e.range.start >= e.range.end) throw InputError("malformed block range " + e.range.str());
    if (n_blocks > 0 && e.range.end > n_blocks) throw InputError("block range " + e.range.str() + " exceeds model");
    if (e.ttl_ms <= 0) throw InputError("ttl must be positive");
    if (e.state == ServerState::Online && !(e.throughput > 0.0f)) throw InputError("online server needs throughput > 0");
}

bool supersedes(const ServerEntry& a, const ServerEntry& b) {
    if (a.announced_at != b.announced_at) return a.announced_at > b.announced_at;
    auto key = [](const ServerEntry& e) {
        return std::tuple(int(e.state), e.range, e.ttl_ms, e.throughput, e.bandwidth_bps, e.address);
    };
    return key(a) > key(b);
}

int64_t RegistrySnapshot::version() const {
    int64_t v = 0;
    for (const auto& [_, e] : entries) v = std::max(v, e.announced_at);
    return v;
}

void to_json(nlohmann::json& j, const RegistrySnapshot& s) {
    j = nlohmann::json::array();
    for (const auto& [_, e] : s.entries) j.push_back(e);
}

void from_json(const nlohmann::json& j, RegistrySnapshot& s) {
    s.entries.clear();
    for (const auto& item : j) {
        ServerEntry e = item.get<ServerEntry>();
        auto it = s.entries.find(e.server_id);
        if (it == s.entries.end() || supersedes(e, it->second)) s.entries[e.server_id] = e;
    }
}

RegistrySnapshot merge(const RegistrySnapshot& a, const RegistrySnapshot& b) {
    RegistrySnapshot out = a;
    for (const auto& [id, e] : b.entries) {
        auto it = out.entries.find(id);
        if (it == out.entries.end() || supersedes(e, it->second)) out.entries[id] = e;
    }
    return out;
}

std::vector<ServerEntry> module_infos(const RegistrySnapshot& s, const BlockRange& query, int64_t now) {
    std::vector<ServerEntry> out;
    for (const auto& [_, e] : s.entries)
        if (e.state == ServerState::Online && !e.expired(now) && e.range.intersects(query)) out.push_back(e);
    std::sort(out.begin(), out.end(), [](const ServerEntry& a, const ServerEntry& b) {
        return std::tie(a.range.start, a.server_id) < std::tie(b.range.start, b.server_id);
    });
    return out;
}

bool Registry::announce(const ServerEntry& entry) {
    validate_entry(entry, n_blocks_);
    std::unique_lock lock(mu_);
    auto it = snap_.entries.find(entry.server_id);
    if (it != snap_.entries.end() && !supersedes(entry, it->second)) return false;
    snap_.entries[entry.server_id] = entry;
    return true;
}

std::vector<ServerEntry> Registry::get_module_infos(const BlockRange& query, int64_t now) const {
    std::shared_lock lock(mu_);
    return module_infos(snap_, query, now);
}

std::vector<ServerEntry> Registry::live_entries(int64_t now) const {
    std::shared_lock lock(mu_);
    std::vector<ServerEntry> out;
    for (const auto& [_, e] : snap_.entries)
        if (!e.expired(now)) out.push_back(e);
    return out;
}

RegistrySnapshot Registry::snapshot() const {
    std::shared_lock lock(mu_);
    return snap_;
}

void Registry::merge_from(const RegistrySnapshot& remote) {
    std::unique_lock lock(mu_);
    for (const auto& [id, e] : remote.entries) {
        if (e.range.start < 0 || e.range.start >= e.range.end) continue;
        auto it = snap_.entries.find(id);
        if (it == snap_.entries.end() || supersedes(e, it->second)) snap_.entries[id] = e;
    }
}

void Registry::prune(int64_t now, int64_t grace_ms) {
    std::unique_lock lock(mu_);
    std::erase_if(snap_.entries, [&](const auto& kv) { return now >= kv.second.announced_at + kv.second.ttl_ms + grace_ms; });
}

allocation::SwarmView swarm_view(const std::vector<ServerEntry>& entries, int n_blocks) {
    allocation::SwarmView v;
    v.n_blocks = n_blocks;
    for (const auto& e : entries)
        if (e.state == ServerState::Online) v.servers.push_back({to_hex(e.server_id), e.range, e.throughput});
    return v;
}

}  // namespace swarm::registry

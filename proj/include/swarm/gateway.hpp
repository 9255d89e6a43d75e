#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "swarm/client.hpp"

namespace swarm::gateway {

inline constexpr const char* kStreamSubprotocol = "petal-stream-v1";
inline constexpr uint32_t kMaxNewTokens = 512;

struct GenerateRequest {
    std::string prompt;
    uint32_t max_new_tokens = 32;
    model::Sampling sampling;
    uint64_t seed = 0;
};
/// Throws InputError on a malformed body.
GenerateRequest parse_generate_request(const nlohmann::json& j);

/// Byte tokenizer: one token per byte.
std::vector<int> encode_bytes(const std::string& text);
/// Inverse of encode_bytes, with bytes >= 0x80 emitted as the code point of
/// the same value so every chunk is valid UTF-8 on its own.
std::string decode_bytes(std::span<const int> tokens);

/// Coverage per block, live servers and bottleneck throughput.
nlohmann::json swarm_status(const std::vector<registry::ServerEntry>& entries, int n_blocks, int64_t now);

struct GatewayConfig {
    std::string host = "127.0.0.1";
    uint16_t port = 0;
    client::ClientConfig client;
    size_t per_ip_limit = 4;
    std::string static_dir;  // serves index.html at / when set
};

/// HTTP and WebSocket front end over one SwarmClient. One thread per connection.
class Gateway {
public:
    Gateway(std::shared_ptr<const model::Checkpoint> ckpt, GatewayConfig cfg);
    ~Gateway();
    Gateway(const Gateway&) = delete;
    Gateway& operator=(const Gateway&) = delete;

    void start();
    void stop();
    std::string address() const;
    uint16_t port() const { return port_; }

    /// Result of one generation as the POST endpoint reports it.
    struct Outcome {
        int status = 200;
        nlohmann::json body;
    };
    Outcome run_generate(const GenerateRequest& req, const std::function<void(size_t, int)>& on_token = {});

private:
    struct Impl;
    void accept_loop();
    void serve(int id, std::string peer_ip);
    bool acquire(const std::string& ip);
    void release(const std::string& ip);

    std::shared_ptr<const model::Checkpoint> ckpt_;
    GatewayConfig cfg_;
    client::SwarmClient client_;
    std::unique_ptr<Impl> impl_;
    uint16_t port_ = 0;
    std::atomic<bool> running_{false};
    std::thread acceptor_;
    std::mutex mu_;
    std::map<std::string, size_t> active_;
    std::map<int, std::thread> conns_;
    std::vector<int> finished_;
    int next_id_ = 0;
};

}  // namespace swarm::gateway

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swarm/allocation.hpp"
#include "swarm/tensor.hpp"
#include "swarm/transport/wire.hpp"

// Payload layouts of the server-node RPCs. Integers are big-endian, tensors
// use the TensorMsg encoding.
namespace swarm::protocol {

using SessionId = std::array<uint8_t, 16>;
SessionId random_session_id();

/// OPEN_SESSION: session_id[16] max_len:u32 block_start:u32 block_end:u32. Reply empty.
struct OpenSession {
    SessionId session_id{};
    uint32_t max_len = 0;
    BlockRange blocks;
};
std::vector<uint8_t> encode(const OpenSession& m);
OpenSession decode_open_session(std::span<const uint8_t> p);

/// STEP: session_id[16] start_pos:u32 TensorMsg[t x d]. Reply: TensorMsg[t x d].
struct Step {
    SessionId session_id{};
    uint32_t start_pos = 0;
    Tensor hidden;
};
std::vector<uint8_t> encode(const Step& m, transport::Encoding enc);
Step decode_step(std::span<const uint8_t> p);

/// CLOSE_SESSION: session_id[16]. Reply empty.
std::vector<uint8_t> encode_close(const SessionId& id);
SessionId decode_close(std::span<const uint8_t> p);

/// FORWARD: block_start:u32 block_end:u32 TensorMsg[B x t x d].
/// Reply: tape_id:u64 TensorMsg[B x t x d].
struct Forward {
    BlockRange blocks;
    Tensor hidden;
};
std::vector<uint8_t> encode(const Forward& m, transport::Encoding enc);
Forward decode_forward(std::span<const uint8_t> p);

struct ForwardReply {
    uint64_t tape_id = 0;
    Tensor hidden;
};
std::vector<uint8_t> encode(const ForwardReply& m, transport::Encoding enc);
ForwardReply decode_forward_reply(std::span<const uint8_t> p);

/// BACKWARD: tape_id:u64 TensorMsg grad[B x t x d]. Reply: TensorMsg grad_in.
struct Backward {
    uint64_t tape_id = 0;
    Tensor grad;
};
std::vector<uint8_t> encode(const Backward& m, transport::Encoding enc);
Backward decode_backward(std::span<const uint8_t> p);

/// INFO reply (JSON).
struct ServerInfo {
    std::string server_id;
    std::string address;
    BlockRange range;
    float throughput = 0.0f;
    uint32_t position_capacity = 0;
    uint32_t version = 0;  // bumped on every block move
    uint64_t weights_hash = 0;
    size_t sessions = 0;
    std::string quantize;
};
void to_json(nlohmann::json& j, const ServerInfo& s);
void from_json(const nlohmann::json& j, ServerInfo& s);

}  // namespace swarm::protocol

#include "swarm/protocol.hpp"

#include <random>

namespace swarm::protocol {

using transport::ByteReader;
using transport::ByteWriter;

namespace {

void put_id(ByteWriter& w, const SessionId& id) { w.bytes(id); }

SessionId get_id(ByteReader& r) {
    SessionId id;
    auto b = r.bytes(16);
    std::copy(b.begin(), b.end(), id.begin());
    return id;
}

BlockRange get_range(ByteReader& r) {
    const uint32_t s = r.u32(), e = r.u32();
    if (s >= e || e > uint32_t(1) << 20) throw ProtocolError("malformed block range");
    return {int(s), int(e)};
}

}  // namespace

SessionId random_session_id() {
    static thread_local std::mt19937_64 rng{std::random_device{}()};
    SessionId id;
    for (size_t i = 0; i < id.size(); i += 8) {
        const uint64_t v = rng();
        for (size_t k = 0; k < 8; ++k) id[i + k] = uint8_t(v >> (8 * k));
    }
    return id;
}

std::vector<uint8_t> encode(const OpenSession& m) {
    ByteWriter w;
    put_id(w, m.session_id);
    w.u32(m.max_len);
    w.u32(uint32_t(m.blocks.start));
    w.u32(uint32_t(m.blocks.end));
    return w.take();
}

OpenSession decode_open_session(std::span<const uint8_t> p) {
    ByteReader r(p);
    OpenSession m;
    m.session_id = get_id(r);
    m.max_len = r.u32();
    m.blocks = get_range(r);
    r.expect_end();
    return m;
}

std::vector<uint8_t> encode(const Step& m, transport::Encoding enc) {
    ByteWriter w;
    put_id(w, m.session_id);
    w.u32(m.start_pos);
    transport::write_tensor(w, m.hidden, enc);
    return w.take();
}

Step decode_step(std::span<const uint8_t> p) {
    ByteReader r(p);
    Step m;
    m.session_id = get_id(r);
    m.start_pos = r.u32();
    m.hidden = transport::read_tensor(r);
    r.expect_end();
    return m;
}

std::vector<uint8_t> encode_close(const SessionId& id) { return {id.begin(), id.end()}; }

SessionId decode_close(std::span<const uint8_t> p) {
    ByteReader r(p);
    SessionId id = get_id(r);
    r.expect_end();
    return id;
}

std::vector<uint8_t> encode(const Forward& m, transport::Encoding enc) {
    ByteWriter w;
    w.u32(uint32_t(m.blocks.start));
    w.u32(uint32_t(m.blocks.end));
    transport::write_tensor(w, m.hidden, enc);
    return w.take();
}

Forward decode_forward(std::span<const uint8_t> p) {
    ByteReader r(p);
    Forward m;
    m.blocks = get_range(r);
    m.hidden = transport::read_tensor(r);
    r.expect_end();
    return m;
}

std::vector<uint8_t> encode(const ForwardReply& m, transport::Encoding enc) {
    ByteWriter w;
    w.u64(m.tape_id);
    transport::write_tensor(w, m.hidden, enc);
    return w.take();
}

ForwardReply decode_forward_reply(std::span<const uint8_t> p) {
    ByteReader r(p);
    ForwardReply m;
    m.tape_id = r.u64();
    m.hidden = transport::read_tensor(r);
    r.expect_end();
    return m;
}

std::vector<uint8_t> encode(const Backward& m, transport::Encoding enc) {
    ByteWriter w;
    w.u64(m.tape_id);
    transport::write_tensor(w, m.grad, enc);
    return w.take();
}

Backward decode_backward(std::span<const uint8_t> p) {
    ByteReader r(p);
    Backward m;
    m.tape_id = r.u64();
    m.grad = transport::read_tensor(r);
    r.expect_end();
    return m;
}

void to_json(nlohmann::json& j, const ServerInfo& s) {
    j = nlohmann::json{{"server_id", s.server_id},
                       {"address", s.address},
                       {"range", {s.range.start, s.range.end}},
                       {"throughput", s.throughput},
                       {"position_capacity", s.position_capacity},
                       {"version", s.version},
                       {"weights_hash", s.weights_hash},
                       {"sessions", s.sessions},
                       {"quantize", s.quantize}};
}

void from_json(const nlohmann::json& j, ServerInfo& s) {
    s.server_id = j.at("server_id").get<std::string>();
    s.address = j.value("address", "");
    s.range = {j.at("range").at(0).get<int>(), j.at("range").at(1).get<int>()};
    s.throughput = j.at("throughput").get<float>();
    s.position_capacity = j.at("position_capacity").get<uint32_t>();
    s.version = j.at("version").get<uint32_t>();
    s.weights_hash = j.at("weights_hash").get<uint64_t>();
    s.sessions = j.value("sessions", size_t{0});
    s.quantize = j.value("quantize", "none");
}

}  // namespace swarm::protocol

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <thread>

#include "swarm/splitmix.hpp"
#include "swarm/transport/rpc.hpp"
#include "swarm/transport/shaper.hpp"
#include "swarm/transport/wire.hpp"

using namespace swarm;
using namespace swarm::transport;

namespace {

std::string hex(const std::vector<uint8_t>& b) {
    static constexpr char digits[] = "0123456789ABCDEF";
    std::string s;
    for (size_t i = 0; i < b.size(); ++i) {
        if (i) s += ' ';
        s += digits[b[i] >> 4];
        s += digits[b[i] & 15];
    }
    return s;
}

// A port that nothing listens on: bind, read the port, close.
uint16_t closed_port() {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    ::bind(fd, reinterpret_cast<sockaddr*>(&a), sizeof(a));
    socklen_t len = sizeof(a);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&a), &len);
    ::close(fd);
    return ntohs(a.sin_port);
}

}  // namespace

TEST_CASE("PING frame layout") {
    const auto bytes = encode_frame(MsgType::Ping, 7, {});
    CHECK(hex(bytes) == "50 54 01 01 00 00 00 00 00 00 00 07 00 00 00 00");
    const Frame f = decode_frame(bytes);
    CHECK(f.type == MsgType::Ping);
    CHECK(f.request_id == 7);
    CHECK(f.payload.empty());
}

TEST_CASE("frame round trip property") {
    SplitMix64 rng(5);
    for (int i = 0; i < 500; ++i) {
        Frame f;
        f.type = MsgType(uint8_t(rng.next()));
        f.request_id = rng.next();
        f.payload.resize(rng.next() % 300);
        for (auto& b : f.payload) b = uint8_t(rng.next());
        REQUIRE(decode_frame(encode_frame(f)) == f);
    }
}

TEST_CASE("malformed frames are protocol errors") {
    auto bytes = encode_frame(MsgType::Step, 1, std::vector<uint8_t>{1, 2, 3});
    for (size_t n = 0; n < bytes.size(); ++n)
        CHECK_THROWS_AS(decode_frame(std::span(bytes).first(n)), ProtocolError);
    auto bad = bytes;
    bad[0] = 0x51;
    CHECK_THROWS_AS(decode_frame(bad), ProtocolError);
    bad = bytes;
    bad[2] = 2;
    CHECK_THROWS_AS(decode_frame(bad), ProtocolError);
    bad = bytes;
    bad.push_back(0);
    CHECK_THROWS_AS(decode_frame(bad), ProtocolError);
    bad = encode_frame(MsgType::Step, 1, {});
    bad[12] = 0x04;  // payload_len = 64 MiB
    CHECK_THROWS_AS(decode_frame_header(bad), ProtocolError);
}

TEST_CASE("error payload") {
    const auto p = encode_error(ErrorCode::Desync, "position 3 != 4");
    CHECK(p[0] == 0);
    CHECK(p[1] == uint8_t(ErrorCode::Desync));
    const auto [code, msg] = decode_error(p);
    CHECK(code == ErrorCode::Desync);
    CHECK(msg == "position 3 != 4");
}

TEST_CASE("f32 tensor layout") {
    const Tensor t({2}, {1.0f, -1.0f});
    const auto bytes = encode_tensor(t, Encoding::F32);
    CHECK(hex(bytes) == "00 01 00 00 00 02 00 00 80 3F 00 00 80 BF");
    CHECK(decode_tensor(bytes) == t);
    CHECK(bytes.size() == encoded_tensor_size(t.shape, Encoding::F32));
}

TEST_CASE("tensor round trip property") {
    SplitMix64 rng(11);
    for (int i = 0; i < 300; ++i) {
        std::vector<uint32_t> shape(1 + rng.next() % 3);
        for (auto& d : shape) d = uint32_t(rng.next() % 9);
        Tensor t = Tensor::zeros(shape);
        for (float& v : t.data) v = rng.uniform(-10.0, 10.0);
        const auto f32 = encode_tensor(t, Encoding::F32);
        REQUIRE(decode_tensor(f32) == t);
        const uint32_t block = uint32_t(1 + rng.next() % 70);
        const auto i8 = encode_tensor(t, Encoding::Int8, block);
        REQUIRE(i8.size() == encoded_tensor_size(t.shape, Encoding::Int8, block));
        const Tensor back = decode_tensor(i8);
        REQUIRE(back.shape == t.shape);
        const auto q = quant::quantize_blockwise(t, block);
        for (size_t k = 0; k < t.numel(); ++k) REQUIRE(std::fabs(back.data[k] - t.data[k]) <= q.scales[k / block] / 2);
    }
}

TEST_CASE("int8 encoding of 256 elements is under 51% of f32") {
    Tensor t({256}, std::vector<float>(256));
    SplitMix64 rng(3);
    for (float& v : t.data) v = rng.uniform(-1.0, 1.0);
    const size_t f32 = encode_tensor(t, Encoding::F32).size();
    const size_t i8 = encode_tensor(t, Encoding::Int8).size();
    // 6 + 4 + 4*4 + 256 = 282 vs 6 + 1024 = 1030.
    CHECK(f32 == 1030);
    CHECK(i8 == 282);
    CHECK(double(i8) < 0.51 * double(f32));
    for (uint32_t n = 256; n <= 4096; n *= 2) {
        const std::vector<uint32_t> shape{n};
        CHECK(double(encoded_tensor_size(shape, Encoding::Int8)) < 0.51 * double(encoded_tensor_size(shape, Encoding::F32)));
    }
}

TEST_CASE("bad tensors") {
    CHECK_THROWS_AS(encode_tensor(Tensor({1}, {NAN}), Encoding::F32), InputError);
    auto bytes = encode_tensor(Tensor({3}, {1, 2, 3}), Encoding::F32);
    bytes.pop_back();
    CHECK_THROWS_AS(decode_tensor(bytes), ProtocolError);
    auto i8 = encode_tensor(Tensor({3}, {1, 2, 3}), Encoding::Int8);
    i8.pop_back();
    CHECK_THROWS_AS(decode_tensor(i8), ProtocolError);
    ByteWriter w;
    w.u8(0);
    w.u8(3);
    for (int i = 0; i < 3; ++i) w.u32(0x10000000u);
    CHECK_THROWS_AS(decode_tensor(w.buffer()), InputError);
    ByteWriter u;
    u.u8(9);
    u.u8(0);
    CHECK_THROWS_AS(decode_tensor(u.buffer()), ProtocolError);
}

TEST_CASE("link shape parsing") {
    const auto s = LinkShape::parse("100:1000");
    CHECK(s.latency_ms == 100.0);
    CHECK(s.bandwidth_bps == 1e9);
    CHECK(LinkShape::parse("5:inf").bandwidth_bps == std::numeric_limits<double>::infinity());
    CHECK(LinkShape::parse("").passthrough());
    CHECK_THROWS_AS(LinkShape::parse("fast"), InputError);
    CHECK_THROWS_AS(LinkShape::parse("-1:10"), InputError);
}

TEST_CASE("shaper schedule arithmetic") {
    Shaper s(LinkShape{0.0, 1e8});
    // 2^20 bytes * 8 / 1e8 bit/s = 83.886 ms.
    CHECK(s.schedule(1 << 20, 10.0) == doctest::Approx(10.0 + 0.08388608));
    // Back-to-back messages queue behind each other.
    CHECK(s.schedule(1 << 20, 10.0) == doctest::Approx(10.0 + 2 * 0.08388608));
    Shaper lat(LinkShape{50.0});
    CHECK(lat.schedule(1, 3.0) == doctest::Approx(3.05));
    Shaper none;
    CHECK(none.schedule(1 << 20, 1.0) == 1.0);
}

TEST_CASE("rpc ping and echo") {
    RpcServer server;
    server.on(MsgType::Info, [](std::span<const uint8_t> p) {
        std::vector<uint8_t> out(p.begin(), p.end());
        std::reverse(out.begin(), out.end());
        return out;
    });
    server.start("127.0.0.1", 0);
    RpcPool pool;
    const double t0 = monotonic_seconds();
    CHECK(pool.call(server.address(), MsgType::Ping, {}, 1000).empty());
    CHECK(monotonic_seconds() - t0 < 0.05);
    CHECK(pool.call(server.address(), MsgType::Info, std::vector<uint8_t>{1, 2, 3}, 1000) ==
          std::vector<uint8_t>{3, 2, 1});
    SUBCASE("unknown type is a remote error") {
        try {
            pool.call(server.address(), MsgType::Forward, {}, 1000);
            FAIL("expected error");
        } catch (const RemoteError& e) {
            CHECK(e.code == ErrorCode::UnknownType);
        }
    }
    SUBCASE("pipelined calls on one connection") {
        std::vector<std::thread> ts;
        std::atomic<int> ok{0};
        for (int i = 0; i < 16; ++i)
            ts.emplace_back([&, i] {
                const std::vector<uint8_t> p{uint8_t(i), 0};
                if (pool.call(server.address(), MsgType::Info, p, 2000) == std::vector<uint8_t>{0, uint8_t(i)}) ++ok;
            });
        for (auto& t : ts) t.join();
        CHECK(ok == 16);
    }
}

TEST_CASE("rpc error kinds are distinguishable") {
    RpcPool pool;
    SUBCASE("closed port") {
        const double t0 = monotonic_seconds();
        CHECK_THROWS_AS(pool.call("127.0.0.1:" + std::to_string(closed_port()), MsgType::Ping, {}, 1000),
                        ConnectionError);
        CHECK(monotonic_seconds() - t0 < 1.0);
    }
    SUBCASE("deadline exceeded") {
        RpcServer server;
        server.on(MsgType::Info, [](std::span<const uint8_t>) {
            std::this_thread::sleep_for(std::chrono::milliseconds(300));
            return std::vector<uint8_t>{};
        });
        server.start("127.0.0.1", 0);
        const double t0 = monotonic_seconds();
        CHECK_THROWS_AS(pool.call(server.address(), MsgType::Info, {}, 100), TimeoutError);
        CHECK(monotonic_seconds() - t0 < 0.25);
        // The connection survives a timeout.
        CHECK(pool.call(server.address(), MsgType::Ping, {}, 1000).empty());
    }
    SUBCASE("server stopped mid-call") {
        RpcServer server;
        server.on(MsgType::Info, [](std::span<const uint8_t>) {
            std::this_thread::sleep_for(std::chrono::milliseconds(300));
            return std::vector<uint8_t>{};
        });
        server.start("127.0.0.1", 0);
        const auto addr = server.address();
        std::thread killer([&] {
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
            server.stop();
        });
        CHECK_THROWS_AS(pool.call(addr, MsgType::Info, {}, 5000), ConnectionError);
        killer.join();
        CHECK_THROWS_AS(pool.call(addr, MsgType::Ping, {}, 1000), ConnectionError);
    }
    SUBCASE("partition") {
        RpcServer server;
        server.start("127.0.0.1", 0);
        pool.block(server.address());
        CHECK_THROWS_AS(pool.call(server.address(), MsgType::Ping, {}, 1000), ConnectionError);
        pool.unblock(server.address());
        CHECK(pool.call(server.address(), MsgType::Ping, {}, 1000).empty());
    }
}

TEST_CASE("malformed bytes drop only that connection") {
    RpcServer server;
    server.start("127.0.0.1", 0);
    const auto [host, port] = split_address(server.address());
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_port = htons(port);
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&a), sizeof(a)) == 0);
    const char junk[] = "GET / HTTP/1.1\r\n\r\n";
    ::send(fd, junk, sizeof(junk) - 1, MSG_NOSIGNAL);
    char buf[16];
    CHECK(::recv(fd, buf, sizeof(buf), 0) <= 0);
    ::close(fd);
    RpcPool pool;
    CHECK(pool.call(server.address(), MsgType::Ping, {}, 1000).empty());
}

TEST_CASE("shaped delivery timing") {
    SUBCASE("1 MiB over 100 Mbit/s") {
        RpcServer server;
        std::atomic<double> arrived{0};
        server.on(MsgType::Info, [&](std::span<const uint8_t>) {
            arrived = monotonic_seconds();
            return std::vector<uint8_t>{};
        });
        server.start("127.0.0.1", 0);
        RpcPool pool(LinkShape{0.0, 1e8});
        pool.call(server.address(), MsgType::Ping, {}, 1000);  // connect first
        const std::vector<uint8_t> payload(1 << 20, 0xAB);
        const double t0 = monotonic_seconds();
        pool.call(server.address(), MsgType::Info, payload, 5000);
        const double ms = (arrived - t0) * 1000.0;
        MESSAGE("1 MiB delivery: " << ms << " ms");
        CHECK(ms >= 83.9 * 0.9);
        CHECK(ms <= 83.9 * 1.1);
    }
    SUBCASE("50 ms one-way on both ends gives ~100 ms RTT") {
        RpcServer server(LinkShape{50.0});
        server.start("127.0.0.1", 0);
        RpcPool pool(LinkShape{50.0});
        pool.call(server.address(), MsgType::Ping, {}, 1000);
        std::vector<double> rtts;
        for (int i = 0; i < 5; ++i) {
            const double t0 = monotonic_seconds();
            pool.call(server.address(), MsgType::Ping, {}, 1000);
            rtts.push_back((monotonic_seconds() - t0) * 1000.0);
        }
        for (double r : rtts) {
            CHECK(r >= 100.0);
            CHECK(r <= 110.0);
        }
    }
    SUBCASE("passthrough") {
        RpcServer server;
        server.start("127.0.0.1", 0);
        RpcPool pool;
        pool.call(server.address(), MsgType::Ping, {}, 1000);
        const double t0 = monotonic_seconds();
        pool.call(server.address(), MsgType::Ping, {}, 1000);
        CHECK(monotonic_seconds() - t0 < 0.02);
    }
}

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <boost/asio/thread_pool.hpp>

#include "swarm/transport/shaper.hpp"
#include "swarm/transport/wire.hpp"

namespace swarm::transport {

/// "host:port" -> (host, port). Throws InputError.
std::pair<std::string, uint16_t> split_address(const std::string& address);

/// One full-duplex TCP connection. A reader thread parses frames and hands
/// them to the frame handler; a writer thread drains the outgoing queue,
/// holding each message until its shaped delivery time. Both threads keep the
/// connection alive until they exit; owners must hold it in a shared_ptr.
class Connection : public std::enable_shared_from_this<Connection> {
public:
    using FrameHandler = std::function<void(Frame&&)>;
    using CloseHandler = std::function<void(const std::string& reason)>;

    Connection(int fd, std::shared_ptr<Shaper> shaper);
    ~Connection();
    Connection(const Connection&) = delete;
    Connection& operator=(const Connection&) = delete;

    void start(FrameHandler on_frame, CloseHandler on_close);
    /// Queues a frame; returns false if the connection is already closed.
    bool send(MsgType type, uint64_t request_id, std::span<const uint8_t> payload);
    void shutdown();
    void join();
    bool closed() const { return closed_.load(); }

private:
    void read_loop();
    void write_loop();
    void mark_closed(const std::string& reason);

    struct Outgoing {
        double deliver_at;
        std::vector<uint8_t> bytes;
    };

    int fd_;
    std::shared_ptr<Shaper> shaper_;
    FrameHandler on_frame_;
    CloseHandler on_close_;
    std::thread reader_, writer_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Outgoing> queue_;
    bool closing_ = false;
    std::atomic<bool> closed_{false};
    std::once_flag close_once_;
};

/// Frame-protocol server. Each request runs on a worker pool; its return
/// value goes back with the same type and request id, and any exception
/// becomes an ERROR frame.
class RpcServer {
public:
    using Handler = std::function<std::vector<uint8_t>(std::span<const uint8_t> payload)>;

    explicit RpcServer(LinkShape shape = {}, size_t workers = 4);
    ~RpcServer();
    RpcServer(const RpcServer&) = delete;
    RpcServer& operator=(const RpcServer&) = delete;

    /// Registers a handler; call before start().
    void on(MsgType type, Handler h);
    /// Binds and starts accepting; port 0 picks an ephemeral port.
    void start(const std::string& host, uint16_t port);
    /// Closes the listener and every connection at once. In-flight replies are dropped.
    void stop();
    bool running() const { return running_.load(); }
    uint16_t port() const { return port_; }
    std::string address() const { return host_ + ":" + std::to_string(port_); }
    const std::shared_ptr<Shaper>& shaper() const { return shaper_; }

private:
    void accept_loop();
    void dispatch(const std::shared_ptr<Connection>& conn, Frame&& f);

    std::shared_ptr<Shaper> shaper_;
    boost::asio::thread_pool pool_;
    std::map<MsgType, Handler> handlers_;
    std::string host_;
    uint16_t port_ = 0;
    int listen_fd_ = -1;
    std::atomic<bool> running_{false};
    std::atomic<bool> stopping_{false};
    std::thread acceptor_;
    std::mutex conns_mu_;
    std::vector<std::shared_ptr<Connection>> conns_;
};

/// Client side of one connection; many calls may be in flight at once.
class RpcClient {
public:
    /// Connects or throws ConnectionError.
    RpcClient(const std::string& address, std::shared_ptr<Shaper> shaper, int connect_timeout_ms = 2000);
    ~RpcClient();
    RpcClient(const RpcClient&) = delete;
    RpcClient& operator=(const RpcClient&) = delete;

    /// Throws TimeoutError past the deadline, ConnectionError if the
    /// connection drops, RemoteError on an ERROR reply, ProtocolError on a
    /// reply of the wrong type.
    std::vector<uint8_t> call(MsgType type, std::span<const uint8_t> payload, int deadline_ms);
    bool alive() const { return !conn_->closed(); }
    const std::string& address() const { return address_; }

private:
    void on_frame(Frame&& f);
    void on_close(const std::string& reason);

    std::string address_;
    std::shared_ptr<Connection> conn_;
    std::mutex mu_;
    std::unordered_map<uint64_t, std::promise<Frame>> pending_;
    uint64_t next_id_ = 1;
    std::string close_reason_;
};

/// Connection cache keyed by address, sharing one egress shaper.
class RpcPool {
public:
    explicit RpcPool(LinkShape shape = {}, int connect_timeout_ms = 2000);

    std::vector<uint8_t> call(const std::string& address, MsgType type, std::span<const uint8_t> payload,
                              int deadline_ms);
    /// Simulated partition: calls to a blocked address fail with ConnectionError.
    void block(const std::string& address);
    void unblock(const std::string& address);
    void drop(const std::string& address);
    const std::shared_ptr<Shaper>& shaper() const { return shaper_; }

private:
    std::shared_ptr<RpcClient> client_for(const std::string& address);

    std::shared_ptr<Shaper> shaper_;
    int connect_timeout_ms_;
    std::mutex mu_;
    std::map<std::string, std::shared_ptr<RpcClient>> clients_;
    std::set<std::string> blocked_;
};

}  // namespace swarm::transport

#include "swarm/transport/rpc.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <boost/asio/post.hpp>
#include <cerrno>
#include <chrono>
#include <cstring>

#include <spdlog/spdlog.h>

namespace swarm::transport {

namespace {

std::chrono::steady_clock::time_point to_time_point(double monotonic_s) {
    using namespace std::chrono;
    return steady_clock::time_point(duration_cast<steady_clock::duration>(duration<double>(monotonic_s)));
}

// 0 on EOF before the first byte, -1 on error or EOF mid-buffer.
int recv_all(int fd, uint8_t* buf, size_t n) {
    size_t got = 0;
    while (got < n) {
        const ssize_t r = ::recv(fd, buf + got, n - got, 0);
        if (r == 0) return got == 0 ? 0 : -1;
        if (r < 0) {
            if (errno == EINTR) continue;
            return -1;
        }
        got += size_t(r);
    }
    return 1;
}

bool send_all(int fd, const uint8_t* buf, size_t n) {
    size_t sent = 0;
    while (sent < n) {
        const ssize_t r = ::send(fd, buf + sent, n - sent, MSG_NOSIGNAL);
        if (r < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        sent += size_t(r);
    }
    return true;
}

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

addrinfo* resolve(const std::string& host, uint16_t port, bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    if (passive) hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string h = host == "localhost" ? "127.0.0.1" : host;
    if (const int rc = ::getaddrinfo(h.empty() ? nullptr : h.c_str(), std::to_string(port).c_str(), &hints, &res);
        rc != 0)
        throw ConnectionError("cannot resolve " + host + ": " + gai_strerror(rc));
    return res;
}

int connect_with_timeout(const std::string& address, int timeout_ms) {
    const auto [host, port] = split_address(address);
    addrinfo* res = resolve(host, port, false);
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0) {
        ::freeaddrinfo(res);
        throw ConnectionError("socket() failed");
    }
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc < 0 && errno == EINPROGRESS) {
        pollfd p{fd, POLLOUT, 0};
        rc = ::poll(&p, 1, timeout_ms);
        if (rc == 0) {
            ::close(fd);
            throw ConnectionError("connect to " + address + " timed out");
        }
        int err = 0;
        socklen_t len = sizeof(err);
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
        errno = err;
    }
    if (rc < 0) {
        const std::string why = std::strerror(errno);
        ::close(fd);
        throw ConnectionError("connect to " + address + " failed: " + why);
    }
    ::fcntl(fd, F_SETFL, flags);
    set_nodelay(fd);
    return fd;
}

}  // namespace

std::pair<std::string, uint16_t> split_address(const std::string& address) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos || colon + 1 == address.size()) throw InputError("address must be host:port");
    int port = 0;
    try {
        port = std::stoi(address.substr(colon + 1));
    } catch (const std::logic_error&) {
        throw InputError("bad port in '" + address + "'");
    }
    if (port < 0 || port > 65535) throw InputError("bad port in '" + address + "'");
    return {address.substr(0, colon), uint16_t(port)};
}

// ---------------------------------------------------------------- Connection

Connection::Connection(int fd, std::shared_ptr<Shaper> shaper) : fd_(fd), shaper_(std::move(shaper)) {}

Connection::~Connection() {
    shutdown();
    join();
    ::close(fd_);
}

void Connection::start(FrameHandler on_frame, CloseHandler on_close) {
    on_frame_ = std::move(on_frame);
    on_close_ = std::move(on_close);
    reader_ = std::thread([self = shared_from_this()] { self->read_loop(); });
    writer_ = std::thread([self = shared_from_this()] { self->write_loop(); });
}

bool Connection::send(MsgType type, uint64_t request_id, std::span<const uint8_t> payload) {
    auto bytes = encode_frame(type, request_id, payload);
    const double at = shaper_ ? shaper_->schedule(bytes.size()) : 0.0;
    {
        std::lock_guard lock(mu_);
        if (closing_) return false;
        queue_.push_back({at, std::move(bytes)});
    }
    cv_.notify_one();
    return true;
}

void Connection::shutdown() {
    {
        std::lock_guard lock(mu_);
        closing_ = true;
    }
    cv_.notify_all();
    ::shutdown(fd_, SHUT_RDWR);
}

void Connection::join() {
    const auto self = std::this_thread::get_id();
    for (std::thread* t : {&reader_, &writer_}) {
        if (!t->joinable()) continue;
        if (t->get_id() == self)
            t->detach();
        else
            t->join();
    }
}

void Connection::mark_closed(const std::string& reason) {
    std::call_once(close_once_, [&] {
        closed_ = true;
        {
            std::lock_guard lock(mu_);
            closing_ = true;
        }
        cv_.notify_all();
        ::shutdown(fd_, SHUT_RDWR);
        if (on_close_) on_close_(reason);
    });
}

void Connection::read_loop() {
    std::vector<uint8_t> header(kFrameHeaderSize);
    std::string reason = "closed by peer";
    for (;;) {
        const int rc = recv_all(fd_, header.data(), header.size());
        if (rc <= 0) {
            if (rc < 0) reason = "connection reset";
            break;
        }
        try {
            const FrameHeader h = decode_frame_header(header);
            Frame f{h.type, h.request_id, std::vector<uint8_t>(h.payload_len)};
            if (h.payload_len > 0 && recv_all(fd_, f.payload.data(), f.payload.size()) <= 0) {
                reason = "truncated frame";
                break;
            }
            on_frame_(std::move(f));
        } catch (const ProtocolError& e) {
            spdlog::warn("dropping connection: {}", e.what());
            reason = std::string("protocol error: ") + e.what();
            break;
        }
    }
    mark_closed(reason);
}

void Connection::write_loop() {
    std::unique_lock lock(mu_);
    for (;;) {
        cv_.wait(lock, [&] { return closing_ || !queue_.empty(); });
        if (closing_) return;
        const double at = queue_.front().deliver_at;
        if (at > monotonic_seconds()) {
            cv_.wait_until(lock, to_time_point(at), [&] { return closing_; });
            if (closing_) return;
            if (at > monotonic_seconds()) continue;
        }
        Outgoing out = std::move(queue_.front());
        queue_.pop_front();
        lock.unlock();
        const bool ok = send_all(fd_, out.bytes.data(), out.bytes.size());
        lock.lock();
        if (!ok) {
            lock.unlock();
            mark_closed("send failed");
            return;
        }
    }
}

// ----------------------------------------------------------------- RpcServer

RpcServer::RpcServer(LinkShape shape, size_t workers)
    : shaper_(std::make_shared<Shaper>(shape)), pool_(workers) {
    handlers_[MsgType::Ping] = [](std::span<const uint8_t>) { return std::vector<uint8_t>{}; };
}

RpcServer::~RpcServer() {
    stop();
    pool_.join();
}

void RpcServer::on(MsgType type, Handler h) { handlers_[type] = std::move(h); }

void RpcServer::start(const std::string& host, uint16_t port) {
    addrinfo* res = resolve(host, port, true);
    listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(listen_fd_, res->ai_addr, res->ai_addrlen) < 0 || ::listen(listen_fd_, 128) < 0) {
        const std::string why = std::strerror(errno);
        ::freeaddrinfo(res);
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw ConnectionError("cannot listen on " + host + ":" + std::to_string(port) + ": " + why);
    }
    ::freeaddrinfo(res);
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    host_ = host == "0.0.0.0" || host.empty() ? "127.0.0.1" : host;
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
}

void RpcServer::stop() {
    if (stopping_.exchange(true)) return;
    running_ = false;
    if (listen_fd_ >= 0) ::shutdown(listen_fd_, SHUT_RDWR);
    if (acceptor_.joinable()) acceptor_.join();
    if (listen_fd_ >= 0) ::close(listen_fd_);
    listen_fd_ = -1;
    std::vector<std::shared_ptr<Connection>> conns;
    {
        std::lock_guard lock(conns_mu_);
        conns.swap(conns_);
    }
    for (auto& c : conns) c->shutdown();
    for (auto& c : conns) c->join();
}

void RpcServer::accept_loop() {
    while (!stopping_) {
        pollfd p{listen_fd_, POLLIN, 0};
        if (::poll(&p, 1, 200) <= 0) continue;
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) continue;
        set_nodelay(fd);
        auto conn = std::make_shared<Connection>(fd, shaper_);
        std::weak_ptr<Connection> weak = conn;
        conn->start([this, weak](Frame&& f) {
                        if (auto c = weak.lock()) dispatch(c, std::move(f));
                    },
                    nullptr);
        std::lock_guard lock(conns_mu_);
        if (stopping_) {
            conn->shutdown();
            continue;
        }
        std::erase_if(conns_, [](const auto& c) {
            if (!c->closed()) return false;
            c->join();
            return true;
        });
        conns_.push_back(std::move(conn));
    }
}

void RpcServer::dispatch(const std::shared_ptr<Connection>& conn, Frame&& f) {
    boost::asio::post(pool_, [this, conn, f = std::move(f)] {
        if (stopping_) return;
        auto it = handlers_.find(f.type);
        if (it == handlers_.end()) {
            conn->send(MsgType::Error, f.request_id,
                       encode_error(ErrorCode::UnknownType, "unknown message type " + std::to_string(int(f.type))));
            return;
        }
        std::vector<uint8_t> reply;
        try {
            reply = it->second(f.payload);
        } catch (const RemoteError& e) {
            conn->send(MsgType::Error, f.request_id, encode_error(e.code, e.what()));
            return;
        } catch (const ProtocolError& e) {
            conn->send(MsgType::Error, f.request_id, encode_error(ErrorCode::BadRequest, e.what()));
            return;
        } catch (const InputError& e) {
            conn->send(MsgType::Error, f.request_id, encode_error(ErrorCode::BadRequest, e.what()));
            return;
        } catch (const CapacityError& e) {
            conn->send(MsgType::Error, f.request_id, encode_error(ErrorCode::Capacity, e.what()));
            return;
        } catch (const std::exception& e) {
            conn->send(MsgType::Error, f.request_id, encode_error(ErrorCode::Internal, e.what()));
            return;
        }
        if (stopping_) return;
        conn->send(f.type, f.request_id, reply);
    });
}

// ----------------------------------------------------------------- RpcClient

RpcClient::RpcClient(const std::string& address, std::shared_ptr<Shaper> shaper, int connect_timeout_ms)
    : address_(address) {
    const int fd = connect_with_timeout(address, connect_timeout_ms);
    conn_ = std::make_shared<Connection>(fd, std::move(shaper));
    conn_->start([this](Frame&& f) { on_frame(std::move(f)); },
                 [this](const std::string& reason) { on_close(reason); });
}

RpcClient::~RpcClient() {
    conn_->shutdown();
    conn_->join();
}

std::vector<uint8_t> RpcClient::call(MsgType type, std::span<const uint8_t> payload, int deadline_ms) {
    if (deadline_ms <= 0) throw InputError("deadline must be positive");
    std::future<Frame> reply;
    uint64_t id;
    {
        std::lock_guard lock(mu_);
        if (conn_->closed()) throw ConnectionError("connection to " + address_ + " lost: " + close_reason_);
        id = next_id_++;
        reply = pending_[id].get_future();
    }
    if (!conn_->send(type, id, payload)) {
        std::lock_guard lock(mu_);
        pending_.erase(id);
        throw ConnectionError("connection to " + address_ + " closed");
    }
    if (reply.wait_for(std::chrono::milliseconds(deadline_ms)) != std::future_status::ready) {
        std::lock_guard lock(mu_);
        pending_.erase(id);
        throw TimeoutError("no reply from " + address_ + " within " + std::to_string(deadline_ms) + " ms");
    }
    Frame f = reply.get();
    if (f.type == MsgType::Error) {
        auto [code, msg] = decode_error(f.payload);
        throw RemoteError(code, msg);
    }
    if (f.type != type) throw ProtocolError("reply type does not match request");
    return std::move(f.payload);
}

void RpcClient::on_frame(Frame&& f) {
    std::lock_guard lock(mu_);
    auto it = pending_.find(f.request_id);
    if (it == pending_.end()) return;  // late reply after a timeout
    it->second.set_value(std::move(f));
    pending_.erase(it);
}

void RpcClient::on_close(const std::string& reason) {
    std::lock_guard lock(mu_);
    close_reason_ = reason;
    for (auto& [_, p] : pending_)
        p.set_exception(std::make_exception_ptr(ConnectionError("connection to " + address_ + " lost: " + reason)));
    pending_.clear();
}

// ------------------------------------------------------------------- RpcPool

RpcPool::RpcPool(LinkShape shape, int connect_timeout_ms)
    : shaper_(std::make_shared<Shaper>(shape)), connect_timeout_ms_(connect_timeout_ms) {}

std::shared_ptr<RpcClient> RpcPool::client_for(const std::string& address) {
    {
        std::lock_guard lock(mu_);
        if (blocked_.contains(address)) throw ConnectionError("address " + address + " is partitioned");
        auto it = clients_.find(address);
        if (it != clients_.end() && it->second->alive()) return it->second;
    }
    auto fresh = std::make_shared<RpcClient>(address, shaper_, connect_timeout_ms_);
    std::lock_guard lock(mu_);
    auto& slot = clients_[address];
    if (!slot || !slot->alive()) slot = fresh;
    return slot;
}

std::vector<uint8_t> RpcPool::call(const std::string& address, MsgType type, std::span<const uint8_t> payload,
                                   int deadline_ms) {
    auto client = client_for(address);
    try {
        return client->call(type, payload, deadline_ms);
    } catch (const ConnectionError&) {
        drop(address);
        throw;
    }
}

void RpcPool::block(const std::string& address) {
    std::lock_guard lock(mu_);
    blocked_.insert(address);
    clients_.erase(address);
}

void RpcPool::unblock(const std::string& address) {
    std::lock_guard lock(mu_);
    blocked_.erase(address);
}

void RpcPool::drop(const std::string& address) {
    std::shared_ptr<RpcClient> old;
    std::lock_guard lock(mu_);
    auto it = clients_.find(address);
    if (it != clients_.end()) {
        old = std::move(it->second);
        clients_.erase(it);
    }
}

}  // namespace swarm::transport

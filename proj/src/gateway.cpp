#include "swarm/gateway.hpp"

#include <sys/socket.h>

#include <filesystem>
#include <fstream>

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include "swarm/registry_node.hpp"

namespace swarm::gateway {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using nlohmann::json;

GenerateRequest parse_generate_request(const json& j) {
    if (!j.is_object()) throw InputError("request body must be a JSON object");
    GenerateRequest r;
    if (!j.contains("prompt") || !j["prompt"].is_string()) throw InputError("prompt must be a string");
    r.prompt = j["prompt"].get<std::string>();
    if (r.prompt.empty()) throw InputError("prompt must not be empty");
    if (j.contains("max_new_tokens")) {
        if (!j["max_new_tokens"].is_number_integer()) throw InputError("max_new_tokens must be an integer");
        const int64_t n = j["max_new_tokens"].get<int64_t>();
        if (n < 1 || n > kMaxNewTokens) throw InputError("max_new_tokens must be in [1, 512]");
        r.max_new_tokens = uint32_t(n);
    }
    const std::string strategy = j.value("strategy", std::string("greedy"));
    if (strategy == "temperature") {
        if (!j.contains("temperature") || !j["temperature"].is_number())
            throw InputError("temperature strategy needs a numeric temperature");
        const double t = j["temperature"].get<double>();
        if (!(t > 0.0)) throw InputError("temperature must be positive");
        r.sampling = model::Sampling::with_temperature(float(t));
    } else if (strategy != "greedy") {
        throw InputError("strategy must be greedy or temperature");
    }
    if (j.contains("seed")) {
        if (!j["seed"].is_number_integer() || (!j["seed"].is_number_unsigned() && j["seed"].get<int64_t>() < 0))
            throw InputError("seed must be a non-negative integer");
        r.seed = j["seed"].get<uint64_t>();
    }
    return r;
}

std::vector<int> encode_bytes(const std::string& text) {
    std::vector<int> out;
    for (unsigned char c : text) out.push_back(int(c));
    return out;
}

std::string decode_bytes(std::span<const int> tokens) {
    std::string out;
    for (int t : tokens) {
        const auto c = uint8_t(t);
        if (c < 0x80) {
            out.push_back(char(c));
        } else {
            out.push_back(char(0xC0 | (c >> 6)));
            out.push_back(char(0x80 | (c & 0x3F)));
        }
    }
    return out;
}

json swarm_status(const std::vector<registry::ServerEntry>& entries, int n_blocks, int64_t now) {
    std::vector<registry::ServerEntry> live;
    for (const auto& e : entries)
        if (e.state == registry::ServerState::Online && !e.expired(now)) live.push_back(e);
    std::vector<int> coverage(size_t(std::max(n_blocks, 0)), 0);
    json servers = json::array();
    for (const auto& e : live) {
        for (int b = std::max(0, e.range.start); b < std::min(n_blocks, e.range.end); ++b) ++coverage[size_t(b)];
        servers.push_back({{"server_id", registry::to_hex(e.server_id)},
                           {"address", e.address},
                           {"range", {e.range.start, e.range.end}},
                           {"throughput", e.throughput},
                           {"age_ms", now - e.announced_at}});
    }
    const auto tps = allocation::block_throughputs(registry::swarm_view(live, n_blocks));
    return {{"n_blocks", n_blocks},
            {"coverage", coverage},
            {"servers", servers},
            {"bottleneck", n_blocks > 0 ? allocation::swarm_throughput(tps) : 0.0f}};
}

struct Gateway::Impl {
    asio::io_context io;
    tcp::acceptor acceptor{io};
    std::map<int, std::shared_ptr<tcp::socket>> sockets;
};

Gateway::Gateway(std::shared_ptr<const model::Checkpoint> ckpt, GatewayConfig cfg)
    : ckpt_(std::move(ckpt)), cfg_(std::move(cfg)), client_(cfg_.client), impl_(std::make_unique<Impl>()) {
    if (!ckpt_) throw InputError("gateway needs a checkpoint");
    if (ckpt_->config.vocab < 256) throw InputError("gateway needs a byte-level vocabulary (V >= 256)");
}

Gateway::~Gateway() { stop(); }

std::string Gateway::address() const { return cfg_.host + ":" + std::to_string(port_); }

void Gateway::start() {
    const tcp::endpoint ep(asio::ip::make_address(cfg_.host), cfg_.port);
    impl_->acceptor.open(ep.protocol());
    impl_->acceptor.set_option(asio::socket_base::reuse_address(true));
    impl_->acceptor.bind(ep);
    impl_->acceptor.listen();
    port_ = impl_->acceptor.local_endpoint().port();
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    spdlog::info("gateway listening on {}", address());
}

void Gateway::stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(impl_->acceptor.native_handle(), SHUT_RDWR);
    if (acceptor_.joinable()) acceptor_.join();
    beast::error_code ec;
    impl_->acceptor.close(ec);
    std::map<int, std::thread> conns;
    {
        std::lock_guard lock(mu_);
        for (auto& [_, s] : impl_->sockets) ::shutdown(s->native_handle(), SHUT_RDWR);
        conns.swap(conns_);
    }
    for (auto& [_, t] : conns)
        if (t.joinable()) t.join();
}

void Gateway::accept_loop() {
    while (running_) {
        auto sock = std::make_shared<tcp::socket>(impl_->io);
        beast::error_code ec;
        impl_->acceptor.accept(*sock, ec);
        if (ec || !running_) break;
        std::lock_guard lock(mu_);
        for (int id : finished_) {
            auto it = conns_.find(id);
            if (it != conns_.end()) {
                it->second.join();
                conns_.erase(it);
            }
        }
        finished_.clear();
        const int id = next_id_++;
        impl_->sockets[id] = sock;
        std::string ip = sock->remote_endpoint(ec).address().to_string();
        conns_[id] = std::thread([this, id, ip] { serve(id, ip); });
    }
}

bool Gateway::acquire(const std::string& ip) {
    std::lock_guard lock(mu_);
    auto& n = active_[ip];
    if (n >= cfg_.per_ip_limit) return false;
    ++n;
    return true;
}

void Gateway::release(const std::string& ip) {
    std::lock_guard lock(mu_);
    if (--active_[ip] == 0) active_.erase(ip);
}

Gateway::Outcome Gateway::run_generate(const GenerateRequest& req, const std::function<void(size_t, int)>& on_token) {
    const auto tokens = encode_bytes(req.prompt);
    const auto& cfg = ckpt_->config;
    if (tokens.size() + req.max_new_tokens > cfg.max_seq)
        return {400, {{"error", "prompt plus max_new_tokens exceed the model context of " +
                                    std::to_string(cfg.max_seq) + " tokens"}}};
    try {
        std::vector<registry::ServerEntry> entries;
        try {
            entries = client_.lookup_all();
        } catch (const ConnectionError&) {
        }
        client::plan_chain(entries, client_.rtts_for(entries), {0, int(cfg.n_layers)}, 4.0 * cfg.hidden);
    } catch (const NoRouteError& e) {
        return {503, {{"error", e.what()}, {"missing_blocks", e.missing_blocks}}};
    }
    try {
        const double t0 = monotonic_seconds();
        const auto res = client::generate(client_, *ckpt_, tokens, req.max_new_tokens, req.sampling, req.seed,
                                          transport::Encoding::F32, on_token);
        const double dt = std::max(monotonic_seconds() - t0, 1e-9);
        return {200,
                {{"text", decode_bytes(res.tokens)},
                 {"tokens", res.tokens},
                 {"steps_per_s", double(res.tokens.size()) / dt},
                 {"recoveries", res.recoveries}}};
    } catch (const NoRouteError& e) {
        return {503, {{"error", e.what()}, {"missing_blocks", e.missing_blocks}}};
    } catch (const InputError& e) {
        return {400, {{"error", e.what()}}};
    } catch (const Error& e) {
        return {504, {{"error", e.what()}}};
    }
}

namespace {

http::response<http::string_body> make_response(const http::request<http::string_body>& req, http::status status,
                                                 std::string body, const std::string& type = "application/json") {
    http::response<http::string_body> res{status, req.version()};
    res.set(http::field::content_type, type);
    res.keep_alive(req.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    return res;
}

std::string dump(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

constexpr const char* kIndexPage =
    "<!doctype html><html><head><meta charset=\"utf-8\"><title>swarm gateway</title></head><body>"
    "<h1>swarm gateway</h1><ul>"
    "<li>POST /api/v1/generate</li><li>WS /api/v1/stream (petal-stream-v1)</li><li>GET /api/v1/swarm</li>"
    "</ul></body></html>";

}  // namespace

void Gateway::serve(int id, std::string peer_ip) {
    std::shared_ptr<tcp::socket> sock;
    {
        std::lock_guard lock(mu_);
        sock = impl_->sockets.at(id);
    }
    try {
        beast::flat_buffer buf;
        while (running_) {
            http::request_parser<http::string_body> parser;
            parser.body_limit(1 << 20);
            http::read(*sock, buf, parser);
            auto req = parser.release();
            const std::string target(req.target());

            if (websocket::is_upgrade(req)) {
                if (target != "/api/v1/stream") {
                    http::write(*sock, make_response(req, http::status::not_found, R"({"error":"not found"})"));
                    break;
                }
                websocket::stream<tcp::socket&> ws(*sock);
                const std::string offered(req[http::field::sec_websocket_protocol]);
                ws.set_option(websocket::stream_base::decorator([&](websocket::response_type& res) {
                    if (offered.find(kStreamSubprotocol) != std::string::npos)
                        res.set(http::field::sec_websocket_protocol, kStreamSubprotocol);
                }));
                ws.accept(req);
                ws.text(true);
                auto send_frame = [&](const json& j) { ws.write(asio::buffer(dump(j))); };
                beast::flat_buffer msg;
                ws.read(msg);
                GenerateRequest g;
                try {
                    g = parse_generate_request(json::parse(beast::buffers_to_string(msg.data())));
                } catch (const std::exception& e) {
                    send_frame({{"type", "error"}, {"code", 400}, {"message", e.what()}});
                    ws.close(websocket::close_code::policy_error);
                    break;
                }
                if (!acquire(peer_ip)) {
                    send_frame({{"type", "error"}, {"code", 429}, {"message", "too many concurrent sessions"}});
                    ws.close(websocket::close_code::try_again_later);
                    break;
                }
                Outcome out;
                try {
                    out = run_generate(g, [&](size_t, int tok) {
                        send_frame({{"type", "token"}, {"text", decode_bytes(std::span<const int>(&tok, 1))},
                                    {"token", tok}});
                    });
                } catch (...) {
                    release(peer_ip);
                    throw;
                }
                release(peer_ip);
                if (out.status == 200) {
                    send_frame({{"type", "done"}, {"steps_per_s", out.body["steps_per_s"]}});
                    ws.close(websocket::close_code::normal);
                } else {
                    send_frame({{"type", "error"}, {"code", out.status}, {"message", out.body.value("error", "")}});
                    ws.close(websocket::close_code::internal_error);
                }
                break;
            }

            http::response<http::string_body> res;
            if (target == "/api/v1/generate") {
                if (req.method() != http::verb::post) {
                    res = make_response(req, http::status::method_not_allowed, R"({"error":"use POST"})");
                } else {
                    std::optional<GenerateRequest> g;
                    std::string err;
                    try {
                        g = parse_generate_request(json::parse(req.body()));
                    } catch (const std::exception& e) {
                        err = e.what();
                    }
                    if (!g) {
                        res = make_response(req, http::status::bad_request, dump({{"error", err}}));
                    } else if (!acquire(peer_ip)) {
                        res = make_response(req, http::status::too_many_requests,
                                            R"({"error":"too many concurrent sessions"})");
                    } else {
                        Outcome out;
                        try {
                            out = run_generate(*g);
                        } catch (...) {
                            release(peer_ip);
                            throw;
                        }
                        release(peer_ip);
                        res = make_response(req, http::status(out.status), dump(out.body));
                    }
                }
            } else if (target == "/api/v1/swarm" && req.method() == http::verb::get) {
                std::vector<registry::ServerEntry> entries;
                try {
                    entries = client_.lookup_all();
                } catch (const Error&) {
                }
                res = make_response(req, http::status::ok,
                                    dump(swarm_status(entries, int(ckpt_->config.n_layers), unix_millis())));
            } else if ((target == "/" || target == "/index.html") && req.method() == http::verb::get) {
                std::string page = kIndexPage;
                if (!cfg_.static_dir.empty()) {
                    std::ifstream f(std::filesystem::path(cfg_.static_dir) / "index.html", std::ios::binary);
                    if (f) page.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
                }
                res = make_response(req, http::status::ok, page, "text/html; charset=utf-8");
            } else {
                res = make_response(req, http::status::not_found, R"({"error":"not found"})");
            }
            http::write(*sock, res);
            if (!res.keep_alive()) break;
        }
    } catch (const std::exception& e) {
        spdlog::debug("gateway connection from {} ended: {}", peer_ip, e.what());
    }
    beast::error_code ec;
    sock->shutdown(tcp::socket::shutdown_both, ec);
    sock->close(ec);
    std::lock_guard lock(mu_);
    impl_->sockets.erase(id);
    finished_.push_back(id);
}

}  // namespace swarm::gateway

#include "swarm/bench.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "swarm/registry_node.hpp"

extern char** environ;

namespace swarm::bench {

using nlohmann::json;

double offload_upper_bound(double params, int bits, double link_gbit_s) {
    if (params < 0.0 || bits <= 0 || !(link_gbit_s > 0.0)) throw InputError("offload_upper_bound: invalid inputs");
    const double bytes = params * double(bits) / 8.0;
    const double bytes_per_s = link_gbit_s / 8.0 * 1e9;
    return bytes / bytes_per_s;
}

std::vector<std::string> SwarmControl::registries() const {
    std::vector<std::string> out;
    for (size_t i = 0; i < size(); ++i)
        if (alive(i)) out.push_back(address(i));
    return out;
}

InProcessSwarm::InProcessSwarm(std::shared_ptr<const model::Checkpoint> ckpt, bool background)
    : ckpt_(std::move(ckpt)), background_(background) {}

InProcessSwarm::~InProcessSwarm() {
    for (auto& n : nodes_) n->kill();
}

size_t InProcessSwarm::start_server(const ServerLaunch& spec) {
    server::ServerConfig c;
    c.blocks = spec.blocks;
    c.span = spec.span;
    c.throughput = spec.throughput;
    c.shape = spec.shape;
    c.quantize = spec.quantize;
    c.rebalance = spec.rebalance;
    c.rebalance_min_s = spec.rebalance_min_s;
    c.rebalance_max_s = spec.rebalance_max_s;
    c.ttl_ms = spec.ttl_ms;
    c.gossip_ms = spec.gossip_ms;
    c.background = background_;
    c.bootstrap = registries();
    auto& n = *nodes_.emplace_back(std::make_unique<server::ServerNode>(ckpt_, c));
    n.start();
    addresses_.push_back(n.address());
    sync();
    return nodes_.size() - 1;
}

void InProcessSwarm::kill_server(size_t i) { nodes_.at(i)->kill(); }
void InProcessSwarm::stop_server(size_t i) { nodes_.at(i)->shutdown(); }
bool InProcessSwarm::alive(size_t i) const { return nodes_.at(i)->running(); }
std::string InProcessSwarm::address(size_t i) const { return addresses_.at(i); }

void InProcessSwarm::sync() {
    for (auto& n : nodes_)
        if (n->running()) n->gossip_once();
}

ProcessSwarm::ProcessSwarm(std::string exe, std::string checkpoint_path)
    : exe_(std::move(exe)), checkpoint_(std::move(checkpoint_path)) {}

ProcessSwarm::~ProcessSwarm() {
    for (size_t i = 0; i < procs_.size(); ++i)
        if (procs_[i].alive) kill_server(i);
}

size_t ProcessSwarm::start_server(const ServerLaunch& spec) {
    std::vector<std::string> args{exe_, "server", "--checkpoint", checkpoint_, "--port", "0"};
    if (spec.blocks) {
        args.insert(args.end(), {"--blocks", std::to_string(spec.blocks->start) + ":" + std::to_string(spec.blocks->end)});
    } else {
        args.insert(args.end(), {"--blocks", "auto"});
        if (spec.span > 0) args.insert(args.end(), {"--span", std::to_string(spec.span)});
    }
    if (spec.throughput > 0.0f) args.insert(args.end(), {"--throughput", std::to_string(spec.throughput)});
    if (!spec.shape.passthrough()) args.insert(args.end(), {"--shape", spec.shape.str()});
    args.insert(args.end(), {"--quantize", server::to_string(spec.quantize)});
    if (!spec.rebalance) args.push_back("--no-rebalance");
    args.insert(args.end(), {"--rebalance-min", std::to_string(spec.rebalance_min_s), "--rebalance-max",
                             std::to_string(spec.rebalance_max_s), "--ttl-ms", std::to_string(spec.ttl_ms),
                             "--gossip-ms", std::to_string(spec.gossip_ms)});
    const auto boot = registries();
    if (!boot.empty()) {
        args.push_back("--bootstrap");
        args.insert(args.end(), boot.begin(), boot.end());
    }

    int fds[2];
    if (::pipe(fds) != 0) throw Error("pipe failed");
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_adddup2(&fa, fds[1], STDOUT_FILENO);
    posix_spawn_file_actions_addclose(&fa, fds[0]);
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = -1;
    const int rc = posix_spawn(&pid, exe_.c_str(), &fa, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&fa);
    ::close(fds[1]);
    if (rc != 0) {
        ::close(fds[0]);
        throw Error("cannot spawn " + exe_);
    }

    std::string line;
    const double deadline = monotonic_seconds() + 60.0;
    while (line.find('\n') == std::string::npos) {
        pollfd p{fds[0], POLLIN, 0};
        const int wait_ms = int(std::max(0.0, deadline - monotonic_seconds()) * 1000.0);
        if (wait_ms == 0 || ::poll(&p, 1, wait_ms) <= 0) break;
        char buf[256];
        const ssize_t n = ::read(fds[0], buf, sizeof buf);
        if (n <= 0) break;
        line.append(buf, size_t(n));
    }
    ::close(fds[0]);
    if (line.rfind("READY ", 0) != 0) {
        ::kill(pid, SIGKILL);
        ::waitpid(pid, nullptr, 0);
        throw Error("server process did not become ready: " + line);
    }
    Proc p;
    p.pid = pid;
    p.address = line.substr(6, line.find('\n') - 6);
    p.alive = true;
    procs_.push_back(p);
    return procs_.size() - 1;
}

void ProcessSwarm::kill_server(size_t i) {
    auto& p = procs_.at(i);
    if (!p.alive) return;
    ::kill(p.pid, SIGKILL);
    ::waitpid(p.pid, nullptr, 0);
    p.alive = false;
}

void ProcessSwarm::stop_server(size_t i) {
    auto& p = procs_.at(i);
    if (!p.alive) return;
    ::kill(p.pid, SIGTERM);
    const double deadline = monotonic_seconds() + 10.0;
    while (monotonic_seconds() < deadline) {
        if (::waitpid(p.pid, nullptr, WNOHANG) == p.pid) {
            p.alive = false;
            return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    kill_server(i);
}

bool ProcessSwarm::alive(size_t i) const { return procs_.at(i).alive; }

namespace {

Tensor token_rows(const model::Checkpoint& ckpt, SplitMix64& rng, size_t n) {
    std::vector<int> toks;
    for (size_t i = 0; i < n; ++i) toks.push_back(int(rng.next() % ckpt.config.vocab));
    return model::embed(ckpt, toks);
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

}  // namespace

double time_inference_step(client::SwarmClient& client, const model::Checkpoint& ckpt, size_t steps,
                           transport::Encoding enc, size_t context) {
    context = std::max<size_t>(context, 1);
    if (steps == 0 || steps + context > ckpt.config.max_seq) throw InputError("steps plus context exceed max_seq");
    client::SessionConfig sc;
    sc.max_len = uint32_t(steps + context);
    sc.encoding = enc;
    client::InferenceSession s(client, ckpt.config.n_layers, ckpt.config.hidden, sc);
    SplitMix64 rng(1);
    s.step(token_rows(ckpt, rng, context));
    const double t0 = monotonic_seconds();
    for (size_t i = 0; i < steps; ++i) s.step(token_rows(ckpt, rng, 1));
    return (monotonic_seconds() - t0) / double(steps);
}

double parallel_forward_tokens_per_s(client::SwarmClient& client, const model::Checkpoint& ckpt, size_t batch,
                                     size_t seq_len) {
    const auto& cfg = ckpt.config;
    const auto chain = client.plan({0, int(cfg.n_layers)}, 4.0 * double(cfg.hidden * seq_len * batch), {});
    SplitMix64 rng(2);
    Tensor x = token_rows(ckpt, rng, batch * seq_len);
    x.shape = {uint32_t(batch), uint32_t(seq_len), cfg.hidden};
    client::ForwardHandle h;
    const double t0 = monotonic_seconds();
    client::distributed_forward(client, chain, x, h);
    const double dt = monotonic_seconds() - t0;
    // Release the tapes right away.
    try {
        client::distributed_backward(client, h, Tensor::zeros(x.shape));
    } catch (const Error&) {
    }
    return double(batch * seq_len) / std::max(dt, 1e-9);
}

Concurrency measure_concurrency(const client::ClientConfig& cfg, const model::Checkpoint& ckpt, size_t n_clients,
                                size_t steps) {
    Concurrency out;
    {
        client::SwarmClient c(cfg);
        time_inference_step(c, ckpt, 1);
        out.solo_step_s = time_inference_step(c, ckpt, steps);
    }
    std::vector<std::unique_ptr<client::SwarmClient>> clients;
    for (size_t i = 0; i < n_clients; ++i) {
        clients.push_back(std::make_unique<client::SwarmClient>(cfg));
        clients.back()->lookup_all();
        clients.back()->rtts_for(clients.back()->last_entries());
    }
    out.client_step_s.assign(n_clients, 0.0);
    std::vector<std::thread> threads;
    std::mutex mu;
    std::condition_variable cv;
    bool go = false;
    std::vector<std::string> errors;
    for (size_t i = 0; i < n_clients; ++i) {
        threads.emplace_back([&, i] {
            {
                std::unique_lock lock(mu);
                cv.wait(lock, [&] { return go; });
            }
            try {
                out.client_step_s[i] = time_inference_step(*clients[i], ckpt, steps);
            } catch (const std::exception& e) {
                std::lock_guard lock(mu);
                errors.push_back(e.what());
            }
        });
    }
    {
        std::lock_guard lock(mu);
        go = true;
    }
    cv.notify_all();
    for (auto& t : threads) t.join();
    if (!errors.empty()) throw Error("concurrent client failed: " + errors.front());
    for (double s : out.client_step_s) out.slowdown.push_back(s / out.solo_step_s - 1.0);
    double sum = 0.0;
    for (double s : out.slowdown) sum += s;
    out.mean_slowdown = out.slowdown.empty() ? 0.0 : sum / double(out.slowdown.size());
    return out;
}

void to_json(json& j, const BenchReport& r) {
    j = json{{"scenario", r.scenario},
             {"config", r.config},
             {"single_batch_steps_per_s", r.single_batch_steps_per_s},
             {"parallel_forward_tokens_per_s", r.parallel_forward_tokens_per_s},
             {"client_slowdown", r.client_slowdown},
             {"mean_slowdown", r.mean_slowdown}};
}

BenchReport bench_inference(const std::string& scenario, const std::vector<std::string>& registries,
                            const model::Checkpoint& ckpt, const BenchOptions& opts) {
    client::ClientConfig cfg;
    cfg.registries = registries;
    cfg.shape = opts.client_shape;
    client::SwarmClient client(cfg);
    BenchReport r;
    r.scenario = scenario;
    r.config = {{"servers", client.lookup_all().size()},
                {"shape", opts.client_shape.str()},
                {"seq_len", opts.seq_len},
                {"n_clients", opts.n_clients},
                {"runs", opts.runs},
                {"forward_batch", opts.forward_batch},
                {"forward_seq", opts.forward_seq}};
    std::vector<double> rates;
    time_inference_step(client, ckpt, 1);
    for (size_t i = 0; i < std::max<size_t>(1, opts.runs); ++i)
        rates.push_back(1.0 / time_inference_step(client, ckpt, opts.seq_len));
    r.single_batch_steps_per_s = median(rates);
    if (opts.forward_batch > 0) {
        std::vector<double> fw;
        for (size_t i = 0; i < std::max<size_t>(1, opts.runs); ++i)
            fw.push_back(parallel_forward_tokens_per_s(client, ckpt, opts.forward_batch, opts.forward_seq));
        r.parallel_forward_tokens_per_s = median(fw);
    }
    if (opts.n_clients > 1) {
        const auto c = measure_concurrency(cfg, ckpt, opts.n_clients, opts.seq_len);
        r.client_slowdown = c.slowdown;
        r.mean_slowdown = c.mean_slowdown;
    }
    return r;
}

json BenchTable::to_json() const {
    json j{{"rows", rows}, {"seq_lens", seq_lens}, {"batches", batches}, {"cells", json::array()}};
    for (size_t r = 0; r < rows.size(); ++r) {
        for (size_t s = 0; s < seq_lens.size(); ++s)
            for (size_t b = 0; b < batches.size(); ++b)
                j["cells"].push_back({{"row", rows[r]},
                                      {"seq_len", seq_lens[s]},
                                      {"batch", batches[b]},
                                      {batches[b] == 1 ? "steps_per_s" : "tokens_per_s", cells[r][s][b]}});
    }
    return j;
}

std::string BenchTable::format() const {
    std::ostringstream os;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-24s", "network");
    os << buf;
    for (size_t s : seq_lens)
        for (size_t b : batches) {
            std::snprintf(buf, sizeof buf, " %16s", ("seq" + std::to_string(s) + "/b" + std::to_string(b)).c_str());
            os << buf;
        }
    os << "\n";
    for (size_t r = 0; r < rows.size(); ++r) {
        std::snprintf(buf, sizeof buf, "%-24s", rows[r].c_str());
        os << buf;
        for (size_t s = 0; s < seq_lens.size(); ++s)
            for (size_t b = 0; b < batches.size(); ++b) {
                std::snprintf(buf, sizeof buf, " %16.2f", cells[r][s][b]);
                os << buf;
            }
        os << "\n";
    }
    os << "(batch 1: inference steps/s; larger batches: parallel forward tokens/s)\n";
    return os.str();
}

BenchTable bench_table(const std::vector<ShapeRow>& rows, const model::Checkpoint& ckpt,
                       const std::function<std::vector<std::string>(const transport::LinkShape&)>& launch,
                       size_t steps, std::vector<size_t> seq_lens, std::vector<size_t> batches) {
    BenchTable t;
    t.batches = std::move(batches);
    for (size_t s : seq_lens) {
        const size_t capped = std::min<size_t>(s, ckpt.config.max_seq);
        if (std::find(t.seq_lens.begin(), t.seq_lens.end(), capped) == t.seq_lens.end()) t.seq_lens.push_back(capped);
    }
    for (const auto& row : rows) {
        t.rows.push_back(row.name);
        const auto regs = launch(row.shape);
        client::ClientConfig cfg;
        cfg.registries = regs;
        cfg.shape = row.shape;
        client::SwarmClient c(cfg);
        auto& cells = t.cells.emplace_back();
        for (size_t seq : t.seq_lens) {
            auto& line = cells.emplace_back();
            for (size_t b : t.batches) {
                if (b <= 1) {
                    const size_t n = std::min(steps, seq - 1);
                    line.push_back(1.0 / time_inference_step(c, ckpt, n, transport::Encoding::F32, seq - n));
                } else {
                    line.push_back(parallel_forward_tokens_per_s(c, ckpt, b, seq));
                }
                spdlog::info("bench {} seq {} batch {}: {:.2f}", row.name, seq, b, line.back());
            }
        }
    }
    return t;
}

namespace {

ServerLaunch parse_launch(const json& j) {
    if (!j.is_object()) throw InputError("server launch must be an object");
    ServerLaunch l;
    if (j.contains("blocks")) {
        const auto& b = j["blocks"];
        if (!b.is_array() || b.size() != 2 || !b[0].is_number_integer() || !b[1].is_number_integer())
            throw InputError("blocks must be [start, end]");
        l.blocks = BlockRange{b[0].get<int>(), b[1].get<int>()};
        if (l.blocks->start < 0 || l.blocks->end <= l.blocks->start) throw InputError("empty block range");
    }
    l.span = j.value("span", 0);
    l.throughput = j.value("throughput", 0.0f);
    if (j.contains("shape")) l.shape = transport::LinkShape::parse(j["shape"].get<std::string>());
    if (j.contains("quantize")) l.quantize = server::parse_quantize(j["quantize"].get<std::string>());
    l.rebalance = j.value("rebalance", false);
    l.rebalance_min_s = j.value("rebalance_min_s", l.rebalance_min_s);
    l.rebalance_max_s = j.value("rebalance_max_s", l.rebalance_max_s);
    l.ttl_ms = j.value("ttl_ms", l.ttl_ms);
    l.gossip_ms = j.value("gossip_ms", l.gossip_ms);
    if (l.ttl_ms <= 0 || l.gossip_ms <= 0 || l.span < 0) throw InputError("ttl_ms and gossip_ms must be positive");
    return l;
}

}  // namespace

ChurnScenario parse_churn_scenario(const json& j) {
    try {
        if (!j.is_object()) throw InputError("churn script must be an object");
        ChurnScenario sc;
        sc.duration_ms = j.value("duration_ms", sc.duration_ms);
        sc.seed = j.value("seed", sc.seed);
        sc.tokens_per_session = j.value("tokens_per_session", sc.tokens_per_session);
        sc.poll_ms = j.value("poll_ms", sc.poll_ms);
        if (sc.duration_ms <= 0 || sc.tokens_per_session == 0 || !(sc.poll_ms > 0.0))
            throw InputError("duration_ms, tokens_per_session and poll_ms must be positive");
        if (!j.contains("servers") || !j["servers"].is_array()) throw InputError("servers must be an array");
        for (const auto& s : j["servers"]) sc.initial.push_back(parse_launch(s));
        size_t known = sc.initial.size();
        int64_t last = 0;
        for (const auto& e : j.value("events", json::array())) {
            ChurnEvent ev;
            ev.t_ms = e.at("t_ms").get<int64_t>();
            if (ev.t_ms < last) throw InputError("events must be sorted by t_ms");
            last = ev.t_ms;
            const auto action = e.at("action").get<std::string>();
            if (action == "start") {
                ev.kind = ChurnEvent::Kind::Start;
                ev.launch = parse_launch(e.at("launch"));
                ev.server = known++;
            } else {
                if (action == "kill") ev.kind = ChurnEvent::Kind::Kill;
                else if (action == "stop") ev.kind = ChurnEvent::Kind::Stop;
                else if (action == "partition") ev.kind = ChurnEvent::Kind::Partition;
                else if (action == "heal") ev.kind = ChurnEvent::Kind::Heal;
                else throw InputError("unknown churn action: " + action);
                ev.server = e.at("server").get<size_t>();
                if (ev.server >= known) throw InputError("event refers to a server not started yet");
            }
            sc.events.push_back(ev);
        }
        return sc;
    } catch (const json::exception& e) {
        throw InputError(std::string("bad churn script: ") + e.what());
    }
}

void to_json(json& j, const ChurnMetrics& m) {
    j = json{{"sessions", m.sessions},
             {"failed_sessions", m.failed_sessions},
             {"mismatched_sessions", m.mismatched_sessions},
             {"recoveries", m.recoveries},
             {"events", m.events},
             {"rebalances", m.rebalances},
             {"recover_s", m.recover_s},
             {"gap_durations_s", m.gap_durations_s},
             {"gap_open_at_end", m.gap_open_at_end},
             {"log", m.log}};
}

ChurnMetrics churn_sim(const ChurnScenario& sc, SwarmControl& swarm, const model::Checkpoint& ckpt) {
    const auto& cfg = ckpt.config;
    if (sc.tokens_per_session + 1 > cfg.max_seq) throw InputError("tokens_per_session exceeds max_seq");
    ChurnMetrics m;
    std::mutex mu;  // guards swarm, m and partitioned
    std::set<std::string> partitioned;
    std::vector<std::string> known;  // every address ever started
    client::SwarmClient* current = nullptr;
    for (const auto& l : sc.initial) known.push_back(swarm.address(swarm.start_server(l)));

    const double t0 = monotonic_seconds();
    const double end = t0 + double(sc.duration_ms) / 1000.0;
    auto stamp = [&] { return int64_t((monotonic_seconds() - t0) * 1000.0); };
    auto note = [&](const std::string& s) {
        m.log.push_back("t=" + std::to_string(stamp()) + "ms " + s);
        spdlog::info("churn: {}", s);
    };
    std::atomic<bool> done{false};

    std::thread poller([&] {
        transport::RpcPool pool;
        double gap_since = -1.0;  // < 0 while covered
        std::map<registry::ServerId, BlockRange> ranges;
        while (!done.load()) {
            std::vector<std::string> regs;
            {
                std::lock_guard lock(mu);
                regs = swarm.registries();
            }
            std::vector<registry::ServerEntry> entries;
            bool answered = false;
            for (const auto& r : regs) {
                try {
                    entries = registry::lookup_all(pool, r, 1000);
                    answered = true;
                    break;
                } catch (const Error&) {
                }
            }
            const int64_t now = unix_millis();
            std::vector<int> cover(cfg.n_layers, 0);
            for (const auto& e : entries) {
                if (e.state != registry::ServerState::Online || e.expired(now)) continue;
                auto [it, fresh] = ranges.emplace(e.server_id, e.range);
                if (!fresh && !(it->second == e.range)) {
                    it->second = e.range;
                    std::lock_guard lock(mu);
                    ++m.rebalances;
                    note("server " + registry::to_hex(e.server_id).substr(0, 8) + " moved to [" +
                         std::to_string(e.range.start) + "," + std::to_string(e.range.end) + ")");
                }
                for (int b = std::max(0, e.range.start); b < std::min<int>(e.range.end, int(cfg.n_layers)); ++b)
                    ++cover[size_t(b)];
            }
            const bool gap = !answered || std::find(cover.begin(), cover.end(), 0) != cover.end();
            const double t = monotonic_seconds();
            if (gap && gap_since < 0.0) {
                gap_since = t;
                std::lock_guard lock(mu);
                note("coverage gap opened");
            } else if (!gap && gap_since >= 0.0) {
                std::lock_guard lock(mu);
                m.gap_durations_s.push_back(t - gap_since);
                note("coverage gap closed after " + std::to_string(t - gap_since) + " s");
                gap_since = -1.0;
            }
            std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(sc.poll_ms));
        }
        std::lock_guard lock(mu);
        m.gap_open_at_end = gap_since >= 0.0;
    });

    std::thread generator([&] {
        SplitMix64 rng(sc.seed);
        while (!done.load()) {
            client::ClientConfig cc;
            {
                std::lock_guard lock(mu);
                cc.registries = known;
            }
            client::SwarmClient client(cc);
            {
                std::lock_guard lock(mu);
                for (const auto& a : partitioned) client.pool().block(a);
                current = &client;
            }
            const size_t plen = 1 + size_t(rng.next() % 4);
            std::vector<int> prompt;
            for (size_t i = 0; i < plen; ++i) prompt.push_back(int(rng.next() % cfg.vocab));
            const size_t n_new = std::min<size_t>(sc.tokens_per_session, cfg.max_seq - plen);
            std::vector<int> got;
            uint64_t recs = 0;
            std::vector<double> slow;
            bool failed = false;
            try {
                client::SessionConfig scfg;
                scfg.max_len = uint32_t(plen + n_new);
                client::InferenceSession session(client, cfg.n_layers, cfg.hidden, scfg);
                Tensor h = model::embed(ckpt, prompt);
                for (size_t i = 0; i < n_new; ++i) {
                    const uint64_t before = session.recoveries();
                    const double s0 = monotonic_seconds();
                    const Tensor y = session.step(h);
                    if (session.recoveries() > before) slow.push_back(monotonic_seconds() - s0);
                    const Tensor logits = model::lm_head(ckpt, slice_rows(y, y.rows() - 1, y.rows()));
                    const int tok = model::sample_next(logits.data, model::Sampling::greedy(), rng);
                    got.push_back(tok);
                    h = model::embed(ckpt, std::span<const int>(&tok, 1));
                }
                recs = session.recoveries();
            } catch (const Error& e) {
                failed = true;
                std::lock_guard lock(mu);
                note(std::string("session failed: ") + e.what());
            }
            const bool match = !failed && got == model::generate_local(ckpt, prompt, n_new);
            std::lock_guard lock(mu);
            current = nullptr;
            ++m.sessions;
            if (failed) ++m.failed_sessions;
            else if (!match) ++m.mismatched_sessions;
            m.recoveries += recs;
            m.recover_s.insert(m.recover_s.end(), slow.begin(), slow.end());
        }
    });

    for (const auto& ev : sc.events) {
        const double at = t0 + double(ev.t_ms) / 1000.0;
        if (at >= end) break;
        std::this_thread::sleep_for(std::chrono::duration<double>(std::max(0.0, at - monotonic_seconds())));
        std::lock_guard lock(mu);
        try {
            switch (ev.kind) {
            case ChurnEvent::Kind::Kill:
                swarm.kill_server(ev.server);
                note("kill server " + std::to_string(ev.server));
                break;
            case ChurnEvent::Kind::Stop:
                swarm.stop_server(ev.server);
                note("stop server " + std::to_string(ev.server));
                break;
            case ChurnEvent::Kind::Start: {
                const size_t i = swarm.start_server(ev.launch);
                known.push_back(swarm.address(i));
                note("start server " + std::to_string(i) + " at " + swarm.address(i));
                break;
            }
            case ChurnEvent::Kind::Partition:
                partitioned.insert(swarm.address(ev.server));
                if (current) current->pool().block(swarm.address(ev.server));
                note("partition server " + std::to_string(ev.server));
                break;
            case ChurnEvent::Kind::Heal:
                partitioned.erase(swarm.address(ev.server));
                if (current) current->pool().unblock(swarm.address(ev.server));
                note("heal server " + std::to_string(ev.server));
                break;
            }
            ++m.events;
        } catch (const Error& e) {
            note(std::string("event failed: ") + e.what());
        }
    }
    std::this_thread::sleep_for(std::chrono::duration<double>(std::max(0.0, end - monotonic_seconds())));
    done = true;
    generator.join();
    poller.join();
    return m;
}

}  // namespace swarm::bench

#include <signal.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "swarm/bench.hpp"
#include "swarm/gateway.hpp"
#include "swarm/quant.hpp"
#include "swarm/registry_node.hpp"

using namespace swarm;
using nlohmann::json;

namespace {

std::vector<std::string> split_list(const std::vector<std::string>& in) {
    std::vector<std::string> out;
    for (const auto& s : in) {
        size_t pos = 0;
        while (pos <= s.size()) {
            const size_t c = s.find(',', pos);
            const auto part = s.substr(pos, c == std::string::npos ? std::string::npos : c - pos);
            if (!part.empty()) out.push_back(part);
            if (c == std::string::npos) break;
            pos = c + 1;
        }
    }
    return out;
}

BlockRange parse_blocks(const std::string& s) {
    const auto c = s.find(':');
    if (c == std::string::npos) throw InputError("blocks must be auto or start:end, got '" + s + "'");
    try {
        return {std::stoi(s.substr(0, c)), std::stoi(s.substr(c + 1))};
    } catch (const std::logic_error&) {
        throw InputError("blocks must be auto or start:end, got '" + s + "'");
    }
}

transport::LinkShape shape_or_env(const std::string& s) {
    return s.empty() ? transport::LinkShape::from_env() : transport::LinkShape::parse(s);
}

/// Blocks SIGINT and SIGTERM, then waits for one of them.
void wait_for_signal() {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    int sig = 0;
    sigwait(&set, &sig);
    spdlog::info("caught signal {}, shutting down", sig);
}

void block_signals() {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

void write_report(const std::string& path, const json& j) {
    std::cout << j.dump(2) << "\n";
    if (path.empty()) return;
    std::ofstream f(path);
    if (!f) throw InputError("cannot write " + path);
    f << j.dump(2) << "\n";
}

std::string self_exe() { return std::filesystem::read_symlink("/proc/self/exe").string(); }

std::vector<bench::ServerLaunch> uniform_launches(int n_blocks, int n_servers, const transport::LinkShape& shape) {
    if (n_servers <= 0 || n_servers > n_blocks) throw InputError("servers must be in 1..n_blocks");
    std::vector<bench::ServerLaunch> out;
    for (int i = 0; i < n_servers; ++i) {
        bench::ServerLaunch l;
        l.blocks = BlockRange{i * n_blocks / n_servers, (i + 1) * n_blocks / n_servers};
        l.shape = shape;
        l.throughput = 100.0f;
        out.push_back(l);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("swarm"));
    CLI::App app{"Decentralized pipeline-parallel transformer swarm"};
    app.require_subcommand(1);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off");

    // genmodel
    auto* gen = app.add_subcommand("genmodel", "Write a seeded toy checkpoint");
    uint64_t g_seed = 42;
    model::ModelConfig g_cfg{12, 256, 8, 256, 512, 4};
    std::string g_out;
    gen->add_option("--seed", g_seed);
    gen->add_option("--layers", g_cfg.n_layers);
    gen->add_option("--hidden", g_cfg.hidden);
    gen->add_option("--heads", g_cfg.n_heads);
    gen->add_option("--vocab", g_cfg.vocab);
    gen->add_option("--max-seq", g_cfg.max_seq);
    gen->add_option("--mlp-ratio", g_cfg.mlp_ratio);
    gen->add_option("--out", g_out)->required();

    // registry
    auto* reg = app.add_subcommand("registry", "Run a standalone registry replica");
    std::string r_listen = "127.0.0.1:0";
    int r_blocks = 0;
    std::vector<std::string> r_peers;
    int r_gossip = registry::kDefaultGossipMs;
    reg->add_option("--listen", r_listen);
    reg->add_option("--blocks", r_blocks, "number of model blocks")->required();
    reg->add_option("--bootstrap", r_peers, "peer registries host:port[,host:port...]");
    reg->add_option("--gossip-ms", r_gossip);

    // server
    auto* srv = app.add_subcommand("server", "Serve a range of blocks");
    std::string s_ckpt, s_blocks = "auto", s_quant = "none", s_shape, s_host = "127.0.0.1";
    uint16_t s_port = 0;
    int s_span = 0;
    std::vector<std::string> s_boot;
    float s_tp = 0.0f;
    bool s_no_rebalance = false;
    double s_rmin = 5.0, s_rmax = 10.0;
    int64_t s_ttl = registry::kDefaultTtlMs;
    int s_gossip = registry::kDefaultGossipMs;
    size_t s_capacity = 64;
    srv->add_option("--checkpoint", s_ckpt)->required();
    srv->add_option("--blocks", s_blocks, "auto or start:end");
    srv->add_option("--span", s_span, "blocks to host under auto placement");
    srv->add_option("--bootstrap", s_boot);
    srv->add_option("--quantize", s_quant, "none|activations|weights|both");
    srv->add_option("--shape", s_shape, "latency_ms:bandwidth_mbps");
    srv->add_option("--host", s_host);
    srv->add_option("--port", s_port);
    srv->add_option("--throughput", s_tp, "announce this throughput instead of measuring");
    srv->add_flag("--no-rebalance", s_no_rebalance);
    srv->add_option("--rebalance-min", s_rmin);
    srv->add_option("--rebalance-max", s_rmax);
    srv->add_option("--ttl-ms", s_ttl);
    srv->add_option("--gossip-ms", s_gossip);
    srv->add_option("--capacity", s_capacity);

    // gateway
    auto* gw = app.add_subcommand("gateway", "HTTP and WebSocket front end");
    std::string w_listen = "127.0.0.1:8080", w_ckpt, w_static, w_shape;
    std::vector<std::string> w_boot;
    size_t w_limit = 4;
    gw->add_option("--listen", w_listen);
    gw->add_option("--checkpoint", w_ckpt)->required();
    gw->add_option("--bootstrap", w_boot)->required();
    gw->add_option("--static-dir", w_static);
    gw->add_option("--shape", w_shape);
    gw->add_option("--per-ip-limit", w_limit);

    // generate
    auto* genr = app.add_subcommand("generate", "Generate tokens through the swarm");
    std::string c_ckpt, c_prompt, c_shape;
    std::vector<int> c_tokens;
    std::vector<std::string> c_boot;
    size_t c_new = 32;
    float c_temp = 0.0f;
    uint64_t c_seed = 0;
    bool c_int8 = false, c_check = false;
    genr->add_option("--checkpoint", c_ckpt)->required();
    genr->add_option("--bootstrap", c_boot)->required();
    auto* prompt_opt = genr->add_option("--prompt", c_prompt, "text, one token per byte");
    genr->add_option("--tokens", c_tokens, "token ids")->excludes(prompt_opt);
    genr->add_option("--max-new", c_new);
    genr->add_option("--temperature", c_temp, "0 means greedy");
    genr->add_option("--seed", c_seed);
    genr->add_flag("--int8", c_int8, "int8 activations on the wire");
    genr->add_flag("--check", c_check, "compare with a local single-process run");
    genr->add_option("--shape", c_shape);

    // bench
    auto* bch = app.add_subcommand("bench", "Inference and forward benchmarks over local server processes");
    std::string b_ckpt, b_shape, b_out, b_scenario = "local";
    std::vector<std::string> b_boot;
    int b_servers = 3;
    bench::BenchOptions b_opts;
    bool b_table = false;
    size_t b_table_steps = 16;
    std::vector<size_t> b_seqs{128, 2048}, b_batches{1, 64};
    bch->add_option("--checkpoint", b_ckpt)->required();
    bch->add_option("--servers", b_servers, "servers with uniform spans");
    bch->add_option("--shape", b_shape, "shaping applied to servers and client");
    bch->add_option("--bootstrap", b_boot, "bench an existing swarm instead of spawning one");
    bch->add_option("--scenario", b_scenario);
    bch->add_option("--seq-len", b_opts.seq_len);
    bch->add_option("--clients", b_opts.n_clients);
    bch->add_option("--runs", b_opts.runs);
    bch->add_option("--forward-batch", b_opts.forward_batch);
    bch->add_option("--forward-seq", b_opts.forward_seq);
    bch->add_flag("--table", b_table, "shaping rows x seq x batch grid");
    bch->add_option("--table-steps", b_table_steps);
    bch->add_option("--seq-lens", b_seqs);
    bch->add_option("--batches", b_batches);
    bch->add_option("--out", b_out);

    // churn
    auto* chn = app.add_subcommand("churn", "Run a fault-injection script against local server processes");
    std::string h_script, h_ckpt, h_out;
    bool h_in_process = false;
    chn->add_option("--script", h_script)->required();
    chn->add_option("--checkpoint", h_ckpt)->required();
    chn->add_option("--out", h_out);
    chn->add_flag("--in-process", h_in_process, "host servers in this process");

    // offload-bound
    auto* off = app.add_subcommand("offload-bound", "Offloading time bound and memory footprint");
    double o_params = 176e9, o_link = 256.0, o_server_gb = 8.0;
    int o_bits = 8;
    std::string o_out;
    off->add_option("--params", o_params);
    off->add_option("--bits", o_bits);
    off->add_option("--link", o_link, "host link in Gbit/s");
    off->add_option("--per-server-gb", o_server_gb);
    off->add_option("--out", o_out);

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        if (*gen) {
            g_cfg.validate();
            const auto ck = model::gen_checkpoint(g_seed, g_cfg);
            model::save_checkpoint(ck, g_out);
            std::printf("wrote %s (weights hash %016llx)\n", g_out.c_str(),
                        (unsigned long long)model::weights_hash(ck, 0, g_cfg.n_layers));
            return 0;
        }
        if (*reg) {
            block_signals();
            const auto [host, port] = transport::split_address(r_listen);
            registry::RegistryNode node(r_blocks, split_list(r_peers), {}, r_gossip);
            node.start(host, port);
            std::printf("READY %s\n", node.address().c_str());
            std::fflush(stdout);
            wait_for_signal();
            node.stop();
            return 0;
        }
        if (*srv) {
            block_signals();
            auto ck = std::make_shared<const model::Checkpoint>(model::load_checkpoint(s_ckpt));
            server::ServerConfig c;
            c.host = s_host;
            c.port = s_port;
            if (s_blocks != "auto") c.blocks = parse_blocks(s_blocks);
            c.span = s_span;
            c.quantize = server::parse_quantize(s_quant);
            c.bootstrap = split_list(s_boot);
            c.shape = shape_or_env(s_shape);
            c.throughput = s_tp;
            c.rebalance = !s_no_rebalance;
            c.rebalance_min_s = s_rmin;
            c.rebalance_max_s = s_rmax;
            c.ttl_ms = s_ttl;
            c.gossip_ms = s_gossip;
            c.capacity = s_capacity;
            server::ServerNode node(ck, c);
            node.start();
            std::printf("READY %s\n", node.address().c_str());
            std::fflush(stdout);
            wait_for_signal();
            node.shutdown();
            return 0;
        }
        if (*gw) {
            block_signals();
            auto ck = std::make_shared<const model::Checkpoint>(model::load_checkpoint(w_ckpt));
            gateway::GatewayConfig g;
            const auto [host, port] = transport::split_address(w_listen);
            g.host = host;
            g.port = port;
            g.client.registries = split_list(w_boot);
            g.client.shape = shape_or_env(w_shape);
            g.per_ip_limit = w_limit;
            g.static_dir = w_static;
            gateway::Gateway gate(ck, g);
            gate.start();
            std::printf("READY %s\n", gate.address().c_str());
            std::fflush(stdout);
            wait_for_signal();
            gate.stop();
            return 0;
        }
        if (*genr) {
            const auto ck = model::load_checkpoint(c_ckpt);
            std::vector<int> prompt = c_tokens;
            if (prompt.empty()) prompt = gateway::encode_bytes(c_prompt);
            client::ClientConfig cc;
            cc.registries = split_list(c_boot);
            cc.shape = shape_or_env(c_shape);
            client::SwarmClient cl(cc);
            const auto sampling =
                c_temp > 0.0f ? model::Sampling::with_temperature(c_temp) : model::Sampling::greedy();
            const double t0 = monotonic_seconds();
            const auto res = client::generate(cl, ck, prompt, c_new, sampling, c_seed,
                                              c_int8 ? transport::Encoding::Int8 : transport::Encoding::F32);
            const double dt = monotonic_seconds() - t0;
            json out{{"tokens", res.tokens},
                     {"recoveries", res.recoveries},
                     {"wire_bytes", res.wire_bytes},
                     {"seconds", dt}};
            if (ck.config.vocab >= 256) out["text"] = gateway::decode_bytes(res.tokens);
            json chain = json::array();
            for (const auto& h : res.chain)
                chain.push_back({{"address", h.server.address}, {"blocks", {h.blocks.start, h.blocks.end}}});
            out["chain"] = chain;
            int rc = 0;
            if (c_check) {
                const bool same = res.tokens == model::generate_local(ck, prompt, c_new, sampling, c_seed);
                out["matches_local"] = same;
                rc = same ? 0 : 3;
            }
            std::cout << out.dump(2) << "\n";
            return rc;
        }
        if (*bch) {
            auto ck = std::make_shared<const model::Checkpoint>(model::load_checkpoint(b_ckpt));
            const auto shape = shape_or_env(b_shape);
            const int n_blocks = int(ck->config.n_layers);
            if (b_table) {
                std::vector<bench::ShapeRow> rows{{"unshaped", {}},
                                                  {"1 Gbit/s, <5 ms", transport::LinkShape::parse("2:1000")},
                                                  {"100 Mbit/s, <5 ms", transport::LinkShape::parse("2:100")},
                                                  {"100 Mbit/s, 100 ms", transport::LinkShape::parse("100:100")}};
                std::unique_ptr<bench::ProcessSwarm> current;
                const auto launch = [&](const transport::LinkShape& s) {
                    current.reset();
                    current = std::make_unique<bench::ProcessSwarm>(self_exe(), b_ckpt);
                    for (const auto& l : uniform_launches(n_blocks, b_servers, s)) current->start_server(l);
                    return current->registries();
                };
                const auto t = bench::bench_table(rows, *ck, launch, b_table_steps, b_seqs, b_batches);
                std::cerr << t.format();
                write_report(b_out, t.to_json());
                return 0;
            }
            b_opts.client_shape = shape;
            std::unique_ptr<bench::ProcessSwarm> procs;
            std::vector<std::string> regs = split_list(b_boot);
            if (regs.empty()) {
                procs = std::make_unique<bench::ProcessSwarm>(self_exe(), b_ckpt);
                for (const auto& l : uniform_launches(n_blocks, b_servers, shape)) procs->start_server(l);
                regs = procs->registries();
            }
            auto r = bench::bench_inference(b_scenario, regs, *ck, b_opts);
            r.config["servers_spawned"] = procs ? b_servers : 0;
            write_report(b_out, r);
            return 0;
        }
        if (*chn) {
            auto ck = std::make_shared<const model::Checkpoint>(model::load_checkpoint(h_ckpt));
            std::ifstream f(h_script);
            if (!f) throw InputError("cannot read " + h_script);
            json script;
            try {
                script = json::parse(f);
            } catch (const json::exception& e) {
                throw InputError(std::string("churn script is not JSON: ") + e.what());
            }
            const auto sc = bench::parse_churn_scenario(script);
            std::unique_ptr<bench::SwarmControl> swarm;
            if (h_in_process)
                swarm = std::make_unique<bench::InProcessSwarm>(ck, true);
            else
                swarm = std::make_unique<bench::ProcessSwarm>(self_exe(), h_ckpt);
            const auto m = bench::churn_sim(sc, *swarm, *ck);
            write_report(h_out, m);
            return m.failed_sessions == 0 && m.mismatched_sessions == 0 ? 0 : 3;
        }
        if (*off) {
            const double secs = bench::offload_upper_bound(o_params, o_bits, o_link);
            const auto fp = quant::memory_footprint(uint64_t(o_params), o_bits, uint64_t(o_server_gb * 1e9));
            write_report(o_out, {{"params", o_params},
                                 {"bits", o_bits},
                                 {"link_gbit_s", o_link},
                                 {"seconds_per_pass", secs},
                                 {"bytes_total", fp.bytes_total},
                                 {"servers_needed", fp.servers_needed},
                                 {"per_server_gb", o_server_gb}});
            return 0;
        }
    } catch (const InputError& e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}

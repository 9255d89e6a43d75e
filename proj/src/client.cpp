#include "swarm/client.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <thread>

#include <spdlog/spdlog.h>

#include "swarm/registry_node.hpp"

namespace swarm::client {

using transport::Encoding;
using transport::ErrorCode;
using transport::MsgType;
using transport::RemoteError;

namespace {

constexpr size_t kFrameOverhead = 2 * transport::kFrameHeaderSize;

// Rows [b0, b1) of a [B x t x d] tensor.
Tensor take_batch(const Tensor& x, size_t b0, size_t b1) {
    const size_t per = x.numel() / x.shape[0];
    return Tensor({uint32_t(b1 - b0), x.shape[1], x.shape[2]},
                  std::vector<float>(x.data.begin() + long(b0 * per), x.data.begin() + long(b1 * per)));
}

void put_batch(Tensor& dst, size_t b0, const Tensor& src) {
    const size_t per = dst.numel() / dst.shape[0];
    if (src.numel() != per * src.shape[0]) throw ProtocolError("server returned a tensor of the wrong size");
    std::copy(src.data.begin(), src.data.end(), dst.data.begin() + long(b0 * per));
}

double lat_client(double rtt_ms) { return rtt_ms / 2000.0; }
double lat_between(double rtt1_ms, double rtt2_ms) { return (rtt1_ms + rtt2_ms) / 4000.0; }

}  // namespace

RttMap ping_servers(transport::RpcPool& pool, const std::vector<ServerEntry>& entries, int attempts,
                    int deadline_ms) {
    RttMap out;
    std::mutex mu;
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (size_t i = next++; i < entries.size(); i = next++) {
            std::vector<double> samples;
            for (int a = 0; a < attempts; ++a) {
                const double t0 = monotonic_seconds();
                try {
                    pool.call(entries[i].address, MsgType::Ping, {}, deadline_ms);
                } catch (const Error&) {
                    samples.clear();
                    break;
                }
                samples.push_back((monotonic_seconds() - t0) * 1000.0);
            }
            if (samples.empty()) continue;
            std::sort(samples.begin(), samples.end());
            std::lock_guard lock(mu);
            out[entries[i].server_id] = samples[samples.size() / 2];
        }
    };
    std::vector<std::thread> threads;
    for (size_t i = 0; i < std::min<size_t>(16, entries.size()); ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    return out;
}

double hop_cost(const ServerEntry& s, int blocks, double payload_bytes) {
    double c = double(blocks) / std::max(double(s.throughput), 1e-9);
    if (s.bandwidth_bps > 0.0) c += payload_bytes * 8.0 / s.bandwidth_bps;
    return c;
}

double chain_cost(const std::vector<HopPlan>& chain, const RttMap& rtts, double payload_bytes) {
    double c = 0.0;
    for (size_t i = 0; i < chain.size(); ++i) {
        const double r = rtts.at(chain[i].server.server_id);
        c += i == 0 ? lat_client(r) : lat_between(rtts.at(chain[i - 1].server.server_id), r);
        c += hop_cost(chain[i].server, chain[i].blocks.size(), payload_bytes);
    }
    if (!chain.empty()) c += lat_client(rtts.at(chain.back().server.server_id));
    return c;
}

std::vector<HopPlan> plan_chain(const std::vector<ServerEntry>& entries, const RttMap& rtts, BlockRange need,
                                double payload_bytes, int beam_width) {
    if (need.start >= need.end) throw InputError("empty block range to plan");
    if (beam_width < 1) throw InputError("beam width must be at least 1");
    std::vector<size_t> usable;
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].state == registry::ServerState::Online && rtts.contains(entries[i].server_id) &&
            entries[i].range.intersects(need))
            usable.push_back(i);

    std::vector<int> missing;
    for (int b = need.start; b < need.end; ++b)
        if (std::none_of(usable.begin(), usable.end(), [&](size_t i) { return entries[i].range.contains(b); }))
            missing.push_back(b);
    if (!missing.empty()) {
        std::string list;
        for (int b : missing) list += (list.empty() ? "" : ",") + std::to_string(b);
        throw NoRouteError("no server covers blocks " + list, missing);
    }

    struct State {
        double cost;
        std::vector<size_t> path;  // indices into entries
        std::vector<BlockRange> ranges;
    };
    const int n = need.end - need.start;
    // frontier[b - need.start] keyed by last server (entries.size() for the client)
    std::vector<std::map<size_t, State>> frontier(size_t(n) + 1);
    frontier[0][entries.size()] = State{0.0, {}, {}};
    for (int b = need.start; b < need.end; ++b) {
        auto& here = frontier[size_t(b - need.start)];
        std::vector<State*> beam;
        for (auto& [_, st] : here) beam.push_back(&st);
        std::stable_sort(beam.begin(), beam.end(), [](const State* x, const State* y) { return x->cost < y->cost; });
        if (beam.size() > size_t(beam_width)) beam.resize(size_t(beam_width));
        for (const State* st : beam) {
            for (size_t i : usable) {
                const auto& s = entries[i];
                if (!s.range.contains(b)) continue;
                const int e = std::min(s.range.end, need.end);
                const double r = rtts.at(s.server_id);
                double c = st->cost + hop_cost(s, e - b, payload_bytes);
                c += st->path.empty() ? lat_client(r) : lat_between(rtts.at(entries[st->path.back()].server_id), r);
                if (e == need.end) c += lat_client(r);
                auto& there = frontier[size_t(e - need.start)];
                auto it = there.find(i);
                if (it == there.end() || c < it->second.cost) {
                    State next{c, st->path, st->ranges};
                    next.path.push_back(i);
                    next.ranges.push_back({b, e});
                    there[i] = std::move(next);
                }
            }
        }
        here.clear();
    }
    const auto& done = frontier[size_t(n)];
    const State* best = nullptr;
    for (const auto& [_, st] : done)
        if (!best || st.cost < best->cost) best = &st;
    if (!best) throw NoRouteError("beam search found no chain", {});

    std::vector<HopPlan> chain;
    double c = 0.0;
    for (size_t h = 0; h < best->path.size(); ++h) {
        const auto& s = entries[best->path[h]];
        const double r = rtts.at(s.server_id);
        c += h == 0 ? lat_client(r) : lat_between(rtts.at(entries[best->path[h - 1]].server_id), r);
        c += hop_cost(s, best->ranges[h].size(), payload_bytes);
        if (h + 1 == best->path.size()) c += lat_client(r);
        chain.push_back({s, best->ranges[h], float(r), float(c)});
    }
    return chain;
}

std::vector<size_t> split_batch(size_t batch, const std::vector<float>& throughputs) {
    if (throughputs.empty()) throw InputError("no servers to split the batch across");
    double total = 0.0;
    for (float t : throughputs) total += std::max(0.0f, t);
    std::vector<size_t> out(throughputs.size(), 0);
    size_t used = 0;
    if (total > 0.0) {
        for (size_t i = 0; i < out.size(); ++i) {
            out[i] = size_t(std::floor(double(batch) * std::max(0.0f, throughputs[i]) / total));
            used += out[i];
        }
    }
    for (size_t i = 0; used < batch; ++used, i = (i + 1) % out.size()) ++out[i];
    return out;
}

SwarmClient::SwarmClient(ClientConfig cfg) : cfg_(std::move(cfg)), pool_(cfg_.shape, cfg_.connect_timeout_ms) {
    if (cfg_.registries.empty()) throw InputError("client needs at least one registry address");
}

std::vector<ServerEntry> SwarmClient::lookup_all() {
    std::string last_error;
    for (const auto& addr : cfg_.registries) {
        try {
            auto all = registry::lookup_all(pool_, addr);
            const int64_t now = unix_millis();
            std::erase_if(all, [&](const ServerEntry& e) {
                return e.state != registry::ServerState::Online || e.expired(now);
            });
            std::lock_guard lock(mu_);
            last_entries_ = all;
            return all;
        } catch (const Error& e) {
            last_error = e.what();
        }
    }
    throw ConnectionError("no registry reachable: " + last_error);
}

std::vector<ServerEntry> SwarmClient::last_entries() {
    std::lock_guard lock(mu_);
    return last_entries_;
}

RttMap SwarmClient::rtts_for(const std::vector<ServerEntry>& entries) {
    std::vector<ServerEntry> todo;
    RttMap out;
    {
        std::lock_guard lock(mu_);
        for (const auto& e : entries) {
            auto it = rtt_cache_.find(e.server_id);
            if (it == rtt_cache_.end()) todo.push_back(e);
            else out[e.server_id] = it->second;
        }
    }
    const auto fresh = ping_servers(pool_, todo);
    std::lock_guard lock(mu_);
    for (const auto& [id, r] : fresh) rtt_cache_[id] = out[id] = r;
    return out;
}

void SwarmClient::forget(const ServerId& id) {
    std::lock_guard lock(mu_);
    rtt_cache_.erase(id);
}

std::vector<HopPlan> SwarmClient::plan(BlockRange need, double payload_bytes, const std::set<ServerId>& banned) {
    auto entries = lookup_all();
    std::erase_if(entries, [&](const ServerEntry& e) { return banned.contains(e.server_id); });
    return plan_chain(entries, rtts_for(entries), need, payload_bytes, cfg_.beam_width);
}

std::vector<uint8_t> SwarmClient::call(const std::string& address, MsgType type, std::span<const uint8_t> payload) {
    return pool_.call(address, type, payload, cfg_.rpc_deadline_ms);
}

InferenceSession::InferenceSession(SwarmClient& client, uint32_t n_blocks, uint32_t hidden, SessionConfig cfg)
    : client_(client), n_blocks_(n_blocks), hidden_(hidden), cfg_(std::move(cfg)) {
    if (cfg_.max_len == 0) throw InputError("session max_len must be positive");
    for (size_t attempt = 0;; ++attempt) {
        try {
            hops_ = build_hops({0, int(n_blocks_)}, Tensor{});
            return;
        } catch (const Error& e) {
            if (attempt >= cfg_.backoff_s.size()) throw SessionError(std::string("cannot open session: ") + e.what());
            spdlog::warn("opening session failed ({}), retrying in {} s", e.what(), cfg_.backoff_s[attempt]);
            std::this_thread::sleep_for(std::chrono::duration<double>(cfg_.backoff_s[attempt]));
        }
    }
}

InferenceSession::~InferenceSession() {
    try {
        close();
    } catch (...) {
    }
}

std::vector<HopPlan> InferenceSession::chain() const {
    std::vector<HopPlan> out;
    for (const auto& h : hops_) out.push_back(h.plan);
    return out;
}

void InferenceSession::close_hop(const Hop& hop) {
    try {
        const auto p = protocol::encode_close(hop.id);
        client_.pool().call(hop.plan.server.address, MsgType::CloseSession, p, 2000);
    } catch (const Error&) {
    }
}

void InferenceSession::close() {
    if (closed_) return;
    closed_ = true;
    for (const auto& h : hops_)
        if (!banned_.contains(h.plan.server.server_id)) close_hop(h);
}

Tensor InferenceSession::send_step(Hop& hop, uint32_t start, const Tensor& x) {
    const auto payload = protocol::encode(protocol::Step{hop.id, start, x}, cfg_.encoding);
    const auto reply = client_.call(hop.plan.server.address, MsgType::Step, payload);
    wire_bytes_ += kFrameOverhead + payload.size() + reply.size();
    Tensor y = transport::decode_tensor(reply);
    if (y.shape != x.shape) throw ProtocolError("step reply shape differs from the input");
    return y;
}

std::vector<InferenceSession::Hop> InferenceSession::build_hops(BlockRange need, const Tensor& replay) {
    const auto plan = client_.plan(need, double(transport::encoded_tensor_size(
                                             std::vector<uint32_t>{1, hidden_}, cfg_.encoding)),
                                   banned_);
    std::vector<Hop> out;
    Tensor x = replay;
    try {
        for (const auto& hp : plan) {
            Hop h{hp, protocol::random_session_id(), {}};
            try {
                const auto p = protocol::encode(protocol::OpenSession{h.id, cfg_.max_len, hp.blocks});
                client_.call(hp.server.address, MsgType::OpenSession, p);
                out.push_back(h);
                if (!x.empty()) {
                    out.back().log.push_back(x);
                    x = send_step(out.back(), 0, x);
                }
            } catch (const RemoteError& e) {
                if (e.code != ErrorCode::Desync && e.code != ErrorCode::UnknownSession) banned_.insert(hp.server.server_id);
                throw;
            } catch (const Error& e) {
                banned_.insert(hp.server.server_id);
                client_.forget(hp.server.server_id);
                throw;
            }
        }
    } catch (...) {
        for (const auto& h : out) close_hop(h);
        throw;
    }
    return out;
}

void InferenceSession::recover(size_t failed) {
    const Hop old = hops_[failed];
    Tensor replay;
    for (const auto& t : old.log) replay = replay.empty() ? t : concat_rows(replay, t);
    if (!banned_.contains(old.plan.server.server_id)) close_hop(old);
    for (size_t attempt = 0;; ++attempt) {
        try {
            auto fresh = build_hops(old.plan.blocks, replay);
            hops_.erase(hops_.begin() + long(failed));
            hops_.insert(hops_.begin() + long(failed), fresh.begin(), fresh.end());
            ++recoveries_;
            std::string via;
            for (const auto& h : fresh) via += " " + h.plan.server.address + h.plan.blocks.str();
            spdlog::info("recovery: blocks {} rerouted via{} after replaying {} positions", old.plan.blocks.str(), via,
                         replay.empty() ? 0 : replay.rows());
            return;
        } catch (const Error& e) {
            if (attempt >= cfg_.backoff_s.size())
                throw SessionError("no replacement for blocks " + old.plan.blocks.str() + ": " + e.what());
            spdlog::warn("recovery of blocks {} failed ({}), retrying in {} s", old.plan.blocks.str(), e.what(),
                         cfg_.backoff_s[attempt]);
            std::this_thread::sleep_for(std::chrono::duration<double>(cfg_.backoff_s[attempt]));
        }
    }
}

Tensor InferenceSession::step(const Tensor& hidden) {
    if (closed_) throw SessionError("session is closed");
    if (hidden.shape.size() != 2 || hidden.cols() != hidden_ || hidden.rows() == 0)
        throw InputError("step input must be [t x d]");
    const uint32_t t = uint32_t(hidden.rows());
    if (position_ + t > cfg_.max_len)
        throw InputError("step would exceed max_len " + std::to_string(cfg_.max_len));
    Tensor x = hidden;
    for (size_t h = 0; h < hops_.size();) {
        try {
            Tensor y = send_step(hops_[h], position_, x);
            hops_[h].log.push_back(x);
            x = std::move(y);
            ++h;
        } catch (const RemoteError& e) {
            spdlog::warn("hop {} {} failed: {}", h, hops_[h].plan.server.address, e.what());
            if (e.code != ErrorCode::Desync && e.code != ErrorCode::UnknownSession)
                banned_.insert(hops_[h].plan.server.server_id);
            recover(h);
        } catch (const Error& e) {
            spdlog::warn("hop {} {} failed: {}", h, hops_[h].plan.server.address, e.what());
            banned_.insert(hops_[h].plan.server.server_id);
            client_.forget(hops_[h].plan.server.server_id);
            recover(h);
        }
    }
    position_ += t;
    return x;
}

GenerateResult generate(SwarmClient& client, const model::Checkpoint& ckpt, std::span<const int> prompt,
                        size_t n_new, const model::Sampling& sampling, uint64_t seed, Encoding enc,
                        const std::function<void(size_t, int)>& on_token) {
    const auto& cfg = ckpt.config;
    if (prompt.empty()) throw InputError("prompt must not be empty");
    if (prompt.size() + n_new > cfg.max_seq)
        throw InputError("prompt plus new tokens exceed max_seq " + std::to_string(cfg.max_seq));
    GenerateResult res;
    if (n_new == 0) return res;
    SessionConfig sc;
    sc.max_len = uint32_t(prompt.size() + n_new);
    sc.encoding = enc;
    InferenceSession session(client, cfg.n_layers, cfg.hidden, sc);
    SplitMix64 rng(seed);
    Tensor h = model::embed(ckpt, prompt);
    for (size_t i = 0; i < n_new; ++i) {
        const Tensor y = session.step(h);
        const Tensor logits = model::lm_head(ckpt, slice_rows(y, y.rows() - 1, y.rows()));
        const int tok = model::sample_next(logits.data, sampling, rng);
        res.tokens.push_back(tok);
        if (on_token) on_token(i, tok);
        if (i + 1 < n_new) h = model::embed(ckpt, std::span<const int>(&tok, 1));
    }
    res.recoveries = session.recoveries();
    res.wire_bytes = session.wire_bytes();
    res.chain = session.chain();
    return res;
}

namespace {

Tensor as_batch(const Tensor& x) {
    Tensor b = x;
    if (b.shape.size() == 2) b.shape.insert(b.shape.begin(), 1u);
    if (b.shape.size() != 3 || b.shape[0] == 0 || b.shape[1] == 0) throw InputError("batch must be [B x t x d]");
    return b;
}

ForwardHandle::Part forward_part(SwarmClient& client, const ServerEntry& s, BlockRange blocks, Tensor input,
                                 size_t b0, Encoding enc, Tensor& out) {
    const auto reply = protocol::decode_forward_reply(
        client.call(s.address, MsgType::Forward, protocol::encode(protocol::Forward{blocks, input}, enc)));
    put_batch(out, b0, reply.hidden);
    ForwardHandle::Part p;
    p.server = s;
    p.row_begin = b0;
    p.row_end = b0 + input.shape[0];
    p.tape_id = reply.tape_id;
    p.input = std::move(input);
    return p;
}

}  // namespace

Tensor distributed_forward(SwarmClient& client, const std::vector<HopPlan>& chain, const Tensor& batch,
                           ForwardHandle& handle, const TrainOptions& opts) {
    Tensor x = as_batch(batch);
    handle = ForwardHandle{};
    handle.shape = batch.shape;
    const auto known = opts.split ? client.last_entries() : std::vector<ServerEntry>{};
    for (const auto& hop : chain) {
        std::vector<ServerEntry> servers{hop.server};
        for (const auto& e : known)
            if (e.server_id != hop.server.server_id && e.range.covers(hop.blocks)) servers.push_back(e);
        std::vector<float> tps;
        for (const auto& s : servers) tps.push_back(s.throughput);
        const auto counts = split_batch(x.shape[0], tps);

        ForwardHandle::Stage stage{hop.blocks, {}};
        Tensor next = Tensor::zeros(x.shape);
        std::vector<std::future<ForwardHandle::Part>> jobs;
        size_t b0 = 0;
        for (size_t i = 0; i < servers.size(); ++i) {
            if (counts[i] == 0) continue;
            jobs.push_back(std::async(std::launch::async, forward_part, std::ref(client), servers[i], hop.blocks,
                                      take_batch(x, b0, b0 + counts[i]), b0, opts.encoding, std::ref(next)));
            b0 += counts[i];
        }
        for (auto& j : jobs) stage.parts.push_back(j.get());
        handle.stages.push_back(std::move(stage));
        x = std::move(next);
    }
    x.shape = batch.shape;
    return x;
}

Tensor distributed_backward(SwarmClient& client, ForwardHandle& handle, const Tensor& grad) {
    if (grad.shape != handle.shape) throw InputError("gradient shape differs from the forward batch");
    Tensor g = as_batch(grad);
    for (auto st = handle.stages.rbegin(); st != handle.stages.rend(); ++st) {
        Tensor next = Tensor::zeros(g.shape);
        std::vector<std::future<void>> jobs;
        for (auto& part : st->parts) {
            jobs.push_back(std::async(std::launch::async, [&client, &part, &g, &next, blocks = st->blocks] {
                const Tensor gp = take_batch(g, part.row_begin, part.row_end);
                auto backward = [&] {
                    return client.call(part.server.address, MsgType::Backward,
                                       protocol::encode(protocol::Backward{part.tape_id, gp}, Encoding::F32));
                };
                std::vector<uint8_t> reply;
                try {
                    reply = backward();
                } catch (const RemoteError& e) {
                    if (e.code != ErrorCode::UnknownTape) throw;
                    const size_t b0 = part.row_begin;
                    Tensor scratch = Tensor::zeros(part.input.shape);
                    part = forward_part(client, part.server, blocks, part.input, 0, Encoding::F32, scratch);
                    part.row_begin = b0;
                    part.row_end = b0 + part.input.shape[0];
                    reply = backward();
                }
                put_batch(next, part.row_begin, transport::decode_tensor(reply));
            }));
        }
        for (auto& j : jobs) j.get();
        g = std::move(next);
    }
    g.shape = grad.shape;
    return g;
}

PromptTuner::PromptTuner(SwarmClient& client, std::shared_ptr<const model::Checkpoint> ckpt, PromptTuneConfig cfg,
                         TrainOptions opts)
    : client_(client), ckpt_(std::move(ckpt)), cfg_(cfg), opts_(opts) {
    if (!ckpt_) throw InputError("prompt tuner needs a checkpoint");
    if (cfg_.pre_seq_len == 0 || cfg_.n_classes < 2) throw InputError("need pre_seq_len >= 1 and n_classes >= 2");
    const uint32_t d = ckpt_->config.hidden;
    if (cfg_.pre_seq_len >= ckpt_->config.max_seq) throw InputError("pre_seq_len must be below max_seq");
    SplitMix64 rng(cfg_.seed);
    prompts_ = Tensor::matrix(cfg_.pre_seq_len, d);
    for (float& v : prompts_.data) v = rng.uniform(-0.5, 0.5);
    head_ = Tensor::matrix(d, cfg_.n_classes);
    const double a = 1.0 / std::sqrt(double(d));
    for (float& v : head_.data) v = rng.uniform(-a, a);
    bias_.assign(cfg_.n_classes, 0.0f);
    const size_t n = prompts_.numel() + head_.numel() + bias_.size();
    m_.assign(n, 0.0f);
    v_.assign(n, 0.0f);
}

const std::vector<HopPlan>& PromptTuner::chain() {
    if (chain_.empty())
        chain_ = client_.plan({0, int(ckpt_->config.n_layers)}, 4.0 * ckpt_->config.hidden * ckpt_->config.max_seq, {});
    return chain_;
}

Tensor PromptTuner::logits_for(const std::vector<std::vector<int>>& tokens, ForwardHandle* handle, Tensor* pooled,
                               model::LayerNormCache* ln, Tensor* chain_out) {
    if (tokens.empty()) throw InputError("empty batch");
    const size_t t = tokens[0].size(), p = cfg_.pre_seq_len, d = ckpt_->config.hidden, B = tokens.size();
    if (t == 0) throw InputError("empty sequence");
    if (p + t > ckpt_->config.max_seq) throw InputError("prompt plus sequence exceed max_seq");
    Tensor x = Tensor::zeros({uint32_t(B), uint32_t(p + t), uint32_t(d)});
    for (size_t b = 0; b < B; ++b) {
        if (tokens[b].size() != t) throw InputError("all sequences in a batch must have the same length");
        const Tensor e = model::embed(*ckpt_, tokens[b]);
        float* dst = x.data.data() + b * (p + t) * d;
        std::copy(prompts_.data.begin(), prompts_.data.end(), dst);
        std::copy(e.data.begin(), e.data.end(), dst + p * d);
    }
    ForwardHandle local;
    Tensor out;
    try {
        out = distributed_forward(client_, chain(), x, handle ? *handle : local, opts_);
    } catch (const Error&) {
        chain_.clear();
        throw;
    }
    Tensor z = Tensor::matrix(B, d);
    for (size_t b = 0; b < B; ++b)
        std::copy_n(out.data.begin() + long((b * (p + t) + p + t - 1) * d), d, z.row(b));
    Tensor u = model::layer_norm(z, ckpt_->final_ln, ln);
    Tensor logits = matmul(u, head_);
    add_bias(logits, bias_);
    if (pooled) *pooled = std::move(u);
    if (chain_out) *chain_out = std::move(out);
    return logits;
}

float PromptTuner::loss(const std::vector<std::vector<int>>& tokens, const std::vector<int>& labels,
                        PromptGrads* grads) {
    if (labels.size() != tokens.size()) throw InputError("one label per example");
    for (int l : labels)
        if (l < 0 || uint32_t(l) >= cfg_.n_classes) throw InputError("label out of range");
    ForwardHandle handle;
    Tensor u;
    model::LayerNormCache ln;
    Tensor logits = logits_for(tokens, grads ? &handle : nullptr, &u, &ln, nullptr);
    const size_t B = tokens.size(), C = cfg_.n_classes, d = ckpt_->config.hidden, p = cfg_.pre_seq_len;
    Tensor dlog = Tensor::matrix(B, C);
    double total = 0.0;
    for (size_t b = 0; b < B; ++b) {
        const float* row = logits.row(b);
        const float mx = *std::max_element(row, row + C);
        double s = 0.0;
        for (size_t c = 0; c < C; ++c) s += std::exp(double(row[c] - mx));
        total += -(double(row[size_t(labels[b])] - mx) - std::log(s));
        for (size_t c = 0; c < C; ++c)
            dlog.at(b, c) = float((std::exp(double(row[c] - mx)) / s - (int(c) == labels[b] ? 1.0 : 0.0)) / double(B));
    }
    const float L = float(total / double(B));
    if (!grads) return L;

    grads->head = Tensor::matrix(d, C);
    for (size_t b = 0; b < B; ++b)
        for (size_t i = 0; i < d; ++i)
            for (size_t c = 0; c < C; ++c) grads->head.at(i, c) += u.at(b, i) * dlog.at(b, c);
    grads->bias.assign(C, 0.0f);
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c) grads->bias[c] += dlog.at(b, c);
    const Tensor du = matmul_bt(dlog, head_);
    const Tensor dz = model::layer_norm_backward(du, ckpt_->final_ln, ln);
    const size_t t = tokens[0].size();
    Tensor gout = Tensor::zeros(handle.shape);
    for (size_t b = 0; b < B; ++b) std::copy_n(dz.row(b), d, gout.data.begin() + long((b * (p + t) + p + t - 1) * d));
    Tensor gin;
    try {
        gin = distributed_backward(client_, handle, gout);
    } catch (const Error&) {
        chain_.clear();
        throw;
    }
    grads->prompts = Tensor::matrix(p, d);
    for (size_t b = 0; b < B; ++b)
        for (size_t i = 0; i < p * d; ++i) grads->prompts.data[i] += gin.data[b * (p + t) * d + i];
    return L;
}

float PromptTuner::train_step(const std::vector<std::vector<int>>& tokens, const std::vector<int>& labels) {
    PromptGrads g;
    const float L = loss(tokens, labels, &g);
    if (!std::isfinite(L)) throw Error("loss is not finite at step " + std::to_string(step_ + 1));
    ++step_;
    const double bc1 = 1.0 - std::pow(double(cfg_.beta1), double(step_));
    const double bc2 = 1.0 - std::pow(double(cfg_.beta2), double(step_));
    size_t k = 0;
    auto update = [&](std::span<float> params, std::span<const float> grad) {
        for (size_t i = 0; i < params.size(); ++i, ++k) {
            m_[k] = cfg_.beta1 * m_[k] + (1.0f - cfg_.beta1) * grad[i];
            v_[k] = cfg_.beta2 * v_[k] + (1.0f - cfg_.beta2) * grad[i] * grad[i];
            const double mhat = m_[k] / bc1, vhat = v_[k] / bc2;
            params[i] -= float(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps));
        }
    };
    update(prompts_.data, g.prompts.data);
    update(head_.data, g.head.data);
    update(bias_, g.bias);
    return L;
}

std::vector<int> PromptTuner::predict(const std::vector<std::vector<int>>& tokens) {
    const Tensor logits = logits_for(tokens, nullptr, nullptr, nullptr, nullptr);
    std::vector<int> out;
    for (size_t b = 0; b < logits.rows(); ++b) {
        const float* row = logits.row(b);
        out.push_back(int(std::max_element(row, row + logits.cols()) - row));
    }
    return out;
}

namespace {
constexpr uint32_t kPtadVersion = 1;
}

void PromptTuner::save(const std::filesystem::path& path) const {
    transport::ByteWriter w;
    w.str("PTAD");
    w.u32(kPtadVersion);
    w.u32(cfg_.pre_seq_len);
    w.u32(ckpt_->config.hidden);
    w.u32(cfg_.n_classes);
    w.u64(step_);
    for (float v : prompts_.data) w.f32le(v);
    for (float v : head_.data) w.f32le(v);
    for (float v : bias_) w.f32le(v);
    for (float v : m_) w.f32le(v);
    for (float v : v_) w.f32le(v);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write " + path.string());
    const auto& buf = w.buffer();
    f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
}

void PromptTuner::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot read " + path.string());
    const std::vector<uint8_t> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    try {
        transport::ByteReader r(bytes);
        if (r.str(4) != "PTAD") throw CorruptionError("not a PTAD file");
        if (r.u32() != kPtadVersion) throw CorruptionError("unsupported PTAD version");
        const uint32_t p = r.u32(), d = r.u32(), C = r.u32();
        if (p != cfg_.pre_seq_len || d != ckpt_->config.hidden || C != cfg_.n_classes)
            throw CorruptionError("PTAD dimensions do not match this tuner");
        const uint64_t step = r.u64();
        auto fill = [&](std::span<float> dst) {
            for (float& v : dst) v = r.f32le();
        };
        fill(prompts_.data);
        fill(head_.data);
        fill(bias_);
        fill(m_);
        fill(v_);
        r.expect_end();
        step_ = step;
    } catch (const ProtocolError& e) {
        throw CorruptionError(std::string("truncated PTAD file: ") + e.what());
    }
}

}  // namespace swarm::client

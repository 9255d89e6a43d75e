#include "swarm/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "swarm/common.hpp"

namespace swarm::model {

namespace {

constexpr float kLnEps = 1e-5f;
constexpr double kInitRange = 0.05;
constexpr char kMagic[4] = {'P', 'T', 'C', 'K'};
constexpr uint8_t kVersion = 1;

Tensor random_matrix(uint64_t seed, const std::string& path, uint32_t rows, uint32_t cols) {
    SplitMix64 rng(seed ^ fnv1a64(path));
    Tensor t = Tensor::matrix(rows, cols);
    for (float& v : t.data) v = rng.uniform(-kInitRange, kInitRange);
    return t;
}

LayerNorm unit_norm(uint32_t d) { return {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)}; }

// Fixed traversal order shared by the writer, the reader and weights_hash.
template <class Fn>
void visit_block(BlockWeights& b, Fn&& fn) {
    fn(b.ln1.gamma);
    fn(b.ln1.beta);
    fn(b.wqkv.data);
    fn(b.bqkv);
    fn(b.wo.data);
    fn(b.bo);
    fn(b.ln2.gamma);
    fn(b.ln2.beta);
    fn(b.w_in.data);
    fn(b.b_in);
    fn(b.w_out.data);
    fn(b.b_out);
}

template <class Fn>
void visit_tensors(Checkpoint& c, Fn&& fn) {
    fn(c.embed.data);
    for (auto& b : c.blocks) visit_block(b, fn);
    fn(c.final_ln.gamma);
    fn(c.final_ln.beta);
}

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(uint8_t(v >> s));
}

void put_f32_le(std::vector<uint8_t>& out, std::span<const float> xs) {
    for (float f : xs) {
        const uint32_t u = std::bit_cast<uint32_t>(f);
        for (int s = 0; s < 32; s += 8) out.push_back(uint8_t(u >> s));
    }
}

/// Allocates a checkpoint with every tensor sized but zero-filled.
Checkpoint allocate(const ModelConfig& cfg) {
    const uint32_t d = cfg.hidden, m = cfg.mlp_hidden();
    Checkpoint c;
    c.config = cfg;
    c.embed = Tensor::matrix(cfg.vocab, d);
    c.blocks.resize(cfg.n_layers);
    for (auto& b : c.blocks) {
        b.ln1 = unit_norm(d);
        b.ln2 = unit_norm(d);
        b.wqkv = Tensor::matrix(d, 3 * d);
        b.bqkv.assign(3 * d, 0.0f);
        b.wo = Tensor::matrix(d, d);
        b.bo.assign(d, 0.0f);
        b.w_in = Tensor::matrix(d, m);
        b.b_in.assign(m, 0.0f);
        b.w_out = Tensor::matrix(m, d);
        b.b_out.assign(d, 0.0f);
    }
    c.final_ln = unit_norm(d);
    return c;
}

void check_block_shapes(const BlockWeights& w, const ModelConfig& cfg) {
    const size_t d = cfg.hidden;
    if (w.wqkv.numel() != d * 3 * d || w.wo.numel() != d * d || w.w_in.numel() != d * cfg.mlp_hidden() ||
        w.w_out.numel() != d * cfg.mlp_hidden())
        throw InputError("block weights do not match model config");
}

Tensor linear(const Tensor& x, const Tensor& w, std::span<const float> b, const quant::Int8Weights* q) {
    Tensor y = q ? quant::linear_mixed(*q, x) : matmul(x, w);
    add_bias(y, b);
    return y;
}

Tensor transpose(const Tensor& w) {
    Tensor t = Tensor::matrix(w.cols(), w.rows());
    for (size_t r = 0; r < w.rows(); ++r)
        for (size_t c = 0; c < w.cols(); ++c) t.at(c, r) = w.at(r, c);
    return t;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1) throw InputError("n_layers must be >= 1");
    if (hidden < 1 || n_heads < 1) throw InputError("hidden and n_heads must be positive");
    if (hidden % n_heads != 0) throw InputError("hidden must be a multiple of n_heads");
    if (vocab < 1) throw InputError("vocab must be positive");
    if (max_seq < 1) throw InputError("max_seq must be >= 1");
    if (mlp_ratio < 1) throw InputError("mlp_ratio must be positive");
}

BlockWeights quantize_block(const BlockWeights& w, float threshold) {
    auto q = std::make_shared<BlockInt8>();
    q->qkv = quant::quantize_weights_int8(transpose(w.wqkv), threshold);
    q->out = quant::quantize_weights_int8(transpose(w.wo), threshold);
    q->mlp_in = quant::quantize_weights_int8(transpose(w.w_in), threshold);
    q->mlp_out = quant::quantize_weights_int8(transpose(w.w_out), threshold);
    BlockWeights r = w;
    r.wqkv = transpose(q->qkv.reconstruct());
    r.wo = transpose(q->out.reconstruct());
    r.w_in = transpose(q->mlp_in.reconstruct());
    r.w_out = transpose(q->mlp_out.reconstruct());
    r.int8 = std::move(q);
    return r;
}

Checkpoint gen_checkpoint(uint64_t seed, const ModelConfig& cfg) {
    cfg.validate();
    Checkpoint c = allocate(cfg);
    const uint32_t d = cfg.hidden, m = cfg.mlp_hidden();
    c.embed = random_matrix(seed, "embed", cfg.vocab, d);
    for (uint32_t i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        auto& b = c.blocks[i];
        b.wqkv = random_matrix(seed, p + "attn.wqkv", d, 3 * d);
        b.wo = random_matrix(seed, p + "attn.wo", d, d);
        b.w_in = random_matrix(seed, p + "mlp.w_in", d, m);
        b.w_out = random_matrix(seed, p + "mlp.w_out", m, d);
    }
    return c;
}

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    std::vector<uint8_t> out(std::begin(kMagic), std::end(kMagic));
    out.push_back(kVersion);
    const auto& c = ckpt.config;
    for (uint32_t v : {c.n_layers, c.hidden, c.n_heads, c.vocab, c.max_seq, c.mlp_ratio}) put_u32_be(out, v);
    visit_tensors(const_cast<Checkpoint&>(ckpt), [&](std::vector<float>& xs) { put_f32_le(out, xs); });
    return out;
}

Checkpoint parse_checkpoint(std::span<const uint8_t> bytes) {
    constexpr size_t header = 4 + 1 + 6 * 4;
    if (bytes.size() < header || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
        throw CorruptionError("not a checkpoint file (bad magic)");
    if (bytes[4] != kVersion) throw CorruptionError("unsupported checkpoint version " + std::to_string(bytes[4]));
    uint32_t fields[6];
    for (int i = 0; i < 6; ++i) {
        const uint8_t* p = bytes.data() + 5 + 4 * i;
        fields[i] = uint32_t(p[0]) << 24 | uint32_t(p[1]) << 16 | uint32_t(p[2]) << 8 | p[3];
    }
    ModelConfig cfg{fields[0], fields[1], fields[2], fields[3], fields[4], fields[5]};
    cfg.validate();

    Checkpoint c = allocate(cfg);
    size_t off = header;
    visit_tensors(c, [&](std::vector<float>& xs) {
        if (bytes.size() - off < xs.size() * 4) throw CorruptionError("checkpoint truncated");
        for (float& f : xs) {
            const uint8_t* p = bytes.data() + off;
            f = std::bit_cast<float>(uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24);
            off += 4;
        }
    });
    if (off != bytes.size()) throw CorruptionError("checkpoint has trailing bytes");
    visit_tensors(c, [](std::vector<float>& xs) {
        if (!all_finite(xs)) throw CorruptionError("checkpoint contains non-finite weights");
    });
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw Error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

uint64_t weights_hash(std::span<const BlockWeights> blocks) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&](std::vector<float>& xs) {
        for (float f : xs) {
            uint32_t u = std::bit_cast<uint32_t>(f);
            for (int s = 0; s < 32; s += 8) {
                h ^= uint8_t(u >> s);
                h *= 0x100000001b3ull;
            }
        }
    };
    for (const auto& b : blocks) visit_block(const_cast<BlockWeights&>(b), mix);
    return h;
}

uint64_t weights_hash(const Checkpoint& ckpt, uint32_t begin, uint32_t end) {
    end = std::min<uint32_t>(end, uint32_t(ckpt.blocks.size()));
    if (begin >= end) return weights_hash(std::span<const BlockWeights>{});
    return weights_hash(std::span(ckpt.blocks).subspan(begin, end - begin));
}

Tensor embed(const Checkpoint& ckpt, std::span<const int> tokens) {
    const uint32_t d = ckpt.config.hidden;
    Tensor out = Tensor::matrix(tokens.size(), d);
    for (size_t i = 0; i < tokens.size(); ++i) {
        const int tok = tokens[i];
        if (tok < 0 || uint32_t(tok) >= ckpt.config.vocab)
            throw InputError("token " + std::to_string(tok) + " outside vocabulary");
        std::copy_n(ckpt.embed.row(size_t(tok)), d, out.row(i));
    }
    return out;
}

float gelu(float x) {
    constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

float gelu_grad(float x) {
    constexpr float k = 0.7978845608028654f;
    const float th = std::tanh(k * (x + 0.044715f * x * x * x));
    return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * k * (1.0f + 3.0f * 0.044715f * x * x);
}

float alibi_slope(uint32_t head, uint32_t n_heads) {
    return std::exp2(-8.0f * float(head) / float(n_heads));
}

Tensor layer_norm(const Tensor& x, const LayerNorm& ln, LayerNormCache* cache) {
    const size_t n = x.rows(), d = x.cols();
    if (ln.gamma.size() != d) throw InputError("layer_norm: width mismatch");
    Tensor y = Tensor::matrix(n, d);
    if (cache) {
        cache->xhat = Tensor::matrix(n, d);
        cache->rstd.assign(n, 0.0f);
    }
    for (size_t i = 0; i < n; ++i) {
        const float* xr = x.row(i);
        float mean = 0.0f;
        for (size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= float(d);
        float var = 0.0f;
        for (size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= float(d);
        const float rstd = 1.0f / std::sqrt(var + kLnEps);
        float* yr = y.row(i);
        for (size_t c = 0; c < d; ++c) {
            const float xh = (xr[c] - mean) * rstd;
            if (cache) cache->xhat.at(i, c) = xh;
            yr[c] = ln.gamma[c] * xh + ln.beta[c];
        }
        if (cache) cache->rstd[i] = rstd;
    }
    return y;
}

Tensor layer_norm_backward(const Tensor& grad_out, const LayerNorm& ln, const LayerNormCache& cache) {
    const size_t n = grad_out.rows(), d = grad_out.cols();
    Tensor dx = Tensor::matrix(n, d);
    std::vector<float> dxhat(d);
    for (size_t i = 0; i < n; ++i) {
        float m1 = 0.0f, m2 = 0.0f;
        for (size_t c = 0; c < d; ++c) {
            dxhat[c] = grad_out.at(i, c) * ln.gamma[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * cache.xhat.at(i, c);
        }
        m1 /= float(d);
        m2 /= float(d);
        for (size_t c = 0; c < d; ++c) dx.at(i, c) = cache.rstd[i] * (dxhat[c] - m1 - cache.xhat.at(i, c) * m2);
    }
    return dx;
}

BlockOutput block_forward(const BlockWeights& w, const ModelConfig& cfg, const Tensor& hidden, KvCache& cache,
                          uint32_t start_pos, bool want_tape) {
    const uint32_t d = cfg.hidden, nh = cfg.n_heads, dh = cfg.head_dim();
    const size_t t = hidden.rows();
    if (hidden.cols() != d || hidden.shape.size() != 2) throw InputError("block_forward: hidden must be [t x d]");
    if (start_pos != cache.length())
        throw InputError("block_forward: start_pos " + std::to_string(start_pos) + " != cache length " +
                         std::to_string(cache.length()));
    if (size_t(start_pos) + t > cfg.max_seq) throw CapacityError("block_forward: sequence exceeds max_seq");
    check_block_shapes(w, cfg);

    const BlockInt8* q8 = w.int8.get();
    LayerNormCache ln1c, ln2c;
    Tensor a = layer_norm(hidden, w.ln1, &ln1c);
    Tensor qkv = linear(a, w.wqkv, w.bqkv, q8 ? &q8->qkv : nullptr);

    Tensor q = Tensor::matrix(t, d), k_new = Tensor::matrix(t, d), v_new = Tensor::matrix(t, d);
    for (size_t i = 0; i < t; ++i) {
        std::copy_n(qkv.row(i), d, q.row(i));
        std::copy_n(qkv.row(i) + d, d, k_new.row(i));
        std::copy_n(qkv.row(i) + 2 * d, d, v_new.row(i));
    }
    Tensor keys = concat_rows(cache.keys, k_new);
    Tensor values = concat_rows(cache.values, v_new);
    const size_t total = keys.rows();

    const float inv_sqrt = 1.0f / std::sqrt(float(dh));
    std::vector<float> slopes(nh);
    for (uint32_t h = 0; h < nh; ++h) slopes[h] = alibi_slope(h + 1, nh);

    Tensor ctx = Tensor::matrix(t, d);
    std::vector<float> probs;
    if (want_tape) probs.assign(t * nh * total, 0.0f);
    std::vector<float> p(total);
    for (size_t i = 0; i < t; ++i) {
        const size_t pos = start_pos + i;
        for (uint32_t h = 0; h < nh; ++h) {
            const float* qi = q.row(i) + h * dh;
            float mx = -INFINITY;
            for (size_t j = 0; j <= pos; ++j) {
                const float* kj = keys.row(j) + h * dh;
                float s = 0.0f;
                for (uint32_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                s = s * inv_sqrt + slopes[h] * (float(j) - float(pos));
                p[j] = s;
                mx = std::max(mx, s);
            }
            float z = 0.0f;
            for (size_t j = 0; j <= pos; ++j) {
                p[j] = std::exp(p[j] - mx);
                z += p[j];
            }
            float* out = ctx.row(i) + h * dh;
            for (size_t j = 0; j <= pos; ++j) {
                p[j] /= z;
                const float* vj = values.row(j) + h * dh;
                for (uint32_t c = 0; c < dh; ++c) out[c] += p[j] * vj[c];
            }
            if (want_tape) std::copy_n(p.begin(), pos + 1, probs.begin() + (i * nh + h) * total);
        }
    }

    Tensor h1 = linear(ctx, w.wo, w.bo, q8 ? &q8->out : nullptr);
    add_inplace(h1, hidden);
    Tensor b = layer_norm(h1, w.ln2, &ln2c);
    Tensor m = linear(b, w.w_in, w.b_in, q8 ? &q8->mlp_in : nullptr);
    Tensor g = m;
    for (float& v : g.data) v = gelu(v);
    Tensor out = linear(g, w.w_out, w.b_out, q8 ? &q8->mlp_out : nullptr);
    add_inplace(out, h1);

    BlockOutput result;
    if (want_tape) {
        ActivationTape tp;
        tp.start_pos = start_pos;
        tp.input = hidden;
        tp.xhat1 = std::move(ln1c.xhat);
        tp.rstd1 = std::move(ln1c.rstd);
        tp.q = std::move(q);
        tp.keys = keys;
        tp.values = values;
        tp.probs = std::move(probs);
        tp.ctx = std::move(ctx);
        tp.xhat2 = std::move(ln2c.xhat);
        tp.rstd2 = std::move(ln2c.rstd);
        tp.mlp_pre = std::move(m);
        tp.mlp_act = std::move(g);
        result.tape = std::move(tp);
    }
    cache.keys = std::move(keys);
    cache.values = std::move(values);
    result.hidden = std::move(out);
    return result;
}

Tensor block_backward(const BlockWeights& w, const ModelConfig& cfg, const ActivationTape& tape, const Tensor& grad_out) {
    const uint32_t d = cfg.hidden, nh = cfg.n_heads, dh = cfg.head_dim();
    const size_t t = tape.input.rows();
    if (grad_out.rows() != t || grad_out.cols() != d) throw InputError("block_backward: grad shape does not match tape");
    const size_t total = tape.keys.rows();
    if (total != tape.start_pos + t || tape.probs.size() != t * nh * total)
        throw InputError("block_backward: malformed tape");

    // MLP branch.
    Tensor dh1 = grad_out;
    Tensor dg = matmul_bt(grad_out, w.w_out);
    for (size_t i = 0; i < dg.data.size(); ++i) dg.data[i] *= gelu_grad(tape.mlp_pre.data[i]);
    Tensor db = matmul_bt(dg, w.w_in);
    add_inplace(dh1, layer_norm_backward(db, w.ln2, {tape.xhat2, tape.rstd2}));

    // Attention branch.
    Tensor dctx = matmul_bt(dh1, w.wo);
    Tensor dq = Tensor::matrix(t, d), dk = Tensor::matrix(total, d), dv = Tensor::matrix(total, d);
    const float inv_sqrt = 1.0f / std::sqrt(float(dh));
    std::vector<float> dp(total);
    for (size_t i = 0; i < t; ++i) {
        const size_t pos = tape.start_pos + i;
        for (uint32_t h = 0; h < nh; ++h) {
            const float* p = tape.probs.data() + (i * nh + h) * total;
            const float* dc = dctx.row(i) + h * dh;
            float dot = 0.0f;
            for (size_t j = 0; j <= pos; ++j) {
                const float* vj = tape.values.row(j) + h * dh;
                float s = 0.0f;
                for (uint32_t c = 0; c < dh; ++c) s += dc[c] * vj[c];
                dp[j] = s;
                dot += p[j] * s;
                float* dvj = dv.row(j) + h * dh;
                for (uint32_t c = 0; c < dh; ++c) dvj[c] += p[j] * dc[c];
            }
            const float* qi = tape.q.row(i) + h * dh;
            float* dqi = dq.row(i) + h * dh;
            for (size_t j = 0; j <= pos; ++j) {
                const float ds = p[j] * (dp[j] - dot) * inv_sqrt;
                const float* kj = tape.keys.row(j) + h * dh;
                float* dkj = dk.row(j) + h * dh;
                for (uint32_t c = 0; c < dh; ++c) {
                    dqi[c] += ds * kj[c];
                    dkj[c] += ds * qi[c];
                }
            }
        }
    }

    // Only the rows this call appended to the cache belong to the input.
    Tensor dqkv = Tensor::matrix(t, 3 * d);
    for (size_t i = 0; i < t; ++i) {
        std::copy_n(dq.row(i), d, dqkv.row(i));
        std::copy_n(dk.row(tape.start_pos + i), d, dqkv.row(i) + d);
        std::copy_n(dv.row(tape.start_pos + i), d, dqkv.row(i) + 2 * d);
    }
    Tensor da = matmul_bt(dqkv, w.wqkv);
    add_inplace(dh1, layer_norm_backward(da, w.ln1, {tape.xhat1, tape.rstd1}));
    return dh1;
}

Tensor lm_head(const Checkpoint& ckpt, const Tensor& hidden) {
    if (hidden.cols() != ckpt.config.hidden) throw InputError("lm_head: hidden width mismatch");
    return matmul_bt(layer_norm(hidden, ckpt.final_ln), ckpt.embed);
}

int sample_next(std::span<const float> logits, const Sampling& s, SplitMix64& rng) {
    if (logits.empty()) throw InputError("sample_next: empty logits");
    if (!all_finite(logits)) throw InputError("sample_next: non-finite logits");
    if (s.kind == Sampling::Kind::Greedy) {
        size_t best = 0;
        for (size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = i;
        return int(best);
    }
    if (!(s.temperature > 0.0f)) throw InputError("sample_next: temperature must be positive");
    const float mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) z += p[i] = std::exp(double(logits[i] - mx) / s.temperature);
    const double u = rng.uniform() * z;
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return int(i);
    }
    return int(p.size() - 1);
}

LocalModel::LocalModel(const Checkpoint& ckpt) : ckpt_(ckpt), caches_(ckpt.blocks.size()) {}

Tensor LocalModel::step(const Tensor& hidden) {
    Tensor h = hidden;
    for (size_t b = 0; b < ckpt_.blocks.size(); ++b)
        h = block_forward(ckpt_.blocks[b], ckpt_.config, h, caches_[b], uint32_t(position_), false).hidden;
    position_ += hidden.rows();
    return h;
}

void LocalModel::reset() {
    for (auto& c : caches_) c.clear();
    position_ = 0;
}

std::vector<int> generate_local(const Checkpoint& ckpt, std::span<const int> prompt, size_t n_new, const Sampling& s,
                                uint64_t seed) {
    if (prompt.empty()) throw InputError("generate_local: empty prompt");
    LocalModel m(ckpt);
    SplitMix64 rng(seed);
    std::vector<int> out;
    Tensor h = m.step(embed(ckpt, prompt));
    for (size_t n = 0; n < n_new; ++n) {
        Tensor last = slice_rows(h, h.rows() - 1, h.rows());
        const int tok = sample_next(lm_head(ckpt, last).data, s, rng);
        out.push_back(tok);
        if (n + 1 == n_new) break;
        const int next[1] = {tok};
        h = m.step(embed(ckpt, next));
    }
    return out;
}

}  // namespace swarm::model

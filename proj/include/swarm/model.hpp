#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "swarm/quant.hpp"
#include "swarm/splitmix.hpp"
#include "swarm/tensor.hpp"

namespace swarm::model {

struct ModelConfig {
    uint32_t n_layers = 0;
    uint32_t hidden = 0;
    uint32_t n_heads = 0;
    uint32_t vocab = 0;
    uint32_t max_seq = 0;
    uint32_t mlp_ratio = 4;

    uint32_t head_dim() const { return hidden / n_heads; }
    uint32_t mlp_hidden() const { return hidden * mlp_ratio; }
    /// Throws InputError if any invariant is violated.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

struct LayerNorm {
    std::vector<float> gamma;
    std::vector<float> beta;
};

/// Int8 copies of a block's four projections, stored output-major so the
/// outlier columns line up with input features.
struct BlockInt8 {
    quant::Int8Weights qkv, out, mlp_in, mlp_out;
};

struct BlockWeights {
    LayerNorm ln1, ln2;
    Tensor wqkv;      // [d x 3d]
    std::vector<float> bqkv;
    Tensor wo;        // [d x d]
    std::vector<float> bo;
    Tensor w_in;      // [d x r*d]
    std::vector<float> b_in;
    Tensor w_out;     // [r*d x d]
    std::vector<float> b_out;

    /// Set by quantize_block(); forward then runs through matmul on int8 codes.
    std::shared_ptr<const BlockInt8> int8;
};

/// Converts the block to int8 storage. The f32 tensors are replaced by their
/// reconstructions so backward differentiates the weights forward actually uses.
BlockWeights quantize_block(const BlockWeights& w, float threshold = quant::kDefaultOutlierThreshold);

struct Checkpoint {
    ModelConfig config;
    Tensor embed;  // [V x d]; also the tied LM head
    std::vector<BlockWeights> blocks;
    LayerNorm final_ln;
};

/// Per-block attention cache for one session.
struct KvCache {
    Tensor keys;    // [t x d], head h occupies columns [h*dh, (h+1)*dh)
    Tensor values;  // [t x d]
    size_t length() const { return keys.rows(); }
    void clear() { keys = Tensor{}; values = Tensor{}; }
};

/// Everything block_backward needs to differentiate one block_forward call.
struct ActivationTape {
    uint32_t start_pos = 0;
    Tensor input;                 // x
    Tensor xhat1;                 // normalized LN1 input
    std::vector<float> rstd1;
    Tensor q;                     // [t x d]
    Tensor keys, values;          // [start_pos + t x d]
    std::vector<float> probs;     // [t][heads][start_pos + t], causal tail zero
    Tensor ctx;                   // [t x d]
    Tensor xhat2;
    std::vector<float> rstd2;
    Tensor mlp_pre;               // [t x r*d]
    Tensor mlp_act;               // gelu(mlp_pre)
};

struct BlockOutput {
    Tensor hidden;
    std::optional<ActivationTape> tape;
};

Checkpoint gen_checkpoint(uint64_t seed, const ModelConfig& config);

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// FNV-1a over the serialized f32 weights of blocks [begin, end).
uint64_t weights_hash(const Checkpoint& ckpt, uint32_t begin, uint32_t end);
uint64_t weights_hash(std::span<const BlockWeights> blocks);

Tensor embed(const Checkpoint& ckpt, std::span<const int> tokens);

float gelu(float x);
float gelu_grad(float x);
/// ALiBi slope for 1-based head index h: 2^(-8h / n_heads).
float alibi_slope(uint32_t head, uint32_t n_heads);

/// Pre-LN residual block with causal ALiBi attention over concat(cache, new).
/// `cache` is extended in place by hidden.rows() positions; nothing is
/// modified when a precondition fails.
BlockOutput block_forward(const BlockWeights& w, const ModelConfig& cfg, const Tensor& hidden, KvCache& cache,
                          uint32_t start_pos, bool want_tape);

/// Gradient of block_forward w.r.t. its input rows. Weight gradients are
/// never formed; server weights are frozen.
Tensor block_backward(const BlockWeights& w, const ModelConfig& cfg, const ActivationTape& tape, const Tensor& grad_out);

/// Final LayerNorm followed by the tied projection onto embed^T.
Tensor lm_head(const Checkpoint& ckpt, const Tensor& hidden);

struct LayerNormCache {
    Tensor xhat;
    std::vector<float> rstd;
};
Tensor layer_norm(const Tensor& x, const LayerNorm& ln, LayerNormCache* cache = nullptr);
Tensor layer_norm_backward(const Tensor& grad_out, const LayerNorm& ln, const LayerNormCache& cache);

struct Sampling {
    enum class Kind { Greedy, Temperature };
    Kind kind = Kind::Greedy;
    float temperature = 1.0f;

    static Sampling greedy() { return {}; }
    static Sampling with_temperature(float t) { return {Kind::Temperature, t}; }
};

/// Greedy: argmax with lowest-index tie-break. Temperature: softmax(logits/t)
/// inverted against one uniform draw from `rng`.
int sample_next(std::span<const float> logits, const Sampling& s, SplitMix64& rng);

/// Runs every block locally with a private cache per block. This is the
/// single-process oracle the distributed runtime is compared against.
class LocalModel {
public:
    explicit LocalModel(const Checkpoint& ckpt);

    /// Feeds hidden rows at the current position through all blocks.
    Tensor step(const Tensor& hidden);
    size_t position() const { return position_; }
    void reset();

private:
    const Checkpoint& ckpt_;
    std::vector<KvCache> caches_;
    size_t position_ = 0;
};

/// Greedy/temperature generation with the local oracle; returns new tokens only.
std::vector<int> generate_local(const Checkpoint& ckpt, std::span<const int> prompt, size_t n_new,
                                const Sampling& s = Sampling::greedy(), uint64_t seed = 0);

}  // namespace swarm::model

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "swarm/tensor.hpp"

namespace swarm::quant {

inline constexpr uint32_t kDefaultBlockSize = 64;
inline constexpr float kDefaultOutlierThreshold = 6.0f;

/// Dynamic blockwise int8 coding of a tensor: the flattened data is cut into
/// contiguous blocks, each with its own absmax/127 scale.
struct QuantizedBlockwise {
    std::vector<uint32_t> shape;
    uint32_t block_size = kDefaultBlockSize;
    std::vector<float> scales;
    std::vector<int8_t> codes;

    size_t numel() const { return codes.size(); }
    size_t n_blocks() const;
    /// Length of the trailing partial block (0 when the last block is full).
    size_t tail() const;
};

QuantizedBlockwise quantize_blockwise(const Tensor& x, uint32_t block_size = kDefaultBlockSize);
Tensor dequantize_blockwise(const QuantizedBlockwise& q);

/// Int8 weight matrix with full-precision outlier columns.
///
/// A column is an outlier when any entry exceeds the threshold in magnitude.
/// Regular columns are stored as int8 codes with a per-column absmax/127 scale.
struct Int8Weights {
    uint32_t rows = 0;
    uint32_t cols = 0;
    float threshold = kDefaultOutlierThreshold;
    std::vector<uint32_t> outlier_cols;   // sorted
    std::vector<uint32_t> regular_cols;   // sorted, complement of outlier_cols
    std::vector<int8_t> codes;            // [rows x regular_cols.size()]
    std::vector<float> col_scales;        // per regular column
    std::vector<float> outlier_data;      // [rows x outlier_cols.size()]

    /// Full [rows x cols] f32 matrix: dequantized regular part plus exact outliers.
    Tensor reconstruct() const;
};

Int8Weights quantize_weights_int8(const Tensor& w, float threshold = kDefaultOutlierThreshold);

/// W[m x n] * x[n x p]. Contributions are accumulated column by column in
/// index order, so a fully-outlier matrix gives exactly the f32 product.
Tensor matmul_mixed(const Int8Weights& w, const Tensor& x);

/// x[t x n] * W^T for W[m x n]: the row-major form used by linear layers whose
/// weight is stored output-major. y[i, o] = sum_c W[o, c] x[i, c].
Tensor linear_mixed(const Int8Weights& w, const Tensor& x);

struct FootprintReport {
    uint64_t params = 0;
    int bits_per_param = 0;
    uint64_t bytes_total = 0;
    uint64_t servers_needed = 0;
};

FootprintReport memory_footprint(uint64_t params, int bits, uint64_t per_server_bytes);

}  // namespace swarm::quant

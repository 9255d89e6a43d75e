#include "swarm/quant.hpp"

#include <algorithm>
#include <cmath>

#include "swarm/common.hpp"

namespace swarm::quant {

size_t QuantizedBlockwise::n_blocks() const {
    return block_size == 0 ? 0 : (codes.size() + block_size - 1) / block_size;
}

size_t QuantizedBlockwise::tail() const { return block_size == 0 ? 0 : codes.size() % block_size; }

namespace {

int8_t encode(float v, float scale) {
    if (scale == 0.0f) return 0;
    const double r = std::round(double(v) / double(scale));  // half away from zero
    return static_cast<int8_t>(std::clamp(r, -127.0, 127.0));
}

}  // namespace

QuantizedBlockwise quantize_blockwise(const Tensor& x, uint32_t block_size) {
    if (block_size == 0) throw InputError("block_size must be positive");
    if (!all_finite(x.data)) throw InputError("quantize_blockwise: non-finite input");

    QuantizedBlockwise q;
    q.shape = x.shape;
    q.block_size = block_size;
    q.codes.resize(x.numel());
    const size_t n = x.numel();
    q.scales.reserve((n + block_size - 1) / block_size);
    for (size_t begin = 0; begin < n; begin += block_size) {
        const size_t end = std::min(n, begin + block_size);
        float absmax = 0.0f;
        for (size_t i = begin; i < end; ++i) absmax = std::max(absmax, std::fabs(x.data[i]));
        const float scale = absmax / 127.0f;
        q.scales.push_back(scale);
        for (size_t i = begin; i < end; ++i) q.codes[i] = encode(x.data[i], scale);
    }
    return q;
}

Tensor dequantize_blockwise(const QuantizedBlockwise& q) {
    if (q.block_size == 0) throw CorruptionError("quantized tensor has zero block size");
    if (shape_numel(q.shape) != q.codes.size() && !(q.shape.empty() && q.codes.empty()))
        throw CorruptionError("quantized tensor: shape does not match code count");
    if (q.scales.size() != q.n_blocks())
        throw CorruptionError("quantized tensor: scale count does not match block count");

    Tensor out;
    out.shape = q.shape;
    out.data.resize(q.codes.size());
    for (size_t i = 0; i < q.codes.size(); ++i)
        out.data[i] = static_cast<float>(q.codes[i]) * q.scales[i / q.block_size];
    return out;
}

Tensor Int8Weights::reconstruct() const {
    Tensor w = Tensor::matrix(rows, cols);
    const size_t nr = regular_cols.size(), no = outlier_cols.size();
    for (size_t r = 0; r < rows; ++r) {
        for (size_t j = 0; j < nr; ++j)
            w.at(r, regular_cols[j]) = static_cast<float>(codes[r * nr + j]) * col_scales[j];
        for (size_t j = 0; j < no; ++j) w.at(r, outlier_cols[j]) = outlier_data[r * no + j];
    }
    return w;
}

Int8Weights quantize_weights_int8(const Tensor& w, float threshold) {
    if (w.shape.size() != 2) throw InputError("quantize_weights_int8: expected a matrix");
    if (!(threshold > 0.0f)) throw InputError("quantize_weights_int8: threshold must be positive");
    if (!all_finite(w.data)) throw InputError("quantize_weights_int8: non-finite weights");

    Int8Weights q;
    q.rows = w.shape[0];
    q.cols = w.shape[1];
    q.threshold = threshold;

    std::vector<float> colmax(q.cols, 0.0f);
    for (uint32_t r = 0; r < q.rows; ++r)
        for (uint32_t c = 0; c < q.cols; ++c) colmax[c] = std::max(colmax[c], std::fabs(w.at(r, c)));
    for (uint32_t c = 0; c < q.cols; ++c) (colmax[c] > threshold ? q.outlier_cols : q.regular_cols).push_back(c);

    const size_t nr = q.regular_cols.size(), no = q.outlier_cols.size();
    q.codes.resize(size_t(q.rows) * nr);
    q.outlier_data.resize(size_t(q.rows) * no);
    q.col_scales.resize(nr);
    for (size_t j = 0; j < nr; ++j) q.col_scales[j] = colmax[q.regular_cols[j]] / 127.0f;
    for (uint32_t r = 0; r < q.rows; ++r) {
        for (size_t j = 0; j < nr; ++j) q.codes[r * nr + j] = encode(w.at(r, q.regular_cols[j]), q.col_scales[j]);
        for (size_t j = 0; j < no; ++j) q.outlier_data[r * no + j] = w.at(r, q.outlier_cols[j]);
    }
    return q;
}

namespace {

// Per-column accessor in column index order: value of W[r, c] in whichever
// representation the column lives in.
struct ColumnMap {
    std::vector<int32_t> slot;  // >= 0 regular index, < 0 -> -(outlier index) - 1
};

ColumnMap column_map(const Int8Weights& w) {
    ColumnMap m;
    m.slot.resize(w.cols);
    for (size_t j = 0; j < w.regular_cols.size(); ++j) m.slot[w.regular_cols[j]] = int32_t(j);
    for (size_t j = 0; j < w.outlier_cols.size(); ++j) m.slot[w.outlier_cols[j]] = -int32_t(j) - 1;
    return m;
}

}  // namespace

Tensor matmul_mixed(const Int8Weights& w, const Tensor& x) {
    if (x.rows() != w.cols) throw InputError("matmul_mixed: inner dimensions disagree");
    const size_t p = x.cols(), nr = w.regular_cols.size(), no = w.outlier_cols.size();
    const ColumnMap m = column_map(w);
    Tensor out = Tensor::matrix(w.rows, p);
    for (uint32_t r = 0; r < w.rows; ++r) {
        float* orow = out.row(r);
        for (uint32_t c = 0; c < w.cols; ++c) {
            const int32_t s = m.slot[c];
            const float wv = s >= 0 ? float(w.codes[r * nr + s]) * w.col_scales[s]
                                    : w.outlier_data[r * no + size_t(-s - 1)];
            const float* xr = x.row(c);
            for (size_t j = 0; j < p; ++j) orow[j] += wv * xr[j];
        }
    }
    return out;
}

Tensor linear_mixed(const Int8Weights& w, const Tensor& x) {
    if (x.cols() != w.cols) throw InputError("linear_mixed: width mismatch");
    const size_t t = x.rows(), nr = w.regular_cols.size(), no = w.outlier_cols.size();
    // Regular part: int8 dot product per column group, scaled once per column.
    Tensor out = Tensor::matrix(t, w.rows);
    for (size_t i = 0; i < t; ++i) {
        const float* xr = x.row(i);
        for (uint32_t o = 0; o < w.rows; ++o) {
            const int8_t* code = w.codes.data() + size_t(o) * nr;
            float acc = 0.0f;
            for (size_t j = 0; j < nr; ++j) acc += float(code[j]) * w.col_scales[j] * xr[w.regular_cols[j]];
            const float* od = w.outlier_data.data() + size_t(o) * no;
            for (size_t j = 0; j < no; ++j) acc += od[j] * xr[w.outlier_cols[j]];
            out.at(i, o) = acc;
        }
    }
    return out;
}

FootprintReport memory_footprint(uint64_t params, int bits, uint64_t per_server_bytes) {
    if (params == 0 || bits <= 0 || per_server_bytes == 0) throw InputError("memory_footprint: inputs must be positive");
    FootprintReport r;
    r.params = params;
    r.bits_per_param = bits;
    r.bytes_total = params * uint64_t(bits) / 8;
    r.servers_needed = (r.bytes_total + per_server_bytes - 1) / per_server_bytes;
    return r;
}

}  // namespace swarm::quant

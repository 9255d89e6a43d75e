#include "swarm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "swarm/common.hpp"

namespace swarm {

size_t shape_numel(std::span<const uint32_t> shape) {
    size_t n = 1;
    for (uint32_t d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<uint32_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    if (shape_numel(shape) != data.size())
        throw InputError("tensor shape does not match data size " + std::to_string(data.size()));
}

Tensor Tensor::zeros(std::vector<uint32_t> shape_) {
    Tensor t;
    t.data.assign(shape_numel(shape_), 0.0f);
    t.shape = std::move(shape_);
    return t;
}

size_t Tensor::rows() const {
    if (shape.empty()) return 0;
    size_t n = 1;
    for (size_t i = 0; i + 1 < shape.size(); ++i) n *= shape[i];
    return n;
}

size_t Tensor::cols() const { return shape.empty() ? 0 : shape.back(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
    const size_t n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k) throw InputError("matmul: inner dimensions disagree");
    Tensor out = Tensor::matrix(n, m);
    for (size_t i = 0; i < n; ++i) {
        const float* ar = a.row(i);
        float* orow = out.row(i);
        for (size_t p = 0; p < k; ++p) {
            const float av = ar[p];
            const float* br = b.row(p);
            for (size_t j = 0; j < m; ++j) orow[j] += av * br[j];
        }
    }
    return out;
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    const size_t n = a.rows(), k = a.cols(), m = b.rows();
    if (b.cols() != k) throw InputError("matmul_bt: inner dimensions disagree");
    Tensor out = Tensor::matrix(n, m);
    for (size_t i = 0; i < n; ++i) {
        const float* ar = a.row(i);
        for (size_t j = 0; j < m; ++j) {
            const float* br = b.row(j);
            float acc = 0.0f;
            for (size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
            out.at(i, j) = acc;
        }
    }
    return out;
}

void add_bias(Tensor& x, std::span<const float> bias) {
    if (bias.size() != x.cols()) throw InputError("add_bias: width mismatch");
    for (size_t r = 0; r < x.rows(); ++r) {
        float* xr = x.row(r);
        for (size_t c = 0; c < bias.size(); ++c) xr[c] += bias[c];
    }
}

void add_inplace(Tensor& x, const Tensor& y) {
    if (x.data.size() != y.data.size()) throw InputError("add_inplace: size mismatch");
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

Tensor slice_rows(const Tensor& x, size_t begin, size_t end) {
    if (begin > end || end > x.rows()) throw InputError("slice_rows: out of range");
    const size_t c = x.cols();
    Tensor out = Tensor::matrix(end - begin, c);
    std::copy(x.data.begin() + begin * c, x.data.begin() + end * c, out.data.begin());
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.cols() != b.cols()) throw InputError("concat_rows: width mismatch");
    Tensor out = Tensor::matrix(a.rows() + b.rows(), a.cols());
    std::copy(a.data.begin(), a.data.end(), out.data.begin());
    std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
    return out;
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw InputError("max_abs_diff: size mismatch");
    float m = 0.0f;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

bool all_finite(std::span<const float> x) {
    return std::all_of(x.begin(), x.end(), [](float v) { return std::isfinite(v); });
}

}  // namespace swarm

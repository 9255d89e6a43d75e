#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace swarm {

/// Dense row-major f32 tensor. Most of the code works with 2-D [rows x cols]
/// views; the wire format and batched training carry up to 3 dims.
struct Tensor {
    std::vector<uint32_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<uint32_t> shape_, std::vector<float> data_);
    static Tensor zeros(std::vector<uint32_t> shape_);
    static Tensor matrix(size_t rows, size_t cols) { return zeros({uint32_t(rows), uint32_t(cols)}); }

    size_t numel() const { return data.size(); }
    size_t rows() const;  // product of all but the last dim
    size_t cols() const;  // last dim
    bool empty() const { return data.empty(); }

    float* row(size_t r) { return data.data() + r * cols(); }
    const float* row(size_t r) const { return data.data() + r * cols(); }
    float& at(size_t r, size_t c) { return data[r * cols() + c]; }
    float at(size_t r, size_t c) const { return data[r * cols() + c]; }

    bool operator==(const Tensor&) const = default;
};

size_t shape_numel(std::span<const uint32_t> shape);

// Kernels below accumulate each output row independently and always in the
// same order, so a row's result does not depend on how many rows share the
// call. Incremental decoding relies on this to match one-shot forward bitwise.

/// a[n x k] * b[k x m]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[n x k] * b[m x k]^T
Tensor matmul_bt(const Tensor& a, const Tensor& b);
/// Adds bias[cols] to every row.
void add_bias(Tensor& x, std::span<const float> bias);
void add_inplace(Tensor& x, const Tensor& y);

Tensor slice_rows(const Tensor& x, size_t begin, size_t end);
Tensor concat_rows(const Tensor& a, const Tensor& b);

float max_abs_diff(std::span<const float> a, std::span<const float> b);
bool all_finite(std::span<const float> x);

}  // namespace swarm

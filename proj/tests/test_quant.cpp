#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "swarm/common.hpp"
#include "swarm/quant.hpp"
#include "swarm/splitmix.hpp"

using namespace swarm;
using namespace swarm::quant;

namespace {

Tensor vec(std::vector<float> v) {
    const auto n = uint32_t(v.size());
    return Tensor({n}, std::move(v));
}

// Plain triple loop accumulating over the inner index in ascending order.
Tensor naive_matmul(const Tensor& w, const Tensor& x) {
    Tensor out = Tensor::matrix(w.rows(), x.cols());
    for (size_t r = 0; r < w.rows(); ++r)
        for (size_t c = 0; c < w.cols(); ++c)
            for (size_t j = 0; j < x.cols(); ++j) out.at(r, j) += w.at(r, c) * x.at(c, j);
    return out;
}

Tensor random_matrix(uint64_t seed, size_t r, size_t c, float scale) {
    SplitMix64 rng(seed);
    Tensor t = Tensor::matrix(r, c);
    for (float& v : t.data) v = rng.uniform(-scale, scale);
    return t;
}

double frob_rel(const Tensor& a, const Tensor& ref) {
    double num = 0, den = 0;
    for (size_t i = 0; i < a.numel(); ++i) {
        num += double(a.data[i] - ref.data[i]) * (a.data[i] - ref.data[i]);
        den += double(ref.data[i]) * ref.data[i];
    }
    return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("quantize_blockwise worked example") {
    const auto q = quantize_blockwise(vec({1.0f, -2.0f, 0.5f, 4.0f}), 4);
    REQUIRE(q.scales.size() == 1);
    CHECK(q.scales[0] == doctest::Approx(4.0 / 127.0));
    CHECK(q.codes == std::vector<int8_t>{32, -64, 16, 127});
    CHECK(q.tail() == 0);

    const Tensor back = dequantize_blockwise(q);
    CHECK(back.shape == std::vector<uint32_t>{4});
    CHECK(back.data[0] == doctest::Approx(1.007874).epsilon(1e-6));
    CHECK(back.data[1] == doctest::Approx(-2.015748).epsilon(1e-6));
    CHECK(back.data[2] == doctest::Approx(0.503937).epsilon(1e-6));
    CHECK(back.data[3] == doctest::Approx(4.0).epsilon(1e-7));
    const float half = q.scales[0] / 2;
    for (size_t i = 0; i < 4; ++i) CHECK(std::fabs(back.data[i] - std::vector<float>{1, -2, 0.5, 4}[i]) <= half);
}

TEST_CASE("zero, empty and partial-block tensors") {
    const auto z = quantize_blockwise(Tensor::zeros({8}), 4);
    CHECK(z.scales == std::vector<float>{0.0f, 0.0f});
    for (int8_t c : z.codes) CHECK(c == 0);
    CHECK(dequantize_blockwise(z) == Tensor::zeros({8}));

    const auto e = quantize_blockwise(Tensor::zeros({0}), 64);
    CHECK(e.codes.empty());
    CHECK(dequantize_blockwise(e).numel() == 0);

    const auto p = quantize_blockwise(vec({1, 2, 3, 4, 5, 6, 7}), 4);
    CHECK(p.n_blocks() == 2);
    CHECK(p.tail() == 3);
    CHECK(p.codes[6] == 127);
}

TEST_CASE("absmax element maps to +-127") {
    const auto q = quantize_blockwise(vec({0.3f, -9.25f, 1.0f}), 64);
    CHECK(q.codes[1] == -127);
}

TEST_CASE("quantization is a fixed point after one round") {
    const Tensor x = random_matrix(5, 7, 33, 3.0f);
    const Tensor once = dequantize_blockwise(quantize_blockwise(x, 16));
    const Tensor twice = dequantize_blockwise(quantize_blockwise(once, 16));
    CHECK(once == twice);
}

TEST_CASE("bad inputs") {
    CHECK_THROWS_AS(quantize_blockwise(vec({1.0f, NAN}), 4), InputError);
    CHECK_THROWS_AS(quantize_blockwise(vec({1.0f, INFINITY}), 4), InputError);
    CHECK_THROWS_AS(quantize_blockwise(vec({1.0f}), 0), InputError);
    auto q = quantize_blockwise(vec({1, 2, 3, 4, 5}), 4);
    q.scales.pop_back();
    CHECK_THROWS_AS(dequantize_blockwise(q), CorruptionError);
    q = quantize_blockwise(vec({1, 2, 3, 4, 5}), 4);
    q.shape = {6};
    CHECK_THROWS_AS(dequantize_blockwise(q), CorruptionError);
}

TEST_CASE("property: codes are the nearest grid points and dequantization rounds once") {
    SplitMix64 rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const uint32_t n = uint32_t(1 + rng.next() % 300);
        const uint32_t block = uint32_t(1 + rng.next() % 128);
        const double mag = std::pow(10.0, rng.uniform(-4.0, 4.0));
        Tensor x = Tensor::zeros({n});
        for (float& v : x.data) v = rng.uniform(-mag, mag);
        const auto q = quantize_blockwise(x, block);
        const Tensor y = dequantize_blockwise(q);
        for (size_t i = 0; i < n; ++i) {
            const double s = q.scales[i / block];
            REQUIRE(std::fabs(double(q.codes[i]) * s - double(x.data[i])) <= s / 2);
            REQUIRE(y.data[i] == float(double(q.codes[i]) * s));
        }
    }
}

TEST_CASE("an input no f32 output can reach within half a scale step") {
    // Both neighbouring grid points round to f32 values just over scale/2 away.
    const float x = -2.41026497f, s = 0.0255054496f;
    const double lo = std::fabs(double(-94.0f * s) - x), hi = std::fabs(double(-95.0f * s) - x);
    CHECK(lo > s / 2.0);
    CHECK(hi > s / 2.0);
    CHECK(std::fabs(-94.0 * double(s) - double(x)) <= double(s) / 2);
}

TEST_CASE("quantize_weights_int8") {
    SUBCASE("no outliers below threshold") {
        const auto q = quantize_weights_int8(random_matrix(1, 8, 8, 1.0f), 6.0f);
        CHECK(q.outlier_cols.empty());
        CHECK(q.regular_cols.size() == 8);
    }
    SUBCASE("scaled identity is all outliers") {
        Tensor w = Tensor::matrix(4, 4);
        for (size_t i = 0; i < 4; ++i) w.at(i, i) = 10.0f;
        const auto q = quantize_weights_int8(w, 6.0f);
        CHECK(q.outlier_cols == std::vector<uint32_t>{0, 1, 2, 3});
        CHECK(q.regular_cols.empty());
        CHECK(q.codes.empty());
        CHECK(q.reconstruct() == w);
    }
    SUBCASE("random 16x16 with planted outliers reconstructs within half a column step") {
        Tensor w = random_matrix(42, 16, 16, 2.0f);
        w.at(3, 5) = 9.0f;
        w.at(11, 12) = -7.5f;
        const auto q = quantize_weights_int8(w, 6.0f);
        CHECK(q.outlier_cols == std::vector<uint32_t>{5, 12});
        const Tensor rec = q.reconstruct();
        for (size_t j = 0; j < q.regular_cols.size(); ++j) {
            const uint32_t c = q.regular_cols[j];
            float colmax = 0;
            for (size_t r = 0; r < 16; ++r) colmax = std::max(colmax, std::fabs(w.at(r, c)));
            CHECK(q.col_scales[j] == colmax / 127.0f);
            for (size_t r = 0; r < 16; ++r) CHECK(std::fabs(rec.at(r, c) - w.at(r, c)) <= q.col_scales[j] / 2);
        }
        for (uint32_t c : q.outlier_cols)
            for (size_t r = 0; r < 16; ++r) CHECK(rec.at(r, c) == w.at(r, c));
    }
    CHECK_THROWS_AS(quantize_weights_int8(random_matrix(1, 2, 2, 1.0f), 0.0f), InputError);
}

TEST_CASE("matmul_mixed") {
    SUBCASE("zero input") {
        const auto q = quantize_weights_int8(random_matrix(1, 8, 6, 1.0f));
        const Tensor y = matmul_mixed(q, Tensor::matrix(6, 3));
        for (float v : y.data) CHECK(v == 0.0f);
    }
    SUBCASE("all-outlier weights take the exact f32 path") {
        Tensor w = random_matrix(2, 8, 8, 1.0f);
        for (size_t i = 0; i < 8; ++i) w.at(i, i) = 10.0f;
        const Tensor x = random_matrix(3, 8, 5, 1.0f);
        CHECK(matmul_mixed(quantize_weights_int8(w, 6.0f), x) == naive_matmul(w, x));
    }
    SUBCASE("seed-42 random 16x16 within 2% of f32") {
        const Tensor w = random_matrix(42, 16, 16, 1.0f), x = random_matrix(43, 16, 16, 1.0f);
        CHECK(frob_rel(matmul_mixed(quantize_weights_int8(w), x), naive_matmul(w, x)) <= 0.02);
    }
    SUBCASE("threshold limits") {
        const Tensor w = random_matrix(7, 12, 10, 1.0f), x = random_matrix(8, 10, 4, 1.0f);
        CHECK(matmul_mixed(quantize_weights_int8(w, 1e-30f), x) == naive_matmul(w, x));
        const auto pure = quantize_weights_int8(w, std::numeric_limits<float>::max());
        CHECK(pure.outlier_cols.empty());
        CHECK(matmul_mixed(pure, x) == naive_matmul(pure.reconstruct(), x));
    }
    SUBCASE("linear_mixed agrees with matmul_mixed on the transpose") {
        const Tensor w = random_matrix(9, 6, 10, 1.0f), x = random_matrix(10, 3, 10, 1.0f);
        const auto q = quantize_weights_int8(w);
        Tensor xt = Tensor::matrix(10, 3);
        for (size_t i = 0; i < 3; ++i)
            for (size_t c = 0; c < 10; ++c) xt.at(c, i) = x.at(i, c);
        const Tensor a = linear_mixed(q, x), b = matmul_mixed(q, xt);
        for (size_t i = 0; i < 3; ++i)
            for (size_t o = 0; o < 6; ++o) CHECK(a.at(i, o) == doctest::Approx(b.at(o, i)).epsilon(1e-5));
    }
    CHECK_THROWS_AS(matmul_mixed(quantize_weights_int8(random_matrix(1, 4, 4, 1.0f)), Tensor::matrix(3, 2)),
                    InputError);
}

TEST_CASE("memory_footprint") {
    const auto fp16 = memory_footprint(176'000'000'000ull, 16, 8'000'000'000ull);
    CHECK(fp16.bytes_total == 352'000'000'000ull);
    CHECK(fp16.servers_needed == 44);
    const auto int8 = memory_footprint(176'000'000'000ull, 8, 8'000'000'000ull);
    CHECK(int8.bytes_total == 176'000'000'000ull);
    CHECK(int8.servers_needed == 22);
    const auto one = memory_footprint(1, 8, 1);
    CHECK(one.bytes_total == 1);
    CHECK(one.servers_needed == 1);
    CHECK_THROWS_AS(memory_footprint(0, 8, 1), InputError);
}

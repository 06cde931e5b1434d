#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace moelens {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major float32 array. Rank 1 and 2 are what the kernels use.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor filled(Shape shape, float value);
    static Tensor vector(std::initializer_list<float> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    std::span<float> row(std::size_t r);
    std::span<const float> row(std::size_t r) const;
    /// Copy of row r as a rank-1 tensor.
    Tensor row_tensor(std::size_t r) const;

    bool all_finite() const;

private:
    Shape shape_;
    std::vector<float> data_;
};

/// True when shapes match and every element has the same bit pattern.
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// a[m x k] * b[k x n]. Each output element is accumulated in double over
/// ascending k, then rounded to float.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Row-wise softmax with max subtraction. Rank-1 input is treated as one row.
Tensor softmax_rows(const Tensor& a);

inline constexpr double kRmsEpsilon = 1e-6;

/// x / sqrt(mean(x^2) + eps) * gain.
Tensor rms_layer_norm(const Tensor& x, const Tensor& gain);

/// Cosine similarity; 0 when either norm is below 1e-12.
float cosine(const Tensor& u, const Tensor& v);

/// Indices of the k largest scores, ordered by descending score with ties
/// going to the lower index.
std::vector<std::size_t> top_k_indices(const Tensor& scores, std::size_t k);
std::vector<std::size_t> top_k_indices(std::span<const float> scores, std::size_t k);

/// Seeded generator. The raw stream is std::mt19937_64, whose output sequence
/// is fixed by the standard; the real-valued draws below are derived from it
/// by fixed formulas rather than <random> distributions, whose algorithms are
/// implementation-defined.
class Prng {
public:
    explicit Prng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Standard normal via Box-Muller (one draw per call, no caching).
    double normal();
    /// Uniform integer in [0, bound).
    std::uint64_t below(std::uint64_t bound);

private:
    std::mt19937_64 engine_;
};

}  // namespace moelens

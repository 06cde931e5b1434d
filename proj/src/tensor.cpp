#include "moelens/tensor.hpp"

#include "moelens/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>

namespace moelens {

namespace {

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_positive(const Shape& shape) {
    for (std::size_t d : shape) {
        if (d == 0) {
            throw DimensionError("tensor shape " + shape_string(shape) + " has a zero dimension");
        }
    }
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    require_positive(shape_);
    data_.assign(element_count(shape_), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require_positive(shape_);
    if (element_count(shape_) != data_.size()) {
        throw DimensionError("shape " + shape_string(shape_) + " needs " +
                             std::to_string(element_count(shape_)) + " elements, got " +
                             std::to_string(data_.size()));
    }
}

Tensor Tensor::filled(Shape shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<float> values) {
    return Tensor({rows, cols}, std::vector<float>(values));
}

std::span<float> Tensor::row(std::size_t r) {
    const std::size_t cols = shape_.back();
    return std::span<float>(data_).subspan(r * cols, cols);
}

std::span<const float> Tensor::row(std::size_t r) const {
    const std::size_t cols = shape_.back();
    return std::span<const float>(data_).subspan(r * cols, cols);
}

Tensor Tensor::row_tensor(std::size_t r) const {
    auto view = row(r);
    return Tensor({view.size()}, std::vector<float>(view.begin(), view.end()));
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        if (std::bit_cast<std::uint32_t>(da[i]) != std::bit_cast<std::uint32_t>(db[i])) return false;
    }
    return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " * " +
                             shape_string(b.shape()));
    }
    const std::size_t m = a.dim(0), inner = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* arow = a.data().data() + i * inner;
        // p-outer keeps each acc[j] summed in ascending p order.
        for (std::size_t p = 0; p < inner; ++p) {
            const double av = arow[p];
            const float* brow = b.data().data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        float* orow = out.data().data() + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<float>(acc[j]);
    }
    return out;
}

Tensor softmax_rows(const Tensor& a) {
    if (a.rank() != 1 && a.rank() != 2) {
        throw DimensionError("softmax_rows expects rank 1 or 2, got " + shape_string(a.shape()));
    }
    Tensor out(a.shape());
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.size() / cols;
    std::vector<double> e(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        auto in = a.row(r);
        auto dst = out.row(r);
        const double mx = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            e[j] = std::exp(static_cast<double>(in[j]) - mx);
            total += e[j];
        }
        for (std::size_t j = 0; j < cols; ++j) dst[j] = static_cast<float>(e[j] / total);
    }
    return out;
}

Tensor rms_layer_norm(const Tensor& x, const Tensor& gain) {
    if (x.rank() != 1 || gain.shape() != x.shape()) {
        throw DimensionError("rms_layer_norm shape mismatch: " + shape_string(x.shape()) + " vs gain " +
                             shape_string(gain.shape()));
    }
    double sq = 0.0;
    for (float v : x.data()) sq += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(x.size()) + kRmsEpsilon);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = static_cast<float>(static_cast<double>(x[i]) * inv * static_cast<double>(gain[i]));
    }
    return out;
}

float cosine(const Tensor& u, const Tensor& v) {
    if (u.size() != v.size()) {
        throw DimensionError("cosine length mismatch: " + shape_string(u.shape()) + " vs " +
                             shape_string(v.shape()));
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += static_cast<double>(u[i]) * v[i];
        nu += static_cast<double>(u[i]) * u[i];
        nv += static_cast<double>(v[i]) * v[i];
    }
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    if (nu < 1e-12 || nv < 1e-12) return 0.0f;
    return static_cast<float>(std::clamp(dot / (nu * nv), -1.0, 1.0));
}

std::vector<std::size_t> top_k_indices(std::span<const float> scores, std::size_t k) {
    if (k < 1 || k > scores.size()) {
        throw ParameterError("top_k_indices: k=" + std::to_string(k) + " outside [1, " +
                             std::to_string(scores.size()) + "]");
    }
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (scores[a] != scores[b]) return scores[a] > scores[b];
                          return a < b;
                      });
    idx.resize(k);
    return idx;
}

std::vector<std::size_t> top_k_indices(const Tensor& scores, std::size_t k) {
    return top_k_indices(scores.data(), k);
}

double Prng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Prng::normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Prng::below(std::uint64_t bound) {
    if (bound == 0) throw ParameterError("Prng::below: bound must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t v;
    do {
        v = engine_();
    } while (v >= limit);
    return v % bound;
}

}  // namespace moelens

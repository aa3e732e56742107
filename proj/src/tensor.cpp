#include "streamdiff/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace streamdiff {

std::string shape_string(std::span<const Index> shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

Index checked_size(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index e : shape) {
        if (e <= 0) {
            throw DimensionError("tensor extent must be positive, got shape " +
                                 shape_string(shape));
        }
        n *= e;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(checked_size(shape_)), 0.0f);
}

Tensor::Tensor(std::vector<Index> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != static_cast<Index>(data_.size())) {
        throw DimensionError("data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }
}

Tensor Tensor::full(std::vector<Index> shape, float value) {
    Tensor t(std::move(shape));
    t.flat() = value;
    return t;
}

MatMap Tensor::rows2d() {
    if (shape_.empty() || size() == 0) {
        throw DimensionError("empty tensor has no 2-D view");
    }
    return MatMap(data_.data(), size() / last_dim(), last_dim());
}

ConstMatMap Tensor::rows2d() const {
    if (shape_.empty() || size() == 0) {
        throw DimensionError("empty tensor has no 2-D view");
    }
    return ConstMatMap(data_.data(), size() / last_dim(), last_dim());
}

MatMap Tensor::mat(Index rows, Index cols) {
    if (rows * cols != size()) {
        throw DimensionError("view " + std::to_string(rows) + "x" + std::to_string(cols) +
                             " does not cover tensor " + shape_string(shape_));
    }
    return MatMap(data_.data(), rows, cols);
}

ConstMatMap Tensor::mat(Index rows, Index cols) const {
    if (rows * cols != size()) {
        throw DimensionError("view " + std::to_string(rows) + "x" + std::to_string(cols) +
                             " does not cover tensor " + shape_string(shape_));
    }
    return ConstMatMap(data_.data(), rows, cols);
}

bool Tensor::all_finite() const {
    return flat().isFinite().all();
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace

std::uint64_t Rng::next_u64() {
    ++pos;
    return mix64(seed + kGolden * pos);
}

double Rng::next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

float Rng::next_normal() {
    // Box-Muller, cosine branch only: each normal is a function of exactly two
    // stream positions, which keeps the flat stream independent of chunking.
    const std::uint64_t a = next_u64();
    const std::uint64_t b = next_u64();
    const double u1 = static_cast<double>((a >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;       // [0, 1)
    const double r  = std::sqrt(-2.0 * std::log(u1));
    return static_cast<float>(r * std::cos(2.0 * M_PI * u2));
}

Rng Rng::fork(std::uint64_t tag) const {
    Rng child;
    child.seed = mix64(seed ^ mix64(tag + kGolden));
    return child;
}

Rng Rng::fork(std::string_view name) const {
    return fork(fnv1a(name));
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    out.mat(m, n).noalias() = a.mat(m, k) * b.mat(k, n);
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() == 0 || x.size() == 0 || x.last_dim() < 1) {
        throw DimensionError("softmax_lastdim requires a non-empty last dimension");
    }
    Tensor out = x;
    auto m = out.rows2d();
    for (Index r = 0; r < m.rows(); ++r) {
        auto row = m.row(r).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
    }
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain) {
    if (gain.rank() != 1 || gain.dim(0) != x.last_dim()) {
        throw DimensionError("rms_norm gain shape " + shape_string(gain.shape()) +
                             " does not match last extent of " + shape_string(x.shape()));
    }
    Tensor out = x;
    auto m = out.rows2d();
    auto g = gain.flat().transpose();
    for (Index r = 0; r < m.rows(); ++r) {
        auto row = m.row(r).array();
        const float denom = std::sqrt(row.square().mean() + 1e-6f);
        row = row / denom * g;
    }
    return out;
}

Tensor randn(Rng& rng, std::vector<Index> shape) {
    Tensor out(std::move(shape));
    for (Index i = 0; i < out.size(); ++i) {
        out[i] = rng.next_normal();
    }
    return out;
}

}  // namespace streamdiff

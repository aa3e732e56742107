#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "streamdiff/errors.hpp"

namespace streamdiff {

using Index = std::int64_t;

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap      = Eigen::Map<RowMatrixXf>;
using ConstMatMap = Eigen::Map<const RowMatrixXf>;
using VecMap      = Eigen::Map<Eigen::ArrayXf>;
using ConstVecMap = Eigen::Map<const Eigen::ArrayXf>;

std::string shape_string(std::span<const Index> shape);

// Dense f32 array: a shape plus flat row-major storage. All math runs through
// Eigen maps over the flat buffer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<Index> shape);  // zero-filled
    Tensor(std::vector<Index> shape, std::vector<float> data);

    static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<Index> shape, float value);

    const std::vector<Index>& shape() const { return shape_; }
    Index size() const { return static_cast<Index>(data_.size()); }
    int rank() const { return static_cast<int>(shape_.size()); }
    Index dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    Index last_dim() const { return shape_.empty() ? 0 : shape_.back(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](Index flat) { return data_[static_cast<size_t>(flat)]; }
    float operator[](Index flat) const { return data_[static_cast<size_t>(flat)]; }

    VecMap flat() { return VecMap(data_.data(), size()); }
    ConstVecMap flat() const { return ConstVecMap(data_.data(), size()); }

    // 2-D view [size/last_dim, last_dim]; the natural layout for row-wise ops.
    MatMap rows2d();
    ConstMatMap rows2d() const;

    // Explicit 2-D view; rows*cols must cover the whole buffer.
    MatMap mat(Index rows, Index cols);
    ConstMatMap mat(Index rows, Index cols) const;

    bool all_finite() const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    std::vector<Index> shape_;
    std::vector<float> data_;
};

// Counter-based generator: the value at stream position i is a pure function
// of (seed, i), so identical seeds reproduce identical streams regardless of
// how calls are chunked. Forking derives an independent stream.
struct Rng {
    std::uint64_t seed = 0;
    std::uint64_t pos  = 0;

    Rng() = default;
    explicit Rng(std::uint64_t s) : seed(s) {}

    std::uint64_t next_u64();
    double next_unit();    // [0, 1)
    float next_normal();   // consumes exactly two stream positions

    Rng fork(std::uint64_t tag) const;
    Rng fork(std::string_view name) const;
};

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_lastdim(const Tensor& x);
Tensor rms_norm(const Tensor& x, const Tensor& gain);
Tensor randn(Rng& rng, std::vector<Index> shape);

}  // namespace streamdiff

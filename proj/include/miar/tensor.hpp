#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "miar/errors.hpp"

namespace miar {

// Row-major so a [L, d] sequence maps directly onto contiguous storage.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

// Storage behind Eigen maps. A fixed base alignment keeps the vectorized
// kernels' peel/tail split, and so the float rounding, identical across runs.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

// Per-sample sequence [L, d_model].
template <typename T>
using Sequence = Mat<T>;

// Dense float32 tensor of shape [n, l, d], row-major. Stored tensors on disk
// and raw modality inputs use this type; model math converts per sample.
class Tensor3 {
public:
    Tensor3() = default;
    Tensor3(std::size_t n, std::size_t l, std::size_t d)
        : n_(n), l_(l), d_(d), data_(n * l * d, 0.0f) {}

    std::size_t n() const noexcept { return n_; }
    std::size_t l() const noexcept { return l_; }
    std::size_t d() const noexcept { return d_; }
    std::array<std::size_t, 3> shape() const noexcept { return {n_, l_, d_}; }
    std::size_t size() const noexcept { return data_.size(); }

    float& at(std::size_t i, std::size_t t, std::size_t k) { return data_[(i * l_ + t) * d_ + k]; }
    float at(std::size_t i, std::size_t t, std::size_t k) const { return data_[(i * l_ + t) * d_ + k]; }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    ConstMatMap<float> sample(std::size_t i) const {
        return ConstMatMap<float>(data_.data() + i * l_ * d_, static_cast<Eigen::Index>(l_),
                                  static_cast<Eigen::Index>(d_));
    }
    MatMap<float> sample(std::size_t i) {
        return MatMap<float>(data_.data() + i * l_ * d_, static_cast<Eigen::Index>(l_),
                             static_cast<Eigen::Index>(d_));
    }

    bool operator==(const Tensor3&) const = default;

private:
    std::size_t n_ = 0;
    std::size_t l_ = 0;
    std::size_t d_ = 0;
    AlignedVector<float> data_;
};

template <typename T>
void check_same_shape(const Mat<T>& a, const Mat<T>& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": shape mismatch [" + std::to_string(a.rows()) + "," +
                         std::to_string(a.cols()) + "] vs [" + std::to_string(b.rows()) + "," +
                         std::to_string(b.cols()) + "]");
    }
}

}  // namespace miar

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "miar/tensor.hpp"

namespace miar {

using BlockId = std::size_t;

// One named parameter tensor inside the flat parameter buffer. `shape` is the
// logical shape; the block is viewed as a rows x cols row-major matrix.
struct ParamBlock {
    std::string name;
    std::size_t offset = 0;
    std::vector<std::size_t> shape;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const noexcept { return rows * cols; }
};

// Registry of all parameter blocks of a model. Values and gradients live in
// flat buffers indexed by this layout, so optimizers and checkpoints handle
// every block uniformly.
class ParamLayout {
public:
    BlockId add(std::string name, std::vector<std::size_t> shape, std::size_t rows, std::size_t cols);
    BlockId add_matrix(std::string name, std::size_t rows, std::size_t cols) {
        return add(std::move(name), {rows, cols}, rows, cols);
    }
    BlockId add_vector(std::string name, std::size_t n) { return add(std::move(name), {n}, 1, n); }

    const ParamBlock& block(BlockId id) const { return blocks_.at(id); }
    const std::vector<ParamBlock>& blocks() const noexcept { return blocks_; }
    std::size_t total_size() const noexcept { return total_; }

    // Zero-based index of the block containing flat offset `i`.
    BlockId block_of(std::size_t i) const;

private:
    std::vector<ParamBlock> blocks_;
    std::size_t total_ = 0;
};

template <typename T>
class ParamSet {
public:
    ParamSet() = default;
    explicit ParamSet(std::shared_ptr<const ParamLayout> layout)
        : layout_(std::move(layout)), values_(layout_->total_size(), T(0)) {}

    const ParamLayout& layout() const { return *layout_; }
    const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }

    MatMap<T> mat(BlockId id) {
        const auto& b = layout_->block(id);
        return MatMap<T>(values_.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols));
    }
    ConstMatMap<T> mat(BlockId id) const {
        const auto& b = layout_->block(id);
        return ConstMatMap<T>(values_.data() + b.offset, static_cast<Eigen::Index>(b.rows),
                              static_cast<Eigen::Index>(b.cols));
    }
    // Single-row blocks viewed as a row vector.
    Eigen::Map<RowVec<T>> row(BlockId id) {
        const auto& b = layout_->block(id);
        return Eigen::Map<RowVec<T>>(values_.data() + b.offset, static_cast<Eigen::Index>(b.size()));
    }
    Eigen::Map<const RowVec<T>> row(BlockId id) const {
        const auto& b = layout_->block(id);
        return Eigen::Map<const RowVec<T>>(values_.data() + b.offset, static_cast<Eigen::Index>(b.size()));
    }
    T& scalar(BlockId id, std::size_t k = 0) { return values_[layout_->block(id).offset + k]; }
    T scalar(BlockId id, std::size_t k = 0) const { return values_[layout_->block(id).offset + k]; }

    AlignedVector<T>& values() noexcept { return values_; }
    const AlignedVector<T>& values() const noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }

    void set_zero() { std::fill(values_.begin(), values_.end(), T(0)); }

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out(layout_);
        for (std::size_t i = 0; i < values_.size(); ++i) out.values()[i] = static_cast<U>(values_[i]);
        return out;
    }

private:
    std::shared_ptr<const ParamLayout> layout_;
    AlignedVector<T> values_;
};

// Fills `id` with U(-bound, bound), bound = 1/sqrt(fan_in).
template <typename T>
void init_uniform_fan_in(ParamSet<T>& params, BlockId id, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto m = params.mat(id);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

template <typename T>
void init_constant(ParamSet<T>& params, BlockId id, T value) {
    params.mat(id).setConstant(value);
}

}  // namespace miar

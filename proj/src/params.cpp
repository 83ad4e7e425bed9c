#include "miar/params.hpp"

#include <algorithm>

namespace miar {

BlockId ParamLayout::add(std::string name, std::vector<std::size_t> shape, std::size_t rows, std::size_t cols) {
    ParamBlock b;
    b.name = std::move(name);
    b.offset = total_;
    b.shape = std::move(shape);
    b.rows = rows;
    b.cols = cols;
    total_ += b.size();
    blocks_.push_back(std::move(b));
    return blocks_.size() - 1;
}

BlockId ParamLayout::block_of(std::size_t i) const {
    auto it = std::upper_bound(blocks_.begin(), blocks_.end(), i,
                               [](std::size_t v, const ParamBlock& b) { return v < b.offset; });
    return static_cast<BlockId>(std::distance(blocks_.begin(), it)) - 1;
}

}  // namespace miar

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace lvlmlens {

enum class Normalization { Raw, MaxNormalized };

/// rows x cols per-patch scores laid out like the image (row-major).
struct PatchGrid {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;
    Normalization normalization = Normalization::Raw;

    PatchGrid() = default;
    PatchGrid(int r, int c, double fill = 0.0)
        : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}

    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }

    /// Divides by the maximum; an all-zero grid stays zero.
    PatchGrid max_normalized() const;

    /// `row,col,value` header then one line per cell, row-major.
    std::string to_csv() const;
    nlohmann::json to_json() const;
};

}  // namespace lvlmlens

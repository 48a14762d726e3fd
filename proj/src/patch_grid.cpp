#include "lvlmlens/patch_grid.hpp"

#include <algorithm>
#include <cstdio>

namespace lvlmlens {

PatchGrid PatchGrid::max_normalized() const {
    PatchGrid out = *this;
    out.normalization = Normalization::MaxNormalized;
    const double mx = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
    if (mx > 0.0)
        for (double& v : out.values) v /= mx;
    else
        std::fill(out.values.begin(), out.values.end(), 0.0);
    return out;
}

std::string PatchGrid::to_csv() const {
    std::string out = "row,col,value\n";
    char buf[64];
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            std::snprintf(buf, sizeof buf, "%d,%d,%.17g\n", r, c, at(r, c));
            out += buf;
        }
    return out;
}

nlohmann::json PatchGrid::to_json() const {
    return {{"rows", rows},
            {"cols", cols},
            {"values", values},
            {"normalization", normalization == Normalization::Raw ? "raw" : "max_normalized"}};
}

}  // namespace lvlmlens

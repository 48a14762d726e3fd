#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lvlmlens/colormap.hpp"
#include "lvlmlens/matrix.hpp"
#include "lvlmlens/patch_grid.hpp"
#include "lvlmlens/trace.hpp"

namespace lvlmlens::attn {

struct TokenScore {
    int token = 0;
    double score = 0.0;
};

/// L x H attention mass from one query row onto the image columns.
struct HeadLayerSummary {
    int token = 0;
    Matrix mass;  // rows = layers, cols = heads
};

/// Mean attention from the selected query rows onto each image patch.
PatchGrid image_to_query_map(const trace::Trace& trace, std::span<const int> selected_tokens, int layer,
                             trace::HeadSelector head);

/// For every generated token, the mean attention it puts on the selected patches.
std::vector<TokenScore> query_to_image_profile(const trace::Trace& trace,
                                               std::span<const trace::PatchCoord> selected_patches, int layer,
                                               trace::HeadSelector head);

HeadLayerSummary head_layer_summary(const trace::Trace& trace, int token);

/// Tints each patch region of the source image with colormap(value), blended at alpha.
std::vector<std::uint8_t> render_overlay(const PatchGrid& grid, std::span<const std::uint8_t> image_png,
                                         double alpha, Colormap colormap);

}  // namespace lvlmlens::attn

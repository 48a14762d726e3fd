#include "lvlmlens/attnview.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "lvlmlens/png_io.hpp"

namespace lvlmlens::attn {

using trace::HeadSelector;
using trace::Trace;

namespace {

int last_image_index(const Trace& trace) {
    const auto image = trace.image_token_indices();
    return image.empty() ? -1 : image.back();
}

}  // namespace

PatchGrid image_to_query_map(const Trace& trace, std::span<const int> selected_tokens, int layer,
                             HeadSelector head) {
    if (selected_tokens.empty()) throw Error(ErrorCode::EmptySelection, "no tokens selected");
    const std::set<int> selected(selected_tokens.begin(), selected_tokens.end());
    const int last_image = last_image_index(trace);
    for (int t : selected) {
        if (t < 0 || t >= trace.seq_len)
            throw Error(ErrorCode::IndexOutOfRange, "token " + std::to_string(t) + " outside sequence");
        if (t < last_image)
            throw Error(ErrorCode::IndexOutOfRange,
                        "token " + std::to_string(t) + " precedes image token " + std::to_string(last_image));
    }
    const Matrix a = trace::attention_slice(trace, layer, head);
    const auto table = trace.patch_token_table();

    PatchGrid grid(trace.patch_rows, trace.patch_cols);
    for (int r = 0; r < grid.rows; ++r)
        for (int c = 0; c < grid.cols; ++c) {
            const int col = table[static_cast<std::size_t>(r) * grid.cols + c];
            double sum = 0.0;
            for (int t : selected) sum += a(t, col);
            grid.at(r, c) = sum / static_cast<double>(selected.size());
        }
    return grid;
}

std::vector<TokenScore> query_to_image_profile(const Trace& trace, std::span<const trace::PatchCoord> selected_patches,
                                               int layer, HeadSelector head) {
    if (selected_patches.empty()) throw Error(ErrorCode::EmptySelection, "no patches selected");
    const std::set<trace::PatchCoord> patches(selected_patches.begin(), selected_patches.end());
    for (const auto& p : patches)
        if (p.row < 0 || p.col < 0 || p.row >= trace.patch_rows || p.col >= trace.patch_cols)
            throw Error(ErrorCode::IndexOutOfRange,
                        "patch (" + std::to_string(p.row) + "," + std::to_string(p.col) + ") outside grid");
    const Matrix a = trace::attention_slice(trace, layer, head);
    const auto table = trace.patch_token_table();

    std::vector<TokenScore> scores;
    for (int t : trace.generated_indices) {
        double sum = 0.0;
        for (const auto& p : patches) sum += a(t, table[static_cast<std::size_t>(p.row) * trace.patch_cols + p.col]);
        scores.push_back({t, sum / static_cast<double>(patches.size())});
    }
    return scores;
}

HeadLayerSummary head_layer_summary(const Trace& trace, int token) {
    if (token < 0 || token >= trace.seq_len)
        throw Error(ErrorCode::IndexOutOfRange, "token " + std::to_string(token) + " outside sequence");
    if (token <= last_image_index(trace))
        throw Error(ErrorCode::IndexOutOfRange, "token " + std::to_string(token) + " is not after the image region");
    const auto image = trace.image_token_indices();
    HeadLayerSummary out{token, Matrix(static_cast<std::size_t>(trace.num_layers),
                                       static_cast<std::size_t>(trace.num_heads))};
    for (int l = 0; l < trace.num_layers; ++l)
        for (int h = 0; h < trace.num_heads; ++h) {
            double sum = 0.0;
            for (int j : image) sum += trace.attention(l, h, token, j);
            out.mass(l, h) = sum;
        }
    return out;
}

std::vector<std::uint8_t> render_overlay(const PatchGrid& grid, std::span<const std::uint8_t> image_png, double alpha,
                                         Colormap colormap) {
    if (image_png.empty()) throw Error(ErrorCode::NoImage, "trace carries no image");
    if (grid.normalization != Normalization::MaxNormalized)
        throw Error(ErrorCode::NotNormalized, "overlay requires a max-normalized grid");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::BadParams, "alpha must lie in [0,1]");
    if (grid.rows < 1 || grid.cols < 1) throw Error(ErrorCode::ZeroDimension, "empty grid");

    RgbImage img = decode_png(image_png);
    for (int y = 0; y < img.height; ++y) {
        const int r = static_cast<int>(static_cast<long>(y) * grid.rows / img.height);
        for (int x = 0; x < img.width; ++x) {
            const int c = static_cast<int>(static_cast<long>(x) * grid.cols / img.width);
            const Rgb tint = colormap_lookup(colormap, grid.at(r, c));
            std::uint8_t* px = img.at(x, y);
            for (int ch = 0; ch < 3; ++ch) {
                const double blended = (1.0 - alpha) * px[ch] + alpha * 255.0 * tint[ch];
                px[ch] = static_cast<std::uint8_t>(std::clamp(std::lround(blended), 0l, 255l));
            }
        }
    }
    return encode_png(img);
}

}  // namespace lvlmlens::attn

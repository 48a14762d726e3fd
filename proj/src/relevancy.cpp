#include "lvlmlens/relevancy.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

namespace lvlmlens::relevancy {

using trace::Modality;
using trace::Trace;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

RelevancyMatrix compute_relevancy(const Trace& trace, int generated, LayerRange layers) {
    if (generated < 0 || generated >= trace.seq_len)
        throw Error(ErrorCode::IndexOutOfRange, "token " + std::to_string(generated) + " outside sequence");
    if (!trace.is_generated(generated))
        throw Error(ErrorCode::NotAGeneratedToken, "token " + std::to_string(generated) + " is not generated");
    const auto it = trace.gradients.find(generated);
    if (it == trace.gradients.end())
        throw Error(ErrorCode::MissingGradients, "no gradients for token " + std::to_string(generated));
    if (generated < 1) throw Error(ErrorCode::IndexOutOfRange, "generated token at position 0 has no query row");
    const int L = trace.num_layers;
    const int end = layers.end < 0 ? L : layers.end;
    if (layers.begin < 0 || end > L || layers.begin > end)
        throw Error(ErrorCode::IndexOutOfRange, "layer range [" + std::to_string(layers.begin) + "," +
                                                    std::to_string(end) + ") outside " + std::to_string(L));

    const auto& grad = it->second;
    const int S = trace.seq_len;
    const int H = trace.num_heads;
    RowMatrix r = RowMatrix::Identity(S, S);
    RowMatrix cam(S, S);
    for (int l = layers.begin; l < end; ++l) {
        cam.setZero();
        for (int h = 0; h < H; ++h)
            for (int i = 0; i < S; ++i)
                for (int j = 0; j <= i; ++j) {
                    const double v = static_cast<double>(grad(l, h, i, j)) * static_cast<double>(trace.attention(l, h, i, j));
                    if (v > 0.0) cam(i, j) += v;
                }
        cam /= static_cast<double>(H);
        r += cam * r;
    }

    RelevancyMatrix out{generated, generated - 1, Matrix(static_cast<std::size_t>(S), static_cast<std::size_t>(S))};
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) out.values(i, j) = r(i, j);
    return out;
}

PatchGrid image_relevancy_raw(const RelevancyMatrix& r, const Trace& trace) {
    if (static_cast<int>(r.values.rows()) != trace.seq_len)
        throw Error(ErrorCode::ShapeMismatch, "relevancy matrix does not match trace length");
    const auto table = trace.patch_token_table();
    PatchGrid grid(trace.patch_rows, trace.patch_cols);
    for (std::size_t n = 0; n < table.size(); ++n) grid.values[n] = r.values(r.query, table[n]);
    return grid;
}

PatchGrid image_relevancy_grid(const RelevancyMatrix& r, const Trace& trace) {
    return image_relevancy_raw(r, trace).max_normalized();
}

Matrix upsample_bilinear(const PatchGrid& grid, int out_width, int out_height) {
    if (out_width < 1 || out_height < 1 || grid.rows < 1 || grid.cols < 1)
        throw Error(ErrorCode::ZeroDimension, "bilinear resampling needs non-empty input and output");
    auto source_coord = [](int x, int in, int out) {
        const double s = (x + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        return std::clamp(s, 0.0, static_cast<double>(in - 1));
    };
    Matrix out(static_cast<std::size_t>(out_height), static_cast<std::size_t>(out_width));
    for (int y = 0; y < out_height; ++y) {
        const double sy = source_coord(y, grid.rows, out_height);
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, grid.rows - 1);
        const double fy = sy - y0;
        for (int x = 0; x < out_width; ++x) {
            const double sx = source_coord(x, grid.cols, out_width);
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, grid.cols - 1);
            const double fx = sx - x0;
            // std::lerp is exact at the endpoints and stays within them.
            const double top = std::lerp(grid.at(y0, x0), grid.at(y0, x1), fx);
            const double bottom = std::lerp(grid.at(y1, x0), grid.at(y1, x1), fx);
            out(y, x) = std::lerp(top, bottom, fy);
        }
    }
    return out;
}

ModalitySplit modality_relevancy_split(const RelevancyMatrix& r, const Trace& trace) {
    const auto image = trace.indices_with_modality(Modality::Image);
    const auto text = trace.indices_with_modality(Modality::TextPrompt);
    if (image.empty()) throw Error(ErrorCode::EmptyModality, "trace has no image tokens");
    if (text.empty()) throw Error(ErrorCode::EmptyModality, "trace has no text_prompt tokens");
    auto mean_over = [&](const std::vector<int>& cols) {
        double s = 0.0;
        // The identity self-term at column q is not relevance to an input.
        for (int j : cols) s += r.values(r.query, j) - (j == r.query ? 1.0 : 0.0);
        return s / static_cast<double>(cols.size());
    };
    return {mean_over(image), mean_over(text)};
}

}  // namespace lvlmlens::relevancy

#pragma once

#include <optional>

#include "lvlmlens/matrix.hpp"
#include "lvlmlens/patch_grid.hpp"
#include "lvlmlens/trace.hpp"

namespace lvlmlens::relevancy {

/// Accumulated relevancy for one generated token; row `query` scores every input position.
struct RelevancyMatrix {
    int generated = 0;
    int query = 0;  // generated - 1, the row whose logits emitted the token
    Matrix values;  // S x S
};

/// Half-open layer interval [begin, end); end < 0 means num_layers.
struct LayerRange {
    int begin = 0;
    int end = -1;
};

struct ModalitySplit {
    double image_mean = 0.0;
    double text_mean = 0.0;
};

/// R = I; for each layer R += mean_h[(grad * attn)^+] * R.
RelevancyMatrix compute_relevancy(const trace::Trace& trace, int generated, LayerRange layers = {});

/// Raw R[q, patch] gathered into the image layout.
PatchGrid image_relevancy_raw(const RelevancyMatrix& r, const trace::Trace& trace);

/// image_relevancy_raw, max-normalized.
PatchGrid image_relevancy_grid(const RelevancyMatrix& r, const trace::Trace& trace);

/// Half-pixel-centre bilinear resampling to out_height x out_width.
Matrix upsample_bilinear(const PatchGrid& grid, int out_width, int out_height);

ModalitySplit modality_relevancy_split(const RelevancyMatrix& r, const trace::Trace& trace);

}  // namespace lvlmlens::relevancy

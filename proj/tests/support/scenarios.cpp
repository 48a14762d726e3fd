#include "scenarios.hpp"

#include <algorithm>

namespace lvlmlens::testing {

namespace {

constexpr int kRed = 1;    // residual channel carrying the patch red level
constexpr int kBias = 2;   // residual channel set by the patch bias
constexpr int kQuery = 3;  // zero-gain LN channel: a constant query for every position
constexpr int kTarget = 9;

void zero(Matrix& m) { std::fill(m.values().begin(), m.values().end(), 0.0); }
void zero(std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); }

toy::ToyConfig scenario_config() {
    toy::ToyConfig c;
    c.d_model = 16;
    c.num_layers = 2;
    c.num_heads = 2;
    c.vocab_size = 16;
    c.patch_rows = 3;
    c.patch_cols = 3;
    c.patch_pixels = 2;
    c.feature_blocks = 1;
    c.seed = 11;
    c.max_new_tokens = 2;
    return c;
}

// One-hot embeddings, final LN left at unit gain / zero bias.
toy::ToyModel base_model() {
    auto model = zeroed_model(scenario_config());
    auto& w = model.mutable_weights();
    for (int t = 0; t < 16; ++t) w.token_embedding(t, t) = 1.0;
    return model;
}

// Keys and values of last-layer head 0 read `channel`; the value lands on the target logit.
void install_copy_head(toy::ToyModel& model, int channel, double sharpness) {
    auto& layer = model.mutable_weights().layers.back();
    std::fill(layer.ln1_gain.begin(), layer.ln1_gain.end(), 1.0);
    layer.ln1_gain[kQuery] = 0.0;
    layer.ln1_bias[kQuery] = 1.0;
    layer.wq(kQuery, 0) = 1.0;
    layer.wk(channel, 0) = sharpness;
    layer.wv(channel, 0) = 1.0;
    layer.wo(0, kTarget) = 1.0;
}

toy::SyntheticImage scenario_image(int red_patch) {
    const auto c = scenario_config();
    RgbImage px;
    px.width = c.patch_cols * c.patch_pixels;
    px.height = c.patch_rows * c.patch_pixels;
    px.pixels.assign(static_cast<std::size_t>(px.width) * px.height * 3, 0);
    for (int y = 0; y < px.height; ++y)
        for (int x = 0; x < px.width; ++x) {
            const int patch = (y / c.patch_pixels) * c.patch_cols + x / c.patch_pixels;
            auto* p = px.at(x, y);
            if (patch == red_patch) {
                p[0] = 255;
            } else {
                p[1] = static_cast<std::uint8_t>(40 + 23 * patch);
                p[2] = static_cast<std::uint8_t>(200 - 17 * patch);
            }
        }
    return toy::SyntheticImage::from_pixels(std::move(px), c.patch_rows, c.patch_cols, c.feature_blocks);
}

}  // namespace

toy::ToyModel zeroed_model(const toy::ToyConfig& config) {
    auto model = toy::ToyModel::init(config);
    auto& w = model.mutable_weights();
    zero(w.token_embedding);
    zero(w.patch_projection);
    zero(w.patch_bias);
    w.position_scale = 0.0;
    for (auto& l : w.layers) {
        std::fill(l.ln1_gain.begin(), l.ln1_gain.end(), 1.0);
        zero(l.ln1_bias);
        zero(l.wq);
        zero(l.wk);
        zero(l.wv);
        zero(l.wo);
        std::fill(l.ln2_gain.begin(), l.ln2_gain.end(), 1.0);
        zero(l.ln2_bias);
        zero(l.w1);
        zero(l.b1);
        zero(l.w2);
        zero(l.b2);
    }
    std::fill(w.final_gain.begin(), w.final_gain.end(), 1.0);
    zero(w.final_bias);
    return model;
}

Scenario copy_head_scenario() {
    constexpr int red_patch = 8;
    auto model = base_model();
    auto& w = model.mutable_weights();
    w.patch_projection(0, kRed) = 1.0;  // red channel of the single feature block
    w.patch_bias[kBias] = 1.0;
    install_copy_head(model, kRed, 8.0);
    auto image = scenario_image(red_patch);
    const int first = image.num_patches() + 2;
    return {std::move(model), std::move(image), {5, 6}, kTarget, red_patch, first};
}

Scenario text_forced_scenario() {
    auto model = base_model();
    install_copy_head(model, 5, 8.0);
    auto image = scenario_image(-1);
    const int first = image.num_patches() + 2;
    return {std::move(model), std::move(image), {5, 6}, kTarget, image.num_patches(), first};
}

}  // namespace lvlmlens::testing

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lvlmlens/matrix.hpp"
#include "lvlmlens/png_io.hpp"
#include "lvlmlens/trace.hpp"

namespace lvlmlens::toy {

struct ToyConfig {
    int d_model = 32;
    int num_layers = 2;
    int num_heads = 2;
    int vocab_size = 64;
    int patch_rows = 4;
    int patch_cols = 4;
    int patch_pixels = 4;    // side of one patch in pixels
    int feature_blocks = 2;  // each patch is split into feature_blocks^2 pixel blocks
    std::uint64_t seed = 7;
    int max_new_tokens = 3;

    int patch_dim() const noexcept { return 3 * feature_blocks * feature_blocks; }
    int num_patches() const noexcept { return patch_rows * patch_cols; }
    /// Throws InvalidConfig.
    void validate() const;
};

/// RGB raster plus per-patch features: the mean RGB (scaled to [0,1]) of every pixel block.
struct SyntheticImage {
    RgbImage pixels;
    int rows = 0;
    int cols = 0;
    int feature_blocks = 0;
    std::vector<double> features;  // rows*cols x patch_dim, row-major by patch

    int patch_dim() const noexcept { return 3 * feature_blocks * feature_blocks; }
    int num_patches() const noexcept { return rows * cols; }
    std::span<const double> feature(int patch) const {
        return {features.data() + static_cast<std::size_t>(patch) * patch_dim(),
                static_cast<std::size_t>(patch_dim())};
    }

    /// Seeded random blocky image sized for `config`.
    static SyntheticImage generate(const ToyConfig& config, std::uint64_t seed);
    static SyntheticImage from_pixels(RgbImage pixels, int rows, int cols, int feature_blocks);

    /// Mean feature vector across all patches.
    std::vector<double> mean_feature() const;
    /// Copy with the listed patches' features replaced by mean_feature(); pixels untouched.
    SyntheticImage with_masked_patches(std::span<const int> patches) const;
};

struct LayerWeights {
    std::vector<double> ln1_gain, ln1_bias;
    Matrix wq, wk, wv, wo;  // d x d, applied as x * W
    std::vector<double> ln2_gain, ln2_bias;
    Matrix w1;  // d x 4d
    std::vector<double> b1;
    Matrix w2;  // 4d x d
    std::vector<double> b2;
};

struct ToyWeights {
    Matrix token_embedding;   // vocab x d, also the output projection
    Matrix patch_projection;  // patch_dim x d
    std::vector<double> patch_bias;
    double position_scale = 1.0;  // multiplier on sinusoidal position codes
    std::vector<LayerWeights> layers;
    std::vector<double> final_gain, final_bias;
};

/// Dense f64 tensor [layers, heads, seq, seq].
struct AttentionMaps {
    int layers = 0;
    int heads = 0;
    int seq = 0;
    std::vector<double> values;

    AttentionMaps() = default;
    AttentionMaps(int l, int h, int s)
        : layers(l), heads(h), seq(s), values(static_cast<std::size_t>(l) * h * s * s, 0.0) {}

    double operator()(int l, int h, int i, int j) const { return values[offset(l, h, i, j)]; }
    double& operator()(int l, int h, int i, int j) { return values[offset(l, h, i, j)]; }

private:
    std::size_t offset(int l, int h, int i, int j) const {
        return ((static_cast<std::size_t>(l) * heads + h) * seq + i) * seq + j;
    }
};

namespace detail {
struct LayerCache {
    Matrix input;
    Matrix ln1_norm;
    std::vector<double> ln1_rstd;
    Matrix q, k, v;
    Matrix ln2_norm;
    std::vector<double> ln2_rstd;
    Matrix mlp_pre;
    Matrix mlp_act;
};
}  // namespace detail

struct ForwardRecord {
    int num_patches = 0;
    std::vector<int> token_ids;  // text and generated ids following the patches
    std::vector<Matrix> hidden;  // num_layers + 1 residual streams, S x d
    AttentionMaps attention;
    Matrix logits;  // S x vocab

    int seq_len() const noexcept { return num_patches + static_cast<int>(token_ids.size()); }

    // Intermediates kept for the reverse pass.
    std::vector<detail::LayerCache> cache;
    Matrix final_norm;
    std::vector<double> final_rstd;
};

struct GenerationRecord {
    std::vector<int> prompt;
    std::vector<int> generated;
    ForwardRecord replay;  // teacher-forced pass over patches + prompt + generated

    int first_generated_index() const noexcept {
        return replay.num_patches + static_cast<int>(prompt.size());
    }
    std::vector<int> generated_indices() const;
    /// Token id emitted at sequence position g.
    int token_at(int g) const;
};

/// Adds `delta` to one post-softmax attention entry before it is applied to the values.
struct AttentionPerturbation {
    int layer = 0;
    int head = 0;
    int row = 0;
    int col = 0;
    double delta = 0.0;
};

class ToyModel {
public:
    /// Deterministic initialization from config.seed. Throws InvalidConfig.
    static ToyModel init(const ToyConfig& config);

    const ToyConfig& config() const noexcept { return config_; }
    const ToyWeights& weights() const noexcept { return weights_; }
    ToyWeights& mutable_weights() noexcept { return weights_; }

    std::string weight_digest() const;

private:
    ToyModel(ToyConfig config, ToyWeights weights) : config_(std::move(config)), weights_(std::move(weights)) {}

    ToyConfig config_;
    ToyWeights weights_;
};

/// Sequence = image patch tokens followed by text tokens. Throws VocabOverflow.
ForwardRecord run_forward(const ToyModel& model, std::span<const int> tokens, const SyntheticImage& image,
                          const std::optional<AttentionPerturbation>& perturb = std::nullopt);

/// Greedy decoding (ties to the lowest id), then one teacher-forced replay.
GenerationRecord generate_greedy(const ToyModel& model, std::span<const int> prompt, const SyntheticImage& image,
                                 int max_new);

/// d logit[g-1, emitted token g] / d attention[l,h,i,j] for every entry; masked entries are 0.
AttentionMaps attention_gradients(const ToyModel& model, const GenerationRecord& record, int g);

/// Packages a generation episode into a trace; f64 values are rounded to f32.
trace::Trace build_trace(const ToyModel& model, const GenerationRecord& record,
                         const std::map<int, AttentionMaps>& gradients, const SyntheticImage& image);

/// Convenience: generate, differentiate every generated token, package.
trace::Trace toy_pipeline(const ToyModel& model, std::span<const int> prompt, const SyntheticImage& image,
                          int max_new);

std::string model_id_for(const ToyConfig& config);

}  // namespace lvlmlens::toy

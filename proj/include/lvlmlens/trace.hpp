#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "lvlmlens/error.hpp"
#include "lvlmlens/matrix.hpp"

namespace lvlmlens::trace {

inline constexpr int kFormatVersion = 1;
inline constexpr double kRowSumTolerance = 1e-4;

enum class Modality { System, TextPrompt, Image, Generated };

std::string_view modality_name(Modality m) noexcept;
std::optional<Modality> parse_modality(std::string_view s) noexcept;

struct PatchCoord {
    int row = 0;
    int col = 0;
    bool operator==(const PatchCoord&) const = default;
    auto operator<=>(const PatchCoord&) const = default;
};

struct TokenRecord {
    int index = 0;
    std::string text;
    Modality modality = Modality::TextPrompt;
    std::optional<PatchCoord> patch;  // present iff modality == Image

    bool operator==(const TokenRecord&) const = default;
};

struct ImageData {
    std::string file = "image.png";
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> png;

    bool operator==(const ImageData&) const = default;
};

/// f32 tensor of shape [layers, heads, seq, seq]; each layer is one [H,S,S] blob on disk.
class AttentionTensor {
public:
    AttentionTensor() = default;
    AttentionTensor(int layers, int heads, int seq)
        : layers_(layers), heads_(heads), seq_(seq),
          data_(static_cast<std::size_t>(layers) * heads * seq * seq, 0.0f) {}

    int layers() const noexcept { return layers_; }
    int heads() const noexcept { return heads_; }
    int seq() const noexcept { return seq_; }

    float operator()(int l, int h, int i, int j) const { return data_[offset(l, h, i, j)]; }
    float& operator()(int l, int h, int i, int j) { return data_[offset(l, h, i, j)]; }

    std::span<const float> layer(int l) const { return {data_.data() + layer_size() * l, layer_size()}; }
    std::span<float> layer(int l) { return {data_.data() + layer_size() * l, layer_size()}; }
    std::size_t layer_size() const noexcept {
        return static_cast<std::size_t>(heads_) * seq_ * seq_;
    }

    std::span<const float> values() const noexcept { return data_; }
    std::span<float> values() noexcept { return data_; }

    bool operator==(const AttentionTensor&) const = default;

private:
    std::size_t offset(int l, int h, int i, int j) const {
        return ((static_cast<std::size_t>(l) * heads_ + h) * seq_ + i) * seq_ + j;
    }

    int layers_ = 0;
    int heads_ = 0;
    int seq_ = 0;
    std::vector<float> data_;
};

struct Trace {
    int format_version = kFormatVersion;
    std::string model_id;
    int num_layers = 0;
    int num_heads = 0;
    int seq_len = 0;
    int patch_rows = 0;
    int patch_cols = 0;
    std::vector<TokenRecord> tokens;
    std::vector<int> generated_indices;
    std::optional<ImageData> image;
    AttentionTensor attention;
    // generated token index -> d(logit of that token) / d(attention), [L,H,S,S]
    std::map<int, AttentionTensor> gradients;
    // Reserved for a separate vision stack; carried through untouched.
    std::optional<nlohmann::json> vision_attention;

    bool operator==(const Trace&) const = default;

    const TokenRecord& token(int index) const;
    bool is_generated(int index) const;
    /// Sequence indices of image tokens, in sequence order.
    std::vector<int> image_token_indices() const;
    std::vector<int> indices_with_modality(Modality m) const;
    /// Row-major rows*cols table: patch (r,c) -> sequence index.
    std::vector<int> patch_token_table() const;
};

struct ValidationIssue {
    ErrorCode code;
    std::string message;
    std::string location;
};

struct ValidationReport {
    std::vector<ValidationIssue> errors;
    std::vector<ValidationIssue> warnings;

    bool ok() const noexcept { return errors.empty(); }
    nlohmann::json to_json() const;
};

/// Loads a container directory. Throws Error carrying the first violation found.
Trace load_trace(const std::filesystem::path& dir);

/// Writes a container directory; existing attn/ and grad/ subtrees are replaced.
std::filesystem::path save_trace(const Trace& trace, const std::filesystem::path& dir);

/// Reports every violation in the container, never throws for malformed content.
ValidationReport validate_trace(const std::filesystem::path& dir);

/// Checks the invariants of an in-memory trace.
ValidationReport validate(const Trace& trace);

/// Serialized manifest exactly as save_trace writes it.
std::string manifest_bytes(const Trace& trace);

class HeadSelector {
public:
    static HeadSelector mean() noexcept { return HeadSelector(-1); }
    static HeadSelector index(int h) noexcept { return HeadSelector(h); }
    /// Accepts "mean" or a non-negative integer.
    static HeadSelector parse(std::string_view s);

    bool is_mean() const noexcept { return head_ < 0; }
    int head() const noexcept { return head_; }
    std::string to_string() const;

    bool operator==(const HeadSelector&) const = default;

private:
    explicit HeadSelector(int h) : head_(h) {}
    int head_;
};

/// S x S copy of one head at one layer, or the elementwise mean over heads.
Matrix attention_slice(const Trace& trace, int layer, HeadSelector head);

}  // namespace lvlmlens::trace

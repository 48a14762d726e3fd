#include "lvlmlens/trace.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace lvlmlens::trace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view modality_name(Modality m) noexcept {
    switch (m) {
        case Modality::System: return "system";
        case Modality::TextPrompt: return "text_prompt";
        case Modality::Image: return "image";
        case Modality::Generated: return "generated";
    }
    return "text_prompt";
}

std::optional<Modality> parse_modality(std::string_view s) noexcept {
    if (s == "system") return Modality::System;
    if (s == "text_prompt") return Modality::TextPrompt;
    if (s == "image") return Modality::Image;
    if (s == "generated") return Modality::Generated;
    return std::nullopt;
}

const TokenRecord& Trace::token(int index) const {
    if (index < 0 || index >= static_cast<int>(tokens.size()))
        throw Error(ErrorCode::IndexOutOfRange, "token index " + std::to_string(index));
    return tokens[static_cast<std::size_t>(index)];
}

bool Trace::is_generated(int index) const {
    return std::find(generated_indices.begin(), generated_indices.end(), index) !=
           generated_indices.end();
}

std::vector<int> Trace::image_token_indices() const { return indices_with_modality(Modality::Image); }

std::vector<int> Trace::indices_with_modality(Modality m) const {
    std::vector<int> out;
    for (const auto& t : tokens)
        if (t.modality == m) out.push_back(t.index);
    return out;
}

std::vector<int> Trace::patch_token_table() const {
    std::vector<int> table(static_cast<std::size_t>(patch_rows) * patch_cols, -1);
    for (const auto& t : tokens) {
        if (t.modality != Modality::Image || !t.patch) continue;
        const auto [r, c] = *t.patch;
        if (r < 0 || c < 0 || r >= patch_rows || c >= patch_cols) continue;
        table[static_cast<std::size_t>(r) * patch_cols + c] = t.index;
    }
    return table;
}

json ValidationReport::to_json() const {
    auto issues = [](const std::vector<ValidationIssue>& v) {
        json arr = json::array();
        for (const auto& i : v)
            arr.push_back({{"code", std::string(lvlmlens::to_string(i.code))},
                           {"message", i.message},
                           {"location", i.location}});
        return arr;
    };
    return {{"ok", ok()}, {"errors", issues(errors)}, {"warnings", issues(warnings)}};
}

HeadSelector HeadSelector::parse(std::string_view s) {
    if (s == "mean") return mean();
    int h = -1;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), h);
    if (ec != std::errc{} || ptr != s.data() + s.size() || h < 0)
        throw Error(ErrorCode::BadParams, "head must be 'mean' or a non-negative integer, got '" +
                                              std::string(s) + "'");
    return index(h);
}

std::string HeadSelector::to_string() const { return is_mean() ? "mean" : std::to_string(head_); }

Matrix attention_slice(const Trace& trace, int layer, HeadSelector head) {
    const int L = trace.num_layers;
    const int H = trace.num_heads;
    const int S = trace.seq_len;
    if (layer < 0 || layer >= L)
        throw Error(ErrorCode::IndexOutOfRange, "layer " + std::to_string(layer) + " of " + std::to_string(L));
    if (!head.is_mean() && head.head() >= H)
        throw Error(ErrorCode::IndexOutOfRange, "head " + std::to_string(head.head()) + " of " + std::to_string(H));

    Matrix out(static_cast<std::size_t>(S), static_cast<std::size_t>(S));
    if (!head.is_mean()) {
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) out(i, j) = trace.attention(layer, head.head(), i, j);
        return out;
    }
    for (int h = 0; h < H; ++h)
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) out(i, j) += trace.attention(layer, h, i, j);
    for (double& v : out.values()) v /= H;
    return out;
}

namespace {

fs::path attn_blob_path(int l) { return fs::path("attn") / ("layer_" + std::to_string(l) + ".f32"); }

fs::path grad_blob_path(int g, int l) {
    return fs::path("grad") / ("gen_" + std::to_string(g)) / ("layer_" + std::to_string(l) + ".f32");
}

json manifest_json(const Trace& t) {
    json tokens = json::array();
    for (const auto& tok : t.tokens) {
        json j = {{"index", tok.index}, {"text", tok.text}, {"modality", std::string(modality_name(tok.modality))}};
        if (tok.patch) {
            j["patch_row"] = tok.patch->row;
            j["patch_col"] = tok.patch->col;
        }
        tokens.push_back(std::move(j));
    }
    json m = {
        {"format_version", t.format_version},
        {"model_id", t.model_id},
        {"num_layers", t.num_layers},
        {"num_heads", t.num_heads},
        {"seq_len", t.seq_len},
        {"patch_grid", {{"rows", t.patch_rows}, {"cols", t.patch_cols}}},
        {"tokens", std::move(tokens)},
        {"generated_indices", t.generated_indices},
    };
    if (t.image) m["image"] = {{"file", t.image->file}, {"width", t.image->width}, {"height", t.image->height}};
    if (t.vision_attention) m["vision_attention"] = *t.vision_attention;
    return m;
}

std::vector<std::uint8_t> read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, std::span<const std::uint8_t> bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot open " + p.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoError, "write failed: " + p.string());
}

std::vector<std::uint8_t> encode_f32(std::span<const float> values) {
    std::vector<std::uint8_t> bytes(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return bytes;
}

void decode_f32(std::span<const std::uint8_t> bytes, std::span<float> out) {
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
        out[i] = std::bit_cast<float>(bits);
    }
}

// Accumulates every violation while building a Trace from a container.
class Checker {
public:
    explicit Checker(ValidationReport& report) : report_(report) {}

    void error(ErrorCode code, std::string message, std::string location = {}) {
        report_.errors.push_back({code, std::move(message), std::move(location)});
    }
    void warning(ErrorCode code, std::string message, std::string location = {}) {
        report_.warnings.push_back({code, std::move(message), std::move(location)});
    }
    bool failed() const { return !report_.errors.empty(); }

private:
    ValidationReport& report_;
};

template <typename T>
std::optional<T> field(const json& obj, const char* key, Checker& check, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) {
        check.error(ErrorCode::ManifestSchemaError, std::string("missing field '") + key + "'", where);
        return std::nullopt;
    }
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        check.error(ErrorCode::ManifestSchemaError, std::string("field '") + key + "' has wrong type", where);
        return std::nullopt;
    }
}

// Manifest-level invariants; fills the non-tensor parts of `t`.
bool parse_manifest(const json& m, Trace& t, Checker& check) {
    auto version = field<int>(m, "format_version", check, "manifest");
    auto model_id = field<std::string>(m, "model_id", check, "manifest");
    auto L = field<int>(m, "num_layers", check, "manifest");
    auto H = field<int>(m, "num_heads", check, "manifest");
    auto S = field<int>(m, "seq_len", check, "manifest");
    std::optional<int> rows, cols;
    if (m.contains("patch_grid")) {
        rows = field<int>(m["patch_grid"], "rows", check, "manifest.patch_grid");
        cols = field<int>(m["patch_grid"], "cols", check, "manifest.patch_grid");
    } else {
        check.error(ErrorCode::ManifestSchemaError, "missing field 'patch_grid'", "manifest");
    }
    auto gen = field<std::vector<int>>(m, "generated_indices", check, "manifest");

    if (version && *version != kFormatVersion)
        check.error(ErrorCode::ManifestSchemaError, "unsupported format_version " + std::to_string(*version),
                    "manifest.format_version");
    for (auto [name, v] : {std::pair{"num_layers", L}, {"num_heads", H}, {"seq_len", S}})
        if (v && *v < 1) check.error(ErrorCode::ManifestSchemaError, std::string(name) + " must be >= 1", "manifest");
    if (rows && cols && (*rows < 0 || *cols < 0))
        check.error(ErrorCode::ManifestSchemaError, "negative patch grid", "manifest.patch_grid");

    if (!(version && model_id && L && H && S && rows && cols && gen)) return false;
    t.format_version = *version;
    t.model_id = *model_id;
    t.num_layers = *L;
    t.num_heads = *H;
    t.seq_len = *S;
    t.patch_rows = *rows;
    t.patch_cols = *cols;
    t.generated_indices = *gen;

    if (m.contains("vision_attention")) t.vision_attention = m["vision_attention"];

    if (m.contains("image")) {
        const auto& im = m["image"];
        auto file = field<std::string>(im, "file", check, "manifest.image");
        auto w = field<int>(im, "width", check, "manifest.image");
        auto h = field<int>(im, "height", check, "manifest.image");
        if (file && w && h) {
            if (*w < 1 || *h < 1)
                check.error(ErrorCode::ManifestSchemaError, "image dimensions must be positive", "manifest.image");
            ImageData img;
            img.file = *file;
            img.width = *w;
            img.height = *h;
            t.image = std::move(img);
        }
    }

    if (!m.contains("tokens") || !m["tokens"].is_array()) {
        check.error(ErrorCode::ManifestSchemaError, "missing token list", "manifest.tokens");
        return false;
    }
    for (std::size_t n = 0; n < m["tokens"].size(); ++n) {
        const auto& jt = m["tokens"][n];
        const std::string where = "tokens[" + std::to_string(n) + "]";
        TokenRecord tok;
        auto index = field<int>(jt, "index", check, where);
        auto text = field<std::string>(jt, "text", check, where);
        auto mod = field<std::string>(jt, "modality", check, where);
        if (!(index && text && mod)) continue;
        tok.index = *index;
        tok.text = *text;
        auto parsed = parse_modality(*mod);
        if (!parsed) {
            check.error(ErrorCode::ManifestSchemaError, "unknown modality '" + *mod + "'", where);
            continue;
        }
        tok.modality = *parsed;
        const bool has_row = jt.contains("patch_row");
        const bool has_col = jt.contains("patch_col");
        if (has_row || has_col) {
            auto r = field<int>(jt, "patch_row", check, where);
            auto c = field<int>(jt, "patch_col", check, where);
            if (r && c) tok.patch = PatchCoord{*r, *c};
        }
        t.tokens.push_back(std::move(tok));
    }
    return true;
}

void check_token_invariants(const Trace& t, Checker& check) {
    const int S = t.seq_len;
    if (static_cast<int>(t.tokens.size()) != S)
        check.error(ErrorCode::ManifestSchemaError,
                    "token count " + std::to_string(t.tokens.size()) + " != seq_len " + std::to_string(S),
                    "manifest.tokens");
    for (std::size_t n = 0; n < t.tokens.size(); ++n) {
        const auto& tok = t.tokens[n];
        const std::string where = "tokens[" + std::to_string(n) + "]";
        if (tok.index != static_cast<int>(n))
            check.error(ErrorCode::ManifestSchemaError,
                        "index " + std::to_string(tok.index) + " not contiguous (expected " + std::to_string(n) + ")",
                        where);
        const bool is_image = tok.modality == Modality::Image;
        if (is_image && !tok.patch)
            check.error(ErrorCode::ManifestSchemaError, "image token without grid coordinates", where);
        if (!is_image && tok.patch)
            check.error(ErrorCode::ManifestSchemaError, "non-image token with grid coordinates", where);
        if (tok.patch && (tok.patch->row < 0 || tok.patch->row >= t.patch_rows || tok.patch->col < 0 ||
                          tok.patch->col >= t.patch_cols))
            check.error(ErrorCode::ManifestSchemaError, "patch coordinates outside grid", where);
    }

    std::set<PatchCoord> seen;
    int image_count = 0;
    for (const auto& tok : t.tokens) {
        if (tok.modality != Modality::Image) continue;
        ++image_count;
        if (tok.patch && !seen.insert(*tok.patch).second)
            check.error(ErrorCode::ManifestSchemaError, "duplicate patch coordinate",
                        "tokens[" + std::to_string(tok.index) + "]");
    }
    if (image_count != t.patch_rows * t.patch_cols)
        check.error(ErrorCode::ManifestSchemaError,
                    "patch grid " + std::to_string(t.patch_rows) + "x" + std::to_string(t.patch_cols) + " != " +
                        std::to_string(image_count) + " image tokens",
                    "manifest.patch_grid");

    // Generated tokens form a contiguous suffix and match generated_indices.
    std::vector<int> generated;
    for (const auto& tok : t.tokens)
        if (tok.modality == Modality::Generated) generated.push_back(tok.index);
    for (std::size_t n = 0; n < generated.size(); ++n) {
        if (generated[n] != S - static_cast<int>(generated.size()) + static_cast<int>(n)) {
            check.error(ErrorCode::ManifestSchemaError, "generated tokens are not a contiguous suffix",
                        "manifest.tokens");
            break;
        }
    }
    if (generated != t.generated_indices)
        check.error(ErrorCode::ManifestSchemaError, "generated_indices disagrees with token modalities",
                    "manifest.generated_indices");
}

// Reports mask and row-sum violations per (l,h,i), capped at max_reports.
void check_attention(const AttentionTensor& a, Checker& check, int max_reports = 32) {
    int reported = 0;
    for (int l = 0; l < a.layers(); ++l)
        for (int h = 0; h < a.heads(); ++h)
            for (int i = 0; i < a.seq(); ++i) {
                double sum = 0.0;
                bool masked_ok = true;
                for (int j = 0; j < a.seq(); ++j) {
                    const float v = a(l, h, i, j);
                    if (j <= i) sum += v;
                    else if (v != 0.0f) masked_ok = false;
                }
                const std::string where =
                    "layer " + std::to_string(l) + " head " + std::to_string(h) + " row " + std::to_string(i);
                if (!masked_ok && reported++ < max_reports)
                    check.error(ErrorCode::MaskViolation, "non-zero entry above the causal diagonal", where);
                if (!(std::fabs(sum - 1.0) <= kRowSumTolerance) && reported++ < max_reports) {
                    std::ostringstream msg;
                    msg << "row sum " << sum << " outside 1 +- " << kRowSumTolerance;
                    check.error(ErrorCode::MaskViolation, msg.str(), where);
                }
            }
}

void check_tensor_invariants(const Trace& t, Checker& check) {
    const auto& a = t.attention;
    if (a.layers() != t.num_layers || a.heads() != t.num_heads || a.seq() != t.seq_len) {
        check.error(ErrorCode::ShapeMismatch, "attention tensor shape differs from manifest", "attention");
    } else {
        check_attention(a, check);
    }
    for (int g : t.generated_indices) {
        auto it = t.gradients.find(g);
        if (it == t.gradients.end()) {
            check.error(ErrorCode::ShapeMismatch, "missing gradient tensor", "grad/gen_" + std::to_string(g));
            continue;
        }
        const auto& gt = it->second;
        if (gt.layers() != t.num_layers || gt.heads() != t.num_heads || gt.seq() != t.seq_len)
            check.error(ErrorCode::ShapeMismatch, "gradient tensor shape differs from manifest",
                        "grad/gen_" + std::to_string(g));
    }
    for (const auto& [g, _] : t.gradients)
        if (!t.is_generated(g))
            check.error(ErrorCode::ShapeMismatch, "gradient for non-generated token",
                        "grad/gen_" + std::to_string(g));
}

void check_image(const Trace& t, Checker& check) {
    const bool has_image_tokens = t.patch_rows * t.patch_cols > 0;
    if (!t.image || t.image->png.empty()) {
        if (has_image_tokens) check.warning(ErrorCode::NoImage, "image tokens present but no image stored", "image");
    }
}

bool load_into(const fs::path& dir, Trace& t, Checker& check) {
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::is_regular_file(manifest_path)) {
        check.error(ErrorCode::MissingFile, "manifest.json not found", manifest_path.string());
        return false;
    }
    json m;
    try {
        auto bytes = read_file(manifest_path);
        m = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        check.error(ErrorCode::ManifestSchemaError, std::string("manifest is not valid JSON: ") + e.what(),
                    "manifest.json");
        return false;
    }
    if (!parse_manifest(m, t, check)) return false;
    check_token_invariants(t, check);

    const int L = t.num_layers, H = t.num_heads, S = t.seq_len;
    const std::size_t blob_bytes = static_cast<std::size_t>(H) * S * S * 4;

    auto read_tensor = [&](auto path_of, const std::string& label, ErrorCode missing_code,
                           AttentionTensor& out) -> bool {
        out = AttentionTensor(L, H, S);
        bool ok = true;
        for (int l = 0; l < L; ++l) {
            const fs::path rel = path_of(l);
            const fs::path p = dir / rel;
            if (!fs::is_regular_file(p)) {
                check.error(missing_code, label + " blob missing", rel.generic_string());
                ok = false;
                continue;
            }
            auto bytes = read_file(p);
            if (bytes.size() != blob_bytes) {
                check.error(ErrorCode::ShapeMismatch,
                            "blob has " + std::to_string(bytes.size()) + " bytes, expected " +
                                std::to_string(blob_bytes),
                            rel.generic_string());
                ok = false;
                continue;
            }
            decode_f32(bytes, out.layer(l));
        }
        return ok;
    };

    if (read_tensor(attn_blob_path, "attention", ErrorCode::MissingFile, t.attention)) check_attention(t.attention, check);

    for (int g : t.generated_indices) {
        AttentionTensor grad;
        if (read_tensor([g](int l) { return grad_blob_path(g, l); }, "gradient", ErrorCode::ShapeMismatch, grad))
            t.gradients.emplace(g, std::move(grad));
    }

    if (t.image) {
        const fs::path p = dir / t.image->file;
        if (fs::is_regular_file(p)) {
            t.image->png = read_file(p);
        } else {
            check.warning(ErrorCode::NoImage, "image file listed in manifest is missing", t.image->file);
            t.image.reset();
        }
    } else if (t.patch_rows * t.patch_cols > 0) {
        check.warning(ErrorCode::NoImage, "image tokens present but no image stored", "image");
    }
    return !check.failed();
}

}  // namespace

std::string manifest_bytes(const Trace& trace) { return manifest_json(trace).dump(2) + "\n"; }

ValidationReport validate(const Trace& trace) {
    ValidationReport report;
    Checker check(report);
    check_token_invariants(trace, check);
    check_tensor_invariants(trace, check);
    check_image(trace, check);
    return report;
}

ValidationReport validate_trace(const fs::path& dir) {
    ValidationReport report;
    Checker check(report);
    Trace t;
    try {
        load_into(dir, t, check);
    } catch (const Error& e) {
        check.error(e.code(), e.what(), dir.string());
    } catch (const std::exception& e) {
        check.error(ErrorCode::IoError, e.what(), dir.string());
    }
    return report;
}

Trace load_trace(const fs::path& dir) {
    ValidationReport report;
    Checker check(report);
    Trace t;
    if (!load_into(dir, t, check)) {
        const auto& first = report.errors.front();
        std::string message = first.message;
        if (!first.location.empty()) message += " (" + first.location + ")";
        if (report.errors.size() > 1) message += "; " + std::to_string(report.errors.size() - 1) + " more";
        throw Error(first.code, message);
    }
    return t;
}

fs::path save_trace(const Trace& trace, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
    for (const char* sub : {"attn", "grad"}) {
        fs::remove_all(dir / sub, ec);
        if (ec) throw Error(ErrorCode::IoError, "cannot clear " + (dir / sub).string() + ": " + ec.message());
    }
    fs::create_directories(dir / "attn", ec);
    if (ec) throw Error(ErrorCode::IoError, "cannot create " + (dir / "attn").string() + ": " + ec.message());

    const std::string manifest = manifest_bytes(trace);
    write_file(dir / "manifest.json",
               {reinterpret_cast<const std::uint8_t*>(manifest.data()), manifest.size()});
    for (int l = 0; l < trace.attention.layers(); ++l)
        write_file(dir / attn_blob_path(l), encode_f32(trace.attention.layer(l)));
    for (const auto& [g, grad] : trace.gradients) {
        fs::create_directories(dir / grad_blob_path(g, 0).parent_path(), ec);
        if (ec) throw Error(ErrorCode::IoError, "cannot create gradient directory: " + ec.message());
        for (int l = 0; l < grad.layers(); ++l) write_file(dir / grad_blob_path(g, l), encode_f32(grad.layer(l)));
    }
    if (trace.image && !trace.image->png.empty()) write_file(dir / trace.image->file, trace.image->png);
    return dir;
}

}  // namespace lvlmlens::trace

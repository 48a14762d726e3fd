#include "lvlmlens/payloads.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "lvlmlens/attnview.hpp"

namespace lvlmlens::payloads {

using nlohmann::json;

namespace {

json with_version(json doc) {
    doc["engine_version"] = kEngineVersion;
    return doc;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(trim(item));
    return out;
}

}  // namespace

int parse_int(const std::string& s, const char* name) {
    const std::string t = trim(s);
    int v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size())
        throw Error(ErrorCode::BadParams, std::string(name) + " must be an integer, got '" + s + "'");
    return v;
}

double parse_double(const std::string& s, const char* name) {
    const std::string t = trim(s);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size() || !std::isfinite(v))
        throw Error(ErrorCode::BadParams, std::string(name) + " must be a number, got '" + s + "'");
    return v;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    for (const auto& item : split(s, ',')) out.push_back(parse_int(item, "token list entry"));
    if (out.empty()) throw Error(ErrorCode::EmptySelection, "empty token list");
    return out;
}

std::vector<trace::PatchCoord> parse_patch_list(const std::string& s) {
    std::vector<trace::PatchCoord> out;
    for (const auto& item : split(s, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw Error(ErrorCode::BadParams, "patch must be row:col, got '" + item + "'");
        out.push_back({parse_int(item.substr(0, colon), "patch row"), parse_int(item.substr(colon + 1), "patch col")});
    }
    if (out.empty()) throw Error(ErrorCode::EmptySelection, "empty patch list");
    return out;
}

std::string dump(const json& doc) { return doc.dump(2) + "\n"; }

json img2q(const trace::Trace& trace, std::span<const int> tokens, int layer, trace::HeadSelector head) {
    const auto grid = attn::image_to_query_map(trace, tokens, layer, head);
    return with_version({{"mode", "img2q"},
                         {"tokens", std::vector<int>(tokens.begin(), tokens.end())},
                         {"layer", layer},
                         {"head", head.to_string()},
                         {"grid", grid.to_json()},
                         {"grid_normalized", grid.max_normalized().to_json()}});
}

json q2img(const trace::Trace& trace, std::span<const trace::PatchCoord> patches, int layer,
           trace::HeadSelector head) {
    const auto scores = attn::query_to_image_profile(trace, patches, layer, head);
    json patch_list = json::array();
    for (const auto& p : patches) patch_list.push_back({p.row, p.col});
    json score_list = json::array();
    for (const auto& s : scores) score_list.push_back({{"token", s.token}, {"score", s.score}});
    return with_version({{"mode", "q2img"},
                         {"patches", std::move(patch_list)},
                         {"layer", layer},
                         {"head", head.to_string()},
                         {"scores", std::move(score_list)}});
}

json summary(const trace::Trace& trace, int token) {
    const auto s = attn::head_layer_summary(trace, token);
    json mass = json::array();
    for (std::size_t l = 0; l < s.mass.rows(); ++l) {
        const auto row = s.mass.row(l);
        mass.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return with_version({{"token", token},
                         {"num_layers", trace.num_layers},
                         {"num_heads", trace.num_heads},
                         {"mass", std::move(mass)}});
}

json relevancy(const trace::Trace& trace, int generated, relevancy::LayerRange layers) {
    const auto r = relevancy::compute_relevancy(trace, generated, layers);
    const auto raw = relevancy::image_relevancy_raw(r, trace);
    const auto grid = raw.max_normalized();
    const auto split = relevancy::modality_relevancy_split(r, trace);
    const int end = layers.end < 0 ? trace.num_layers : layers.end;
    return with_version({{"g", r.generated},
                         {"q", r.query},
                         {"grid", {{"rows", grid.rows}, {"cols", grid.cols}, {"values", grid.values},
                                   {"raw_values", raw.values}}},
                         {"image_mean", split.image_mean},
                         {"text_mean", split.text_mean},
                         {"layer_range", {layers.begin, end}}});
}

json causal(const trace::Trace& trace, const causal::CausalResult& result) {
    const auto& pag = result.learned.pag;
    const auto& tokens = result.nodes.tokens;

    json nodes = json::array();
    for (int t : tokens)
        nodes.push_back({{"token", t},
                         {"modality", std::string(trace::modality_name(trace.token(t).modality))},
                         {"attention", trace.attention(result.nodes.layer, result.nodes.head, result.nodes.root, t)},
                         {"root", t == result.nodes.root}});

    json edges = json::array();
    for (auto [a, b] : pag.edges())
        edges.push_back({{"from", tokens[a]},
                         {"to", tokens[b]},
                         {"mark_from", causal::mark_name(pag.mark(b, a))},
                         {"mark_to", causal::mark_name(pag.mark(a, b))},
                         {"text", [&] {
                              std::string s = std::to_string(tokens[a]) + " ";
                              s += causal::mark_glyph_left(pag.mark(b, a));
                              s += '-';
                              s += causal::mark_glyph_right(pag.mark(a, b));
                              return s + " " + std::to_string(tokens[b]);
                          }()}});

    json sepsets = json::array();
    for (const auto& [pair, set] : pag.sepsets()) {
        std::vector<int> mapped;
        for (int v : set) mapped.push_back(tokens[v]);
        sepsets.push_back({{"pair", {tokens[pair.first], tokens[pair.second]}}, {"set", mapped}});
    }

    json tree_nodes = json::array();
    for (const auto& n : result.tree.nodes)
        tree_nodes.push_back({{"token", n.token}, {"depth", n.depth},
                              {"parent", n.parent ? json(*n.parent) : json(nullptr)}});

    json explanations = json::object();
    for (const auto& [r, e] : result.explanations) explanations[std::to_string(r)] = e.tokens;

    const auto& p = result.params;
    const auto selected = result.explanations.at(p.radius).tokens;
    return with_version({{"g", result.generated},
                         {"root", result.nodes.root},
                         {"layer", result.nodes.layer},
                         {"params", {{"k", p.k}, {"alpha", p.alpha}, {"head", p.head}, {"radius", p.radius},
                                     {"filter", std::string(causal::filter_name(p.filter))},
                                     {"max_cond_size", p.max_cond_size}, {"n_eff", result.n_eff},
                                     {"feature_axis", std::string(causal::feature_axis_name(p.feature_axis))}}},
                         {"nodes", std::move(nodes)},
                         {"edges", std::move(edges)},
                         {"sepsets", std::move(sepsets)},
                         {"tree", {{"root", result.tree.root}, {"max_depth", result.tree.max_depth()},
                                   {"nodes", std::move(tree_nodes)}}},
                         {"explanations", std::move(explanations)},
                         {"explanation", selected}});
}

std::string pag_text(const causal::CausalResult& result) {
    const auto& pag = result.learned.pag;
    const auto& tokens = result.nodes.tokens;
    std::string out;
    for (auto [a, b] : pag.edges()) {
        out += std::to_string(tokens[a]) + " ";
        out += causal::mark_glyph_left(pag.mark(b, a));
        out += '-';
        out += causal::mark_glyph_right(pag.mark(a, b));
        out += " " + std::to_string(tokens[b]) + "\n";
    }
    return out;
}

json trace_listing(const std::string& trace_id, const trace::Trace& trace) {
    return {{"trace_id", trace_id},
            {"model_id", trace.model_id},
            {"seq_len", trace.seq_len},
            {"num_layers", trace.num_layers},
            {"num_heads", trace.num_heads}};
}

json error(std::string_view code, const std::string& message) {
    return with_version({{"error", std::string(code)}, {"message", message}});
}

namespace {

std::span<const std::uint8_t> image_bytes(const trace::Trace& trace) {
    if (!trace.image || trace.image->png.empty()) throw Error(ErrorCode::NoImage, "trace has no image");
    return trace.image->png;
}

}  // namespace

std::vector<std::uint8_t> relevancy_png(const trace::Trace& trace, int generated, double alpha, attn::Colormap cm) {
    const auto r = relevancy::compute_relevancy(trace, generated);
    return attn::render_overlay(relevancy::image_relevancy_grid(r, trace), image_bytes(trace), alpha, cm);
}

std::vector<std::uint8_t> attention_png(const trace::Trace& trace, std::span<const int> tokens, int layer,
                                        trace::HeadSelector head, double alpha, attn::Colormap cm) {
    const auto grid = attn::image_to_query_map(trace, tokens, layer, head).max_normalized();
    return attn::render_overlay(grid, image_bytes(trace), alpha, cm);
}

}  // namespace lvlmlens::payloads

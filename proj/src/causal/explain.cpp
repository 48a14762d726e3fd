#include "lvlmlens/causal/explain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lvlmlens::causal {

using trace::Modality;
using trace::Trace;

std::string_view filter_name(ModalityFilter f) noexcept {
    return f == ModalityFilter::ImageOnly ? "image_only" : "image_and_text";
}

std::optional<ModalityFilter> parse_filter(std::string_view s) noexcept {
    if (s == "image_only") return ModalityFilter::ImageOnly;
    if (s == "image_and_text") return ModalityFilter::ImageAndText;
    return std::nullopt;
}

std::string_view feature_axis_name(FeatureAxis a) noexcept { return a == FeatureAxis::Rows ? "rows" : "columns"; }

std::optional<FeatureAxis> parse_feature_axis(std::string_view s) noexcept {
    if (s == "rows") return FeatureAxis::Rows;
    if (s == "columns") return FeatureAxis::Columns;
    return std::nullopt;
}

namespace {

bool passes(const Trace& trace, int token, ModalityFilter filter) {
    const Modality m = trace.token(token).modality;
    if (m == Modality::Image) return true;
    return filter == ModalityFilter::ImageAndText && m == Modality::TextPrompt;
}

int query_row_for(const Trace& trace, int generated) {
    if (generated < 0 || generated >= trace.seq_len)
        throw Error(ErrorCode::IndexOutOfRange, "token " + std::to_string(generated) + " outside sequence");
    if (!trace.is_generated(generated) || generated < 1)
        throw Error(ErrorCode::NotAGeneratedToken, "token " + std::to_string(generated) + " is not generated");
    return generated - 1;
}

}  // namespace

int NodeSet::position_of(int token) const {
    auto it = std::lower_bound(tokens.begin(), tokens.end(), token);
    return (it != tokens.end() && *it == token) ? static_cast<int>(it - tokens.begin()) : -1;
}

NodeSet select_top_k_nodes(const Trace& trace, int generated, int k, int head, ModalityFilter filter) {
    const int q = query_row_for(trace, generated);
    if (k < 1) throw Error(ErrorCode::BadParams, "k must be >= 1");
    if (head < 0 || head >= trace.num_heads)
        throw Error(ErrorCode::IndexOutOfRange, "head " + std::to_string(head) + " of " + std::to_string(trace.num_heads));
    const int layer = trace.num_layers - 1;

    std::vector<int> candidates;
    for (const auto& tok : trace.tokens)
        if (tok.index != q && passes(trace, tok.index, filter)) candidates.push_back(tok.index);
    // Highest attention first, lower index on ties.
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
        return trace.attention(layer, head, q, a) > trace.attention(layer, head, q, b);
    });
    if (static_cast<int>(candidates.size()) > k) candidates.resize(static_cast<std::size_t>(k));

    NodeSet nodes;
    nodes.tokens = std::move(candidates);
    nodes.tokens.push_back(q);
    std::sort(nodes.tokens.begin(), nodes.tokens.end());
    nodes.root = q;
    nodes.head = head;
    nodes.layer = layer;
    return nodes;
}

Matrix node_correlation(const Trace& trace, const NodeSet& nodes, FeatureAxis axis) {
    const auto n = nodes.tokens.size();
    if (n < 2) throw Error(ErrorCode::EmptySelection, "correlation needs at least two nodes");
    const int S = trace.seq_len;
    auto feature = [&](int token, int k) {
        return axis == FeatureAxis::Rows ? static_cast<double>(trace.attention(nodes.layer, nodes.head, token, k))
                                         : static_cast<double>(trace.attention(nodes.layer, nodes.head, k, token));
    };
    Matrix gram(n, n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a; b < n; ++b) {
            double s = 0.0;
            for (int k = 0; k < S; ++k) s += feature(nodes.tokens[a], k) * feature(nodes.tokens[b], k);
            gram(a, b) = gram(b, a) = s;
        }
    bool any_zero = false;
    for (std::size_t a = 0; a < n; ++a) any_zero |= gram(a, a) == 0.0;
    if (any_zero)
        for (std::size_t a = 0; a < n; ++a) gram(a, a) += 1e-8;

    Matrix corr(n, n);
    for (std::size_t a = 0; a < n; ++a) {
        if (!(gram(a, a) > 0.0) || !std::isfinite(gram(a, a)))
            throw Error(ErrorCode::DegenerateRow, "node " + std::to_string(nodes.tokens[a]) + " has no usable feature");
        for (std::size_t b = 0; b < n; ++b)
            corr(a, b) = a == b ? 1.0 : gram(a, b) / std::sqrt(gram(a, a) * gram(b, b));
    }
    return corr;
}

int InfluenceTree::max_depth() const noexcept {
    int d = 0;
    for (const auto& n : nodes) d = std::max(d, n.depth);
    return d;
}

std::optional<int> InfluenceTree::depth_of(int token) const {
    for (const auto& n : nodes)
        if (n.token == token) return n.depth;
    return std::nullopt;
}

InfluenceTree influence_tree(const Pag& pag, const NodeSet& nodes, int root_token) {
    const int root = nodes.position_of(root_token);
    if (root < 0 || root >= pag.size())
        throw Error(ErrorCode::RootNotFound, "token " + std::to_string(root_token) + " is not a graph node");
    const int n = pag.size();
    std::vector<int> depth(static_cast<std::size_t>(n), -1);
    std::vector<int> parent(static_cast<std::size_t>(n), -1);
    depth[root] = 0;
    std::vector<int> frontier{root};
    for (int level = 1; !frontier.empty(); ++level) {
        std::vector<int> next;
        for (int x : frontier) {  // ascending position == ascending token index
            for (int w : pag.neighbors(x)) {
                if (depth[w] >= 0) continue;
                // Skip edges pointing out of x: tail at x, arrowhead at w.
                if (pag.mark(w, x) == Mark::Tail && pag.mark(x, w) == Mark::Arrow) continue;
                depth[w] = level;
                parent[w] = x;
                next.push_back(w);
            }
        }
        std::sort(next.begin(), next.end());
        frontier = std::move(next);
    }

    InfluenceTree tree;
    tree.root = root_token;
    for (int v = 0; v < n; ++v) {
        if (depth[v] < 0) continue;
        TreeNode node{nodes.tokens[v], depth[v], std::nullopt};
        if (parent[v] >= 0) node.parent = nodes.tokens[parent[v]];
        tree.nodes.push_back(node);
    }
    std::sort(tree.nodes.begin(), tree.nodes.end(),
              [](const TreeNode& a, const TreeNode& b) { return std::pair(a.depth, a.token) < std::pair(b.depth, b.token); });
    return tree;
}

ExplanationSet explanation_at_radius(const InfluenceTree& tree, int radius, const Trace& trace, ModalityFilter filter) {
    if (radius < 0) throw Error(ErrorCode::BadParams, "radius must be >= 0");
    ExplanationSet e{radius, {}, filter};
    for (const auto& n : tree.nodes)  // already (depth, token) ordered
        if (n.depth >= 1 && n.depth <= radius && passes(trace, n.token, filter)) e.tokens.push_back(n.token);
    return e;
}

std::optional<ExplanationSet> minimal_explanation(const InfluenceTree& tree, const Verifier& verifier, int r_max,
                                                  const Trace& trace, ModalityFilter filter) {
    if (r_max < 1) throw Error(ErrorCode::BadParams, "r_max must be >= 1");
    for (int r = 1; r <= r_max; ++r) {
        auto e = explanation_at_radius(tree, r, trace, filter);
        bool ok = false;
        try {
            ok = verifier(e.tokens);
        } catch (const std::exception& ex) {
            throw Error(ErrorCode::VerifierFailure, ex.what());
        }
        if (ok) return e;
    }
    return std::nullopt;
}

Verifier make_masking_verifier(const toy::ToyModel& model, const toy::SyntheticImage& image, std::vector<int> prompt,
                               int generated) {
    const int first = image.num_patches() + static_cast<int>(prompt.size());
    if (generated < first) throw Error(ErrorCode::NotAGeneratedToken, "position precedes generation");
    const int steps = generated - first + 1;
    const auto original = toy::generate_greedy(model, prompt, image, steps);
    const int emitted = original.token_at(generated);
    return [&model, image, prompt = std::move(prompt), steps, emitted, generated](std::span<const int> tokens) {
        std::vector<int> patches;
        for (int t : tokens)
            if (t >= 0 && t < image.num_patches()) patches.push_back(t);
        const auto masked = image.with_masked_patches(patches);
        const auto rerun = toy::generate_greedy(model, prompt, masked, steps);
        return rerun.token_at(generated) != emitted;
    };
}

CausalResult explain_token(const Trace& trace, int generated, const CausalParams& params) {
    if (params.radius < 0) throw Error(ErrorCode::BadParams, "radius must be >= 0");
    if (!(params.alpha > 0.0 && params.alpha < 1.0)) throw Error(ErrorCode::BadParams, "alpha must lie in (0,1)");
    if (params.max_cond_size < 0) throw Error(ErrorCode::BadParams, "max_cond_size must be >= 0");

    CausalResult out;
    out.generated = generated;
    out.params = params;
    out.n_eff = params.n_eff.value_or(static_cast<double>(trace.seq_len));
    out.nodes = select_top_k_nodes(trace, generated, params.k, params.head, params.filter);
    out.correlation = node_correlation(trace, out.nodes, params.feature_axis);

    const FisherZTest ci(out.correlation, params.alpha, out.n_eff);
    LearnOptions opts;
    opts.max_cond_size = params.max_cond_size;
    out.learned = learn_pag(ci, opts);
    out.tree = influence_tree(out.learned.pag, out.nodes, out.nodes.root);
    const int last = std::max(params.radius, out.tree.max_depth());
    for (int r = 0; r <= last; ++r) out.explanations.emplace(r, explanation_at_radius(out.tree, r, trace, params.filter));
    return out;
}

}  // namespace lvlmlens::causal

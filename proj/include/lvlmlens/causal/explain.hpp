#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "lvlmlens/causal/pag.hpp"
#include "lvlmlens/matrix.hpp"
#include "lvlmlens/toymodel.hpp"
#include "lvlmlens/trace.hpp"

namespace lvlmlens::causal {

enum class ModalityFilter { ImageOnly, ImageAndText };
enum class FeatureAxis { Rows, Columns };

std::string_view filter_name(ModalityFilter f) noexcept;
std::optional<ModalityFilter> parse_filter(std::string_view s) noexcept;
std::string_view feature_axis_name(FeatureAxis a) noexcept;
std::optional<FeatureAxis> parse_feature_axis(std::string_view s) noexcept;

/// Graph nodes for one explanation: the root query row plus its top-k attended tokens.
struct NodeSet {
    std::vector<int> tokens;  // ascending sequence indices, root included
    int root = 0;
    int head = 0;
    int layer = 0;

    int position_of(int token) const;  // -1 when absent
};

NodeSet select_top_k_nodes(const trace::Trace& trace, int generated, int k, int head, ModalityFilter filter);

/// Cosine similarity of the nodes' last-layer attention rows (or columns).
Matrix node_correlation(const trace::Trace& trace, const NodeSet& nodes, FeatureAxis axis = FeatureAxis::Rows);

struct TreeNode {
    int token = 0;
    int depth = 0;
    std::optional<int> parent;
};

struct InfluenceTree {
    int root = 0;
    std::vector<TreeNode> nodes;  // ordered by (depth, token); root first

    int max_depth() const noexcept;
    std::optional<int> depth_of(int token) const;
};

/// Breadth-first tree over edges that are not directed away from the frontier node.
InfluenceTree influence_tree(const Pag& pag, const NodeSet& nodes, int root_token);

struct ExplanationSet {
    int radius = 0;
    std::vector<int> tokens;  // ordered by (depth, index), root excluded
    ModalityFilter filter = ModalityFilter::ImageOnly;

    bool operator==(const ExplanationSet&) const = default;
};

ExplanationSet explanation_at_radius(const InfluenceTree& tree, int radius, const trace::Trace& trace,
                                     ModalityFilter filter);

using Verifier = std::function<bool(std::span<const int> tokens)>;

/// Smallest radius in 1..r_max whose set satisfies the verifier; nullopt when none does.
std::optional<ExplanationSet> minimal_explanation(const InfluenceTree& tree, const Verifier& verifier, int r_max,
                                                  const trace::Trace& trace, ModalityFilter filter);

/// True iff masking the image tokens in the set (features -> dataset mean) changes the token emitted at g.
/// The verifier refers to `model`, which must outlive it.
Verifier make_masking_verifier(const toy::ToyModel& model, const toy::SyntheticImage& image, std::vector<int> prompt,
                               int generated);

struct CausalParams {
    int k = 50;
    double alpha = 0.01;
    int head = 0;
    int radius = 2;
    ModalityFilter filter = ModalityFilter::ImageOnly;
    int max_cond_size = 3;
    std::optional<double> n_eff;  // defaults to seq_len
    FeatureAxis feature_axis = FeatureAxis::Rows;
};

struct CausalResult {
    int generated = 0;
    CausalParams params;
    double n_eff = 0.0;
    NodeSet nodes;
    Matrix correlation;
    LearnResult learned;
    InfluenceTree tree;
    std::map<int, ExplanationSet> explanations;  // radius 0 .. max(radius, tree depth)
};

CausalResult explain_token(const trace::Trace& trace, int generated, const CausalParams& params = {});

}  // namespace lvlmlens::causal

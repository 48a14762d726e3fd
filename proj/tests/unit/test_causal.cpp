#include <doctest.h>

#include <cmath>

#include "dag_checks.hpp"
#include "helpers.hpp"
#include "lvlmlens/causal/explain.hpp"
#include "scenarios.hpp"

using namespace lvlmlens;
using namespace lvlmlens::causal;
using namespace lvlmlens::testing;

namespace {

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("no error thrown");
    return ErrorCode::BadParams;
}

Matrix corr2(double rho) {
    Matrix m = Matrix::identity(2);
    m(0, 1) = m(1, 0) = rho;
    return m;
}

NodeSet nodes_of(std::vector<int> tokens, int root) {
    NodeSet n;
    n.tokens = std::move(tokens);
    n.root = root;
    return n;
}

const trace::Trace& seed7() {
    static const auto t = trace::load_trace(fixture("toy_seed7"));
    return t;
}

}  // namespace

TEST_CASE("fisher z closed form") {
    const long double expected = 0.5L * std::log(3.0L) * std::sqrt(97.0L);
    const auto r = fisher_z_ci(corr2(0.5), 0, 1, {}, 0.01, 100);
    CHECK(std::abs(r.statistic - static_cast<double>(expected)) <= 1e-12);
    CHECK(std::abs(r.statistic - 5.410) <= 1e-3);
    CHECK_FALSE(r.independent);
    CHECK(r.p_value < 0.01);
    CHECK(r.partial_corr == doctest::Approx(0.5));
}

TEST_CASE("zero correlation is independent at every alpha") {
    for (double alpha : {0.5, 0.1, 0.01, 1e-6}) {
        const auto r = fisher_z_ci(corr2(0.0), 0, 1, {}, alpha, 100);
        CHECK(r.independent);
        CHECK(r.p_value == 1.0);
        CHECK(r.statistic == 0.0);
    }
}

TEST_CASE("partial correlation with one conditioning variable") {
    Matrix c = Matrix::identity(3);
    c(0, 1) = c(1, 0) = 0.6;
    c(0, 2) = c(2, 0) = 0.3;
    c(1, 2) = c(2, 1) = -0.2;
    const std::vector<int> z{2};
    const double want = (0.6 - 0.3 * -0.2) / std::sqrt((1 - 0.09) * (1 - 0.04));
    CHECK(std::abs(partial_correlation(c, 0, 1, z) - want) <= 1e-12);
    const auto a = fisher_z_ci(c, 0, 1, z, 0.05, 30);
    const auto b = fisher_z_ci(c, 1, 0, z, 0.05, 30);
    CHECK(a.statistic == b.statistic);
    CHECK(a.p_value == b.p_value);
    CHECK(a.partial_corr == b.partial_corr);
    CHECK(a.independent == b.independent);
}

TEST_CASE("fisher z preconditions") {
    Matrix c = Matrix::identity(3);
    const std::vector<int> z{2};
    CHECK(code_of([&] { fisher_z_ci(c, 0, 1, z, 0.05, 4); }) == ErrorCode::InsufficientSamples);
    const std::vector<int> overlap{1};
    CHECK(code_of([&] { fisher_z_ci(c, 0, 1, overlap, 0.05, 30); }) == ErrorCode::NotDisjoint);
    CHECK(code_of([&] { fisher_z_ci(c, 0, 1, {}, 1.5, 30); }) == ErrorCode::BadParams);
}

TEST_CASE("singular correlation submatrix falls back to a ridge") {
    Matrix c(3, 3, 1.0);  // three identical variables
    const std::vector<int> z{2};
    const double p = partial_correlation(c, 0, 1, z);
    CHECK(std::isfinite(p));
    CHECK(std::abs(p) <= 1.0);
}

TEST_CASE("textbook d-separation") {
    const Dag collider(3, {{0, 2}, {1, 2}});
    const std::vector<int> none, c{2}, b{1};
    CHECK(d_separated(collider, 0, 1, none));
    CHECK_FALSE(d_separated(collider, 0, 1, c));

    const Dag chain(3, {{0, 1}, {1, 2}});
    CHECK(d_separated(chain, 0, 2, b));
    CHECK_FALSE(d_separated(chain, 0, 2, none));

    const Dag fork(3, {{1, 0}, {1, 2}});
    CHECK_FALSE(d_separated(fork, 0, 2, none));
    CHECK(d_separated(fork, 0, 2, b));

    // Conditioning on a collider's descendant opens the path.
    const Dag desc(4, {{0, 2}, {1, 2}, {2, 3}});
    const std::vector<int> d{3};
    CHECK_FALSE(d_separated(desc, 0, 1, d));

    CHECK(code_of([] { Dag(3, {{0, 1}, {1, 2}, {2, 0}}); }) == ErrorCode::CyclicGraph);
    CHECK(code_of([&] { d_separated(chain, 0, 2, std::vector<int>{0}); }) == ErrorCode::NotDisjoint);
}

TEST_CASE("learning a chain leaves every mark circle") {
    const Dag dag(3, {{0, 1}, {1, 2}});
    const auto r = learn_pag(DsepOracle(dag));
    CHECK(r.pag.adjacent(0, 1));
    CHECK(r.pag.adjacent(1, 2));
    CHECK_FALSE(r.pag.adjacent(0, 2));
    REQUIRE(r.pag.sepset(0, 2) != nullptr);
    CHECK(*r.pag.sepset(0, 2) == std::vector<int>{1});
    for (auto [a, b] : r.pag.edges()) {
        CHECK(r.pag.mark(a, b) == Mark::Circle);
        CHECK(r.pag.mark(b, a) == Mark::Circle);
    }
    CHECK(r.colliders.empty());
}

TEST_CASE("learning a collider orients both arrowheads") {
    const Dag dag(3, {{0, 2}, {1, 2}});
    const auto r = learn_pag(DsepOracle(dag));
    CHECK(r.pag.edge_text(0, 2) == "0 o-> 2");
    CHECK(r.pag.edge_text(1, 2) == "1 o-> 2");
    CHECK_FALSE(r.pag.adjacent(0, 1));
    REQUIRE(r.pag.sepset(0, 1) != nullptr);
    CHECK(r.pag.sepset(0, 1)->empty());
    CHECK(r.colliders == std::vector<Collider>{{0, 2, 1}});
}

TEST_CASE("two always-dependent variables share a circle edge") {
    struct Dependent final : CiTest {
        int num_variables() const override { return 2; }
        CiResult test(int, int, std::span<const int>) const override { return {false, 0.0, 0.9, 10.0}; }
    };
    const auto r = learn_pag(Dependent{});
    CHECK(r.pag.edges().size() == 1);
    CHECK(r.pag.edge_text(0, 1) == "0 o-o 1");
}

TEST_CASE("orientation rules propagate past a collider") {
    // 0 -> 2 <- 1, 2 -> 3: rule 1 orients 2 -> 3.
    const Dag dag(4, {{0, 2}, {1, 2}, {2, 3}});
    const auto r = learn_pag(DsepOracle(dag));
    CHECK(r.pag.edge_text(2, 3) == "2 --> 3");
    CHECK(compare(dag, r).marks_sound);
}

TEST_CASE("oracle failures are wrapped") {
    struct Broken final : CiTest {
        int num_variables() const override { return 3; }
        CiResult test(int, int, std::span<const int>) const override { throw std::runtime_error("boom"); }
    };
    CHECK(code_of([] { learn_pag(Broken{}); }) == ErrorCode::OracleFailure);
}

TEST_CASE("random DAGs are recovered soundly") {
    std::mt19937_64 rng(20240611);
    for (int trial = 0; trial < 60; ++trial) {
        const auto dag = random_dag(rng, 5, 0.4);
        const auto r = learn_pag(DsepOracle(dag));
        const auto cmp = compare(dag, r);
        CHECK(cmp.skeleton);
        CHECK(cmp.colliders);
        CHECK(cmp.collider_phase);
        CHECK(cmp.marks_sound);
    }
}

TEST_CASE("influence tree") {
    SUBCASE("arrows into the root admit both parents") {
        Pag p(3);
        p.add_edge(0, 2, Mark::Circle, Mark::Arrow);
        p.add_edge(1, 2, Mark::Circle, Mark::Arrow);
        const auto tree = influence_tree(p, nodes_of({10, 11, 12}, 12), 12);
        REQUIRE(tree.nodes.size() == 3);
        CHECK(tree.depth_of(10) == 1);
        CHECK(tree.depth_of(11) == 1);
        CHECK(tree.max_depth() == 1);
    }
    SUBCASE("edge out of the root is skipped") {
        Pag p(2);
        p.add_edge(0, 1, Mark::Tail, Mark::Arrow);
        const auto tree = influence_tree(p, nodes_of({3, 4}, 3), 3);
        CHECK(tree.nodes.size() == 1);
        CHECK_FALSE(tree.depth_of(4).has_value());
    }
    SUBCASE("isolated root") {
        const auto tree = influence_tree(Pag(3), nodes_of({0, 1, 2}, 1), 1);
        REQUIRE(tree.nodes.size() == 1);
        CHECK(tree.nodes[0].token == 1);
        CHECK(tree.nodes[0].depth == 0);
        CHECK_FALSE(tree.nodes[0].parent.has_value());
    }
    SUBCASE("lowest-index parent wins") {
        Pag p(4);
        p.add_edge(0, 1);
        p.add_edge(0, 2);
        p.add_edge(1, 3);
        p.add_edge(2, 3);
        const auto tree = influence_tree(p, nodes_of({0, 1, 2, 3}, 0), 0);
        REQUIRE(tree.nodes.size() == 4);
        CHECK(tree.nodes[3].token == 3);
        CHECK(tree.nodes[3].depth == 2);
        CHECK(tree.nodes[3].parent == 1);
        for (const auto& n : tree.nodes)
            if (n.parent) CHECK(tree.depth_of(*n.parent) == n.depth - 1);
    }
    SUBCASE("unknown root") {
        CHECK(code_of([] { influence_tree(Pag(2), nodes_of({0, 1}, 0), 5); }) == ErrorCode::RootNotFound);
    }
}

TEST_CASE("top-k node selection") {
    const auto& t = seed7();
    const int g = 21, q = 20;
    SUBCASE("image only, k capped at the patch count") {
        const auto n = select_top_k_nodes(t, g, 50, 1, ModalityFilter::ImageOnly);
        CHECK(n.tokens.size() == 17);
        CHECK(n.root == q);
        CHECK(n.layer == 1);
        CHECK(n.position_of(q) == 16);
        CHECK(std::is_sorted(n.tokens.begin(), n.tokens.end()));
    }
    SUBCASE("k keeps the highest entries") {
        const auto n = select_top_k_nodes(t, g, 3, 0, ModalityFilter::ImageAndText);
        CHECK(n.tokens.size() == 4);
        float lowest_kept = 1.0f;
        for (int tok : n.tokens)
            if (tok != q) lowest_kept = std::min(lowest_kept, t.attention(1, 0, q, tok));
        for (int j = 0; j <= 18; ++j)
            if (n.position_of(j) < 0) CHECK(t.attention(1, 0, q, j) <= lowest_kept);
    }
    SUBCASE("ties go to the lower index") {
        auto edited = t;
        for (int j = 0; j < 16; ++j) edited.attention(1, 0, q, j) = 0.01f;
        edited.attention(1, 0, q, 5) = 0.2f;
        edited.attention(1, 0, q, 9) = 0.2f;
        const auto n = select_top_k_nodes(edited, g, 1, 0, ModalityFilter::ImageOnly);
        CHECK(n.tokens == std::vector<int>{5, q});
    }
    SUBCASE("errors") {
        CHECK(code_of([&] { select_top_k_nodes(t, g, 0, 0, ModalityFilter::ImageOnly); }) == ErrorCode::BadParams);
        CHECK(code_of([&] { select_top_k_nodes(t, g, 5, 2, ModalityFilter::ImageOnly); }) ==
              ErrorCode::IndexOutOfRange);
        CHECK(code_of([&] { select_top_k_nodes(t, 17, 5, 0, ModalityFilter::ImageOnly); }) ==
              ErrorCode::NotAGeneratedToken);
    }
}

TEST_CASE("node correlation") {
    const auto& t = seed7();
    const auto nodes = select_top_k_nodes(t, 21, 50, 0, ModalityFilter::ImageOnly);
    const auto c = node_correlation(t, nodes);
    double worst = 0.0;
    for (std::size_t a = 0; a < nodes.tokens.size(); ++a) {
        CHECK(c(a, a) == 1.0);
        for (std::size_t b = 0; b < nodes.tokens.size(); ++b) {
            double ab = 0, aa = 0, bb = 0;
            for (int k = 0; k < t.seq_len; ++k) {
                const double x = t.attention(1, 0, nodes.tokens[a], k), y = t.attention(1, 0, nodes.tokens[b], k);
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            if (a != b) worst = std::max(worst, std::abs(c(a, b) - ab / std::sqrt(aa * bb)));
        }
    }
    CHECK(worst <= 1e-12);

    SUBCASE("identical and one-hot rows") {
        auto edited = t;
        for (int k = 0; k < t.seq_len; ++k) {
            edited.attention(1, 0, 0, k) = k == 0 ? 1.0f : 0.0f;
            edited.attention(1, 0, 1, k) = k == 1 ? 1.0f : 0.0f;
            edited.attention(1, 0, 2, k) = k == 1 ? 1.0f : 0.0f;
        }
        auto picked = nodes_of({0, 1, 2}, 2);
        picked.layer = 1;
        const auto m = node_correlation(edited, picked);
        CHECK(m(0, 1) == 0.0);
        CHECK(m(1, 2) == 1.0);
    }
}

TEST_CASE("explanation sets nest and saturate") {
    const auto& t = seed7();
    for (int g : t.generated_indices)
        for (int head : {0, 1}) {
            CausalParams p;
            p.head = head;
            p.filter = ModalityFilter::ImageAndText;
            const auto r = explain_token(t, g, p);
            const int depth = r.tree.max_depth();
            CHECK(r.explanations.at(0).tokens.empty());
            for (int radius = 0; radius < depth + 2; ++radius) {
                const auto a = explanation_at_radius(r.tree, radius, t, p.filter);
                const auto b = explanation_at_radius(r.tree, radius + 1, t, p.filter);
                for (int tok : a.tokens) CHECK(std::find(b.tokens.begin(), b.tokens.end(), tok) != b.tokens.end());
                if (radius >= depth) CHECK(b.tokens == a.tokens);
                if (radius <= std::max(p.radius, depth)) CHECK(r.explanations.at(radius) == a);
                for (int tok : a.tokens) CHECK(tok != r.nodes.root);
            }
            const auto again = explain_token(t, g, p);
            CHECK(again.learned.pag == r.learned.pag);
            CHECK(again.explanations == r.explanations);
        }
}

TEST_CASE("explanations honour the modality filter") {
    Pag p(3);
    p.add_edge(0, 2);
    p.add_edge(1, 2);
    const auto& t = seed7();
    const auto tree = influence_tree(p, nodes_of({3, 17, 20}, 20), 20);
    CHECK(explanation_at_radius(tree, 1, t, ModalityFilter::ImageOnly).tokens == std::vector<int>{3});
    CHECK(explanation_at_radius(tree, 1, t, ModalityFilter::ImageAndText).tokens == std::vector<int>{3, 17});
    CHECK(code_of([&] { explanation_at_radius(tree, -1, t, ModalityFilter::ImageOnly); }) == ErrorCode::BadParams);
}

TEST_CASE("minimal explanation search") {
    Pag p(4);
    p.add_edge(0, 3);
    p.add_edge(1, 0);
    p.add_edge(2, 1);
    const auto& t = seed7();
    const auto tree = influence_tree(p, nodes_of({2, 5, 7, 20}, 20), 20);
    const auto yes = minimal_explanation(tree, [](auto) { return true; }, 4, t, ModalityFilter::ImageOnly);
    REQUIRE(yes.has_value());
    CHECK(yes->radius == 1);
    CHECK(yes->tokens == std::vector<int>{2});
    CHECK_FALSE(minimal_explanation(tree, [](auto) { return false; }, 4, t, ModalityFilter::ImageOnly).has_value());
    const auto two = minimal_explanation(tree, [](std::span<const int> s) { return s.size() >= 2; }, 4, t,
                                         ModalityFilter::ImageOnly);
    REQUIRE(two.has_value());
    CHECK(two->radius == 2);
    CHECK(code_of([&] {
              minimal_explanation(tree, [](auto) -> bool { throw std::runtime_error("x"); }, 2, t,
                                  ModalityFilter::ImageOnly);
          }) == ErrorCode::VerifierFailure);
}

TEST_CASE("copy-head scenario: the forcing patch explains the token") {
    const auto s = copy_head_scenario();
    const auto t = toy::toy_pipeline(s.model, s.prompt, s.image, 2);
    REQUIRE(t.tokens[s.first_generated].text == "tok" + std::to_string(s.target));
    const auto r = explain_token(t, s.first_generated);
    const auto verifier = make_masking_verifier(s.model, s.image, s.prompt, s.first_generated);
    const auto e = minimal_explanation(r.tree, verifier, 3, t, ModalityFilter::ImageOnly);
    REQUIRE(e.has_value());
    CHECK(e->radius <= 3);
    CHECK(std::find(e->tokens.begin(), e->tokens.end(), s.forcing_token) != e->tokens.end());
    CHECK(verifier(e->tokens));
    // Masking an unrelated patch does not flip the token.
    const std::vector<int> other{0};
    CHECK_FALSE(verifier(other));
}

TEST_CASE("explain_token parameter checks") {
    const auto& t = seed7();
    CausalParams p;
    p.k = 0;
    CHECK(code_of([&] { explain_token(t, 20, p); }) == ErrorCode::BadParams);
    p = {};
    p.alpha = 0.0;
    CHECK(code_of([&] { explain_token(t, 20, p); }) == ErrorCode::BadParams);
    p = {};
    p.radius = -1;
    CHECK(code_of([&] { explain_token(t, 20, p); }) == ErrorCode::BadParams);
}

TEST_CASE("filter and axis names round trip") {
    for (auto f : {ModalityFilter::ImageOnly, ModalityFilter::ImageAndText}) CHECK(parse_filter(filter_name(f)) == f);
    for (auto a : {FeatureAxis::Rows, FeatureAxis::Columns}) CHECK(parse_feature_axis(feature_axis_name(a)) == a);
    CHECK_FALSE(parse_filter("text").has_value());
}

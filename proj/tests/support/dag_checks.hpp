#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "lvlmlens/causal/dsep.hpp"
#include "lvlmlens/causal/pag.hpp"

namespace lvlmlens::testing {

inline causal::Dag random_dag(std::mt19937_64& rng, int max_nodes, double edge_prob) {
    std::uniform_int_distribution<int> size(2, max_nodes);
    std::bernoulli_distribution coin(edge_prob);
    const int n = size(rng);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::pair<int, int>> edges;
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b)
            if (coin(rng)) edges.emplace_back(order[a], order[b]);
    return causal::Dag(n, std::move(edges));
}

struct DagComparison {
    bool skeleton = true;          // adjacencies equal
    bool colliders = true;         // every unshielded collider carries both arrowheads
    bool collider_phase = true;    // the collider phase oriented only true colliders
    bool marks_sound = true;       // every arrowhead / tail agrees with ancestry
};

inline bool is_collider(const causal::Dag& dag, int a, int m, int b) {
    return dag.has_edge(a, m) && dag.has_edge(b, m);
}

inline DagComparison compare(const causal::Dag& dag, const causal::LearnResult& learned) {
    DagComparison out;
    const auto& pag = learned.pag;
    const int n = dag.size();
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b)
            if (pag.adjacent(a, b) != dag.adjacent(a, b)) out.skeleton = false;

    for (int m = 0; m < n; ++m)
        for (int a = 0; a < n; ++a)
            for (int b = a + 1; b < n; ++b) {
                if (a == m || b == m || dag.adjacent(a, b)) continue;
                if (!is_collider(dag, a, m, b)) continue;
                if (pag.mark(a, m) != causal::Mark::Arrow || pag.mark(b, m) != causal::Mark::Arrow) out.colliders = false;
            }

    for (const auto* list : {&learned.initial_colliders, &learned.colliders})
        for (const auto& c : *list)
            if (dag.adjacent(c.a, c.b) || !is_collider(dag, c.a, c.mid, c.b)) out.collider_phase = false;

    for (auto [a, b] : pag.edges())
        for (auto [from, to] : {std::pair{a, b}, std::pair{b, a}}) {
            const auto m = pag.mark(from, to);
            const bool to_is_ancestor = dag.descendants_or_self(to)[from];
            if (m == causal::Mark::Arrow && to_is_ancestor) out.marks_sound = false;
            if (m == causal::Mark::Tail && !to_is_ancestor) out.marks_sound = false;
        }
    return out;
}

}  // namespace lvlmlens::testing

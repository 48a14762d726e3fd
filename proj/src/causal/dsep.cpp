#include "lvlmlens/causal/dsep.hpp"

#include <algorithm>
#include <functional>
#include <string>

#include "lvlmlens/error.hpp"

namespace lvlmlens::causal {

Dag::Dag(int n, std::vector<std::pair<int, int>> edges)
    : n_(n), edges_(std::move(edges)), children_(static_cast<std::size_t>(n)) {
    for (auto [a, b] : edges_) {
        if (a < 0 || b < 0 || a >= n || b >= n) throw Error(ErrorCode::IndexOutOfRange, "edge endpoint outside graph");
        if (a == b) throw Error(ErrorCode::CyclicGraph, "self loop at " + std::to_string(a));
        children_[a].push_back(b);
    }
    // Kahn's algorithm.
    std::vector<int> indegree(static_cast<std::size_t>(n), 0);
    for (auto [a, b] : edges_) ++indegree[b];
    std::vector<int> ready;
    for (int v = 0; v < n; ++v)
        if (indegree[v] == 0) ready.push_back(v);
    int visited = 0;
    while (!ready.empty()) {
        const int v = ready.back();
        ready.pop_back();
        ++visited;
        for (int c : children_[v])
            if (--indegree[c] == 0) ready.push_back(c);
    }
    if (visited != n) throw Error(ErrorCode::CyclicGraph, "graph contains a directed cycle");
}

bool Dag::has_edge(int from, int to) const {
    const auto& c = children_[from];
    return std::find(c.begin(), c.end(), to) != c.end();
}

std::vector<bool> Dag::descendants_or_self(int v) const {
    std::vector<bool> seen(static_cast<std::size_t>(n_), false);
    std::vector<int> stack{v};
    seen[v] = true;
    while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        for (int c : children_[u])
            if (!seen[c]) {
                seen[c] = true;
                stack.push_back(c);
            }
    }
    return seen;
}

bool d_separated(const Dag& dag, int i, int j, std::span<const int> cond) {
    const int n = dag.size();
    if (i < 0 || j < 0 || i >= n || j >= n) throw Error(ErrorCode::IndexOutOfRange, "node outside graph");
    if (i == j) throw Error(ErrorCode::NotDisjoint, "i and j must differ");
    std::vector<bool> in_cond(static_cast<std::size_t>(n), false);
    for (int z : cond) {
        if (z == i || z == j) throw Error(ErrorCode::NotDisjoint, "conditioning set contains an endpoint");
        in_cond[z] = true;
    }
    // A collider is open iff it or one of its descendants is conditioned on.
    std::vector<bool> collider_open(static_cast<std::size_t>(n), false);
    for (int v = 0; v < n; ++v) {
        const auto desc = dag.descendants_or_self(v);
        for (int u = 0; u < n; ++u)
            if (desc[u] && in_cond[u]) collider_open[v] = true;
    }

    std::vector<int> path{i};
    std::vector<bool> on_path(static_cast<std::size_t>(n), false);
    on_path[i] = true;

    auto path_active = [&]() {
        for (std::size_t k = 1; k + 1 < path.size(); ++k) {
            const int u = path[k - 1], v = path[k], w = path[k + 1];
            const bool collider = dag.has_edge(u, v) && dag.has_edge(w, v);
            if (collider ? !collider_open[v] : in_cond[v]) return false;
        }
        return true;
    };

    std::function<bool(int)> any_active = [&](int v) -> bool {
        if (v == j) return path_active();
        for (int w = 0; w < n; ++w) {
            if (on_path[w] || !dag.adjacent(v, w)) continue;
            on_path[w] = true;
            path.push_back(w);
            const bool found = any_active(w);
            path.pop_back();
            on_path[w] = false;
            if (found) return true;
        }
        return false;
    };
    return !any_active(i);
}

CiResult DsepOracle::test(int i, int j, std::span<const int> cond) const {
    CiResult r;
    r.independent = d_separated(dag_, i, j, cond);
    r.p_value = r.independent ? 1.0 : 0.0;
    return r;
}

}  // namespace lvlmlens::causal

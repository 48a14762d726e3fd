#pragma once

#include <span>
#include <utility>
#include <vector>

#include "lvlmlens/causal/ci_test.hpp"

namespace lvlmlens::causal {

/// Directed acyclic graph over 0..n-1. Construction throws CyclicGraph.
class Dag {
public:
    Dag(int n, std::vector<std::pair<int, int>> edges);

    int size() const noexcept { return n_; }
    bool has_edge(int from, int to) const;
    bool adjacent(int a, int b) const { return has_edge(a, b) || has_edge(b, a); }
    const std::vector<int>& children(int v) const { return children_[v]; }
    const std::vector<std::pair<int, int>>& edges() const noexcept { return edges_; }
    /// v and everything reachable from it.
    std::vector<bool> descendants_or_self(int v) const;

private:
    int n_;
    std::vector<std::pair<int, int>> edges_;
    std::vector<std::vector<int>> children_;
};

/// Brute-force d-separation: enumerates every simple path between i and j.
bool d_separated(const Dag& dag, int i, int j, std::span<const int> cond);

/// Adapter exposing d-separation as a perfect independence oracle.
class DsepOracle final : public CiTest {
public:
    explicit DsepOracle(const Dag& dag) : dag_(dag) {}
    int num_variables() const override { return dag_.size(); }
    CiResult test(int i, int j, std::span<const int> cond) const override;

private:
    const Dag& dag_;
};

}  // namespace lvlmlens::causal

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lvlmlens/causal/ci_test.hpp"

namespace lvlmlens::causal {

enum class Mark { None, Circle, Arrow, Tail };

char mark_glyph_left(Mark m) noexcept;   // '<', '-', 'o'
char mark_glyph_right(Mark m) noexcept;  // '>', '-', 'o'
std::string mark_name(Mark m);

/// An unshielded triple a - mid - b oriented as a collider.
struct Collider {
    int a = 0;
    int mid = 0;
    int b = 0;
    bool operator==(const Collider&) const = default;
    auto operator<=>(const Collider&) const = default;
};

/// Mixed graph over variables 0..n-1 with a mark at each end of every edge.
class Pag {
public:
    explicit Pag(int n = 0);

    int size() const noexcept { return n_; }
    bool adjacent(int a, int b) const { return mark(a, b) != Mark::None; }
    /// Mark at `b` on the edge a - b.
    Mark mark(int a, int b) const { return marks_[index(a, b)]; }
    void set_mark(int a, int b, Mark m) { marks_[index(a, b)] = m; }

    void add_edge(int a, int b, Mark at_a = Mark::Circle, Mark at_b = Mark::Circle);
    void remove_edge(int a, int b);
    std::vector<int> neighbors(int a) const;
    /// Edges as (a, b) with a < b.
    std::vector<std::pair<int, int>> edges() const;

    /// Sepset of a removed pair, keyed by (min, max).
    const std::map<std::pair<int, int>, std::vector<int>>& sepsets() const noexcept { return sepsets_; }
    const std::vector<int>* sepset(int a, int b) const;
    void set_sepset(int a, int b, std::vector<int> set);

    /// `a <markL>-<markR> b`.
    std::string edge_text(int a, int b) const;

    bool operator==(const Pag&) const = default;

private:
    std::size_t index(int a, int b) const { return static_cast<std::size_t>(a) * n_ + b; }

    int n_ = 0;
    std::vector<Mark> marks_;
    std::map<std::pair<int, int>, std::vector<int>> sepsets_;
};

struct LearnOptions {
    int max_cond_size = 3;
    bool possible_dsep = true;
    bool orientation_rules = true;
};

struct LearnResult {
    Pag pag;
    std::vector<Collider> initial_colliders;  // collider phase before possible-d-sep pruning
    std::vector<Collider> colliders;          // collider phase after pruning
    std::size_t ci_tests = 0;
};

/// Skeleton search, collider orientation, possible-d-sep pruning with re-orientation, rules R1-R4.
LearnResult learn_pag(const CiTest& ci, const LearnOptions& options = {});

/// Possible-D-SEP(x) in the current graph.
std::vector<int> possible_dsep(const Pag& pag, int x);

}  // namespace lvlmlens::causal

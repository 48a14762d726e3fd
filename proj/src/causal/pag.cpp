#include "lvlmlens/causal/pag.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <set>

#include "lvlmlens/error.hpp"

namespace lvlmlens::causal {

char mark_glyph_left(Mark m) noexcept {
    switch (m) {
        case Mark::Arrow: return '<';
        case Mark::Tail: return '-';
        case Mark::Circle: return 'o';
        case Mark::None: break;
    }
    return ' ';
}

char mark_glyph_right(Mark m) noexcept {
    switch (m) {
        case Mark::Arrow: return '>';
        case Mark::Tail: return '-';
        case Mark::Circle: return 'o';
        case Mark::None: break;
    }
    return ' ';
}

std::string mark_name(Mark m) {
    switch (m) {
        case Mark::Arrow: return "arrow";
        case Mark::Tail: return "tail";
        case Mark::Circle: return "circle";
        case Mark::None: break;
    }
    return "none";
}

Pag::Pag(int n) : n_(n), marks_(static_cast<std::size_t>(n) * n, Mark::None) {}

void Pag::add_edge(int a, int b, Mark at_a, Mark at_b) {
    if (a == b) throw Error(ErrorCode::IndexOutOfRange, "self edge");
    set_mark(b, a, at_a);
    set_mark(a, b, at_b);
}

void Pag::remove_edge(int a, int b) {
    set_mark(a, b, Mark::None);
    set_mark(b, a, Mark::None);
}

std::vector<int> Pag::neighbors(int a) const {
    std::vector<int> out;
    for (int b = 0; b < n_; ++b)
        if (b != a && adjacent(a, b)) out.push_back(b);
    return out;
}

std::vector<std::pair<int, int>> Pag::edges() const {
    std::vector<std::pair<int, int>> out;
    for (int a = 0; a < n_; ++a)
        for (int b = a + 1; b < n_; ++b)
            if (adjacent(a, b)) out.emplace_back(a, b);
    return out;
}

const std::vector<int>* Pag::sepset(int a, int b) const {
    auto it = sepsets_.find({std::min(a, b), std::max(a, b)});
    return it == sepsets_.end() ? nullptr : &it->second;
}

void Pag::set_sepset(int a, int b, std::vector<int> set) {
    std::sort(set.begin(), set.end());
    sepsets_[{std::min(a, b), std::max(a, b)}] = std::move(set);
}

std::string Pag::edge_text(int a, int b) const {
    std::string s = std::to_string(a) + " ";
    s += mark_glyph_left(mark(b, a));
    s += '-';
    s += mark_glyph_right(mark(a, b));
    s += " " + std::to_string(b);
    return s;
}

namespace {

// Calls fn on every size-k subset of items in lexicographic order until fn returns true.
bool for_each_subset(const std::vector<int>& items, std::size_t k, const std::function<bool(const std::vector<int>&)>& fn) {
    if (k > items.size()) return false;
    std::vector<std::size_t> pos(k);
    for (std::size_t n = 0; n < k; ++n) pos[n] = n;
    std::vector<int> subset(k);
    while (true) {
        for (std::size_t n = 0; n < k; ++n) subset[n] = items[pos[n]];
        if (fn(subset)) return true;
        std::size_t n = k;
        while (n > 0 && pos[n - 1] == items.size() - k + n - 1) --n;
        if (n == 0) return false;
        ++pos[n - 1];
        for (std::size_t m = n; m < k; ++m) pos[m] = pos[m - 1] + 1;
    }
}

// Memoizes oracle answers; the key is (min, max, sorted conditioning set).
class CachedOracle {
public:
    explicit CachedOracle(const CiTest& ci) : ci_(ci) {}

    bool independent(int a, int b, const std::vector<int>& cond) {
        std::vector<int> key{std::min(a, b), std::max(a, b)};
        std::vector<int> z = cond;
        std::sort(z.begin(), z.end());
        key.insert(key.end(), z.begin(), z.end());
        if (auto it = cache_.find(key); it != cache_.end()) return it->second;
        bool result = false;
        try {
            result = ci_.test(key[0], key[1], z).independent;
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            throw Error(ErrorCode::OracleFailure, e.what());
        }
        ++calls_;
        cache_.emplace(std::move(key), result);
        return result;
    }

    std::size_t calls() const noexcept { return calls_; }

private:
    const CiTest& ci_;
    std::map<std::vector<int>, bool> cache_;
    std::size_t calls_ = 0;
};

std::vector<int> without(const std::vector<int>& v, std::initializer_list<int> drop) {
    std::vector<int> out;
    for (int x : v)
        if (std::find(drop.begin(), drop.end(), x) == drop.end()) out.push_back(x);
    return out;
}

void adjacency_search(Pag& g, CachedOracle& oracle, int max_cond) {
    const int n = g.size();
    for (int d = 0; d <= max_cond; ++d) {
        std::vector<std::vector<int>> snapshot(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) snapshot[i] = g.neighbors(i);
        bool any_testable = false;
        for (int i = 0; i < n; ++i)
            for (int j : snapshot[i]) {
                if (!g.adjacent(i, j)) continue;
                const auto candidates = without(snapshot[i], {j});
                if (candidates.size() < static_cast<std::size_t>(d)) continue;
                any_testable = true;
                for_each_subset(candidates, static_cast<std::size_t>(d), [&](const std::vector<int>& z) {
                    if (!oracle.independent(i, j, z)) return false;
                    g.remove_edge(i, j);
                    g.set_sepset(i, j, z);
                    return true;
                });
            }
        if (!any_testable) break;
    }
}

std::vector<Collider> orient_colliders(Pag& g) {
    const int n = g.size();
    for (auto [a, b] : g.edges()) {
        g.set_mark(a, b, Mark::Circle);
        g.set_mark(b, a, Mark::Circle);
    }
    std::vector<Collider> found;
    for (int mid = 0; mid < n; ++mid) {
        const auto nb = g.neighbors(mid);
        for (std::size_t x = 0; x < nb.size(); ++x)
            for (std::size_t y = x + 1; y < nb.size(); ++y) {
                const int a = nb[x], b = nb[y];
                if (g.adjacent(a, b)) continue;
                const auto* sep = g.sepset(a, b);
                if (sep == nullptr || std::find(sep->begin(), sep->end(), mid) != sep->end()) continue;
                g.set_mark(a, mid, Mark::Arrow);
                g.set_mark(b, mid, Mark::Arrow);
                found.push_back({a, mid, b});
            }
    }
    return found;
}

void possible_dsep_pruning(Pag& g, CachedOracle& oracle, int max_cond) {
    const int n = g.size();
    std::vector<std::vector<int>> pds(static_cast<std::size_t>(n));
    for (int x = 0; x < n; ++x) pds[x] = possible_dsep(g, x);
    for (int x = 0; x < n; ++x)
        for (int y : g.neighbors(x)) {
            if (!g.adjacent(x, y)) continue;
            const auto candidates = without(pds[x], {x, y});
            const auto limit = std::min<std::size_t>(static_cast<std::size_t>(max_cond), candidates.size());
            for (std::size_t d = 0; d <= limit; ++d) {
                const bool removed = for_each_subset(candidates, d, [&](const std::vector<int>& z) {
                    if (!oracle.independent(x, y, z)) return false;
                    g.remove_edge(x, y);
                    g.set_sepset(x, y, z);
                    return true;
                });
                if (removed) break;
            }
        }
}

bool is_parent(const Pag& g, int a, int b) {  // a -> b
    return g.adjacent(a, b) && g.mark(a, b) == Mark::Arrow && g.mark(b, a) == Mark::Tail;
}

// R1: a *-> b o-* c, a and c nonadjacent  =>  b -> c
bool rule1(Pag& g) {
    bool changed = false;
    const int n = g.size();
    for (int b = 0; b < n; ++b)
        for (int a : g.neighbors(b)) {
            if (g.mark(a, b) != Mark::Arrow) continue;
            for (int c : g.neighbors(b)) {
                if (c == a || g.adjacent(a, c) || g.mark(c, b) != Mark::Circle) continue;
                g.set_mark(c, b, Mark::Tail);
                g.set_mark(b, c, Mark::Arrow);
                changed = true;
            }
        }
    return changed;
}

// R2: (a -> b *-> c or a *-> b -> c) and a *-o c  =>  a *-> c
bool rule2(Pag& g) {
    bool changed = false;
    const int n = g.size();
    for (int a = 0; a < n; ++a)
        for (int c : g.neighbors(a)) {
            if (g.mark(a, c) != Mark::Circle) continue;
            for (int b : g.neighbors(a)) {
                if (b == c || !g.adjacent(b, c)) continue;
                const bool first = is_parent(g, a, b) && g.mark(b, c) == Mark::Arrow;
                const bool second = g.mark(a, b) == Mark::Arrow && is_parent(g, b, c);
                if (first || second) {
                    g.set_mark(a, c, Mark::Arrow);
                    changed = true;
                    break;
                }
            }
        }
    return changed;
}

// R3: a *-> b <-* c, a *-o t o-* c, a and c nonadjacent, t *-o b  =>  t *-> b
bool rule3(Pag& g) {
    bool changed = false;
    const int n = g.size();
    for (int b = 0; b < n; ++b)
        for (int t : g.neighbors(b)) {
            if (g.mark(t, b) != Mark::Circle) continue;
            const auto nb = g.neighbors(b);
            bool oriented = false;
            for (std::size_t x = 0; x < nb.size() && !oriented; ++x)
                for (std::size_t y = x + 1; y < nb.size() && !oriented; ++y) {
                    const int a = nb[x], c = nb[y];
                    if (a == t || c == t || g.adjacent(a, c)) continue;
                    if (g.mark(a, b) != Mark::Arrow || g.mark(c, b) != Mark::Arrow) continue;
                    if (!g.adjacent(a, t) || !g.adjacent(c, t)) continue;
                    if (g.mark(a, t) != Mark::Circle || g.mark(c, t) != Mark::Circle) continue;
                    g.set_mark(t, b, Mark::Arrow);
                    oriented = changed = true;
                }
        }
    return changed;
}

// R4: discriminating path <theta, ..., a, b, c> for b with b o-* c.
bool rule4(Pag& g) {
    const int n = g.size();
    for (int c = 0; c < n; ++c)
        for (int b : g.neighbors(c)) {
            if (g.mark(c, b) != Mark::Circle) continue;
            for (int a : g.neighbors(b)) {
                if (a == c || !is_parent(g, a, c) || g.mark(b, a) != Mark::Arrow) continue;
                // Breadth-first search backwards from a over colliders that are parents of c.
                std::vector<int> pred(static_cast<std::size_t>(n), -1);
                std::vector<bool> seen(static_cast<std::size_t>(n), false);
                seen[a] = seen[b] = seen[c] = true;
                std::deque<int> frontier{a};
                int theta = -1;
                while (!frontier.empty() && theta < 0) {
                    const int cur = frontier.front();
                    frontier.pop_front();
                    for (int t : g.neighbors(cur)) {
                        if (seen[t] || g.mark(t, cur) != Mark::Arrow) continue;
                        if (!g.adjacent(t, c)) {
                            theta = t;
                            pred[t] = cur;
                            break;
                        }
                        if (is_parent(g, t, c) && g.mark(cur, t) == Mark::Arrow) {
                            seen[t] = true;
                            pred[t] = cur;
                            frontier.push_back(t);
                        }
                    }
                }
                if (theta < 0) continue;
                const auto* sep = g.sepset(theta, c);
                const bool b_in_sep = sep != nullptr && std::find(sep->begin(), sep->end(), b) != sep->end();
                if (b_in_sep) {
                    g.set_mark(c, b, Mark::Tail);
                    g.set_mark(b, c, Mark::Arrow);
                } else {
                    g.set_mark(a, b, Mark::Arrow);
                    g.set_mark(b, a, Mark::Arrow);
                    g.set_mark(b, c, Mark::Arrow);
                    g.set_mark(c, b, Mark::Arrow);
                }
                return true;
            }
        }
    return false;
}

}  // namespace

std::vector<int> possible_dsep(const Pag& g, int x) {
    const int n = g.size();
    std::set<std::pair<int, int>> visited;
    std::deque<std::pair<int, int>> queue;
    std::vector<bool> in(static_cast<std::size_t>(n), false);
    for (int nb : g.neighbors(x)) {
        queue.emplace_back(x, nb);
        visited.emplace(x, nb);
        in[nb] = true;
    }
    while (!queue.empty()) {
        const auto [u, v] = queue.front();
        queue.pop_front();
        for (int w : g.neighbors(v)) {
            if (w == u || w == x) continue;
            const bool collider = g.mark(u, v) == Mark::Arrow && g.mark(w, v) == Mark::Arrow;
            if (!collider && !g.adjacent(u, w)) continue;
            if (!visited.emplace(v, w).second) continue;
            in[w] = true;
            queue.emplace_back(v, w);
        }
    }
    std::vector<int> out;
    for (int v = 0; v < n; ++v)
        if (in[v] && v != x) out.push_back(v);
    return out;
}

LearnResult learn_pag(const CiTest& ci, const LearnOptions& options) {
    if (options.max_cond_size < 0) throw Error(ErrorCode::BadParams, "max_cond_size must be >= 0");
    const int n = ci.num_variables();
    CachedOracle oracle(ci);
    LearnResult result{Pag(n), {}, {}, 0};
    Pag& g = result.pag;
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) g.add_edge(a, b);

    adjacency_search(g, oracle, options.max_cond_size);
    result.initial_colliders = orient_colliders(g);
    if (options.possible_dsep) {
        possible_dsep_pruning(g, oracle, options.max_cond_size);
        result.colliders = orient_colliders(g);
    } else {
        result.colliders = result.initial_colliders;
    }
    if (options.orientation_rules) {
        bool changed = true;
        while (changed) {
            changed = false;
            changed |= rule1(g);
            changed |= rule2(g);
            changed |= rule3(g);
            changed |= rule4(g);
        }
    }
    result.ci_tests = oracle.calls();
    return result;
}

}  // namespace lvlmlens::causal

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "sre/error.hpp"

namespace sre {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Values, per-variable noise levels and conditioning mask for a set of n
/// variables of equal dimension. Level 0 is clean data and level 1 is pure
/// noise. Conditioned variables are clamped observations and are always clean.
///
/// Instances are only produced by make_state() and are immutable afterwards.
class ReasoningState {
public:
    ReasoningState() = default;

    std::size_t n() const { return static_cast<std::size_t>(values_.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(values_.cols()); }

    const Matrix& values() const { return values_; }
    const Vector& levels() const { return levels_; }
    const std::vector<bool>& conditioned() const { return conditioned_; }

    double level(std::size_t i) const { return levels_(static_cast<Eigen::Index>(i)); }
    bool is_conditioned(std::size_t i) const { return conditioned_[i]; }

    /// Number of variables that are not conditioned.
    std::size_t active_count() const {
        return static_cast<std::size_t>(std::count(conditioned_.begin(), conditioned_.end(), false));
    }

private:
    friend ReasoningState make_state(Matrix values, Vector levels, std::vector<bool> conditioned);

    Matrix values_;
    Vector levels_;
    std::vector<bool> conditioned_;
};

/// Validating constructor for ReasoningState.
inline ReasoningState make_state(Matrix values, Vector levels, std::vector<bool> conditioned) {
    const auto n = values.rows();
    if (levels.size() != n || static_cast<Eigen::Index>(conditioned.size()) != n) {
        throw Error("dimension mismatch: values has " + std::to_string(n) + " rows, levels " +
                    std::to_string(levels.size()) + ", conditioned " + std::to_string(conditioned.size()));
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const double t = levels(i);
        if (!(t >= 0.0 && t <= 1.0)) {
            throw Error("level out of range: variable " + std::to_string(i) + " has level " + std::to_string(t));
        }
        if (conditioned[static_cast<std::size_t>(i)] && t != 0.0) {
            throw Error("conditioned variable must be clean: variable " + std::to_string(i));
        }
    }
    if (!values.allFinite()) throw Error("non-finite value in state");

    ReasoningState s;
    s.values_ = std::move(values);
    s.levels_ = std::move(levels);
    s.conditioned_ = std::move(conditioned);
    return s;
}

/// Convenience overload: nothing conditioned.
inline ReasoningState make_state(Matrix values, Vector levels) {
    std::vector<bool> cond(static_cast<std::size_t>(values.rows()), false);
    return make_state(std::move(values), std::move(levels), std::move(cond));
}

/// Same state with new values and levels; the conditioning mask is kept.
inline ReasoningState with_values(const ReasoningState& s, Matrix values, Vector levels) {
    return make_state(std::move(values), std::move(levels), s.conditioned());
}

struct DependencyGraph {
    std::size_t n = 0;
    std::vector<std::pair<std::size_t, std::size_t>> edges;  // (parent, child)

    std::vector<std::vector<std::size_t>> parents() const {
        std::vector<std::vector<std::size_t>> p(n);
        for (auto [from, to] : edges) p[to].push_back(from);
        return p;
    }
};

/// Kahn's algorithm with a min-heap, so ties are broken by ascending index and
/// the result is the lexicographically smallest topological order.
inline std::vector<std::size_t> validate_graph(const DependencyGraph& graph) {
    const std::size_t n = graph.n;
    std::vector<std::vector<std::size_t>> children(n);
    std::vector<std::size_t> in_degree(n, 0);
    for (auto [from, to] : graph.edges) {
        if (from >= n || to >= n) {
            throw Error("graph edge (" + std::to_string(from) + "," + std::to_string(to) +
                        ") index out of range for n=" + std::to_string(n));
        }
        if (from == to) throw Error("cycle detected: self-loop on node " + std::to_string(from));
        children[from].push_back(to);
        ++in_degree[to];
    }

    std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
    for (std::size_t v = 0; v < n; ++v)
        if (in_degree[v] == 0) ready.push(v);

    std::vector<std::size_t> order;
    order.reserve(n);
    while (!ready.empty()) {
        const std::size_t v = ready.top();
        ready.pop();
        order.push_back(v);
        for (std::size_t c : children[v])
            if (--in_degree[c] == 0) ready.push(c);
    }
    if (order.size() == n) return order;

    // Every remaining node has a remaining parent. Following the first such
    // parent from any remaining node must revisit a node, which lies on a cycle.
    const auto parents = graph.parents();
    auto first_remaining_parent = [&](std::size_t node) {
        for (std::size_t p : parents[node])
            if (in_degree[p] > 0) return p;
        return node;
    };
    std::size_t v = 0;
    while (in_degree[v] == 0) ++v;
    std::vector<bool> seen(n, false);
    while (!seen[v]) {
        seen[v] = true;
        v = first_remaining_parent(v);
    }
    const std::size_t from = first_remaining_parent(v);
    throw Error("cycle detected: edge (" + std::to_string(from) + "," + std::to_string(v) + ") lies on a cycle");
}

}  // namespace sre

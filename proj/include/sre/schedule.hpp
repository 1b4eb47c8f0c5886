#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sre/core.hpp"
#include "sre/error.hpp"

namespace sre {

/// Target noise levels for every variable and step. Column 0 holds the start
/// levels and column k the levels after step k, so a d-step schedule has
/// d + 1 columns. Adaptive schedules only carry column 0 (partial = true);
/// later columns are decided online.
struct ScheduleMatrix {
    Matrix levels;
    std::vector<bool> conditioned;
    bool partial = false;

    std::size_t n() const { return static_cast<std::size_t>(levels.rows()); }
    std::size_t steps() const { return levels.cols() > 0 ? static_cast<std::size_t>(levels.cols() - 1) : 0; }
    Vector column(std::size_t k) const { return levels.col(static_cast<Eigen::Index>(k)); }
};

enum class ScheduleKind { Parallel, Sequential, NextK, RollingWindow, AdaptiveCertainty };

/// Variable order for sequential-style schedules. An empty explicit order
/// means ascending index.
struct OrderSpec {
    enum class Mode { Explicit, Random, Graph };
    Mode mode = Mode::Explicit;
    std::vector<std::size_t> order;
    std::uint64_t seed = 0;
    std::optional<DependencyGraph> graph;
};

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::Parallel;
    std::size_t d = 1;
    double overlap = 0.0;    // sequential
    OrderSpec order;         // sequential, next-k, rolling-window
    std::size_t k = 1;       // next-k, adaptive-certainty
    std::size_t window = 1;  // rolling-window
    std::size_t stride = 1;  // rolling-window
};

namespace detail {

inline double snap_level(double v) {
    v = std::clamp(v, 0.0, 1.0);
    if (v < 1e-12) return 0.0;
    if (v > 1.0 - 1e-12) return 1.0;
    return v;
}

/// Active variables (not conditioned) in the requested order.
inline std::vector<std::size_t> resolve_order(const OrderSpec& spec, std::size_t n, const std::vector<bool>& conditioned) {
    std::vector<std::size_t> order;
    switch (spec.mode) {
        case OrderSpec::Mode::Explicit:
            if (spec.order.empty()) {
                order.resize(n);
                std::iota(order.begin(), order.end(), 0);
            } else {
                order = spec.order;
                std::vector<bool> seen(n, false);
                if (order.size() != n) throw Error("explicit order must list all " + std::to_string(n) + " variables");
                for (std::size_t v : order) {
                    if (v >= n || seen[v]) throw Error("explicit order is not a permutation");
                    seen[v] = true;
                }
            }
            break;
        case OrderSpec::Mode::Random: {
            order.resize(n);
            std::iota(order.begin(), order.end(), 0);
            std::mt19937_64 rng(spec.seed);
            std::shuffle(order.begin(), order.end(), rng);
            break;
        }
        case OrderSpec::Mode::Graph:
            if (!spec.graph) throw Error("graph order requested without a graph");
            if (spec.graph->n != n) throw Error("graph has " + std::to_string(spec.graph->n) + " nodes, expected " + std::to_string(n));
            order = validate_graph(*spec.graph);
            break;
    }
    std::erase_if(order, [&](std::size_t v) { return conditioned[v]; });
    return order;
}

/// Linear ramp from 1 to 0 over the normalized window [start, start + width],
/// sampled at column times k/d.
inline void fill_ramp(Matrix& levels, std::size_t row, double start, double width) {
    const auto d = static_cast<double>(levels.cols() - 1);
    for (Eigen::Index k = 0; k < levels.cols(); ++k) {
        const double tau = static_cast<double>(k) / d;
        levels(static_cast<Eigen::Index>(row), k) = snap_level(1.0 - (tau - start) / width);
    }
    levels(static_cast<Eigen::Index>(row), levels.cols() - 1) = 0.0;
}

}  // namespace detail

inline ScheduleMatrix build_schedule(const ScheduleSpec& spec, std::size_t n, const std::vector<bool>& conditioned) {
    if (conditioned.size() != n) throw Error("conditioned mask length must equal n");
    if (spec.d < 1) throw Error("schedule requires d >= 1");
    if (!(spec.overlap >= 0.0 && spec.overlap <= 1.0)) throw Error("overlap must lie in [0,1]");

    ScheduleMatrix T;
    T.conditioned = conditioned;
    const auto rows = static_cast<Eigen::Index>(n);
    const auto cols = static_cast<Eigen::Index>(spec.d + 1);
    T.levels = Matrix::Zero(rows, cols);

    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < n; ++i)
        if (!conditioned[i]) active.push_back(i);
    const std::size_t m = active.size();

    switch (spec.kind) {
        case ScheduleKind::Parallel:
            for (std::size_t i : active) detail::fill_ramp(T.levels, i, 0.0, 1.0);
            break;

        case ScheduleKind::Sequential: {
            const auto order = detail::resolve_order(spec.order, n, conditioned);
            if (m == 0) break;
            const double o = spec.overlap;
            const double width = 1.0 / (static_cast<double>(m) - o * static_cast<double>(m - 1));
            if (static_cast<double>(spec.d) * width < 1.0 - 1e-9)
                throw Error("d=" + std::to_string(spec.d) + " is too small to separate " + std::to_string(m) +
                            " sequential windows; increase the step count");
            for (std::size_t j = 0; j < m; ++j)
                detail::fill_ramp(T.levels, order[j], static_cast<double>(j) * width * (1.0 - o), width);
            break;
        }

        case ScheduleKind::NextK: {
            if (spec.k < 1 || spec.k > std::max<std::size_t>(n, 1)) throw Error("next-k requires 1 <= k <= n");
            const auto order = detail::resolve_order(spec.order, n, conditioned);
            if (m == 0) break;
            const std::size_t groups = (m + spec.k - 1) / spec.k;
            if (spec.d < groups)
                throw Error("d=" + std::to_string(spec.d) + " is too small for " + std::to_string(groups) +
                            " sequential groups; increase the step count");
            const double width = 1.0 / static_cast<double>(groups);
            for (std::size_t j = 0; j < m; ++j)
                detail::fill_ramp(T.levels, order[j], static_cast<double>(j / spec.k) * width, width);
            break;
        }

        case ScheduleKind::RollingWindow: {
            if (spec.window < 1) throw Error("rolling-window requires window >= 1");
            if (spec.stride < 1 || spec.stride > spec.window || spec.window % spec.stride != 0)
                throw Error("rolling-window requires a stride that divides the window");
            const auto order = detail::resolve_order(spec.order, n, conditioned);
            if (m == 0) break;
            // Blocks of `stride` variables start every `stride/window` of a
            // ramp duration, so at most `window` variables are mid-descent.
            const std::size_t blocks = (m + spec.stride - 1) / spec.stride;
            const double spacing_ratio = static_cast<double>(spec.stride) / static_cast<double>(spec.window);
            const double width = 1.0 / (1.0 + static_cast<double>(blocks - 1) * spacing_ratio);
            for (std::size_t j = 0; j < m; ++j) {
                const double start = static_cast<double>(j / spec.stride) * width * spacing_ratio;
                detail::fill_ramp(T.levels, order[j], start, width);
            }
            break;
        }

        case ScheduleKind::AdaptiveCertainty:
            if (spec.k < 1 || spec.k > std::max<std::size_t>(n, 1)) throw Error("adaptive-certainty requires 1 <= k <= n");
            T.levels = Matrix::Zero(rows, 1);
            for (std::size_t i : active) T.levels(static_cast<Eigen::Index>(i), 0) = 1.0;
            T.partial = true;
            break;
    }
    return T;
}

struct ScheduleReport {
    bool ok = true;
    std::size_t row = 0;
    std::size_t column = 0;
    std::string message;

    explicit operator bool() const { return ok; }
};

/// Checks range, monotonicity, termination and conditioning; reports the
/// first violation in row-major order.
inline ScheduleReport validate_schedule(const ScheduleMatrix& T) {
    auto fail = [](std::size_t r, std::size_t c, std::string msg) { return ScheduleReport{false, r, c, std::move(msg)}; };
    if (T.conditioned.size() != T.n()) return fail(0, 0, "conditioned mask length differs from row count");
    if (T.levels.cols() < 1) return fail(0, 0, "schedule has no columns");
    const auto cols = static_cast<std::size_t>(T.levels.cols());
    for (std::size_t r = 0; r < T.n(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = T.levels(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
            if (!(v >= 0.0 && v <= 1.0)) return fail(r, c, "level outside [0,1]");
            if (T.conditioned[r] && v != 0.0) return fail(r, c, "conditioned row must be zero");
            if (c > 0 && v > T.levels(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c - 1)))
                return fail(r, c, "level increases");
        }
        if (!T.partial && T.levels(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(cols - 1)) != 0.0)
            return fail(r, cols - 1, "final level is not zero");
    }
    return {};
}

/// Picks up to k not-yet-started variables (level 1) with the smallest
/// uncertainty, skipping any whose graph parent is not yet clean. Ties go to
/// the lower index.
inline std::vector<std::size_t> adaptive_select(const ReasoningState& state, const Vector& uncertainties, std::size_t k,
                                                const DependencyGraph* graph = nullptr) {
    const std::size_t n = state.n();
    if (static_cast<std::size_t>(uncertainties.size()) != n) throw Error("adaptive_select: uncertainty length mismatch");
    if (!uncertainties.allFinite()) throw Error("adaptive_select: uncertainties must be finite");
    if (k < 1) throw Error("adaptive_select requires k >= 1");

    std::vector<std::vector<std::size_t>> parents;
    if (graph) {
        if (graph->n != n) throw Error("adaptive_select: graph size mismatch");
        parents = graph->parents();
    }
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < n; ++i) {
        if (state.is_conditioned(i) || state.level(i) != 1.0) continue;
        bool blocked = false;
        if (graph)
            for (std::size_t p : parents[i]) blocked = blocked || state.level(p) > 0.0;
        if (!blocked) candidates.push_back(i);
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t x, std::size_t y) {
        return uncertainties(static_cast<Eigen::Index>(x)) < uncertainties(static_cast<Eigen::Index>(y));
    });
    if (candidates.size() > k) candidates.resize(k);
    std::sort(candidates.begin(), candidates.end());
    return candidates;
}

}  // namespace sre

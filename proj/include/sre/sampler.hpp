#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sre/core.hpp"
#include "sre/error.hpp"
#include "sre/oracle.hpp"
#include "sre/paradigm.hpp"
#include "sre/rng.hpp"
#include "sre/schedule.hpp"

namespace sre {

/// Anything that maps a state to a prediction. Must be reentrant when chains
/// run concurrently.
using Denoiser = std::function<Prediction(const ReasoningState&)>;

enum class StepKind { DdpmAncestral, Ddim, EulerFlow, HeunFlow };

struct StepMethod {
    StepKind kind = StepKind::Ddim;
    double eta = 0.0;
    bool learned_variance = false;

    static StepMethod ddim(double eta = 0.0) { return {StepKind::Ddim, eta, false}; }
    static StepMethod euler() { return {StepKind::EulerFlow, 0.0, false}; }
    static StepMethod heun() { return {StepKind::HeunFlow, 0.0, false}; }
    static StepMethod ancestral(bool learned = false) { return {StepKind::DdpmAncestral, 0.0, learned}; }

    /// Rejects method/paradigm combinations that cannot run.
    void validate(const Paradigm& p) const {
        if (!(eta >= 0.0)) throw Error("ddim eta must be >= 0");
        if (learned_variance && kind != StepKind::DdpmAncestral)
            throw Error("learned variance is only supported with ddpm-ancestral steps");
        if (kind == StepKind::DdpmAncestral && !p.is_discrete())
            throw Error("ddpm-ancestral requires the ddpm-discrete paradigm");
        if ((kind == StepKind::EulerFlow || kind == StepKind::HeunFlow) && !p.has_derivatives())
            throw Error("flow step methods require a paradigm with time derivatives");
    }
};

/// Identifies the noise stream of one step: fresh noise for variable i is
/// drawn from substream(seed, column, i).
struct StepNoise {
    std::uint64_t seed = 0;
    std::uint64_t column = 0;
};

namespace detail {

inline Eigen::RowVectorXd fresh_noise(const StepNoise& noise, std::size_t variable, std::size_t dim) {
    Rng rng = substream(noise.seed, noise.column, variable);
    Eigen::RowVectorXd z(static_cast<Eigen::Index>(dim));
    for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = standard_normal(rng);
    return z;
}

/// Estimated noise from (x_t, x0-hat); requires b > 0.
inline Eigen::RowVectorXd eps_hat(const Coeffs& c, const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& x0) {
    return (x - c.a * x0) / c.b;
}

inline Eigen::RowVectorXd velocity(const Coeffs& c, const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& x0) {
    return c.da * x0 + c.db * eps_hat(c, x, x0);
}

}  // namespace detail

/// Standard deviation of the fresh noise injected by ddim(eta) when jumping
/// from coefficients c to c'. Equals the ancestral posterior deviation at
/// eta = 1 on the DDPM grid.
inline double ddim_sigma(const Coeffs& c, const Coeffs& cp, double eta) {
    if (eta == 0.0 || cp.b == 0.0) return 0.0;
    const double ratio = (c.a * c.a * cp.b * cp.b) / (cp.a * cp.a * c.b * c.b);
    return eta * cp.b * std::sqrt(std::max(0.0, 1.0 - ratio));
}

/// Moves every variable from its current level to its target level.
/// Variables whose level does not change are left untouched bit-for-bit;
/// conditioned variables never change. heun-flow needs the denoiser for its
/// corrector evaluation.
inline ReasoningState denoise_step(const ReasoningState& state, const Prediction& pred, const Vector& target_levels,
                                   const Paradigm& paradigm, const StepMethod& method, const StepNoise& noise,
                                   const Denoiser* denoiser = nullptr) {
    const std::size_t n = state.n();
    const std::size_t dim = state.dim();
    if (static_cast<std::size_t>(target_levels.size()) != n) throw Error("denoise_step: target level count mismatch");
    if (pred.x0_mean.rows() != state.values().rows() || pred.x0_mean.cols() != state.values().cols())
        throw Error("denoise_step: prediction shape mismatch");
    method.validate(paradigm);

    Matrix next = state.values();
    Vector next_levels = state.levels();
    std::vector<std::size_t> moving;
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const double t = state.level(i);
        const double tp = target_levels(r);
        if (tp > t) throw Error("target level above current level for variable " + std::to_string(i));
        if (tp == t || state.is_conditioned(i)) continue;
        if (tp < 0.0) throw Error("target level below zero for variable " + std::to_string(i));
        moving.push_back(i);
        next_levels(r) = tp;
    }

    for (std::size_t i : moving) {
        const auto r = static_cast<Eigen::Index>(i);
        const double t = state.level(i);
        const double tp = target_levels(r);
        const Coeffs c = coefficients(paradigm, t);
        const Coeffs cp = coefficients(paradigm, tp);
        const Eigen::RowVectorXd x = state.values().row(r);
        const Eigen::RowVectorXd x0 = pred.x0_mean.row(r);

        switch (method.kind) {
            case StepKind::Ddim: {
                const Eigen::RowVectorXd eps = detail::eps_hat(c, x, x0);
                const double sigma = ddim_sigma(c, cp, method.eta);
                const double keep = std::sqrt(std::max(0.0, cp.b * cp.b - sigma * sigma));
                Eigen::RowVectorXd out = cp.a * x0 + keep * eps;
                if (sigma > 0.0) out += sigma * detail::fresh_noise(noise, i, dim);
                next.row(r) = out;
                break;
            }
            case StepKind::EulerFlow:
            case StepKind::HeunFlow:
                next.row(r) = x + (tp - t) * detail::velocity(c, x, x0);
                break;
            case StepKind::DdpmAncestral: {
                const auto gi = paradigm.grid_index(t);
                const auto gj = paradigm.grid_index(tp);
                if (!gi || !gj || *gj + 1 != *gi)
                    throw Error("ddpm-ancestral steps must move between adjacent grid levels (variable " +
                                std::to_string(i) + ")");
                const auto q = paradigm.posterior(*gi);
                Eigen::RowVectorXd out = q.coef_x0 * x0 + q.coef_xt * x;
                if (*gj > 0) {
                    double variance = q.variance;
                    if (method.learned_variance) {
                        if (!pred.var_interp) throw Error("learned variance requested but the denoiser has no variance head");
                        const double h = (*pred.var_interp)(r);
                        variance = std::exp(h * std::log(paradigm.beta(*gi)) + (1.0 - h) * q.log_variance_clipped);
                    }
                    out += std::sqrt(variance) * detail::fresh_noise(noise, i, dim);
                }
                next.row(r) = out;
                break;
            }
        }
    }

    if (method.kind == StepKind::HeunFlow && !moving.empty()) {
        if (!denoiser) throw Error("heun-flow requires the denoiser for its corrector stage");
        const ReasoningState predicted = with_values(state, next, next_levels);
        const Prediction corr = (*denoiser)(predicted);
        for (std::size_t i : moving) {
            const auto r = static_cast<Eigen::Index>(i);
            const double t = state.level(i);
            const double tp = target_levels(r);
            if (tp == 0.0) continue;  // velocity undefined at a clean level; keep the Euler step
            const Coeffs c = coefficients(paradigm, t);
            const Coeffs cp = coefficients(paradigm, tp);
            const Eigen::RowVectorXd x = state.values().row(r);
            const Eigen::RowVectorXd u0 = detail::velocity(c, x, pred.x0_mean.row(r));
            const Eigen::RowVectorXd u1 = detail::velocity(cp, next.row(r), corr.x0_mean.row(r));
            next.row(r) = x + (tp - t) * 0.5 * (u0 + u1);
        }
    }
    return with_values(state, std::move(next), std::move(next_levels));
}

struct Snapshot {
    std::size_t column = 0;
    ReasoningState state;
    std::optional<Prediction> prediction;
};

using Trajectory = std::vector<Snapshot>;

struct InferenceResult {
    ReasoningState final_state;
    Trajectory trajectory;
    /// Prediction made on the initial state (used for calibration metrics).
    std::optional<Prediction> first_prediction;
    /// Levels after every column, n x (columns); for adaptive runs this is
    /// the schedule that was realized online.
    Matrix realized_levels;
};

/// Online ordering policy: pick the k least uncertain variables whenever no
/// variable is mid-descent, then descend them over a fixed ramp.
struct AdaptivePolicy {
    std::size_t k = 1;
    std::size_t d = 1;
    std::optional<DependencyGraph> graph;
};

/// Initial noise for every non-conditioned variable, drawn from
/// substream(seed, column 0, variable) with a distinct tag.
inline ReasoningState noise_state(const Matrix& clamped_values, const std::vector<bool>& conditioned, std::uint64_t seed) {
    Matrix values = clamped_values;
    Vector levels = Vector::Ones(values.rows());
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        if (conditioned[static_cast<std::size_t>(i)]) {
            levels(i) = 0.0;
            continue;
        }
        Rng rng = substream(seed, std::uint64_t{0xfeedULL}, static_cast<std::uint64_t>(i));
        for (Eigen::Index j = 0; j < values.cols(); ++j) values(i, j) = standard_normal(rng);
    }
    return make_state(std::move(values), std::move(levels), conditioned);
}

/// Runs a fixed schedule column by column.
inline InferenceResult run_inference(const Denoiser& denoiser, const ReasoningState& initial, const ScheduleMatrix& schedule,
                                     const Paradigm& paradigm, const StepMethod& method, std::uint64_t seed,
                                     bool record = false) {
    if (schedule.partial) throw Error("run_inference: adaptive schedules must be run with run_adaptive");
    if (schedule.n() != initial.n()) throw Error("run_inference: schedule has the wrong number of variables");
    if ((schedule.column(0) - initial.levels()).cwiseAbs().maxCoeff() != 0.0)
        throw Error("run_inference: schedule column 0 does not match the initial levels");
    method.validate(paradigm);

    InferenceResult result;
    result.realized_levels = schedule.levels;
    ReasoningState state = initial;
    for (std::size_t k = 1; k <= schedule.steps(); ++k) {
        Prediction pred = denoiser(state);
        if (k == 1) result.first_prediction = pred;
        if (record) result.trajectory.push_back({k - 1, state, pred});
        state = denoise_step(state, pred, schedule.column(k), paradigm, method, {seed, k}, &denoiser);
    }
    if (record) result.trajectory.push_back({schedule.steps(), state, std::nullopt});
    result.final_state = std::move(state);
    return result;
}

/// Runs certainty-ordered inference. Each selected variable descends over
/// ceil(d / groups) columns, where groups = ceil(m / k) for m active
/// variables, so the total step count matches a sequential schedule of d
/// steps.
inline InferenceResult run_adaptive(const Denoiser& denoiser, const ReasoningState& initial, const AdaptivePolicy& policy,
                                    const Paradigm& paradigm, const StepMethod& method, std::uint64_t seed,
                                    bool record = false) {
    const std::size_t n = initial.n();
    if (policy.k < 1) throw Error("adaptive policy requires k >= 1");
    if (policy.d < 1) throw Error("adaptive policy requires d >= 1");
    for (std::size_t i = 0; i < n; ++i)
        if (!initial.is_conditioned(i) && initial.level(i) != 1.0)
            throw Error("run_adaptive: non-conditioned variables must start at level 1");
    method.validate(paradigm);

    const std::size_t m = initial.active_count();
    const std::size_t groups = std::max<std::size_t>(1, (m + policy.k - 1) / policy.k);
    const std::size_t ramp = (policy.d + groups - 1) / groups;
    const DependencyGraph* graph = policy.graph ? &*policy.graph : nullptr;

    InferenceResult result;
    std::vector<Vector> columns{initial.levels()};
    std::vector<std::size_t> progress(n, 0);
    std::vector<std::size_t> in_flight;
    ReasoningState state = initial;
    std::size_t column = 0;
    const std::size_t max_rounds = n * ((policy.d + policy.k - 1) / policy.k) + n + 1;

    auto unfinished = [&] {
        for (std::size_t i = 0; i < n; ++i)
            if (state.level(i) > 0.0) return true;
        return false;
    };

    while (unfinished()) {
        if (column >= max_rounds) throw Error("run_adaptive: exceeded the round budget");
        Prediction pred = denoiser(state);
        if (column == 0) result.first_prediction = pred;
        if (in_flight.empty()) {
            in_flight = adaptive_select(state, pred.var, policy.k, graph);
            if (in_flight.empty()) throw Error("run_adaptive: no selectable variable while levels are nonzero");
        }
        Vector target = state.levels();
        for (std::size_t i : in_flight) {
            ++progress[i];
            target(static_cast<Eigen::Index>(i)) =
                progress[i] >= ramp ? 0.0 : 1.0 - static_cast<double>(progress[i]) / static_cast<double>(ramp);
        }
        if (record) result.trajectory.push_back({column, state, pred});
        ++column;
        state = denoise_step(state, pred, target, paradigm, method, {seed, column}, &denoiser);
        std::erase_if(in_flight, [&](std::size_t i) { return state.level(i) == 0.0; });
        columns.push_back(state.levels());
    }
    if (record) result.trajectory.push_back({column, state, std::nullopt});

    result.realized_levels = Matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t c = 0; c < columns.size(); ++c) result.realized_levels.col(static_cast<Eigen::Index>(c)) = columns[c];
    result.final_state = std::move(state);
    return result;
}

}  // namespace sre

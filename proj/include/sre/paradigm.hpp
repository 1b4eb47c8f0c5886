#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sre/core.hpp"
#include "sre/error.hpp"

namespace sre {

enum class ParadigmKind { DdpmDiscrete, CosineFlow, RectifiedFlow };
enum class BetaSchedule { Linear, Cosine };
enum class PredictionKind { Epsilon, X0, V, U };

/// Mixing coefficients x_t = a x0 + b eps and their time derivatives.
/// da/db are NaN for the discrete paradigm, which has no continuous time.
struct Coeffs {
    double a = 1.0;
    double b = 0.0;
    double da = 0.0;
    double db = 0.0;
    bool has_derivatives = true;
};

/// A denoising formulation. For DDPM the cumulative products are
/// precomputed on the step grid; index i corresponds to level i/d.
class Paradigm {
public:
    static Paradigm rectified_flow() { return Paradigm(ParadigmKind::RectifiedFlow); }
    static Paradigm cosine_flow() { return Paradigm(ParadigmKind::CosineFlow); }

    static Paradigm ddpm(std::size_t d_steps, BetaSchedule schedule = BetaSchedule::Linear) {
        if (d_steps < 1) throw Error("ddpm-discrete requires d_steps >= 1");
        Paradigm p(ParadigmKind::DdpmDiscrete);
        p.d_steps_ = d_steps;
        p.beta_schedule_ = schedule;
        p.betas_.assign(d_steps + 1, 0.0);
        p.alpha_bar_.assign(d_steps + 1, 1.0);
        const double d = static_cast<double>(d_steps);
        if (schedule == BetaSchedule::Linear) {
            constexpr double beta_start = 1e-4;
            constexpr double beta_end = 0.02;
            for (std::size_t i = 1; i <= d_steps; ++i) {
                p.betas_[i] = d_steps == 1 ? beta_start
                                           : beta_start + (beta_end - beta_start) * static_cast<double>(i - 1) / (d - 1.0);
            }
        } else {
            constexpr double s = 0.008;
            auto f = [&](double t) {
                const double c = std::cos((t + s) / (1.0 + s) * std::numbers::pi / 2.0);
                return c * c;
            };
            for (std::size_t i = 1; i <= d_steps; ++i) {
                const double ratio = f(static_cast<double>(i) / d) / f(static_cast<double>(i - 1) / d);
                p.betas_[i] = std::min(1.0 - ratio, 0.999);
            }
        }
        for (std::size_t i = 1; i <= d_steps; ++i) {
            const double beta = p.betas_[i];
            if (!(beta > 0.0 && beta < 1.0)) throw Error("beta outside (0,1) at step " + std::to_string(i));
            p.alpha_bar_[i] = p.alpha_bar_[i - 1] * (1.0 - beta);
        }
        return p;
    }

    ParadigmKind kind() const { return kind_; }
    bool is_discrete() const { return kind_ == ParadigmKind::DdpmDiscrete; }
    bool has_derivatives() const { return !is_discrete(); }
    std::size_t d_steps() const { return d_steps_; }
    BetaSchedule beta_schedule() const { return beta_schedule_; }

    /// beta_i for grid step i in 1..d (index 0 unused).
    double beta(std::size_t i) const { return betas_.at(i); }
    double alpha_bar(std::size_t i) const { return alpha_bar_.at(i); }

    /// Grid index for a level on the DDPM grid, or nullopt if off-grid.
    std::optional<std::size_t> grid_index(double t) const {
        const double scaled = t * static_cast<double>(d_steps_);
        const double r = std::round(scaled);
        if (std::abs(scaled - r) > 1e-9 * std::max(1.0, scaled)) return std::nullopt;
        if (r < 0.0 || r > static_cast<double>(d_steps_)) return std::nullopt;
        return static_cast<std::size_t>(r);
    }

    /// Posterior q(x_{i-1} | x_i, x0) of the discrete chain: mean coefficients
    /// on x0 and x_i, the variance beta-tilde, and its log with step 1 clipped
    /// to step 2 (beta-tilde_1 is zero).
    struct Posterior {
        double coef_x0;
        double coef_xt;
        double variance;
        double log_variance_clipped;
    };

    Posterior posterior(std::size_t i) const {
        if (!is_discrete() || i < 1 || i > d_steps_) throw Error("posterior requires a ddpm grid step in 1..d");
        const double ab = alpha_bar_[i];
        const double ab_prev = alpha_bar_[i - 1];
        const double beta = betas_[i];
        Posterior q{};
        q.coef_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        q.coef_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
        q.variance = beta * (1.0 - ab_prev) / (1.0 - ab);
        q.log_variance_clipped = std::log(clipped_posterior_variance(i));
        return q;
    }

    double clipped_posterior_variance(std::size_t i) const {
        if (i == 1) {
            if (d_steps_ >= 2) return betas_[2] * (1.0 - alpha_bar_[1]) / (1.0 - alpha_bar_[2]);
            return betas_[1];
        }
        return betas_[i] * (1.0 - alpha_bar_[i - 1]) / (1.0 - alpha_bar_[i]);
    }

    friend bool operator==(const Paradigm& x, const Paradigm& y) {
        return x.kind_ == y.kind_ && x.d_steps_ == y.d_steps_ && x.beta_schedule_ == y.beta_schedule_;
    }

private:
    explicit Paradigm(ParadigmKind k) : kind_(k) {}

    ParadigmKind kind_;
    std::size_t d_steps_ = 0;
    BetaSchedule beta_schedule_ = BetaSchedule::Linear;
    std::vector<double> betas_;
    std::vector<double> alpha_bar_;
};

inline Coeffs coefficients(const Paradigm& p, double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw Error("level out of range: " + std::to_string(t));
    constexpr double half_pi = std::numbers::pi / 2.0;
    switch (p.kind()) {
        case ParadigmKind::RectifiedFlow:
            return {1.0 - t, t, -1.0, 1.0, true};
        case ParadigmKind::CosineFlow: {
            if (t == 1.0) return {0.0, 1.0, -half_pi, 0.0, true};
            const double c = std::cos(half_pi * t);
            const double s = std::sin(half_pi * t);
            return {c, s, -half_pi * s, half_pi * c, true};
        }
        case ParadigmKind::DdpmDiscrete: {
            const auto i = p.grid_index(t);
            if (!i) throw Error("level " + std::to_string(t) + " is off the ddpm-discrete grid of " +
                                std::to_string(p.d_steps()) + " steps");
            const double ab = p.alpha_bar(*i);
            constexpr double nan = std::numeric_limits<double>::quiet_NaN();
            return {std::sqrt(ab), std::sqrt(1.0 - ab), nan, nan, false};
        }
    }
    throw Error("unknown paradigm");
}

/// Forward corruption: row i is a(t_i) x0_i + b(t_i) eps_i.
inline Matrix forward_diffuse(const Paradigm& p, const Matrix& x0, const Matrix& eps, const Vector& levels) {
    if (x0.rows() != eps.rows() || x0.cols() != eps.cols() || levels.size() != x0.rows())
        throw Error("forward_diffuse: shape mismatch");
    Matrix out(x0.rows(), x0.cols());
    for (Eigen::Index i = 0; i < x0.rows(); ++i) {
        const Coeffs c = coefficients(p, levels(i));
        out.row(i) = c.a * x0.row(i) + c.b * eps.row(i);
    }
    return out;
}

/// A conversion between parameterizations is affine in the prediction at a
/// fixed (x_t, t): to = pred_scale * from + xt_scale * x_t.
struct Conversion {
    double pred_scale = 1.0;
    double xt_scale = 0.0;
};

inline std::string_view to_string(PredictionKind k) {
    switch (k) {
        case PredictionKind::Epsilon: return "epsilon";
        case PredictionKind::X0: return "x0";
        case PredictionKind::V: return "v";
        case PredictionKind::U: return "u";
    }
    return "?";
}

inline Conversion conversion(const Coeffs& c, PredictionKind from, PredictionKind to) {
    if (from == to) return {1.0, 0.0};
    const bool needs_derivatives = from == PredictionKind::U || to == PredictionKind::U;
    if (needs_derivatives && !c.has_derivatives)
        throw Error("velocity u is not defined for the ddpm-discrete paradigm");

    // (x0, eps) expressed as affine functions of (pred, x_t).
    Conversion x0;
    Conversion eps;
    switch (from) {
        case PredictionKind::X0:
            if (c.b == 0.0) throw Error("singular conversion: cannot recover epsilon from x0 at a clean level");
            x0 = {1.0, 0.0};
            eps = {-c.a / c.b, 1.0 / c.b};
            break;
        case PredictionKind::Epsilon:
            if (c.a == 0.0) throw Error("singular conversion: cannot recover x0 from epsilon at a pure-noise level");
            eps = {1.0, 0.0};
            x0 = {-c.b / c.a, 1.0 / c.a};
            break;
        case PredictionKind::V: {
            const double norm = c.a * c.a + c.b * c.b;
            x0 = {-c.b / norm, c.a / norm};
            eps = {c.a / norm, c.b / norm};
            break;
        }
        case PredictionKind::U: {
            const double det = c.a * c.db - c.b * c.da;
            if (det == 0.0) throw Error("singular conversion: degenerate velocity");
            x0 = {-c.b / det, c.db / det};
            eps = {c.a / det, -c.da / det};
            break;
        }
    }
    auto combine = [](double wx0, const Conversion& x, double weps, const Conversion& e) {
        return Conversion{wx0 * x.pred_scale + weps * e.pred_scale, wx0 * x.xt_scale + weps * e.xt_scale};
    };
    switch (to) {
        case PredictionKind::X0: return x0;
        case PredictionKind::Epsilon: return eps;
        case PredictionKind::V: return combine(-c.b, x0, c.a, eps);
        case PredictionKind::U: return combine(c.da, x0, c.db, eps);
    }
    throw Error("unknown prediction kind");
}

/// Converts a per-variable prediction between parameterizations using the
/// identities x_t = a x0 + b eps, v = a eps - b x0, u = da x0 + db eps.
inline Matrix convert_prediction(const Paradigm& p, const Matrix& pred, PredictionKind from, PredictionKind to,
                                 const Matrix& x_t, const Vector& levels) {
    if (pred.rows() != x_t.rows() || pred.cols() != x_t.cols() || levels.size() != pred.rows())
        throw Error("convert_prediction: shape mismatch");
    if (from == to) return pred;
    Matrix out(pred.rows(), pred.cols());
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
        const Conversion cv = conversion(coefficients(p, levels(i)), from, to);
        out.row(i) = cv.pred_scale * pred.row(i) + cv.xt_scale * x_t.row(i);
    }
    return out;
}

/// Target value of a parameterization given the true clean data and noise.
inline Matrix target_of_kind(const Paradigm& p, PredictionKind kind, const Matrix& x0, const Matrix& eps,
                             const Vector& levels) {
    Matrix out(x0.rows(), x0.cols());
    for (Eigen::Index i = 0; i < x0.rows(); ++i) {
        const Coeffs c = coefficients(p, levels(i));
        switch (kind) {
            case PredictionKind::X0: out.row(i) = x0.row(i); break;
            case PredictionKind::Epsilon: out.row(i) = eps.row(i); break;
            case PredictionKind::V: out.row(i) = c.a * eps.row(i) - c.b * x0.row(i); break;
            case PredictionKind::U:
                if (!c.has_derivatives) throw Error("velocity u is not defined for the ddpm-discrete paradigm");
                out.row(i) = c.da * x0.row(i) + c.db * eps.row(i);
                break;
        }
    }
    return out;
}

}  // namespace sre

#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sre/core.hpp"
#include "sre/error.hpp"
#include "sre/paradigm.hpp"
#include "sre/rng.hpp"

namespace sre {

/// Denoiser output. x0_mean is the clean-data estimate; var[i] is the scalar
/// uncertainty of variable i (trace of its posterior covariance block).
struct Prediction {
    Matrix x0_mean;
    Vector var;
    std::optional<Vector> responsibilities;
    /// Learned-variance interpolation weight per variable, in [0,1].
    std::optional<Vector> var_interp;
};

/// Mixture of k Gaussians over the flattened state vector of length
/// D = n * dim (variable-major: entries i*dim .. i*dim+dim-1 belong to
/// variable i).
class GaussianMixture {
public:
    GaussianMixture() = default;

    GaussianMixture(std::vector<double> weights, std::vector<Vector> means, std::vector<Matrix> covariances)
        : weights_(std::move(weights)), means_(std::move(means)), covs_(std::move(covariances)) {
        const std::size_t k = weights_.size();
        if (k == 0) throw Error("mixture needs at least one component");
        if (means_.size() != k || covs_.size() != k) throw Error("mixture component counts disagree");
        double total = 0.0;
        for (double w : weights_) {
            if (!(w >= 0.0) || !std::isfinite(w)) throw Error("mixture weights must be nonnegative");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12) throw Error("mixture weights must sum to 1, got " + std::to_string(total));
        const auto dim = means_[0].size();
        if (dim == 0) throw Error("mixture dimension must be positive");
        chol_.reserve(k);
        log_det_.reserve(k);
        for (std::size_t c = 0; c < k; ++c) {
            if (means_[c].size() != dim || covs_[c].rows() != dim || covs_[c].cols() != dim)
                throw Error("mixture component " + std::to_string(c) + " has inconsistent dimension");
            if ((covs_[c] - covs_[c].transpose()).cwiseAbs().maxCoeff() > 1e-12)
                throw Error("covariance of component " + std::to_string(c) + " is not symmetric");
            Eigen::LLT<Matrix> llt(covs_[c]);
            if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().array() > 0.0).all())
                throw Error("covariance of component " + std::to_string(c) + " is not positive-definite");
            log_det_.push_back(2.0 * llt.matrixLLT().diagonal().array().log().sum());
            chol_.push_back(llt.matrixL());
        }
    }

    std::size_t k() const { return weights_.size(); }
    std::size_t dim() const { return static_cast<std::size_t>(means_.front().size()); }
    const std::vector<double>& weights() const { return weights_; }
    const std::vector<Vector>& means() const { return means_; }
    const std::vector<Matrix>& covariances() const { return covs_; }
    const Matrix& cholesky(std::size_t c) const { return chol_[c]; }
    double log_det(std::size_t c) const { return log_det_[c]; }

    Vector mean() const {
        Vector m = Vector::Zero(means_[0].size());
        for (std::size_t c = 0; c < k(); ++c) m += weights_[c] * means_[c];
        return m;
    }

    Matrix covariance() const {
        const Vector m = mean();
        Matrix cov = Matrix::Zero(m.size(), m.size());
        for (std::size_t c = 0; c < k(); ++c) {
            const Vector dm = means_[c] - m;
            cov += weights_[c] * (covs_[c] + dm * dm.transpose());
        }
        return cov;
    }

private:
    std::vector<double> weights_;
    std::vector<Vector> means_;
    std::vector<Matrix> covs_;
    std::vector<Matrix> chol_;
    std::vector<double> log_det_;
};

namespace detail {

inline double log_sum_exp(const Vector& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

inline Vector flatten(const Matrix& values) {
    Vector out(values.size());
    for (Eigen::Index i = 0; i < values.rows(); ++i)
        for (Eigen::Index j = 0; j < values.cols(); ++j) out(i * values.cols() + j) = values(i, j);
    return out;
}

inline Matrix unflatten(const Vector& v, std::size_t n, std::size_t dim) {
    Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j) out(i, j) = v(i * dim + j);
    return out;
}

}  // namespace detail

inline double gmm_log_density(const GaussianMixture& gmm, const Vector& x) {
    if (static_cast<std::size_t>(x.size()) != gmm.dim())
        throw Error("dimension mismatch: point has " + std::to_string(x.size()) + " entries, mixture " +
                    std::to_string(gmm.dim()));
    const double log_2pi = std::log(2.0 * std::numbers::pi);
    Vector terms(static_cast<Eigen::Index>(gmm.k()));
    for (std::size_t c = 0; c < gmm.k(); ++c) {
        const Vector z = gmm.cholesky(c).triangularView<Eigen::Lower>().solve(x - gmm.means()[c]);
        const double w = gmm.weights()[c];
        terms(static_cast<Eigen::Index>(c)) =
            (w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity()) -
            0.5 * (z.squaredNorm() + gmm.log_det(c) + static_cast<double>(x.size()) * log_2pi);
    }
    return detail::log_sum_exp(terms);
}

/// Distribution of the coordinates where `observed` is false given the
/// observed ones fixed to `x` (entries at free coordinates are ignored).
inline GaussianMixture condition_mixture(const GaussianMixture& gmm, const std::vector<bool>& observed, const Vector& x) {
    const auto D = static_cast<Eigen::Index>(gmm.dim());
    if (static_cast<Eigen::Index>(observed.size()) != D || x.size() != D) throw Error("condition_mixture: shape mismatch");
    std::vector<Eigen::Index> f, o;
    for (Eigen::Index i = 0; i < D; ++i) (observed[static_cast<std::size_t>(i)] ? o : f).push_back(i);
    if (f.empty()) throw Error("condition_mixture: no free coordinates");
    if (o.empty()) return gmm;

    const auto O = static_cast<Eigen::Index>(o.size());
    const Vector xo = x(o);
    std::vector<Vector> means;
    std::vector<Matrix> covs;
    Vector log_w(static_cast<Eigen::Index>(gmm.k()));
    for (std::size_t c = 0; c < gmm.k(); ++c) {
        const Vector& mu = gmm.means()[c];
        const Matrix& S = gmm.covariances()[c];
        const Matrix Soo = S(o, o);
        const Matrix Sfo = S(f, o);
        Eigen::LLT<Matrix> llt(Soo);
        const Vector r = xo - mu(o);
        const Vector solved = llt.solve(r);
        means.push_back(mu(f) + Sfo * solved);
        Matrix cov = S(f, f) - Sfo * llt.solve(Matrix(Sfo.transpose()));
        covs.push_back(0.5 * (cov + cov.transpose()));
        const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        const double w = gmm.weights()[c];
        log_w(static_cast<Eigen::Index>(c)) = (w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity()) -
                                              0.5 * (r.dot(solved) + log_det + static_cast<double>(O) * std::log(2.0 * std::numbers::pi));
    }
    const double norm = detail::log_sum_exp(log_w);
    std::vector<double> weights(gmm.k());
    double total = 0.0;
    for (std::size_t c = 0; c < gmm.k(); ++c) total += weights[c] = std::exp(log_w(static_cast<Eigen::Index>(c)) - norm);
    for (double& w : weights) w /= total;
    return GaussianMixture(std::move(weights), std::move(means), std::move(covs));
}

inline Vector gmm_sample(const GaussianMixture& gmm, Rng& rng) {
    std::discrete_distribution<std::size_t> pick(gmm.weights().begin(), gmm.weights().end());
    const std::size_t c = pick(rng);
    Vector z(static_cast<Eigen::Index>(gmm.dim()));
    for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = standard_normal(rng);
    return gmm.means()[c] + gmm.cholesky(c) * z;
}

/// Exact posterior E[x0 | x_t] for a Gaussian-mixture prior when every
/// variable carries its own noise level.
///
/// With A = diag(a_i) and B^2 = diag(b_i^2) (repeated per scalar dim), each
/// component gives x_t | c ~ N(A mu_c, A S_c A + B^2) and a Gaussian
/// posterior over x0; the result mixes those by responsibility. var[i] is the
/// trace of variable i's block of the full mixture posterior covariance.
inline Prediction oracle_denoise(const GaussianMixture& gmm, const ReasoningState& state, const Paradigm& paradigm) {
    const std::size_t n = state.n();
    const std::size_t dim = state.dim();
    const auto D = static_cast<Eigen::Index>(n * dim);
    if (static_cast<std::size_t>(D) != gmm.dim())
        throw Error("oracle_denoise: mixture dimension " + std::to_string(gmm.dim()) + " != n*dim = " +
                    std::to_string(D));

    Vector a(D);
    Vector b2(D);
    for (std::size_t i = 0; i < n; ++i) {
        const Coeffs c = coefficients(paradigm, state.level(i));
        for (std::size_t j = 0; j < dim; ++j) {
            a(static_cast<Eigen::Index>(i * dim + j)) = c.a;
            b2(static_cast<Eigen::Index>(i * dim + j)) = c.b * c.b;
        }
    }
    const Vector xt = detail::flatten(state.values());
    const std::size_t k = gmm.k();
    const double log_2pi = std::log(2.0 * std::numbers::pi);

    std::vector<Vector> post_mean(k);
    std::vector<Vector> post_var_diag(k);
    Vector log_resp(static_cast<Eigen::Index>(k));

    Matrix innovation(D, D);
    Matrix gain_rhs(D, D);
    for (std::size_t c = 0; c < k; ++c) {
        const Matrix& cov = gmm.covariances()[c];
        const Vector& mu = gmm.means()[c];
        // A S A + B^2
        innovation.noalias() = a.asDiagonal() * cov * a.asDiagonal();
        innovation.diagonal() += b2;
        Eigen::LLT<Matrix> llt(innovation);
        if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().array() > 0.0).all())
            throw Error("oracle_denoise: singular innovation matrix for component " + std::to_string(c) +
                        " (degenerate covariance at a clean level)");
        const Vector resid = xt - a.cwiseProduct(mu);
        const Vector solved = llt.solve(resid);
        const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        const double w = gmm.weights()[c];
        log_resp(static_cast<Eigen::Index>(c)) =
            (w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity()) -
            0.5 * (resid.dot(solved) + log_det + static_cast<double>(D) * log_2pi);

        // S A (A S A + B^2)^-1 (x_t - A mu) and diag of S - S A (.)^-1 A S
        gain_rhs.noalias() = a.asDiagonal() * cov;  // A S
        const Matrix solved_rhs = llt.solve(gain_rhs);  // (.)^-1 A S
        post_mean[c] = mu + gain_rhs.transpose() * solved;
        post_var_diag[c] = cov.diagonal() - (gain_rhs.cwiseProduct(solved_rhs)).colwise().sum().transpose();
    }

    const double norm = detail::log_sum_exp(log_resp);
    Vector resp = (log_resp.array() - norm).exp();

    Vector mean = Vector::Zero(D);
    for (std::size_t c = 0; c < k; ++c) mean += resp(static_cast<Eigen::Index>(c)) * post_mean[c];
    Vector var_diag = Vector::Zero(D);
    for (std::size_t c = 0; c < k; ++c) {
        const Vector dm = post_mean[c] - mean;
        var_diag += resp(static_cast<Eigen::Index>(c)) * (post_var_diag[c] + dm.cwiseProduct(dm));
    }

    Prediction pred;
    pred.x0_mean = detail::unflatten(mean, n, dim);
    pred.var = Vector::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        if (b2(static_cast<Eigen::Index>(i * dim)) == 0.0) {
            // A clean variable is its own posterior.
            pred.x0_mean.row(row) = state.values().row(row);
            continue;
        }
        double tr = 0.0;
        for (std::size_t j = 0; j < dim; ++j) tr += var_diag(static_cast<Eigen::Index>(i * dim + j));
        pred.var(row) = std::max(tr, 0.0);
    }
    pred.responsibilities = std::move(resp);
    return pred;
}

}  // namespace sre

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sre/core.hpp"
#include "sre/error.hpp"
#include "sre/oracle.hpp"
#include "sre/paradigm.hpp"
#include "sre/rng.hpp"
#include "sre/tsampling.hpp"

namespace sre {

template <typename T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VectorT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------------------
// Tokenizer

/// Sinusoidal features of a scalar: width/2 frequencies spaced geometrically
/// from 1 to 1000, laid out as [sin..., cos...].
inline void sinusoidal_embedding(double x, std::size_t width, double* out) {
    const std::size_t half = width / 2;
    for (std::size_t j = 0; j < half; ++j) {
        const double freq = half == 1 ? 1.0 : std::pow(1000.0, static_cast<double>(j) / static_cast<double>(half - 1));
        out[j] = std::sin(freq * x);
        out[half + j] = std::cos(freq * x);
    }
}

struct Tokenizer {
    std::size_t dim = 1;
    std::size_t level_dims = 16;     // E
    std::size_t position_dims = 16;  // P

    std::size_t width() const { return dim + level_dims + position_dims; }

    void validate() const {
        if (level_dims % 2 != 0 || position_dims % 2 != 0) throw Error("embedding widths must be even");
    }

    /// Row i = [values_i, embed(level_i), embed(position_i)].
    Matrix tokenize(const ReasoningState& state, const Vector& positions) const {
        validate();
        if (positions.size() != static_cast<Eigen::Index>(state.n()))
            throw Error("tokenize: length mismatch between positions and variables");
        if (state.dim() != dim) throw Error("tokenize: state dim does not match tokenizer");
        Matrix tokens(static_cast<Eigen::Index>(state.n()), static_cast<Eigen::Index>(width()));
        std::vector<double> buf(std::max(level_dims, position_dims));
        for (std::size_t i = 0; i < state.n(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            tokens.row(r).head(static_cast<Eigen::Index>(dim)) = state.values().row(r);
            sinusoidal_embedding(state.level(i), level_dims, buf.data());
            for (std::size_t j = 0; j < level_dims; ++j) tokens(r, static_cast<Eigen::Index>(dim + j)) = buf[j];
            sinusoidal_embedding(positions(r), position_dims, buf.data());
            for (std::size_t j = 0; j < position_dims; ++j)
                tokens(r, static_cast<Eigen::Index>(dim + level_dims + j)) = buf[j];
        }
        return tokens;
    }
};

// ---------------------------------------------------------------------------
// Network

enum class Activation : std::uint32_t { Silu = 0, Identity = 1 };

struct NetShape {
    Tokenizer tokenizer;
    std::vector<std::size_t> encoder;  // hidden widths of the per-token encoder
    std::vector<std::size_t> head;     // hidden widths between pooled features and outputs
    bool uncertainty_head = false;
    bool variance_head = false;
    Activation activation = Activation::Silu;
    PredictionKind kind = PredictionKind::X0;

    std::size_t dim() const { return tokenizer.dim; }
    std::size_t encoded_width() const { return encoder.empty() ? tokenizer.width() : encoder.back(); }
    std::size_t output_width() const { return dim() + (uncertainty_head ? 1 : 0) + (variance_head ? 1 : 0); }

    /// Widths of the encoder chain (token width first).
    std::vector<std::size_t> encoder_widths() const {
        std::vector<std::size_t> w{tokenizer.width()};
        w.insert(w.end(), encoder.begin(), encoder.end());
        return w;
    }

    /// Widths of the head chain (token features ++ pooled context first).
    std::vector<std::size_t> head_widths() const {
        std::vector<std::size_t> w{2 * encoded_width()};
        w.insert(w.end(), head.begin(), head.end());
        w.push_back(output_width());
        return w;
    }
};

/// Raw head outputs for one state, variables as columns.
template <typename T>
struct NetOutput {
    MatrixT<T> mean;        // dim x n, in the net's prediction kind
    VectorT<T> log_var;     // n (empty without uncertainty head)
    VectorT<T> var_logit;   // n (empty without variance head)
};

namespace detail {

template <typename T>
T sigmoid(T z) {
    return T(1) / (T(1) + std::exp(-z));
}

template <typename T>
MatrixT<T> activate(const MatrixT<T>& z, Activation act) {
    if (act == Activation::Identity) return z;
    return z.unaryExpr([](T v) { return v * sigmoid(v); });
}

template <typename T>
MatrixT<T> activate_grad(const MatrixT<T>& z, Activation act) {
    if (act == Activation::Identity) return MatrixT<T>::Ones(z.rows(), z.cols());
    return z.unaryExpr([](T v) {
        const T s = sigmoid(v);
        return s * (T(1) + v * (T(1) - s));
    });
}

}  // namespace detail

/// Per-token shared MLP with one mean-pooled context vector concatenated to
/// every token before the head layers. Parameters live in one flat array,
/// weights (column-major, out x in) then bias for each layer in order.
class DenoiserNet {
public:
    struct Layer {
        std::size_t in = 0;
        std::size_t out = 0;
        std::size_t offset = 0;  // weights; bias follows at offset + in*out
        bool activated = true;
    };

    DenoiserNet() = default;

    explicit DenoiserNet(NetShape shape) : shape_(std::move(shape)) {
        shape_.tokenizer.validate();
        if (shape_.dim() < 1) throw Error("net dim must be >= 1");
        std::size_t offset = 0;
        auto add_chain = [&](const std::vector<std::size_t>& widths, bool last_activated) {
            for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
                if (widths[l] == 0 || widths[l + 1] == 0) throw Error("layer widths must be positive");
                const bool act = l + 2 < widths.size() || last_activated;
                layers_.push_back({widths[l], widths[l + 1], offset, act});
                offset += widths[l] * widths[l + 1] + widths[l + 1];
            }
        };
        add_chain(shape_.encoder_widths(), true);
        encoder_layers_ = layers_.size();
        add_chain(shape_.head_widths(), false);
        params_.assign(offset, 0.0);
    }

    /// Gaussian init scaled by 1/sqrt(fan_in); zero biases.
    static DenoiserNet initialized(NetShape shape, Rng& rng) {
        DenoiserNet net(std::move(shape));
        for (const Layer& l : net.layers_) {
            const double scale = 1.0 / std::sqrt(static_cast<double>(l.in));
            for (std::size_t j = 0; j < l.in * l.out; ++j) net.params_[l.offset + j] = scale * standard_normal(rng);
        }
        return net;
    }

    const NetShape& shape() const { return shape_; }
    const std::vector<Layer>& layers() const { return layers_; }
    std::size_t encoder_layers() const { return encoder_layers_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t param_count() const { return params_.size(); }

    /// Forward pass on a token matrix (n x width) with an arbitrary scalar
    /// type for the parameters and activations.
    template <typename T>
    NetOutput<T> forward_tokens(std::span<const T> params, const Matrix& tokens) const {
        return run<T>(params, tokens, nullptr);
    }

    /// Cached activations needed by backward().
    struct Tape {
        std::vector<Matrix> inputs;  // input to each layer (features x n)
        std::vector<Matrix> pre;     // pre-activation of each layer
    };

    NetOutput<double> forward_taped(const Matrix& tokens, Tape& tape) const {
        return run<double>(std::span<const double>(params_), tokens, &tape);
    }

    /// Accumulates d(loss)/d(params) into grad given d(loss)/d(raw outputs).
    void backward(const Tape& tape, const Matrix& grad_out, std::span<double> grad) const {
        Matrix g = grad_out;  // output_width x n
        const auto n = g.cols();
        for (std::size_t li = layers_.size(); li-- > encoder_layers_;) {
            g = layer_backward(li, tape, g, grad);
        }
        // g is d/d(head input) = [token features; context]
        const auto e = static_cast<Eigen::Index>(shape_.encoded_width());
        Matrix g_enc = g.topRows(e);
        const Vector g_ctx = g.bottomRows(e).rowwise().sum() / static_cast<double>(n);
        g_enc.colwise() += g_ctx;
        g = std::move(g_enc);
        for (std::size_t li = encoder_layers_; li-- > 0;) {
            g = layer_backward(li, tape, g, grad);
        }
    }

private:
    template <typename T>
    NetOutput<T> run(std::span<const T> params, const Matrix& tokens, Tape* tape) const {
        if (params.size() != params_.size()) throw Error("parameter count mismatch");
        if (tokens.cols() != static_cast<Eigen::Index>(shape_.tokenizer.width()))
            throw Error("net width " + std::to_string(shape_.tokenizer.width()) + " does not match token width " +
                        std::to_string(tokens.cols()));
        const auto n = tokens.rows();
        MatrixT<T> h = tokens.transpose().template cast<T>();
        if (tape) {
            tape->inputs.clear();
            tape->pre.clear();
        }
        for (std::size_t li = 0; li < layers_.size(); ++li) {
            if (li == encoder_layers_) {
                const VectorT<T> ctx = h.rowwise().mean();
                MatrixT<T> joined(2 * h.rows(), n);
                joined.topRows(h.rows()) = h;
                joined.bottomRows(h.rows()) = ctx.replicate(1, n);
                h = std::move(joined);
            }
            const Layer& l = layers_[li];
            Eigen::Map<const MatrixT<T>> w(params.data() + l.offset, static_cast<Eigen::Index>(l.out),
                                           static_cast<Eigen::Index>(l.in));
            Eigen::Map<const VectorT<T>> b(params.data() + l.offset + l.in * l.out, static_cast<Eigen::Index>(l.out));
            MatrixT<T> z = w * h;
            z.colwise() += b;
            if (tape) {
                if constexpr (std::is_same_v<T, double>) {
                    tape->inputs.push_back(h);
                    tape->pre.push_back(z);
                }
            }
            h = l.activated ? detail::activate<T>(z, shape_.activation) : std::move(z);
        }
        NetOutput<T> out;
        const auto dim = static_cast<Eigen::Index>(shape_.dim());
        out.mean = h.topRows(dim);
        Eigen::Index row = dim;
        if (shape_.uncertainty_head) out.log_var = h.row(row++).transpose();
        if (shape_.variance_head) out.var_logit = h.row(row++).transpose();
        return out;
    }

    Matrix layer_backward(std::size_t li, const Tape& tape, const Matrix& g_out, std::span<double> grad) const {
        const Layer& l = layers_[li];
        Matrix gz = g_out;
        if (l.activated) gz = gz.cwiseProduct(detail::activate_grad<double>(tape.pre[li], shape_.activation));
        Eigen::Map<Matrix> gw(grad.data() + l.offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
        Eigen::Map<Vector> gb(grad.data() + l.offset + l.in * l.out, static_cast<Eigen::Index>(l.out));
        gw.noalias() += gz * tape.inputs[li].transpose();
        gb += gz.rowwise().sum();
        Eigen::Map<const Matrix> w(params_.data() + l.offset, static_cast<Eigen::Index>(l.out),
                                   static_cast<Eigen::Index>(l.in));
        return w.transpose() * gz;
    }

    NetShape shape_;
    std::vector<Layer> layers_;
    std::size_t encoder_layers_ = 0;
    std::vector<double> params_;
};

/// Runs the net on a state and interprets its outputs: the mean head is
/// converted from the net's parameterization to x0, the uncertainty head
/// becomes var = dim * exp(log_var), and conditioned variables are replaced
/// by their clamped values with zero variance.
inline Prediction net_forward(const DenoiserNet& net, const ReasoningState& state, const Vector& positions,
                              const Paradigm& paradigm) {
    const Matrix tokens = net.shape().tokenizer.tokenize(state, positions);
    const NetOutput<double> out = net.forward_tokens<double>(std::span<const double>(net.params()), tokens);
    const auto n = static_cast<Eigen::Index>(state.n());
    const auto dim = static_cast<double>(state.dim());
    Prediction pred;
    pred.x0_mean = Matrix(n, static_cast<Eigen::Index>(state.dim()));
    pred.var = Vector::Zero(n);
    if (net.shape().variance_head) pred.var_interp = Vector::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (state.is_conditioned(static_cast<std::size_t>(i))) {
            pred.x0_mean.row(i) = state.values().row(i);
            continue;
        }
        const Conversion cv = conversion(coefficients(paradigm, state.levels()(i)), net.shape().kind, PredictionKind::X0);
        pred.x0_mean.row(i) = cv.pred_scale * out.mean.col(i).transpose() + cv.xt_scale * state.values().row(i);
        if (net.shape().uncertainty_head) pred.var(i) = dim * std::exp(out.log_var(i));
        if (net.shape().variance_head) (*pred.var_interp)(i) = detail::sigmoid(out.var_logit(i));
    }
    return pred;
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { Mse, Nll, Vlb, Cosine };

struct LossTerm {
    LossKind kind = LossKind::Mse;
    double weight = 1.0;
    PredictionKind target = PredictionKind::Epsilon;
};

struct LossSpec {
    std::vector<LossTerm> terms;

    void validate(const Paradigm& paradigm, const NetShape* shape = nullptr) const {
        bool positive = false;
        for (const LossTerm& t : terms) {
            if (!(t.weight >= 0.0)) throw Error("loss weights must be >= 0");
            positive = positive || t.weight > 0.0;
            if (t.kind == LossKind::Vlb && !paradigm.is_discrete())
                throw Error("vlb loss requires the ddpm-discrete paradigm");
            if (t.kind == LossKind::Cosine && t.target != PredictionKind::U)
                throw Error("cosine loss requires target parameterization u");
            if (t.kind == LossKind::Cosine && !paradigm.has_derivatives())
                throw Error("cosine loss on velocity u requires a flow paradigm");
            if (t.kind == LossKind::Mse && t.target == PredictionKind::U && !paradigm.has_derivatives())
                throw Error("u target requires a flow paradigm");
            if (shape && t.kind == LossKind::Nll && !shape->uncertainty_head)
                throw Error("nll loss requires the uncertainty head");
            if (shape && t.kind == LossKind::Vlb && !shape->variance_head)
                throw Error("vlb loss requires the learned-variance head");
        }
        if (!positive) throw Error("loss spec needs at least one term with positive weight");
    }
};

inline constexpr double kNllVarianceFloor = 1e-6;

/// Loss value plus gradients with respect to the raw net outputs.
template <typename T>
struct LossResult {
    T total = T(0);
    std::vector<T> terms;       // unweighted value per LossSpec entry
    MatrixT<T> grad_mean;       // dim x n
    VectorT<T> grad_log_var;    // n (empty without head)
    VectorT<T> grad_var_logit;  // n (empty without head)
};

/// Weighted sum of the loss terms for one state.
///
/// - mse: mean squared error in the term's parameterization, targets derived
///   from (x0, eps, t).
/// - nll: Gaussian NLL of x0 under N(x0-hat, sigma^2 I), sigma^2 from the
///   uncertainty head floored at kNllVarianceFloor, averaged per scalar dim.
/// - vlb: KL between the discrete-chain posterior and the model posterior
///   whose variance interpolates log beta and log beta-tilde; the mean is
///   treated as a constant, so only the variance head receives gradient.
/// - cosine: mean of 1 - cos(u-hat, u).
///
/// Conditioned variables are excluded everywhere, as are level-0 variables
/// from vlb. `vlb_mean` optionally supplies a detached mean head for vlb
/// (finite differences use it to honour the stop-gradient).
template <typename T>
LossResult<T> compute_loss(const NetOutput<T>& out, PredictionKind net_kind, const Matrix& target_x0,
                           const Matrix& target_eps, const Paradigm& paradigm, const Vector& levels,
                           const std::vector<bool>& conditioned, const LossSpec& spec,
                           const Matrix* vlb_mean = nullptr) {
    const auto n = out.mean.cols();
    const auto dim = out.mean.rows();
    if (target_x0.rows() != n || target_x0.cols() != dim || target_eps.rows() != n || target_eps.cols() != dim ||
        levels.size() != n || static_cast<Eigen::Index>(conditioned.size()) != n)
        throw Error("compute_loss: shape mismatch");
    spec.validate(paradigm);

    LossResult<T> res;
    res.grad_mean = MatrixT<T>::Zero(dim, n);
    if (out.log_var.size() == n) res.grad_log_var = VectorT<T>::Zero(n);
    if (out.var_logit.size() == n) res.grad_var_logit = VectorT<T>::Zero(n);

    const Matrix x_t = forward_diffuse(paradigm, target_x0, target_eps, levels);
    std::vector<Coeffs> coeffs;
    coeffs.reserve(static_cast<std::size_t>(n));
    Eigen::Index active = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        coeffs.push_back(coefficients(paradigm, levels(i)));
        if (!conditioned[static_cast<std::size_t>(i)]) ++active;
    }
    auto is_active = [&](Eigen::Index i) { return !conditioned[static_cast<std::size_t>(i)]; };
    const T scalars = T(std::max<Eigen::Index>(1, active * dim));

    // Prediction of variable i converted to `kind`, and the chain-rule scale.
    auto converted = [&](Eigen::Index i, PredictionKind kind, Conversion& cv) {
        cv = conversion(coeffs[static_cast<std::size_t>(i)], net_kind, kind);
        VectorT<T> p = T(cv.pred_scale) * out.mean.col(i) + T(cv.xt_scale) * x_t.row(i).transpose().template cast<T>();
        return p;
    };

    for (const LossTerm& term : spec.terms) {
        T value = T(0);
        const T w = T(term.weight);
        switch (term.kind) {
            case LossKind::Mse: {
                const Matrix target = target_of_kind(paradigm, term.target, target_x0, target_eps, levels);
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (!is_active(i)) continue;
                    Conversion cv;
                    const VectorT<T> diff = converted(i, term.target, cv) - target.row(i).transpose().template cast<T>();
                    value += diff.squaredNorm();
                    res.grad_mean.col(i) += w * T(2) * T(cv.pred_scale) * diff / scalars;
                }
                value /= scalars;
                break;
            }
            case LossKind::Nll: {
                if (out.log_var.size() != n) throw Error("nll loss requires the uncertainty head");
                const T log_2pi = T(std::log(2.0 * std::numbers::pi));
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (!is_active(i)) continue;
                    Conversion cv;
                    const VectorT<T> r = converted(i, PredictionKind::X0, cv) - target_x0.row(i).transpose().template cast<T>();
                    const T raw_var = std::exp(out.log_var(i));
                    const bool floored = raw_var < T(kNllVarianceFloor);
                    const T var = floored ? T(kNllVarianceFloor) : raw_var;
                    const T r2 = r.squaredNorm();
                    value += T(0.5) * (T(dim) * (log_2pi + std::log(var)) + r2 / var);
                    res.grad_mean.col(i) += w * T(cv.pred_scale) * r / var / scalars;
                    if (!floored) res.grad_log_var(i) += w * T(0.5) * (T(dim) - r2 / var) / scalars;
                }
                value /= scalars;
                break;
            }
            case LossKind::Vlb: {
                if (out.var_logit.size() != n) throw Error("vlb loss requires the learned-variance head");
                Eigen::Index counted = 0;
                T sum = T(0);
                std::vector<std::pair<Eigen::Index, T>> dvalue;
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (!is_active(i)) continue;
                    const auto step = paradigm.grid_index(levels(i));
                    if (!step) throw Error("vlb loss requires levels on the ddpm-discrete grid");
                    if (*step == 0) continue;
                    ++counted;
                    const auto q = paradigm.posterior(*step);
                    Conversion cv;
                    VectorT<T> x0_hat = converted(i, PredictionKind::X0, cv);
                    if (vlb_mean)
                        x0_hat = (cv.pred_scale * vlb_mean->col(i) + cv.xt_scale * x_t.row(i).transpose()).template cast<T>();
                    const T delta2 = T(q.coef_x0 * q.coef_x0) *
                                     (x0_hat - target_x0.row(i).transpose().template cast<T>()).squaredNorm();
                    const T log_beta = T(std::log(paradigm.beta(*step)));
                    const T log_true = T(q.log_variance_clipped);
                    const T true_var = T(std::exp(q.log_variance_clipped));
                    const T h = detail::sigmoid(out.var_logit(i));
                    const T log_var = h * log_beta + (T(1) - h) * log_true;
                    const T var = std::exp(log_var);
                    sum += T(0.5) * (T(dim) * (log_var - log_true + true_var / var - T(1)) + delta2 / var);
                    const T d_logvar = T(0.5) * (T(dim) - (T(dim) * true_var + delta2) / var);
                    dvalue.emplace_back(i, d_logvar * (log_beta - log_true) * h * (T(1) - h));
                }
                const T denom = T(std::max<Eigen::Index>(1, counted * dim));
                value = sum / denom;
                for (auto [i, g] : dvalue) res.grad_var_logit(i) += w * g / denom;
                break;
            }
            case LossKind::Cosine: {
                const Matrix target = target_of_kind(paradigm, PredictionKind::U, target_x0, target_eps, levels);
                const T count = T(std::max<Eigen::Index>(1, active));
                for (Eigen::Index i = 0; i < n; ++i) {
                    if (!is_active(i)) continue;
                    Conversion cv;
                    const VectorT<T> u_hat = converted(i, PredictionKind::U, cv);
                    const VectorT<T> u = target.row(i).transpose().template cast<T>();
                    const T nh = u_hat.norm();
                    const T nu = u.norm();
                    if (nh * nu < T(1e-12)) {
                        value += T(1);
                        continue;
                    }
                    const T cosine = u_hat.dot(u) / (nh * nu);
                    value += T(1) - cosine;
                    const VectorT<T> dcos = u / (nh * nu) - cosine * u_hat / (nh * nh);
                    res.grad_mean.col(i) -= w * T(cv.pred_scale) * dcos / count;
                }
                value /= count;
                break;
            }
        }
        res.terms.push_back(value);
        res.total += w * value;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Gradients and training

/// One training example: clean data, noise, levels and mask for n variables.
struct TrainingExample {
    Matrix x0;
    Matrix eps;
    Vector levels;
    std::vector<bool> conditioned;
    Vector positions;
};

namespace detail {

inline Matrix example_tokens(const NetShape& shape, const Paradigm& paradigm, const TrainingExample& ex) {
    const Matrix x_t = forward_diffuse(paradigm, ex.x0, ex.eps, ex.levels);
    return shape.tokenizer.tokenize(make_state(x_t, ex.levels, ex.conditioned), ex.positions);
}

template <typename T>
T batch_loss(const DenoiserNet& net, std::span<const T> params, const Paradigm& paradigm,
             const std::vector<TrainingExample>& batch, const std::vector<Matrix>& tokens, const LossSpec& spec,
             const std::vector<Matrix>* vlb_means = nullptr) {
    T total = T(0);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const NetOutput<T> out = net.forward_tokens<T>(params, tokens[b]);
        total += compute_loss<T>(out, net.shape().kind, batch[b].x0, batch[b].eps, paradigm, batch[b].levels,
                                 batch[b].conditioned, spec, vlb_means ? &(*vlb_means)[b] : nullptr)
                     .total;
    }
    return total / T(batch.size());
}

}  // namespace detail

/// Mean loss over a batch and its gradient with respect to every parameter.
inline double loss_and_gradient(const DenoiserNet& net, const Paradigm& paradigm, const std::vector<TrainingExample>& batch,
                                const LossSpec& spec, std::vector<double>& grad) {
    if (batch.empty()) throw Error("batch must be nonempty");
    grad.assign(net.param_count(), 0.0);
    double total = 0.0;
    DenoiserNet::Tape tape;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const TrainingExample& ex : batch) {
        const Matrix tokens = detail::example_tokens(net.shape(), paradigm, ex);
        const NetOutput<double> out = net.forward_taped(tokens, tape);
        const LossResult<double> loss =
            compute_loss<double>(out, net.shape().kind, ex.x0, ex.eps, paradigm, ex.levels, ex.conditioned, spec);
        total += loss.total;
        const auto n = out.mean.cols();
        const auto dim = out.mean.rows();
        Matrix grad_out = Matrix::Zero(static_cast<Eigen::Index>(net.shape().output_width()), n);
        grad_out.topRows(dim) = loss.grad_mean * scale;
        Eigen::Index row = dim;
        if (net.shape().uncertainty_head) grad_out.row(row++) = loss.grad_log_var.transpose() * scale;
        if (net.shape().variance_head) grad_out.row(row++) = loss.grad_var_logit.transpose() * scale;
        net.backward(tape, grad_out, std::span<double>(grad));
    }
    return total * scale;
}

/// Largest relative error between analytic gradients and central finite
/// differences (h = 1e-5, evaluated in long double) over up to 200 randomly
/// chosen parameters. The denominator is max(|g|, 1e-8). The vlb mean input is
/// held at its unperturbed value to match the stop-gradient.
inline double gradient_check(const DenoiserNet& net, const Paradigm& paradigm, const std::vector<TrainingExample>& batch,
                             const LossSpec& spec, std::uint64_t seed = 0, std::size_t max_params = 200) {
    if (batch.empty()) throw Error("gradient_check requires a nonempty batch");
    std::vector<double> analytic;
    loss_and_gradient(net, paradigm, batch, spec, analytic);

    std::vector<Matrix> tokens;
    std::vector<Matrix> means;
    for (const TrainingExample& ex : batch) {
        tokens.push_back(detail::example_tokens(net.shape(), paradigm, ex));
        means.push_back(net.forward_tokens<double>(std::span<const double>(net.params()), tokens.back()).mean);
    }

    std::vector<std::size_t> idx(net.param_count());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    if (idx.size() > max_params) idx.resize(max_params);

    std::vector<long double> params(net.params().begin(), net.params().end());
    constexpr long double h = 1e-5L;
    double worst = 0.0;
    for (std::size_t p : idx) {
        const long double saved = params[p];
        params[p] = saved + h;
        const long double up = detail::batch_loss<long double>(net, params, paradigm, batch, tokens, spec, &means);
        params[p] = saved - h;
        const long double down = detail::batch_loss<long double>(net, params, paradigm, batch, tokens, spec, &means);
        params[p] = saved;
        const double numeric = static_cast<double>((up - down) / (2.0L * h));
        const double err = std::abs(numeric - analytic[p]) / std::max(std::abs(analytic[p]), 1e-8);
        worst = std::max(worst, err);
    }
    return worst;
}

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 1e-3;
    std::size_t steps = 1000;
    std::size_t batch = 32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Source of clean training data for a task.
struct TrainTask {
    std::size_t n = 1;
    std::size_t dim = 1;
    Vector positions;
    std::function<Matrix(Rng&)> draw;
};

struct TrainResult {
    DenoiserNet net;
    std::vector<double> losses;
};

/// Levels used for training. DDPM levels are snapped to grid steps >= 1;
/// continuous levels stay inside [1e-4, 1 - 1e-4] so every parameterization
/// is invertible.
inline Vector training_levels(const TSampler& sampler, const Paradigm& paradigm, std::size_t n, Rng& rng) {
    Vector t = sample_training_levels(sampler, n, rng);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        if (paradigm.is_discrete()) {
            const double d = static_cast<double>(paradigm.d_steps());
            t(i) = std::clamp(std::round(t(i) * d), 1.0, d) / d;
        } else {
            t(i) = std::clamp(t(i), 1e-4, 1.0 - 1e-4);
        }
    }
    return t;
}

inline TrainResult train(DenoiserNet net, const TrainTask& task, const Paradigm& paradigm, const TSampler& sampler,
                         const LossSpec& spec, const OptimizerConfig& opt, std::uint64_t seed) {
    spec.validate(paradigm, &net.shape());
    if (opt.batch < 1) throw Error("batch size must be >= 1");
    if (!(opt.lr >= 0.0)) throw Error("learning rate must be >= 0");
    if (task.dim != net.shape().dim()) throw Error("task dim does not match the net");

    Rng rng(seed);
    std::vector<double> grad;
    std::vector<double> m1(net.param_count(), 0.0);
    std::vector<double> m2(net.param_count(), 0.0);
    TrainResult result;
    result.losses.reserve(opt.steps);
    std::vector<TrainingExample> batch(opt.batch);
    const std::vector<bool> none(task.n, false);

    for (std::size_t step = 0; step < opt.steps; ++step) {
        for (TrainingExample& ex : batch) {
            ex.x0 = task.draw(rng);
            ex.levels = training_levels(sampler, paradigm, task.n, rng);
            ex.eps = Matrix(static_cast<Eigen::Index>(task.n), static_cast<Eigen::Index>(task.dim));
            for (Eigen::Index j = 0; j < ex.eps.size(); ++j) ex.eps.data()[j] = standard_normal(rng);
            ex.conditioned = none;
            ex.positions = task.positions;
        }
        const double loss = loss_and_gradient(net, paradigm, batch, spec, grad);
        if (!std::isfinite(loss)) throw Error("non-finite loss at training step " + std::to_string(step));
        result.losses.push_back(loss);

        auto& p = net.params();
        if (opt.kind == OptimizerKind::Sgd) {
            for (std::size_t j = 0; j < p.size(); ++j) p[j] -= opt.lr * grad[j];
        } else {
            const double t = static_cast<double>(step + 1);
            const double c1 = 1.0 - std::pow(opt.beta1, t);
            const double c2 = 1.0 - std::pow(opt.beta2, t);
            for (std::size_t j = 0; j < p.size(); ++j) {
                m1[j] = opt.beta1 * m1[j] + (1.0 - opt.beta1) * grad[j];
                m2[j] = opt.beta2 * m2[j] + (1.0 - opt.beta2) * grad[j] * grad[j];
                p[j] -= opt.lr * (m1[j] / c1) / (std::sqrt(m2[j] / c2) + opt.epsilon);
            }
        }
    }
    result.net = std::move(net);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian): "SRNN1", then uint32 fields
//   dim, level_dims, position_dims, prediction kind, flags
//   (bit0 uncertainty head, bit1 variance head, bit2 identity activation),
//   encoder width count, encoder widths (token width first),
//   head width count, head widths (output width last),
// followed by the parameters as float64 in layer order.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const std::array<unsigned char, 4> b{static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                         static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw Error("checkpoint truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int s = 0; s < 64; s += 8) os.put(static_cast<char>((bits >> s) & 0xff));
}

inline double get_f64(std::istream& is) {
    std::array<unsigned char, 8> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), 8)) throw Error("checkpoint truncated");
    std::uint64_t bits = 0;
    for (int s = 7; s >= 0; --s) bits = (bits << 8) | b[static_cast<std::size_t>(s)];
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

inline void save_net(const DenoiserNet& net, std::ostream& os) {
    const NetShape& s = net.shape();
    os.write("SRNN1", 5);
    detail::put_u32(os, static_cast<std::uint32_t>(s.tokenizer.dim));
    detail::put_u32(os, static_cast<std::uint32_t>(s.tokenizer.level_dims));
    detail::put_u32(os, static_cast<std::uint32_t>(s.tokenizer.position_dims));
    detail::put_u32(os, static_cast<std::uint32_t>(s.kind));
    detail::put_u32(os, (s.uncertainty_head ? 1u : 0u) | (s.variance_head ? 2u : 0u) |
                            (s.activation == Activation::Identity ? 4u : 0u));
    for (const auto& widths : {s.encoder_widths(), s.head_widths()}) {
        detail::put_u32(os, static_cast<std::uint32_t>(widths.size()));
        for (std::size_t w : widths) detail::put_u32(os, static_cast<std::uint32_t>(w));
    }
    for (double p : net.params()) detail::put_f64(os, p);
    if (!os) throw Error("failed to write checkpoint");
}

inline DenoiserNet load_net(std::istream& is) {
    char magic[5];
    if (!is.read(magic, 5) || std::string_view(magic, 5) != "SRNN1") throw Error("not an SRNN1 checkpoint");
    NetShape s;
    s.tokenizer.dim = detail::get_u32(is);
    s.tokenizer.level_dims = detail::get_u32(is);
    s.tokenizer.position_dims = detail::get_u32(is);
    const std::uint32_t kind = detail::get_u32(is);
    if (kind > 3) throw Error("checkpoint has an unknown prediction kind");
    s.kind = static_cast<PredictionKind>(kind);
    const std::uint32_t flags = detail::get_u32(is);
    s.uncertainty_head = flags & 1u;
    s.variance_head = flags & 2u;
    s.activation = (flags & 4u) ? Activation::Identity : Activation::Silu;
    auto read_widths = [&] {
        const std::uint32_t count = detail::get_u32(is);
        if (count < 1 || count > 1024) throw Error("checkpoint has an invalid layer count");
        std::vector<std::size_t> w(count);
        for (auto& x : w) x = detail::get_u32(is);
        return w;
    };
    const auto enc = read_widths();
    const auto head = read_widths();
    if (enc.front() != s.tokenizer.width()) throw Error("checkpoint encoder input width mismatch");
    s.encoder.assign(enc.begin() + 1, enc.end());
    if (head.size() < 2) throw Error("checkpoint head chain too short");
    s.head.assign(head.begin() + 1, head.end() - 1);
    DenoiserNet net(s);
    if (net.shape().head_widths() != head) throw Error("checkpoint head widths are inconsistent");
    for (double& p : net.params()) p = detail::get_f64(is);
    if (!std::all_of(net.params().begin(), net.params().end(), [](double v) { return std::isfinite(v); }))
        throw Error("checkpoint contains non-finite parameters");
    return net;
}

inline void save_net(const DenoiserNet& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    save_net(net, os);
}

inline DenoiserNet load_net(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open checkpoint " + path);
    return load_net(is);
}

}  // namespace sre

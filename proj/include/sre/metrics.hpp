#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "sre/core.hpp"
#include "sre/error.hpp"
#include "sre/oracle.hpp"
#include "sre/schedule.hpp"
#include "sre/tasks.hpp"

namespace sre {

/// Sample-quality metrics. Fields that do not apply to a task are empty.
struct Metrics {
    double moment_error = 0.0;
    double nll = 0.0;
    std::optional<double> validity_rate;
    std::optional<double> uncertainty_calibration;
};

namespace detail {

/// Average ranks (1-based) with ties sharing their mean rank.
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace detail

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw Error("spearman needs two equal-length series of size >= 2");
    return detail::pearson(detail::ranks(x), detail::ranks(y));
}

/// Metrics of final samples against the task's true distribution. When the
/// samples carry conditioned variables (taken from the first sample), moments
/// and nll cover the free coordinates under the exact conditional
/// distribution. `predictions`, when given, pairs each sample with a
/// prediction whose var is compared (by rank correlation) to the squared
/// error between its x0 estimate and the final sample.
inline Metrics evaluate_samples(const std::vector<ReasoningState>& samples, const TaskDomain& task,
                                const std::vector<Prediction>* predictions = nullptr) {
    if (samples.size() < 2) throw Error("evaluate_samples needs at least 2 samples");
    const double count = static_cast<double>(samples.size());

    std::vector<bool> observed(task.n * task.dim, false);
    for (const auto& s : samples)
        if (s.n() != task.n || s.dim() != task.dim) throw Error("sample shape does not match the task");
    for (std::size_t i = 0; i < task.n; ++i)
        for (std::size_t j = 0; j < task.dim; ++j) observed[i * task.dim + j] = samples.front().is_conditioned(i);
    std::vector<Eigen::Index> free;
    for (std::size_t q = 0; q < observed.size(); ++q)
        if (!observed[q]) free.push_back(static_cast<Eigen::Index>(q));
    if (free.empty()) throw Error("evaluate_samples: every variable is conditioned");
    const GaussianMixture target = condition_mixture(task.mixture, observed, detail::flatten(samples.front().values()));
    const auto D = static_cast<Eigen::Index>(free.size());

    std::vector<Vector> flat;
    flat.reserve(samples.size());
    for (const auto& s : samples) flat.push_back(detail::flatten(s.values())(free));
    Vector mean = Vector::Zero(D);
    for (const Vector& x : flat) mean += x;
    mean /= count;
    Matrix cov = Matrix::Zero(D, D);
    for (const Vector& x : flat) cov += (x - mean) * (x - mean).transpose();
    cov /= count - 1.0;

    Metrics m;
    m.moment_error = std::max((mean - target.mean()).cwiseAbs().maxCoeff(), (cov - target.covariance()).cwiseAbs().maxCoeff());
    double nll = 0.0;
    for (const Vector& x : flat) nll -= gmm_log_density(target, x);
    m.nll = nll / count;

    if (task.kind == TaskKind::LatinSquare) {
        std::size_t valid = 0;
        for (const auto& s : samples) valid += decode_board(s, task.order).valid ? 1 : 0;
        m.validity_rate = static_cast<double>(valid) / count;
    }
    if (predictions) {
        if (predictions->size() != samples.size()) throw Error("one prediction per sample is required");
        std::vector<double> var, err;
        for (std::size_t s = 0; s < samples.size(); ++s) {
            const Prediction& p = (*predictions)[s];
            for (std::size_t i = 0; i < task.n; ++i) {
                if (samples[s].is_conditioned(i)) continue;
                const auto r = static_cast<Eigen::Index>(i);
                var.push_back(p.var(r));
                err.push_back((p.x0_mean.row(r) - samples[s].values().row(r)).squaredNorm());
            }
        }
        if (var.size() >= 2) m.uncertainty_calibration = spearman(var, err);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Images

/// 8-bit image, grayscale (channels = 1) or RGB (channels = 3).
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;
};

/// Writes P5 for grayscale or P6 for RGB images, max value 255.
inline void write_pnm(const Image& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    os << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!os) throw Error("failed writing " + path);
}

/// Grid of cells (rows x cols) of gray intensities, each cell upscaled to
/// scale x scale pixels.
inline Image cells_image(const Matrix& gray, std::size_t scale) {
    Image img;
    img.width = static_cast<std::size_t>(gray.cols()) * scale;
    img.height = static_cast<std::size_t>(gray.rows()) * scale;
    img.pixels.resize(img.width * img.height);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const double g = std::clamp(gray(static_cast<Eigen::Index>(y / scale), static_cast<Eigen::Index>(x / scale)), 0.0, 255.0);
            img.pixels[y * img.width + x] = static_cast<std::uint8_t>(std::lround(g));
        }
    return img;
}

/// Value in [-1, 1] to gray in [0, 255]; 0 maps to mid-gray.
inline double value_gray(double v) { return (std::clamp(v, -1.0, 1.0) + 1.0) * 127.5; }

/// Board render: order x order cells at 32x scale.
inline Image render_board(const ReasoningState& state, std::size_t order) {
    if (state.n() != order * order || state.dim() != 1) throw Error("render_board: state is not an order^2 board");
    const auto k = static_cast<Eigen::Index>(order);
    Matrix gray(k, k);
    for (Eigen::Index r = 0; r < k; ++r)
        for (Eigen::Index c = 0; c < k; ++c) gray(r, c) = value_gray(state.values()(r * k + c, 0));
    return cells_image(gray, 32);
}

/// Generic state render: one row per variable, one cell per scalar dim.
inline Image render_state(const ReasoningState& state, std::size_t scale = 32) {
    return cells_image(state.values().unaryExpr([](double v) { return value_gray(v); }), scale);
}

/// Schedule heat map: one row per variable, one column per schedule column;
/// level 1 is black and level 0 white.
inline Image render_schedule(const ScheduleMatrix& T, std::size_t scale = 8) {
    return cells_image(T.levels.unaryExpr([](double t) { return (1.0 - t) * 255.0; }), scale);
}

}  // namespace sre

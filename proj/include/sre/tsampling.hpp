#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "sre/core.hpp"
#include "sre/error.hpp"
#include "sre/rng.hpp"

namespace sre {

enum class TSamplerKind { IndependentUniform, UniformTbar, SharedScalar };
enum class ScalarReweighter { Uniform, LogitNormal };

/// Training-time noise-level sampler for a set of variables.
struct TSampler {
    TSamplerKind kind = TSamplerKind::IndependentUniform;
    ScalarReweighter reweighter = ScalarReweighter::Uniform;
    double m = 0.0;
    double s = 1.0;

    void validate() const {
        if (reweighter == ScalarReweighter::LogitNormal && !(s > 0.0)) throw Error("logit-normal requires s > 0");
    }

    /// One scalar level from the reweighter.
    double scalar(Rng& rng) const {
        if (reweighter == ScalarReweighter::Uniform) return uniform01(rng);
        const double z = m + s * standard_normal(rng);
        return 1.0 / (1.0 + std::exp(-z));
    }
};

/// Levels given a mean level t-bar: each t_i ~ U(max(0, 2 t-bar - 1), min(1, 2 t-bar)),
/// an interval centred on t-bar, so E[t_i | t-bar] = t-bar.
inline Vector levels_given_tbar(double tbar, std::size_t n, Rng& rng) {
    const double lo = std::max(0.0, 2.0 * tbar - 1.0);
    const double hi = std::min(1.0, 2.0 * tbar);
    Vector t(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const double u = uniform01(rng);
        t(static_cast<Eigen::Index>(i)) = std::clamp(lo + (hi - lo) * u, 0.0, 1.0);
    }
    return t;
}

inline Vector sample_training_levels(const TSampler& sampler, std::size_t n, Rng& rng) {
    if (n < 1) throw Error("sample_training_levels requires n >= 1");
    sampler.validate();
    Vector t(static_cast<Eigen::Index>(n));
    switch (sampler.kind) {
        case TSamplerKind::IndependentUniform:
            for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = sampler.scalar(rng);
            break;
        case TSamplerKind::UniformTbar:
            t = levels_given_tbar(sampler.scalar(rng), n, rng);
            break;
        case TSamplerKind::SharedScalar:
            t.setConstant(sampler.scalar(rng));
            break;
    }
    return t.cwiseMax(0.0).cwiseMin(1.0);
}

}  // namespace sre

#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sre/core.hpp"
#include "sre/error.hpp"
#include "sre/metrics.hpp"
#include "sre/sampler.hpp"
#include "sre/schedule.hpp"

namespace sre::io {

/// Shortest text that parses back to the same double.
inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open " + path + " for writing");
    return os;
}

/// One row per variable: levels for every schedule column.
inline void write_schedule_csv(const ScheduleMatrix& T, const std::string& path) {
    auto os = open_out(path);
    os << "variable";
    for (Eigen::Index c = 0; c < T.levels.cols(); ++c) os << ",col" << c;
    os << '\n';
    for (Eigen::Index r = 0; r < T.levels.rows(); ++r) {
        os << r;
        for (Eigen::Index c = 0; c < T.levels.cols(); ++c) os << ',' << fmt(T.levels(r, c));
        os << '\n';
    }
}

/// One row per (chain, variable): chain,variable,value_0..value_{dim-1}.
inline void write_samples_csv(const std::vector<ReasoningState>& samples, const std::string& path) {
    auto os = open_out(path);
    const std::size_t dim = samples.empty() ? 0 : samples.front().dim();
    os << "chain,variable";
    for (std::size_t j = 0; j < dim; ++j) os << ",value_" << j;
    os << '\n';
    for (std::size_t c = 0; c < samples.size(); ++c) {
        const ReasoningState& s = samples[c];
        for (std::size_t i = 0; i < s.n(); ++i) {
            os << c << ',' << i;
            for (std::size_t j = 0; j < dim; ++j)
                os << ',' << fmt(s.values()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
            os << '\n';
        }
    }
}

/// One row per snapshot per variable: column,variable,level,value_0..
inline void write_trajectory_csv(const Trajectory& traj, const std::string& path) {
    auto os = open_out(path);
    const std::size_t dim = traj.empty() ? 0 : traj.front().state.dim();
    os << "column,variable,level";
    for (std::size_t j = 0; j < dim; ++j) os << ",value_" << j;
    os << '\n';
    for (const Snapshot& snap : traj) {
        for (std::size_t i = 0; i < snap.state.n(); ++i) {
            os << snap.column << ',' << i << ',' << fmt(snap.state.level(i));
            for (std::size_t j = 0; j < dim; ++j)
                os << ',' << fmt(snap.state.values()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
            os << '\n';
        }
    }
}

/// One row per (chain, variable): chain,variable,var,x0_0..
inline void write_predictions_csv(const std::vector<Prediction>& preds, const std::string& path) {
    auto os = open_out(path);
    const auto dim = preds.empty() ? 0 : preds.front().x0_mean.cols();
    os << "chain,variable,var";
    for (Eigen::Index j = 0; j < dim; ++j) os << ",x0_" << j;
    os << '\n';
    for (std::size_t c = 0; c < preds.size(); ++c) {
        for (Eigen::Index i = 0; i < preds[c].x0_mean.rows(); ++i) {
            os << c << ',' << i << ',' << fmt(preds[c].var(i));
            for (Eigen::Index j = 0; j < dim; ++j) os << ',' << fmt(preds[c].x0_mean(i, j));
            os << '\n';
        }
    }
}

inline void write_loss_trace_csv(const std::vector<double>& losses, const std::string& path) {
    auto os = open_out(path);
    os << "step,loss\n";
    for (std::size_t s = 0; s < losses.size(); ++s) os << s << ',' << fmt(losses[s]) << '\n';
}

namespace detail {

/// Rows of a numeric CSV with a header line, grouped by the first column
/// (chain) and indexed by the second (variable).
inline std::vector<std::vector<std::vector<double>>> read_grouped_csv(const std::string& path, std::size_t n) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open " + path);
    std::string line;
    std::getline(is, line);  // header
    std::vector<std::vector<std::vector<double>>> groups;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<double> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                cells.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw Error(path + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
            }
        }
        if (cells.size() < 3) throw Error(path + ":" + std::to_string(lineno) + ": too few columns");
        const auto chain = static_cast<std::size_t>(cells[0]);
        const auto var = static_cast<std::size_t>(cells[1]);
        if (var >= n) throw Error(path + ":" + std::to_string(lineno) + ": variable index out of range");
        if (chain >= groups.size()) groups.resize(chain + 1, std::vector<std::vector<double>>(n));
        groups[chain][var].assign(cells.begin() + 2, cells.end());
    }
    return groups;
}

}  // namespace detail

/// Reads samples written by write_samples_csv as clean states. `conditioned`
/// marks clamped variables (excluded from calibration).
inline std::vector<ReasoningState> read_samples_csv(const std::string& path, std::size_t n, std::size_t dim,
                                                    const std::vector<bool>& conditioned) {
    std::vector<ReasoningState> out;
    for (const auto& rows : detail::read_grouped_csv(path, n)) {
        Matrix values(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
        for (std::size_t i = 0; i < n; ++i) {
            if (rows[i].size() != dim) throw Error(path + ": sample row has the wrong width");
            for (std::size_t j = 0; j < dim; ++j) values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
        out.push_back(make_state(std::move(values), Vector::Zero(static_cast<Eigen::Index>(n)), conditioned));
    }
    return out;
}

inline std::vector<Prediction> read_predictions_csv(const std::string& path, std::size_t n, std::size_t dim) {
    std::vector<Prediction> out;
    for (const auto& rows : detail::read_grouped_csv(path, n)) {
        Prediction p;
        p.x0_mean = Matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
        p.var = Vector(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            if (rows[i].size() != dim + 1) throw Error(path + ": prediction row has the wrong width");
            p.var(static_cast<Eigen::Index>(i)) = rows[i][0];
            for (std::size_t j = 0; j < dim; ++j)
                p.x0_mean(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j + 1];
        }
        out.push_back(std::move(p));
    }
    return out;
}

inline nlohmann::json metrics_json(const Metrics& m) {
    nlohmann::json j;
    j["moment_error"] = m.moment_error;
    j["nll"] = m.nll;
    j["validity_rate"] = m.validity_rate ? nlohmann::json(*m.validity_rate) : nlohmann::json(nullptr);
    j["uncertainty_calibration"] =
        m.uncertainty_calibration ? nlohmann::json(*m.uncertainty_calibration) : nlohmann::json(nullptr);
    return j;
}

inline void write_metrics_json(const Metrics& m, const std::string& path) {
    auto os = open_out(path);
    os << metrics_json(m).dump(2) << '\n';
}

}  // namespace sre::io

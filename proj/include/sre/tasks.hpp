#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "sre/core.hpp"
#include "sre/error.hpp"
#include "sre/oracle.hpp"

namespace sre {

enum class TaskKind { Gaussian, LatinSquare, Sequence, Mixture };

/// A data domain mapped onto n variables of width dim.
struct TaskDomain {
    std::string name;
    TaskKind kind = TaskKind::Mixture;
    std::size_t n = 0;
    std::size_t dim = 1;
    Vector positions;
    GaussianMixture mixture;
    std::optional<DependencyGraph> graph;
    std::size_t order = 0;  // board side length for Latin squares

    /// Clean sample reshaped as n x dim.
    Matrix draw(Rng& rng) const { return detail::unflatten(gmm_sample(mixture, rng), n, dim); }
};

using Board = std::vector<std::vector<int>>;

/// Digit g of an order-k board maps to 2g/(k-1) - 1, spanning [-1, 1].
inline double encode_digit(int g, std::size_t order) {
    return 2.0 * static_cast<double>(g) / static_cast<double>(order - 1) - 1.0;
}

inline int decode_digit(double v, std::size_t order) {
    const double g = (v + 1.0) * static_cast<double>(order - 1) / 2.0;
    return static_cast<int>(std::clamp(std::lround(g), 0L, static_cast<long>(order - 1)));
}

inline bool is_latin_square(const Board& board) {
    const std::size_t k = board.size();
    for (std::size_t r = 0; r < k; ++r) {
        std::vector<bool> row(k, false);
        std::vector<bool> col(k, false);
        for (std::size_t c = 0; c < k; ++c) {
            const int a = board[r][c];
            const int b = board[c][r];
            if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= k || static_cast<std::size_t>(b) >= k) return false;
            if (row[static_cast<std::size_t>(a)] || col[static_cast<std::size_t>(b)]) return false;
            row[static_cast<std::size_t>(a)] = col[static_cast<std::size_t>(b)] = true;
        }
    }
    return true;
}

/// All Latin squares of the given order, in lexicographic row-major order.
inline std::vector<Board> enumerate_latin_squares(std::size_t order) {
    std::vector<int> perm(order);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<std::vector<int>> rows;
    do rows.push_back(perm);
    while (std::next_permutation(perm.begin(), perm.end()));

    std::vector<Board> out;
    Board board;
    std::function<void()> extend = [&] {
        if (board.size() == order) {
            out.push_back(board);
            return;
        }
        for (const auto& row : rows) {
            bool ok = true;
            for (const auto& prev : board)
                for (std::size_t c = 0; c < order && ok; ++c) ok = prev[c] != row[c];
            if (!ok) continue;
            board.push_back(row);
            extend();
            board.pop_back();
        }
    };
    extend();
    return out;
}

inline Vector encode_board(const Board& board) {
    const std::size_t k = board.size();
    Vector v(static_cast<Eigen::Index>(k * k));
    for (std::size_t r = 0; r < k; ++r)
        for (std::size_t c = 0; c < k; ++c) v(static_cast<Eigen::Index>(r * k + c)) = encode_digit(board[r][c], k);
    return v;
}

/// One mixture component per valid board, centred on the encoded board with
/// covariance sigma^2 I and uniform weights. Cells are variables (dim 1) in
/// row-major order.
inline TaskDomain latin_square_mixture(std::size_t order, double sigma) {
    if (order != 2 && order != 3) throw Error("latin-square order must be 2 or 3");
    if (!(sigma > 0.0)) throw Error("latin-square sigma must be > 0");
    const auto boards = enumerate_latin_squares(order);
    const std::size_t n = order * order;
    std::vector<double> weights(boards.size(), 1.0 / static_cast<double>(boards.size()));
    std::vector<Vector> means;
    std::vector<Matrix> covs;
    for (const Board& b : boards) {
        means.push_back(encode_board(b));
        covs.push_back(sigma * sigma * Matrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
    }
    // Renormalize so the weights sum to one to machine precision.
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    for (double& w : weights) w /= total;

    TaskDomain task;
    task.name = "latin-square-" + std::to_string(order);
    task.kind = TaskKind::LatinSquare;
    task.n = n;
    task.dim = 1;
    task.order = order;
    task.positions = Vector::LinSpaced(static_cast<Eigen::Index>(n), 0.0, static_cast<double>(n - 1));
    task.mixture = GaussianMixture(std::move(weights), std::move(means), std::move(covs));
    return task;
}

struct DecodedBoard {
    Board digits;
    bool valid = false;
};

inline DecodedBoard decode_board(const ReasoningState& state, std::size_t order) {
    if (state.n() != order * order || state.dim() != 1)
        throw Error("decode_board: state must have order^2 scalar variables");
    DecodedBoard out;
    out.digits.assign(order, std::vector<int>(order, 0));
    for (std::size_t r = 0; r < order; ++r)
        for (std::size_t c = 0; c < order; ++c)
            out.digits[r][c] = decode_digit(state.values()(static_cast<Eigen::Index>(r * order + c), 0), order);
    out.valid = is_latin_square(out.digits);
    return out;
}

/// Stationary AR(1) sequence x_{s+1} = phi x_s + xi as one Gaussian over
/// `length` scalar frames, with a chain dependency graph.
inline TaskDomain sequence_task(std::size_t length, double phi) {
    if (!(std::abs(phi) < 1.0)) throw Error("sequence task requires |phi| < 1");
    if (length < 2) throw Error("sequence task requires length >= 2");
    const auto L = static_cast<Eigen::Index>(length);
    Matrix cov(L, L);
    for (Eigen::Index s = 0; s < L; ++s)
        for (Eigen::Index t = 0; t < L; ++t)
            cov(s, t) = std::pow(phi, static_cast<double>(std::abs(s - t))) / (1.0 - phi * phi);

    TaskDomain task;
    task.name = "sequence";
    task.kind = TaskKind::Sequence;
    task.n = length;
    task.dim = 1;
    task.positions = Vector::LinSpaced(L, 0.0, static_cast<double>(length - 1));
    task.mixture = GaussianMixture({1.0}, {Vector::Zero(L)}, {cov});
    DependencyGraph g{length, {}};
    for (std::size_t s = 0; s + 1 < length; ++s) g.edges.emplace_back(s, s + 1);
    task.graph = std::move(g);
    return task;
}

/// Single Gaussian over n scalar variables with standard deviation `scale`
/// and a common correlation rho.
inline TaskDomain gaussian_task(const Vector& mean, double rho, double scale = 1.0) {
    const auto n = mean.size();
    if (n < 1) throw Error("gaussian task needs at least one variable");
    if (!(scale > 0.0)) throw Error("gaussian task requires a positive scale");
    Matrix cov = Matrix::Constant(n, n, rho);
    cov.diagonal().setOnes();
    cov *= scale * scale;
    TaskDomain task;
    task.name = "gaussian";
    task.kind = TaskKind::Gaussian;
    task.n = static_cast<std::size_t>(n);
    task.dim = 1;
    task.positions = Vector::LinSpaced(n, 0.0, static_cast<double>(n - 1));
    task.mixture = GaussianMixture({1.0}, {mean}, {cov});
    return task;
}

inline TaskDomain mixture_task(GaussianMixture gmm, std::size_t n, std::size_t dim) {
    if (gmm.dim() != n * dim) throw Error("mixture dimension must equal n * dim");
    TaskDomain task;
    task.name = "mixture";
    task.kind = TaskKind::Mixture;
    task.n = n;
    task.dim = dim;
    task.positions = Vector::LinSpaced(static_cast<Eigen::Index>(n), 0.0, static_cast<double>(n - 1));
    task.mixture = std::move(gmm);
    return task;
}

}  // namespace sre

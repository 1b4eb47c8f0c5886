#include <doctest.h>

#include <numeric>

#include "sre/rng.hpp"
#include "sre/schedule.hpp"

using namespace sre;

namespace {

ScheduleSpec sequential(std::size_t d, double overlap, std::vector<std::size_t> order = {}) {
    ScheduleSpec s;
    s.kind = ScheduleKind::Sequential;
    s.d = d;
    s.overlap = overlap;
    s.order.order = std::move(order);
    return s;
}

ScheduleSpec parallel(std::size_t d) {
    ScheduleSpec s;
    s.d = d;
    return s;
}

Eigen::RowVectorXd row(std::initializer_list<double> v) {
    Eigen::RowVectorXd r(static_cast<Eigen::Index>(v.size()));
    std::copy(v.begin(), v.end(), r.data());
    return r;
}

ReasoningState levels_state(std::initializer_list<double> t) {
    Vector v(static_cast<Eigen::Index>(t.size()));
    std::copy(t.begin(), t.end(), v.data());
    return make_state(Matrix::Zero(v.size(), 1), v);
}

bool near(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    return a.size() == b.size() && (a - b).cwiseAbs().maxCoeff() <= 1e-12;
}

std::size_t first_below_one(const Matrix& L, Eigen::Index r) {
    for (Eigen::Index c = 0; c < L.cols(); ++c)
        if (L(r, c) < 1.0) return static_cast<std::size_t>(c);
    return static_cast<std::size_t>(L.cols());
}

std::size_t first_zero(const Matrix& L, Eigen::Index r) {
    for (Eigen::Index c = 0; c < L.cols(); ++c)
        if (L(r, c) == 0.0) return static_cast<std::size_t>(c);
    return static_cast<std::size_t>(L.cols());
}

}  // namespace

TEST_CASE("parallel ramp") {
    const auto T = build_schedule(parallel(4), 2, {false, false});
    CHECK(T.levels.row(0) == row({1, 0.75, 0.5, 0.25, 0}));
    CHECK(T.levels.row(1) == row({1, 0.75, 0.5, 0.25, 0}));
    CHECK(T.steps() == 4);
}

TEST_CASE("sequential examples") {
    const auto T = build_schedule(sequential(4, 0.0, {0, 1}), 2, {false, false});
    CHECK(T.levels.row(0) == row({1, 0.5, 0, 0, 0}));
    CHECK(T.levels.row(1) == row({1, 1, 1, 0.5, 0}));

    const auto rev = build_schedule(sequential(4, 0.0, {1, 0}), 2, {false, false});
    CHECK(rev.levels.row(1) == row({1, 0.5, 0, 0, 0}));

    // o = 0.5, n = 3: w = 0.5 and starts 0, 0.25, 0.5.
    const auto H = build_schedule(sequential(8, 0.5), 3, {false, false, false});
    CHECK(H.levels.row(0) == row({1, 0.75, 0.5, 0.25, 0, 0, 0, 0, 0}));
    CHECK(H.levels.row(1) == row({1, 1, 1, 0.75, 0.5, 0.25, 0, 0, 0}));
    CHECK(H.levels.row(2) == row({1, 1, 1, 1, 1, 0.75, 0.5, 0.25, 0}));
}

TEST_CASE("discretization snaps ramp ends to columns") {
    // w = 1/3 with d = 4: ramps are sampled at k/4, so row 1 (window
    // [1/3, 2/3]) reads 1 - (0.5 - 1/3) * 3 = 0.5 at column 2 and is
    // clean from column 3 on.
    const auto T = build_schedule(sequential(4, 0.0), 3, {false, false, false});
    CHECK(T.levels(1, 1) == 1.0);
    CHECK(T.levels(1, 2) == doctest::Approx(0.5));
    CHECK(T.levels(1, 3) == 0.0);
    CHECK(T.levels(0, 2) == 0.0);
    CHECK(T.levels(2, 2) == 1.0);
    CHECK(validate_schedule(T));
}

TEST_CASE("overlap one is parallel") {
    for (std::size_t n = 1; n <= 8; ++n)
        for (std::size_t d = 1; d <= 64; ++d) {
            const std::vector<bool> none(n, false);
            CHECK(build_schedule(sequential(d, 1.0), n, none).levels == build_schedule(parallel(d), n, none).levels);
        }
}

TEST_CASE("conditioned rows stay zero and are skipped in the order") {
    const auto T = build_schedule(sequential(4, 0.0), 3, {false, true, false});
    CHECK(T.levels.row(1).isZero());
    CHECK(T.levels.row(0) == row({1, 0.5, 0, 0, 0}));
    CHECK(T.levels.row(2) == row({1, 1, 1, 0.5, 0}));
    CHECK(validate_schedule(T));
}

TEST_CASE("orders") {
    ScheduleSpec s = sequential(3, 0.0);
    s.order.mode = OrderSpec::Mode::Graph;
    CHECK_THROWS_WITH_AS(build_schedule(s, 3, {false, false, false}), doctest::Contains("without a graph"), Error);
    s.order.graph = DependencyGraph{3, {{2, 1}, {1, 0}}};
    const auto G = build_schedule(s, 3, {false, false, false});
    CHECK(G.levels(2, 1) == 0.0);
    CHECK(G.levels(1, 2) == 0.0);
    CHECK(G.levels(0, 2) == 1.0);

    s.order.mode = OrderSpec::Mode::Random;
    s.order.seed = 42;
    const auto R1 = build_schedule(s, 3, {false, false, false});
    const auto R2 = build_schedule(s, 3, {false, false, false});
    CHECK(R1.levels == R2.levels);

    s.order.mode = OrderSpec::Mode::Explicit;
    s.order.order = {0, 0, 1};
    CHECK_THROWS_AS(build_schedule(s, 3, {false, false, false}), Error);
}

TEST_CASE("too few steps") {
    CHECK_THROWS_WITH_AS(build_schedule(sequential(2, 0.0), 3, {false, false, false}), doctest::Contains("increase"), Error);
    CHECK_NOTHROW(build_schedule(sequential(3, 0.0), 3, {false, false, false}));
    CHECK_NOTHROW(build_schedule(sequential(2, 0.5), 3, {false, false, false}));
}

TEST_CASE("next-k groups are strictly sequential") {
    ScheduleSpec s;
    s.kind = ScheduleKind::NextK;
    s.k = 2;
    s.d = 6;
    const auto T = build_schedule(s, 5, std::vector<bool>(5, false));
    CHECK(T.levels.row(0) == T.levels.row(1));
    CHECK(T.levels.row(2) == T.levels.row(3));
    CHECK(near(T.levels.row(0), row({1, 0.5, 0, 0, 0, 0, 0})));
    CHECK(near(T.levels.row(2), row({1, 1, 1, 0.5, 0, 0, 0})));
    CHECK(near(T.levels.row(4), row({1, 1, 1, 1, 1, 0.5, 0})));
}

TEST_CASE("rolling window keeps at most window variables in flight") {
    ScheduleSpec s;
    s.kind = ScheduleKind::RollingWindow;
    s.window = 2;
    s.stride = 1;
    s.d = 12;
    const auto T = build_schedule(s, 5, std::vector<bool>(5, false));
    CHECK(validate_schedule(T));
    for (Eigen::Index c = 0; c < T.levels.cols(); ++c) {
        int mid = 0;
        for (Eigen::Index r = 0; r < 5; ++r) mid += T.levels(r, c) > 0.0 && T.levels(r, c) < 1.0 ? 1 : 0;
        CHECK(mid <= 2);
    }
    // Consecutive variables start half a ramp apart.
    CHECK(first_below_one(T.levels, 1) > first_below_one(T.levels, 0));
    s.stride = 3;
    CHECK_THROWS_AS(build_schedule(s, 5, std::vector<bool>(5, false)), Error);
}

TEST_CASE("adaptive schedule carries only its first column") {
    ScheduleSpec s;
    s.kind = ScheduleKind::AdaptiveCertainty;
    s.d = 10;
    const auto T = build_schedule(s, 3, {false, true, false});
    CHECK(T.partial);
    CHECK(T.levels.cols() == 1);
    CHECK(T.levels.col(0) == Eigen::Vector3d(1, 0, 1));
    CHECK(validate_schedule(T));
}

TEST_CASE("validate_schedule reports violations") {
    ScheduleMatrix T;
    T.levels = Matrix(1, 4);
    T.levels << 1, 0.5, 0.6, 0;
    T.conditioned = {false};
    auto r = validate_schedule(T);
    CHECK_FALSE(r);
    CHECK(r.column == 2);
    T.levels << 1, 0.5, 0.2, 0.1;
    r = validate_schedule(T);
    CHECK_FALSE(r);
    CHECK(r.column == 3);
    T.levels << 1, 0.5, 0.2, 0.0;
    T.conditioned = {true};
    CHECK_FALSE(validate_schedule(T));
    T.conditioned = {false};
    T.levels << 1.2, 0.5, 0.2, 0.0;
    CHECK_FALSE(validate_schedule(T));
}

TEST_CASE("adaptive_select examples") {
    const Vector u = Eigen::Vector3d(0.1, 0.5, 0.3);
    CHECK(adaptive_select(levels_state({1, 1, 1}), u, 1) == std::vector<std::size_t>{0});
    CHECK(adaptive_select(levels_state({0.7, 1, 1}), u, 1) == std::vector<std::size_t>{2});
    const DependencyGraph g{3, {{2, 1}}};
    CHECK(adaptive_select(levels_state({1, 1, 1}), u, 2, &g) == std::vector<std::size_t>{0, 2});
    CHECK(adaptive_select(levels_state({0, 0.2, 0}), u, 2).empty());
    // Ties go to the lower index.
    CHECK(adaptive_select(levels_state({1, 1, 1}), Eigen::Vector3d(0.2, 0.2, 0.2), 2) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("fuzzed schedules satisfy every invariant") {
    Rng rng(99);
    int built = 0;
    for (int rep = 0; rep < 10000; ++rep) {
        const std::size_t n = 1 + rng() % 8;
        ScheduleSpec s;
        s.kind = static_cast<ScheduleKind>(rng() % 4);
        s.d = 1 + rng() % 64;
        s.overlap = (rng() % 4 == 0) ? static_cast<double>(rng() % 2) : uniform01(rng);
        s.k = 1 + rng() % n;
        s.window = 1 + rng() % 4;
        s.stride = std::vector<std::size_t>{1, s.window}[rng() % 2];
        s.order.mode = rng() % 2 ? OrderSpec::Mode::Random : OrderSpec::Mode::Explicit;
        s.order.seed = rng();
        std::vector<bool> cond(n, false);
        for (std::size_t i = 0; i < n; ++i) cond[i] = rng() % 5 == 0;
        const std::size_t m = static_cast<std::size_t>(std::count(cond.begin(), cond.end(), false));

        ScheduleMatrix T;
        try {
            T = build_schedule(s, n, cond);
        } catch (const Error& e) {
            // Only the documented step-count refusal is acceptable here.
            CHECK(std::string(e.what()).find("increase") != std::string::npos);
            continue;
        }
        ++built;
        const auto report = validate_schedule(T);
        CHECK_MESSAGE(report.ok, report.message);
        CHECK(T.levels.cols() == static_cast<Eigen::Index>(s.d + 1));
        // Every active row descends exactly from 1 to 0.
        double descent = 0.0;
        for (Eigen::Index c = 1; c < T.levels.cols(); ++c) descent += (T.levels.col(c - 1) - T.levels.col(c)).sum();
        CHECK(descent == doctest::Approx(static_cast<double>(m)).epsilon(1e-12));

        if (s.kind == ScheduleKind::Sequential && s.overlap == 1.0)
            CHECK(T.levels == build_schedule(parallel(s.d), n, cond).levels);
        if (s.kind == ScheduleKind::Sequential && s.overlap == 0.0) {
            const auto order = detail::resolve_order(s.order, n, cond);
            for (std::size_t j = 0; j + 1 < order.size(); ++j)
                CHECK(first_zero(T.levels, static_cast<Eigen::Index>(order[j])) <=
                      first_below_one(T.levels, static_cast<Eigen::Index>(order[j + 1])));
        }
        if (s.kind == ScheduleKind::RollingWindow)
            for (Eigen::Index c = 0; c < T.levels.cols(); ++c) {
                std::size_t mid = 0;
                for (Eigen::Index r = 0; r < T.levels.rows(); ++r) mid += T.levels(r, c) > 0.0 && T.levels(r, c) < 1.0;
                CHECK(mid <= s.window);
            }
    }
    CHECK(built > 8000);
}

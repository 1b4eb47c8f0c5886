#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "sre/neural.hpp"

using namespace sre;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    std::copy(v.begin(), v.end(), out.data());
    return out;
}

NetShape shape(std::size_t dim, std::vector<std::size_t> enc, std::vector<std::size_t> head, bool unc = false,
               bool varh = false, PredictionKind kind = PredictionKind::X0) {
    NetShape s;
    s.tokenizer = {dim, 4, 4};
    s.encoder = std::move(enc);
    s.head = std::move(head);
    s.uncertainty_head = unc;
    s.variance_head = varh;
    s.kind = kind;
    return s;
}

Matrix randn(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Matrix m(r, c);
    for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = standard_normal(rng);
    return m;
}

TrainingExample example(std::size_t n, std::size_t dim, Rng& rng, const Paradigm& p) {
    TrainingExample ex;
    ex.x0 = randn(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim), rng);
    ex.eps = randn(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim), rng);
    ex.levels = Vector(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < ex.levels.size(); ++i) {
        if (p.is_discrete()) {
            ex.levels(i) = static_cast<double>(1 + rng() % p.d_steps()) / static_cast<double>(p.d_steps());
        } else {
            ex.levels(i) = 0.05 + 0.9 * uniform01(rng);
        }
    }
    ex.conditioned.assign(n, false);
    ex.positions = Vector::LinSpaced(static_cast<Eigen::Index>(n), 0.0, static_cast<double>(n) - 1.0);
    return ex;
}

}  // namespace

TEST_CASE("tokenize shape and embeddings") {
    Tokenizer tok{1, 4, 4};
    const auto s = make_state(Matrix::Constant(2, 1, 0.5), vec({0.0, 1.0}));
    const Matrix t = tok.tokenize(s, vec({0.0, 1.0}));
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 9);
    CHECK((t.row(0).segment(1, 4) - t.row(1).segment(1, 4)).norm() > 1e-3);

    const auto same = make_state(Matrix::Constant(2, 1, 0.5), vec({0.3, 0.3}));
    const Matrix u = tok.tokenize(same, vec({0.0, 2.0}));
    CHECK((u.row(0) - u.row(1)).norm() > 1e-3);
    CHECK(u.row(0).head(5) == u.row(1).head(5));

    CHECK_THROWS_AS(tok.tokenize(s, vec({0.0})), Error);
}

TEST_CASE("net_forward zero weights, clamping and shape") {
    const Paradigm rf = Paradigm::rectified_flow();
    DenoiserNet net(shape(2, {8}, {8}, true));
    const auto s = make_state(Matrix::Constant(3, 2, 0.7), vec({0.5, 0.5, 0.0}), {false, false, true});
    const Prediction p = net_forward(net, s, vec({0, 1, 2}), rf);
    CHECK(p.x0_mean.rows() == 3);
    CHECK(p.x0_mean.cols() == 2);
    CHECK(p.var.size() == 3);
    CHECK(p.x0_mean.topRows(2).isZero(0.0));
    CHECK(p.x0_mean.row(2) == s.values().row(2));
    CHECK(p.var(2) == 0.0);
    // exp(0) per dim
    CHECK(p.var(0) == doctest::Approx(2.0));

    DenoiserNet wrong(shape(1, {8}, {8}));
    CHECK_THROWS_AS(net_forward(wrong, s, vec({0, 1, 2}), rf), Error);
}

TEST_CASE("loss examples") {
    const Paradigm rf = Paradigm::rectified_flow();
    Matrix x0(1, 2);
    x0 << 0.4, -0.2;
    Matrix eps(1, 2);
    eps << 1.0, 0.5;
    const Vector lv = vec({0.3});
    const std::vector<bool> free{false};

    NetOutput<double> out;
    out.mean = x0.transpose();
    const double mse = compute_loss<double>(out, PredictionKind::X0, x0, eps, rf, lv, free,
                                            LossSpec{{{LossKind::Mse, 1.0, PredictionKind::X0}}})
                           .total;
    CHECK(mse == 0.0);

    out.log_var = Vector::Zero(1);
    const auto nll = compute_loss<double>(out, PredictionKind::X0, x0, eps, rf, lv, free,
                                          LossSpec{{{LossKind::Nll, 1.0, PredictionKind::X0}}});
    CHECK(nll.total == doctest::Approx(0.5 * std::log(2.0 * std::numbers::pi)).epsilon(1e-12));

    // u = eps - x0 for rectified flow
    const Vector u = (eps - x0).row(0).transpose();
    NetOutput<double> vel;
    vel.mean = 3.0 * u;
    const LossSpec cos{{{LossKind::Cosine, 1.0, PredictionKind::U}}};
    CHECK(compute_loss<double>(vel, PredictionKind::U, x0, eps, rf, lv, free, cos).total == doctest::Approx(0.0));
    vel.mean = -0.5 * u;
    CHECK(compute_loss<double>(vel, PredictionKind::U, x0, eps, rf, lv, free, cos).total == doctest::Approx(2.0));
}

TEST_CASE("loss excludes conditioned variables") {
    const Paradigm rf = Paradigm::rectified_flow();
    Matrix x0(2, 1);
    x0 << 1.0, 2.0;
    NetOutput<double> out;
    out.mean = Matrix(1, 2);
    out.mean << 1.0, 50.0;
    const auto r = compute_loss<double>(out, PredictionKind::X0, x0, Matrix::Zero(2, 1), rf, vec({0.5, 0.0}),
                                        {false, true}, LossSpec{{{LossKind::Mse, 1.0, PredictionKind::X0}}});
    CHECK(r.total == 0.0);
    CHECK(r.grad_mean.isZero(0.0));
}

TEST_CASE("nll variance floor") {
    const Paradigm rf = Paradigm::rectified_flow();
    NetOutput<double> out;
    out.mean = Matrix::Zero(1, 1);
    out.log_var = vec({-100.0});
    const auto r = compute_loss<double>(out, PredictionKind::X0, Matrix::Zero(1, 1), Matrix::Zero(1, 1), rf, vec({0.5}),
                                        {false}, LossSpec{{{LossKind::Nll, 1.0, PredictionKind::X0}}});
    CHECK(std::isfinite(r.total));
    CHECK(r.total == doctest::Approx(0.5 * (std::log(2.0 * std::numbers::pi) + std::log(kNllVarianceFloor))));
    CHECK(r.grad_log_var(0) == 0.0);
}

TEST_CASE("loss spec validation") {
    const Paradigm rf = Paradigm::rectified_flow();
    const Paradigm dd = Paradigm::ddpm(100);
    CHECK_THROWS_AS(LossSpec{}.validate(rf), Error);
    CHECK_THROWS_AS((LossSpec{{{LossKind::Mse, 0.0, PredictionKind::X0}}}.validate(rf)), Error);
    CHECK_THROWS_AS((LossSpec{{{LossKind::Vlb, 1.0, PredictionKind::X0}}}.validate(rf)), Error);
    CHECK_THROWS_AS((LossSpec{{{LossKind::Cosine, 1.0, PredictionKind::X0}}}.validate(rf)), Error);
    CHECK_NOTHROW((LossSpec{{{LossKind::Vlb, 1.0, PredictionKind::X0}}}.validate(dd)));

    NetOutput<double> out;
    out.mean = Matrix::Zero(1, 1);
    out.var_logit = vec({0.0});
    CHECK_THROWS_AS(compute_loss<double>(out, PredictionKind::X0, Matrix::Zero(1, 1), Matrix::Zero(1, 1), dd,
                                         vec({0.123}), {false}, LossSpec{{{LossKind::Vlb, 1.0, PredictionKind::X0}}}),
                    Error);
}

TEST_CASE("linear net gradient equals least-squares gradient") {
    const Paradigm rf = Paradigm::rectified_flow();
    Rng rng(11);
    NetShape s = shape(2, {}, {});
    s.activation = Activation::Identity;
    const DenoiserNet net = DenoiserNet::initialized(s, rng);
    const TrainingExample ex = example(3, 2, rng, rf);
    const LossSpec mse{{{LossKind::Mse, 1.0, PredictionKind::X0}}};

    std::vector<double> grad;
    loss_and_gradient(net, rf, {ex}, mse, grad);

    const Matrix tokens = s.tokenizer.tokenize(make_state(forward_diffuse(rf, ex.x0, ex.eps, ex.levels), ex.levels),
                                               ex.positions);
    Matrix feats(2 * tokens.cols(), tokens.rows());
    const Vector ctx = tokens.colwise().mean().transpose();
    for (Eigen::Index i = 0; i < tokens.rows(); ++i) feats.col(i) << tokens.row(i).transpose(), ctx;
    const auto& l = net.layers().front();
    Eigen::Map<const Matrix> w(net.params().data() + l.offset, 2, feats.rows());
    Eigen::Map<const Vector> b(net.params().data() + l.offset + l.in * l.out, 2);
    Matrix pred = w * feats;
    pred.colwise() += b;
    const Matrix resid = pred - ex.x0.transpose();
    const double N = static_cast<double>(resid.size());
    const Matrix gw = 2.0 / N * resid * feats.transpose();
    const Vector gb = 2.0 / N * resid.rowwise().sum();

    Eigen::Map<const Matrix> aw(grad.data() + l.offset, 2, feats.rows());
    Eigen::Map<const Vector> ab(grad.data() + l.offset + l.in * l.out, 2);
    CHECK((aw - gw).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((ab - gb).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("zero net with zero targets has zero gradient") {
    const Paradigm rf = Paradigm::rectified_flow();
    DenoiserNet net(shape(1, {8}, {8}, true));
    TrainingExample ex;
    ex.x0 = Matrix::Zero(2, 1);
    ex.eps = Matrix::Zero(2, 1);
    ex.levels = vec({0.3, 0.7});
    ex.conditioned = {false, false};
    ex.positions = vec({0, 1});
    std::vector<double> grad;
    loss_and_gradient(net, rf, {ex}, LossSpec{{{LossKind::Mse, 1.0, PredictionKind::X0}}}, grad);
    for (double g : grad) CHECK(g == 0.0);
}

TEST_CASE("gradient check over loss kinds and heads") {
    struct Case {
        Paradigm paradigm;
        PredictionKind kind;
        bool unc;
        bool varh;
        LossSpec spec;
    };
    const std::vector<Case> cases{
        {Paradigm::rectified_flow(), PredictionKind::X0, false, false, {{{LossKind::Mse, 1.0, PredictionKind::X0}}}},
        {Paradigm::rectified_flow(), PredictionKind::Epsilon, false, false,
         {{{LossKind::Mse, 1.0, PredictionKind::U}}}},
        {Paradigm::cosine_flow(), PredictionKind::U, true, false,
         {{{LossKind::Mse, 1.0, PredictionKind::X0}, {LossKind::Nll, 0.5, PredictionKind::X0}}}},
        {Paradigm::rectified_flow(), PredictionKind::U, false, false, {{{LossKind::Cosine, 1.0, PredictionKind::U}}}},
        {Paradigm::ddpm(100), PredictionKind::Epsilon, false, true,
         {{{LossKind::Mse, 1.0, PredictionKind::Epsilon}, {LossKind::Vlb, 1.0, PredictionKind::X0}}}},
        {Paradigm::ddpm(100), PredictionKind::V, true, true,
         {{{LossKind::Mse, 1.0, PredictionKind::V},
           {LossKind::Nll, 0.1, PredictionKind::X0},
           {LossKind::Vlb, 1.0, PredictionKind::X0}}}},
    };
    Rng rng(5);
    for (const Case& c : cases) {
        const DenoiserNet net = DenoiserNet::initialized(shape(2, {6, 5}, {7}, c.unc, c.varh, c.kind), rng);
        std::vector<TrainingExample> batch;
        for (int b = 0; b < 3; ++b) batch.push_back(example(3, 2, rng, c.paradigm));
        CHECK(gradient_check(net, c.paradigm, batch, c.spec, 1) <= 1e-4);
    }
}

TEST_CASE("training: lr 0 is a no-op, determinism, progress") {
    const Paradigm rf = Paradigm::rectified_flow();
    TrainTask task;
    task.n = 1;
    task.dim = 1;
    task.positions = vec({0.0});
    task.draw = [](Rng& r) { return Matrix::Constant(1, 1, 0.5 + 0.3 * standard_normal(r)); };
    const LossSpec mse{{{LossKind::Mse, 1.0, PredictionKind::X0}}};
    Rng init(3);
    const DenoiserNet net = DenoiserNet::initialized(shape(1, {16}, {16}), init);

    OptimizerConfig zero;
    zero.lr = 0.0;
    zero.steps = 20;
    zero.batch = 4;
    const auto still = train(net, task, rf, TSampler{}, mse, zero, 1);
    CHECK(still.net.params() == net.params());
    CHECK(still.losses.size() == 20);

    OptimizerConfig opt;
    opt.lr = 3e-3;
    opt.steps = 2000;
    opt.batch = 16;
    const auto a = train(net, task, rf, TSampler{}, mse, opt, 9);
    const auto b = train(net, task, rf, TSampler{}, mse, opt, 9);
    CHECK(a.losses == b.losses);
    double first = 0.0;
    double last = 0.0;
    for (std::size_t i = 0; i < 100; ++i) {
        first += a.losses[i];
        last += a.losses[a.losses.size() - 1 - i];
    }
    CHECK(last < first);

    OptimizerConfig sgd = opt;
    sgd.kind = OptimizerKind::Sgd;
    sgd.steps = 300;
    sgd.lr = 0.05;
    const auto c = train(net, task, rf, TSampler{}, mse, sgd, 2);
    CHECK(std::isfinite(c.losses.back()));
}

TEST_CASE("loss is invariant to permuting variables with positions") {
    const Paradigm rf = Paradigm::rectified_flow();
    Rng rng(21);
    const DenoiserNet net = DenoiserNet::initialized(shape(2, {8}, {8}, true), rng);
    const TrainingExample ex = example(4, 2, rng, rf);
    const std::vector<Eigen::Index> perm{2, 0, 3, 1};
    TrainingExample px = ex;
    for (std::size_t j = 0; j < perm.size(); ++j) {
        const auto i = static_cast<Eigen::Index>(j);
        px.x0.row(i) = ex.x0.row(perm[j]);
        px.eps.row(i) = ex.eps.row(perm[j]);
        px.levels(i) = ex.levels(perm[j]);
        px.positions(i) = ex.positions(perm[j]);
    }
    const LossSpec spec{{{LossKind::Mse, 1.0, PredictionKind::X0}, {LossKind::Nll, 0.3, PredictionKind::X0}}};
    std::vector<double> g;
    const double l1 = loss_and_gradient(net, rf, {ex}, spec, g);
    const double l2 = loss_and_gradient(net, rf, {px}, spec, g);
    CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip") {
    Rng rng(4);
    NetShape s = shape(3, {5}, {6, 4}, true, true, PredictionKind::V);
    const DenoiserNet net = DenoiserNet::initialized(s, rng);
    std::stringstream buf;
    save_net(net, buf);
    CHECK(buf.str().substr(0, 5) == "SRNN1");
    const DenoiserNet back = load_net(buf);
    CHECK(back.params() == net.params());
    CHECK(back.shape().head == s.head);
    CHECK(back.shape().encoder == s.encoder);
    CHECK(back.shape().kind == PredictionKind::V);
    CHECK(back.shape().uncertainty_head);
    CHECK(back.shape().variance_head);

    std::stringstream bad("SRNN2xxxxxxxx");
    CHECK_THROWS_AS(load_net(bad), Error);
    std::stringstream cut(buf.str().substr(0, 40));
    CHECK_THROWS_AS(load_net(cut), Error);
}

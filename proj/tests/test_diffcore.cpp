#include <gtest/gtest.h>

#include <optional>
#include <random>
#include <sstream>
#include <bit>
#include <limits>

#include "phlab/adam.hpp"
#include "phlab/diffcore.hpp"
#include "phlab/param_vector.hpp"
#include "phlab/scalar_net.hpp"
#include "test_support.hpp"

using namespace phlab;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using phlab::test::fd_gradient;
using phlab::test::random_net;
using phlab::test::random_vector;
using phlab::test::rel_error;

namespace {

// Gradient of <w, op(x)> w.r.t. x through the tape, against central
// differences of the same expression evaluated on fresh tapes.
void check_unary_op(const std::function<ad::Var(ad::Var)>& op, const MatrixXd& x0, std::mt19937_64& rng,
                    double tol = 1e-7) {
    ad::Tape probe;
    const MatrixXd out0 = op(probe.constant(x0)).value();
    MatrixXd w(out0.rows(), out0.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i)
        w.data()[i] = std::uniform_real_distribution<double>(-1, 1)(rng);

    auto f = [&](const VectorXd& flat) {
        ad::Tape t;
        const MatrixXd xm = Eigen::Map<const MatrixXd>(flat.data(), x0.rows(), x0.cols());
        return op(t.constant(xm)).value().cwiseProduct(w).sum();
    };
    ad::Tape tape;
    const ad::Var x = tape.leaf(x0, 0);
    const ad::Var y = op(x);
    VectorXd g = VectorXd::Zero(x0.size());
    tape.backward(y, w, g);
    const VectorXd flat = Eigen::Map<const VectorXd>(x0.data(), x0.size());
    EXPECT_LT(rel_error(g, fd_gradient(f, flat)), tol);
}

} // namespace

TEST(Tape, ElementaryOpsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    const MatrixXd x = random_vector(12, rng).reshaped(4, 3);
    const MatrixXd a = random_vector(12, rng).reshaped(3, 4);
    const VectorXd col = random_vector(4, rng);

    check_unary_op([](ad::Var v) { return ad::tanh(v); }, x, rng);
    check_unary_op([](ad::Var v) { return ad::sin(v); }, x, rng);
    check_unary_op([](ad::Var v) { return ad::square(v); }, x, rng);
    check_unary_op([](ad::Var v) { return 2.0 - 3.0 * v + 1.5; }, x, rng);
    check_unary_op([](ad::Var v) { return ad::clamp(v, -0.5, 0.5); }, x, rng);
    check_unary_op([](ad::Var v) { return ad::transpose(v); }, x, rng);
    check_unary_op([](ad::Var v) { return ad::vcat(v, ad::square(v)); }, x, rng);
    check_unary_op([](ad::Var v) { return ad::gather_rows(v, {3, 0, 3}); }, x, rng);
    check_unary_op([](ad::Var v) { return ad::scatter_rows(v, {5, 0, 2, 1}, 7); }, x, rng);
    check_unary_op([](ad::Var v) { return ad::sum_squares(v); }, x, rng);
    check_unary_op([](ad::Var v) { return ad::sum_abs(v); }, x, rng);
    check_unary_op([](ad::Var v) { return ad::hadamard(v, ad::tanh(v)); }, x, rng);
    check_unary_op([&](ad::Var v) { return ad::matmul(v.tape()->constant(a), v); }, x, rng);
    check_unary_op([&](ad::Var v) { return ad::matmul(v, ad::transpose(v)); }, x, rng);
    check_unary_op([&](ad::Var v) { return ad::matmul_tn(v, ad::tanh(v)); }, x, rng);
    check_unary_op([&](ad::Var v) { return ad::add_bias(v, v.tape()->constant(col)); }, x, rng);
    check_unary_op([&](ad::Var v) { return ad::add_bias(ad::square(v), ad::gather_rows(v, {0, 1, 2, 3})) ; },
                   x.col(0), rng);
    check_unary_op([&](ad::Var v) { return ad::scale_rows(ad::tanh(v), ad::gather_rows(v, {1, 2, 0, 3})); },
                   x.col(0), rng);
    check_unary_op([&](ad::Var v) { return ad::relu(v) - v; }, x, rng);
}

TEST(Tape, ForeignVariableIsStructuralError) {
    ad::Tape a;
    ad::Tape b;
    const ad::Var x = a.constant(MatrixXd::Ones(2, 2));
    const ad::Var y = b.constant(MatrixXd::Ones(2, 2));
    EXPECT_THROW(ad::add(x, y), StructuralError);
    EXPECT_THROW(ad::matmul(x, b.constant(MatrixXd::Ones(3, 1))), StructuralError);
}

TEST(Tape, LeafOutsideSinkIsStructuralError) {
    ad::Tape t;
    const ad::Var w = t.leaf(MatrixXd::Ones(3, 1), 5);
    const ad::Var s = ad::sum_squares(w);
    VectorXd sink = VectorXd::Zero(6);
    EXPECT_THROW(t.backward(s, sink), StructuralError);
}

TEST(Tape, ConstantsCarryNoGradient) {
    ad::Tape t;
    const ad::Var c = t.constant(MatrixXd::Ones(2, 2));
    const ad::Var y = ad::sum_squares(ad::tanh(c));
    EXPECT_FALSE(t.requires_grad(y));
}

TEST(ScalarNet, ZeroNetworkGivesZero) {
    ScalarNet net(3, 2);
    EXPECT_EQ(net.forward(VectorXd::Constant(3, 0.7)), VectorXd::Zero(2));
    ScalarNet h(3, 1);
    EXPECT_EQ(h.grad_input(VectorXd::Constant(3, -0.2)), VectorXd::Zero(3));
}

TEST(ScalarNet, ConstantPath) {
    ScalarNet net(1, 1);
    net.W3.setOnes();
    net.b3[0] = 5.0;
    for (double x : {-3.0, 0.0, 1.0, 100.0})
        EXPECT_EQ(net.forward(VectorXd::Constant(1, x))[0], 5.0);
}

TEST(ScalarNet, ForwardIsContinuousAtZero) {
    std::mt19937_64 rng(11);
    for (int k = 0; k < 20; ++k) {
        const ScalarNet net = random_net(5, 3, rng);
        const VectorXd y0 = net.forward(VectorXd::Zero(5));
        const VectorXd y1 = net.forward(VectorXd::Constant(5, 1e-12));
        EXPECT_LE((y0 - y1).cwiseAbs().maxCoeff(), 1e-6);
        EXPECT_TRUE(y0.allFinite());
    }
}

TEST(ScalarNet, DimensionMismatchThrows) {
    ScalarNet net(3, 1);
    EXPECT_THROW(net.forward(VectorXd::Zero(2)), StructuralError);
    ScalarNet vec_out(3, 2);
    EXPECT_THROW(vec_out.grad_input(VectorXd::Zero(3)), StructuralError);
}

TEST(ScalarNet, LinearNeighbourhoodGradient) {
    // Small first-layer weight keeps tanh in its linear range and a positive
    // second-layer bias keeps every relu active, so H(x) ≈ c·x0 near 0.
    const double c = 2.5;
    const double eps = 1e-4;
    ScalarNet net(3, 1);
    net.W1(0, 0) = eps;
    net.W2(0, 0) = 1.0;
    net.b2.setOnes();
    net.W3(0, 0) = c / eps;
    const VectorXd x = (VectorXd(3) << 0.3, -0.8, 0.1).finished();
    const VectorXd g = net.grad_input(x);
    EXPECT_NEAR(g[0], c, 1e-6);
    EXPECT_EQ(g[1], 0.0);
    EXPECT_EQ(g[2], 0.0);
    const auto f = [&](const VectorXd& v) { return net.forward(v)[0]; };
    EXPECT_LT(rel_error(g, fd_gradient(f, x)), 1e-6);
}

TEST(ScalarNet, GradInputMatchesFiniteDifferences) {
    std::mt19937_64 rng(2024);
    int checked = 0;
    for (int k = 0; k < 100; ++k) {
        const Eigen::Index d = 1 + static_cast<Eigen::Index>(k % 9);
        const ScalarNet net = random_net(d, 1, rng);
        const VectorXd x = random_vector(d, rng, 2.0);
        if (phlab::test::stencil_crosses_kink(net, x, 1e-5))
            continue;
        const auto f = [&](const VectorXd& v) { return net.forward(v)[0]; };
        EXPECT_LT(rel_error(net.grad_input(x), fd_gradient(f, x, 1e-5)), 1e-6) << "case " << k;
        ++checked;
    }
    EXPECT_GE(checked, 95);
}

TEST(ScalarNet, TapedPathsAgreeWithPlainPaths) {
    std::mt19937_64 rng(5);
    const ScalarNet net = random_net(4, 1, rng);
    MatrixXd xs(4, 6);
    for (int c = 0; c < 6; ++c)
        xs.col(c) = random_vector(4, rng);
    ad::Tape t;
    const auto b = net.bind(t);
    const MatrixXd y = ScalarNet::forward(b, t.constant(xs)).value();
    const MatrixXd g = ScalarNet::grad_input(b, t.constant(xs)).value();
    for (int c = 0; c < 6; ++c) {
        EXPECT_NEAR(y(0, c), net.forward(xs.col(c))[0], 1e-14);
        EXPECT_LT((g.col(c) - net.grad_input(xs.col(c))).norm(), 1e-13);
    }
}

TEST(ScalarNet, FlattenRoundTripIsExact) {
    std::mt19937_64 rng(3);
    const ScalarNet net = random_net(3, 2, rng, 17);
    VectorXd flat(net.param_count());
    net.flatten_into(flat);
    ScalarNet copy(3, 2, 17);
    copy.unflatten_from(flat);
    EXPECT_EQ(copy.W1, net.W1);
    EXPECT_EQ(copy.b2, net.b2);
    EXPECT_EQ(copy.W3, net.W3);
    VectorXd again(net.param_count());
    copy.flatten_into(again);
    EXPECT_EQ(again, flat);
}

TEST(ScalarNet, SeededInitializationIsReproducible) {
    std::mt19937_64 r1(99), r2(99);
    ScalarNet a(9, 1), b(9, 1);
    a.initialize(r1);
    b.initialize(r2);
    EXPECT_EQ(a.W1, b.W1);
    EXPECT_EQ(a.W2, b.W2);
    EXPECT_EQ(a.W3, b.W3);
    const double limit = std::sqrt(6.0 / 200.0);
    EXPECT_LE(a.W2.cwiseAbs().maxCoeff(), limit);
    EXPECT_EQ(a.b1, VectorXd::Zero(100));
}

// vjp through the parameters

namespace {

struct NetParamFixture {
    ScalarNet net;
    VectorXd theta;

    explicit NetParamFixture(ScalarNet n) : net(std::move(n)), theta(net.param_count()) { net.flatten_into(theta); }

    ScalarNet at(const VectorXd& th) const {
        ScalarNet copy = net;
        copy.unflatten_from(th);
        return copy;
    }
};

} // namespace

TEST(Vjp, ExpressionIndependentOfParametersHasZeroGradient) {
    std::mt19937_64 rng(1);
    const ScalarNet net = random_net(2, 1, rng);
    ad::Tape t;
    net.bind(t, 0);
    const ad::Var x = t.constant(MatrixXd::Ones(2, 1));
    const ad::Var y = ad::sum_squares(ad::tanh(x));
    VectorXd g = VectorXd::Zero(net.param_count());
    if (t.requires_grad(y))
        t.backward(y, g);
    EXPECT_EQ(g, VectorXd::Zero(net.param_count()));
}

TEST(Vjp, OutputBiasGradientIsOne) {
    std::mt19937_64 rng(2);
    const ScalarNet net = random_net(3, 1, rng);
    ad::Tape t;
    const auto b = net.bind(t, 0);
    const ad::Var y = ScalarNet::forward(b, t.constant(random_vector(3, rng)));
    VectorXd g = VectorXd::Zero(net.param_count());
    t.backward(y, g);
    EXPECT_DOUBLE_EQ(g[net.param_count() - 1], 1.0);
}

TEST(Vjp, ThroughGradInputMatchesFiniteDifferences) {
    std::mt19937_64 rng(31337);
    int checked = 0;
    for (int k = 0; k < 100; ++k) {
        const Eigen::Index d = 2 + static_cast<Eigen::Index>(k % 8);
        NetParamFixture fx(random_net(d, 1, rng));
        const VectorXd x = random_vector(d, rng, 1.5);
        const VectorXd v = random_vector(d, rng);

        ad::Tape t;
        const auto b = fx.net.bind(t, 0);
        const ad::Var gx = ScalarNet::grad_input(b, t.constant(x));
        VectorXd grad = VectorXd::Zero(fx.net.param_count());
        t.backward(gx, v, grad);

        // Central difference along u; skipped when the θ-stencil moves a
        // second-layer pre-activation across zero.
        const auto base = phlab::test::relu_pattern(fx.net, x);
        const double h = 1e-5;
        const auto fd_along = [&](const VectorXd& u) -> std::optional<double> {
            const ScalarNet np = fx.at(fx.theta + h * u);
            const ScalarNet nm = fx.at(fx.theta - h * u);
            if ((phlab::test::relu_pattern(np, x) != base).any() || (phlab::test::relu_pattern(nm, x) != base).any())
                return std::nullopt;
            return (np.grad_input(x).dot(v) - nm.grad_input(x).dot(v)) / (2 * h);
        };
        // Random unit directions plus single coordinates in each block.
        std::vector<VectorXd> dirs;
        for (int r = 0; r < 3; ++r)
            dirs.push_back(random_vector(fx.theta.size(), rng).normalized());
        for (Eigen::Index idx : {Eigen::Index{0}, 100 * d + 3, 100 * d + 100 + 517, fx.theta.size() - 2})
            dirs.push_back(VectorXd::Unit(fx.theta.size(), idx));
        bool any = false;
        for (const auto& u : dirs) {
            const auto fd = fd_along(u);
            if (!fd)
                continue;
            any = true;
            EXPECT_LE(std::abs(grad.dot(u) - *fd), 1e-5 * std::max(1.0, std::abs(*fd))) << "case " << k;
        }
        checked += any ? 1 : 0;
    }
    EXPECT_GE(checked, 90);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    VectorXd theta = VectorXd::LinSpaced(5, -1, 1);
    const VectorXd before = theta;
    AdamState st(5);
    adam_step(theta, VectorXd::Zero(5), st);
    EXPECT_EQ(theta, before);
    EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    // Bias-corrected moments at step 1 are g and g², so the update is
    // lr·g/(|g| + eps).
    VectorXd theta = VectorXd::Zero(4);
    const VectorXd g = (VectorXd(4) << 0.5, -2.0, 1e-3, 10.0).finished();
    AdamState st(4);
    AdamConfig cfg;
    adam_step(theta, g, st, cfg);
    for (int i = 0; i < 4; ++i)
        EXPECT_NEAR(theta[i], -cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps), 1e-15);
}

TEST(Adam, IdenticalInputsGiveBitIdenticalTrajectories) {
    std::mt19937_64 rng(8);
    VectorXd a = random_vector(50, rng);
    VectorXd b = a;
    AdamState sa(50), sb(50);
    for (int k = 0; k < 200; ++k) {
        const VectorXd g = a.array().sin().matrix() + 0.1 * a;
        adam_step(a, g, sa);
        const VectorXd gb = b.array().sin().matrix() + 0.1 * b;
        adam_step(b, gb, sb);
    }
    EXPECT_EQ(a, b);
}

TEST(ParamVector, IndexMapIsAPartition) {
    ParamVector p;
    p.append("a", 3);
    p.append("b", 0);
    p.append("c", 5);
    EXPECT_EQ(p.size(), 8);
    Eigen::Index next = 0;
    for (const auto& s : p.slices()) {
        EXPECT_EQ(s.offset, next);
        next += s.length;
    }
    EXPECT_EQ(next, p.size());
    EXPECT_THROW(p.append("a", 1), StructuralError);
    EXPECT_THROW(p.slice("missing"), StructuralError);
}

TEST(ParamVector, SerializationRoundTripsBitExactly) {
    ParamVector p;
    p.append("w", 4);
    p.append("r", 2);
    p.values() << 1.0 / 3.0, -0.0, 1e-308, -7.25, std::numeric_limits<double>::max(), 0.1;
    std::stringstream ss;
    p.write(ss, {{"note", "x"}});
    nlohmann::json header;
    const ParamVector q = ParamVector::read(ss, &header);
    EXPECT_TRUE(q.same_layout(p));
    for (Eigen::Index i = 0; i < p.size(); ++i)
        EXPECT_EQ(std::bit_cast<std::uint64_t>(q.values()[i]), std::bit_cast<std::uint64_t>(p.values()[i]));
    EXPECT_EQ(header["note"], "x");
    EXPECT_EQ(header["components"][1]["name"], "r");
    EXPECT_EQ(header["components"][1]["offset"], 4);
}

TEST(ParamVector, PayloadIsLittleEndian) {
    ParamVector p;
    p.append("one", 1);
    p.values()[0] = 1.0; // 0x3FF0000000000000
    std::stringstream ss;
    p.write(ss);
    const std::string s = ss.str();
    const std::string payload = s.substr(s.find('\n') + 1);
    ASSERT_EQ(payload.size(), 8u);
    EXPECT_EQ(static_cast<unsigned char>(payload[7]), 0x3F);
    EXPECT_EQ(static_cast<unsigned char>(payload[6]), 0xF0);
    EXPECT_EQ(static_cast<unsigned char>(payload[0]), 0x00);
}

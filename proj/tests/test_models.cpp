#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>

#include "phlab/datagen.hpp"
#include "phlab/models.hpp"
#include "phlab/systems.hpp"
#include "test_support.hpp"

using namespace phlab;
using phlab::test::random_net;
using phlab::test::random_vector;

namespace {

KnownForce constant_force(double c) {
    KnownForce f;
    f.plain = [c](const VectorXd&, double) { return VectorXd::Constant(1, c); };
    f.taped = [c](ad::Var x, ad::Var) { return x.tape()->constant(MatrixXd::Constant(1, x.cols(), c)); };
    return f;
}

/// Learned model with random Hamiltonian, damping and state-time force.
PseudoHamiltonianModel random_phnn(Index d, std::mt19937_64& rng, int hidden = 100) {
    ForceModel force(ForceInput::state_time, {d - 1}, d, hidden);
    auto m = PseudoHamiltonianModel::make(StructureMatrix::canonical(d / 2), {d - 1}, force, rng, hidden);
    m.damping().values = random_vector(1, rng);
    return m;
}

} // namespace

TEST(Structure, SkewSymmetryIsEnforced) {
    MatrixXd bad = MatrixXd::Zero(2, 2);
    bad(0, 1) = 1.0;
    EXPECT_THROW(StructureMatrix{bad}, StructuralError);
    const StructureMatrix s = StructureMatrix::canonical(2);
    EXPECT_EQ(s.matrix(), -s.matrix().transpose());
    EXPECT_EQ(s.matrix()(0, 2), 1.0);
    EXPECT_EQ(s.matrix()(2, 0), -1.0);
}

TEST(Damping, DiagonalExpansion) {
    DampingEstimate r({1, 3}, (VectorXd(2) << 0.5, -0.25).finished());
    const MatrixXd m = r.matrix(5);
    EXPECT_EQ(m.diagonal(), (VectorXd(5) << 0, 0.5, 0, -0.25, 0).finished());
    EXPECT_EQ((m - MatrixXd(m.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PhnnEval, ZeroNetworkAndNoForceIsZero) {
    PseudoHamiltonianModel m(StructureMatrix::canonical(1), ScalarNet(2, 1), DampingEstimate({1}));
    EXPECT_EQ(m.rhs(VectorXd::Constant(2, 0.7), 1.0), VectorXd::Zero(2));
}

TEST(PhnnEval, HandEvaluatedMassSpringStructure) {
    PseudoHamiltonianModel m(StructureMatrix::canonical(1), QuadraticHamiltonian{VectorXd::Ones(2)},
                             DampingEstimate({1}, VectorXd::Constant(1, 0.3)));
    const VectorXd g = m.rhs((VectorXd(2) << 1.0, 2.0).finished(), 0.0);
    EXPECT_DOUBLE_EQ(g[0], 2.0);
    EXPECT_NEAR(g[1], -1.6, 1e-15);
}

TEST(PhnnEval, MaskedConstantForce) {
    PseudoHamiltonianModel m(StructureMatrix::canonical(1), ScalarNet(2, 1), DampingEstimate({1}),
                             ForceModel({1}, constant_force(5.0)));
    EXPECT_EQ(m.rhs(VectorXd::Constant(2, -3.0), 2.0), (VectorXd(2) << 0.0, 5.0).finished());

    // Learned force net whose output bias is 5 and weights zero.
    ForceModel learned(ForceInput::state_time, {1}, 2);
    learned.net().b3[0] = 5.0;
    PseudoHamiltonianModel m2(StructureMatrix::canonical(1), ScalarNet(2, 1), DampingEstimate({1}), learned);
    EXPECT_EQ(m2.rhs(VectorXd::Constant(2, 0.4), 9.0), (VectorXd(2) << 0.0, 5.0).finished());
}

TEST(PhnnEval, ForceOutsideMaskIsExactlyZero) {
    std::mt19937_64 rng(1);
    ForceModel f(ForceInput::state_only, {2, 5}, 7, 16);
    f.net() = random_net(7, 2, rng, 16);
    for (int k = 0; k < 100; ++k) {
        const VectorXd full = f.full(random_vector(7, rng, 3.0), 0.0);
        for (Index i : {0, 1, 3, 4, 6})
            EXPECT_EQ(std::bit_cast<std::uint64_t>(full[i]), 0u);
    }
}

TEST(PhnnEval, SkewIdentity) {
    std::mt19937_64 rng(2);
    const TankNetworkSpec tanks;
    const StructureMatrix s(tanks.structure());
    for (int k = 0; k < 100; ++k) {
        const ScalarNet h = random_net(9, 1, rng);
        const VectorXd g = h.grad_input(random_vector(9, rng, 2.0));
        EXPECT_LE(std::abs(g.dot(s.matrix() * g)), 1e-13 * std::max(1.0, g.squaredNorm()));
    }
}

TEST(PhnnEval, EnergyBalance) {
    std::mt19937_64 rng(3);
    for (int k = 0; k < 50; ++k) {
        PseudoHamiltonianModel m = random_phnn(4, rng);
        m.force()->net() = random_net(5, 1, rng);
        const VectorXd x = random_vector(4, rng, 2.0);
        const double t = std::uniform_real_distribution<double>(0, 10)(rng);
        const VectorXd gh = m.grad_hamiltonian(x);
        const double lhs = gh.dot(m.rhs(x, t));
        const double rhs = -gh.dot(m.damping().matrix(4) * gh) + gh.dot(m.force_value(x, t));
        EXPECT_NEAR(lhs, rhs, 1e-12 * std::max(1.0, std::abs(rhs)));
    }
}

TEST(PhnnEval, NegativeDampingIsRepresentable) {
    PseudoHamiltonianModel m(StructureMatrix::canonical(1), QuadraticHamiltonian{VectorXd::Ones(2)},
                             DampingEstimate({1}, VectorXd::Constant(1, -0.59)));
    EXPECT_NEAR(m.rhs(VectorXd::Ones(2), 0.0)[1], -1.0 + 0.59, 1e-15);
    VectorXd theta = m.params().values();
    theta[0] = -2.0;
    m.set_params(theta);
    EXPECT_EQ(m.damping().values[0], -2.0);
}

TEST(PhnnEval, TapedRhsAgreesWithPlainRhs) {
    std::mt19937_64 rng(4);
    PseudoHamiltonianModel m = random_phnn(6, rng, 32);
    MatrixXd xs(6, 5);
    MatrixXd ts(1, 5);
    for (int c = 0; c < 5; ++c) {
        xs.col(c) = random_vector(6, rng);
        ts(0, c) = c * 0.7;
    }
    ad::Tape tape;
    const auto b = m.bind(tape, true);
    const MatrixXd g = b.rhs(tape.constant(xs), tape.constant(ts)).value();
    for (int c = 0; c < 5; ++c)
        EXPECT_LE((g.col(c) - m.rhs(xs.col(c), ts(0, c))).norm(), 1e-13);
}

TEST(AdjustedHamiltonian, Basics) {
    std::mt19937_64 rng(5);
    PseudoHamiltonianModel m = random_phnn(2, rng);
    EXPECT_EQ(adjusted_hamiltonian(m, VectorXd::Zero(2)), 0.0);

    ScalarNet constant(2, 1);
    constant.b3[0] = 4.0;
    PseudoHamiltonianModel c(StructureMatrix::canonical(1), constant, DampingEstimate({1}));
    EXPECT_EQ(adjusted_hamiltonian(c, random_vector(2, rng, 3.0)), 0.0);

    const PseudoHamiltonianModel exact = planted_model(MassSpringSpec{});
    EXPECT_DOUBLE_EQ(adjusted_hamiltonian(exact, VectorXd::Ones(2)), 1.0);
}

TEST(AdjustedForce, RemovesTheMean) {
    PseudoHamiltonianModel c(StructureMatrix::canonical(1), ScalarNet(2, 1), DampingEstimate({1}),
                             ForceModel({1}, constant_force(2.5)));
    const std::vector<VectorXd> xs(7, VectorXd::Ones(2));
    const std::vector<double> ts{0, 1, 2, 3, 4, 5, 6};
    EXPECT_EQ(adjusted_force(c, xs, ts), MatrixXd::Zero(1, 7));

    const PseudoHamiltonianModel exact = planted_model(MassSpringSpec{});
    const int per_period = 2000;
    const int periods = 3;
    std::vector<VectorXd> states;
    std::vector<double> times;
    for (int i = 0; i < per_period * periods; ++i) {
        times.push_back(2.0 * std::numbers::pi / 3.0 * periods * i / (per_period * periods));
        states.push_back(VectorXd::Zero(2));
    }
    const MatrixXd adj = adjusted_force(exact, states, times);
    for (int i = 0; i < adj.cols(); ++i)
        EXPECT_LE(std::abs(adj(0, i) - std::sin(3.0 * times[static_cast<std::size_t>(i)])), 1e-3);

    const MatrixXd one = adjusted_force(exact, {VectorXd::Ones(2)}, {0.4});
    EXPECT_EQ(one(0, 0), 0.0);
    EXPECT_THROW(adjusted_force(exact, {}, {}), std::invalid_argument);
}

TEST(Baseline, ShapesAndTimeDependence) {
    std::mt19937_64 rng(6);
    for (Index d : {2, 9}) {
        const auto one = BaselineModel::one_net(d, rng);
        EXPECT_EQ(one.rhs(VectorXd::Zero(d), 0.0).size(), d);
        EXPECT_EQ(one.state_net().hidden(), 150);
    }
    auto two = BaselineModel::two_net(2, rng);
    two.state_net() = ScalarNet(2, 2);
    const VectorXd a = two.rhs((VectorXd(2) << 0.1, 0.2).finished(), 1.5);
    const VectorXd b = two.rhs((VectorXd(2) << -3.0, 4.0).finished(), 1.5);
    EXPECT_EQ(a, b);
    EXPECT_NE(two.rhs(VectorXd::Zero(2), 0.0), two.rhs(VectorXd::Zero(2), 1.0));

    BaselineModel zero = BaselineModel::two_net(2, rng);
    zero.state_net() = ScalarNet(2, 2);
    zero.time_net() = ScalarNet(1, 2);
    EXPECT_EQ(zero.rhs(VectorXd::Ones(2), 3.0), VectorXd::Zero(2));
}

TEST(Baseline, TapedRhsAgreesWithPlainRhs) {
    std::mt19937_64 rng(7);
    for (const auto& m : {BaselineModel::one_net(3, rng, true, 20), BaselineModel::one_net(3, rng, false, 20),
                          BaselineModel::two_net(3, rng, 20)}) {
        MatrixXd xs(3, 4);
        MatrixXd ts(1, 4);
        for (int c = 0; c < 4; ++c) {
            xs.col(c) = random_vector(3, rng);
            ts(0, c) = 0.3 * c;
        }
        ad::Tape tape;
        const auto b = m.bind(tape, true);
        const MatrixXd g = b.rhs(tape.constant(xs), tape.constant(ts)).value();
        for (int c = 0; c < 4; ++c)
            EXPECT_LE((g.col(c) - m.rhs(xs.col(c), ts(0, c))).norm(), 1e-13);
    }
}

TEST(ReplaceForce, SemanticsOfReplacementAndRemoval) {
    std::mt19937_64 rng(8);
    PseudoHamiltonianModel m = random_phnn(2, rng, 32);
    m.force()->net() = random_net(3, 1, rng, 32);
    const VectorXd x = (VectorXd(2) << 0.3, -1.1).finished();

    KnownForce same;
    const ForceModel original = *m.force();
    same.plain = [original](const VectorXd& xx, double t) { return original.masked(xx, t); };
    same.taped = [](ad::Var, ad::Var) -> ad::Var { throw StructuralError("unused"); };
    EXPECT_EQ(replace_force(m, same).rhs(x, 0.7), m.rhs(x, 0.7));

    const auto zero = replace_force(m, KnownForce::zero(1));
    const auto removed = remove_force(m);
    const VectorXd internal = (m.structure().matrix() - m.damping().matrix(2)) * m.grad_hamiltonian(x);
    EXPECT_EQ(zero.rhs(x, 0.7), internal);
    EXPECT_EQ(removed.rhs(x, 0.7), internal);
    EXPECT_EQ((m.rhs(x, 0.7) - removed.rhs(x, 0.7)), m.force_value(x, 0.7));

    const auto sine = replace_force(m, KnownForce::sine(3.0));
    EXPECT_NEAR(sine.rhs(x, 0.5)[1] - internal[1], std::sin(1.5), 1e-15);
    EXPECT_EQ(sine.params().size(), m.params().size() - m.force()->param_count());
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
    std::mt19937_64 rng(9);
    const auto tmp = std::filesystem::temp_directory_path();
    PseudoHamiltonianModel phnn = random_phnn(4, rng, 24);
    const TankNetworkSpec tanks;
    const PseudoHamiltonianModel planted = planted_model(tanks);
    const BaselineModel base = BaselineModel::two_net(4, rng, 12);
    int k = 0;
    for (const AnyModel& model : {AnyModel{phnn}, AnyModel{planted}, AnyModel{base}}) {
        const auto path = (tmp / ("phlab_ckpt_" + std::to_string(k++) + ".bin")).string();
        save_checkpoint(model, path);
        const AnyModel back = load_checkpoint(path);
        std::remove(path.c_str());
        const Index d = std::visit([](const auto& m) { return m.dim(); }, model);
        const VectorXd x = random_vector(d, rng);
        const auto rhs = [&](const AnyModel& m) { return std::visit([&](const auto& mm) { return mm.rhs(x, 0.25); }, m); };
        EXPECT_EQ(rhs(back), rhs(model));
        EXPECT_EQ(model_descriptor(back), model_descriptor(model));
    }
}

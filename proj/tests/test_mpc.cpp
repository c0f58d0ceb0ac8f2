#include <gtest/gtest.h>

#include <random>

#include "phlab/mpc.hpp"
#include "test_support.hpp"

using namespace phlab;

namespace {

/// ẋ = u: one tank, no pipes, no dynamics of its own.
PseudoHamiltonianModel integrator_plant() {
    return PseudoHamiltonianModel(StructureMatrix(MatrixXd::Zero(1, 1)), QuadraticHamiltonian{VectorXd::Ones(1)},
                                  DampingEstimate(IndexList{}));
}

ControlSpec tank_control(const VectorXd& ref) {
    ControlSpec c;
    c.reference = ref;
    return c;
}

/// Levels the default plant settles to under a constant inflow u.
VectorXd equilibrium_levels(const TankNetworkSpec& plant, double u) {
    ControlSpec c = tank_control(VectorXd::Zero(plant.tanks));
    const SystemSpec spec = plant;
    const auto g = [&](const VectorXd& x, double t) { return controlled_rhs(spec, c, x, t, u); };
    return simulate_rhs(g, VectorXd::Zero(system_dim(spec)), 0.0, 40.0, 0.01, 20).x.back().tail(plant.tanks);
}

} // namespace

TEST(Plan, AtReferenceBeatsRandomPlans) {
    // Leak-free tanks at rest are stationary, so u = 0 keeps the levels put.
    TankNetworkSpec s;
    s.leaks.clear();
    const auto model = planted_model(s);
    VectorXd x = VectorXd::Zero(9);
    x.tail(4).setConstant(0.3);
    const ControlSpec c = tank_control(x.tail(4));
    const VectorXd u = plan(model, x, c);
    const double best = plan_cost(model, x, 0.0, u, c);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> draw(c.u_min, c.u_max);
    for (int k = 0; k < 100; ++k) {
        VectorXd r(c.horizon);
        for (Index i = 0; i < r.size(); ++i)
            r[i] = draw(rng);
        EXPECT_LE(best, plan_cost(model, x, 0.0, r, c));
    }
}

TEST(Plan, DegenerateBoxGivesZeroPlan) {
    const auto model = planted_model(TankNetworkSpec{});
    ControlSpec c = tank_control(VectorXd::Constant(4, 0.5));
    c.u_min = c.u_max = 0.0;
    EXPECT_EQ(plan(model, VectorXd::Zero(9), c), VectorXd::Zero(c.horizon));
}

TEST(Plan, OneDimensionalPlantFillsTowardReference) {
    const auto model = integrator_plant();
    for (double ref : {1.0, -1.0}) {
        ControlSpec c;
        c.reference = VectorXd::Constant(1, ref);
        const VectorXd u = plan(model, VectorXd::Zero(1), c);
        for (Index k = 0; k < u.size(); ++k) {
            EXPECT_EQ(u[k] > 0.0, ref > 0.0) << k;
            EXPECT_NE(u[k], 0.0);
        }
        // Earlier inputs act on more stages, so they are pushed harder.
        EXPECT_GE(std::abs(u[0]), std::abs(u[u.size() - 1]));
        EXPECT_LT(plan_cost(model, VectorXd::Zero(1), 0.0, u, c),
                  plan_cost(model, VectorXd::Zero(1), 0.0, VectorXd::Zero(c.horizon), c));
    }
}

TEST(Plan, GradientMatchesFiniteDifferences) {
    const auto model = planted_model(TankNetworkSpec{});
    std::mt19937_64 rng(2);
    const VectorXd x = phlab::test::random_vector(9, rng, 0.2);
    const ControlSpec c = tank_control(VectorXd::Constant(4, 0.1));
    const VectorXd u = phlab::test::random_vector(c.horizon, rng, 1.5);
    VectorXd grad;
    detail::plan_cost(model, x, 0.0, u, c, &grad);
    const VectorXd fd = phlab::test::fd_gradient([&](const VectorXd& v) { return plan_cost(model, x, 0.0, v, c); }, u);
    EXPECT_LE(phlab::test::rel_error(grad, fd), 1e-6);
}

TEST(Plan, InvalidSpecsRejected) {
    const auto model = planted_model(TankNetworkSpec{});
    ControlSpec c = tank_control(VectorXd::Zero(4));
    c.horizon = 0;
    EXPECT_THROW(plan(model, VectorXd::Zero(9), c), std::invalid_argument);
    c = tank_control(VectorXd::Zero(4));
    c.u_min = 1.0;
    c.u_max = -1.0;
    EXPECT_THROW(plan(model, VectorXd::Zero(9), c), std::invalid_argument);
    c = tank_control(VectorXd::Zero(4));
    EXPECT_THROW(plan(model, VectorXd::Constant(9, std::nan("")), c), PlanningError);
}

TEST(ClosedLoop, ZeroBoundsReproduceUncontrolledSimulation) {
    const TankNetworkSpec s;
    const auto model = planted_model(s);
    ControlSpec c = tank_control(VectorXd::Constant(4, 0.5));
    c.u_min = c.u_max = 0.0;
    c.iterations = 1;
    std::mt19937_64 rng(3);
    const VectorXd x0 = phlab::test::random_vector(9, rng);
    const ControlTrace tr = run_closed_loop(SystemSpec{s}, model, c, x0, 0.5);
    const Trajectory ref = simulate(s, x0, 0.0, 0.5, c.dt);
    ASSERT_EQ(tr.size(), ref.size());
    for (std::size_t k = 0; k < tr.size(); ++k) {
        EXPECT_LE((tr.x[k] - ref.x[k]).lpNorm<Eigen::Infinity>(), 1e-12);
        EXPECT_DOUBLE_EQ(tr.t[k], ref.t[k]);
    }
}

TEST(ClosedLoop, ApproachesEquilibriumReferenceWithinBounds) {
    // The full T = 10 run is part of the acceptance suite; two time units
    // already show the approach.
    const TankNetworkSpec s;
    const auto model = planted_model(s);
    const ControlSpec c = tank_control(equilibrium_levels(s, 1.0));
    const ControlTrace tr = run_closed_loop(SystemSpec{s}, model, c, VectorXd::Zero(9), 2.0);
    ASSERT_FALSE(tr.diverged);
    ASSERT_EQ(tr.size(), 201u);
    for (std::size_t k = 0; k + 1 < tr.size(); ++k) {
        EXPECT_GE(tr.u[k], c.u_min);
        EXPECT_LE(tr.u[k], c.u_max);
    }
    EXPECT_LT(tr.cost.back(), 0.1 * tr.cost.front());
    // Plant and model coincide, so each one-step prediction matches the plant
    // up to the difference between one RK4 step and the plant's substeps.
    for (std::size_t k = 1; k < tr.size(); ++k)
        EXPECT_LE((tr.predicted[k] - tr.x[k]).lpNorm<Eigen::Infinity>(), 1e-5) << k;
}

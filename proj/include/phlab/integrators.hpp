#pragma once

// Training discretizations and rollout solvers.
//
// A discretization maps (g, x^n, x^{n+1}, t^n, dt) to a derivative estimate
// Φ so that (x^{n+1} - x^n)/dt ≈ Φ. All four are mono-implicit: every stage is
// an explicit combination of the two endpoint samples, so evaluating Φ on
// data never requires a nonlinear solve.
//
// phi() is written once against a small algebra (x + y, x - y, s * x, t + s)
// shared by Eigen vectors with scalar time and by tape variables with a
// 1 x B time row, so the taped training loss and the plain reference
// evaluation are the same code.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "phlab/diffcore.hpp"
#include "phlab/errors.hpp"
#include "phlab/systems.hpp"

namespace phlab {

enum class Discretization { euler, rk4, midpoint, srk4 };

inline constexpr std::array<Discretization, 4> all_discretizations = {
    Discretization::euler, Discretization::rk4, Discretization::midpoint, Discretization::srk4};

/// Number of g evaluations per phi() call.
constexpr int evaluation_count(Discretization d) {
    switch (d) {
    case Discretization::euler: return 1;
    case Discretization::rk4: return 4;
    case Discretization::midpoint: return 1;
    case Discretization::srk4: return 4;
    }
    return 0;
}

inline std::string to_string(Discretization d) {
    switch (d) {
    case Discretization::euler: return "euler";
    case Discretization::rk4: return "rk4";
    case Discretization::midpoint: return "midpoint";
    case Discretization::srk4: return "srk4";
    }
    return "?";
}

inline Discretization discretization_from_string(const std::string& s) {
    for (auto d : all_discretizations)
        if (to_string(d) == s)
            return d;
    throw std::invalid_argument("unknown integrator: " + s + " (expected euler, rk4, midpoint or srk4)");
}

namespace detail {

template <class X, class T, class G>
X phi_impl(Discretization disc, const G& g, const X& xn, const X& xnp1, const T& tn, double dt) {
    switch (disc) {
    case Discretization::euler:
        return g(xn, tn);
    case Discretization::rk4: {
        const X k1 = g(xn, tn);
        const X k2 = g(X(xn + (0.5 * dt) * k1), tn + 0.5 * dt);
        const X k3 = g(X(xn + (0.5 * dt) * k2), tn + 0.5 * dt);
        const X k4 = g(X(xn + dt * k3), tn + dt);
        return (1.0 / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    case Discretization::midpoint:
        return g(X(0.5 * (xn + xnp1)), tn + 0.5 * dt);
    case Discretization::srk4: {
        const double c = std::sqrt(3.0) / 6.0;
        const double a = 0.5 + c;
        const double b = 0.5 - c;
        const X mid = 0.5 * (xn + xnp1);
        const X inner1 = g(X(a * xn + b * xnp1), tn + b * dt);
        const X inner2 = g(X(b * xn + a * xnp1), tn + a * dt);
        // The outer points approximate the state at the two Gauss nodes
        // tn + a·dt and tn + b·dt; time follows the same combination with
        // dt/dt = 1. With this sign the linear case reproduces the (2,2)
        // Padé approximant of exp.
        const X outer1 = g(X(mid + (c * dt) * inner1), tn + a * dt);
        const X outer2 = g(X(mid - (c * dt) * inner2), tn + b * dt);
        return 0.5 * (outer1 + outer2);
    }
    }
    throw std::logic_error("unreachable discretization");
}

} // namespace detail

/// Derivative estimate Φ_dt(g, xn, xnp1) at time tn; g(x, t) -> VectorXd.
template <class G>
VectorXd phi(Discretization disc, const G& g, const VectorXd& xn, const VectorXd& xnp1, double tn, double dt) {
    return detail::phi_impl<VectorXd, double>(disc, g, xn, xnp1, tn, dt);
}

/// Batched taped form: columns of xn/xnp1 are samples, tn is a 1 x B row.
template <class G>
ad::Var phi(Discretization disc, const G& g, ad::Var xn, ad::Var xnp1, ad::Var tn, double dt) {
    return detail::phi_impl<ad::Var, ad::Var>(disc, g, xn, xnp1, tn, dt);
}

/// (xnp1 - xn)/dt - Φ.
template <class G>
VectorXd residual(Discretization disc, const G& g, const VectorXd& xn, const VectorXd& xnp1, double tn, double dt) {
    return (1.0 / dt) * (xnp1 - xn) - phi(disc, g, xn, xnp1, tn, dt);
}

template <class G>
ad::Var residual(Discretization disc, const G& g, ad::Var xn, ad::Var xnp1, ad::Var tn, double dt) {
    return (1.0 / dt) * (xnp1 - xn) - phi(disc, g, xn, xnp1, tn, dt);
}

enum class RolloutSolver { rk4_explicit, midpoint_implicit };

struct RolloutOptions {
    RolloutSolver solver = RolloutSolver::rk4_explicit;
    double newton_tol = 1e-10;
    int newton_max_iter = 50;
    double fd_step = 1e-7;
    int substeps = 1; // solver steps per output interval
};

/// One implicit-midpoint step: solves y = x + dt·g((x+y)/2, t+dt/2) by
/// Newton with a forward-difference Jacobian.
template <class Rhs>
VectorXd implicit_midpoint_step(const Rhs& g, const VectorXd& x, double t, double dt, std::size_t step_index,
                                const RolloutOptions& opt) {
    const Index d = x.size();
    const double th = t + 0.5 * dt;
    VectorXd y = x + dt * g(x, t); // explicit Euler predictor
    MatrixXd jac(d, d);
    for (int it = 0; it < opt.newton_max_iter; ++it) {
        const VectorXd mid = 0.5 * (x + y);
        const VectorXd gm = g(mid, th);
        const VectorXd f = y - x - dt * gm;
        if (!f.allFinite())
            throw StepFailure(step_index, "implicit midpoint: non-finite residual");
        for (Index j = 0; j < d; ++j) {
            VectorXd yp = y;
            yp[j] += opt.fd_step;
            const VectorXd gp = g(0.5 * (x + yp), th);
            jac.col(j) = (yp - x - dt * gp - f) / opt.fd_step;
        }
        const VectorXd delta = jac.partialPivLu().solve(-f);
        y += delta;
        if (!y.allFinite())
            throw StepFailure(step_index, "implicit midpoint: non-finite iterate");
        if (delta.lpNorm<Eigen::Infinity>() <= opt.newton_tol * (1.0 + y.lpNorm<Eigen::Infinity>()))
            return y;
    }
    throw StepFailure(step_index, "implicit midpoint: Newton did not converge");
}

/// Integrates a (learned) right-hand side from x0 at t0 to t1 with step dt,
/// returning every step including the initial state.
template <class Rhs>
Trajectory rollout_rhs(const Rhs& g, const VectorXd& x0, double t0, double t1, double dt,
                       const RolloutOptions& opt = {}) {
    if (!(dt > 0.0))
        throw std::invalid_argument("rollout: dt must be positive");
    const auto n = static_cast<std::size_t>(std::llround((t1 - t0) / dt));
    Trajectory traj;
    traj.t.reserve(n + 1);
    traj.x.reserve(n + 1);
    traj.t.push_back(t0);
    traj.x.push_back(x0);
    if (opt.substeps < 1)
        throw std::invalid_argument("rollout: substeps must be positive");
    const double h = dt / opt.substeps;
    VectorXd x = x0;
    for (std::size_t k = 0; k < n; ++k) {
        const double tk = t0 + static_cast<double>(k) * dt;
        for (int s = 0; s < opt.substeps; ++s) {
            const double t = tk + s * h;
            if (opt.solver == RolloutSolver::rk4_explicit) {
                x = rk4_step(g, x, t, h);
                if (!x.allFinite())
                    throw StepFailure(k, "rollout: non-finite state");
            } else {
                x = implicit_midpoint_step(g, x, t, h, k, opt);
            }
        }
        traj.t.push_back(t0 + static_cast<double>(k + 1) * dt);
        traj.x.push_back(x);
    }
    return traj;
}

template <class Model>
Trajectory rollout(const Model& model, const VectorXd& x0, double t0, double t1, double dt,
                   const RolloutOptions& opt = {}) {
    return rollout_rhs([&model](const VectorXd& x, double t) { return model.rhs(x, t); }, x0, t0, t1, dt, opt);
}

} // namespace phlab

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "phlab/diffcore.hpp"
#include "phlab/errors.hpp"
#include "phlab/integrators.hpp"
#include "phlab/models.hpp"
#include "phlab/systems.hpp"

namespace phlab {

/// Receding-horizon tracking of tank levels with one bounded inflow. The
/// inflow is a source term u on the controlled tank's level; levels are the
/// last `reference.size()` state components.
struct ControlSpec {
    Index tank = 0;
    double u_min = -2.0;
    double u_max = 2.0;
    int horizon = 20;
    double dt = 0.01;
    VectorXd reference;
    VectorXd weights; // per tank; empty means all ones
    int iterations = 100;
    double step = 0.05;
    bool warm_start = true; // start each plan from the previous one, shifted

    void validate(Index state_dim) const {
        if (!(u_min <= u_max))
            throw std::invalid_argument("control: u_min must not exceed u_max");
        if (horizon < 1)
            throw std::invalid_argument("control: horizon must be at least 1");
        if (!(dt > 0.0))
            throw std::invalid_argument("control: dt must be positive");
        if (reference.size() == 0 || reference.size() > state_dim)
            throw StructuralError("control: reference size does not fit the state");
        if (tank < 0 || tank >= reference.size())
            throw StructuralError("control: controlled tank out of range");
        if (weights.size() != 0 && weights.size() != reference.size())
            throw StructuralError("control: weights and reference differ in size");
    }

    Index level_offset(Index state_dim) const { return state_dim - reference.size(); }
    Index control_index(Index state_dim) const { return level_offset(state_dim) + tank; }
    VectorXd weight_vector() const { return weights.size() ? weights : VectorXd::Ones(reference.size()); }

    double stage_cost(const VectorXd& x) const {
        const VectorXd e = x.tail(reference.size()) - reference;
        return e.cwiseProduct(weight_vector()).dot(e);
    }
};

namespace detail {

/// Σ_k stage_cost(x(k+1)) of an RK4 rollout of the model with control u held
/// over each step, and its gradient in u.
template <class Model>
double plan_cost(const Model& model, const VectorXd& x0, double t0, const VectorXd& u, const ControlSpec& spec,
                 VectorXd* grad) {
    const Index d = x0.size();
    const Index n = spec.reference.size();
    const Index ci = spec.control_index(d);
    ad::Tape tape;
    const auto bound = model.bind(tape, false);
    const ad::Var ref = tape.constant(spec.reference);
    const ad::Var sqrt_w = tape.constant(spec.weight_vector().cwiseSqrt());
    std::vector<Index> levels(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j)
        levels[static_cast<std::size_t>(j)] = d - n + j;

    ad::Var x = tape.constant(x0);
    std::optional<ad::Var> cost;
    const double h = spec.dt;
    for (int k = 0; k < spec.horizon; ++k) {
        const ad::Var uk = tape.leaf(MatrixXd::Constant(1, 1, u[k]), k);
        const ad::Var src = ad::scatter_rows(uk, {ci}, d);
        const double t = t0 + k * h;
        const auto g = [&](ad::Var y, double s) {
            return bound.rhs(y, tape.constant(MatrixXd::Constant(1, 1, s))) + src;
        };
        const ad::Var k1 = g(x, t);
        const ad::Var k2 = g(x + (0.5 * h) * k1, t + 0.5 * h);
        const ad::Var k3 = g(x + (0.5 * h) * k2, t + 0.5 * h);
        const ad::Var k4 = g(x + h * k3, t + h);
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        const ad::Var stage = ad::sum_squares(ad::scale_rows(ad::gather_rows(x, levels) - ref, sqrt_w));
        cost = cost ? *cost + stage : stage;
    }
    const double value = cost->value()(0, 0);
    if (grad) {
        grad->setZero(spec.horizon);
        tape.backward(*cost, *grad);
    }
    return value;
}

} // namespace detail

/// Plain-vector cost of a control sequence (same rollout as planning).
template <class Model>
double plan_cost(const Model& model, const VectorXd& x0, double t0, const VectorXd& u, const ControlSpec& spec) {
    return detail::plan_cost(model, x0, t0, u, spec, nullptr);
}

/// Projected gradient descent on the horizon cost, starting from `initial`
/// (zeros if absent) and clamping to the bounds after every step.
template <class Model>
VectorXd plan(const Model& model, const VectorXd& x_now, const ControlSpec& spec, double t_now = 0.0,
              const std::optional<VectorXd>& initial = std::nullopt) {
    spec.validate(x_now.size());
    if (!x_now.allFinite())
        throw PlanningError("plan: non-finite state");
    VectorXd u = initial ? *initial : VectorXd::Zero(spec.horizon);
    if (u.size() != spec.horizon)
        throw StructuralError("plan: initial control has wrong length");
    u = u.cwiseMax(spec.u_min).cwiseMin(spec.u_max);
    VectorXd grad(spec.horizon);
    for (int it = 0; it < spec.iterations; ++it) {
        const double c = detail::plan_cost(model, x_now, t_now, u, spec, &grad);
        if (!std::isfinite(c) || !grad.allFinite())
            throw PlanningError("plan: non-finite cost at iteration " + std::to_string(it));
        u = (u - spec.step * grad).cwiseMax(spec.u_min).cwiseMin(spec.u_max);
    }
    if (!std::isfinite(plan_cost(model, x_now, t_now, u, spec)))
        throw PlanningError("plan: non-finite cost of the final plan");
    return u;
}

struct ControlTrace {
    std::vector<double> t;
    std::vector<double> u;         // applied on [t_k, t_k+1); NaN on the final row
    std::vector<VectorXd> x;       // plant state at t_k
    std::vector<VectorXd> predicted; // model prediction of x at t_k (x(0) on the first row)
    std::vector<double> cost;      // stage cost of x at t_k
    bool diverged = false;

    std::size_t size() const noexcept { return t.size(); }

    void write_csv(std::ostream& os) const {
        if (x.empty())
            return;
        const Index d = x.front().size();
        os << "t,u,cost";
        for (Index i = 0; i < d; ++i)
            os << ",x" << i;
        for (Index i = 0; i < d; ++i)
            os << ",pred" << i;
        os << '\n';
        os.precision(17);
        for (std::size_t k = 0; k < size(); ++k) {
            os << t[k] << ',' << u[k] << ',' << cost[k];
            for (Index i = 0; i < d; ++i)
                os << ',' << x[k][i];
            for (Index i = 0; i < d; ++i)
                os << ',' << predicted[k][i];
            os << '\n';
        }
    }
};

/// Plant right-hand side plus the control source u on the controlled level.
inline VectorXd controlled_rhs(const SystemSpec& plant, const ControlSpec& spec, const VectorXd& x, double t,
                               double u) {
    VectorXd dx = system_rhs(plant, x, t);
    dx[spec.control_index(x.size())] += u;
    return dx;
}

/// Plans on the model at every control step, applies the first input to the
/// simulated plant for one control interval and repeats until T. A plant
/// failure ends the trace early with `diverged` set.
template <class Model>
ControlTrace run_closed_loop(const SystemSpec& plant, const Model& model, const ControlSpec& spec,
                             const VectorXd& x0, double T, int plant_substeps = 20) {
    const Index d = x0.size();
    spec.validate(d);
    if (d != system_dim(plant) || d != model.dim())
        throw StructuralError("closed loop: plant, model and state dimensions differ");
    const auto steps = static_cast<std::size_t>(std::llround(T / spec.dt));
    ControlTrace tr;
    VectorXd x = x0;
    VectorXd pred = x0;
    std::optional<VectorXd> warm;
    for (std::size_t k = 0; k <= steps; ++k) {
        const double t = static_cast<double>(k) * spec.dt;
        tr.t.push_back(t);
        tr.x.push_back(x);
        tr.predicted.push_back(pred);
        tr.cost.push_back(spec.stage_cost(x));
        if (k == steps) {
            tr.u.push_back(std::numeric_limits<double>::quiet_NaN());
            break;
        }
        const VectorXd u = plan(model, x, spec, t, warm);
        tr.u.push_back(u[0]);
        if (spec.warm_start) {
            VectorXd shifted(spec.horizon);
            shifted.head(spec.horizon - 1) = u.tail(spec.horizon - 1);
            shifted[spec.horizon - 1] = u[spec.horizon - 1];
            warm = shifted;
        }
        const auto model_g = [&](const VectorXd& y, double s) {
            VectorXd dy = model.rhs(y, s);
            dy[spec.control_index(d)] += u[0];
            return dy;
        };
        pred = rk4_step(model_g, x, t, spec.dt);
        try {
            x = simulate_rhs([&](const VectorXd& y, double s) { return controlled_rhs(plant, spec, y, s, u[0]); },
                             x, t, t + spec.dt, spec.dt, plant_substeps)
                    .x.back();
        } catch (const SimulationDiverged&) {
            tr.diverged = true;
            break;
        }
    }
    return tr;
}

} // namespace phlab

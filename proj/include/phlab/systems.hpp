#pragma once

// Ground-truth benchmark systems: the forced, damped mass-spring oscillator
// and a network of tanks joined by pipes with optional saturating leaks.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "phlab/errors.hpp"
#include "phlab/models.hpp"

namespace phlab {

struct MassSpringSpec {
    double mass = 1.0;
    double stiffness = 1.0;
    double damping = 0.3;
    double force_amplitude = 1.0;
    double force_omega = 3.0;

    void validate() const {
        if (!(mass > 0.0) || !(stiffness > 0.0))
            throw std::invalid_argument("mass-spring: mass and stiffness must be positive");
    }

    double force(double t) const { return force_amplitude * std::sin(force_omega * t); }
};

/// Saturating sink κ·clamp(μ_j, -s, s) on tank j (0-based).
struct LeakForce {
    Index tank = 0;
    double coefficient = 0.0;
    double saturation = 0.3;

    double operator()(double level) const { return coefficient * std::clamp(level, -saturation, saturation); }
};

struct Pipe {
    Index from = 0; // 0-based tank indices
    Index to = 0;
};

/// State x = (φ, μ): M pipe momenta followed by N tank volumes.
struct TankNetworkSpec {
    Index tanks = 4;
    std::vector<Pipe> pipes = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {0, 2}};
    VectorXd inertance = VectorXd::Constant(5, 0.02);         // J
    VectorXd area = VectorXd::Constant(4, 1.0);               // A
    VectorXd friction = (VectorXd(5) << 0.03, 0.03, 0.09, 0.03, 0.03).finished(); // R_p
    double rho = 1.0;
    double gravity = 9.81;
    std::vector<LeakForce> leaks = {{3, -10.0, 0.3}};

    Index pipe_count() const noexcept { return static_cast<Index>(pipes.size()); }
    Index dim() const noexcept { return pipe_count() + tanks; }

    /// Per-pipe incidence rows (M x N): +1 at the source tank, -1 at the target.
    MatrixXd incidence() const {
        MatrixXd b = MatrixXd::Zero(pipe_count(), tanks);
        for (Index i = 0; i < pipe_count(); ++i) {
            b(i, pipes[static_cast<std::size_t>(i)].from) = 1.0;
            b(i, pipes[static_cast<std::size_t>(i)].to) = -1.0;
        }
        return b;
    }

    void validate() const {
        const Index m = pipe_count();
        if (tanks <= 0 || m <= 0)
            throw std::invalid_argument("tank network: need at least one tank and one pipe");
        for (const auto& p : pipes)
            if (p.from < 0 || p.from >= tanks || p.to < 0 || p.to >= tanks || p.from == p.to)
                throw std::invalid_argument("tank network: a pipe must join two distinct tanks");
        if (inertance.size() != m || friction.size() != m || area.size() != tanks)
            throw std::invalid_argument("tank network: parameter vector lengths do not match topology");
        if ((inertance.array() <= 0.0).any() || (area.array() <= 0.0).any())
            throw std::invalid_argument("tank network: inertances and areas must be positive");
        for (const auto& l : leaks)
            if (l.tank < 0 || l.tank >= tanks || !(l.saturation >= 0.0))
                throw std::invalid_argument("tank network: invalid leak");
    }

    /// Weights of H = Σ φ²/(2J) + Σ gρ μ²/(2A) as a diagonal quadratic.
    VectorXd hamiltonian_weights() const {
        VectorXd w(dim());
        w.head(pipe_count()) = inertance.cwiseInverse();
        w.tail(tanks) = (gravity * rho) * area.cwiseInverse();
        return w;
    }

    /// [[0, Bᵀ], [-B, 0]] with B the N x M tank-by-pipe incidence.
    MatrixXd structure() const {
        const MatrixXd bt = incidence(); // M x N == Bᵀ
        MatrixXd s = MatrixXd::Zero(dim(), dim());
        s.topRightCorner(pipe_count(), tanks) = bt;
        s.bottomLeftCorner(tanks, pipe_count()) = -bt.transpose();
        return s;
    }
};

using SystemSpec = std::variant<MassSpringSpec, TankNetworkSpec>;

inline Index system_dim(const SystemSpec& s) {
    return std::holds_alternative<MassSpringSpec>(s) ? 2 : std::get<TankNetworkSpec>(s).dim();
}

inline VectorXd massspring_rhs(const MassSpringSpec& s, const VectorXd& x, double t) {
    VectorXd dx(2);
    dx[0] = x[1] / s.mass;
    dx[1] = -s.stiffness * x[0] - s.damping * x[1] / s.mass + s.force(t);
    return dx;
}

/// Leak contributions on the tank block (length N).
inline VectorXd tank_leak_force(const TankNetworkSpec& s, const VectorXd& x) {
    VectorXd f = VectorXd::Zero(s.tanks);
    for (const auto& l : s.leaks)
        f[l.tank] += l(x[s.pipe_count() + l.tank]);
    return f;
}

inline VectorXd tank_rhs(const TankNetworkSpec& s, const VectorXd& x, double /*t*/) {
    const Index m = s.pipe_count();
    const MatrixXd bt = s.incidence();
    const VectorXd flow = x.head(m).cwiseQuotient(s.inertance);
    const VectorXd pressure = (s.gravity * s.rho) * x.tail(s.tanks).cwiseQuotient(s.area);
    VectorXd dx(s.dim());
    dx.head(m) = -s.friction.cwiseProduct(flow) + bt * pressure;
    dx.tail(s.tanks) = -bt.transpose() * flow + tank_leak_force(s, x);
    return dx;
}

inline VectorXd system_rhs(const SystemSpec& spec, const VectorXd& x, double t) {
    return std::visit(
        [&](const auto& s) -> VectorXd {
            if constexpr (std::is_same_v<std::decay_t<decltype(s)>, MassSpringSpec>)
                return massspring_rhs(s, x, t);
            else
                return tank_rhs(s, x, t);
        },
        spec);
}

inline double exact_hamiltonian(const MassSpringSpec& s, const VectorXd& x) {
    return 0.5 * s.stiffness * x[0] * x[0] + x[1] * x[1] / (2.0 * s.mass);
}

inline double exact_hamiltonian(const TankNetworkSpec& s, const VectorXd& x) {
    return 0.5 * x.cwiseProduct(s.hamiltonian_weights()).dot(x);
}

inline double exact_hamiltonian(const SystemSpec& spec, const VectorXd& x) {
    return std::visit([&](const auto& s) { return exact_hamiltonian(s, x); }, spec);
}

inline VectorXd exact_hamiltonian_gradient(const SystemSpec& spec, const VectorXd& x) {
    if (const auto* ms = std::get_if<MassSpringSpec>(&spec))
        return (VectorXd(2) << ms->stiffness * x[0], x[1] / ms->mass).finished();
    return std::get<TankNetworkSpec>(spec).hamiltonian_weights().cwiseProduct(x);
}

/// Exact damping coefficients as the pseudo-Hamiltonian R diagonal entries
/// on `damped_indices(spec)`.
inline IndexList damped_indices(const SystemSpec& spec) {
    if (std::holds_alternative<MassSpringSpec>(spec))
        return {1};
    IndexList idx;
    for (Index i = 0; i < std::get<TankNetworkSpec>(spec).pipe_count(); ++i)
        idx.push_back(i);
    return idx;
}

inline VectorXd exact_damping(const SystemSpec& spec) {
    if (const auto* ms = std::get_if<MassSpringSpec>(&spec))
        return VectorXd::Constant(1, ms->damping);
    return std::get<TankNetworkSpec>(spec).friction;
}

inline StructureMatrix exact_structure(const SystemSpec& spec) {
    if (std::holds_alternative<MassSpringSpec>(spec))
        return StructureMatrix::canonical(1);
    return StructureMatrix(std::get<TankNetworkSpec>(spec).structure());
}

/// State indices that carry a nonzero external force in the ground truth.
inline IndexList forced_indices(const SystemSpec& spec) {
    if (std::holds_alternative<MassSpringSpec>(spec))
        return {1};
    const auto& s = std::get<TankNetworkSpec>(spec);
    IndexList idx;
    for (const auto& l : s.leaks) {
        const Index i = s.pipe_count() + l.tank;
        if (std::find(idx.begin(), idx.end(), i) == idx.end())
            idx.push_back(i);
    }
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Exact system expressed as a pseudo-Hamiltonian model: quadratic H, exact
/// damping, and the true external force on its support (if any).
inline PseudoHamiltonianModel planted_model(const SystemSpec& spec) {
    VectorXd w;
    std::optional<ForceModel> force;
    if (const auto* ms = std::get_if<MassSpringSpec>(&spec)) {
        w = (VectorXd(2) << ms->stiffness, 1.0 / ms->mass).finished();
        force = ForceModel({1}, KnownForce::sine(ms->force_omega, ms->force_amplitude));
    } else {
        const auto& s = std::get<TankNetworkSpec>(spec);
        w = s.hamiltonian_weights();
        const IndexList mask = forced_indices(spec);
        if (!mask.empty()) {
            // One saturating term per leak; leaks sharing a tank become
            // separate rows, so collapse them through the mask order.
            IndexList states;
            std::vector<double> coef, sat;
            for (Index target : mask)
                for (const auto& l : s.leaks)
                    if (s.pipe_count() + l.tank == target) {
                        states.push_back(target);
                        coef.push_back(l.coefficient);
                        sat.push_back(l.saturation);
                    }
            if (states.size() != mask.size())
                throw std::invalid_argument("planted_model: at most one leak per tank is supported");
            force = ForceModel(mask, KnownForce::saturating(states, coef, sat));
        }
    }
    DampingEstimate damping(damped_indices(spec), exact_damping(spec));
    return PseudoHamiltonianModel(exact_structure(spec), QuadraticHamiltonian{w}, std::move(damping),
                                  std::move(force));
}

/// Fixed-step classic RK4 of a generic right-hand side.
template <class Rhs>
VectorXd rk4_step(const Rhs& f, const VectorXd& x, double t, double h) {
    const VectorXd k1 = f(x, t);
    const VectorXd k2 = f(x + 0.5 * h * k1, t + 0.5 * h);
    const VectorXd k3 = f(x + 0.5 * h * k2, t + 0.5 * h);
    const VectorXd k4 = f(x + h * k3, t + h);
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

struct Trajectory {
    std::vector<double> t;
    std::vector<VectorXd> x;

    std::size_t size() const noexcept { return t.size(); }
};

/// Samples at t0, t0 + dt, ..., t1 (inclusive, within round-off), each sample
/// interval integrated with `substeps` RK4 steps.
template <class Rhs>
Trajectory simulate_rhs(const Rhs& f, const VectorXd& x0, double t0, double t1, double sample_dt,
                        int substeps = 20) {
    if (!(sample_dt > 0.0))
        throw std::invalid_argument("simulate: sample_dt must be positive");
    if (substeps < 1)
        throw std::invalid_argument("simulate: substeps must be positive");
    const auto n = static_cast<std::size_t>(std::llround((t1 - t0) / sample_dt));
    Trajectory traj;
    traj.t.reserve(n + 1);
    traj.x.reserve(n + 1);
    traj.t.push_back(t0);
    traj.x.push_back(x0);
    VectorXd x = x0;
    const double h = sample_dt / substeps;
    for (std::size_t k = 0; k < n; ++k) {
        const double ts = t0 + static_cast<double>(k) * sample_dt;
        for (int s = 0; s < substeps; ++s)
            x = rk4_step(f, x, ts + s * h, h);
        if (!x.allFinite())
            throw SimulationDiverged("simulate: non-finite state at sample " + std::to_string(k + 1));
        traj.t.push_back(t0 + static_cast<double>(k + 1) * sample_dt);
        traj.x.push_back(x);
    }
    return traj;
}

inline Trajectory simulate(const SystemSpec& spec, const VectorXd& x0, double t0, double t1, double sample_dt,
                           int substeps = 20) {
    if (x0.size() != system_dim(spec))
        throw StructuralError("simulate: initial state has wrong dimension");
    return simulate_rhs([&](const VectorXd& x, double t) { return system_rhs(spec, x, t); }, x0, t0, t1,
                        sample_dt, substeps);
}

// JSON

inline nlohmann::json to_json(const SystemSpec& spec) {
    if (const auto* ms = std::get_if<MassSpringSpec>(&spec)) {
        return {{"type", "mass_spring"},
                {"mass", ms->mass},
                {"stiffness", ms->stiffness},
                {"damping", ms->damping},
                {"force", {{"amplitude", ms->force_amplitude}, {"omega", ms->force_omega}}}};
    }
    const auto& s = std::get<TankNetworkSpec>(spec);
    nlohmann::json pipes = nlohmann::json::array();
    for (const auto& p : s.pipes)
        pipes.push_back({p.from, p.to});
    nlohmann::json leaks = nlohmann::json::array();
    for (const auto& l : s.leaks)
        leaks.push_back({{"tank", l.tank}, {"coefficient", l.coefficient}, {"saturation", l.saturation}});
    auto vec = [](const VectorXd& v) { return std::vector<double>(v.begin(), v.end()); };
    return {{"type", "tank_network"}, {"tanks", s.tanks},          {"pipes", pipes},
            {"inertance", vec(s.inertance)}, {"area", vec(s.area)}, {"friction", vec(s.friction)},
            {"rho", s.rho},                  {"gravity", s.gravity}, {"leaks", leaks}};
}

inline SystemSpec system_from_json(const nlohmann::json& j) {
    const auto type = j.at("type").get<std::string>();
    if (type == "mass_spring") {
        MassSpringSpec s;
        s.mass = j.value("mass", 1.0);
        s.stiffness = j.value("stiffness", 1.0);
        s.damping = j.value("damping", 0.3);
        if (j.contains("force")) {
            s.force_amplitude = j["force"].value("amplitude", 1.0);
            s.force_omega = j["force"].value("omega", 3.0);
        }
        s.validate();
        return s;
    }
    if (type == "tank_network") {
        TankNetworkSpec s;
        auto vec = [](const nlohmann::json& a) {
            const auto v = a.get<std::vector<double>>();
            return VectorXd(Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size())));
        };
        s.tanks = j.value("tanks", s.tanks);
        if (j.contains("pipes")) {
            s.pipes.clear();
            for (const auto& p : j["pipes"])
                s.pipes.push_back({p.at(0).get<Index>(), p.at(1).get<Index>()});
        }
        if (j.contains("inertance")) s.inertance = vec(j["inertance"]);
        if (j.contains("area")) s.area = vec(j["area"]);
        if (j.contains("friction")) s.friction = vec(j["friction"]);
        s.rho = j.value("rho", 1.0);
        s.gravity = j.value("gravity", 9.81);
        if (j.contains("leaks")) {
            s.leaks.clear();
            for (const auto& l : j["leaks"])
                s.leaks.push_back({l.at("tank").get<Index>(), l.at("coefficient").get<double>(),
                                   l.value("saturation", 0.3)});
        }
        s.validate();
        return s;
    }
    throw std::invalid_argument("unknown system type: " + type);
}

inline SystemSpec load_system(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw std::runtime_error("cannot open system file: " + path);
    return system_from_json(nlohmann::json::parse(is));
}

} // namespace phlab

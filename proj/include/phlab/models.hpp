#pragma once

// Trainable dynamics models:
//   PseudoHamiltonianModel  g(x,t) = (S - R) grad H(x) + f(x,t)
//   BaselineModel           unstructured one-net / two-net regressors
// Both expose a plain evaluation path (Eigen vectors, used for rollouts) and
// a taped batched path (used for training and planning).

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "phlab/diffcore.hpp"
#include "phlab/errors.hpp"
#include "phlab/param_vector.hpp"
#include "phlab/scalar_net.hpp"

namespace phlab {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using IndexList = std::vector<Index>;

/// Constant skew-symmetric structure matrix.
class StructureMatrix {
public:
    StructureMatrix() = default;

    explicit StructureMatrix(MatrixXd s) : s_(std::move(s)) {
        if (s_.rows() != s_.cols())
            throw StructuralError("structure matrix must be square");
        for (Index i = 0; i < s_.rows(); ++i)
            for (Index j = 0; j < s_.cols(); ++j)
                if (s_(i, j) != -s_(j, i))
                    throw StructuralError("structure matrix must satisfy S = -S^T exactly");
    }

    /// [[0, I], [-I, 0]] in dimension 2n.
    static StructureMatrix canonical(Index n) {
        MatrixXd s = MatrixXd::Zero(2 * n, 2 * n);
        s.topRightCorner(n, n).setIdentity();
        s.bottomLeftCorner(n, n) = -MatrixXd::Identity(n, n);
        return StructureMatrix(std::move(s));
    }

    const MatrixXd& matrix() const noexcept { return s_; }
    Index dim() const noexcept { return s_.rows(); }

private:
    MatrixXd s_;
};

/// Diagonal damping with one learnable coefficient per index in `indices`.
struct DampingEstimate {
    IndexList indices;
    VectorXd values;

    DampingEstimate() = default;
    explicit DampingEstimate(IndexList idx) : indices(std::move(idx)), values(VectorXd::Zero(static_cast<Index>(indices.size()))) {}
    DampingEstimate(IndexList idx, VectorXd vals) : indices(std::move(idx)), values(std::move(vals)) {
        if (values.size() != static_cast<Index>(indices.size()))
            throw StructuralError("damping: one value per index");
    }

    /// Diagonal of R as a length-d vector, exactly zero off the index set.
    VectorXd diagonal(Index d) const {
        VectorXd r = VectorXd::Zero(d);
        for (std::size_t i = 0; i < indices.size(); ++i)
            r[indices[i]] = values[static_cast<Index>(i)];
        return r;
    }

    MatrixXd matrix(Index d) const { return diagonal(d).asDiagonal(); }
};

enum class ForceInput { state_time, time_only, state_only };

inline std::string to_string(ForceInput m) {
    switch (m) {
    case ForceInput::state_time: return "state_time";
    case ForceInput::time_only: return "time_only";
    case ForceInput::state_only: return "state_only";
    }
    return "?";
}

inline ForceInput force_input_from_string(const std::string& s) {
    if (s == "state_time") return ForceInput::state_time;
    if (s == "time_only") return ForceInput::time_only;
    if (s == "state_only") return ForceInput::state_only;
    throw std::invalid_argument("unknown force input mode: " + s);
}

/// A force given in closed form rather than learned. Both evaluation paths
/// receive the full state and time and return |mask| components.
struct KnownForce {
    std::function<VectorXd(const VectorXd&, double)> plain;
    std::function<ad::Var(ad::Var, ad::Var)> taped;
    nlohmann::json descriptor; // null when not serialisable

    static KnownForce zero(Index outputs) {
        KnownForce f;
        f.plain = [outputs](const VectorXd&, double) { return VectorXd::Zero(outputs); };
        f.taped = [outputs](ad::Var x, ad::Var) {
            return x.tape()->constant(MatrixXd::Zero(outputs, x.cols()));
        };
        f.descriptor = {{"type", "zero"}, {"outputs", outputs}};
        return f;
    }

    /// amplitude * sin(omega t) on a single masked component.
    static KnownForce sine(double omega, double amplitude = 1.0) {
        KnownForce f;
        f.plain = [=](const VectorXd&, double t) {
            VectorXd v(1);
            v[0] = amplitude * std::sin(omega * t);
            return v;
        };
        f.taped = [=](ad::Var, ad::Var t) { return amplitude * ad::sin(omega * t); };
        f.descriptor = {{"type", "sine"}, {"omega", omega}, {"amplitude", amplitude}};
        return f;
    }

    /// Saturating sinks coefficient_k * clamp(x[state_k], -s_k, s_k), one per
    /// masked component.
    static KnownForce saturating(IndexList states, std::vector<double> coefficients,
                                 std::vector<double> saturations) {
        if (states.size() != coefficients.size() || states.size() != saturations.size())
            throw StructuralError("saturating force: inconsistent term lists");
        KnownForce f;
        f.plain = [=](const VectorXd& x, double) {
            VectorXd v(static_cast<Index>(states.size()));
            for (std::size_t k = 0; k < states.size(); ++k)
                v[static_cast<Index>(k)] =
                    coefficients[k] * std::clamp(x[states[k]], -saturations[k], saturations[k]);
            return v;
        };
        f.taped = [=](ad::Var x, ad::Var) {
            std::optional<ad::Var> out;
            for (std::size_t k = 0; k < states.size(); ++k) {
                ad::Var term = coefficients[k] * ad::clamp(ad::gather_rows(x, {states[k]}), -saturations[k],
                                                           saturations[k]);
                out = out ? ad::vcat(*out, term) : term;
            }
            return *out;
        };
        f.descriptor = {{"type", "saturating"},
                        {"states", states},
                        {"coefficients", coefficients},
                        {"saturations", saturations}};
        return f;
    }

    static KnownForce from_json(const nlohmann::json& j) {
        const auto type = j.at("type").get<std::string>();
        if (type == "zero")
            return zero(j.at("outputs").get<Index>());
        if (type == "sine")
            return sine(j.at("omega").get<double>(), j.value("amplitude", 1.0));
        if (type == "saturating")
            return saturating(j.at("states").get<IndexList>(), j.at("coefficients").get<std::vector<double>>(),
                              j.at("saturations").get<std::vector<double>>());
        throw std::invalid_argument("unknown known-force type: " + type);
    }
};

/// External force written into the components listed in `mask`.
class ForceModel {
public:
    ForceModel() = default;

    ForceModel(ForceInput input, IndexList mask, Index state_dim, Index hidden = 100)
        : input_(input), mask_(std::move(mask)),
          impl_(ScalarNet(input_width(input, state_dim), static_cast<Index>(mask_.size()), hidden)) {
        if (mask_.empty())
            throw StructuralError("force mask must be nonempty");
    }

    ForceModel(IndexList mask, KnownForce known) : mask_(std::move(mask)), impl_(std::move(known)) {}

    ForceInput input() const noexcept { return input_; }
    const IndexList& mask() const noexcept { return mask_; }
    bool learned() const noexcept { return std::holds_alternative<ScalarNet>(impl_); }
    ScalarNet& net() { return std::get<ScalarNet>(impl_); }
    const ScalarNet& net() const { return std::get<ScalarNet>(impl_); }
    const KnownForce& known() const { return std::get<KnownForce>(impl_); }

    Index param_count() const { return learned() ? net().param_count() : 0; }

    /// Masked components only (length |mask|).
    VectorXd masked(const VectorXd& x, double t) const {
        if (!learned())
            return known().plain(x, t);
        return net().forward(net_input(x, t));
    }

    /// Full d-vector, exactly zero outside the mask.
    VectorXd full(const VectorXd& x, double t) const {
        const VectorXd m = masked(x, t);
        VectorXd out = VectorXd::Zero(x.size());
        for (std::size_t i = 0; i < mask_.size(); ++i)
            out[mask_[i]] = m[static_cast<Index>(i)];
        return out;
    }

    VectorXd net_input(const VectorXd& x, double t) const {
        switch (input_) {
        case ForceInput::state_only: return x;
        case ForceInput::time_only: return VectorXd::Constant(1, t);
        case ForceInput::state_time: {
            VectorXd in(x.size() + 1);
            in << x, t;
            return in;
        }
        }
        return x;
    }

    static Index input_width(ForceInput mode, Index state_dim) {
        switch (mode) {
        case ForceInput::state_only: return state_dim;
        case ForceInput::time_only: return 1;
        case ForceInput::state_time: return state_dim + 1;
        }
        return state_dim;
    }

private:
    ForceInput input_ = ForceInput::state_time;
    IndexList mask_;
    std::variant<ScalarNet, KnownForce> impl_;
};

/// H(x) = ½ Σ w_i x_i², used to plant exact Hamiltonians.
struct QuadraticHamiltonian {
    VectorXd weights;

    double value(const VectorXd& x) const { return 0.5 * x.cwiseProduct(weights).dot(x); }
    VectorXd gradient(const VectorXd& x) const { return weights.cwiseProduct(x); }
};

class PseudoHamiltonianModel {
public:
    using Hamiltonian = std::variant<ScalarNet, QuadraticHamiltonian>;

    PseudoHamiltonianModel() = default;

    PseudoHamiltonianModel(StructureMatrix s, Hamiltonian h, DampingEstimate damping,
                           std::optional<ForceModel> force = std::nullopt)
        : s_(std::move(s)), h_(std::move(h)), damping_(std::move(damping)), force_(std::move(force)) {
        validate();
    }

    /// Learned model with network Hamiltonian and zero-initialised damping.
    template <class Rng>
    static PseudoHamiltonianModel make(StructureMatrix s, IndexList damped, std::optional<ForceModel> force,
                                       Rng& rng, Index hidden = 100) {
        ScalarNet h(s.dim(), 1, hidden);
        h.initialize(rng);
        if (force && force->learned())
            force->net().initialize(rng);
        return PseudoHamiltonianModel(std::move(s), std::move(h), DampingEstimate(std::move(damped)),
                                      std::move(force));
    }

    Index dim() const noexcept { return s_.dim(); }
    const StructureMatrix& structure() const noexcept { return s_; }
    const Hamiltonian& hamiltonian() const noexcept { return h_; }
    Hamiltonian& hamiltonian() noexcept { return h_; }
    const DampingEstimate& damping() const noexcept { return damping_; }
    DampingEstimate& damping() noexcept { return damping_; }
    const std::optional<ForceModel>& force() const noexcept { return force_; }
    std::optional<ForceModel>& force() noexcept { return force_; }

    double hamiltonian_value(const VectorXd& x) const {
        return std::visit(
            [&](const auto& h) -> double {
                if constexpr (std::is_same_v<std::decay_t<decltype(h)>, ScalarNet>)
                    return h.forward(x)[0];
                else
                    return h.value(x);
            },
            h_);
    }

    VectorXd grad_hamiltonian(const VectorXd& x) const {
        return std::visit(
            [&](const auto& h) -> VectorXd {
                if constexpr (std::is_same_v<std::decay_t<decltype(h)>, ScalarNet>)
                    return h.grad_input(x);
                else
                    return h.gradient(x);
            },
            h_);
    }

    /// Assembled force, zero vector when the model has none.
    VectorXd force_value(const VectorXd& x, double t) const {
        return force_ ? force_->full(x, t) : VectorXd::Zero(dim());
    }

    /// (S - R) grad H(x) + f(x, t).
    VectorXd rhs(const VectorXd& x, double t) const {
        if (x.size() != dim())
            throw StructuralError("model input has wrong dimension");
        const VectorXd g = grad_hamiltonian(x);
        VectorXd out = s_.matrix() * g - damping_.diagonal(dim()).cwiseProduct(g);
        if (force_)
            out += force_->full(x, t);
        return out;
    }

    // Parameter layout: [hamiltonian][damping][force].

    ParamVector params() const {
        ParamVector p;
        if (const auto* net = std::get_if<ScalarNet>(&h_)) {
            const auto off = p.append("hamiltonian", net->param_count());
            net->flatten_into(p.values().segment(off, net->param_count()));
        }
        const auto nd = static_cast<Index>(damping_.indices.size());
        if (nd > 0) {
            const auto off = p.append("damping", nd);
            p.values().segment(off, nd) = damping_.values;
        }
        if (force_ && force_->learned()) {
            const auto n = force_->param_count();
            const auto off = p.append("force", n);
            force_->net().flatten_into(p.values().segment(off, n));
        }
        return p;
    }

    void set_params(const VectorXd& theta) {
        Index k = 0;
        if (auto* net = std::get_if<ScalarNet>(&h_)) {
            net->unflatten_from(theta.segment(k, net->param_count()));
            k += net->param_count();
        }
        const auto nd = static_cast<Index>(damping_.indices.size());
        damping_.values = theta.segment(k, nd);
        k += nd;
        if (force_ && force_->learned()) {
            force_->net().unflatten_from(theta.segment(k, force_->param_count()));
            k += force_->param_count();
        }
        if (k != theta.size())
            throw StructuralError("parameter vector length does not match model");
    }

    /// Taped view of the model on one tape.
    class Bound {
    public:
        /// Batched g(X, T): X is d x B, T is 1 x B.
        ad::Var rhs(ad::Var x, ad::Var t) const {
            const ad::Var g = grad_h(x);
            ad::Var out = ad::matmul(s_, g);
            if (damping_)
                out = out - ad::scale_rows(g, *damping_);
            if (auto f = force(x, t))
                out = out + ad::scatter_rows(*f, model_->force_->mask(), model_->dim());
            return out;
        }

        /// Masked force rows (|mask| x B), or nullopt if the model has none.
        std::optional<ad::Var> force(ad::Var x, ad::Var t) const {
            if (!model_->force_)
                return std::nullopt;
            const ForceModel& fm = *model_->force_;
            if (!fm.learned())
                return fm.known().taped(x, t);
            switch (fm.input()) {
            case ForceInput::state_only: return ScalarNet::forward(*force_net_, x);
            case ForceInput::time_only: return ScalarNet::forward(*force_net_, t);
            case ForceInput::state_time: return ScalarNet::forward(*force_net_, ad::vcat(x, t));
            }
            return std::nullopt;
        }

        ad::Var grad_h(ad::Var x) const {
            if (h_net_)
                return ScalarNet::grad_input(*h_net_, x);
            return ad::scale_rows(x, *h_weights_);
        }

    private:
        friend class PseudoHamiltonianModel;
        const PseudoHamiltonianModel* model_ = nullptr;
        ad::Var s_;
        std::optional<ad::Var> damping_;
        std::optional<ScalarNet::Bound> h_net_;
        std::optional<ad::Var> h_weights_;
        std::optional<ScalarNet::Bound> force_net_;
    };

    /// With `trainable`, parameter leaves send gradients to the params()
    /// layout; otherwise every parameter is a tape constant.
    Bound bind(ad::Tape& tape, bool trainable) const {
        Bound b;
        b.model_ = this;
        b.s_ = tape.constant(s_.matrix());
        Index k = 0;
        auto off = [&](Index n) {
            const Index o = trainable ? k : -1;
            k += n;
            return o;
        };
        if (const auto* net = std::get_if<ScalarNet>(&h_)) {
            b.h_net_ = net->bind(tape, off(net->param_count()));
        } else {
            b.h_weights_ = tape.constant(std::get<QuadraticHamiltonian>(h_).weights);
        }
        const auto nd = static_cast<Index>(damping_.indices.size());
        if (nd > 0) {
            const Index o = off(nd);
            const ad::Var r = o >= 0 ? tape.leaf(damping_.values, o) : tape.constant(damping_.values);
            b.damping_ = ad::scatter_rows(r, damping_.indices, dim());
        }
        if (force_ && force_->learned())
            b.force_net_ = force_->net().bind(tape, off(force_->param_count()));
        return b;
    }

    nlohmann::json descriptor() const {
        nlohmann::json j;
        j["kind"] = "phnn";
        j["dim"] = dim();
        std::vector<std::vector<double>> s(static_cast<std::size_t>(dim()));
        for (Index i = 0; i < dim(); ++i)
            for (Index c = 0; c < dim(); ++c)
                s[static_cast<std::size_t>(i)].push_back(s_.matrix()(i, c));
        j["S"] = s;
        j["damping"] = {{"indices", damping_.indices}};
        if (const auto* net = std::get_if<ScalarNet>(&h_)) {
            j["hamiltonian"] = {{"type", "net"}, {"hidden", net->hidden()}};
        } else {
            const auto& w = std::get<QuadraticHamiltonian>(h_).weights;
            j["hamiltonian"] = {{"type", "quadratic"}, {"weights", std::vector<double>(w.begin(), w.end())}};
        }
        if (!force_) {
            j["force"] = nullptr;
        } else if (force_->learned()) {
            j["force"] = {{"type", "net"},
                          {"input", to_string(force_->input())},
                          {"mask", force_->mask()},
                          {"hidden", force_->net().hidden()}};
        } else {
            if (force_->known().descriptor.is_null())
                throw std::invalid_argument("custom known force cannot be serialised");
            j["force"] = {{"type", "known"}, {"mask", force_->mask()}, {"function", force_->known().descriptor}};
        }
        return j;
    }

    /// Structure-only reconstruction; parameters come from set_params.
    static PseudoHamiltonianModel from_descriptor(const nlohmann::json& j) {
        const auto d = j.at("dim").get<Index>();
        MatrixXd s(d, d);
        const auto rows = j.at("S").get<std::vector<std::vector<double>>>();
        for (Index i = 0; i < d; ++i)
            for (Index c = 0; c < d; ++c)
                s(i, c) = rows.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(c));
        Hamiltonian h;
        const auto& hj = j.at("hamiltonian");
        if (hj.at("type") == "net") {
            h = ScalarNet(d, 1, hj.at("hidden").get<Index>());
        } else {
            const auto w = hj.at("weights").get<std::vector<double>>();
            h = QuadraticHamiltonian{Eigen::Map<const VectorXd>(w.data(), static_cast<Index>(w.size()))};
        }
        std::optional<ForceModel> force;
        const auto& fj = j.at("force");
        if (!fj.is_null()) {
            const auto mask = fj.at("mask").get<IndexList>();
            if (fj.at("type") == "net")
                force = ForceModel(force_input_from_string(fj.at("input").get<std::string>()), mask, d,
                                   fj.at("hidden").get<Index>());
            else
                force = ForceModel(mask, KnownForce::from_json(fj.at("function")));
        }
        return PseudoHamiltonianModel(StructureMatrix(std::move(s)), std::move(h),
                                      DampingEstimate(j.at("damping").at("indices").get<IndexList>()),
                                      std::move(force));
    }

private:
    void validate() const {
        const Index d = dim();
        if (const auto* net = std::get_if<ScalarNet>(&h_)) {
            if (net->input_dim() != d || net->output_dim() != 1)
                throw StructuralError("Hamiltonian network must map R^d to R");
        } else if (std::get<QuadraticHamiltonian>(h_).weights.size() != d) {
            throw StructuralError("quadratic Hamiltonian weight count must equal d");
        }
        for (Index i : damping_.indices)
            if (i < 0 || i >= d)
                throw StructuralError("damping index out of range");
        if (force_) {
            for (Index i : force_->mask())
                if (i < 0 || i >= d)
                    throw StructuralError("force mask index out of range");
            if (force_->learned()) {
                if (force_->net().input_dim() != ForceModel::input_width(force_->input(), d) ||
                    force_->net().output_dim() != static_cast<Index>(force_->mask().size()))
                    throw StructuralError("force network shape does not match its mode and mask");
            }
        }
    }

    StructureMatrix s_;
    Hamiltonian h_;
    DampingEstimate damping_;
    std::optional<ForceModel> force_;
};

/// H(x) - H(0): removes the unidentifiable constant offset.
inline double adjusted_hamiltonian(const PseudoHamiltonianModel& model, const VectorXd& x) {
    return model.hamiltonian_value(x) - model.hamiltonian_value(VectorXd::Zero(model.dim()));
}

/// Masked force at each (x, t) sample minus its mean over the samples;
/// returns |mask| x n.
inline MatrixXd adjusted_force(const PseudoHamiltonianModel& model, const std::vector<VectorXd>& states,
                               const std::vector<double>& times) {
    if (states.empty())
        throw std::invalid_argument("adjusted_force: empty sample set");
    if (states.size() != times.size())
        throw std::invalid_argument("adjusted_force: states and times differ in length");
    if (!model.force())
        throw std::invalid_argument("adjusted_force: model has no force term");
    const auto n = static_cast<Index>(states.size());
    const auto m = static_cast<Index>(model.force()->mask().size());
    MatrixXd f(m, n);
    for (Index i = 0; i < n; ++i)
        f.col(i) = model.force()->masked(states[static_cast<std::size_t>(i)], times[static_cast<std::size_t>(i)]);
    const VectorXd mean = f.rowwise().mean();
    f.colwise() -= mean;
    return f;
}

/// Same model with its force term swapped for `known` on the same mask;
/// Hamiltonian and damping are untouched.
inline PseudoHamiltonianModel replace_force(PseudoHamiltonianModel model, KnownForce known) {
    if (!model.force())
        throw std::invalid_argument("replace_force: model has no force term to replace");
    IndexList mask = model.force()->mask();
    model.force() = ForceModel(std::move(mask), std::move(known));
    return model;
}

/// Same model without any force term.
inline PseudoHamiltonianModel remove_force(PseudoHamiltonianModel model) {
    model.force().reset();
    return model;
}

/// Unstructured reference models.
class BaselineModel {
public:
    enum class Variant { one_net, two_net };

    BaselineModel() = default;

    /// One network on (x, t) (or x only when `use_time` is false).
    template <class Rng>
    static BaselineModel one_net(Index d, Rng& rng, bool use_time = true, Index hidden = 150) {
        BaselineModel b;
        b.variant_ = Variant::one_net;
        b.dim_ = d;
        b.use_time_ = use_time;
        b.state_net_ = ScalarNet(use_time ? d + 1 : d, d, hidden);
        b.state_net_.initialize(rng);
        return b;
    }

    /// A state network plus a time network, summed.
    template <class Rng>
    static BaselineModel two_net(Index d, Rng& rng, Index hidden = 100) {
        BaselineModel b;
        b.variant_ = Variant::two_net;
        b.dim_ = d;
        b.state_net_ = ScalarNet(d, d, hidden);
        b.time_net_ = ScalarNet(1, d, hidden);
        b.state_net_.initialize(rng);
        b.time_net_.initialize(rng);
        return b;
    }

    Variant variant() const noexcept { return variant_; }
    Index dim() const noexcept { return dim_; }
    bool uses_time() const noexcept { return variant_ == Variant::two_net || use_time_; }
    ScalarNet& state_net() noexcept { return state_net_; }
    ScalarNet& time_net() noexcept { return time_net_; }
    const ScalarNet& state_net() const noexcept { return state_net_; }
    const ScalarNet& time_net() const noexcept { return time_net_; }

    VectorXd rhs(const VectorXd& x, double t) const {
        if (x.size() != dim_)
            throw StructuralError("model input has wrong dimension");
        if (variant_ == Variant::two_net)
            return state_net_.forward(x) + time_net_.forward(VectorXd::Constant(1, t));
        if (!use_time_)
            return state_net_.forward(x);
        VectorXd in(dim_ + 1);
        in << x, t;
        return state_net_.forward(in);
    }

    ParamVector params() const {
        ParamVector p;
        const auto off = p.append(variant_ == Variant::one_net ? "net" : "state_net", state_net_.param_count());
        state_net_.flatten_into(p.values().segment(off, state_net_.param_count()));
        if (variant_ == Variant::two_net) {
            const auto o2 = p.append("time_net", time_net_.param_count());
            time_net_.flatten_into(p.values().segment(o2, time_net_.param_count()));
        }
        return p;
    }

    void set_params(const VectorXd& theta) {
        const Index n1 = state_net_.param_count();
        const Index n2 = variant_ == Variant::two_net ? time_net_.param_count() : 0;
        if (theta.size() != n1 + n2)
            throw StructuralError("parameter vector length does not match model");
        state_net_.unflatten_from(theta.head(n1));
        if (n2 > 0)
            time_net_.unflatten_from(theta.tail(n2));
    }

    class Bound {
    public:
        ad::Var rhs(ad::Var x, ad::Var t) const {
            if (model_->variant_ == Variant::two_net)
                return ScalarNet::forward(state_, x) + ScalarNet::forward(*time_, t);
            if (!model_->use_time_)
                return ScalarNet::forward(state_, x);
            return ScalarNet::forward(state_, ad::vcat(x, t));
        }
        std::optional<ad::Var> force(ad::Var, ad::Var) const { return std::nullopt; }

    private:
        friend class BaselineModel;
        const BaselineModel* model_ = nullptr;
        ScalarNet::Bound state_;
        std::optional<ScalarNet::Bound> time_;
    };

    Bound bind(ad::Tape& tape, bool trainable) const {
        Bound b;
        b.model_ = this;
        b.state_ = state_net_.bind(tape, trainable ? 0 : -1);
        if (variant_ == Variant::two_net)
            b.time_ = time_net_.bind(tape, trainable ? state_net_.param_count() : -1);
        return b;
    }

    nlohmann::json descriptor() const {
        return {{"kind", variant_ == Variant::one_net ? "baseline1" : "baseline2"},
                {"dim", dim_},
                {"use_time", uses_time()},
                {"hidden", state_net_.hidden()}};
    }

    static BaselineModel from_descriptor(const nlohmann::json& j) {
        BaselineModel b;
        b.dim_ = j.at("dim").get<Index>();
        const auto hidden = j.at("hidden").get<Index>();
        if (j.at("kind") == "baseline1") {
            b.variant_ = Variant::one_net;
            b.use_time_ = j.value("use_time", true);
            b.state_net_ = ScalarNet(b.use_time_ ? b.dim_ + 1 : b.dim_, b.dim_, hidden);
        } else {
            b.variant_ = Variant::two_net;
            b.state_net_ = ScalarNet(b.dim_, b.dim_, hidden);
            b.time_net_ = ScalarNet(1, b.dim_, hidden);
        }
        return b;
    }

private:
    Variant variant_ = Variant::one_net;
    Index dim_ = 0;
    bool use_time_ = true;
    ScalarNet state_net_;
    ScalarNet time_net_;
};

/// Either model family behind one value type (checkpoints, CLI).
using AnyModel = std::variant<PseudoHamiltonianModel, BaselineModel>;

inline nlohmann::json model_descriptor(const AnyModel& m) {
    return std::visit([](const auto& x) { return x.descriptor(); }, m);
}

inline void save_checkpoint(const AnyModel& m, const std::string& path) {
    const ParamVector p = std::visit([](const auto& x) { return x.params(); }, m);
    p.save(path, {{"model", model_descriptor(m)}});
}

inline AnyModel load_checkpoint(const std::string& path) {
    nlohmann::json header;
    const ParamVector p = ParamVector::load(path, &header);
    const auto& d = header.at("model");
    AnyModel m;
    if (d.at("kind") == "phnn")
        m = PseudoHamiltonianModel::from_descriptor(d);
    else
        m = BaselineModel::from_descriptor(d);
    std::visit([&](auto& x) { x.set_params(p.values()); }, m);
    return m;
}

} // namespace phlab

#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "phlab/adam.hpp"
#include "phlab/datagen.hpp"
#include "phlab/diffcore.hpp"
#include "phlab/errors.hpp"
#include "phlab/integrators.hpp"
#include "phlab/models.hpp"
#include "phlab/systems.hpp"

namespace phlab {

/// Piecewise-constant λ: each entry (first_epoch, value) holds until the next.
class LambdaSchedule {
public:
    LambdaSchedule() = default;
    explicit LambdaSchedule(double constant) : entries_{{0, constant}} { validate(); }
    explicit LambdaSchedule(std::vector<std::pair<std::size_t, double>> entries) : entries_(std::move(entries)) {
        validate();
    }

    /// "0:0.3,150:0.1,300:0.03" or a bare number.
    static LambdaSchedule parse(const std::string& text) {
        std::vector<std::pair<std::size_t, double>> entries;
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto colon = item.find(':');
            if (colon == std::string::npos) {
                entries.emplace_back(0, std::stod(item));
            } else {
                entries.emplace_back(static_cast<std::size_t>(std::stoul(item.substr(0, colon))),
                                     std::stod(item.substr(colon + 1)));
            }
        }
        return LambdaSchedule(std::move(entries));
    }

    double at(std::size_t epoch) const {
        double v = 0.0;
        for (const auto& [start, value] : entries_)
            if (start <= epoch)
                v = value;
        return v;
    }

    const auto& entries() const noexcept { return entries_; }

    std::string str() const {
        std::string s;
        for (const auto& [start, value] : entries_) {
            if (!s.empty())
                s += ',';
            std::ostringstream os;
            os << start << ':' << value;
            s += os.str();
        }
        return s;
    }

private:
    void validate() const {
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!(entries_[i].second >= 0.0))
                throw std::invalid_argument("lambda schedule: values must be non-negative");
            if (i > 0 && entries_[i].first < entries_[i - 1].first)
                throw std::invalid_argument("lambda schedule: epochs must be non-decreasing");
        }
    }

    std::vector<std::pair<std::size_t, double>> entries_;
};

/// N in the force penalty λ/N·‖f̂‖₁: the state dimension (a per-component
/// mean, like the squared residual) or the number of training pairs.
enum class PenaltyNorm { state_dim, pairs };

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    AdamConfig adam;
    Discretization integrator = Discretization::midpoint;
    LambdaSchedule lambda;
    PenaltyNorm penalty_norm = PenaltyNorm::state_dim;
    std::uint64_t seed = 0;
};

struct LossResult {
    double value = 0.0;
    VectorXd gradient;
};

/// Mean over the batch of the squared residual (averaged over state
/// components) plus (λ / n_norm)·‖f̂‖₁ at the midpoint arguments
/// ((xⁿ + xⁿ⁺¹)/2, tⁿ + Δt/2).
template <class Model>
LossResult loss(const Model& model, const PairBatch& batch, Discretization disc, double lambda, double n_norm,
                bool with_gradient = true) {
    if (!(lambda >= 0.0))
        throw std::invalid_argument("loss: lambda must be non-negative");
    if (batch.size() == 0)
        throw std::invalid_argument("loss: empty batch");
    ad::Tape tape;
    const auto bound = model.bind(tape, with_gradient);
    const ad::Var xn = tape.constant(batch.xn);
    const ad::Var xnp1 = tape.constant(batch.xnp1);
    const ad::Var tn = tape.constant(batch.tn);
    const auto g = [&bound](ad::Var x, ad::Var t) { return bound.rhs(x, t); };
    const ad::Var r = residual(disc, g, xn, xnp1, tn, batch.dt);
    const double b = static_cast<double>(batch.size());
    ad::Var total = (1.0 / (b * static_cast<double>(batch.xn.rows()))) * ad::sum_squares(r);
    if (lambda > 0.0) {
        if (auto f = bound.force(0.5 * (xn + xnp1), tn + 0.5 * batch.dt))
            total = total + (lambda / (n_norm * b)) * ad::sum_abs(*f);
    }
    LossResult out;
    out.value = total.value()(0, 0);
    if (with_gradient) {
        out.gradient = VectorXd::Zero(model.params().size());
        if (tape.requires_grad(total))
            tape.backward(total, out.gradient);
    }
    return out;
}

struct TrainReport {
    std::vector<double> train_loss;
    std::vector<double> validation_loss; // empty without a validation set
    std::vector<std::vector<double>> damping; // learned damping per epoch (PHNN only)
    std::vector<double> lambda;
    double wall_seconds = 0.0;
    std::string checkpoint;

    nlohmann::json to_json() const {
        return {{"train_loss", train_loss}, {"validation_loss", validation_loss}, {"damping", damping},
                {"lambda", lambda},         {"wall_seconds", wall_seconds},       {"checkpoint", checkpoint}};
    }
};

namespace detail {

inline PairBatch gather(const PairBatch& all, const std::vector<Index>& order, std::size_t begin, std::size_t end) {
    PairBatch b;
    b.dt = all.dt;
    const auto n = static_cast<Index>(end - begin);
    const Index d = all.xn.rows();
    b.xn.resize(d, n);
    b.xnp1.resize(d, n);
    b.tn.resize(1, n);
    for (Index i = 0; i < n; ++i) {
        const Index src = order[begin + static_cast<std::size_t>(i)];
        b.xn.col(i) = all.xn.col(src);
        b.xnp1.col(i) = all.xnp1.col(src);
        b.tn(0, i) = all.tn(0, src);
    }
    return b;
}

template <class Model>
std::vector<double> damping_values(const Model& model) {
    if constexpr (std::is_same_v<Model, PseudoHamiltonianModel>) {
        const auto& v = model.damping().values;
        return std::vector<double>(v.begin(), v.end());
    } else {
        return {};
    }
}

} // namespace detail

/// Loss over a whole pair set, evaluated in chunks, λ = 0.
template <class Model>
double full_loss(const Model& model, const PairBatch& data, Discretization disc, std::size_t chunk = 4096) {
    double acc = 0.0;
    const auto n = static_cast<std::size_t>(data.size());
    std::vector<Index> order(n);
    std::iota(order.begin(), order.end(), Index{0});
    for (std::size_t s = 0; s < n; s += chunk) {
        const std::size_t e = std::min(n, s + chunk);
        acc += loss(model, detail::gather(data, order, s, e), disc, 0.0, 1.0, false).value *
               static_cast<double>(e - s);
    }
    return acc / static_cast<double>(n);
}

/// Shuffled mini-batch Adam over every pair, `epochs` times. The model is
/// updated in place. Batch order depends only on config.seed.
template <class Model>
TrainReport train(Model& model, const TrainConfig& cfg, const PairBatch& data,
                  const PairBatch* validation = nullptr) {
    if (data.size() == 0)
        throw std::invalid_argument("train: empty dataset");
    if (cfg.batch_size == 0)
        throw std::invalid_argument("train: batch size must be positive");
    const auto start = std::chrono::steady_clock::now();
    TrainReport report;
    ParamVector theta = model.params();
    AdamState adam(theta.size());
    Rng shuffle_rng = derived_rng(cfg.seed, streams::shuffle);
    const auto n = static_cast<std::size_t>(data.size());
    std::vector<Index> order(n);
    std::iota(order.begin(), order.end(), Index{0});
    const double n_total = static_cast<double>(n);
    const double n_norm =
        cfg.penalty_norm == PenaltyNorm::pairs ? n_total : static_cast<double>(data.xn.rows());

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lambda = cfg.lambda.at(epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double epoch_loss = 0.0;
        for (std::size_t s = 0; s < n; s += cfg.batch_size) {
            const std::size_t e = std::min(n, s + cfg.batch_size);
            const PairBatch batch = detail::gather(data, order, s, e);
            const LossResult lr = loss(model, batch, cfg.integrator, lambda, n_norm);
            if (!std::isfinite(lr.value) || !lr.gradient.allFinite())
                throw TrainingDiverged(epoch, "train: non-finite loss");
            epoch_loss += lr.value * static_cast<double>(e - s);
            adam_step(theta.values(), lr.gradient, adam, cfg.adam);
            model.set_params(theta.values());
        }
        report.train_loss.push_back(epoch_loss / n_total);
        report.lambda.push_back(lambda);
        if (validation && validation->size() > 0)
            report.validation_loss.push_back(full_loss(model, *validation, cfg.integrator));
        report.damping.push_back(detail::damping_values(model));
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

// Model construction for the named model types.

enum class ModelKind { phnn, phnn_ft, baseline1, baseline2 };

inline std::string to_string(ModelKind k) {
    switch (k) {
    case ModelKind::phnn: return "phnn";
    case ModelKind::phnn_ft: return "phnn-ft";
    case ModelKind::baseline1: return "baseline1";
    case ModelKind::baseline2: return "baseline2";
    }
    return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
    for (auto k : {ModelKind::phnn, ModelKind::phnn_ft, ModelKind::baseline1, ModelKind::baseline2})
        if (to_string(k) == s)
            return k;
    throw std::invalid_argument("unknown model type: " + s);
}

struct ModelOptions {
    ModelKind kind = ModelKind::phnn;
    /// Force support; defaults to the states the system's true force acts on.
    std::optional<IndexList> force_mask;
    /// Force network input; defaults to state+time for mass-spring, state only
    /// for tanks (phnn-ft always uses time only).
    std::optional<ForceInput> force_input;
    bool with_force = true;
    /// Baseline1 includes time as an input.
    std::optional<bool> baseline_time;
};

/// Builds a freshly initialised model for `spec`. `phnn` learns the force
/// from state (and time for the mass-spring system); `phnn-ft` from time
/// only; the baselines are the unstructured one-net / two-net regressors.
inline AnyModel make_model(const SystemSpec& spec, const ModelOptions& opt, std::uint64_t seed) {
    Rng rng = derived_rng(seed, streams::init_params);
    const Index d = system_dim(spec);
    const bool mass_spring = std::holds_alternative<MassSpringSpec>(spec);
    switch (opt.kind) {
    case ModelKind::baseline1:
        return BaselineModel::one_net(d, rng, opt.baseline_time.value_or(mass_spring));
    case ModelKind::baseline2:
        return BaselineModel::two_net(d, rng);
    case ModelKind::phnn:
    case ModelKind::phnn_ft: {
        std::optional<ForceModel> force;
        IndexList mask = opt.force_mask.value_or(forced_indices(spec));
        if (opt.with_force && !mask.empty()) {
            ForceInput input = opt.kind == ModelKind::phnn_ft
                                   ? ForceInput::time_only
                                   : opt.force_input.value_or(mass_spring ? ForceInput::state_time
                                                                          : ForceInput::state_only);
            force = ForceModel(input, std::move(mask), d);
        }
        return PseudoHamiltonianModel::make(exact_structure(spec), damped_indices(spec), std::move(force), rng);
    }
    }
    throw std::logic_error("unreachable model kind");
}

// Evaluation.

struct EvalMetrics {
    double trajectory_mse = 0.0;
    std::size_t evaluated = 0;
    std::size_t diverged = 0;
    std::optional<double> grad_h_mse;
    std::optional<double> damping_abs_error;
    std::optional<double> adjusted_force_mse;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"trajectory_mse", trajectory_mse}, {"evaluated", evaluated}, {"diverged", diverged}};
        if (grad_h_mse) j["grad_h_mse"] = *grad_h_mse;
        if (damping_abs_error) j["damping_abs_error"] = *damping_abs_error;
        if (adjusted_force_mse) j["adjusted_force_mse"] = *adjusted_force_mse;
        return j;
    }
};

/// Rollout settings for comparing against simulated data. The tank network
/// is rolled out on the simulator's internal step (sample spacing / 20); its
/// modes are too fast for one RK4 step per sample.
inline RolloutOptions evaluation_rollout(const SystemSpec& spec) {
    RolloutOptions opt;
    if (std::holds_alternative<TankNetworkSpec>(spec))
        opt.substeps = 20;
    return opt;
}

/// Mean squared error over times and components of a rollout against a
/// reference trajectory sampled at the same times.
template <class Model>
double trajectory_mse(const Model& model, const Trajectory& truth, const RolloutOptions& opt = {}) {
    const double dt = truth.t[1] - truth.t[0];
    const Trajectory pred = rollout(model, truth.x.front(), truth.t.front(), truth.t.back(), dt, opt);
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        acc += (pred.x[k] - truth.x[k]).squaredNorm();
        count += static_cast<std::size_t>(truth.x[k].size());
    }
    return acc / static_cast<double>(count);
}

/// Exact external force as a full state vector.
inline VectorXd exact_force(const SystemSpec& spec, const VectorXd& x, double t) {
    VectorXd f = VectorXd::Zero(system_dim(spec));
    if (const auto* ms = std::get_if<MassSpringSpec>(&spec)) {
        f[1] = ms->force(t);
    } else {
        const auto& s = std::get<TankNetworkSpec>(spec);
        f.tail(s.tanks) = tank_leak_force(s, x);
    }
    return f;
}

/// Rollout MSE from each test trajectory's initial state, plus (for PHNNs)
/// gradient-of-H error, damping error and time-average-adjusted force error.
/// Trajectories whose rollout fails are counted in `diverged` and excluded.
template <class Model>
EvalMetrics evaluate(const Model& model, const SystemSpec& spec, const std::vector<Trajectory>& test,
                     const RolloutOptions& opt = {}) {
    if (test.empty())
        throw std::invalid_argument("evaluate: empty test set");
    EvalMetrics m;
    double acc = 0.0;
    for (const auto& tr : test) {
        try {
            const double e = trajectory_mse(model, tr, opt);
            if (!std::isfinite(e))
                throw StepFailure(0, "non-finite error");
            acc += e;
            ++m.evaluated;
        } catch (const StepFailure&) {
            ++m.diverged;
        }
    }
    m.trajectory_mse = m.evaluated > 0 ? acc / static_cast<double>(m.evaluated)
                                       : std::numeric_limits<double>::infinity();

    if constexpr (std::is_same_v<Model, PseudoHamiltonianModel>) {
        // grad H on a regular grid for planar systems, on test states otherwise
        std::vector<VectorXd> states;
        if (system_dim(spec) == 2) {
            for (int i = 0; i <= 20; ++i)
                for (int j = 0; j <= 20; ++j)
                    states.push_back((VectorXd(2) << -4.5 + 0.45 * i, -4.5 + 0.45 * j).finished());
        } else {
            for (const auto& tr : test)
                states.insert(states.end(), tr.x.begin(), tr.x.end());
        }
        double gacc = 0.0;
        for (const auto& x : states)
            gacc += (model.grad_hamiltonian(x) - exact_hamiltonian_gradient(spec, x)).squaredNorm() /
                    static_cast<double>(x.size());
        m.grad_h_mse = gacc / static_cast<double>(states.size());

        const VectorXd truth = exact_damping(spec);
        const auto& idx = damped_indices(spec);
        if (model.damping().indices == idx)
            m.damping_abs_error = (model.damping().values - truth).cwiseAbs().mean();

        if (model.force()) {
            std::vector<VectorXd> fhat, fexact;
            for (const auto& tr : test)
                for (std::size_t k = 0; k < tr.size(); ++k) {
                    fhat.push_back(model.force_value(tr.x[k], tr.t[k]));
                    fexact.push_back(exact_force(spec, tr.x[k], tr.t[k]));
                }
            VectorXd mh = VectorXd::Zero(system_dim(spec));
            VectorXd me = VectorXd::Zero(system_dim(spec));
            for (std::size_t i = 0; i < fhat.size(); ++i) {
                mh += fhat[i];
                me += fexact[i];
            }
            mh /= static_cast<double>(fhat.size());
            me /= static_cast<double>(fhat.size());
            double facc = 0.0;
            for (std::size_t i = 0; i < fhat.size(); ++i)
                facc += ((fhat[i] - mh) - (fexact[i] - me)).squaredNorm();
            m.adjusted_force_mse = facc / static_cast<double>(fhat.size());
        }
    }
    return m;
}

inline EvalMetrics evaluate(const AnyModel& model, const SystemSpec& spec, const std::vector<Trajectory>& test,
                            const RolloutOptions& opt = {}) {
    return std::visit([&](const auto& m) { return evaluate(m, spec, test, opt); }, model);
}

inline TrainReport train(AnyModel& model, const TrainConfig& cfg, const PairBatch& data,
                         const PairBatch* validation = nullptr) {
    return std::visit([&](auto& m) { return train(m, cfg, data, validation); }, model);
}

} // namespace phlab

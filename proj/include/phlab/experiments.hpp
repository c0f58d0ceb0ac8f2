#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "phlab/datagen.hpp"
#include "phlab/models.hpp"
#include "phlab/mpc.hpp"
#include "phlab/parallel.hpp"
#include "phlab/systems.hpp"
#include "phlab/training.hpp"

namespace phlab {

enum class Scale { desk, paper };

inline std::string to_string(Scale s) { return s == Scale::desk ? "desk" : "paper"; }

inline Scale scale_from_string(const std::string& s) {
    if (s == "desk") return Scale::desk;
    if (s == "paper") return Scale::paper;
    throw std::invalid_argument("unknown scale: " + s);
}

inline const std::vector<std::string>& experiment_ids() {
    static const std::vector<std::string> ids{"msd-datasize",     "msd-trajectory",  "msd-hamiltonian", "msd-damping",
                                              "msd-force",        "msd-freq",        "tank-integrators", "tank-datasize",
                                              "tank-hamiltonian", "tank-leak",       "tank-mpc"};
    return ids;
}

struct ExperimentSpec {
    std::string id;
    Scale scale = Scale::desk;
    std::optional<std::size_t> replicates; // default: 3 desk, 10 paper
    std::optional<std::size_t> epochs;     // overrides every training run's epoch count
    std::uint64_t seed = 0;
    unsigned workers = 0; // 0 = hardware concurrency

    ExperimentSpec() = default;
    explicit ExperimentSpec(std::string experiment) : id(std::move(experiment)) {}

    void validate() const {
        const auto& ids = experiment_ids();
        if (std::find(ids.begin(), ids.end(), id) == ids.end())
            throw std::invalid_argument("unknown experiment id: " + id);
        if (replicates && *replicates == 0)
            throw std::invalid_argument("experiment: replicate count must be positive");
    }

    std::size_t replicate_count() const { return replicates.value_or(scale == Scale::desk ? 3 : 10); }

    /// Desk scale divides the full-scale epoch count by ten but keeps short
    /// runs (≤ 30 epochs) as they are.
    std::size_t scaled_epochs(std::size_t full_epochs) const {
        if (epochs)
            return *epochs;
        if (scale == Scale::paper)
            return full_epochs;
        return std::max((full_epochs + 9) / 10, std::min<std::size_t>(full_epochs, 30));
    }

    /// λ schedule with change points rescaled to the scaled epoch count.
    LambdaSchedule scaled_schedule(const std::vector<double>& values, std::size_t full_every,
                                   std::size_t full_epochs) const {
        const double f = static_cast<double>(scaled_epochs(full_epochs)) / static_cast<double>(full_epochs);
        std::vector<std::pair<std::size_t, double>> entries;
        for (std::size_t i = 0; i < values.size(); ++i)
            entries.emplace_back(static_cast<std::size_t>(std::llround(f * static_cast<double>(i * full_every))),
                                 values[i]);
        return LambdaSchedule(std::move(entries));
    }
};

/// FNV-1a of the canonical (key-sorted) JSON text, as 16 hex digits.
inline std::string config_hash(const nlohmann::json& config) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
}

struct ResultRow {
    std::string experiment;
    std::string model;
    std::string size; // dataset label (sample count or data-set description)
    std::size_t replicate = 0;
    std::string metric;
    double value = 0.0;
    std::string config_hash;
};

/// Long-format, append-only result rows.
class ResultTable {
public:
    void add(ResultRow row) { rows_.push_back(std::move(row)); }

    void append(const ResultTable& other) { rows_.insert(rows_.end(), other.rows_.begin(), other.rows_.end()); }

    const std::vector<ResultRow>& rows() const noexcept { return rows_; }
    std::size_t size() const noexcept { return rows_.size(); }

    std::vector<double> values(const std::string& model, const std::string& size, const std::string& metric) const {
        std::vector<double> out;
        for (const auto& r : rows_)
            if (r.model == model && r.size == size && r.metric == metric)
                out.push_back(r.value);
        return out;
    }

    void write_csv(std::ostream& os) const {
        os << "experiment,model,size,replicate,metric,value,config_hash\n";
        os.precision(17);
        for (const auto& r : rows_)
            os << r.experiment << ',' << r.model << ',' << r.size << ',' << r.replicate << ',' << r.metric << ','
               << r.value << ',' << r.config_hash << '\n';
    }

    /// Mean and sample standard deviation over replicates for every
    /// (model, size, metric) group, in first-appearance order.
    nlohmann::json summary() const {
        std::vector<std::tuple<std::string, std::string, std::string>> keys;
        std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
        for (const auto& r : rows_) {
            auto key = std::make_tuple(r.model, r.size, r.metric);
            auto [it, inserted] = groups.try_emplace(key);
            if (inserted)
                keys.push_back(key);
            it->second.push_back(r.value);
        }
        nlohmann::json out = nlohmann::json::array();
        for (const auto& key : keys) {
            const auto& v = groups.at(key);
            const double n = static_cast<double>(v.size());
            const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
            double ss = 0.0;
            for (double x : v)
                ss += (x - mean) * (x - mean);
            const double sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
            out.push_back({{"model", std::get<0>(key)},
                           {"size", std::get<1>(key)},
                           {"metric", std::get<2>(key)},
                           {"n", v.size()},
                           {"mean", mean},
                           {"std", sd}});
        }
        return out;
    }

private:
    std::vector<ResultRow> rows_;
};

/// Everything one experiment produces: result rows, named CSV curves and the
/// configs referenced by the rows' hashes.
struct ExperimentOutput {
    ResultTable table;
    std::map<std::string, std::string> curves; // file name (under curves/) -> CSV text
    nlohmann::json configs = nlohmann::json::object();
    nlohmann::json notes = nlohmann::json::object();

    void merge(ExperimentOutput other) {
        table.append(other.table);
        for (auto& [k, v] : other.curves)
            curves[k] = std::move(v);
        for (auto& [k, v] : other.configs.items())
            configs[k] = v;
        for (auto& [k, v] : other.notes.items())
            notes[k] = v;
    }

    /// Records `config` and returns its hash.
    std::string register_config(const nlohmann::json& config) {
        const std::string h = config_hash(config);
        configs[h] = config;
        return h;
    }

    void write(const std::string& dir, const ExperimentSpec& spec) const {
        namespace fs = std::filesystem;
        fs::create_directories(fs::path(dir) / "curves");
        {
            std::ofstream os(fs::path(dir) / "results.csv");
            table.write_csv(os);
        }
        for (const auto& [name, text] : curves) {
            std::ofstream os(fs::path(dir) / "curves" / name);
            os << text;
        }
        const nlohmann::json report = {{"experiment", spec.id},
                                       {"scale", to_string(spec.scale)},
                                       {"replicates", spec.replicate_count()},
                                       {"seed", spec.seed},
                                       {"summary", table.summary()},
                                       {"configs", configs},
                                       {"notes", notes}};
        std::ofstream os(fs::path(dir) / "report.json");
        os << report.dump(2) << '\n';
    }
};

// Grids and curves.

struct PlaneGrid {
    Index i = 0, j = 1; // state indices spanning the plane
    double lo_i = -1.0, hi_i = 1.0, lo_j = -1.0, hi_j = 1.0;
    std::size_t n = 101; // points per axis; 0 gives an empty file
};

/// CSV `x_i,x_j,h` of the adjusted Hamiltonian on an n x n grid of the
/// (i, j) plane, all other states zero.
inline std::string emit_contour_grid(const PseudoHamiltonianModel& model, const PlaneGrid& g) {
    if (g.n == 0)
        return {};
    if (g.i < 0 || g.j < 0 || g.i >= model.dim() || g.j >= model.dim() || g.i == g.j)
        throw StructuralError("contour grid: invalid plane");
    std::ostringstream os;
    os.precision(17);
    os << 'x' << g.i << ",x" << g.j << ",h\n";
    const auto coord = [&](double lo, double hi, std::size_t k) {
        return g.n == 1 ? lo : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(g.n - 1);
    };
    VectorXd x = VectorXd::Zero(model.dim());
    for (std::size_t a = 0; a < g.n; ++a) {
        for (std::size_t b = 0; b < g.n; ++b) {
            x[g.i] = coord(g.lo_i, g.hi_i, a);
            x[g.j] = coord(g.lo_j, g.hi_j, b);
            os << x[g.i] << ',' << x[g.j] << ',' << adjusted_hamiltonian(model, x) << '\n';
        }
    }
    return os.str();
}

inline std::string trajectory_csv(const Trajectory& tr) {
    std::ostringstream os;
    os.precision(17);
    os << 't';
    const Index d = tr.x.empty() ? 0 : tr.x.front().size();
    for (Index c = 0; c < d; ++c)
        os << ",x" << c;
    os << '\n';
    for (std::size_t k = 0; k < tr.size(); ++k) {
        os << tr.t[k];
        for (Index c = 0; c < d; ++c)
            os << ',' << tr.x[k][c];
        os << '\n';
    }
    return os.str();
}

/// Learned force component at state index `component` as a function of the
/// state value at that index, all other states zero: (value, f̂) pairs.
inline std::vector<std::pair<double, double>> force_curve(const PseudoHamiltonianModel& model, Index component,
                                                          double lo, double hi, std::size_t n, double t = 0.0) {
    std::vector<std::pair<double, double>> out;
    VectorXd x = VectorXd::Zero(model.dim());
    for (std::size_t k = 0; k < n; ++k) {
        x[component] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(n - 1);
        out.emplace_back(x[component], model.force_value(x, t)[component]);
    }
    return out;
}

/// Learned friction coefficients divided by the true ones.
inline VectorXd relative_friction(const PseudoHamiltonianModel& model, const TankNetworkSpec& truth) {
    return model.damping().values.cwiseQuotient(truth.friction);
}

// Systems used by the leak study.

/// Default network with the leak −30·clamp(μ₄, ±0.3) (and optionally
/// −10·clamp(μ₁, ±0.3)).
inline TankNetworkSpec leak_study_system(bool two_leaks = false) {
    TankNetworkSpec s;
    s.leaks = {{3, -30.0, 0.3}};
    if (two_leaks)
        s.leaks.push_back({0, -10.0, 0.3});
    return s;
}

inline TankNetworkSpec leak_free_system() {
    TankNetworkSpec s;
    s.leaks.clear();
    return s;
}

/// Tank level indices {first, ..., first + count - 1} in state coordinates.
inline IndexList tank_states(const TankNetworkSpec& s, std::vector<Index> tanks) {
    IndexList out;
    for (Index j : tanks)
        out.push_back(s.pipe_count() + j);
    return out;
}

// Shared training job.

struct TrainJob {
    std::string experiment;
    std::string model_label;
    std::string size_label;
    std::size_t replicate = 0;
    SystemSpec system;
    ModelOptions model;
    TrainConfig train;
    std::uint64_t model_seed = 0;
    nlohmann::json data_config; // describes the dataset for the config hash

    nlohmann::json config() const {
        return {{"experiment", experiment},
                {"model", model_label},
                {"size", size_label},
                {"replicate", replicate},
                {"system", to_json(system)},
                {"epochs", train.epochs},
                {"batch", train.batch_size},
                {"lr", train.adam.lr},
                {"integrator", to_string(train.integrator)},
                {"lambda", train.lambda.str()},
                {"train_seed", train.seed},
                {"model_seed", model_seed},
                {"data", data_config}};
    }
};

struct TrainedModel {
    AnyModel model;
    TrainReport report;
    bool diverged = false;
    std::string diverged_reason;
};

inline TrainedModel run_train_job(const TrainJob& job, const PairBatch& data, const PairBatch* validation = nullptr) {
    TrainedModel out{make_model(job.system, job.model, job.model_seed), {}, false, {}};
    try {
        out.report = train(out.model, job.train, data, validation);
    } catch (const TrainingDiverged& e) {
        out.diverged = true;
        out.diverged_reason = e.what();
    }
    return out;
}

inline std::uint64_t replicate_seed(std::uint64_t base, std::size_t replicate) {
    return base * 1000003ull + 17ull * (replicate + 1);
}

/// Runs `jobs` on the worker pool and merges their outputs in job order, so
/// the result does not depend on scheduling.
inline ExperimentOutput run_jobs(const std::vector<std::function<ExperimentOutput()>>& jobs, unsigned workers) {
    std::vector<ExperimentOutput> parts(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) { parts[i] = jobs[i](); }, workers);
    ExperimentOutput out;
    for (auto& p : parts)
        out.merge(std::move(p));
    return out;
}

// Mass-spring suite.

inline const std::vector<std::size_t>& msd_sizes() {
    static const std::vector<std::size_t> sizes{1000, 2000, 5000, 10000, 20000};
    return sizes;
}

inline const std::vector<double>& omega_grid() {
    static const std::vector<double> grid{0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 9.0};
    return grid;
}

struct MsdSuiteOptions {
    std::vector<std::size_t> sizes = msd_sizes();
    std::vector<ModelKind> kinds{ModelKind::baseline1, ModelKind::baseline2, ModelKind::phnn, ModelKind::phnn_ft};
    bool trajectories = false; // predicted test trajectory curves
    bool hamiltonian = false;  // contour grids of adjusted Ĥ
    bool force = false;        // adjusted-force curves
    bool frequency = false;    // sin(ωt) replacement study
    std::size_t test_trajectories = 10;
};

/// Whole trajectories for a nominal sample count: `samples / per_trajectory`
/// rounded to nearest, at least one. Returns the exact point count.
inline std::size_t whole_trajectory_samples(std::size_t samples, std::size_t per_trajectory, std::size_t points) {
    const auto n = std::max<long long>(1, std::llround(static_cast<double>(samples) / static_cast<double>(per_trajectory)));
    return static_cast<std::size_t>(n) * points;
}

/// Length-10 trajectories hold 1001 points, so "1000 samples" is one
/// trajectory and "20000 samples" twenty.
inline DatasetOptions msd_data(std::size_t samples, std::uint64_t seed) {
    DatasetOptions o;
    o.samples = whole_trajectory_samples(samples, 1000, 1001);
    o.length = 10.0;
    o.sample_dt = 0.01;
    o.seed = seed;
    return o;
}

inline std::vector<Trajectory> msd_test_set(std::uint64_t seed, std::size_t n) {
    return build_dataset(MassSpringSpec{}, msd_data(n * 1000, seed)).trajectories;
}

/// Rollout MSE of the model with its force replaced by sin(ωt), for each ω.
inline std::vector<double> frequency_replacement_mse(const PseudoHamiltonianModel& model,
                                                     const std::vector<Trajectory>& test,
                                                     const std::vector<double>& omegas = omega_grid()) {
    std::vector<double> out;
    for (double w : omegas)
        out.push_back(evaluate(replace_force(model, KnownForce::sine(w)), SystemSpec{MassSpringSpec{}}, test)
                          .trajectory_mse);
    return out;
}

/// PHNN for the mass-spring study: λ = 0.1, implicit midpoint, batch 32.
inline TrainJob msd_job(const ExperimentSpec& spec, ModelKind kind, std::size_t samples, std::size_t replicate) {
    TrainJob job;
    job.experiment = spec.id;
    job.model_label = to_string(kind);
    job.size_label = std::to_string(samples);
    job.replicate = replicate;
    job.system = MassSpringSpec{};
    job.model.kind = kind;
    job.train.epochs = spec.scaled_epochs(20000);
    job.train.batch_size = 32;
    job.train.integrator = Discretization::midpoint;
    const bool phnn = kind == ModelKind::phnn || kind == ModelKind::phnn_ft;
    job.train.lambda = LambdaSchedule(phnn ? 0.1 : 0.0);
    job.train.seed = replicate_seed(spec.seed, replicate);
    job.model_seed = job.train.seed;
    job.data_config = {{"samples", samples}, {"length", 10.0}, {"dt", 0.01}, {"seed", spec.seed + samples}};
    return job;
}

inline ExperimentOutput run_msd_suite(const ExperimentSpec& spec, const MsdSuiteOptions& opt) {
    spec.validate();
    const auto test = msd_test_set(spec.seed + 7919, opt.test_trajectories);
    std::vector<PairBatch> data;
    for (std::size_t s : opt.sizes)
        data.push_back(stack_pairs(build_dataset(MassSpringSpec{}, msd_data(s, spec.seed + s))));

    std::vector<std::function<ExperimentOutput()>> jobs;
    for (std::size_t si = 0; si < opt.sizes.size(); ++si)
        for (ModelKind kind : opt.kinds)
            for (std::size_t r = 0; r < spec.replicate_count(); ++r)
                jobs.push_back([&, si, kind, r] {
                    const TrainJob job = msd_job(spec, kind, opt.sizes[si], r);
                    ExperimentOutput out;
                    const std::string hash = out.register_config(job.config());
                    const auto row = [&](const std::string& metric, double value) {
                        out.table.add({spec.id, job.model_label, job.size_label, r, metric, value, hash});
                    };
                    const TrainedModel tm = run_train_job(job, data[si]);
                    if (tm.diverged) {
                        row("diverged", 1.0);
                        out.notes[hash] = tm.diverged_reason;
                        return out;
                    }
                    const EvalMetrics m = evaluate(tm.model, job.system, test);
                    row("trajectory_mse", m.trajectory_mse);
                    row("diverged_rollouts", static_cast<double>(m.diverged));
                    row("final_train_loss", tm.report.train_loss.empty() ? NAN : tm.report.train_loss.back());
                    const std::string stem = job.model_label + "_n" + job.size_label + "_r" + std::to_string(r);
                    if (opt.trajectories) {
                        out.curves["trajectory_" + stem + ".csv"] =
                            std::visit(
                            [&](const auto& m) {
                                return trajectory_csv(rollout(m, test.front().x.front(), 0.0, 10.0, 0.01));
                            },
                            tm.model);
                    }
                    const auto* phnn = std::get_if<PseudoHamiltonianModel>(&tm.model);
                    if (!phnn)
                        return out;
                    if (m.damping_abs_error) {
                        row("damping", phnn->damping().values[0]);
                        row("damping_abs_error", *m.damping_abs_error);
                    }
                    if (m.grad_h_mse)
                        row("grad_h_mse", *m.grad_h_mse);
                    if (m.adjusted_force_mse)
                        row("adjusted_force_mse", *m.adjusted_force_mse);
                    if (opt.hamiltonian)
                        out.curves["hamiltonian_" + stem + ".csv"] =
                            emit_contour_grid(*phnn, {0, 1, -4.5, 4.5, -4.5, 4.5, 101});
                    if (opt.force && phnn->force()) {
                        const auto& tr = test.front();
                        const MatrixXd f = adjusted_force(*phnn, tr.x, tr.t);
                        std::vector<double> exact(tr.size());
                        for (std::size_t k = 0; k < tr.size(); ++k)
                            exact[k] = MassSpringSpec{}.force(tr.t[k]);
                        const double mean = std::accumulate(exact.begin(), exact.end(), 0.0) /
                                            static_cast<double>(exact.size());
                        std::ostringstream os;
                        os.precision(17);
                        os << "t,learned,exact\n";
                        for (std::size_t k = 0; k < tr.size(); ++k)
                            os << tr.t[k] << ',' << f(0, static_cast<Index>(k)) << ',' << exact[k] - mean << '\n';
                        out.curves["force_" + stem + ".csv"] = os.str();
                    }
                    if (opt.frequency && phnn->force()) {
                        const auto mse = frequency_replacement_mse(*phnn, test);
                        const auto& grid = omega_grid();
                        for (std::size_t w = 0; w < grid.size(); ++w) {
                            std::ostringstream name;
                            name << "freq_mse_omega_" << grid[w];
                            row(name.str(), mse[w]);
                        }
                        const auto best = std::min_element(mse.begin(), mse.end()) - mse.begin();
                        row("freq_best_omega", grid[static_cast<std::size_t>(best)]);
                    }
                    return out;
                });
    return run_jobs(jobs, spec.workers);
}

// Tank suites.

inline DatasetOptions tank_data(std::size_t samples, double dt, double sigma, std::uint64_t seed,
                                double length = 1.0) {
    DatasetOptions o;
    o.samples = samples;
    o.length = length;
    o.sample_dt = dt;
    o.noise_sigma = sigma;
    o.seed = seed;
    return o;
}

inline std::vector<Trajectory> tank_test_set(const TankNetworkSpec& s, std::uint64_t seed, std::size_t n = 10) {
    return build_dataset(s, tank_data(n * 101, 0.01, 0.0, seed)).trajectories;
}

/// Fixed initial state for the plotted tank trajectories: φ = (−1, −1, 0,
/// 0.5, −1), μ = (1, 1, −0.5, −1).
inline VectorXd showcase_tank_state() {
    return (VectorXd(9) << -1, -1, 0, 0.5, -1, 1, 1, -0.5, -1).finished();
}

struct IntegratorDataset {
    std::string label;
    double dt;
    std::size_t samples;
    double sigma;
};

inline std::vector<IntegratorDataset> integrator_datasets() {
    std::vector<IntegratorDataset> out;
    for (double sigma : {0.0, 0.03, 0.05}) {
        std::ostringstream a, b;
        a << "dt1/100_n30000_s" << sigma;
        b << "dt1/30_n3000_s" << sigma;
        out.push_back({a.str(), 0.01, 30000, sigma});
        out.push_back({b.str(), 1.0 / 30.0, 3000, sigma});
    }
    return out;
}

/// PHNN on the default network with the leak support known, batch 32.
inline TrainJob tank_integrator_job(const ExperimentSpec& spec, const IntegratorDataset& ds, Discretization d,
                                    std::size_t replicate) {
    TrainJob job;
    job.experiment = spec.id;
    job.model_label = "phnn-" + to_string(d);
    job.size_label = ds.label;
    job.replicate = replicate;
    job.system = TankNetworkSpec{};
    job.model.kind = ModelKind::phnn;
    job.train.epochs = spec.scaled_epochs(1000);
    job.train.batch_size = 32;
    job.train.integrator = d;
    job.train.lambda = LambdaSchedule(0.0);
    job.train.seed = replicate_seed(spec.seed, replicate);
    job.model_seed = job.train.seed;
    job.data_config = {{"samples", ds.samples}, {"dt", ds.dt}, {"sigma", ds.sigma}, {"seed", spec.seed + 11}};
    return job;
}

inline ExperimentOutput run_tank_integrators(const ExperimentSpec& spec,
                                             std::vector<IntegratorDataset> datasets = integrator_datasets(),
                                             std::vector<Discretization> methods = {all_discretizations.begin(),
                                                                                    all_discretizations.end()}) {
    spec.validate();
    const TankNetworkSpec system;
    const auto test = tank_test_set(system, spec.seed + 7919);
    std::vector<PairBatch> data;
    for (const auto& ds : datasets)
        data.push_back(stack_pairs(build_dataset(system, tank_data(ds.samples, ds.dt, ds.sigma, spec.seed + 11))));
    std::vector<std::function<ExperimentOutput()>> jobs;
    for (std::size_t di = 0; di < datasets.size(); ++di)
        for (Discretization d : methods)
            for (std::size_t r = 0; r < spec.replicate_count(); ++r)
                jobs.push_back([&, di, d, r] {
                    const TrainJob job = tank_integrator_job(spec, datasets[di], d, r);
                    ExperimentOutput out;
                    const std::string hash = out.register_config(job.config());
                    const auto row = [&](const std::string& metric, double value) {
                        out.table.add({spec.id, job.model_label, job.size_label, r, metric, value, hash});
                    };
                    const TrainedModel tm = run_train_job(job, data[di]);
                    if (tm.diverged) {
                        row("diverged", 1.0);
                        out.notes[hash] = tm.diverged_reason;
                        return out;
                    }
                    const auto& phnn = std::get<PseudoHamiltonianModel>(tm.model);
                    const VectorXd rel = relative_friction(phnn, system);
                    for (Index i = 0; i < rel.size(); ++i)
                        row("relative_friction_" + std::to_string(i), rel[i]);
                    row("relative_friction_mean", rel.mean());
                    const EvalMetrics m = evaluate(tm.model, job.system, test, evaluation_rollout(job.system));
                    row("trajectory_mse", m.trajectory_mse);
                    row("diverged_rollouts", static_cast<double>(m.diverged));
                    try {
                        const Trajectory tr =
                            rollout(phnn, showcase_tank_state(), 0.0, 1.0, 0.01, evaluation_rollout(job.system));
                        out.curves["trajectory_" + job.model_label + "_" +
                                   std::to_string(di) + "_r" + std::to_string(r) + ".csv"] = trajectory_csv(tr);
                    } catch (const StepFailure&) {
                    }
                    return out;
                });
    ExperimentOutput out = run_jobs(jobs, spec.workers);
    for (std::size_t di = 0; di < datasets.size(); ++di)
        out.notes["dataset_" + std::to_string(di)] = datasets[di].label;
    return out;
}

inline const std::vector<std::size_t>& tank_sizes() {
    static const std::vector<std::size_t> sizes{100, 250, 500, 1000, 2500, 5000, 10000, 20000};
    return sizes;
}

/// Trajectories of length 1 at dt 1/100 hold 101 points (100 transitions);
/// the sample count is rounded to whole trajectories of 100 transitions.
inline DatasetOptions tank_size_data(std::size_t samples, std::uint64_t seed) {
    return tank_data(whole_trajectory_samples(samples, 100, 101), 0.01, 0.0, seed);
}

inline TrainJob tank_size_job(const ExperimentSpec& spec, ModelKind kind, std::size_t samples, std::size_t replicate) {
    TrainJob job;
    job.experiment = spec.id;
    job.model_label = to_string(kind);
    job.size_label = std::to_string(samples);
    job.replicate = replicate;
    job.system = TankNetworkSpec{};
    job.model.kind = kind;
    job.model.baseline_time = false;
    job.train.epochs = spec.scaled_epochs(20000);
    job.train.batch_size = 256;
    job.train.integrator = Discretization::midpoint;
    job.train.lambda = LambdaSchedule(0.0);
    job.train.seed = replicate_seed(spec.seed, replicate);
    job.model_seed = job.train.seed;
    job.data_config = {{"samples", samples}, {"dt", 0.01}, {"seed", spec.seed + samples}, {"validation", 500}};
    return job;
}

inline std::vector<PlaneGrid> tank_planes() {
    // φ4-φ5, μ1-μ2 (one-based) and a mixed plane.
    return {{3, 4, -1, 1, -1, 1, 101}, {5, 6, -1, 1, -1, 1, 101}, {0, 5, -1, 1, -1, 1, 101}};
}

inline ExperimentOutput run_tank_datasize(const ExperimentSpec& spec, std::vector<std::size_t> sizes = tank_sizes(),
                                          std::vector<ModelKind> kinds = {ModelKind::baseline1, ModelKind::phnn},
                                          bool contours = false) {
    spec.validate();
    const TankNetworkSpec system;
    const auto test = tank_test_set(system, spec.seed + 7919);
    const PairBatch validation = stack_pairs(build_dataset(system, tank_size_data(500, spec.seed + 4243)));
    std::vector<PairBatch> data;
    for (std::size_t s : sizes)
        data.push_back(stack_pairs(build_dataset(system, tank_size_data(s, spec.seed + s))));
    std::vector<std::function<ExperimentOutput()>> jobs;
    for (std::size_t si = 0; si < sizes.size(); ++si)
        for (ModelKind kind : kinds)
            for (std::size_t r = 0; r < spec.replicate_count(); ++r)
                jobs.push_back([&, si, kind, r] {
                    const TrainJob job = tank_size_job(spec, kind, sizes[si], r);
                    ExperimentOutput out;
                    const std::string hash = out.register_config(job.config());
                    const auto row = [&](const std::string& metric, double value) {
                        out.table.add({spec.id, job.model_label, job.size_label, r, metric, value, hash});
                    };
                    const TrainedModel tm = run_train_job(job, data[si], &validation);
                    if (tm.diverged) {
                        row("diverged", 1.0);
                        out.notes[hash] = tm.diverged_reason;
                        return out;
                    }
                    const EvalMetrics m = evaluate(tm.model, job.system, test, evaluation_rollout(job.system));
                    row("trajectory_mse", m.trajectory_mse);
                    row("diverged_rollouts", static_cast<double>(m.diverged));
                    if (!tm.report.validation_loss.empty())
                        row("final_validation_loss", tm.report.validation_loss.back());
                    if (m.grad_h_mse)
                        row("grad_h_mse", *m.grad_h_mse);
                    const auto* phnn = std::get_if<PseudoHamiltonianModel>(&tm.model);
                    if (contours && phnn) {
                        for (const auto& plane : tank_planes())
                            out.curves["hamiltonian_" + job.size_label + "_r" + std::to_string(r) + "_x" +
                                       std::to_string(plane.i) + "_x" + std::to_string(plane.j) + ".csv"] =
                                emit_contour_grid(*phnn, plane);
                    }
                    return out;
                });
    ExperimentOutput out = run_jobs(jobs, spec.workers);
    if (contours)
        for (const auto& plane : tank_planes())
            out.curves["hamiltonian_exact_x" + std::to_string(plane.i) + "_x" + std::to_string(plane.j) + ".csv"] =
                emit_contour_grid(planted_model(system), plane);
    return out;
}

// Leak study.

struct LeakScenario {
    std::string name;
    TankNetworkSpec system;
    IndexList mask;
    Discretization integrator = Discretization::midpoint;
    std::size_t trajectories = 300;
    double dt = 1.0 / 400.0;
    double sigma = 0.0;
    std::size_t full_epochs = 600;
    std::vector<double> lambdas; // empty: λ = 0
    std::size_t full_lambda_every = 150;
};

/// The leak-study scenarios: (a) unknown mask, (b) known mask, (c) noisy
/// data with both mask settings, (d) two leaks with both mask settings, and
/// the leak-free reference (no force term) trained at the budget of (b).
inline std::vector<LeakScenario> leak_scenarios() {
    const TankNetworkSpec one = leak_study_system(false);
    const TankNetworkSpec two = leak_study_system(true);
    const IndexList all = tank_states(one, {0, 1, 2, 3});
    const std::vector<double> schedule{0.3, 0.1, 0.03, 0.01};
    std::vector<LeakScenario> out;
    out.push_back({"a_unknown_mask", one, all, Discretization::midpoint, 300, 1.0 / 400, 0.0, 600, schedule, 150});
    out.push_back({"b_known_mask", one, tank_states(one, {3}), Discretization::midpoint, 300, 1.0 / 400, 0.0, 30, {}, 0});
    out.push_back({"c_noisy_unknown_mask", one, all, Discretization::srk4, 1000, 0.01, 0.01, 2000, schedule, 500});
    out.push_back({"c_noisy_known_mask", one, tank_states(one, {3}), Discretization::srk4, 1000, 0.01, 0.01, 2000,
                   schedule, 500});
    out.push_back({"d_two_leaks_unknown_mask", two, all, Discretization::midpoint, 300, 1.0 / 400, 0.0, 600, schedule,
                   150});
    out.push_back({"d_two_leaks_known_mask", two, tank_states(two, {0, 3}), Discretization::midpoint, 300, 1.0 / 400,
                   0.0, 30, {}, 0});
    out.push_back({"leak_free_reference", leak_free_system(), {}, Discretization::midpoint, 300,
                   1.0 / 400, 0.0, 30, {}, 0});
    return out;
}

inline TrainJob leak_job(const ExperimentSpec& spec, const LeakScenario& sc, std::size_t replicate) {
    TrainJob job;
    job.experiment = spec.id;
    job.model_label = sc.name;
    job.size_label = std::to_string(sc.trajectories) + "traj";
    job.replicate = replicate;
    job.system = sc.system;
    job.model.kind = ModelKind::phnn;
    job.model.force_mask = sc.mask;
    job.model.force_input = ForceInput::state_only;
    job.train.epochs = spec.scaled_epochs(sc.full_epochs);
    job.train.batch_size = 32;
    job.train.integrator = sc.integrator;
    job.train.lambda = sc.lambdas.empty() ? LambdaSchedule(0.0)
                                          : spec.scaled_schedule(sc.lambdas, sc.full_lambda_every, sc.full_epochs);
    job.train.seed = replicate_seed(spec.seed, replicate);
    job.model_seed = job.train.seed;
    job.data_config = {{"trajectories", sc.trajectories}, {"dt", sc.dt}, {"sigma", sc.sigma}, {"length", 1.0}};
    return job;
}

inline TrajectoryDataset leak_dataset(const LeakScenario& sc, std::uint64_t seed) {
    const std::size_t points = points_per_trajectory(1.0, sc.dt);
    return build_dataset(sc.system, tank_data(sc.trajectories * points, sc.dt, sc.sigma, seed));
}

struct LeakMetrics {
    double max_abs_error = 0.0;            // max over leaking masked tanks, μ ∈ [−0.5, 0.5]
    std::vector<double> magnitude;          // mean |f̂_j| over the data, per masked tank
    double post_removal_mse = 0.0;          // rollout of the force-free model on leak-free tests
};

/// Force-curve error against the true leaks, mean learned force magnitude
/// per masked component over `states`, and the post-removal rollout MSE.
inline LeakMetrics leak_metrics(const PseudoHamiltonianModel& model, const TankNetworkSpec& truth,
                                const std::vector<VectorXd>& states, const std::vector<Trajectory>& leak_free_test) {
    LeakMetrics m;
    const SystemSpec clean = leak_free_system();
    if (!model.force()) {
        m.post_removal_mse = evaluate(model, clean, leak_free_test, evaluation_rollout(clean)).trajectory_mse;
        return m;
    }
    const auto& mask = model.force()->mask();
    for (const auto& leak : truth.leaks) {
        const Index idx = truth.pipe_count() + leak.tank;
        if (std::find(mask.begin(), mask.end(), idx) == mask.end())
            continue;
        for (const auto& [mu, f] : force_curve(model, idx, -0.5, 0.5, 101))
            m.max_abs_error = std::max(m.max_abs_error, std::abs(f - leak(mu)));
    }
    m.magnitude.assign(mask.size(), 0.0);
    for (const auto& x : states) {
        const VectorXd f = model.force()->masked(x, 0.0);
        for (std::size_t i = 0; i < mask.size(); ++i)
            m.magnitude[i] += std::abs(f[static_cast<Index>(i)]);
    }
    for (auto& v : m.magnitude)
        v /= static_cast<double>(states.size());
    m.post_removal_mse =
        evaluate(remove_force(model), clean, leak_free_test, evaluation_rollout(clean)).trajectory_mse;
    return m;
}

inline std::vector<VectorXd> all_states(const TrajectoryDataset& ds) {
    std::vector<VectorXd> out;
    for (const auto& tr : ds.trajectories)
        out.insert(out.end(), tr.x.begin(), tr.x.end());
    return out;
}

inline ExperimentOutput run_tank_leak(const ExperimentSpec& spec, std::vector<LeakScenario> scenarios = leak_scenarios()) {
    spec.validate();
    const auto test = tank_test_set(leak_free_system(), spec.seed + 7919);
    std::vector<std::function<ExperimentOutput()>> jobs;
    for (std::size_t si = 0; si < scenarios.size(); ++si)
        for (std::size_t r = 0; r < spec.replicate_count(); ++r)
            jobs.push_back([&, si, r] {
                const LeakScenario& sc = scenarios[si];
                const TrainJob job = leak_job(spec, sc, r);
                ExperimentOutput out;
                const std::string hash = out.register_config(job.config());
                const auto row = [&](const std::string& metric, double value) {
                    out.table.add({spec.id, job.model_label, job.size_label, r, metric, value, hash});
                };
                const TrajectoryDataset ds = leak_dataset(sc, spec.seed + 31 + (sc.sigma > 0 ? 1 : 0));
                const TrainedModel tm = run_train_job(job, stack_pairs(ds));
                if (tm.diverged) {
                    row("diverged", 1.0);
                    out.notes[hash] = tm.diverged_reason;
                    return out;
                }
                const auto& phnn = std::get<PseudoHamiltonianModel>(tm.model);
                const LeakMetrics m = leak_metrics(phnn, sc.system, all_states(ds), test);
                if (!sc.system.leaks.empty())
                    row("force_max_abs_error", m.max_abs_error);
                for (std::size_t i = 0; i < m.magnitude.size(); ++i)
                    row("force_magnitude_x" + std::to_string(sc.mask[i]), m.magnitude[i]);
                row("post_removal_mse", m.post_removal_mse);
                std::ostringstream os;
                os.precision(17);
                os << "component,mu,learned,exact\n";
                for (Index idx : sc.mask) {
                    const Index tank = idx - sc.system.pipe_count();
                    for (const auto& [mu, f] : force_curve(phnn, idx, -1.0, 1.0, 101)) {
                        double exact = 0.0;
                        for (const auto& l : sc.system.leaks)
                            if (l.tank == tank)
                                exact += l(mu);
                        os << idx << ',' << mu << ',' << f << ',' << exact << '\n';
                    }
                }
                out.curves["force_" + sc.name + "_r" + std::to_string(r) + ".csv"] = os.str();
                const SystemSpec clean = leak_free_system();
                try {
                    const auto bare = phnn.force() ? remove_force(phnn) : phnn;
                    out.curves["removed_" + sc.name + "_r" + std::to_string(r) + ".csv"] = trajectory_csv(
                        rollout(bare, showcase_tank_state(), 0.0, 1.0, 0.01, evaluation_rollout(clean)));
                } catch (const StepFailure&) {
                }
                return out;
            });
    ExperimentOutput out = run_jobs(jobs, spec.workers);
    out.curves["removed_exact.csv"] = trajectory_csv(simulate(leak_free_system(), showcase_tank_state(), 0.0, 1.0, 0.01));
    return out;
}

// Control demo.

/// Tank levels the plant settles to under a constant inflow u on the
/// controlled tank, found by simulating from rest.
inline VectorXd equilibrium_levels(const TankNetworkSpec& plant, const ControlSpec& control, double u,
                                   double horizon = 40.0) {
    const SystemSpec spec = plant;
    const auto g = [&](const VectorXd& x, double t) { return controlled_rhs(spec, control, x, t, u); };
    return simulate_rhs(g, VectorXd::Zero(system_dim(spec)), 0.0, horizon, 0.01, 20).x.back().tail(plant.tanks);
}

inline ExperimentOutput run_tank_mpc(const ExperimentSpec& spec) {
    spec.validate();
    const TankNetworkSpec plant = leak_study_system(false);
    TrainJob job;
    job.experiment = spec.id;
    job.model_label = "phnn";
    job.size_label = "1000";
    job.system = plant;
    job.model.kind = ModelKind::phnn;
    job.train.epochs = spec.scaled_epochs(20000);
    job.train.batch_size = 32;
    job.train.integrator = Discretization::srk4;
    job.train.lambda = LambdaSchedule(0.0);
    job.train.seed = replicate_seed(spec.seed, 0);
    job.model_seed = job.train.seed;
    job.data_config = {{"samples", 1000}, {"dt", 0.01}, {"seed", spec.seed + 1000}};

    ExperimentOutput out;
    const std::string hash = out.register_config(job.config());
    const auto row = [&](const std::string& model, const std::string& metric, double value) {
        out.table.add({spec.id, model, job.size_label, 0, metric, value, hash});
    };
    const PairBatch data = stack_pairs(build_dataset(plant, tank_data(1010, 0.01, 0.0, spec.seed + 1000)));
    const TrainedModel tm = run_train_job(job, data);
    if (tm.diverged) {
        row("phnn", "diverged", 1.0);
        out.notes[hash] = tm.diverged_reason;
        return out;
    }
    ControlSpec control;
    control.reference = VectorXd::Zero(plant.tanks);
    control.reference = equilibrium_levels(plant, control, 1.0);
    out.notes["reference"] = std::vector<double>(control.reference.begin(), control.reference.end());
    const VectorXd x0 = VectorXd::Zero(system_dim(SystemSpec{plant}));
    const auto run = [&](const std::string& label, const auto& model) {
        const ControlTrace tr = run_closed_loop(SystemSpec{plant}, model, control, x0, 10.0);
        std::ostringstream os;
        tr.write_csv(os);
        out.curves["mpc_trace_" + label + ".csv"] = os.str();
        row(label, "terminal_level_error",
            (tr.x.back().tail(plant.tanks) - control.reference).lpNorm<Eigen::Infinity>());
        row(label, "plant_diverged", tr.diverged ? 1.0 : 0.0);
    };
    run("phnn", std::get<PseudoHamiltonianModel>(tm.model));
    run("planted", planted_model(SystemSpec{plant}));
    return out;
}

/// Dispatches on the experiment id.
inline ExperimentOutput run_experiment(const ExperimentSpec& spec) {
    spec.validate();
    const std::string& id = spec.id;
    if (id.rfind("msd-", 0) == 0) {
        MsdSuiteOptions opt;
        const std::vector<std::size_t> reference_size{10000};
        const std::vector<ModelKind> phnns{ModelKind::phnn, ModelKind::phnn_ft};
        if (id == "msd-trajectory") {
            opt.sizes = reference_size;
            opt.trajectories = true;
        } else if (id == "msd-hamiltonian") {
            opt.sizes = reference_size;
            opt.kinds = phnns;
            opt.hamiltonian = true;
        } else if (id == "msd-damping") {
            opt.kinds = phnns;
        } else if (id == "msd-force") {
            opt.sizes = reference_size;
            opt.kinds = phnns;
            opt.force = true;
        } else if (id == "msd-freq") {
            opt.sizes = reference_size;
            opt.kinds = phnns;
            opt.frequency = true;
        }
        ExperimentOutput out = run_msd_suite(spec, opt);
        if (opt.hamiltonian)
            out.curves["hamiltonian_exact.csv"] =
                emit_contour_grid(planted_model(SystemSpec{MassSpringSpec{}}), {0, 1, -4.5, 4.5, -4.5, 4.5, 101});
        if (opt.trajectories) {
            const auto test = msd_test_set(spec.seed + 7919, 1);
            out.curves["trajectory_exact.csv"] = trajectory_csv(test.front());
        }
        return out;
    }
    if (id == "tank-integrators")
        return run_tank_integrators(spec);
    if (id == "tank-datasize")
        return run_tank_datasize(spec);
    if (id == "tank-hamiltonian")
        return run_tank_datasize(spec, {5000}, {ModelKind::phnn}, true);
    if (id == "tank-leak")
        return run_tank_leak(spec);
    return run_tank_mpc(spec);
}

} // namespace phlab

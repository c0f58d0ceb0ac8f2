#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "phlab/experiments.hpp"

using namespace phlab;

namespace {

std::vector<double> parse_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        out.push_back(std::stod(item));
    return out;
}

VectorXd to_vector(const std::vector<double>& v) {
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os)
        throw std::runtime_error("cannot write " + path);
    os << j.dump(2) << '\n';
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pseudo-Hamiltonian system identification toolkit"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "Simulate a dataset");
    std::string gen_system, gen_out;
    DatasetOptions gen_opt;
    gen->add_option("--system", gen_system, "System JSON file")->required()->check(CLI::ExistingFile);
    gen->add_option("--samples", gen_opt.samples, "Total state samples")->required();
    gen->add_option("--dt", gen_opt.sample_dt, "Sampling interval")->required();
    gen->add_option("--length", gen_opt.length, "Trajectory length in time units")->required();
    gen->add_option("--noise", gen_opt.noise_sigma, "Gaussian measurement noise std");
    gen->add_option("--seed", gen_opt.seed, "Seed");
    gen->add_option("--out", gen_out, "Output dataset file")->required();

    // train
    auto* tr = app.add_subcommand("train", "Train a model on a dataset");
    std::string tr_data, tr_validation, tr_model = "phnn", tr_integrator = "midpoint", tr_lambda = "0", tr_out,
                                       tr_report, tr_mask, tr_force_input;
    TrainConfig tr_cfg;
    bool tr_no_force = false;
    tr->add_option("--data", tr_data, "Training dataset")->required()->check(CLI::ExistingFile);
    tr->add_option("--validation", tr_validation, "Validation dataset")->check(CLI::ExistingFile);
    tr->add_option("--model", tr_model, "phnn, phnn-ft, baseline1 or baseline2");
    tr->add_option("--integrator", tr_integrator, "euler, midpoint, rk4 or srk4");
    tr->add_option("--epochs", tr_cfg.epochs, "Epochs");
    tr->add_option("--batch", tr_cfg.batch_size, "Batch size");
    tr->add_option("--lr", tr_cfg.adam.lr, "Adam learning rate");
    tr->add_option("--lambda-schedule", tr_lambda, "Force penalty, e.g. \"0:0.3,150:0.1\"");
    tr->add_option("--force-mask", tr_mask, "Comma-separated state indices of the force (PHNN)");
    tr->add_option("--force-input", tr_force_input, "state_time, time_only or state_only (PHNN)");
    tr->add_flag("--no-force", tr_no_force, "PHNN without a force term");
    tr->add_option("--seed", tr_cfg.seed, "Seed for initialisation and shuffling");
    tr->add_option("--out", tr_out, "Output checkpoint")->required();
    tr->add_option("--report", tr_report, "Training report JSON (default: <out>.report.json)");

    // eval
    auto* ev = app.add_subcommand("eval", "Roll out a checkpoint on a test dataset");
    std::string ev_model, ev_data;
    ev->add_option("--model", ev_model, "Checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", ev_data, "Test dataset")->required()->check(CLI::ExistingFile);

    // exp
    auto* ex = app.add_subcommand("exp", "Run an experiment");
    ExperimentSpec ex_spec;
    std::string ex_scale = "desk", ex_out = "results";
    std::size_t ex_replicates = 0, ex_epochs = 0;
    ex->add_option("id", ex_spec.id, "Experiment id")->required()->check(CLI::IsMember(experiment_ids()));
    ex->add_option("--scale", ex_scale, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    ex->add_option("--replicates", ex_replicates, "Replicates per configuration");
    ex->add_option("--epochs", ex_epochs, "Override every run's epoch count");
    ex->add_option("--seed", ex_spec.seed, "Base seed");
    ex->add_option("--workers", ex_spec.workers, "Worker threads (0 = all cores)");
    ex->add_option("--out-dir", ex_out, "Output directory");

    // mpc
    auto* mp = app.add_subcommand("mpc", "Closed-loop level control through a model");
    std::string mp_model, mp_plant, mp_ref, mp_bounds = "-2,2", mp_out = "trace.csv", mp_x0;
    ControlSpec mp_spec;
    double mp_T = 10.0;
    mp->add_option("--model", mp_model, "Checkpoint (PHNN or baseline)")->required()->check(CLI::ExistingFile);
    mp->add_option("--plant", mp_plant, "Plant system JSON")->required()->check(CLI::ExistingFile);
    mp->add_option("--ref", mp_ref, "Reference tank levels, comma-separated")->required();
    mp->add_option("--horizon", mp_spec.horizon, "Planning horizon in control steps");
    mp->add_option("--bounds", mp_bounds, "Input bounds u_min,u_max");
    mp->add_option("--tank", mp_spec.tank, "Controlled tank index");
    mp->add_option("--dt", mp_spec.dt, "Control interval");
    mp->add_option("--iterations", mp_spec.iterations, "Gradient iterations per plan");
    mp->add_option("--step", mp_spec.step, "Gradient step");
    mp->add_option("--x0", mp_x0, "Initial plant state (default zero)");
    mp->add_option("--T", mp_T, "Closed-loop horizon");
    mp->add_option("--out", mp_out, "Trace CSV");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const TrajectoryDataset ds = build_dataset(load_system(gen_system), gen_opt);
            save_dataset(gen_out, ds);
            std::cout << "wrote " << ds.trajectories.size() << " trajectories to " << gen_out << '\n';
        } else if (tr->parsed()) {
            const TrajectoryDataset ds = load_dataset(tr_data);
            const SystemSpec system = system_from_json(ds.system);
            ModelOptions mo;
            mo.kind = model_kind_from_string(tr_model);
            mo.with_force = !tr_no_force;
            if (!tr_mask.empty()) {
                IndexList mask;
                for (double v : parse_list(tr_mask))
                    mask.push_back(static_cast<Index>(v));
                mo.force_mask = mask;
            }
            if (!tr_force_input.empty())
                mo.force_input = force_input_from_string(tr_force_input);
            tr_cfg.integrator = discretization_from_string(tr_integrator);
            tr_cfg.lambda = LambdaSchedule::parse(tr_lambda);
            AnyModel model = make_model(system, mo, tr_cfg.seed);
            const PairBatch data = stack_pairs(ds);
            std::optional<PairBatch> validation;
            if (!tr_validation.empty())
                validation = stack_pairs(load_dataset(tr_validation));
            TrainReport report = train(model, tr_cfg, data, validation ? &*validation : nullptr);
            save_checkpoint(model, tr_out);
            report.checkpoint = tr_out;
            write_json(tr_report.empty() ? tr_out + ".report.json" : tr_report, report.to_json());
            std::cout << "final train loss " << report.train_loss.back() << ", checkpoint " << tr_out << '\n';
        } else if (ev->parsed()) {
            const AnyModel model = load_checkpoint(ev_model);
            const TrajectoryDataset ds = load_dataset(ev_data);
            const SystemSpec system = system_from_json(ds.system);
            const EvalMetrics m = evaluate(model, system, ds.trajectories, evaluation_rollout(system));
            nlohmann::json j = {{"trajectory_mse", m.trajectory_mse},
                                {"evaluated", m.evaluated},
                                {"diverged", m.diverged}};
            if (m.grad_h_mse)
                j["grad_h_mse"] = *m.grad_h_mse;
            if (m.damping_abs_error)
                j["damping_abs_error"] = *m.damping_abs_error;
            if (m.adjusted_force_mse)
                j["adjusted_force_mse"] = *m.adjusted_force_mse;
            std::cout << j.dump(2) << '\n';
        } else if (ex->parsed()) {
            ex_spec.scale = scale_from_string(ex_scale);
            if (ex_replicates)
                ex_spec.replicates = ex_replicates;
            if (ex_epochs)
                ex_spec.epochs = ex_epochs;
            const ExperimentOutput out = run_experiment(ex_spec);
            out.write(ex_out, ex_spec);
            std::cout << out.table.size() << " result rows written to " << ex_out << '\n';
        } else if (mp->parsed()) {
            const SystemSpec plant = load_system(mp_plant);
            const AnyModel model = load_checkpoint(mp_model);
            mp_spec.reference = to_vector(parse_list(mp_ref));
            const auto bounds = parse_list(mp_bounds);
            if (bounds.size() != 2)
                throw std::invalid_argument("--bounds takes two values");
            mp_spec.u_min = bounds[0];
            mp_spec.u_max = bounds[1];
            const Index d = system_dim(plant);
            const VectorXd x0 = mp_x0.empty() ? VectorXd::Zero(d) : to_vector(parse_list(mp_x0));
            const ControlTrace trace =
                std::visit([&](const auto& m) { return run_closed_loop(plant, m, mp_spec, x0, mp_T); }, model);
            std::ofstream os(mp_out);
            trace.write_csv(os);
            const VectorXd e = trace.x.back().tail(mp_spec.reference.size()) - mp_spec.reference;
            std::cout << "terminal level error " << e.lpNorm<Eigen::Infinity>() << " at t = " << trace.t.back()
                      << (trace.diverged ? " (plant diverged)" : "") << ", trace " << mp_out << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

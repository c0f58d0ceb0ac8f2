#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "phlab/errors.hpp"
#include "phlab/parallel.hpp"
#include "phlab/systems.hpp"

namespace phlab {

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream, index); results do not depend on
/// the order in which indices are visited.
inline Rng derived_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return Rng(seq);
}

namespace streams {
inline constexpr std::uint64_t initial_state = 1;
inline constexpr std::uint64_t noise = 2;
inline constexpr std::uint64_t init_params = 3;
inline constexpr std::uint64_t shuffle = 4;
} // namespace streams

/// Point on a ring: radius ~ U(1, 4.5), angle ~ U(0, 2π).
template <class R>
VectorXd sample_initial_massspring(R& rng) {
    std::uniform_real_distribution<double> radius(1.0, 4.5);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    const double r = radius(rng);
    const double a = angle(rng);
    return (VectorXd(2) << r * std::cos(a), r * std::sin(a)).finished();
}

/// Every coordinate ~ U(-1, 1).
template <class R>
VectorXd sample_initial_tank(R& rng, Index d = 9) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    VectorXd x(d);
    for (Index i = 0; i < d; ++i)
        x[i] = u(rng);
    return x;
}

template <class R>
VectorXd sample_initial(const SystemSpec& spec, R& rng) {
    if (std::holds_alternative<MassSpringSpec>(spec))
        return sample_initial_massspring(rng);
    return sample_initial_tank(rng, system_dim(spec));
}

struct TrajectoryDataset {
    std::vector<Trajectory> trajectories;
    nlohmann::json system; // to_json(SystemSpec)
    double sample_dt = 0.0;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    Index dim() const {
        return trajectories.empty() || trajectories.front().x.empty() ? 0 : trajectories.front().x.front().size();
    }

    std::size_t sample_count() const {
        std::size_t n = 0;
        for (const auto& t : trajectories)
            n += t.size();
        return n;
    }

    /// Equal state dimensions; strictly increasing times spaced by sample_dt.
    void validate() const {
        const Index d = dim();
        for (const auto& tr : trajectories) {
            if (tr.t.size() != tr.x.size())
                throw StructuralError("dataset: time and state counts differ");
            for (std::size_t k = 0; k < tr.size(); ++k) {
                if (tr.x[k].size() != d)
                    throw StructuralError("dataset: inconsistent state dimension");
                if (k > 0) {
                    const double gap = tr.t[k] - tr.t[k - 1];
                    if (!(gap > 0.0) || std::abs(gap - sample_dt) > 1e-9 * std::max(1.0, std::abs(tr.t[k])))
                        throw StructuralError("dataset: sample times not uniformly spaced by sample_dt");
                }
            }
        }
    }
};

struct DatasetOptions {
    std::size_t samples = 1000;
    double length = 1.0; // trajectory duration
    double sample_dt = 0.01;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    double t0 = 0.0;
};

inline std::size_t points_per_trajectory(double length, double sample_dt) {
    return static_cast<std::size_t>(std::llround(length / sample_dt)) + 1;
}

/// Simulates floor(samples / points) trajectories from sampled initial states
/// and adds i.i.d. N(0, σ²) noise to every stored coordinate.
inline TrajectoryDataset build_dataset(const SystemSpec& spec, const DatasetOptions& opt) {
    const std::size_t points = points_per_trajectory(opt.length, opt.sample_dt);
    const std::size_t n_traj = opt.samples / points;
    if (n_traj == 0)
        throw std::invalid_argument("build_dataset: " + std::to_string(opt.samples) +
                                    " samples do not fill one trajectory of " + std::to_string(points) +
                                    " points");
    TrajectoryDataset ds;
    ds.system = to_json(spec);
    ds.sample_dt = opt.sample_dt;
    ds.noise_sigma = opt.noise_sigma;
    ds.seed = opt.seed;
    ds.trajectories.resize(n_traj);
    // Every trajectory owns its RNG streams, so the thread count does not
    // change the output.
    parallel_for(n_traj, [&](std::size_t i) {
        Rng init = derived_rng(opt.seed, streams::initial_state, i);
        const VectorXd x0 = sample_initial(spec, init);
        Trajectory tr = simulate(spec, x0, opt.t0, opt.t0 + opt.length, opt.sample_dt);
        if (opt.noise_sigma > 0.0) {
            Rng noise_rng = derived_rng(opt.seed, streams::noise, i);
            std::normal_distribution<double> noise(0.0, opt.noise_sigma);
            for (auto& x : tr.x)
                for (Index c = 0; c < x.size(); ++c)
                    x[c] += noise(noise_rng);
        }
        ds.trajectories[i] = std::move(tr);
    });
    return ds;
}

/// One training unit: consecutive samples of a single trajectory.
struct SamplePair {
    VectorXd xn;
    VectorXd xnp1;
    double tn = 0.0;
    double dt = 0.0;
};

inline std::vector<SamplePair> pairs(const TrajectoryDataset& ds) {
    std::vector<SamplePair> out;
    for (const auto& tr : ds.trajectories)
        for (std::size_t k = 0; k + 1 < tr.size(); ++k)
            out.push_back({tr.x[k], tr.x[k + 1], tr.t[k], tr.t[k + 1] - tr.t[k]});
    return out;
}

/// Column-stacked pairs sharing one step size.
struct PairBatch {
    MatrixXd xn;   // d x P
    MatrixXd xnp1; // d x P
    MatrixXd tn;   // 1 x P
    double dt = 0.0;

    Index size() const noexcept { return xn.cols(); }
};

inline PairBatch stack_pairs(const std::vector<SamplePair>& ps, double dt) {
    PairBatch b;
    b.dt = dt;
    if (ps.empty())
        return b;
    const Index d = ps.front().xn.size();
    const auto n = static_cast<Index>(ps.size());
    b.xn.resize(d, n);
    b.xnp1.resize(d, n);
    b.tn.resize(1, n);
    for (Index i = 0; i < n; ++i) {
        const auto& p = ps[static_cast<std::size_t>(i)];
        b.xn.col(i) = p.xn;
        b.xnp1.col(i) = p.xnp1;
        b.tn(0, i) = p.tn;
    }
    return b;
}

inline PairBatch stack_pairs(const TrajectoryDataset& ds) { return stack_pairs(pairs(ds), ds.sample_dt); }

// File format: one JSON metadata line, then `traj_id,t,x_1,...,x_d` rows with
// 17 significant digits (round-trips doubles exactly).

namespace detail {

inline void append_double(std::string& out, double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    out.append(buf, r.ptr);
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw std::runtime_error("dataset: malformed number '" + std::string(s) + "'");
    return v;
}

} // namespace detail

inline void write_dataset(std::ostream& os, const TrajectoryDataset& ds) {
    nlohmann::json meta = {{"system", ds.system},
                           {"sample_dt", ds.sample_dt},
                           {"noise_sigma", ds.noise_sigma},
                           {"seed", ds.seed},
                           {"dim", ds.dim()},
                           {"trajectories", ds.trajectories.size()}};
    os << meta.dump() << '\n';
    std::string line;
    for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
        const auto& tr = ds.trajectories[i];
        for (std::size_t k = 0; k < tr.size(); ++k) {
            line.clear();
            line += std::to_string(i);
            line += ',';
            detail::append_double(line, tr.t[k]);
            for (Index c = 0; c < tr.x[k].size(); ++c) {
                line += ',';
                detail::append_double(line, tr.x[k][c]);
            }
            line += '\n';
            os << line;
        }
    }
}

inline TrajectoryDataset read_dataset(std::istream& is) {
    std::string line;
    if (!std::getline(is, line))
        throw std::runtime_error("dataset: missing metadata line");
    const auto meta = nlohmann::json::parse(line);
    TrajectoryDataset ds;
    ds.system = meta.at("system");
    ds.sample_dt = meta.at("sample_dt").get<double>();
    ds.noise_sigma = meta.at("noise_sigma").get<double>();
    ds.seed = meta.at("seed").get<std::uint64_t>();
    const auto d = meta.at("dim").get<Index>();
    ds.trajectories.resize(meta.at("trajectories").get<std::size_t>());
    std::vector<std::string_view> fields;
    while (std::getline(is, line)) {
        if (line.empty())
            continue;
        fields.clear();
        std::string_view rest(line);
        while (true) {
            const auto comma = rest.find(',');
            fields.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos)
                break;
            rest.remove_prefix(comma + 1);
        }
        if (static_cast<Index>(fields.size()) != d + 2)
            throw std::runtime_error("dataset: row has wrong number of fields");
        std::size_t id = 0;
        const auto r = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), id);
        if (r.ec != std::errc() || id >= ds.trajectories.size())
            throw std::runtime_error("dataset: bad trajectory id");
        VectorXd x(d);
        for (Index c = 0; c < d; ++c)
            x[c] = detail::parse_double(fields[static_cast<std::size_t>(c + 2)]);
        ds.trajectories[id].t.push_back(detail::parse_double(fields[1]));
        ds.trajectories[id].x.push_back(std::move(x));
    }
    ds.validate();
    return ds;
}

inline void save_dataset(const std::string& path, const TrajectoryDataset& ds) {
    std::ofstream os(path);
    if (!os)
        throw std::runtime_error("cannot open for writing: " + path);
    write_dataset(os, ds);
}

inline TrajectoryDataset load_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is)
        throw std::runtime_error("cannot open dataset: " + path);
    return read_dataset(is);
}

} // namespace phlab

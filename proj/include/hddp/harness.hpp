#pragma once

// Experiment runner: configuration, per-method problem setup, closed-loop
// evaluation, batch statistics and CSV export.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hddp/belief_ddp.hpp"
#include "hddp/ddp.hpp"
#include "hddp/envs/box.hpp"
#include "hddp/envs/car.hpp"
#include "hddp/hybrid.hpp"

namespace hddp::harness
{
namespace car = envs::car;
namespace box = envs::box;

enum class Env
{
    kCar,
    kBox,
    kBoxPomdp,
    kBoxUnknown,
    kBoxAllUnknown,
};

enum class Method
{
    kIlqg,
    kGreedy,
    kInterpolate,
    kMixture,
};

inline const std::vector<Method>& all_methods()
{
    static const std::vector<Method> m = {Method::kIlqg, Method::kGreedy, Method::kInterpolate,
                                          Method::kMixture};
    return m;
}

inline std::string to_string(Env env)
{
    switch (env)
    {
        case Env::kCar:
            return "car";
        case Env::kBox:
            return "box";
        case Env::kBoxPomdp:
            return "box-pomdp";
        case Env::kBoxUnknown:
            return "box-unknown";
        case Env::kBoxAllUnknown:
            return "box-all-unknown";
    }
    return "?";
}

inline std::string to_string(Method method)
{
    switch (method)
    {
        case Method::kIlqg:
            return "ilqg";
        case Method::kGreedy:
            return "greedy";
        case Method::kInterpolate:
            return "interpolate";
        case Method::kMixture:
            return "mixture";
    }
    return "?";
}

inline Env parse_env(const std::string& s)
{
    for (Env e : {Env::kCar, Env::kBox, Env::kBoxPomdp, Env::kBoxUnknown, Env::kBoxAllUnknown})
        if (to_string(e) == s) return e;
    throw Error("unknown environment '" + s + "'");
}

inline Method parse_method(const std::string& s)
{
    for (Method m : all_methods())
        if (to_string(m) == s) return m;
    throw Error("unknown method '" + s + "'");
}

inline std::vector<Method> parse_methods(const std::string& s)
{
    std::vector<Method> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
    {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (!item.empty()) out.push_back(parse_method(item));
    }
    return out;
}

inline bool is_stochastic(Env env) { return env != Env::kCar && env != Env::kBox; }

inline box::Variant box_variant(Env env)
{
    switch (env)
    {
        case Env::kBoxPomdp:
            return box::Variant::kPomdp;
        case Env::kBoxUnknown:
            return box::Variant::kUnknownCf;
        case Env::kBoxAllUnknown:
            return box::Variant::kAllUnknown;
        default:
            return box::Variant::kDeterministic;
    }
}

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig
{
    Env env = Env::kCar;
    std::vector<Method> methods = all_methods();
    int horizon = 500;
    int max_iterations = 400;
    double cst_max = 1.28;
    double cst_first = 0.01;
    double cst_threshold = 0.0;  // <= 0: 0.0001 for the car, 0.01 for box pushing
    int cf_count = 0;            // <= 0: 52 deterministic, 12 stochastic
    int samples = 20;
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    int threads = 0;  // <= 0: hardware concurrency
    car::Params car;
    box::Params box;

    double threshold() const
    {
        if (cst_threshold > 0.0) return cst_threshold;
        return env == Env::kCar ? 1e-4 : 1e-2;
    }

    int cf_total() const
    {
        if (env == Env::kCar) return 1;
        if (cf_count > 0) return cf_count;
        return is_stochastic(env) ? 12 : 52;
    }

    void validate() const
    {
        if (horizon <= 0) throw Error("config: horizon must be positive");
        if (max_iterations <= 0) throw Error("config: max_iters must be positive");
        if (samples <= 0) throw Error("config: samples must be positive");
        if (methods.empty()) throw Error("config: method list is empty");
        if (cst_max < 0.0 || cst_first < 0.0) throw Error("config: C_ST parameters must be non-negative");
    }
};

namespace detail
{
inline std::map<std::string, double*> numeric_keys(ExperimentConfig& c)
{
    auto& k = c.car;
    auto& b = c.box;
    return {
        {"cst_max", &c.cst_max},
        {"cst_first", &c.cst_first},
        {"cst_threshold", &c.cst_threshold},
        {"car.dt", &k.dt},
        {"car.wheelbase", &k.wheelbase},
        {"car.wheel_limit", &k.wheel_limit},
        {"car.acc_max", &k.acc_max},
        {"car.gear1_limit", &k.gear1_limit},
        {"car.gear2_limit", &k.gear2_limit},
        {"car.brake_limit", &k.brake_limit},
        {"car.engine_brake", &k.engine_brake},
        {"car.limit_width", &k.limit_width},
        {"car.w_final_xy", &k.w_final_xy},
        {"car.w_final_angle", &k.w_final_angle},
        {"car.w_final_velocity", &k.w_final_velocity},
        {"car.w_control", &k.w_control},
        {"car.kappa", &k.kappa},
        {"car.x0", &k.initial_state[0]},
        {"car.y0", &k.initial_state[1]},
        {"car.w0", &k.initial_state[2]},
        {"car.v0", &k.initial_state[3]},
        {"car.initial_wheel", &k.initial_wheel},
        {"car.initial_acc", &k.initial_acc},
        {"box.dt", &b.dt},
        {"box.half_size", &b.half_size},
        {"box.torque_scale", &b.torque_scale},
        {"box.alpha_limit", &b.alpha_limit},
        {"box.v_min", &b.v_min},
        {"box.v_max", &b.v_max},
        {"box.w_final_xy", &b.w_final_xy},
        {"box.w_final_angle", &b.w_final_angle},
        {"box.w_running_xy", &b.w_running_xy},
        {"box.kappa_running", &b.kappa_running},
        {"box.w_control", &b.w_control},
        {"box.w_obstacle", &b.w_obstacle},
        {"box.obstacle_x", &b.obstacle_x},
        {"box.obstacle_y", &b.obstacle_y},
        {"box.obstacle_offset", &b.obstacle_offset},
        {"box.w_corner", &b.w_corner},
        {"box.corner_rate", &b.corner_rate},
        {"box.kappa", &b.kappa},
        {"box.process_sd", &b.process_sd},
        {"box.observation_sd_position", &b.observation_sd_position},
        {"box.observation_sd_angle", &b.observation_sd_angle},
        {"box.initial_sd_position", &b.initial_sd_position},
        {"box.initial_sd_angle", &b.initial_sd_angle},
        {"box.initial_sd_cf", &b.initial_sd_cf},
        {"box.initial_sd_friction", &b.initial_sd_friction},
        {"box.friction_mean", &b.friction_mean},
        {"box.min_friction", &b.min_friction},
        {"box.x0", &b.initial_pose[0]},
        {"box.y0", &b.initial_pose[1]},
        {"box.w0", &b.initial_pose[2]},
        {"box.initial_ue", &b.initial_ue},
        {"box.initial_alpha", &b.initial_alpha},
        {"box.initial_v", &b.initial_v},
    };
}

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double parse_number(const std::string& key, const std::string& value)
{
    std::size_t used = 0;
    double v = 0.0;
    try
    {
        v = std::stod(value, &used);
    }
    catch (const std::exception&)
    {
        used = 0;
    }
    if (used != value.size() || value.empty())
        throw Error("config: value for '" + key + "' is not a number: '" + value + "'");
    return v;
}

inline int parse_int(const std::string& key, const std::string& value)
{
    const double v = parse_number(key, value);
    if (v != std::floor(v)) throw Error("config: value for '" + key + "' must be an integer");
    return static_cast<int>(v);
}
}  // namespace detail

/// Applies one key = value setting; unknown keys are errors.
inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value)
{
    if (key == "env")
        cfg.env = parse_env(value);
    else if (key == "method" || key == "methods")
        cfg.methods = parse_methods(value);
    else if (key == "horizon")
        cfg.horizon = detail::parse_int(key, value);
    else if (key == "max_iters")
        cfg.max_iterations = detail::parse_int(key, value);
    else if (key == "cf_count")
        cfg.cf_count = detail::parse_int(key, value);
    else if (key == "samples")
        cfg.samples = detail::parse_int(key, value);
    else if (key == "threads")
        cfg.threads = detail::parse_int(key, value);
    else if (key == "seed")
        cfg.seed = std::stoull(value);
    else if (key == "out")
        cfg.out_dir = value;
    else if (key == "car.initial_action")
        cfg.car.initial_action = detail::parse_int(key, value);
    else if (key == "box.initial_edge")
        cfg.box.initial_edge = detail::parse_int(key, value);
    else
    {
        auto keys = detail::numeric_keys(cfg);
        auto it = keys.find(key);
        if (it == keys.end()) throw Error("config: unknown key '" + key + "'");
        *it->second = detail::parse_number(key, value);
    }
}

/// Reads a flat `key = value` file; `#` starts a comment.
inline void load_config(ExperimentConfig& cfg, std::istream& in)
{
    std::string line;
    int lineno = 0;
    while (std::getline(in, line))
    {
        ++lineno;
        line = detail::trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error("config line " + std::to_string(lineno) + ": expected key = value");
        apply_setting(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
}

inline void load_config_file(ExperimentConfig& cfg, const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open config file '" + path + "'");
    load_config(cfg, in);
}

// ---------------------------------------------------------------------------
// Seeds and CF sampling

inline std::uint64_t splitmix64(std::uint64_t z)
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Stable per-run seed from the master seed and the run coordinates.
inline std::uint64_t run_seed(std::uint64_t master, Env env, Method method, int cf, int sample)
{
    const std::string key = to_string(env) + "|" + to_string(method) + "|" + std::to_string(cf) +
                            "|" + std::to_string(sample);
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : key)
    {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(h ^ splitmix64(master));
}

inline double halton(std::uint64_t index, unsigned base)
{
    double f = 1.0, r = 0.0;
    while (index > 0)
    {
        f /= base;
        r += f * static_cast<double>(index % base);
        index /= base;
    }
    return r;
}

/// Low-discrepancy CFs over [0.2, 0.8]^2 (unit-square coordinates of the box).
inline std::vector<box::Vec2> sample_cf_grid(int count, std::uint64_t seed)
{
    if (count < 1) throw Error("sample_cf_grid: count must be at least 1");
    std::vector<box::Vec2> out;
    if (count == 1)
    {
        out.emplace_back(0.5, 0.5);
        return out;
    }
    const std::uint64_t offset = 1 + seed % 1009;
    for (int i = 0; i < count; ++i)
        out.emplace_back(0.2 + 0.6 * halton(offset + i, 2), 0.2 + 0.6 * halton(offset + i, 3));
    return out;
}

// ---------------------------------------------------------------------------
// Hybrid trajectories (decoded to continuous controls, probabilities, actions)

struct HybridTrajectory
{
    std::vector<std::string> state_names;
    std::vector<std::string> control_names;
    std::vector<std::string> action_names;
    std::vector<Vector> states;           // T + 1
    std::vector<Vector> covariance_diag;  // T + 1 when a belief is carried, else empty
    std::vector<Vector> controls;         // T
    std::vector<Vector> probabilities;    // T
    std::vector<int> actions;             // T
    std::vector<double> stage_costs;      // T
    double final_cost = 0.0;
    double total_cost = 0.0;

    int horizon() const { return static_cast<int>(controls.size()); }
    bool operator==(const HybridTrajectory&) const = default;
};

namespace detail
{
inline std::string format_number(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}
}  // namespace detail

/// CSV: t, states, var_<state> (beliefs), controls, p_<action>, action, cost.
/// The final row holds the final state, empty control cells and the final cost.
inline void write_trajectory(std::ostream& os, const HybridTrajectory& tr)
{
    const bool belief = !tr.covariance_diag.empty();
    os << "t";
    for (const auto& n : tr.state_names) os << ',' << n;
    if (belief)
        for (const auto& n : tr.state_names) os << ",var_" << n;
    for (const auto& n : tr.control_names) os << ',' << n;
    for (const auto& n : tr.action_names) os << ",p_" << n;
    os << ",action,cost\n";
    using detail::format_number;
    for (int t = 0; t <= tr.horizon(); ++t)
    {
        os << t;
        for (Eigen::Index i = 0; i < tr.states[t].size(); ++i) os << ',' << format_number(tr.states[t][i]);
        if (belief)
            for (Eigen::Index i = 0; i < tr.covariance_diag[t].size(); ++i)
                os << ',' << format_number(tr.covariance_diag[t][i]);
        if (t < tr.horizon())
        {
            for (Eigen::Index i = 0; i < tr.controls[t].size(); ++i)
                os << ',' << format_number(tr.controls[t][i]);
            for (Eigen::Index i = 0; i < tr.probabilities[t].size(); ++i)
                os << ',' << format_number(tr.probabilities[t][i]);
            os << ',' << tr.actions[t] << ',' << format_number(tr.stage_costs[t]) << '\n';
        }
        else
        {
            for (std::size_t i = 0; i < tr.control_names.size() + tr.action_names.size() + 1; ++i) os << ',';
            os << ',' << format_number(tr.final_cost) << '\n';
        }
    }
}

inline void export_trajectory(const HybridTrajectory& tr, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw Error("cannot write trajectory file '" + path + "'");
    write_trajectory(out, tr);
    if (!out) throw Error("failed writing trajectory file '" + path + "'");
}

/// Inverse of write_trajectory.
inline HybridTrajectory parse_trajectory(std::istream& in)
{
    std::string line;
    if (!std::getline(in, line)) throw Error("trajectory csv: missing header");
    const auto header = detail::split_csv(line);
    if (header.size() < 3 || header.front() != "t" || header[header.size() - 2] != "action" ||
        header.back() != "cost")
        throw Error("trajectory csv: unexpected header");
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(detail::split_csv(line));
    if (rows.empty()) throw Error("trajectory csv: no rows");
    for (std::size_t r = 0; r < rows.size(); ++r)
        if (rows[r].size() != header.size()) throw Error("trajectory csv: ragged row " + std::to_string(r));

    HybridTrajectory tr;
    const std::size_t end = header.size() - 2;
    std::size_t lead = 1;
    while (lead < end && header[lead].rfind("var_", 0) != 0 && header[lead].rfind("p_", 0) != 0) ++lead;
    std::size_t i = lead;
    while (i < end && header[i].rfind("var_", 0) == 0) ++i;
    const bool belief = i > lead;
    // Without variance columns the state/control split comes from the final
    // row, whose control cells are empty.
    std::size_t state_end = lead;
    if (!belief)
    {
        state_end = 1;
        while (state_end < lead && !rows.back()[state_end].empty()) ++state_end;
    }
    for (std::size_t k = 1; k < state_end; ++k) tr.state_names.push_back(header[k]);
    for (std::size_t k = state_end; k < lead; ++k) tr.control_names.push_back(header[k]);
    // Controls sit between the variances and the probabilities.
    while (i < end && header[i].rfind("p_", 0) != 0) tr.control_names.push_back(header[i++]);
    while (i < end) tr.action_names.push_back(header[i++].substr(2));
    const std::size_t ns = tr.state_names.size(), nu = tr.control_names.size(),
                      na = tr.action_names.size();

    auto num = [](const std::string& s) { return std::stod(s); };
    for (std::size_t r = 0; r < rows.size(); ++r)
    {
        const auto& row = rows[r];
        std::size_t c = 1;
        Vector s(ns);
        for (std::size_t k = 0; k < ns; ++k) s[k] = num(row[c++]);
        tr.states.push_back(s);
        if (belief)
        {
            Vector v(ns);
            for (std::size_t k = 0; k < ns; ++k) v[k] = num(row[c++]);
            tr.covariance_diag.push_back(v);
        }
        if (r + 1 < rows.size())
        {
            Vector u(nu), p(na);
            for (std::size_t k = 0; k < nu; ++k) u[k] = num(row[c++]);
            for (std::size_t k = 0; k < na; ++k) p[k] = num(row[c++]);
            tr.controls.push_back(u);
            tr.probabilities.push_back(p);
            tr.actions.push_back(std::stoi(row[c++]));
            tr.stage_costs.push_back(num(row[c]));
        }
        else
        {
            tr.final_cost = num(row.back());
        }
    }
    double total = 0.0;
    for (double c : tr.stage_costs) total += c;
    tr.total_cost = total + tr.final_cost;
    return tr;
}

// ---------------------------------------------------------------------------
// Method setup

/// Everything needed to optimize and evaluate one method on one instance.
struct MethodSetup
{
    Problem problem;  // what the optimizer sees
    std::optional<hybrid::MixtureProblem> mixture;
    SolverConfig solver;
    Vector x0;
    std::vector<Vector> controls;
    std::vector<int> actions;
    hybrid::ControlDecoder decode;
    Problem base;  // hybrid problem used to score executed trajectories
    std::optional<BeliefProblem> belief;
    ExecutionModel exec;
    std::vector<std::string> state_names, control_names, action_names;
};

inline MethodSetup make_setup(const ExperimentConfig& cfg, Method method, int cf_index)
{
    MethodSetup s;
    s.solver.max_iterations = cfg.max_iterations;
    s.solver.horizon = cfg.horizon;
    s.solver.cost_tolerance = cfg.threshold();
    const int T = cfg.horizon;

    if (cfg.env == Env::kCar)
    {
        const auto& p = cfg.car;
        s.base = car::make_problem(p);
        s.x0 = p.initial_state;
        s.state_names = {"x", "y", "w", "v_car"};
        s.control_names = {"w_wheel", "acc"};
        s.action_names = {"brake", "g1", "g2"};
        const Vector u0 = car::initial_control(p);
        switch (method)
        {
            case Method::kIlqg:
            {
                s.problem = car::make_continuous_problem(p);
                Vector u(3);
                u << u0, car::selector_for(p.initial_action);
                s.controls.assign(T, u);
                s.actions.assign(T, 0);
                s.decode = [](const Vector& c, int) {
                    hybrid::DecodedControl d{c.head(2), Vector::Zero(car::kNumActions),
                                             car::gear_from_selector(c[2])};
                    d.p[d.action] = 1.0;
                    return d;
                };
                break;
            }
            case Method::kGreedy:
            case Method::kInterpolate:
                s.problem = s.base;
                s.controls.assign(T, u0);
                s.actions.assign(T, p.initial_action);
                s.decode = hybrid::carried_action_decoder(car::kNumActions);
                break;
            case Method::kMixture:
                s.mixture = hybrid::augment(s.base, p.kappa);
                s.problem = s.mixture->relaxed(0.0);
                s.controls.assign(T, s.mixture->initial_control(u0, p.initial_action));
                s.actions.assign(T, 0);
                s.decode = hybrid::mixture_decoder(car::kControlDim, car::kNumActions);
                break;
        }
    }
    else
    {
        const auto& p = cfg.box;
        const auto variant = box_variant(cfg.env);
        const auto cfs = sample_cf_grid(cfg.cf_total(), cfg.seed);
        if (cf_index < 0 || cf_index >= static_cast<int>(cfs.size()))
            throw Error("cf index out of range");
        s.base = box::make_problem(p, variant);
        s.x0 = box::initial_state(p, cfs[cf_index]);
        s.state_names = {"x_c", "y_c", "w", "x_cf", "y_cf", "mu_c", "dist_c"};
        s.control_names = {"u_e", "alpha_p", "v"};
        s.action_names = {"e0", "e1", "e2", "e3"};
        const Vector u0 = box::initial_control(p);
        switch (method)
        {
            case Method::kIlqg:
            {
                s.problem = box::make_perimeter_problem(p, variant);
                Vector u = u0;
                u[0] = box::to_perimeter(p.initial_edge, p.initial_ue);
                s.controls.assign(T, u);
                s.actions.assign(T, 0);
                s.decode = [](const Vector& c, int) {
                    const auto pp = box::from_perimeter(c[0]);
                    hybrid::DecodedControl d{c, Vector::Zero(box::kNumEdges), pp.edge};
                    d.u[0] = pp.ue;
                    d.p[pp.edge] = 1.0;
                    return d;
                };
                break;
            }
            case Method::kGreedy:
            case Method::kInterpolate:
                s.problem = s.base;
                s.controls.assign(T, u0);
                s.actions.assign(T, p.initial_edge);
                s.decode = hybrid::carried_action_decoder(box::kNumEdges);
                break;
            case Method::kMixture:
                s.mixture = hybrid::augment(s.base, p.kappa);
                s.problem = s.mixture->relaxed(0.0);
                s.controls.assign(T, s.mixture->initial_control(u0, p.initial_edge));
                s.actions.assign(T, 0);
                s.decode = hybrid::mixture_decoder(box::kControlDim, box::kNumEdges);
                break;
        }
        if (is_stochastic(cfg.env))
        {
            s.belief = box::make_belief_problem(s.problem, p, variant);
            auto decode = s.decode;
            const Problem base = s.base;
            s.exec.step = [p, decode](const Vector& x, const Vector& mean, const Vector& c, int a) {
                const auto d = decode(c, a);
                return box::push_executed(p, x, mean, d.action, d.u[0], d.u[1], d.u[2]).next;
            };
            s.exec.running = [base, decode](const Vector& x, const Vector& c, int a, const Matrix& cov) {
                const auto d = decode(c, a);
                return base.cost.running(x, d.u, d.action, cov);
            };
            s.exec.final = base.cost.final;
            const Matrix m = box::process_noise(p, variant);
            s.exec.noise = [m](const Vector&, const Vector&, int) { return m; };
            s.exec.sanitize = [p](Vector x) { return box::sanitize(p, std::move(x)); };
        }
    }
    if (method == Method::kGreedy) s.solver.discrete_update = DiscreteUpdate::kGreedy;
    if (method == Method::kInterpolate) s.solver.discrete_update = DiscreteUpdate::kInterpolate;
    return s;
}

/// Iteration hook driving the C_ST annealing schedule of a mixture run.
inline IterationHook cst_hook(const hybrid::MixtureProblem& mixture, hybrid::CstSchedule schedule,
                              int max_iterations)
{
    auto state = std::make_shared<hybrid::CstSchedule>(schedule);
    return [mixture, state, max_iterations](const IterationLogEntry& entry, bool accepted) {
        const double before = state->value;
        // A rejected step says nothing about convergence; only the iteration rule applies.
        const double decrease = accepted ? entry.decrease : kInf;
        *state = hybrid::update_cst(*state, decrease, entry.iteration, max_iterations);
        HookResult out;
        out.c_st = state->value;
        if (state->value != before) out.problem = mixture.relaxed(state->value);
        return out;
    };
}

/// Optimizes the setup's problem with its method.
inline OptimizeResult optimize_setup(const MethodSetup& s, const ExperimentConfig& cfg)
{
    IterationHook hook;
    if (s.mixture)
    {
        hybrid::CstSchedule schedule;
        schedule.first_value = cfg.cst_first;
        schedule.max_value = cfg.cst_max;
        schedule.threshold = cfg.threshold();
        hook = cst_hook(*s.mixture, schedule, cfg.max_iterations);
    }
    if (s.belief) return belief_optimize(*s.belief, s.solver, s.x0, s.controls, s.actions, hook);
    return optimize(s.problem, s.solver, s.x0, s.controls, s.actions, hook);
}

/// Decodes a solver-space record into executed hybrid controls.
inline HybridTrajectory decode_record(const MethodSetup& s, const TrajectoryRecord& rec)
{
    HybridTrajectory tr;
    tr.state_names = s.state_names;
    tr.control_names = s.control_names;
    tr.action_names = s.action_names;
    tr.states = rec.states;
    for (const auto& c : rec.covariances) tr.covariance_diag.push_back(c.diagonal());
    for (int t = 0; t < rec.horizon(); ++t)
    {
        const auto d = s.decode(rec.controls[t], rec.actions[t]);
        tr.controls.push_back(d.u);
        tr.probabilities.push_back(d.p);
        tr.actions.push_back(d.action);
    }
    tr.stage_costs = rec.stage_costs;
    tr.final_cost = rec.final_cost;
    tr.total_cost = rec.total_cost;
    return tr;
}

/// Noise-free execution of the policy on the hybrid base problem (deterministic
/// environments): decoded controls, feedback on the true state.
inline HybridTrajectory execute_deterministic(const MethodSetup& s, const FeedbackPolicy& policy,
                                              const Problem& solver_problem)
{
    const auto& nominal = policy.nominal;
    const Matrix zero = Matrix::Zero(s.base.state_dim, s.base.state_dim);
    TrajectoryRecord rec;
    Vector x = s.x0;
    rec.states.push_back(x);
    double total = 0.0;
    for (int t = 0; t < policy.horizon(); ++t)
    {
        const Vector c = project_control(
            solver_problem, nominal.controls[t] + policy.k[t] + policy.K[t] * (x - nominal.states[t]));
        const auto d = s.decode(c, policy.actions[t]);
        const double cost = s.base.cost.running(x, d.u, d.action, zero);
        x = s.base.dynamics.f(x, d.u, d.action);
        if (!x.allFinite() || !std::isfinite(cost)) throw RolloutDiverged(t);
        rec.controls.push_back(c);
        rec.actions.push_back(policy.actions[t]);
        rec.stage_costs.push_back(cost);
        rec.states.push_back(x);
        total += cost;
    }
    rec.final_cost = s.base.cost.final(x, zero);
    rec.total_cost = total + rec.final_cost;
    return decode_record(s, rec);
}

// ---------------------------------------------------------------------------
// Runs and batches

struct ResultRow
{
    Env env = Env::kCar;
    Method method = Method::kIlqg;
    int cf_index = 0;
    std::uint64_t seed = 0;
    double cost = 0.0;      // planned (deterministic) or mean realized cost
    double cost_sd = 0.0;   // SD over closed-loop samples
    int samples = 0;
    int iterations = 0;
    bool converged = false;
    std::string status = "ok";  // "ok" or "failed: <reason>"
    double wall_seconds = 0.0;  // reported separately; not part of the deterministic table
};

struct RunResult
{
    ResultRow row;
    HybridTrajectory executed;  // noise-free execution, or the first closed-loop sample
    OptimizeResult optimization;
};

inline RunResult run_single(const ExperimentConfig& cfg, Method method, int cf_index)
{
    const auto start = std::chrono::steady_clock::now();
    RunResult out;
    auto& row = out.row;
    row.env = cfg.env;
    row.method = method;
    row.cf_index = cf_index;
    row.seed = run_seed(cfg.seed, cfg.env, method, cf_index, 0);
    try
    {
        const MethodSetup s = make_setup(cfg, method, cf_index);
        out.optimization = optimize_setup(s, cfg);
        row.iterations = out.optimization.iterations;
        row.converged = out.optimization.converged;
        const auto& policy = out.optimization.policy;
        if (!s.belief)
        {
            out.executed = execute_deterministic(s, policy, out.optimization.problem);
            row.cost = out.executed.total_cost;
            row.samples = 1;
        }
        else
        {
            BeliefProblem bp = *s.belief;
            bp.problem = out.optimization.problem;
            std::vector<double> costs;
            for (int k = 0; k < cfg.samples; ++k)
            {
                const auto rec = simulate_closed_loop(bp, policy, s.x0,
                                                      run_seed(cfg.seed, cfg.env, method, cf_index, k), s.exec);
                if (k == 0) out.executed = decode_record(s, rec);
                costs.push_back(rec.total_cost);
            }
            double mean = 0.0;
            for (double c : costs) mean += c;
            mean /= costs.size();
            double var = 0.0;
            for (double c : costs) var += (c - mean) * (c - mean);
            row.cost = mean;
            row.cost_sd = costs.size() > 1 ? std::sqrt(var / (costs.size() - 1)) : 0.0;
            row.samples = static_cast<int>(costs.size());
        }
    }
    catch (const std::exception& e)
    {
        row.status = std::string("failed: ") + e.what();
        row.cost = std::nan("");
    }
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

struct AggregateRow
{
    Method method = Method::kIlqg;
    double mean = 0.0;
    double std_error = 0.0;  // sample SD over CFs / sqrt(number of CFs)
    int count = 0;           // rows that produced a cost
};

struct ResultTable
{
    Env env = Env::kCar;
    std::vector<ResultRow> rows;
    std::vector<AggregateRow> aggregates;
};

inline AggregateRow aggregate(Method method, const std::vector<ResultRow>& rows)
{
    AggregateRow a;
    a.method = method;
    std::vector<double> costs;
    for (const auto& r : rows)
        if (r.method == method && std::isfinite(r.cost)) costs.push_back(r.cost);
    a.count = static_cast<int>(costs.size());
    if (costs.empty())
    {
        a.mean = std::nan("");
        return a;
    }
    double sum = 0.0;
    for (double c : costs) sum += c;
    a.mean = sum / costs.size();
    if (costs.size() > 1)
    {
        double var = 0.0;
        for (double c : costs) var += (c - a.mean) * (c - a.mean);
        a.std_error = std::sqrt(var / (costs.size() - 1)) / std::sqrt(static_cast<double>(costs.size()));
    }
    return a;
}

/// Runs `count` tasks on a bounded pool; results land at their task index.
template <typename Result, typename Task>
std::vector<Result> run_pool(int count, int threads, Task task)
{
    std::vector<Result> results(count);
    if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    threads = std::min(threads, std::max(count, 1));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int i = next++; i < count; i = next++) results[i] = task(i);
    };
    std::vector<std::thread> pool;
    for (int i = 1; i < threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    return results;
}

/// All methods over the CF grid, merged in (method, cf) order.
inline ResultTable run_batch(const ExperimentConfig& cfg)
{
    cfg.validate();
    const int cfs = cfg.cf_total();
    const int count = static_cast<int>(cfg.methods.size()) * cfs;
    auto rows = run_pool<ResultRow>(count, cfg.threads, [&](int i) {
        return run_single(cfg, cfg.methods[i / cfs], i % cfs).row;
    });
    ResultTable table;
    table.env = cfg.env;
    table.rows = std::move(rows);
    for (Method m : cfg.methods) table.aggregates.push_back(aggregate(m, table.rows));
    return table;
}

/// Deterministic results table: one line per run, then one per method aggregate.
inline void write_results(std::ostream& os, const ResultTable& table)
{
    using detail::format_number;
    os << "kind,env,method,cf_index,seed,cost,cost_sd,samples,iterations,converged,status\n";
    for (const auto& r : table.rows)
    {
        os << "run," << to_string(r.env) << ',' << to_string(r.method) << ',' << r.cf_index << ','
           << r.seed << ',' << format_number(r.cost) << ',' << format_number(r.cost_sd) << ','
           << r.samples << ',' << r.iterations << ',' << (r.converged ? 1 : 0) << ',' << r.status
           << '\n';
    }
    for (const auto& a : table.aggregates)
    {
        os << "mean," << to_string(table.env) << ',' << to_string(a.method) << ",,,"
           << format_number(a.mean) << ',' << format_number(a.std_error) << ',' << a.count
           << ",,,\n";
    }
}

inline void write_timings(std::ostream& os, const ResultTable& table)
{
    os << "env,method,cf_index,wall_seconds\n";
    for (const auto& r : table.rows)
        os << to_string(r.env) << ',' << to_string(r.method) << ',' << r.cf_index << ','
           << detail::format_number(r.wall_seconds) << '\n';
}

}  // namespace hddp::harness

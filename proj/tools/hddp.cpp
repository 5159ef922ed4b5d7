// Command-line front end: single runs, batches over CFs, and trajectory export.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hddp/harness.hpp"

namespace fs = std::filesystem;
using namespace hddp::harness;

namespace
{
struct Flags
{
    std::string config;
    std::optional<std::string> env, method, out;
    std::optional<int> horizon, max_iters, cf_count, samples, threads;
    std::optional<std::uint64_t> seed;
    int cf = 0;
};

void add_common(CLI::App* app, Flags& f)
{
    app->add_option("--config", f.config, "key = value file applied before flags");
    app->add_option("--env", f.env, "car | box | box-pomdp | box-unknown | box-all-unknown");
    app->add_option("--method", f.method, "ilqg | greedy | interpolate | mixture (comma list for batch)");
    app->add_option("--horizon", f.horizon, "time steps T");
    app->add_option("--max-iters", f.max_iters, "optimizer iterations");
    app->add_option("--seed", f.seed, "master seed");
    app->add_option("--cf-count", f.cf_count, "number of sampled CFs");
    app->add_option("--samples", f.samples, "closed-loop samples per CF");
    app->add_option("--threads", f.threads, "worker threads for batches");
    app->add_option("--out", f.out, "output directory");
}

ExperimentConfig resolve(const Flags& f)
{
    ExperimentConfig cfg;
    if (!f.config.empty()) load_config_file(cfg, f.config);
    if (f.env) cfg.env = parse_env(*f.env);
    if (f.method) cfg.methods = parse_methods(*f.method);
    if (f.horizon) cfg.horizon = *f.horizon;
    if (f.max_iters) cfg.max_iterations = *f.max_iters;
    if (f.seed) cfg.seed = *f.seed;
    if (f.cf_count) cfg.cf_count = *f.cf_count;
    if (f.samples) cfg.samples = *f.samples;
    if (f.threads) cfg.threads = *f.threads;
    if (f.out) cfg.out_dir = *f.out;
    cfg.validate();
    return cfg;
}

template <typename Fn>
void write_file(const fs::path& path, Fn fn)
{
    std::ofstream out(path);
    if (!out) throw hddp::Error("cannot write '" + path.string() + "'");
    fn(out);
}

RunResult single(const ExperimentConfig& cfg, int cf)
{
    if (cfg.methods.size() != 1) throw hddp::Error("run/export take exactly one --method");
    if (cf < 0 || cf >= cfg.cf_total()) throw hddp::Error("--cf out of range");
    return run_single(cfg, cfg.methods.front(), cf);
}

ResultTable as_table(const ExperimentConfig& cfg, const RunResult& r)
{
    ResultTable t;
    t.env = cfg.env;
    t.rows.push_back(r.row);
    t.aggregates.push_back(aggregate(r.row.method, t.rows));
    return t;
}
}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Hybrid DDP experiments"};
    app.require_subcommand(1);
    Flags run_flags, batch_flags, export_flags;

    auto* run = app.add_subcommand("run", "optimize and evaluate one method on one CF");
    add_common(run, run_flags);
    run->add_option("--cf", run_flags.cf, "CF index");

    auto* batch = app.add_subcommand("batch", "all methods over the CF grid");
    add_common(batch, batch_flags);

    auto* exp = app.add_subcommand("export", "write the executed trajectory and iteration log");
    add_common(exp, export_flags);
    exp->add_option("--cf", export_flags.cf, "CF index");

    CLI11_PARSE(app, argc, argv);

    try
    {
        if (run->parsed())
        {
            const auto cfg = resolve(run_flags);
            const auto r = single(cfg, run_flags.cf);
            const auto table = as_table(cfg, r);
            write_results(std::cout, table);
            if (run_flags.out)
            {
                fs::create_directories(cfg.out_dir);
                write_file(fs::path(cfg.out_dir) / "results.csv", [&](auto& os) { write_results(os, table); });
                write_file(fs::path(cfg.out_dir) / "timings.csv", [&](auto& os) { write_timings(os, table); });
            }
            return r.row.status == "ok" ? 0 : 2;
        }
        if (batch->parsed())
        {
            const auto cfg = resolve(batch_flags);
            const auto table = run_batch(cfg);
            fs::create_directories(cfg.out_dir);
            write_file(fs::path(cfg.out_dir) / "results.csv", [&](auto& os) { write_results(os, table); });
            write_file(fs::path(cfg.out_dir) / "timings.csv", [&](auto& os) { write_timings(os, table); });
            for (const auto& a : table.aggregates)
                std::cout << to_string(a.method) << ": mean " << a.mean << " SE " << a.std_error << " ("
                          << a.count << " CFs)\n";
            return 0;
        }
        if (exp->parsed())
        {
            const auto cfg = resolve(export_flags);
            const auto r = single(cfg, export_flags.cf);
            if (r.row.status != "ok") throw hddp::Error(r.row.status);
            fs::create_directories(cfg.out_dir);
            const fs::path dir(cfg.out_dir);
            export_trajectory(r.executed, (dir / "trajectory.csv").string());
            write_file(dir / "iterations.csv", [&](auto& os) { hddp::write_iteration_log(os, r.optimization.log); });
            std::cout << "wrote " << (dir / "trajectory.csv").string() << " and "
                      << (dir / "iterations.csv").string() << "\n";
            return 0;
        }
    }
    catch (const std::exception& e)
    {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

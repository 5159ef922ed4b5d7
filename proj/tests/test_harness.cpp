#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "hddp/harness.hpp"

using namespace hddp;
using namespace hddp::harness;

namespace
{
ExperimentConfig small_car()
{
    ExperimentConfig c;
    c.env = Env::kCar;
    c.horizon = 20;
    c.max_iterations = 5;
    c.threads = 1;
    return c;
}

ExperimentConfig small_box(Env env)
{
    ExperimentConfig c;
    c.env = env;
    c.horizon = 10;
    c.max_iterations = 3;
    c.cf_count = 2;
    c.samples = 3;
    c.seed = 11;
    c.threads = 2;
    return c;
}

std::string results_text(const ResultTable& t)
{
    std::ostringstream os;
    write_results(os, t);
    return os.str();
}
}  // namespace

TEST(Config, ParsesKeysAndComments)
{
    ExperimentConfig c;
    std::istringstream in(
        "# experiment\n"
        "env = box-pomdp\n"
        "methods = ilqg, mixture\n"
        "horizon = 120   # steps\n"
        "\n"
        "car.dt = 0.25\n"
        "box.kappa = 3.5\n"
        "seed = 42\n");
    load_config(c, in);
    EXPECT_EQ(c.env, Env::kBoxPomdp);
    ASSERT_EQ(c.methods.size(), 2u);
    EXPECT_EQ(c.methods[0], Method::kIlqg);
    EXPECT_EQ(c.methods[1], Method::kMixture);
    EXPECT_EQ(c.horizon, 120);
    EXPECT_EQ(c.car.dt, 0.25);
    EXPECT_EQ(c.box.kappa, 3.5);
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.cf_total(), 12);
}

TEST(Config, RejectsBadInput)
{
    ExperimentConfig c;
    EXPECT_THROW(apply_setting(c, "horizn", "5"), Error);
    EXPECT_THROW(apply_setting(c, "car.dt", "fast"), Error);
    EXPECT_THROW(apply_setting(c, "horizon", "2.5"), Error);
    EXPECT_THROW(apply_setting(c, "env", "boat"), Error);
    EXPECT_THROW(apply_setting(c, "methods", "ilqg,best"), Error);
    std::istringstream in("horizon 5\n");
    EXPECT_THROW(load_config(c, in), Error);
    EXPECT_THROW(load_config_file(c, "/nonexistent/config.txt"), Error);
}

TEST(Config, DefaultsAndValidation)
{
    ExperimentConfig c;
    EXPECT_EQ(c.cf_total(), 1);
    EXPECT_EQ(c.threshold(), 1e-4);
    c.env = Env::kBox;
    EXPECT_EQ(c.cf_total(), 52);
    EXPECT_EQ(c.threshold(), 1e-2);
    c.methods.clear();
    EXPECT_THROW(c.validate(), Error);
    EXPECT_THROW(run_batch(c), Error);
}

TEST(Seeds, StableAndDistinct)
{
    EXPECT_EQ(run_seed(7, Env::kBox, Method::kGreedy, 3, 2), run_seed(7, Env::kBox, Method::kGreedy, 3, 2));
    std::set<std::uint64_t> seen;
    for (Method m : all_methods())
        for (int cf = 0; cf < 5; ++cf)
            for (int k = 0; k < 5; ++k) seen.insert(run_seed(7, Env::kBoxPomdp, m, cf, k));
    EXPECT_EQ(seen.size(), 4u * 5u * 5u);
    EXPECT_NE(run_seed(7, Env::kBox, Method::kIlqg, 0, 0), run_seed(8, Env::kBox, Method::kIlqg, 0, 0));
    EXPECT_NE(run_seed(7, Env::kBox, Method::kIlqg, 0, 0), run_seed(7, Env::kBoxPomdp, Method::kIlqg, 0, 0));
}

TEST(CfGrid, SinglePointIsTheCenter)
{
    const auto g = sample_cf_grid(1, 99);
    ASSERT_EQ(g.size(), 1u);
    EXPECT_EQ(g[0], box::Vec2(0.5, 0.5));
    EXPECT_THROW(sample_cf_grid(0, 1), Error);
}

TEST(CfGrid, PointsInsideTheRegionAndSeeded)
{
    const auto g = sample_cf_grid(52, 3);
    ASSERT_EQ(g.size(), 52u);
    std::set<std::pair<double, double>> distinct;
    for (const auto& p : g)
    {
        EXPECT_GE(p.x(), 0.2);
        EXPECT_LE(p.x(), 0.8);
        EXPECT_GE(p.y(), 0.2);
        EXPECT_LE(p.y(), 0.8);
        distinct.insert({p.x(), p.y()});
    }
    EXPECT_EQ(distinct.size(), 52u);
    EXPECT_EQ(sample_cf_grid(52, 3), g);
    EXPECT_NE(sample_cf_grid(52, 4), g);
}

TEST(Halton, KnownValues)
{
    EXPECT_DOUBLE_EQ(halton(1, 2), 0.5);
    EXPECT_DOUBLE_EQ(halton(2, 2), 0.25);
    EXPECT_DOUBLE_EQ(halton(3, 2), 0.75);
    EXPECT_DOUBLE_EQ(halton(1, 3), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(halton(5, 3), 2.0 / 3.0 + 1.0 / 9.0);
}

TEST(Trajectory, CarSchemaAndRoundTrip)
{
    const auto cfg = small_car();
    const auto run = run_single(cfg, Method::kMixture, 0);
    ASSERT_EQ(run.row.status, "ok");
    std::ostringstream os;
    write_trajectory(os, run.executed);
    std::istringstream in(os.str());
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "t,x,y,w,v_car,w_wheel,acc,p_brake,p_g1,p_g2,action,cost");
    int rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    EXPECT_EQ(rows, cfg.horizon + 1);

    std::istringstream back(os.str());
    const auto parsed = parse_trajectory(back);
    EXPECT_EQ(parsed, run.executed);
    EXPECT_NEAR(parsed.total_cost, run.row.cost, 1e-12 * (1 + std::abs(run.row.cost)));
}

TEST(Trajectory, BeliefRoundTripCarriesVariances)
{
    auto cfg = small_box(Env::kBoxPomdp);
    const auto run = run_single(cfg, Method::kGreedy, 1);
    ASSERT_EQ(run.row.status, "ok");
    ASSERT_EQ(run.executed.covariance_diag.size(), static_cast<std::size_t>(cfg.horizon + 1));
    std::ostringstream os;
    write_trajectory(os, run.executed);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
              "t,x_c,y_c,w,x_cf,y_cf,mu_c,dist_c,var_x_c,var_y_c,var_w,var_x_cf,var_y_cf,var_mu_c,"
              "var_dist_c,u_e,alpha_p,v,p_e0,p_e1,p_e2,p_e3,action,cost");
    std::istringstream back(os.str());
    EXPECT_EQ(parse_trajectory(back), run.executed);
}

TEST(Trajectory, MalformedInputThrows)
{
    std::istringstream empty("");
    EXPECT_THROW(parse_trajectory(empty), Error);
    std::istringstream bad("t,x,action,cost\n0,1\n");
    EXPECT_THROW(parse_trajectory(bad), std::exception);
}

TEST(Batch, ByteIdenticalAcrossRepeatsAndThreads)
{
    auto cfg = small_box(Env::kBoxPomdp);
    const std::string a = results_text(run_batch(cfg));
    cfg.threads = 1;
    const std::string b = results_text(run_batch(cfg));
    EXPECT_EQ(a, b);
    cfg.seed = 12;
    EXPECT_NE(results_text(run_batch(cfg)), a);
}

TEST(Batch, TableLayout)
{
    auto cfg = small_box(Env::kBox);
    cfg.horizon = 5;
    cfg.max_iterations = 1;
    cfg.cf_count = 12;
    const auto table = run_batch(cfg);
    ASSERT_EQ(table.rows.size(), 48u);
    ASSERT_EQ(table.aggregates.size(), 4u);
    for (std::size_t i = 0; i < table.rows.size(); ++i)
    {
        EXPECT_EQ(table.rows[i].method, cfg.methods[i / 12]);
        EXPECT_EQ(table.rows[i].cf_index, static_cast<int>(i % 12));
    }
    std::istringstream in(results_text(table));
    int runs = 0, means = 0;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
    {
        if (line.rfind("run,", 0) == 0) ++runs;
        if (line.rfind("mean,", 0) == 0) ++means;
    }
    EXPECT_EQ(runs, 48);
    EXPECT_EQ(means, 4);
}

TEST(Aggregate, MeanAndStandardError)
{
    std::vector<ResultRow> rows;
    const std::vector<double> costs = {1.0, 2.0, 4.0, 9.0};
    for (double c : costs)
    {
        ResultRow r;
        r.method = Method::kGreedy;
        r.cost = c;
        rows.push_back(r);
    }
    ResultRow failed;
    failed.method = Method::kGreedy;
    failed.cost = std::nan("");
    rows.push_back(failed);
    ResultRow other;
    other.method = Method::kIlqg;
    other.cost = 100.0;
    rows.push_back(other);

    const auto a = aggregate(Method::kGreedy, rows);
    EXPECT_EQ(a.count, 4);
    EXPECT_NEAR(a.mean, 4.0, 1e-12);
    // SD over {1, 2, 4, 9} is sqrt(38 / 3).
    EXPECT_NEAR(a.std_error, std::sqrt(38.0 / 3.0) / 2.0, 1e-12);
    EXPECT_TRUE(std::isnan(aggregate(Method::kMixture, rows).mean));
    EXPECT_EQ(aggregate(Method::kIlqg, rows).std_error, 0.0);
}

TEST(Batch, FailuresAreRecordedNotThrown)
{
    auto cfg = small_car();
    cfg.car.dt = std::nan("");
    const auto run = run_single(cfg, Method::kGreedy, 0);
    EXPECT_EQ(run.row.status.rfind("failed", 0), 0u);
    EXPECT_TRUE(std::isnan(run.row.cost));
}

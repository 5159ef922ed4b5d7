#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "hddp/belief_ddp.hpp"
#include "hddp/hybrid.hpp"
#include "test_util.hpp"

using namespace hddp;

namespace
{
Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

Problem identity_problem(double m)
{
    Problem p;
    p.state_dim = 1;
    p.control_dim = 1;
    p.bounds = ControlBounds::unbounded(1);
    p.dynamics.f = [](const Vector& x, const Vector&, int) -> Vector { return x; };
    p.dynamics.noise = [m](const Vector&, const Vector&, int) { return scalar(m); };
    p.cost.running = [](const Vector&, const Vector&, int, const Matrix&) { return 0.0; };
    p.cost.final = [](const Vector&, const Matrix&) { return 0.0; };
    return p;
}

ObservationSpec direct_observation(double n)
{
    ObservationSpec obs;
    obs.h = [](const Vector& x) { return x; };
    obs.noise = [n](const Vector& x) -> Matrix { return n * Matrix::Identity(x.size(), x.size()); };
    return obs;
}

// A nonlinear two-state system with state- and control-dependent noise.
BeliefProblem pendulum_belief(double noise_scale)
{
    BeliefProblem bp;
    Problem& p = bp.problem;
    p.state_dim = 2;
    p.control_dim = 1;
    p.bounds = {Vector::Constant(1, -3.0), Vector::Constant(1, 3.0)};
    p.dynamics.f = [](const Vector& x, const Vector& u, int) -> Vector {
        Vector n(2);
        n << x[0] + 0.1 * x[1], x[1] + 0.1 * (-std::sin(x[0]) + u[0]);
        return n;
    };
    if (noise_scale > 0.0)
        p.dynamics.noise = [noise_scale](const Vector& x, const Vector& u, int) -> Matrix {
            Matrix m = Matrix::Zero(2, 2);
            m(0, 0) = noise_scale * (1.0 + 0.1 * x[0] * x[0]);
            m(1, 1) = noise_scale * (1.0 + u[0] * u[0]);
            m(0, 1) = m(1, 0) = 0.2 * noise_scale;
            return m;
        };
    p.cost.running = [](const Vector& x, const Vector& u, int, const Matrix& cov) {
        return 0.01 * u.squaredNorm() + 0.01 * x.squaredNorm() + (cov.size() ? 0.1 * cov.trace() : 0.0);
    };
    p.cost.final = [](const Vector& x, const Matrix& cov) {
        return 5.0 * ((x[0] - 1.0) * (x[0] - 1.0) + x[1] * x[1]) + (cov.size() ? cov.trace() : 0.0);
    };
    bp.observation.h = [](const Vector& x) -> Vector { return Vector::Constant(1, std::sin(x[0]) + x[1]); };
    bp.observation.noise = [noise_scale](const Vector&) -> Matrix {
        return Matrix::Constant(1, 1, noise_scale > 0.0 ? noise_scale : 1.0);
    };
    bp.initial_covariance = noise_scale * Matrix::Identity(2, 2);
    return bp;
}

bool symmetric_psd(const Matrix& m)
{
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10) return false;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
    return eig.eigenvalues().minCoeff() >= -1e-10;
}

std::vector<Vector> constant_controls(int horizon, double u) { return std::vector<Vector>(horizon, Vector::Constant(1, u)); }
}  // namespace

TEST(Ekf, ScalarHandArithmetic)
{
    const Problem p = identity_problem(0.01);
    const auto step = ekf_step(p, direct_observation(0.04), {Vector::Zero(1), scalar(0.04)}, Vector::Zero(1), 0);
    EXPECT_NEAR(step.gain(0, 0), 5.0 / 9.0, 1e-12);
    EXPECT_NEAR(step.belief.covariance(0, 0), 0.05 * 4.0 / 9.0, 1e-12);
    EXPECT_NEAR(step.belief.covariance(0, 0), 0.02222, 1e-5);
}

TEST(Ekf, UninformativeObservation)
{
    Problem p = identity_problem(0.0);
    p.state_dim = 2;
    p.dynamics.noise = {};
    Matrix A(2, 2);
    A << 1.0, 0.3, -0.2, 0.9;
    p.dynamics.f = [A](const Vector& x, const Vector&, int) -> Vector { return A * x; };
    Matrix cov(2, 2);
    cov << 0.5, 0.1, 0.1, 0.3;
    const auto step = ekf_step(p, direct_observation(1e12), {Vector::Ones(2), cov}, Vector::Zero(1), 0);
    const Matrix expected = A * cov * A.transpose();
    EXPECT_LE((step.belief.covariance - expected).norm(), 1e-6 * expected.norm());
}

TEST(Ekf, CertaintyIsPreserved)
{
    const Problem p = identity_problem(0.0);
    const auto step = ekf_step(p, direct_observation(0.3), {Vector::Ones(1), scalar(0.0)}, Vector::Zero(1), 0);
    EXPECT_EQ(step.belief.covariance(0, 0), 0.0);
}

TEST(Ekf, SingularInnovationFails)
{
    const Problem p = identity_problem(0.0);
    EXPECT_THROW(ekf_step(p, direct_observation(0.0), {Vector::Ones(1), scalar(0.0)}, Vector::Zero(1), 0),
                 FilterFailure);
}

TEST(Ekf, ObservationMovesTheMean)
{
    const Problem p = identity_problem(0.01);
    const Vector z = Vector::Constant(1, 1.0);
    const auto step = ekf_step(p, direct_observation(0.04), {Vector::Zero(1), scalar(0.04)}, Vector::Zero(1), 0, &z);
    EXPECT_NEAR(step.belief.mean[0], 5.0 / 9.0, 1e-12);
}

TEST(Ekf, CovarianceStaysSymmetricPsd)
{
    std::mt19937_64 rng(17);
    std::normal_distribution<double> n(0.0, 1.0);
    const BeliefProblem bp = pendulum_belief(0.05);
    GaussianBelief belief{Vector::Zero(2), bp.initial_covariance};
    for (int step = 0; step < 10000; ++step)
    {
        const Vector u = Vector::Constant(1, 2.0 * n(rng));
        const Vector z = Vector::Constant(1, n(rng));
        // The unrepaired posterior must already satisfy the floor.
        const auto raw = ekf_step(bp.problem, bp.observation, belief, u, 0, &z, false);
        ASSERT_TRUE(symmetric_psd(raw.belief.covariance)) << "step " << step;
        belief = ekf_step(bp.problem, bp.observation, belief, u, 0, &z).belief;
        ASSERT_TRUE(symmetric_psd(belief.covariance)) << "step " << step;
        if (std::abs(belief.mean[0]) > 50.0) belief.mean.setZero();
    }
}

TEST(Ekf, ObservationsNeverAddUncertainty)
{
    // The posterior never exceeds the prior in the positive semidefinite order.
    std::mt19937_64 rng(23);
    std::normal_distribution<double> n(0.0, 1.0);
    const BeliefProblem bp = pendulum_belief(0.05);
    for (int trial = 0; trial < 200; ++trial)
    {
        const Matrix a = hddp::testing::random_matrix(rng, 2, 2, 0.3);
        const GaussianBelief belief{Vector::Constant(2, n(rng)), a * a.transpose()};
        const Vector u = Vector::Constant(1, n(rng));
        const auto [fx, fu] = dynamics_jacobians(bp.problem, belief.mean, u, 0);
        const Matrix prior = fx * belief.covariance * fx.transpose() + bp.problem.dynamics.noise(belief.mean, u, 0);
        const Matrix post = ekf_step(bp.problem, bp.observation, belief, u, 0).belief.covariance;
        Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (prior - post + (prior - post).transpose()));
        EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10);
    }
}

TEST(Covariance, VectorizeIsColumnWise)
{
    Matrix m(2, 2);
    m << 1, 2, 3, 4;
    const Vector v = vectorize(m);
    EXPECT_EQ(v, (Vector(4) << 1, 3, 2, 4).finished());
    EXPECT_EQ(unvectorize(v, 2), m);
}

TEST(Covariance, RepairFloorsNegativeEigenvalues)
{
    Matrix m(2, 2);
    m << 1.0, 2.0, 2.0 + 1e-9, 1.0;
    const Matrix r = repair_covariance(m);
    EXPECT_TRUE(symmetric_psd(r));
    EXPECT_EQ(repair_covariance(Matrix::Identity(2, 2)), Matrix::Identity(2, 2));
}

TEST(BeliefDdp, NoiseFreeBackwardPassMatchesMdp)
{
    BeliefProblem bp = pendulum_belief(0.0);
    const Vector x0 = Vector::Zero(2);
    const auto controls = constant_controls(30, 0.3);
    const auto mdp_nominal = rollout(bp.problem, x0, controls);
    const auto belief_nominal = belief_rollout(bp, x0, controls);
    for (const auto& c : belief_nominal.covariances) EXPECT_EQ(c.norm(), 0.0);
    const auto a = backward_pass(bp.problem, mdp_nominal, 1e-6);
    const auto b = belief_backward_pass(bp, belief_nominal, 1e-6);
    for (int t = 0; t < 30; ++t)
    {
        EXPECT_LE((a.policy.k[t] - b.policy.k[t]).norm(), 1e-6);
        EXPECT_LE((a.policy.K[t] - b.policy.K[t]).norm(), 1e-6);
    }
}

TEST(BeliefDdp, ConstantNoiseFinalStepMatchesMdp)
{
    // The covariance sequence does not depend on the controls, so the last
    // stage sees no covariance coupling.
    BeliefProblem bp = pendulum_belief(0.0);
    bp.problem.dynamics.f = [](const Vector& x, const Vector& u, int) -> Vector {
        Vector n(2);
        n << x[0] + 0.1 * x[1], x[1] + 0.1 * u[0];
        return n;
    };
    bp.problem.dynamics.noise = [](const Vector&, const Vector&, int) -> Matrix { return 0.01 * Matrix::Identity(2, 2); };
    bp.observation.h = [](const Vector& x) -> Vector { return x.head(1); };
    bp.observation.noise = [](const Vector&) -> Matrix { return Matrix::Constant(1, 1, 0.1); };
    bp.initial_covariance = 0.02 * Matrix::Identity(2, 2);
    bp.problem.cost.running = [](const Vector& x, const Vector& u, int, const Matrix&) {
        return 0.01 * u.squaredNorm() + 0.01 * x.squaredNorm();
    };
    bp.problem.cost.final = [](const Vector& x, const Matrix&) { return 5.0 * (x[0] - 1.0) * (x[0] - 1.0); };

    const Vector x0 = Vector::Zero(2);
    const auto controls = constant_controls(20, 0.1);
    const auto a = backward_pass(bp.problem, rollout(bp.problem, x0, controls), 1e-6);
    const auto b = belief_backward_pass(bp, belief_rollout(bp, x0, controls), 1e-6);
    EXPECT_EQ(b.values.back().V_sigma.norm(), 0.0);
    EXPECT_LE((a.policy.k.back() - b.policy.k.back()).norm(), 1e-8);
    EXPECT_LE((a.policy.K.back() - b.policy.K.back()).norm(), 1e-8);
}

TEST(BeliefDdp, VarianceShapesTheControls)
{
    // f = x + u with noise u^2; the final cost penalizes the variance.
    BeliefProblem bp;
    Problem& p = bp.problem;
    p.state_dim = 1;
    p.control_dim = 1;
    p.bounds = {Vector::Constant(1, -1.0), Vector::Constant(1, 1.0)};
    p.dynamics.f = [](const Vector& x, const Vector& u, int) -> Vector { return x + u; };
    p.dynamics.noise = [](const Vector&, const Vector& u, int) { return scalar(u[0] * u[0]); };
    p.cost.running = [](const Vector&, const Vector& u, int, const Matrix&) { return 0.05 * u.squaredNorm(); };
    p.cost.final = [](const Vector& x, const Matrix& cov) {
        return (x[0] - 1.0) * (x[0] - 1.0) + (cov.size() ? 2.0 * cov(0, 0) : 0.0);
    };
    bp.observation = direct_observation(1.0);
    bp.initial_covariance = scalar(0.0);
    const Vector x0 = Vector::Zero(1);
    const int horizon = 3;

    // Exhaustive search over constant controls.
    double best_cost = kInf;
    for (int i = -1000; i <= 1000; ++i)
    {
        const double u = i * 1e-3;
        const double c = belief_rollout(bp, x0, constant_controls(horizon, u)).total_cost;
        best_cost = std::min(best_cost, c);
    }
    const auto belief = belief_optimize(bp, SolverConfig{}, x0, constant_controls(horizon, 0.0));
    const auto blind = optimize(p, SolverConfig{}, x0, constant_controls(horizon, 0.0));
    const double blind_cost = belief_rollout(bp, x0, blind.trajectory.controls).total_cost;

    EXPECT_LE(belief.trajectory.total_cost, best_cost + 1e-6);
    EXPECT_LT(belief.trajectory.total_cost, blind_cost);
    for (int t = 0; t < horizon; ++t)
        EXPECT_LT(std::abs(belief.trajectory.controls[t][0]), std::abs(blind.trajectory.controls[t][0]));
}

TEST(BeliefDdp, NoiseFreeOptimizationMatchesMdp)
{
    BeliefProblem bp = pendulum_belief(0.0);
    const Vector x0 = Vector::Zero(2);
    SolverConfig cfg;
    cfg.max_iterations = 50;
    const auto a = optimize(bp.problem, cfg, x0, constant_controls(40, 0.0));
    const auto b = belief_optimize(bp, cfg, x0, constant_controls(40, 0.0));
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i)
    {
        EXPECT_NEAR(a.log[i].total_cost, b.log[i].total_cost, 1e-6);
        EXPECT_EQ(a.log[i].accepted, b.log[i].accepted);
    }
    for (int t = 0; t <= 40; ++t) EXPECT_LE((a.trajectory.states[t] - b.trajectory.states[t]).norm(), 1e-6);
}

TEST(BeliefDdp, AcceptedCostsNeverIncrease)
{
    const BeliefProblem bp = pendulum_belief(0.02);
    SolverConfig cfg;
    cfg.max_iterations = 60;
    const auto result = belief_optimize(bp, cfg, Vector::Zero(2), constant_controls(40, 0.0));
    double previous = belief_rollout(bp, Vector::Zero(2), constant_controls(40, 0.0)).total_cost;
    for (const auto& e : result.log)
    {
        EXPECT_LE(e.total_cost, previous);
        previous = e.total_cost;
    }
    for (const auto& c : result.trajectory.covariances) EXPECT_TRUE(symmetric_psd(c));
    EXPECT_LT(result.trajectory.total_cost, belief_rollout(bp, Vector::Zero(2), constant_controls(40, 0.0)).total_cost);
}

TEST(BeliefDdp, MixtureStaysOnSimplex)
{
    Problem base;
    base.state_dim = 1;
    base.control_dim = 1;
    base.num_actions = 2;
    base.bounds = {Vector::Constant(1, -1.0), Vector::Constant(1, 1.0)};
    base.dynamics.f = [](const Vector& x, const Vector& u, int a) -> Vector {
        return x.array() + 0.05 * u[0] + (a == 0 ? 0.1 : -0.1);
    };
    base.dynamics.noise = [](const Vector&, const Vector&, int a) { return scalar(a == 0 ? 1e-3 : 1e-4); };
    base.cost.running = [](const Vector&, const Vector& u, int, const Matrix&) { return 0.01 * u.squaredNorm(); };
    base.cost.final = [](const Vector& x, const Matrix& cov) {
        return 10.0 * (x[0] - 0.35) * (x[0] - 0.35) + (cov.size() ? cov(0, 0) : 0.0);
    };
    const auto m = hybrid::augment(base);
    BeliefProblem bp{m.relaxed(0.05), direct_observation(0.01), scalar(1e-3)};
    SolverConfig cfg;
    cfg.max_iterations = 40;
    const auto result = belief_optimize(bp, cfg, Vector::Zero(1),
                                        std::vector<Vector>(20, m.initial_control(Vector::Zero(1), 1)));
    for (const auto& u : result.trajectory.controls)
    {
        EXPECT_GE(u.tail(2).minCoeff(), 0.0);
        EXPECT_LE(u.tail(2).maxCoeff(), 1.0);
        EXPECT_NEAR(u.tail(2).sum(), 1.0, 1e-9);
    }
}

TEST(ClosedLoop, NoiseFreeExecutionReproducesThePlan)
{
    const BeliefProblem bp = pendulum_belief(0.02);
    SolverConfig cfg;
    cfg.max_iterations = 30;
    const auto result = belief_optimize(bp, cfg, Vector::Zero(2), constant_controls(40, 0.0));
    ClosedLoopOptions quiet{false, false, false};
    const auto sim = simulate_closed_loop(bp, result.policy, Vector::Zero(2), 1, {}, quiet);
    for (int t = 0; t <= 40; ++t)
    {
        EXPECT_LE((sim.states[t] - result.trajectory.states[t]).norm(), 1e-12);
        EXPECT_LE((sim.covariances[t] - result.trajectory.covariances[t]).norm(), 1e-12);
    }
    EXPECT_NEAR(sim.total_cost, result.trajectory.total_cost, 1e-10 * (1 + result.trajectory.total_cost));
}

TEST(ClosedLoop, SeededRunsRepeatExactly)
{
    const BeliefProblem bp = pendulum_belief(0.02);
    SolverConfig cfg;
    cfg.max_iterations = 20;
    const auto result = belief_optimize(bp, cfg, Vector::Zero(2), constant_controls(30, 0.0));
    const auto a = simulate_closed_loop(bp, result.policy, Vector::Zero(2), 99);
    const auto b = simulate_closed_loop(bp, result.policy, Vector::Zero(2), 99);
    const auto c = simulate_closed_loop(bp, result.policy, Vector::Zero(2), 100);
    EXPECT_EQ(a.states, b.states);
    EXPECT_EQ(a.total_cost, b.total_cost);
    EXPECT_NE(a.states, c.states);
}

TEST(ClosedLoop, SampleMeanIsFinite)
{
    const BeliefProblem bp = pendulum_belief(0.02);
    SolverConfig cfg;
    cfg.max_iterations = 20;
    const auto result = belief_optimize(bp, cfg, Vector::Zero(2), constant_controls(30, 0.0));
    double sum = 0.0, sum_sq = 0.0;
    for (int k = 0; k < 20; ++k)
    {
        const double c = simulate_closed_loop(bp, result.policy, Vector::Zero(2), 1000 + k).total_cost;
        ASSERT_TRUE(std::isfinite(c));
        sum += c;
        sum_sq += c * c;
    }
    const double mean = sum / 20.0;
    const double se = std::sqrt(std::max(0.0, sum_sq / 20.0 - mean * mean) * 20.0 / 19.0 / 20.0);
    EXPECT_TRUE(std::isfinite(mean));
    EXPECT_GT(se, 0.0);
}

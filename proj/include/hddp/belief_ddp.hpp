#pragma once

// Gaussian-belief trajectory optimization and closed-loop execution.

#include <cstdint>
#include <random>

#include "hddp/ddp.hpp"
#include "hddp/filter.hpp"

namespace hddp
{
/// A problem whose state is observed only through z = h(x) + n.
struct BeliefProblem
{
    Problem problem;
    ObservationSpec observation;
    Matrix initial_covariance;
};

namespace detail
{
inline BeliefContext context(const BeliefProblem& bp)
{
    if (!bp.observation.h || !bp.observation.noise)
        throw Error("belief problem: observation model is incomplete");
    if (bp.initial_covariance.rows() != bp.problem.state_dim ||
        bp.initial_covariance.cols() != bp.problem.state_dim)
        throw Error("belief problem: initial covariance has the wrong shape");
    return {&bp.observation, bp.initial_covariance};
}
}  // namespace detail

/// Planning rollout: belief means through the mean dynamics, covariances
/// through the zero-innovation EKF.
inline TrajectoryRecord belief_rollout(const BeliefProblem& bp, const Vector& x0,
                                       const std::vector<Vector>& controls,
                                       std::vector<int> actions = {})
{
    const auto ctx = detail::context(bp);
    return detail::rollout_controls(bp.problem, &ctx, x0, controls, std::move(actions));
}

inline BackwardPassResult belief_backward_pass(const BeliefProblem& bp,
                                               const TrajectoryRecord& nominal, double reg,
                                               const SolverConfig& config = {},
                                               const FeedbackPolicy* warm_start = nullptr)
{
    const auto ctx = detail::context(bp);
    return detail::backward_sweep(bp.problem, &ctx, nominal, reg, config, config.discrete_update,
                                  warm_start);
}

inline TrajectoryRecord belief_forward_pass(const BeliefProblem& bp,
                                            const TrajectoryRecord& nominal,
                                            const FeedbackPolicy& policy, double alpha,
                                            DiscreteUpdate update = DiscreteUpdate::kNone)
{
    const auto ctx = detail::context(bp);
    return detail::forward_sweep(bp.problem, &ctx, nominal, policy, alpha,
                                 detail::candidate_actions(nominal, policy, update, alpha));
}

inline OptimizeResult belief_optimize(const BeliefProblem& bp, const SolverConfig& config,
                                      const Vector& x0, const std::vector<Vector>& initial_controls,
                                      const std::vector<int>& initial_actions = {},
                                      const IterationHook& hook = {}, double initial_c_st = 0.0)
{
    const auto ctx = detail::context(bp);
    return detail::optimize_impl(bp.problem, &ctx, config, x0, initial_controls, initial_actions,
                                 hook, initial_c_st);
}

/// Draws from N(mean, cov); cov may be singular.
inline Vector sample_gaussian(std::mt19937_64& rng, const Vector& mean, const Matrix& cov)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector z(mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
    if (cov.size() == 0 || cov.isZero(0.0)) return mean;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (cov + cov.transpose()));
    const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return mean + eig.eigenvectors() * root.asDiagonal() * z;
}

/// How the true system responds during closed-loop execution. Empty members
/// fall back to the planning model.
struct ExecutionModel
{
    // True mean transition; also sees the belief mean the controls refer to.
    std::function<Vector(const Vector& x, const Vector& belief_mean, const Vector& u, int action)>
        step;
    NoiseFn noise;                                  // process noise covariance
    RunningCostFn running;                          // realized stage cost at the true state
    FinalCostFn final;
    std::function<Vector(const Vector&)> sanitize;  // e.g. keep sampled friction positive
};

struct ClosedLoopOptions
{
    bool sample_initial_state = true;
    bool sample_process_noise = true;
    bool sample_observation_noise = true;
};

/// Executes the policy against a sampled true system. `states` holds the true
/// states, `covariances` the filter covariances, and costs are evaluated at the
/// true state with the belief covariance.
inline TrajectoryRecord simulate_closed_loop(const BeliefProblem& bp, const FeedbackPolicy& policy,
                                             const Vector& x0_mean, std::uint64_t seed,
                                             const ExecutionModel& exec = {},
                                             const ClosedLoopOptions& options = {})
{
    const Problem& problem = bp.problem;
    const auto& nominal = policy.nominal;
    const int horizon = policy.horizon();
    std::mt19937_64 rng(seed);

    auto step = [&](const Vector& xt, const Vector& mean, const Vector& u, int a) {
        return exec.step ? exec.step(xt, mean, u, a) : problem.dynamics.f(xt, u, a);
    };
    auto running = exec.running ? exec.running : problem.cost.running;
    auto final = exec.final ? exec.final : problem.cost.final;
    auto noise = [&](const Vector& x, const Vector& u, int a) -> Matrix {
        if (exec.noise) return exec.noise(x, u, a);
        return process_noise(problem, x, u, a);
    };
    auto sanitize = [&](Vector x) { return exec.sanitize ? exec.sanitize(std::move(x)) : x; };

    GaussianBelief belief{x0_mean, repair_covariance(bp.initial_covariance)};
    Vector x = options.sample_initial_state ? sample_gaussian(rng, x0_mean, belief.covariance)
                                            : x0_mean;
    x = sanitize(std::move(x));

    TrajectoryRecord out;
    out.states.push_back(x);
    out.covariances.push_back(belief.covariance);
    double total = 0.0;
    for (int t = 0; t < horizon; ++t)
    {
        const Vector dx = belief.mean - nominal.states[t];
        const Vector u =
            project_control(problem, nominal.controls[t] + policy.k[t] + policy.K[t] * dx);
        const int a = policy.actions[t];
        const double c = running(x, u, a, belief.covariance);

        Vector next = step(x, belief.mean, u, a);
        if (options.sample_process_noise) next = sample_gaussian(rng, next, noise(x, u, a));
        next = sanitize(std::move(next));
        if (!next.allFinite() || !std::isfinite(c)) throw RolloutDiverged(t);

        Vector z = bp.observation.h(next);
        if (options.sample_observation_noise) z = sample_gaussian(rng, z, bp.observation.noise(next));
        belief = ekf_step(problem, bp.observation, belief, u, a, &z).belief;

        x = std::move(next);
        out.states.push_back(x);
        out.covariances.push_back(belief.covariance);
        out.controls.push_back(u);
        out.actions.push_back(a);
        out.stage_costs.push_back(c);
        total += c;
    }
    out.final_cost = final(x, belief.covariance);
    out.total_cost = total + out.final_cost;
    return out;
}

}  // namespace hddp

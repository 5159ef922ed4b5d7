#pragma once

// Control-limited iLQG. One engine serves both the fully observed solver and
// the Gaussian-belief solver (belief_ddp.hpp); the belief path is enabled by
// passing an observation model.

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hddp/boxqp.hpp"
#include "hddp/filter.hpp"
#include "hddp/hybrid.hpp"
#include "hddp/problem.hpp"
#include "hddp/value.hpp"

namespace hddp
{
struct QExpansion
{
    Vector Q_x, Q_u;
    Matrix Q_xx, Q_uu, Q_ux;
};

/// u_t = u_bar_t + alpha * k_t + K_t (x_t - x_bar_t), with the discrete action
/// chosen per timestep.
struct FeedbackPolicy
{
    std::vector<Vector> k;
    std::vector<Matrix> K;
    std::vector<std::vector<bool>> clamped;
    std::vector<int> actions;
    TrajectoryRecord nominal;

    int horizon() const { return static_cast<int>(k.size()); }
};

/// Predicted cost change alpha * linear + alpha^2 * quadratic (negative when
/// the step is expected to help).
struct ExpectedDecrease
{
    double linear = 0.0;
    double quadratic = 0.0;

    double at(double alpha) const { return -(alpha * linear + alpha * alpha * quadratic); }
};

/// How discrete actions are revised between iterations.
enum class DiscreteUpdate
{
    kNone,         // keep the nominal actions
    kGreedy,       // adopt the greedy choice at every timestep
    kInterpolate,  // adopt a line-search fraction of the greedy changes
};

struct SolverConfig
{
    int max_iterations = 400;
    int horizon = 500;
    double reg_initial = 1e-6;
    double reg_factor = 10.0;
    double reg_min = 1e-6;
    double reg_max = 1e10;
    std::vector<double> alphas = default_alphas();
    double acceptance_ratio = 1e-4;
    double cost_tolerance = 1e-4;      // stop once an accepted decrease falls below this
    double gradient_tolerance = 1e-9;  // relative forward-gain size treated as converged
    double psd_floor = 1e-6;           // eigenvalue floor for c_uu
    double covariance_step = 1e-6;     // finite-difference step for covariance sensitivities
    DiscreteUpdate discrete_update = DiscreteUpdate::kNone;
    qp::QpOptions qp;

    static std::vector<double> default_alphas()
    {
        std::vector<double> a;
        for (int i = 0; i <= 10; ++i) a.push_back(std::ldexp(1.0, -i));
        return a;
    }
};

struct IterationLogEntry
{
    int iteration = 0;
    double total_cost = 0.0;
    double alpha = 0.0;  // 0 when no step was taken
    double regularization = 0.0;
    double c_st = 0.0;
    bool accepted = false;
    double decrease = 0.0;
};

class BackwardPassFailure : public Error
{
   public:
    explicit BackwardPassFailure(int timestep)
        : Error("backward pass failed at timestep " + std::to_string(timestep)), timestep_(timestep)
    {
    }
    int timestep() const { return timestep_; }

   private:
    int timestep_;
};

struct BackwardPassResult
{
    FeedbackPolicy policy;
    ExpectedDecrease expected;
    std::vector<ValueExpansion> values;  // T + 1, about the nominal
    double gradient_norm = 0.0;
};

/// Called after every iteration. Returning a problem replaces the one being
/// optimized (e.g. a new stochasticity weight); `c_st` is logged.
struct HookResult
{
    std::optional<Problem> problem;
    double c_st = 0.0;
};
using IterationHook = std::function<HookResult(const IterationLogEntry& entry, bool accepted)>;

struct OptimizeResult
{
    TrajectoryRecord trajectory;
    FeedbackPolicy policy;
    std::vector<IterationLogEntry> log;
    Problem problem;  // the problem in effect at the end of the run
    bool converged = false;
    int iterations = 0;
};

namespace detail
{
/// Observation model and prior covariance for belief-space optimization.
struct BeliefContext
{
    const ObservationSpec* observation = nullptr;
    Matrix initial_covariance;
};

using ControlLaw = std::function<Vector(int t, const Vector& x)>;

/// Mean (or belief-mean) propagation under a control law.
inline TrajectoryRecord propagate(const Problem& problem, const BeliefContext* belief,
                                  const Vector& x0, int horizon, const ControlLaw& law,
                                  const std::vector<int>& actions)
{
    if (static_cast<int>(actions.size()) != horizon)
        throw Error("propagate: action sequence length differs from horizon");
    if (!x0.allFinite()) throw RolloutDiverged(0);
    const Matrix zero = Matrix::Zero(problem.state_dim, problem.state_dim);
    TrajectoryRecord out;
    out.states.reserve(horizon + 1);
    out.states.push_back(x0);
    if (belief) out.covariances.push_back(repair_covariance(belief->initial_covariance));
    out.controls.reserve(horizon);
    out.actions = actions;
    out.stage_costs.reserve(horizon);
    double total = 0.0;
    for (int t = 0; t < horizon; ++t)
    {
        const Vector x = out.states.back();
        const Vector u = law(t, x);
        const Matrix& cov = belief ? out.covariances.back() : zero;
        const double c = problem.cost.running(x, u, actions[t], cov);
        if (!std::isfinite(c) || !u.allFinite()) throw RolloutDiverged(t);
        if (belief)
        {
            EkfStep step;
            try
            {
                step = ekf_step(problem, *belief->observation, {x, cov}, u, actions[t]);
            }
            catch (const Error&)
            {
                throw RolloutDiverged(t);
            }
            out.states.push_back(std::move(step.belief.mean));
            out.covariances.push_back(std::move(step.belief.covariance));
        }
        else
        {
            Vector next = problem.dynamics.f(x, u, actions[t]);
            if (!next.allFinite()) throw RolloutDiverged(t);
            out.states.push_back(std::move(next));
        }
        out.controls.push_back(u);
        out.stage_costs.push_back(c);
        total += c;
    }
    out.final_cost =
        problem.cost.final(out.states.back(), belief ? out.covariances.back() : zero);
    if (!std::isfinite(out.final_cost)) throw RolloutDiverged(horizon);
    out.total_cost = total + out.final_cost;
    return out;
}

inline TrajectoryRecord rollout_controls(const Problem& problem, const BeliefContext* belief,
                                         const Vector& x0, const std::vector<Vector>& controls,
                                         std::vector<int> actions)
{
    const int horizon = static_cast<int>(controls.size());
    if (actions.empty()) actions.assign(horizon, 0);
    return propagate(problem, belief, x0, horizon,
                     [&](int t, const Vector&) { return controls[t]; }, actions);
}

/// Symmetric gradient dc/dSigma of a scalar function of a covariance matrix.
template <typename F>
Matrix covariance_gradient(F&& c, const Matrix& sigma, double h)
{
    const Eigen::Index n = sigma.rows();
    Matrix w = Matrix::Zero(n, n);
    Matrix probe = sigma;
    for (Eigen::Index i = 0; i < n; ++i)
    {
        for (Eigen::Index j = i; j < n; ++j)
        {
            probe(i, j) += h;
            if (i != j) probe(j, i) += h;
            const double fp = c(probe);
            probe(i, j) = sigma(i, j) - h;
            if (i != j) probe(j, i) = sigma(j, i) - h;
            const double fm = c(probe);
            probe(i, j) = sigma(i, j);
            probe(j, i) = sigma(j, i);
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw DifferentiationError(static_cast<int>(i * n + j));
            const double d = (fp - fm) / (2.0 * h);
            if (i == j)
                w(i, i) = d;
            else
                w(i, j) = w(j, i) = 0.5 * d;
        }
    }
    return w;
}

/// Posterior covariance after one planning EKF step, without PSD repair so the
/// map stays smooth for differentiation.
inline Matrix covariance_map(const Problem& problem, const BeliefContext& belief, const Vector& x,
                             const Matrix& cov, const Vector& u, int action)
{
    return ekf_step(problem, *belief.observation, {x, cov}, u, action, nullptr, false)
        .belief.covariance;
}

inline double frobenius_dot(const Matrix& a, const Matrix& b) { return (a.array() * b.array()).sum(); }

inline BackwardPassResult backward_sweep(const Problem& problem, const BeliefContext* belief,
                                         const TrajectoryRecord& nominal, double reg,
                                         const SolverConfig& cfg, DiscreteUpdate update,
                                         const FeedbackPolicy* warm)
{
    const int horizon = nominal.horizon();
    const int nx = problem.state_dim;
    const int nu = problem.control_dim;
    if (belief && !nominal.has_belief()) throw Error("backward pass: nominal carries no beliefs");
    const Matrix zero = Matrix::Zero(nx, nx);
    auto cov_at = [&](int t) -> const Matrix& { return belief ? nominal.covariances[t] : zero; };

    BackwardPassResult out;
    auto& policy = out.policy;
    policy.k.assign(horizon, Vector::Zero(nu));
    policy.K.assign(horizon, Matrix::Zero(nu, nx));
    policy.clamped.assign(horizon, std::vector<bool>(nu, false));
    policy.actions = nominal.actions;
    out.values.resize(horizon + 1);

    const Vector& x_final = nominal.states[horizon];
    const FinalCostExpansion fe = final_cost_expansion(problem, x_final, cov_at(horizon));
    ValueExpansion v{fe.c, fe.c_x, 0.5 * (fe.c_xx + fe.c_xx.transpose()), Vector::Zero(nx * nx)};
    if (belief)
    {
        v.V_sigma = vectorize(covariance_gradient(
            [&](const Matrix& s) { return problem.cost.final(x_final, s); }, cov_at(horizon),
            cfg.covariance_step));
    }
    out.values[horizon] = v;

    std::vector<qp::Group> groups;
    for (const auto& g : problem.simplex_groups) groups.push_back({g.indices, 0.0});
    const bool has_bounds = problem.bounds.size() == nu;

    double gnorm_sum = 0.0;
    for (int t = horizon - 1; t >= 0; --t)
    {
        const Vector& x = nominal.states[t];
        const Vector& u = nominal.controls[t];
        const Matrix& cov = cov_at(t);
        const int action = nominal.actions[t];

        int chosen = action;
        if (update != DiscreteUpdate::kNone && problem.num_actions > 1)
        {
            std::function<Matrix(int)> cov_change;
            if (belief)
                cov_change = [&](int a) {
                    return Matrix(covariance_map(problem, *belief, x, cov, u, a) -
                                  nominal.covariances[t + 1]);
                };
            chosen = hybrid::greedy_action_choice(problem, x, u, cov, nominal.states[t + 1], v,
                                                  action, cov_change);
            policy.actions[t] = chosen;
        }
        Vector gap = Vector::Zero(nx);
        if (chosen != action) gap = problem.dynamics.f(x, u, chosen) - nominal.states[t + 1];

        const auto [A, B] = dynamics_jacobians(problem, x, u, chosen);
        const CostExpansion ce = running_cost_expansion(problem, x, u, chosen, cov);
        const Matrix c_uu = clamp_eigenvalues(ce.c_uu, cfg.psd_floor);

        const Vector vx = v.V_x + v.V_xx * gap;
        QExpansion q;
        q.Q_x = ce.c_x + A.transpose() * vx;
        q.Q_u = ce.c_u + B.transpose() * vx;
        q.Q_xx = ce.c_xx + A.transpose() * v.V_xx * A;
        q.Q_uu = c_uu + B.transpose() * v.V_xx * B;
        q.Q_ux = ce.c_ux + B.transpose() * v.V_xx * A;
        q.Q_uu = 0.5 * (q.Q_uu + q.Q_uu.transpose()).eval();

        Matrix w_next;
        if (belief)
        {
            // <W, Sigma'(x, u)> expanded to second order. Only the control block
            // is kept positive semidefinite, like c_uu.
            w_next = unvectorize(v.V_sigma, nx);
            const CostExpansion se = quadratize_cost(
                [&](const Vector& xx, const Vector& uu) {
                    return frobenius_dot(w_next, covariance_map(problem, *belief, xx, cov, uu, chosen));
                },
                x, u, problem.derivatives.hessian_step, StepScaling::kRelative);
            q.Q_x += se.c_x;
            q.Q_u += se.c_u;
            q.Q_xx += se.c_xx;
            q.Q_ux += se.c_ux;
            q.Q_uu += clamp_eigenvalues(se.c_uu, 0.0);
        }

        qp::QpProblem qpp;
        qpp.H = q.Q_uu + reg * Matrix::Identity(nu, nu);
        qpp.g = q.Q_u;
        if (has_bounds)
        {
            qpp.lower = problem.bounds.lower - u;
            qpp.upper = problem.bounds.upper - u;
        }
        else
        {
            qpp.lower = Vector::Constant(nu, -kInf);
            qpp.upper = Vector::Constant(nu, kInf);
        }
        qpp.groups = groups;
        // Curvature along a group's sum direction never enters the constrained
        // problem; adding it lets the factorization see only the feasible subspace.
        if (!groups.empty())
        {
            const double mu = 1.0 + 10.0 * qpp.H.norm();
            for (const auto& g : groups)
                for (int i : g.indices)
                    for (int j : g.indices) qpp.H(i, j) += mu;
        }
        Vector warm_start = Vector::Zero(nu);
        if (warm && t < warm->horizon() && warm->k[t].size() == nu) warm_start = warm->k[t];

        qp::QpSolution sol;
        try
        {
            sol = groups.empty() ? qp::solve_box(qpp, warm_start, cfg.qp)
                                 : qp::solve_box_simplex(qpp, warm_start, cfg.qp);
        }
        catch (const qp::QpFailure&)
        {
            throw BackwardPassFailure(t);
        }
        const Vector& k = sol.delta;
        const Matrix K = sol.feedback(q.Q_ux);
        policy.k[t] = k;
        policy.K[t] = K;
        policy.clamped[t] = sol.clamped;

        out.expected.linear += k.dot(q.Q_u);
        out.expected.quadratic += 0.5 * k.dot(q.Q_uu * k);

        ValueExpansion nv;
        nv.V = ce.c + v.V + gap.dot(v.V_x) + 0.5 * gap.dot(v.V_xx * gap) + k.dot(q.Q_u) +
               0.5 * k.dot(q.Q_uu * k);
        nv.V_x = q.Q_x + K.transpose() * q.Q_uu * k + K.transpose() * q.Q_u + q.Q_ux.transpose() * k;
        nv.V_xx = q.Q_xx + K.transpose() * q.Q_uu * K + K.transpose() * q.Q_ux +
                  q.Q_ux.transpose() * K;
        nv.V_xx = 0.5 * (nv.V_xx + nv.V_xx.transpose()).eval();
        nv.V_sigma = Vector::Zero(nx * nx);
        if (belief)
        {
            const Matrix c_sigma = covariance_gradient(
                [&](const Matrix& s) { return problem.cost.running(x, u, chosen, s); }, cov,
                cfg.covariance_step);
            const Matrix G =
                ekf_step(problem, *belief->observation, {x, cov}, u, chosen, nullptr, false).transition;
            Matrix w = c_sigma + G.transpose() * w_next * G;
            nv.V_sigma = vectorize(0.5 * (w + w.transpose()));
        }
        v = std::move(nv);
        out.values[t] = v;

        double rel = 0.0;
        for (int i = 0; i < nu; ++i) rel = std::max(rel, std::abs(k[i]) / (std::abs(u[i]) + 1.0));
        gnorm_sum += rel;
    }
    out.gradient_norm = horizon > 0 ? gnorm_sum / horizon : 0.0;
    policy.nominal = nominal;
    return out;
}

inline TrajectoryRecord forward_sweep(const Problem& problem, const BeliefContext* belief,
                                      const TrajectoryRecord& nominal, const FeedbackPolicy& policy,
                                      double alpha, const std::vector<int>& actions)
{
    return propagate(
        problem, belief, nominal.states.front(), nominal.horizon(),
        [&](int t, const Vector& x) {
            Vector u = nominal.controls[t] + alpha * policy.k[t] +
                       policy.K[t] * (x - nominal.states[t]);
            return project_control(problem, u);
        },
        actions);
}

inline std::vector<int> candidate_actions(const TrajectoryRecord& nominal,
                                          const FeedbackPolicy& policy, DiscreteUpdate update,
                                          double alpha)
{
    switch (update)
    {
        case DiscreteUpdate::kGreedy:
            return policy.actions;
        case DiscreteUpdate::kInterpolate:
            return hybrid::interpolate_actions(nominal.actions, policy.actions, alpha);
        case DiscreteUpdate::kNone:
            break;
    }
    return nominal.actions;
}

inline OptimizeResult optimize_impl(Problem problem, const BeliefContext* belief,
                                    const SolverConfig& cfg, const Vector& x0,
                                    std::vector<Vector> controls, std::vector<int> actions,
                                    const IterationHook& hook, double c_st)
{
    if (actions.empty()) actions.assign(controls.size(), 0);
    for (auto& u : controls)
    {
        if (u.size() != problem.control_dim) throw Error("optimize: control dimension mismatch");
        u = project_control(problem, u);
    }

    OptimizeResult result;
    TrajectoryRecord nominal = rollout_controls(problem, belief, x0, controls, actions);
    double reg = cfg.reg_initial;
    std::optional<BackwardPassResult> current;  // backward pass about `nominal`
    FeedbackPolicy warm;
    bool have_warm = false;

    int iteration = 0;
    for (iteration = 1; iteration <= cfg.max_iterations; ++iteration)
    {
        IterationLogEntry entry;
        entry.iteration = iteration;
        entry.c_st = c_st;
        entry.regularization = reg;

        std::optional<BackwardPassResult> bp;
        try
        {
            bp = backward_sweep(problem, belief, nominal, reg, cfg, cfg.discrete_update,
                                have_warm ? &warm : nullptr);
        }
        catch (const BackwardPassFailure&)
        {
        }
        catch (const qp::QpInfeasible&)
        {
        }

        bool accepted = false;
        bool stalled = false;  // no improvement is possible at this resolution
        if (bp)
        {
            warm = bp->policy;
            have_warm = true;
            const bool actions_changed = bp->policy.actions != nominal.actions;
            if (bp->gradient_norm < cfg.gradient_tolerance && !actions_changed)
            {
                stalled = true;
            }
            else
            {
                for (double alpha : cfg.alphas)
                {
                    const auto cand_actions = candidate_actions(nominal, bp->policy, cfg.discrete_update, alpha);
                    TrajectoryRecord cand;
                    try
                    {
                        cand = forward_sweep(problem, belief, nominal, bp->policy, alpha, cand_actions);
                    }
                    catch (const RolloutDiverged&)
                    {
                        continue;
                    }
                    const double actual = nominal.total_cost - cand.total_cost;
                    const double expected = bp->expected.at(alpha);
                    const double ratio = expected > 0.0 ? actual / expected : 1.0;
                    if (actual > 0.0 && ratio > cfg.acceptance_ratio)
                    {
                        entry.alpha = alpha;
                        entry.decrease = actual;
                        nominal = std::move(cand);
                        accepted = true;
                        break;
                    }
                }
                if (!accepted && !actions_changed && bp->expected.at(1.0) < cfg.cost_tolerance)
                    stalled = true;
            }
        }

        if (accepted)
            reg = std::max(reg / cfg.reg_factor, cfg.reg_min);
        else if (!stalled)
            reg *= cfg.reg_factor;

        entry.accepted = accepted || stalled;
        entry.total_cost = nominal.total_cost;
        result.log.push_back(entry);

        bool changed = false;
        if (hook)
        {
            HookResult hr = hook(entry, entry.accepted);
            c_st = hr.c_st;
            if (hr.problem)
            {
                problem = std::move(*hr.problem);
                nominal = rollout_controls(problem, belief, x0, nominal.controls, nominal.actions);
                changed = true;
            }
        }
        if (entry.accepted && entry.decrease < cfg.cost_tolerance && !changed)
        {
            result.converged = true;
            break;
        }
        if (reg > cfg.reg_max) break;
    }
    result.iterations = std::min(iteration, cfg.max_iterations);

    // Feedback gains about the final trajectory; the open-loop part is already
    // contained in the nominal controls.
    FeedbackPolicy policy;
    for (double r = std::max(reg, cfg.reg_min); r <= cfg.reg_max; r *= cfg.reg_factor)
    {
        try
        {
            policy = backward_sweep(problem, belief, nominal, r, cfg, DiscreteUpdate::kNone,
                                    have_warm ? &warm : nullptr)
                         .policy;
            break;
        }
        catch (const Error&)
        {
        }
    }
    const int horizon = nominal.horizon();
    if (policy.horizon() != horizon)
    {
        policy.K.assign(horizon, Matrix::Zero(problem.control_dim, problem.state_dim));
        policy.clamped.assign(horizon, std::vector<bool>(problem.control_dim, false));
    }
    policy.k.assign(horizon, Vector::Zero(problem.control_dim));
    policy.actions = nominal.actions;
    policy.nominal = nominal;

    result.trajectory = std::move(nominal);
    result.policy = std::move(policy);
    result.problem = std::move(problem);
    return result;
}
}  // namespace detail

/// Backward pass about a fully observed nominal trajectory.
inline BackwardPassResult backward_pass(const Problem& problem, const TrajectoryRecord& nominal,
                                        double reg, const SolverConfig& config = {},
                                        const FeedbackPolicy* warm_start = nullptr)
{
    return detail::backward_sweep(problem, nullptr, nominal, reg, config, config.discrete_update,
                                  warm_start);
}

/// Candidate trajectory under the policy with forward gains scaled by alpha.
inline TrajectoryRecord forward_pass(const Problem& problem, const TrajectoryRecord& nominal,
                                     const FeedbackPolicy& policy, double alpha,
                                     DiscreteUpdate update = DiscreteUpdate::kNone)
{
    return detail::forward_sweep(problem, nullptr, nominal, policy, alpha,
                                 detail::candidate_actions(nominal, policy, update, alpha));
}

inline OptimizeResult optimize(const Problem& problem, const SolverConfig& config, const Vector& x0,
                               const std::vector<Vector>& initial_controls,
                               const std::vector<int>& initial_actions = {},
                               const IterationHook& hook = {}, double initial_c_st = 0.0)
{
    return detail::optimize_impl(problem, nullptr, config, x0, initial_controls, initial_actions,
                                 hook, initial_c_st);
}

/// CSV rows: iteration, total_cost, alpha, regularization, C_ST.
inline void write_iteration_log(std::ostream& os, const std::vector<IterationLogEntry>& log)
{
    os << "iteration,total_cost,alpha,regularization,C_ST\n";
    char buf[160];
    for (const auto& e : log)
    {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", e.iteration, e.total_cost,
                      e.alpha, e.regularization, e.c_st);
        os << buf;
    }
}

}  // namespace hddp

#pragma once

// Discrete-action handling: the mixture relaxation with its stochasticity
// penalty and annealing schedule, plus the greedy and interpolated baselines.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "hddp/problem.hpp"
#include "hddp/value.hpp"

namespace hddp::hybrid
{
inline constexpr double kDefaultKappa = 0.01;

struct ScalarDerivatives
{
    double value = 0.0;
    double d1 = 0.0;
    double d2 = 0.0;
};

/// sqrt(p^2 + kappa^2) - kappa with its first and second derivatives.
inline ScalarDerivatives pseudo_huber(double p, double kappa = kDefaultKappa)
{
    const double r = std::sqrt(p * p + kappa * kappa);
    return {r - kappa, p / r, kappa * kappa / (r * r * r)};
}

struct StochasticityCost
{
    double value = 0.0;
    Vector gradient;
    Vector hessian_diagonal;  // the cost is separable across entries
};

/// Piecewise penalty on non-deterministic action probabilities. Entries below
/// p_th = 1 / N_a use phi(p); entries at or above it use
/// phi((1 - p) / (p_th / (1 - p_th))). The branch point belongs to the upper
/// branch and derivatives are taken within the active branch.
inline StochasticityCost stochasticity_cost(const Vector& p, double c_st,
                                            double kappa = kDefaultKappa)
{
    const auto n = p.size();
    StochasticityCost out{0.0, Vector::Zero(n), Vector::Zero(n)};
    if (n < 2) return out;
    const double p_th = 1.0 / static_cast<double>(n);
    const double scale = (1.0 - p_th) / p_th;
    for (Eigen::Index a = 0; a < n; ++a)
    {
        if (p[a] < p_th)
        {
            const auto phi = pseudo_huber(p[a], kappa);
            out.value += phi.value;
            out.gradient[a] = phi.d1;
            out.hessian_diagonal[a] = phi.d2;
        }
        else
        {
            const auto phi = pseudo_huber((1.0 - p[a]) * scale, kappa);
            out.value += phi.value;
            out.gradient[a] = -scale * phi.d1;
            out.hessian_diagonal[a] = scale * scale * phi.d2;
        }
    }
    out.value *= c_st;
    out.gradient *= c_st;
    out.hessian_diagonal *= c_st;
    return out;
}

using hddp::normalize_probabilities;

/// Mixture relaxation of a problem with N_a discrete actions: the control is
/// (u, p), dynamics and noise are p-weighted, and stage costs are
/// phi(p_a)-weighted plus the stochasticity penalty.
class MixtureProblem
{
   public:
    MixtureProblem(Problem base, double kappa) : base_(std::make_shared<const Problem>(std::move(base))), kappa_(kappa) {}

    const Problem& base() const { return *base_; }
    int continuous_dim() const { return base_->control_dim; }
    int num_actions() const { return base_->num_actions; }
    int control_dim() const { return continuous_dim() + num_actions(); }
    double kappa() const { return kappa_; }

    SimplexGroup group() const
    {
        SimplexGroup g;
        for (int a = 0; a < num_actions(); ++a) g.indices.push_back(continuous_dim() + a);
        return g;
    }

    /// Augmented control with probability `1 - 1e-10` on `action`, the rest
    /// split evenly over the other actions.
    Vector initial_control(const Vector& u, int action, double residual = 1e-10) const
    {
        Vector out(control_dim());
        out.head(continuous_dim()) = u;
        const int na = num_actions();
        for (int a = 0; a < na; ++a)
            out[continuous_dim() + a] = a == action ? 1.0 - residual : residual / (na - 1);
        return out;
    }

    /// Continuous problem for a given stochasticity weight.
    Problem relaxed(double c_st) const
    {
        auto base = base_;
        const int nu = continuous_dim();
        const int na = num_actions();
        const double kappa = kappa_;

        Problem out;
        out.state_dim = base->state_dim;
        out.control_dim = nu + na;
        out.num_actions = 1;
        out.derivatives = base->derivatives;
        out.bounds = base->bounds.append({Vector::Zero(na), Vector::Ones(na)});
        out.simplex_groups = {group()};

        out.dynamics.f = [base, nu, na](const Vector& x, const Vector& uh, int) {
            const Vector u = uh.head(nu);
            Vector next = Vector::Zero(x.size());
            for (int a = 0; a < na; ++a)
            {
                const double w = uh[nu + a];
                if (w != 0.0) next += w * base->dynamics.f(x, u, a);
            }
            return next;
        };
        if (base->dynamics.noise)
        {
            out.dynamics.noise = [base, nu, na](const Vector& x, const Vector& uh, int) {
                const Vector u = uh.head(nu);
                Matrix m = Matrix::Zero(x.size(), x.size());
                for (int a = 0; a < na; ++a)
                {
                    const double w = uh[nu + a];
                    if (w != 0.0) m += w * base->dynamics.noise(x, u, a);
                }
                return m;
            };
        }
        out.dynamics.jacobians = [base, nu, na](const Vector& x, const Vector& uh, int) {
            const Vector u = uh.head(nu);
            Matrix fx = Matrix::Zero(x.size(), x.size());
            Matrix fu = Matrix::Zero(x.size(), nu + na);
            for (int a = 0; a < na; ++a)
            {
                const double w = uh[nu + a];
                const auto [ax, au] = dynamics_jacobians(*base, x, u, a);
                fx += w * ax;
                fu.leftCols(nu) += w * au;
                fu.col(nu + a) = base->dynamics.f(x, u, a);
            }
            return std::pair<Matrix, Matrix>{fx, fu};
        };

        out.cost.running = [base, nu, na, kappa, c_st](const Vector& x, const Vector& uh, int,
                                                       const Matrix& cov) {
            const Vector u = uh.head(nu);
            const Vector p = uh.tail(na);
            double c = 0.0;
            for (int a = 0; a < na; ++a)
            {
                if (p[a] == 0.0) continue;
                c += pseudo_huber(p[a], kappa).value * base->cost.running(x, u, a, cov);
            }
            if (c_st != 0.0) c += stochasticity_cost(p, c_st, kappa).value;
            return c;
        };
        out.cost.running_expansion = [base, nu, na, kappa, c_st](const Vector& x, const Vector& uh,
                                                                 int, const Matrix& cov) {
            const Vector u = uh.head(nu);
            const Vector p = uh.tail(na);
            const Eigen::Index nx = x.size();
            CostExpansion e;
            e.c_x = Vector::Zero(nx);
            e.c_u = Vector::Zero(nu + na);
            e.c_xx = Matrix::Zero(nx, nx);
            e.c_uu = Matrix::Zero(nu + na, nu + na);
            e.c_ux = Matrix::Zero(nu + na, nx);
            for (int a = 0; a < na; ++a)
            {
                const auto phi = pseudo_huber(p[a], kappa);
                const CostExpansion ca = running_cost_expansion(*base, x, u, a, cov);
                e.c += phi.value * ca.c;
                e.c_x += phi.value * ca.c_x;
                e.c_xx += phi.value * ca.c_xx;
                e.c_u.head(nu) += phi.value * ca.c_u;
                e.c_uu.topLeftCorner(nu, nu) += phi.value * ca.c_uu;
                e.c_ux.topRows(nu) += phi.value * ca.c_ux;
                e.c_u[nu + a] += phi.d1 * ca.c;
                e.c_uu(nu + a, nu + a) += phi.d2 * ca.c;
                e.c_uu.block(nu + a, 0, 1, nu) += phi.d1 * ca.c_u.transpose();
                e.c_uu.block(0, nu + a, nu, 1) += phi.d1 * ca.c_u;
                e.c_ux.row(nu + a) += phi.d1 * ca.c_x.transpose();
            }
            if (c_st != 0.0)
            {
                const auto st = stochasticity_cost(p, c_st, kappa);
                e.c += st.value;
                e.c_u.tail(na) += st.gradient;
                e.c_uu.bottomRightCorner(na, na).diagonal() += st.hessian_diagonal;
            }
            return e;
        };
        out.cost.final = base->cost.final;
        out.cost.final_expansion = base->cost.final_expansion;
        return out;
    }

   private:
    std::shared_ptr<const Problem> base_;
    double kappa_;
};

/// Builds the mixture relaxation; requires at least two actions.
inline MixtureProblem augment(Problem base, double kappa = kDefaultKappa)
{
    if (base.num_actions < 2) throw Error("augment: need at least two discrete actions");
    return MixtureProblem(std::move(base), kappa);
}

/// Annealing schedule for the stochasticity weight C_ST.
struct CstSchedule
{
    double value = 0.0;
    double first_value = 0.01;
    double threshold = 0.01;  // cost decrease below which C_ST is raised
    double max_value = 1.28;
};

inline CstSchedule update_cst(CstSchedule schedule, double last_cost_decrease, int iteration,
                              int max_iterations)
{
    if (2 * iteration >= max_iterations)
        schedule.value = schedule.max_value;
    else if (last_cost_decrease < schedule.threshold)
        schedule.value = schedule.value == 0.0 ? schedule.first_value
                                               : std::min(2.0 * schedule.value, schedule.max_value);
    return schedule;
}

/// Most likely action per timestep; ties go to the lowest index.
inline std::vector<int> extract_discrete_plan(const TrajectoryRecord& trajectory,
                                              const SimplexGroup& group)
{
    std::vector<int> plan;
    plan.reserve(trajectory.controls.size());
    for (const auto& u : trajectory.controls)
    {
        int best = 0;
        for (std::size_t a = 1; a < group.indices.size(); ++a)
            if (u[group.indices[a]] > u[group.indices[best]]) best = static_cast<int>(a);
        plan.push_back(best);
    }
    return plan;
}

/// Action minimizing c(x, u, a) + V_{t+1}(f(x, u, a)); ties keep the nominal
/// action. `next_nominal` is the state the value expansion is taken about.
/// `covariance_change`, when given, returns Sigma_{t+1}(a) - nominal Sigma_{t+1}.
inline int greedy_action_choice(const Problem& problem, const Vector& x, const Vector& u,
                                const Matrix& cov, const Vector& next_nominal,
                                const ValueExpansion& next_value, int nominal_action,
                                const std::function<Matrix(int)>& covariance_change = {})
{
    auto score = [&](int a) {
        const Vector dx = problem.dynamics.f(x, u, a) - next_nominal;
        double q = problem.cost.running(x, u, a, cov);
        q += covariance_change ? next_value.evaluate(dx, covariance_change(a))
                               : next_value.evaluate(dx);
        return q;
    };
    int best = nominal_action;
    double best_score = score(nominal_action);
    for (int a = 0; a < problem.num_actions; ++a)
    {
        if (a == nominal_action) continue;
        const double s = score(a);
        if (s < best_score)
        {
            best = a;
            best_score = s;
        }
    }
    return best;
}

/// Adopts the new action at ceil(alpha * |D|) of the differing timesteps D,
/// spread evenly (stride |D| / count, starting at the first differing index).
inline std::vector<int> interpolate_actions(const std::vector<int>& old_actions,
                                            const std::vector<int>& new_actions, double alpha)
{
    if (old_actions.size() != new_actions.size())
        throw Error("interpolate_actions: sequences differ in length");
    std::vector<std::size_t> differ;
    for (std::size_t t = 0; t < old_actions.size(); ++t)
        if (old_actions[t] != new_actions[t]) differ.push_back(t);
    std::vector<int> out = old_actions;
    if (differ.empty() || alpha <= 0.0) return out;
    const double d = static_cast<double>(differ.size());
    const auto count = static_cast<std::size_t>(
        std::min(d, std::ceil(std::clamp(alpha, 0.0, 1.0) * d - 1e-12)));
    if (count == 0) return out;
    const double stride = d / static_cast<double>(count);
    for (std::size_t j = 0; j < count; ++j)
    {
        const auto idx = std::min(differ.size() - 1,
                                  static_cast<std::size_t>(std::floor(j * stride + 1e-9)));
        out[differ[idx]] = new_actions[differ[idx]];
    }
    return out;
}

/// Map from a solver control (plus carried action) to the executed hybrid
/// control: continuous part, action probabilities, and the applied action.
struct DecodedControl
{
    Vector u;
    Vector p;
    int action = 0;
};

using ControlDecoder = std::function<DecodedControl(const Vector& control, int action)>;

/// Mixture controls execute the most likely action.
inline ControlDecoder mixture_decoder(int continuous_dim, int num_actions)
{
    return [continuous_dim, num_actions](const Vector& control, int) {
        DecodedControl d{control.head(continuous_dim), control.segment(continuous_dim, num_actions), 0};
        for (int a = 1; a < num_actions; ++a)
            if (d.p[a] > d.p[d.action]) d.action = a;
        return d;
    };
}

/// Controls with an explicitly carried action (greedy / interpolate).
inline ControlDecoder carried_action_decoder(int num_actions)
{
    return [num_actions](const Vector& control, int action) {
        DecodedControl d{control, Vector::Zero(num_actions), action};
        d.p[action] = 1.0;
        return d;
    };
}

}  // namespace hddp::hybrid

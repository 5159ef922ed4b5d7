#pragma once

// Problem model shared by every solver: dynamics, observation and cost
// interfaces, trajectory records, and numerical differentiation.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hddp
{
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error
{
   public:
    using std::runtime_error::runtime_error;
};

class DifferentiationError : public Error
{
   public:
    explicit DifferentiationError(int coordinate)
        : Error("non-finite function value while differentiating coordinate " +
                std::to_string(coordinate)),
          coordinate_(coordinate)
    {
    }
    int coordinate() const { return coordinate_; }

   private:
    int coordinate_;
};

class RolloutDiverged : public Error
{
   public:
    explicit RolloutDiverged(int timestep)
        : Error("rollout diverged at timestep " + std::to_string(timestep)), timestep_(timestep)
    {
    }
    int timestep() const { return timestep_; }

   private:
    int timestep_;
};

// ---------------------------------------------------------------------------
// Domain types

/// Continuous controls concatenated with discrete-action pseudo-probabilities.
struct HybridControl
{
    Vector u;
    Vector p;

    Vector stacked() const
    {
        Vector out(u.size() + p.size());
        out << u, p;
        return out;
    }

    static HybridControl split(const Vector& stacked, int continuous_dim)
    {
        return {stacked.head(continuous_dim), stacked.tail(stacked.size() - continuous_dim)};
    }

    /// True when p lies on the probability simplex within `tol`.
    bool on_simplex(double tol = 1e-9) const
    {
        if (p.size() == 0) return true;
        if ((p.array() < -tol).any() || (p.array() > 1.0 + tol).any()) return false;
        return std::abs(p.sum() - 1.0) <= tol;
    }
};

struct ControlBounds
{
    Vector lower;
    Vector upper;

    static ControlBounds unbounded(int dim)
    {
        return {Vector::Constant(dim, -kInf), Vector::Constant(dim, kInf)};
    }

    int size() const { return static_cast<int>(lower.size()); }

    bool valid() const
    {
        return lower.size() == upper.size() && (lower.array() <= upper.array()).all();
    }

    Vector clamp(const Vector& u) const { return u.cwiseMax(lower).cwiseMin(upper); }

    /// Concatenation, e.g. continuous bounds followed by [0, 1] per probability.
    ControlBounds append(const ControlBounds& other) const
    {
        ControlBounds out{Vector(size() + other.size()), Vector(size() + other.size())};
        out.lower << lower, other.lower;
        out.upper << upper, other.upper;
        return out;
    }
};

/// Indices of a control vector that are constrained to sum to one.
struct SimplexGroup
{
    std::vector<int> indices;
};

using DynamicsFn = std::function<Vector(const Vector& x, const Vector& u, int action)>;
using NoiseFn = std::function<Matrix(const Vector& x, const Vector& u, int action)>;
using JacobianFn =
    std::function<std::pair<Matrix, Matrix>(const Vector& x, const Vector& u, int action)>;

/// x' = f(x, u, a) + m, m ~ N(0, M(x, u, a)).
struct DynamicsSpec
{
    DynamicsFn f;
    NoiseFn noise;          // empty: deterministic
    JacobianFn jacobians;   // optional analytic (f_x, f_u)
};

/// z = h(x) + n, n ~ N(0, N(x)).
struct ObservationSpec
{
    std::function<Vector(const Vector& x)> h;
    std::function<Matrix(const Vector& x)> noise;
    std::function<Matrix(const Vector& x)> jacobian;  // optional analytic h_x
};

/// Second-order model of a stage cost about (x, u).
struct CostExpansion
{
    double c = 0.0;
    Vector c_x, c_u;
    Matrix c_xx, c_uu, c_ux;
};

/// Second-order model of a final cost about x.
struct FinalCostExpansion
{
    double c = 0.0;
    Vector c_x;
    Matrix c_xx;
};

using RunningCostFn =
    std::function<double(const Vector& x, const Vector& u, int action, const Matrix& cov)>;
using FinalCostFn = std::function<double(const Vector& x, const Matrix& cov)>;

struct CostSpec
{
    RunningCostFn running;
    FinalCostFn final;
    // Optional analytic expansions; finite differences are used otherwise.
    std::function<CostExpansion(const Vector& x, const Vector& u, int action, const Matrix& cov)>
        running_expansion;
    std::function<FinalCostExpansion(const Vector& x, const Matrix& cov)> final_expansion;
};

struct DerivativeOptions
{
    double jacobian_step = 1e-5;  // relative: step * max(1, |coordinate|)
    double hessian_step = 1e-4;
};

/// A continuous-control problem as consumed by the DDP engines. Discrete
/// actions, when num_actions > 1, are carried alongside the controls.
struct Problem
{
    int state_dim = 0;
    int control_dim = 0;
    int num_actions = 1;
    DynamicsSpec dynamics;
    CostSpec cost;
    ControlBounds bounds;
    std::vector<SimplexGroup> simplex_groups;
    DerivativeOptions derivatives;
};

/// Per-timestep state (or belief mean), controls, actions and costs.
struct TrajectoryRecord
{
    std::vector<Vector> states;       // T + 1
    std::vector<Matrix> covariances;  // T + 1 for belief trajectories, else empty
    std::vector<Vector> controls;     // T
    std::vector<int> actions;         // T
    std::vector<double> stage_costs;  // T
    double final_cost = 0.0;
    double total_cost = 0.0;

    int horizon() const { return static_cast<int>(controls.size()); }
    bool has_belief() const { return !covariances.empty(); }
};

// ---------------------------------------------------------------------------
// Numerical differentiation

enum class StepScaling
{
    kAbsolute,
    kRelative,  // step * max(1, |coordinate|)
};

namespace detail
{
inline double scaled_step(double step, double coordinate, StepScaling scaling)
{
    return scaling == StepScaling::kRelative ? step * std::max(1.0, std::abs(coordinate)) : step;
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m)
{
    return m.allFinite();
}
}  // namespace detail

/// Central-difference Jacobian of f at x.
template <typename F>
Matrix finite_diff_jacobian(F&& f, const Vector& x, double step,
                            StepScaling scaling = StepScaling::kAbsolute)
{
    if (!(step > 0.0)) throw Error("finite_diff_jacobian: step must be positive");
    Vector probe = x;
    Matrix jac;
    for (Eigen::Index j = 0; j < x.size(); ++j)
    {
        const double h = detail::scaled_step(step, x[j], scaling);
        // Use the representable perturbations so affine maps come out exact.
        probe[j] = x[j] + h;
        const double hp = probe[j] - x[j];
        const Vector fp = f(probe);
        probe[j] = x[j] - h;
        const double hm = x[j] - probe[j];
        const Vector fm = f(probe);
        probe[j] = x[j];
        if (!fp.allFinite() || !fm.allFinite()) throw DifferentiationError(static_cast<int>(j));
        if (j == 0) jac.resize(fp.size(), x.size());
        jac.col(j) = (fp - fm) / (hp + hm);
    }
    return jac;
}

/// Value, gradient and symmetric Hessian of a scalar map by central differences.
template <typename F>
void finite_diff_hessian(F&& f, const Vector& z, double step, StepScaling scaling, double& value,
                         Vector& grad, Matrix& hess)
{
    const Eigen::Index n = z.size();
    value = f(z);
    if (!std::isfinite(value)) throw DifferentiationError(-1);
    grad.resize(n);
    hess.resize(n, n);
    Vector h(n);
    for (Eigen::Index i = 0; i < n; ++i) h[i] = detail::scaled_step(step, z[i], scaling);

    Vector probe = z;
    auto eval = [&](Eigen::Index coord) {
        const double v = f(probe);
        if (!std::isfinite(v)) throw DifferentiationError(static_cast<int>(coord));
        return v;
    };
    for (Eigen::Index i = 0; i < n; ++i)
    {
        probe[i] = z[i] + h[i];
        const double fp = eval(i);
        probe[i] = z[i] - h[i];
        const double fm = eval(i);
        probe[i] = z[i];
        grad[i] = (fp - fm) / (2.0 * h[i]);
        hess(i, i) = (fp - 2.0 * value + fm) / (h[i] * h[i]);
    }
    for (Eigen::Index i = 0; i < n; ++i)
    {
        for (Eigen::Index j = i + 1; j < n; ++j)
        {
            probe[i] = z[i] + h[i];
            probe[j] = z[j] + h[j];
            const double fpp = eval(i);
            probe[j] = z[j] - h[j];
            const double fpm = eval(i);
            probe[i] = z[i] - h[i];
            const double fmm = eval(i);
            probe[j] = z[j] + h[j];
            const double fmp = eval(i);
            probe[i] = z[i];
            probe[j] = z[j];
            const double hij = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess(i, j) = hij;
            hess(j, i) = hij;
        }
    }
}

/// Quadratic model of c(x, u) about (x, u); Hessian blocks are exactly symmetric.
template <typename F>
CostExpansion quadratize_cost(F&& c, const Vector& x, const Vector& u, double step,
                              StepScaling scaling = StepScaling::kAbsolute)
{
    const Eigen::Index nx = x.size();
    const Eigen::Index nu = u.size();
    Vector z(nx + nu);
    z << x, u;
    CostExpansion out;
    Vector grad;
    Matrix hess;
    finite_diff_hessian([&](const Vector& zz) { return c(zz.head(nx), zz.tail(nu)); }, z, step,
                        scaling, out.c, grad, hess);
    hess = 0.5 * (hess + hess.transpose()).eval();
    out.c_x = grad.head(nx);
    out.c_u = grad.tail(nu);
    out.c_xx = hess.topLeftCorner(nx, nx);
    out.c_uu = hess.bottomRightCorner(nu, nu);
    out.c_ux = hess.bottomLeftCorner(nu, nx);
    return out;
}

/// Raises every eigenvalue of a symmetric matrix to at least `floor`.
inline Matrix clamp_eigenvalues(const Matrix& m, double floor)
{
    if (m.size() == 0) return m;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (m + m.transpose()));
    if (eig.eigenvalues().minCoeff() >= floor) return 0.5 * (m + m.transpose());
    const Vector clamped = eig.eigenvalues().cwiseMax(floor);
    Matrix out = eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

// ---------------------------------------------------------------------------
// Model evaluation helpers used by the solvers

inline std::pair<Matrix, Matrix> dynamics_jacobians(const Problem& problem, const Vector& x,
                                                    const Vector& u, int action)
{
    if (problem.dynamics.jacobians) return problem.dynamics.jacobians(x, u, action);
    const double step = problem.derivatives.jacobian_step;
    Matrix fx = finite_diff_jacobian([&](const Vector& xx) { return problem.dynamics.f(xx, u, action); },
                                     x, step, StepScaling::kRelative);
    Matrix fu = finite_diff_jacobian([&](const Vector& uu) { return problem.dynamics.f(x, uu, action); },
                                     u, step, StepScaling::kRelative);
    return {std::move(fx), std::move(fu)};
}

/// df/dx alone; skips the control columns when they would be differenced.
inline Matrix state_jacobian(const Problem& problem, const Vector& x, const Vector& u, int action)
{
    if (problem.dynamics.jacobians) return problem.dynamics.jacobians(x, u, action).first;
    return finite_diff_jacobian([&](const Vector& xx) { return problem.dynamics.f(xx, u, action); }, x,
                                problem.derivatives.jacobian_step, StepScaling::kRelative);
}

inline Matrix process_noise(const Problem& problem, const Vector& x, const Vector& u, int action)
{
    if (problem.dynamics.noise) return problem.dynamics.noise(x, u, action);
    return Matrix::Zero(problem.state_dim, problem.state_dim);
}

inline CostExpansion running_cost_expansion(const Problem& problem, const Vector& x, const Vector& u,
                                            int action, const Matrix& cov)
{
    if (problem.cost.running_expansion) return problem.cost.running_expansion(x, u, action, cov);
    return quadratize_cost(
        [&](const Vector& xx, const Vector& uu) { return problem.cost.running(xx, uu, action, cov); },
        x, u, problem.derivatives.hessian_step, StepScaling::kRelative);
}

inline FinalCostExpansion final_cost_expansion(const Problem& problem, const Vector& x,
                                               const Matrix& cov)
{
    if (problem.cost.final_expansion) return problem.cost.final_expansion(x, cov);
    FinalCostExpansion out;
    finite_diff_hessian([&](const Vector& xx) { return problem.cost.final(xx, cov); }, x,
                        problem.derivatives.hessian_step, StepScaling::kRelative, out.c, out.c_x,
                        out.c_xx);
    out.c_xx = 0.5 * (out.c_xx + out.c_xx.transpose()).eval();
    return out;
}

/// Projects the probability entries of each simplex group back onto the
/// simplex: clamp to [0, 1], divide by the sum, uniform if the sum vanishes.
inline Vector normalize_probabilities(const Vector& raw)
{
    Vector p = raw.cwiseMax(0.0).cwiseMin(1.0);
    const double sum = p.sum();
    if (!(sum >= 1e-12)) return Vector::Constant(raw.size(), 1.0 / static_cast<double>(raw.size()));
    return p / sum;
}

/// Clamps to the bounds and renormalizes every simplex group.
inline Vector project_control(const Problem& problem, const Vector& u)
{
    Vector out = problem.bounds.size() > 0 ? problem.bounds.clamp(u) : u;
    for (const auto& group : problem.simplex_groups)
    {
        Vector p(group.indices.size());
        for (std::size_t i = 0; i < group.indices.size(); ++i) p[i] = out[group.indices[i]];
        p = normalize_probabilities(p);
        for (std::size_t i = 0; i < group.indices.size(); ++i) out[group.indices[i]] = p[i];
    }
    return out;
}

/// Mean-dynamics rollout: no sampled noise, stage and final costs recorded.
inline TrajectoryRecord rollout(const Problem& problem, const Vector& x0,
                                const std::vector<Vector>& controls, std::vector<int> actions = {})
{
    const int horizon = static_cast<int>(controls.size());
    if (actions.empty()) actions.assign(horizon, 0);
    if (static_cast<int>(actions.size()) != horizon)
        throw Error("rollout: action sequence length differs from control sequence length");
    if (!x0.allFinite()) throw RolloutDiverged(0);

    const Matrix zero_cov = Matrix::Zero(problem.state_dim, problem.state_dim);
    TrajectoryRecord out;
    out.states.reserve(horizon + 1);
    out.states.push_back(x0);
    out.controls = controls;
    out.actions = std::move(actions);
    out.stage_costs.reserve(horizon);
    double total = 0.0;
    for (int t = 0; t < horizon; ++t)
    {
        const Vector& x = out.states.back();
        const double c = problem.cost.running(x, controls[t], out.actions[t], zero_cov);
        Vector next = problem.dynamics.f(x, controls[t], out.actions[t]);
        if (!next.allFinite() || !std::isfinite(c)) throw RolloutDiverged(t);
        out.stage_costs.push_back(c);
        total += c;
        out.states.push_back(std::move(next));
    }
    out.final_cost = problem.cost.final(out.states.back(), zero_cov);
    if (!std::isfinite(out.final_cost)) throw RolloutDiverged(horizon);
    out.total_cost = total + out.final_cost;
    return out;
}

}  // namespace hddp

#pragma once

// Gear-switching car: kinematic bicycle with first gear, second gear and brake.
//
// State x = (x, y, w, v), controls u = (w_wheel, acc), actions {brake, gear1, gear2}.

#include <algorithm>
#include <cmath>
#include <string>

#include "hddp/hybrid.hpp"
#include "hddp/problem.hpp"

namespace hddp::envs::car
{
enum Action : int
{
    kBrake = 0,
    kGear1 = 1,
    kGear2 = 2,
};
inline constexpr int kNumActions = 3;
inline constexpr int kStateDim = 4;
inline constexpr int kControlDim = 2;

struct Params
{
    double dt = 0.05;
    double wheelbase = 2.0;
    double wheel_limit = 0.5;
    double acc_max = 0.5;
    double gear1_limit = 1.0;  // soft velocity limits
    double gear2_limit = 4.0;
    double brake_limit = 4.0;
    double engine_brake = -0.1;  // acceleration above a soft limit
    double limit_width = 0.01;   // sigmoid width of the soft limit; 0 switches hard
    double w_final_xy = 20.0;
    double w_final_angle = 2.0;
    double w_final_velocity = 1.0;
    double w_control = 1e-3;
    double kappa = hybrid::kDefaultKappa;
    Vector initial_state = (Vector(4) << -20.0, 0.0, 0.0, 0.0).finished();
    double initial_wheel = 0.0;
    double initial_acc = 0.1;
    int initial_action = kGear1;
};

struct Acceleration
{
    double value = 0.0;
    double d_velocity = 0.0;
    double d_acc = 0.0;
};

/// Effective acceleration of a gear, with engine braking above its soft limit.
inline Acceleration effective_acceleration(const Params& p, double v, double acc, int action)
{
    double base = acc, d_base = 1.0, limit = p.gear1_limit;
    switch (action)
    {
        case kBrake:
            base = -acc;
            d_base = -1.0;
            limit = p.brake_limit;
            break;
        case kGear1:
            limit = p.gear1_limit;
            break;
        case kGear2:
            base = 0.5 * acc;
            d_base = 0.5;
            limit = p.gear2_limit;
            break;
        default:
            throw Error("car: unknown action " + std::to_string(action));
    }
    if (p.limit_width <= 0.0)
    {
        if (v > limit) return {p.engine_brake, 0.0, 0.0};
        return {base, 0.0, d_base};
    }
    const double s = 1.0 / (1.0 + std::exp(-(v - limit) / p.limit_width));
    const double ds = s * (1.0 - s) / p.limit_width;
    return {(1.0 - s) * base + s * p.engine_brake, ds * (p.engine_brake - base), (1.0 - s) * d_base};
}

inline Vector dynamics(const Params& p, const Vector& x, const Vector& u, int action)
{
    const double w = x[2], v = x[3];
    const auto acc = effective_acceleration(p, v, u[1], action);
    Vector next(4);
    next[0] = x[0] + p.dt * v * std::cos(w);
    next[1] = x[1] + p.dt * v * std::sin(w);
    next[2] = w + p.dt * v * std::tan(u[0]) / p.wheelbase;
    next[3] = v + p.dt * acc.value;
    return next;
}

inline std::pair<Matrix, Matrix> jacobians(const Params& p, const Vector& x, const Vector& u,
                                           int action)
{
    const double w = x[2], v = x[3];
    const auto acc = effective_acceleration(p, v, u[1], action);
    Matrix fx = Matrix::Identity(4, 4);
    fx(0, 2) = -p.dt * v * std::sin(w);
    fx(0, 3) = p.dt * std::cos(w);
    fx(1, 2) = p.dt * v * std::cos(w);
    fx(1, 3) = p.dt * std::sin(w);
    fx(2, 3) = p.dt * std::tan(u[0]) / p.wheelbase;
    fx(3, 3) = 1.0 + p.dt * acc.d_velocity;
    Matrix fu = Matrix::Zero(4, 2);
    const double sec = 1.0 / std::cos(u[0]);
    fu(2, 0) = p.dt * v * sec * sec / p.wheelbase;
    fu(3, 1) = p.dt * acc.d_acc;
    return {fx, fu};
}

inline double running_cost(const Params& p, const Vector& u)
{
    return p.w_control * (u[0] * u[0] + u[1] * u[1]);
}

inline double final_cost(const Params& p, const Vector& x)
{
    using hybrid::pseudo_huber;
    return p.w_final_xy * (pseudo_huber(x[0], p.kappa).value + pseudo_huber(x[1], p.kappa).value) +
           p.w_final_angle * pseudo_huber(x[2], p.kappa).value +
           p.w_final_velocity * pseudo_huber(x[3], p.kappa).value;
}

inline FinalCostExpansion final_expansion(const Params& p, const Vector& x)
{
    const double weights[4] = {p.w_final_xy, p.w_final_xy, p.w_final_angle, p.w_final_velocity};
    FinalCostExpansion e;
    e.c_x = Vector::Zero(4);
    e.c_xx = Matrix::Zero(4, 4);
    for (int i = 0; i < 4; ++i)
    {
        const auto phi = hybrid::pseudo_huber(x[i], p.kappa);
        e.c += weights[i] * phi.value;
        e.c_x[i] = weights[i] * phi.d1;
        e.c_xx(i, i) = weights[i] * phi.d2;
    }
    return e;
}

inline ControlBounds control_bounds(const Params& p)
{
    return {(Vector(2) << -p.wheel_limit, 0.0).finished(),
            (Vector(2) << p.wheel_limit, p.acc_max).finished()};
}

/// Hybrid problem with three discrete actions.
inline Problem make_problem(const Params& p)
{
    Problem prob;
    prob.state_dim = kStateDim;
    prob.control_dim = kControlDim;
    prob.num_actions = kNumActions;
    prob.bounds = control_bounds(p);
    prob.dynamics.f = [p](const Vector& x, const Vector& u, int a) { return dynamics(p, x, u, a); };
    prob.dynamics.jacobians = [p](const Vector& x, const Vector& u, int a) {
        return jacobians(p, x, u, a);
    };
    prob.cost.running = [p](const Vector&, const Vector& u, int, const Matrix&) {
        return running_cost(p, u);
    };
    prob.cost.running_expansion = [p](const Vector& x, const Vector& u, int, const Matrix&) {
        CostExpansion e;
        e.c = running_cost(p, u);
        e.c_x = Vector::Zero(x.size());
        e.c_u = 2.0 * p.w_control * u;
        e.c_xx = Matrix::Zero(x.size(), x.size());
        e.c_uu = 2.0 * p.w_control * Matrix::Identity(2, 2);
        e.c_ux = Matrix::Zero(2, x.size());
        return e;
    };
    prob.cost.final = [p](const Vector& x, const Matrix&) { return final_cost(p, x); };
    prob.cost.final_expansion = [p](const Vector& x, const Matrix&) { return final_expansion(p, x); };
    return prob;
}

/// Gear selector for purely continuous optimization: q in [0, 3], action floor(q).
inline int gear_from_selector(double q)
{
    return std::clamp(static_cast<int>(std::floor(q)), 0, kNumActions - 1);
}

inline double selector_for(int action) { return action + 0.5; }

/// Continuous problem with controls (w_wheel, acc, q); the gear is floor(q),
/// so the selector has zero derivative almost everywhere.
inline Problem make_continuous_problem(const Params& p)
{
    const Problem base = make_problem(p);
    Problem prob = base;
    prob.control_dim = kControlDim + 1;
    prob.num_actions = 1;
    prob.bounds = base.bounds.append({Vector::Zero(1), Vector::Constant(1, kNumActions)});
    prob.dynamics.f = [p](const Vector& x, const Vector& u, int) {
        return dynamics(p, x, u.head(2), gear_from_selector(u[2]));
    };
    prob.dynamics.jacobians = [p](const Vector& x, const Vector& u, int) {
        auto [fx, fu2] = jacobians(p, x, u.head(2), gear_from_selector(u[2]));
        Matrix fu = Matrix::Zero(4, 3);
        fu.leftCols(2) = fu2;
        return std::pair<Matrix, Matrix>{fx, fu};
    };
    prob.cost.running = [p](const Vector&, const Vector& u, int, const Matrix&) {
        return running_cost(p, u.head(2));
    };
    prob.cost.running_expansion = [p](const Vector& x, const Vector& u, int, const Matrix&) {
        CostExpansion e;
        e.c = running_cost(p, u.head(2));
        e.c_x = Vector::Zero(x.size());
        e.c_u = Vector::Zero(3);
        e.c_u.head(2) = 2.0 * p.w_control * u.head(2);
        e.c_xx = Matrix::Zero(x.size(), x.size());
        e.c_uu = Matrix::Zero(3, 3);
        e.c_uu.topLeftCorner(2, 2) = 2.0 * p.w_control * Matrix::Identity(2, 2);
        e.c_ux = Matrix::Zero(3, x.size());
        return e;
    };
    return prob;
}

inline Vector initial_control(const Params& p)
{
    return (Vector(2) << p.initial_wheel, p.initial_acc).finished();
}

}  // namespace hddp::envs::car

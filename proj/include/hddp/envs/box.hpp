#pragma once

// Quasi-static planar pushing of a unit-square box with a point finger.
//
// State x = (x^C, y^C, w, x^CF, y^CF, mu_c, dist_c); the CF is expressed in the
// box frame relative to the center. Hybrid control: edge e (discrete) with
// u = (u^e, alpha_p, v). Edges are numbered counter-clockwise from the bottom.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "hddp/belief_ddp.hpp"
#include "hddp/hybrid.hpp"
#include "hddp/problem.hpp"

namespace hddp::envs::box
{
inline constexpr int kStateDim = 7;
inline constexpr int kControlDim = 3;
inline constexpr int kNumEdges = 4;
inline constexpr int kObservationDim = 3;

enum class Variant
{
    kDeterministic,  // fully observed, no noise
    kPomdp,          // uncertain pose, known CF and friction
    kUnknownCf,      // CF also uncertain
    kAllUnknown,     // CF and friction parameters uncertain
};

struct Params
{
    double dt = 0.02;
    double half_size = 0.5;
    double torque_scale = 0.5;  // limit-surface radius = torque_scale * dist_c
    double alpha_limit = 0.35 * std::numbers::pi;
    double v_min = 0.01;
    double v_max = 3.0;

    double w_final_xy = 20.0;
    double w_final_angle = 2.0;
    double w_running_xy = 0.01;
    double kappa_running = 0.1;
    double w_control = 1e-6;
    double w_obstacle = 0.1;
    double obstacle_x = 1.0;
    double obstacle_y = 1.0;
    double obstacle_offset = 0.5 * std::numbers::sqrt2;
    double w_corner = 0.1;
    double corner_rate = 10.0;
    double kappa = hybrid::kDefaultKappa;

    double process_sd = 0.01;
    double observation_sd_position = 1e-4;
    double observation_sd_angle = 0.033;
    double initial_sd_position = 0.01;
    double initial_sd_angle = 0.1;
    double initial_sd_cf = 0.2;
    double initial_sd_friction = 0.2;
    double friction_mean = 1.0;
    double min_friction = 0.05;  // sampled friction parameters are kept above this

    Vector initial_pose = (Vector(3) << 2.0, 2.0, 0.0).finished();
    double initial_ue = 0.5;
    double initial_alpha = 0.0;
    double initial_v = 1.0;
    int initial_edge = 0;
};

using Vec2 = Eigen::Vector2d;

inline Vec2 rotate(double w, const Vec2& p)
{
    const double c = std::cos(w), s = std::sin(w);
    return {c * p.x() - s * p.y(), s * p.x() + c * p.y()};
}

inline double cross(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline void check_edge(int edge)
{
    if (edge < 0 || edge >= kNumEdges) throw Error("box: edge index out of range");
}

/// Inward unit normal of an edge in the box frame.
inline Vec2 inward_normal(int edge)
{
    check_edge(edge);
    static const std::array<Vec2, 4> n = {Vec2(0, 1), Vec2(-1, 0), Vec2(0, -1), Vec2(1, 0)};
    return n[edge];
}

/// Unit direction of increasing u^e along an edge.
inline Vec2 edge_tangent(int edge)
{
    const Vec2 n = inward_normal(edge);
    return {n.y(), -n.x()};
}

/// Contact point in the box frame for u^e in [0, 1] along an edge.
inline Vec2 contact_point(const Params& p, int edge, double ue)
{
    const double h = p.half_size, l = 2.0 * p.half_size;
    switch (edge)
    {
        case 0:
            return {-h + l * ue, -h};
        case 1:
            return {h, -h + l * ue};
        case 2:
            return {h - l * ue, h};
        case 3:
            return {-h, h - l * ue};
        default:
            check_edge(edge);
    }
    return {};
}

struct PushOutcome
{
    Vector next;
    bool contact = true;
    bool sliding = false;
    double contact_after = 0.0;  // u^e after the step (changes while sliding)
    Vec2 cf_velocity = Vec2::Zero();
    double angular_velocity = 0.0;
};

/// One quasi-static pushing step with the ellipsoidal limit-surface model.
inline PushOutcome push(const Params& p, const Vector& x, int edge, double ue, double alpha, double v)
{
    const Vec2 r_cf(x[3], x[4]);
    const double mu = std::max(x[5], 0.0);
    const double c = p.torque_scale * std::max(x[6], 1e-9);
    const double c2 = c * c;
    const Vec2 n = inward_normal(edge);
    const Vec2 t = edge_tangent(edge);
    const Vec2 r = contact_point(p, edge, ue) - r_cf;
    const Vec2 vp = v * (std::cos(alpha) * n + std::sin(alpha) * t);

    PushOutcome out;
    // Inside the friction cone the contact sticks. Outside it the finger's
    // tangential motion is clipped to the cone edge; the box follows the
    // clipped motion and the remainder slips along the edge.
    const double cone = std::atan(mu);
    Vec2 vc = vp;
    if (std::abs(alpha) > cone)
    {
        out.sliding = true;
        vc = v * std::cos(alpha) * (n + std::copysign(mu, alpha) * t);
    }
    const double den = c2 + r.squaredNorm();
    const Vec2 V = Vec2((c2 + r.x() * r.x()) * vc.x() + r.x() * r.y() * vc.y(),
                        r.x() * r.y() * vc.x() + (c2 + r.y() * r.y()) * vc.y()) /
                   den;
    const double omega = cross(r, V) / c2;
    const Vec2 contact_velocity = V + omega * Vec2(-r.y(), r.x());
    out.contact_after = ue + (vp - contact_velocity).dot(t) * p.dt / (2.0 * p.half_size);
    out.cf_velocity = V;
    out.angular_velocity = omega;

    const double w = x[2];
    const double w_next = w + omega * p.dt;
    const Vec2 cf_world = Vec2(x[0], x[1]) + rotate(w, r_cf) + rotate(w, V) * p.dt;
    const Vec2 center = cf_world - rotate(w_next, r_cf);
    out.next = x;
    out.next[0] = center.x();
    out.next[1] = center.y();
    out.next[2] = w_next;
    return out;
}

inline Vector dynamics(const Params& p, const Vector& x, const Vector& u, int edge)
{
    return push(p, x, edge, u[0], u[1], u[2]).next;
}

/// Execution-time step: the push is planned in the believed frame and may
/// miss the true box, leaving it unmoved.
inline PushOutcome push_executed(const Params& p, const Vector& x, const Vector& belief_mean,
                                 int edge, double ue, double alpha, double v)
{
    const Vec2 planned_point = Vec2(belief_mean[0], belief_mean[1]) +
                               rotate(belief_mean[2], contact_point(p, edge, ue));
    const Vec2 planned_dir = rotate(belief_mean[2], std::cos(alpha) * inward_normal(edge) +
                                                        std::sin(alpha) * edge_tangent(edge));
    const Vec2 local_point = rotate(-x[2], planned_point - Vec2(x[0], x[1]));
    const Vec2 local_dir = rotate(-x[2], planned_dir);
    const double true_ue =
        (local_point - contact_point(p, edge, 0.0)).dot(edge_tangent(edge)) / (2.0 * p.half_size);
    const double dn = local_dir.dot(inward_normal(edge));
    if (!(true_ue >= 0.0 && true_ue <= 1.0) || dn <= 0.0)
    {
        PushOutcome miss;
        miss.next = x;
        miss.contact = false;
        miss.contact_after = true_ue;
        return miss;
    }
    const double true_alpha = std::atan2(local_dir.dot(edge_tangent(edge)), dn);
    return push(p, x, edge, true_ue, true_alpha, v);
}

// ---------------------------------------------------------------------------
// Costs

/// log of the standard normal CDF, accurate in the far left tail.
inline double log_normal_cdf(double z)
{
    if (z > -30.0) return std::log(0.5 * std::erfc(-z / std::numbers::sqrt2));
    return -0.5 * z * z - std::log(-z) - 0.5 * std::log(2.0 * std::numbers::pi) +
           std::log1p(-1.0 / (z * z));
}

/// d/dz log Phi(z) (the inverse Mills ratio).
inline double inverse_mills(double z)
{
    if (z > -30.0)
    {
        const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
        return pdf / (0.5 * std::erfc(-z / std::numbers::sqrt2));
    }
    return -z / (1.0 - 1.0 / (z * z));
}

inline double obstacle_cost(const Params& p, double xc, double yc)
{
    const double dx = p.obstacle_x - xc, dy = p.obstacle_y - yc;
    return -p.w_obstacle * log_normal_cdf(dx * dx + dy * dy - p.obstacle_offset);
}

inline double corner_shift(const Params&, const Matrix& cov)
{
    const double var_w = cov.size() > 0 ? cov(2, 2) : 0.0;
    return std::cos(std::min(3.0 * var_w, 0.5 * std::numbers::pi));
}

inline double corner_cost(const Params& p, double ue, const Matrix& cov)
{
    const double cs = corner_shift(p, cov);
    return p.w_corner * (std::exp(p.corner_rate * (ue - cs)) + std::exp(p.corner_rate * (1.0 - cs - ue)));
}

inline double running_cost(const Params& p, const Vector& x, const Vector& u, const Matrix& cov)
{
    using hybrid::pseudo_huber;
    return p.w_running_xy *
               (pseudo_huber(x[0], p.kappa_running).value + pseudo_huber(x[1], p.kappa_running).value) +
           p.w_control * (u[1] * u[1] + u[2] * u[2]) + obstacle_cost(p, x[0], x[1]) +
           corner_cost(p, u[0], cov);
}

inline CostExpansion running_expansion(const Params& p, const Vector& x, const Vector& u,
                                       const Matrix& cov)
{
    CostExpansion e;
    e.c = running_cost(p, x, u, cov);
    e.c_x = Vector::Zero(kStateDim);
    e.c_u = Vector::Zero(kControlDim);
    e.c_xx = Matrix::Zero(kStateDim, kStateDim);
    e.c_uu = Matrix::Zero(kControlDim, kControlDim);
    e.c_ux = Matrix::Zero(kControlDim, kStateDim);
    for (int i = 0; i < 2; ++i)
    {
        const auto phi = hybrid::pseudo_huber(x[i], p.kappa_running);
        e.c_x[i] += p.w_running_xy * phi.d1;
        e.c_xx(i, i) += p.w_running_xy * phi.d2;
    }
    // -w log Phi(z), z = |x^o - x^C|^2 - offset
    const Vec2 diff(x[0] - p.obstacle_x, x[1] - p.obstacle_y);
    const double z = diff.squaredNorm() - p.obstacle_offset;
    const double lam = inverse_mills(z);
    const double dlam = -lam * (z + lam);
    const Vec2 dz = 2.0 * diff;
    e.c_x.head(2) += -p.w_obstacle * lam * dz;
    e.c_xx.topLeftCorner(2, 2) +=
        -p.w_obstacle * (dlam * dz * dz.transpose() + 2.0 * lam * Eigen::Matrix2d::Identity());

    const double cs = corner_shift(p, cov);
    const double up = p.w_corner * std::exp(p.corner_rate * (u[0] - cs));
    const double down = p.w_corner * std::exp(p.corner_rate * (1.0 - cs - u[0]));
    e.c_u[0] = p.corner_rate * (up - down);
    e.c_uu(0, 0) = p.corner_rate * p.corner_rate * (up + down);
    e.c_u[1] = 2.0 * p.w_control * u[1];
    e.c_u[2] = 2.0 * p.w_control * u[2];
    e.c_uu(1, 1) = 2.0 * p.w_control;
    e.c_uu(2, 2) = 2.0 * p.w_control;
    return e;
}

inline double final_cost(const Params& p, const Vector& x, const Matrix& cov)
{
    using hybrid::pseudo_huber;
    double c = p.w_final_xy * (pseudo_huber(x[0], p.kappa).value + pseudo_huber(x[1], p.kappa).value) +
               p.w_final_angle * pseudo_huber(x[2], p.kappa).value;
    if (cov.size() > 0) c += cov.trace();
    return c;
}

inline FinalCostExpansion final_expansion(const Params& p, const Vector& x, const Matrix& cov)
{
    const double weights[3] = {p.w_final_xy, p.w_final_xy, p.w_final_angle};
    FinalCostExpansion e;
    e.c = final_cost(p, x, cov);
    e.c_x = Vector::Zero(kStateDim);
    e.c_xx = Matrix::Zero(kStateDim, kStateDim);
    for (int i = 0; i < 3; ++i)
    {
        const auto phi = hybrid::pseudo_huber(x[i], p.kappa);
        e.c_x[i] = weights[i] * phi.d1;
        e.c_xx(i, i) = weights[i] * phi.d2;
    }
    return e;
}

// ---------------------------------------------------------------------------
// Observation, noise and beliefs

inline Vector observe(const Vector& x) { return x.head(kObservationDim); }

inline ObservationSpec observation_model(const Params& p)
{
    ObservationSpec obs;
    obs.h = [](const Vector& x) { return observe(x); };
    const Vector var = (Vector(3) << p.observation_sd_position * p.observation_sd_position,
                        p.observation_sd_position * p.observation_sd_position,
                        p.observation_sd_angle * p.observation_sd_angle)
                           .finished();
    obs.noise = [var](const Vector&) { return Matrix(var.asDiagonal()); };
    obs.jacobian = [](const Vector&) {
        Matrix h = Matrix::Zero(kObservationDim, kStateDim);
        h.leftCols(kObservationDim).setIdentity();
        return h;
    };
    return obs;
}

inline Matrix process_noise(const Params& p, Variant variant)
{
    Matrix m = Matrix::Zero(kStateDim, kStateDim);
    if (variant != Variant::kDeterministic)
        m.diagonal().head(3).setConstant(p.process_sd * p.process_sd);
    return m;
}

inline Matrix initial_covariance(const Params& p, Variant variant)
{
    Vector sd = Vector::Zero(kStateDim);
    if (variant != Variant::kDeterministic)
    {
        sd << p.initial_sd_position, p.initial_sd_position, p.initial_sd_angle, 0, 0, 0, 0;
        if (variant == Variant::kUnknownCf || variant == Variant::kAllUnknown)
            sd.segment(3, 2).setConstant(p.initial_sd_cf);
        if (variant == Variant::kAllUnknown) sd.tail(2).setConstant(p.initial_sd_friction);
    }
    return Matrix(sd.cwiseProduct(sd).asDiagonal());
}

/// Belief mean for a CF given in unit-square coordinates ([0, 1]^2, lower-left origin).
inline Vector initial_state(const Params& p, const Vec2& cf_unit)
{
    Vector x(kStateDim);
    x << p.initial_pose, (cf_unit - Vec2(0.5, 0.5)) * 2.0 * p.half_size, p.friction_mean,
        p.friction_mean;
    return x;
}

/// Keeps sampled states physical: CF inside the box, friction parameters positive.
inline Vector sanitize(const Params& p, Vector x)
{
    const double lim = 0.9 * p.half_size;
    x[3] = std::clamp(x[3], -lim, lim);
    x[4] = std::clamp(x[4], -lim, lim);
    x[5] = std::max(x[5], p.min_friction);
    x[6] = std::max(x[6], p.min_friction);
    return x;
}

// ---------------------------------------------------------------------------
// Problems

inline ControlBounds control_bounds(const Params& p)
{
    return {(Vector(3) << 0.0, -p.alpha_limit, p.v_min).finished(),
            (Vector(3) << 1.0, p.alpha_limit, p.v_max).finished()};
}

/// Hybrid problem: four edges as discrete actions.
inline Problem make_problem(const Params& p, Variant variant)
{
    Problem prob;
    prob.state_dim = kStateDim;
    prob.control_dim = kControlDim;
    prob.num_actions = kNumEdges;
    prob.bounds = control_bounds(p);
    prob.dynamics.f = [p](const Vector& x, const Vector& u, int e) { return dynamics(p, x, u, e); };
    if (variant != Variant::kDeterministic)
    {
        const Matrix m = process_noise(p, variant);
        prob.dynamics.noise = [m](const Vector&, const Vector&, int) { return m; };
    }
    prob.cost.running = [p](const Vector& x, const Vector& u, int, const Matrix& cov) {
        return running_cost(p, x, u, cov);
    };
    prob.cost.running_expansion = [p](const Vector& x, const Vector& u, int, const Matrix& cov) {
        return running_expansion(p, x, u, cov);
    };
    prob.cost.final = [p](const Vector& x, const Matrix& cov) { return final_cost(p, x, cov); };
    prob.cost.final_expansion = [p](const Vector& x, const Matrix& cov) {
        return final_expansion(p, x, cov);
    };
    return prob;
}

struct PerimeterPoint
{
    int edge = 0;
    double ue = 0.0;
};

/// edge = floor(q mod 4), u^e = q mod 1.
inline PerimeterPoint from_perimeter(double q)
{
    double m = std::fmod(q, 4.0);
    if (m < 0.0) m += 4.0;
    const int edge = std::min(static_cast<int>(std::floor(m)), kNumEdges - 1);
    return {edge, m - edge};
}

inline double to_perimeter(int edge, double ue) { return edge + ue; }

/// Purely continuous problem with controls (q, alpha_p, v).
inline Problem make_perimeter_problem(const Params& p, Variant variant)
{
    const Problem base = make_problem(p, variant);
    Problem prob = base;
    prob.num_actions = 1;
    prob.bounds = {(Vector(3) << 0.0, -p.alpha_limit, p.v_min).finished(),
                   (Vector(3) << 4.0, p.alpha_limit, p.v_max).finished()};
    auto split = [](const Vector& u) {
        const auto pp = from_perimeter(u[0]);
        Vector inner = u;
        inner[0] = pp.ue;
        return std::pair<Vector, int>{inner, pp.edge};
    };
    prob.dynamics.f = [p, split](const Vector& x, const Vector& u, int) {
        const auto [inner, e] = split(u);
        return dynamics(p, x, inner, e);
    };
    prob.cost.running = [p, split](const Vector& x, const Vector& u, int, const Matrix& cov) {
        return running_cost(p, x, split(u).first, cov);
    };
    prob.cost.running_expansion = [p, split](const Vector& x, const Vector& u, int, const Matrix& cov) {
        return running_expansion(p, x, split(u).first, cov);
    };
    return prob;
}

inline Vector initial_control(const Params& p)
{
    return (Vector(3) << p.initial_ue, p.initial_alpha, p.initial_v).finished();
}

inline BeliefProblem make_belief_problem(Problem problem, const Params& p, Variant variant)
{
    return {std::move(problem), observation_model(p), initial_covariance(p, variant)};
}

}  // namespace hddp::envs::box

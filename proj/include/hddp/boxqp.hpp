#pragma once

// Projected-Newton QP for control-limited gains:
//
//   minimize 0.5 * d' H d + g' d
//   s.t.     lower <= d <= upper,  sum_{i in G} d_i = target_G  for each group G.
//
// Box entries are handled by clamping (projection) as in control-limited DDP.
// Group entries move along mean-centered search directions and the Armijo
// step is capped so no group entry crosses a bound.

#include <algorithm>
#include <cmath>
#include <vector>

#include "hddp/problem.hpp"

namespace hddp::qp
{
class QpFailure : public Error
{
   public:
    using Error::Error;
};

class QpInfeasible : public Error
{
   public:
    using Error::Error;
};

struct Group
{
    std::vector<int> indices;
    double target = 0.0;  // required sum of the entries
};

struct QpProblem
{
    Matrix H;
    Vector g;
    Vector lower;
    Vector upper;
    std::vector<Group> groups;

    double objective(const Vector& d) const { return 0.5 * d.dot(H * d) + g.dot(d); }
};

struct QpOptions
{
    int max_iterations = 100;
    double tolerance = 1e-8;  // projected gradient norm
    double armijo = 0.1;      // sufficient decrease
    double backtrack = 0.5;
    double min_step = 1e-22;
};

enum class QpStatus
{
    kConverged,        // projected gradient below tolerance
    kAllClamped,       // every entry sits on an active bound
    kMaxIterations,
    kNoDescent,        // line search failed
};

class QpSolution;

namespace detail
{
inline QpSolution solve(const QpProblem& qp, const Vector& warm_start, const QpOptions& opt);
}

/// Optimal step plus the free-subspace factorization needed for feedback gains.
class QpSolution
{
   public:
    Vector delta;
    std::vector<bool> clamped;
    int iterations = 0;
    QpStatus status = QpStatus::kConverged;

    /// Solves H_ff X_f = rhs_f on the free subspace, subject to every group
    /// keeping its sum (C X_f = 0). Clamped rows of the result are zero.
    Matrix solve_free(const Matrix& rhs) const
    {
        Matrix out = Matrix::Zero(rhs.rows(), rhs.cols());
        if (free_.empty()) return out;
        Matrix rhs_f(free_.size(), rhs.cols());
        for (std::size_t i = 0; i < free_.size(); ++i) rhs_f.row(i) = rhs.row(free_[i]);
        Matrix y = llt_.solve(rhs_f);
        if (constraints_.rows() > 0) y -= w_ * schur_.solve(constraints_ * y);
        for (std::size_t i = 0; i < free_.size(); ++i) out.row(free_[i]) = y.row(i);
        return out;
    }

    /// Feedback gain -H_ff^-1 Q_ux with clamped rows zeroed.
    Matrix feedback(const Matrix& q_ux) const { return -solve_free(q_ux); }

    const std::vector<int>& free_indices() const { return free_; }

   private:
    friend QpSolution detail::solve(const QpProblem&, const Vector&, const QpOptions&);

    void factorize(const QpProblem& qp, const std::vector<int>& free,
                   const std::vector<int>& group_of)
    {
        const int nf = static_cast<int>(free.size());
        free_ = free;
        if (nf == 0) return;
        Matrix h_ff(nf, nf);
        for (int i = 0; i < nf; ++i)
            for (int j = 0; j < nf; ++j) h_ff(i, j) = qp.H(free[i], free[j]);
        llt_.compute(h_ff);
        if (llt_.info() != Eigen::Success || (llt_.matrixLLT().diagonal().array() <= 0.0).any())
            throw QpFailure("free-subspace Hessian is not positive definite");

        std::vector<std::vector<int>> rows(qp.groups.size());
        for (int i = 0; i < nf; ++i)
            if (group_of[free[i]] >= 0) rows[group_of[free[i]]].push_back(i);
        int count = 0;
        for (const auto& r : rows) count += r.empty() ? 0 : 1;
        constraints_ = Matrix::Zero(count, nf);
        int row = 0;
        for (const auto& r : rows)
        {
            if (r.empty()) continue;
            for (int i : r) constraints_(row, i) = 1.0;
            ++row;
        }
        if (count > 0)
        {
            w_ = llt_.solve(constraints_.transpose());
            schur_.compute(constraints_ * w_);
        }
    }

    std::vector<int> free_;
    Eigen::LLT<Matrix> llt_;
    Matrix constraints_;  // one row per group with free entries
    Matrix w_;            // H_ff^-1 C'
    Eigen::LLT<Matrix> schur_;
};

namespace detail
{
/// Euclidean projection of `w` onto {lower <= x <= upper, sum x = target}.
inline void project_group(Vector& x, const Group& group, const Vector& lower, const Vector& upper)
{
    double lo_sum = 0.0;
    double hi_sum = 0.0;
    double tau_lo = kInf;
    double tau_hi = -kInf;
    for (int i : group.indices)
    {
        lo_sum += lower[i];
        hi_sum += upper[i];
        tau_lo = std::min(tau_lo, x[i] - upper[i]);
        tau_hi = std::max(tau_hi, x[i] - lower[i]);
    }
    const double slack = 1e-12 * (1.0 + std::abs(group.target));
    if (group.target < lo_sum - slack || group.target > hi_sum + slack)
        throw QpInfeasible("simplex group target outside the achievable range");
    if (!std::isfinite(tau_lo)) tau_lo = -1e12;
    if (!std::isfinite(tau_hi)) tau_hi = 1e12;

    auto sum_at = [&](double tau) {
        double s = 0.0;
        for (int i : group.indices) s += std::clamp(x[i] - tau, lower[i], upper[i]);
        return s;
    };
    // sum_at is non-increasing in tau.
    for (int it = 0; it < 200 && tau_hi - tau_lo > 1e-15 * (1.0 + std::abs(tau_lo)); ++it)
    {
        const double mid = 0.5 * (tau_lo + tau_hi);
        if (sum_at(mid) > group.target)
            tau_lo = mid;
        else
            tau_hi = mid;
    }
    const double tau_mid = 0.5 * (tau_lo + tau_hi);
    // Exact solve on the active set found by bisection.
    double fixed = 0.0;
    double free_sum = 0.0;
    int free_count = 0;
    for (int i : group.indices)
    {
        const double v = x[i] - tau_mid;
        if (v <= lower[i])
            fixed += lower[i];
        else if (v >= upper[i])
            fixed += upper[i];
        else
        {
            free_sum += x[i];
            ++free_count;
        }
    }
    const double tau = free_count > 0 ? (free_sum - (group.target - fixed)) / free_count : tau_mid;
    for (int i : group.indices) x[i] = std::clamp(x[i] - tau, lower[i], upper[i]);
}

inline Vector project_feasible(const QpProblem& qp, const Vector& warm)
{
    Vector x = warm.cwiseMax(qp.lower).cwiseMin(qp.upper);
    for (const auto& group : qp.groups) project_group(x, group, qp.lower, qp.upper);
    return x;
}

}  // namespace detail

namespace detail
{
inline QpSolution solve(const QpProblem& qp, const Vector& warm_start, const QpOptions& opt)
{
    const int n = static_cast<int>(qp.g.size());
    if (qp.H.rows() != n || qp.H.cols() != n || qp.lower.size() != n || qp.upper.size() != n)
        throw Error("boxqp: dimension mismatch");
    if ((qp.lower.array() > qp.upper.array()).any()) throw QpInfeasible("boxqp: lower > upper");

    std::vector<int> group_of(n, -1);
    for (std::size_t gi = 0; gi < qp.groups.size(); ++gi)
        for (int i : qp.groups[gi].indices)
        {
            if (i < 0 || i >= n || group_of[i] >= 0)
                throw Error("boxqp: simplex groups must be disjoint and in range");
            group_of[i] = static_cast<int>(gi);
        }

    QpSolution sol;
    Vector x = project_feasible(qp, warm_start.size() == n ? warm_start : Vector::Zero(n));
    sol.clamped.assign(n, false);
    std::vector<bool> previous_clamped;
    bool factorized = false;

    auto at_lower = [&](int i) { return x[i] <= qp.lower[i]; };
    auto at_upper = [&](int i) { return x[i] >= qp.upper[i]; };
    // Rounding in projections leaves entries a few ulps off their bound.
    auto snap = [&] {
        for (int i = 0; i < n; ++i)
        {
            const double eps = 1e-13 * (1.0 + std::abs(qp.lower[i]) + std::abs(qp.upper[i]));
            if (x[i] - qp.lower[i] < eps) x[i] = qp.lower[i];
            if (qp.upper[i] - x[i] < eps) x[i] = qp.upper[i];
        }
    };
    snap();
    double value = qp.objective(x);

    // Exact minimization along the projected-gradient segment; false when no
    // descent is available.
    auto gradient_projection_step = [&](const Vector& grad) {
        const double scale = 1.0 / std::max(qp.H.norm(), 1e-12);
        const Vector d = project_feasible(qp, x - scale * grad) - x;
        const double slope = grad.dot(d);
        if (!(slope < 0.0)) return false;
        const double curv = d.dot(qp.H * d);
        const double t = curv > 0.0 ? std::min(1.0, -slope / curv) : 1.0;
        const Vector next = (x + t * d).cwiseMax(qp.lower).cwiseMin(qp.upper);
        const double next_value = qp.objective(next);
        if (!(next_value < value)) return false;
        x = next;
        snap();
        value = qp.objective(x);
        return true;
    };
    for (int iter = 1; iter <= opt.max_iterations; ++iter)
    {
        sol.iterations = iter;
        const Vector grad = qp.g + qp.H * x;

        // Active set: on a bound with the gradient pushing outward.
        std::vector<bool> clamped(n, false);
        for (int i = 0; i < n; ++i)
        {
            if (qp.lower[i] == qp.upper[i])
            {
                clamped[i] = true;
                continue;
            }
            if (group_of[i] < 0)
            {
                clamped[i] = (at_lower(i) && grad[i] > 0.0) || (at_upper(i) && grad[i] < 0.0);
                continue;
            }
            const auto& members = qp.groups[group_of[i]].indices;
            if (members.size() == 1)
            {
                clamped[i] = true;
                continue;
            }
            // A group entry on a bound is clamped when no exchange of mass with
            // another member of the group lowers the objective to first order.
            bool can_move = false;
            if (at_lower(i))
            {
                for (int j : members)
                    if (j != i && x[j] > qp.lower[j] && grad[j] > grad[i]) can_move = true;
                clamped[i] = !can_move;
            }
            else if (at_upper(i))
            {
                for (int j : members)
                    if (j != i && x[j] < qp.upper[j] && grad[j] < grad[i]) can_move = true;
                clamped[i] = !can_move;
            }
        }

        Vector dir;
        for (int guard = 0; guard <= n; ++guard)
        {
            std::vector<int> free;
            for (int i = 0; i < n; ++i)
                if (!clamped[i]) free.push_back(i);
            sol.clamped = clamped;
            if (free.empty())
            {
                sol.delta = x;
                sol.status = QpStatus::kAllClamped;
                sol.factorize(qp, free, group_of);
                return sol;
            }
            if (!factorized || clamped != previous_clamped)
            {
                sol.factorize(qp, free, group_of);
                previous_clamped = clamped;
                factorized = true;
            }
            dir = sol.solve_free(-grad);
            // Mean-center within each group so the equality stays satisfied.
            for (const auto& group : qp.groups)
            {
                double sum = 0.0;
                int count = 0;
                for (int i : group.indices)
                    if (!clamped[i])
                    {
                        sum += dir[i];
                        ++count;
                    }
                if (count == 0) continue;
                const double mean = sum / count;
                for (int i : group.indices)
                    if (!clamped[i]) dir[i] -= mean;
            }
            // Free group entries sitting on a bound and moving outward would cap
            // the step at zero; they join the active set instead.
            bool changed = false;
            for (int i = 0; i < n; ++i)
            {
                if (clamped[i] || group_of[i] < 0) continue;
                if ((at_lower(i) && dir[i] < 0.0) || (at_upper(i) && dir[i] > 0.0))
                {
                    clamped[i] = true;
                    changed = true;
                }
            }
            if (!changed) break;
        }

        // Projected gradient on the free subspace.
        Vector pg = Vector::Zero(n);
        for (int i = 0; i < n; ++i)
            if (!clamped[i]) pg[i] = grad[i];
        for (const auto& group : qp.groups)
        {
            double sum = 0.0;
            int count = 0;
            for (int i : group.indices)
                if (!clamped[i])
                {
                    sum += pg[i];
                    ++count;
                }
            if (count == 0) continue;
            for (int i : group.indices)
                if (!clamped[i]) pg[i] = count == 1 ? 0.0 : pg[i] - sum / count;
        }
        // Stationarity over the whole feasible set: x == P(x - grad).
        const double kkt = (x - project_feasible(qp, x - grad)).norm();
        const double sdotg = grad.dot(dir);
        if (pg.norm() < opt.tolerance || !(sdotg < 0.0))
        {
            if (kkt < opt.tolerance)
            {
                sol.delta = x;
                sol.status = QpStatus::kConverged;
                return sol;
            }
            // The Newton step on the current free set cannot make progress
            // (a bound entry it would push outward should move inward).
            if (!gradient_projection_step(grad))
            {
                sol.delta = x;
                sol.status = QpStatus::kNoDescent;
                return sol;
            }
            continue;
        }

        // Largest step keeping every group entry inside its bounds.
        double step = 1.0;
        for (int i = 0; i < n; ++i)
        {
            if (clamped[i] || group_of[i] < 0) continue;
            if (dir[i] < 0.0) step = std::min(step, (x[i] - qp.lower[i]) / -dir[i]);
            if (dir[i] > 0.0) step = std::min(step, (qp.upper[i] - x[i]) / dir[i]);
        }

        bool accepted = false;
        Vector candidate;
        double candidate_value = value;
        while (step >= opt.min_step)
        {
            candidate = (x + step * dir).cwiseMax(qp.lower).cwiseMin(qp.upper);
            candidate_value = qp.objective(candidate);
            if ((candidate_value - value) / (step * sdotg) > opt.armijo)
            {
                accepted = true;
                break;
            }
            step *= opt.backtrack;
        }
        if (!accepted)
        {
            if (kkt < opt.tolerance || !gradient_projection_step(grad))
            {
                sol.delta = x;
                sol.status = kkt < opt.tolerance ? QpStatus::kConverged : QpStatus::kNoDescent;
                return sol;
            }
            continue;
        }
        x = candidate;
        snap();
        value = qp.objective(x);
    }
    sol.delta = x;
    sol.status = QpStatus::kMaxIterations;
    return sol;
}
}  // namespace detail

/// Box-constrained QP; the problem must not carry simplex groups.
inline QpSolution solve_box(const QpProblem& problem, const Vector& warm_start,
                            const QpOptions& options = {})
{
    if (!problem.groups.empty()) throw Error("solve_box: use solve_box_simplex for simplex groups");
    return detail::solve(problem, warm_start, options);
}

/// Box constraints plus one sum constraint per group.
inline QpSolution solve_box_simplex(const QpProblem& problem, const Vector& warm_start,
                                    const QpOptions& options = {})
{
    return detail::solve(problem, warm_start, options);
}

}  // namespace hddp::qp

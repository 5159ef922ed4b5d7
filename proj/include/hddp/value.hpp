#pragma once

#include "hddp/problem.hpp"

namespace hddp
{
/// Quadratic value model about a nominal state, plus the linear covariance
/// sensitivity V_sigma (column-wise stacking; zero for fully observed problems).
struct ValueExpansion
{
    double V = 0.0;
    Vector V_x;
    Matrix V_xx;
    Vector V_sigma;

    /// V + dx' V_x + 0.5 dx' V_xx dx
    double evaluate(const Vector& dx) const { return V + dx.dot(V_x) + 0.5 * dx.dot(V_xx * dx); }

    double evaluate(const Vector& dx, const Matrix& dsigma) const
    {
        double out = evaluate(dx);
        if (V_sigma.size() == dsigma.size())
            out += V_sigma.dot(Eigen::Map<const Vector>(dsigma.data(), dsigma.size()));
        return out;
    }
};

}  // namespace hddp

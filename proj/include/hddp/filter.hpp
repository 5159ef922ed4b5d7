#pragma once

// Gaussian beliefs and the extended Kalman filter used both for planning
// (zero innovation) and closed-loop execution (sampled observations).

#include <utility>

#include "hddp/problem.hpp"

namespace hddp
{
class FilterFailure : public Error
{
   public:
    using Error::Error;
};

struct GaussianBelief
{
    Vector mean;
    Matrix covariance;
};

/// Symmetrizes and floors negative eigenvalues at zero.
inline Matrix repair_covariance(const Matrix& cov)
{
    Matrix sym = 0.5 * (cov + cov.transpose());
    if (sym.size() == 0) return sym;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
    if (eig.eigenvalues().minCoeff() >= 0.0) return sym;
    Matrix out = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).asDiagonal() *
                 eig.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

/// Column-wise stacking of a square matrix.
inline Vector vectorize(const Matrix& m)
{
    return Eigen::Map<const Vector>(m.data(), m.size());
}

inline Matrix unvectorize(const Vector& v, int n)
{
    return Eigen::Map<const Matrix>(v.data(), n, n);
}

inline Matrix observation_jacobian(const ObservationSpec& obs, const Vector& x, double step)
{
    if (obs.jacobian) return obs.jacobian(x);
    return finite_diff_jacobian(obs.h, x, step, StepScaling::kRelative);
}

/// One EKF step together with the quantities the belief backward pass reuses.
struct EkfStep
{
    GaussianBelief belief;
    Matrix gain;        // Kalman gain
    Matrix transition;  // (I - K H) A: sensitivity of the posterior to the prior covariance
};

/// Predict with the mean dynamics and update with the observation model. With
/// no observation the innovation is zero (maximum-likelihood observation),
/// which is the planning-time convention.
inline EkfStep ekf_step(const Problem& problem, const ObservationSpec& obs,
                        const GaussianBelief& belief, const Vector& u, int action,
                        const Vector* observation = nullptr, bool repair = true)
{
    const Matrix fx = state_jacobian(problem, belief.mean, u, action);
    const Vector predicted = problem.dynamics.f(belief.mean, u, action);
    Matrix prior = fx * belief.covariance * fx.transpose() +
                   process_noise(problem, belief.mean, u, action);
    prior = 0.5 * (prior + prior.transpose()).eval();

    const Matrix H = observation_jacobian(obs, predicted, problem.derivatives.jacobian_step);
    const Matrix N = obs.noise(predicted);
    const Matrix S = H * prior * H.transpose() + N;
    Eigen::LLT<Matrix> llt(0.5 * (S + S.transpose()));
    if (llt.info() != Eigen::Success) throw FilterFailure("innovation covariance is singular");
    const Matrix gain = llt.solve(H * prior).transpose();  // prior H' S^-1

    const Eigen::Index n = predicted.size();
    const Matrix ikh = Matrix::Identity(n, n) - gain * H;
    // Joseph form keeps the posterior positive semidefinite in floating point.
    Matrix posterior = ikh * prior * ikh.transpose() + gain * N * gain.transpose();

    EkfStep out;
    out.gain = gain;
    out.transition = ikh * fx;
    out.belief.mean = predicted;
    if (observation != nullptr) out.belief.mean += gain * (*observation - obs.h(predicted));
    out.belief.covariance =
        repair ? repair_covariance(posterior) : Matrix(0.5 * (posterior + posterior.transpose()));
    if (!out.belief.mean.allFinite() || !out.belief.covariance.allFinite())
        throw FilterFailure("non-finite belief after EKF update");
    return out;
}

}  // namespace hddp

#pragma once

#include <algorithm>

#include "wncs/control_core.hpp"

namespace wncs {

// Smallest eigenvalue raised to `floor`; input is symmetrized first.
inline Matrix clamp_min_eigenvalue(const Matrix& M, double floor) {
  if (M.size() == 0) return M;
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(M));
  if (es.eigenvalues().minCoeff() >= floor) return symmetrized(M);
  const Vector lambda = es.eigenvalues().cwiseMax(floor);
  return symmetrized(es.eigenvectors() * lambda.asDiagonal() * es.eigenvectors().transpose());
}

struct NoiseModel {
  Matrix W;   // process noise covariance, n x n
  Matrix V;   // measurement noise covariance, p x p
  Matrix X0;  // initial state covariance, n x n

  static constexpr double kMinMeasurementEigenvalue = 1e-12;

  // V is kept strictly positive definite so the innovation covariance is always invertible.
  static NoiseModel make(Matrix W, Matrix V, Matrix X0) {
    return {symmetrized(W), clamp_min_eigenvalue(V, kMinMeasurementEigenvalue), symmetrized(X0)};
  }

  void validate(const SystemMatrices& sys) const {
    detail::require(W.rows() == sys.states() && W.cols() == sys.states(), "W must be n x n");
    detail::require(X0.rows() == sys.states() && X0.cols() == sys.states(), "X0 must be n x n");
    detail::require(V.rows() == sys.outputs() && V.cols() == sys.outputs(), "V must be p x p");
  }
};

struct FilterState {
  Vector xhat;
  Matrix E;
};

struct Prediction {
  Vector xbar;
  Matrix Ebar;
};

inline Prediction predict(const FilterState& fs, const SystemMatrices& sys, const Vector& u, const Matrix& W) {
  detail::require(fs.xhat.size() == sys.states() && u.size() == sys.inputs(), "predict: dimension mismatch");
  return {sys.A * fs.xhat + sys.B * u, symmetrized(sys.A * fs.E * sys.A.transpose() + W)};
}

// L = Ebar C^T (V + C Ebar C^T)^{-1}
inline Matrix kalman_gain(const Matrix& Ebar, const Matrix& C, const Matrix& V) {
  const Matrix innovation = symmetrized(V + C * Ebar * C.transpose());
  Eigen::LLT<Matrix> llt(innovation);
  if (llt.info() != Eigen::Success) throw SingularInnovation("innovation covariance is not positive definite");
  // L^T = S^{-1} C Ebar since S and Ebar are symmetric.
  return llt.solve(C * Ebar).transpose();
}

// `received` is the schedule bit AND the realized channel outcome.
inline FilterState update_realized(const Prediction& pred, const Vector& y, bool received, const Matrix& C,
                                   const Matrix& V) {
  if (!received) return {pred.xbar, pred.Ebar};
  const Matrix L = kalman_gain(pred.Ebar, C, V);
  const auto n = pred.Ebar.rows();
  FilterState out;
  out.xhat = pred.xbar + L * (y - C * pred.xbar);
  out.E = symmetrized((Matrix::Identity(n, n) - L * C) * pred.Ebar);
  return out;
}

// Expected covariance step: Ebar = A E A^T + W, then (I - delta*sigma*L*C) Ebar.
// delta may be fractional in relaxed planning; the update stays affine in delta for fixed Ebar.
inline Matrix expected_cov_step(const Matrix& E, double delta, double sigma, const SystemMatrices& sys,
                                const NoiseModel& noise) {
  const Matrix Ebar = symmetrized(sys.A * E * sys.A.transpose() + noise.W);
  const double weight = delta * sigma;
  if (weight == 0.0) return Ebar;
  const Matrix L = kalman_gain(Ebar, sys.C, noise.V);
  const auto n = Ebar.rows();
  return symmetrized((Matrix::Identity(n, n) - weight * L * sys.C) * Ebar);
}

}  // namespace wncs

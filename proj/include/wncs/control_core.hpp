#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "wncs/errors.hpp"

namespace wncs {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Largest absolute coefficient.
inline double max_abs(const Matrix& m) { return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff(); }

inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionMismatch(what);
}

}  // namespace detail

struct SystemMatrices {
  Matrix A;  // n x n
  Matrix B;  // n x m
  Matrix C;  // p x n

  Eigen::Index states() const { return A.rows(); }
  Eigen::Index inputs() const { return B.cols(); }
  Eigen::Index outputs() const { return C.rows(); }

  void validate() const {
    detail::require(A.rows() == A.cols(), "A must be square");
    detail::require(B.rows() == A.rows(), "B rows must equal state dimension");
    detail::require(C.cols() == A.rows(), "C cols must equal state dimension");
  }

  Matrix closed_loop(const Matrix& K) const {
    detail::require(K.rows() == B.cols() && K.cols() == A.rows(), "K must be m x n");
    return A - B * K;
  }
};

// Stage cost weights of l(x,u) = [x;u]^T [[Q,S^T],[S,R]] [x;u].
struct LqrWeights {
  Matrix Q;  // n x n
  Matrix R;  // m x m
  Matrix S;  // m x n

  LqrWeights scaled(double factor) const { return {factor * Q, factor * R, factor * S}; }

  void validate(Eigen::Index n, Eigen::Index m) const {
    detail::require(Q.rows() == n && Q.cols() == n, "Q must be n x n");
    detail::require(R.rows() == m && R.cols() == m, "R must be m x m");
    detail::require(S.rows() == m && S.cols() == n, "S must be m x n");
  }
};

struct ControllerDesign {
  Matrix K;
  Matrix P;
  Matrix Gamma;
  LqrWeights weights;
};

struct ControlTolerances {
  double lyapunov_residual = 1e-10;
  double dare_step = 1e-12;
  long dare_max_iterations = 100000;
  int lyapunov_max_doublings = 200;
};

inline double spectral_radius(const Matrix& A) {
  detail::require(A.rows() == A.cols(), "spectral_radius needs a square matrix");
  if (A.size() == 0) return 0.0;
  if (!A.allFinite()) throw NonConvergent("spectral_radius: non-finite matrix");
  Eigen::EigenSolver<Matrix> solver(A, false);
  if (solver.info() != Eigen::Success) throw NonConvergent("spectral_radius: eigenvalue iteration failed");
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

// ||A_K^T P A_K - P + Q||
inline double lyapunov_residual(const Matrix& A_K, const Matrix& Q, const Matrix& P) {
  return max_abs(A_K.transpose() * P * A_K - P + Q);
}

// Solves A_K^T P A_K - P + Q = 0 by squared (doubling) fixed-point iteration
// P <- P + F^T P F, F <- F^2, followed by plain sweeps to polish the residual.
namespace detail {

// Smith doubling for X = A^T X A + Q.
inline Matrix lyapunov_doubling(const Matrix& A_K, const Matrix& Q, const ControlTolerances& tol) {
  Matrix P = symmetrized(Q);
  Matrix F = A_K;
  int it = 0;
  for (; it < tol.lyapunov_max_doublings; ++it) {
    P = symmetrized(P + F.transpose() * P * F);
    F = F * F;
    if (!P.allFinite() || !F.allFinite()) throw NonConvergent("solve_discrete_lyapunov: iteration diverged");
    if (max_abs(F) < 1e-10) break;
  }
  if (it == tol.lyapunov_max_doublings) throw NonConvergent("solve_discrete_lyapunov: budget exhausted");
  return P;
}

}  // namespace detail

inline Matrix solve_discrete_lyapunov(const Matrix& A_K, const Matrix& Q,
                                      const ControlTolerances& tol = {}) {
  detail::require(A_K.rows() == A_K.cols(), "A_K must be square");
  detail::require(Q.rows() == A_K.rows() && Q.cols() == A_K.cols(), "Q must match A_K");

  const Matrix Qs = symmetrized(Q);
  Matrix P = detail::lyapunov_doubling(A_K, Qs, tol);
  // iterative refinement: the correction solves the same equation driven by the residual
  double r = lyapunov_residual(A_K, Qs, P);
  for (int round = 0; round < 4 && r > tol.lyapunov_residual; ++round) {
    const Matrix R = symmetrized(A_K.transpose() * P * A_K - P + Qs);
    const Matrix next = symmetrized(P + detail::lyapunov_doubling(A_K, R, tol));
    const double rn = lyapunov_residual(A_K, Qs, next);
    if (!(rn < r)) break;
    P = next;
    r = rn;
  }
  if (r > tol.lyapunov_residual * std::max(1.0, max_abs(P))) {
    throw NonConvergent("solve_discrete_lyapunov: residual above tolerance");
  }
  return P;
}

// K = (R + B^T P B)^{-1} (S + B^T P A); Cholesky failure means the Hessian is indefinite.
inline Matrix riccati_gain(const SystemMatrices& sys, const LqrWeights& w, const Matrix& P) {
  const Matrix H = symmetrized(w.R + sys.B.transpose() * P * sys.B);
  Eigen::LLT<Matrix> llt(H);
  if (llt.info() != Eigen::Success) throw NonConvergent("R + B^T P B is not positive definite");
  return llt.solve(w.S + sys.B.transpose() * P * sys.A);
}

struct DareResidual {
  double value_equation;  // ||Q - P + A^T P A - (S^T + A^T P B) K||
  double gain_equation;   // ||(R + B^T P B) K - (S + B^T P A)||
};

inline DareResidual dare_residual(const SystemMatrices& sys, const LqrWeights& w, const Matrix& P,
                                  const Matrix& K) {
  const Matrix& A = sys.A;
  const Matrix& B = sys.B;
  const Matrix cross = w.S.transpose() + A.transpose() * P * B;
  return {max_abs(w.Q - P + A.transpose() * P * A - cross * K),
          max_abs((w.R + B.transpose() * P * B) * K - (w.S + B.transpose() * P * A))};
}

struct DareSolution {
  Matrix P;
  Matrix K;
  long iterations = 0;
};

// Riccati recursion from P = Q, symmetrized every step.
inline DareSolution solve_dare(const SystemMatrices& sys, const LqrWeights& w, const ControlTolerances& tol = {}) {
  sys.validate();
  w.validate(sys.states(), sys.inputs());
  const Matrix& A = sys.A;
  const Matrix& B = sys.B;

  Matrix P = symmetrized(w.Q);
  long it = 0;
  double best = std::numeric_limits<double>::infinity();
  long stalled = 0;
  for (; it < tol.dare_max_iterations; ++it) {
    const Matrix K = riccati_gain(sys, w, P);
    const Matrix next =
        symmetrized(w.Q + A.transpose() * P * A - (w.S.transpose() + A.transpose() * P * B) * K);
    if (!next.allFinite()) throw NonConvergent("solve_dare: iteration diverged");
    const double step = max_abs(next - P);
    P = next;
    // the step is the value-equation residual, so large P needs a tighter relative target
    const double scale = max_abs(P);
    const double target = std::min(tol.dare_step * std::max(1.0, scale),
                                   std::max(tol.dare_step * 10.0, 32.0 * std::numeric_limits<double>::epsilon() * scale));
    if (step < target) break;
    if (step < best) {
      best = step;
      stalled = 0;
    } else if (step < 1e3 * target && ++stalled > 50) {
      break;  // rounding floor
    }
  }
  if (it == tol.dare_max_iterations) throw NonConvergent("solve_dare: iteration budget exhausted");

  Matrix K = riccati_gain(sys, w, P);
  if (spectral_radius(sys.closed_loop(K)) >= 1.0) throw NotStabilizing("solve_dare: converged P is not stabilizing");
  return {std::move(P), std::move(K), it + 1};
}

// Any stabilizing K is the LQR optimum for R = I, S = K, Q = K^T K (with P = 0).
inline LqrWeights lqr_from_gain(const SystemMatrices& sys, const Matrix& K) {
  sys.validate();
  if (spectral_radius(sys.closed_loop(K)) >= 1.0) throw NotStabilizing("lqr_from_gain: gain is not stabilizing");
  const auto m = K.rows();
  return {K.transpose() * K, Matrix::Identity(m, m), K};
}

// Gamma = K^T (R + B^T P B) K prices the expected one-step Lyapunov increase per unit error covariance.
inline Matrix gamma_matrix(const Matrix& K, const Matrix& R, const Matrix& B, const Matrix& P) {
  detail::require(R.rows() == K.rows() && R.cols() == K.rows(), "R must be m x m");
  detail::require(B.cols() == K.rows() && B.rows() == K.cols(), "B must be n x m");
  detail::require(P.rows() == B.rows() && P.cols() == B.rows(), "P must be n x n");
  return symmetrized(K.transpose() * (R + B.transpose() * P * B) * K);
}

inline double stage_cost(const Vector& x, const Vector& u, const LqrWeights& w) {
  detail::require(x.size() == w.Q.rows() && u.size() == w.R.rows(), "stage_cost: dimension mismatch");
  return x.dot(w.Q * x) + 2.0 * u.dot(w.S * x) + u.dot(w.R * u);
}

inline ControllerDesign design_lqr(const SystemMatrices& sys, const LqrWeights& w, const ControlTolerances& tol = {}) {
  auto sol = solve_dare(sys, w, tol);
  Matrix Gamma = gamma_matrix(sol.K, w.R, sys.B, sol.P);
  return {std::move(sol.K), std::move(sol.P), std::move(Gamma), w};
}

// Lyapunov route: the weights come from lqr_from_gain, P from A_K^T P A_K - P + Q = 0.
inline ControllerDesign design_from_gain(const SystemMatrices& sys, const Matrix& K, const Matrix& Q,
                                         const ControlTolerances& tol = {}) {
  LqrWeights w = lqr_from_gain(sys, K);
  Matrix P = solve_discrete_lyapunov(sys.closed_loop(K), Q, tol);
  Matrix Gamma = gamma_matrix(K, w.R, sys.B, P);
  return {K, std::move(P), std::move(Gamma), std::move(w)};
}

// Weight Q_eff with A_K^T P A_K - P + Q_eff = 0 for the design's own P.
inline Matrix lyapunov_weight(const SystemMatrices& sys, const ControllerDesign& d) {
  const Matrix A_K = sys.closed_loop(d.K);
  return symmetrized(d.P - A_K.transpose() * d.P * A_K);
}

// One-step cost difference between acting on x_hat = x - e and acting on x, noise-free:
// l(x, -K x_hat) - l(x, -K x) + V(x+^u) - V(x+^ubar). Its mean over e ~ (0, E) is tr(Gamma E).
inline double lyapunov_increase(const SystemMatrices& sys, const ControllerDesign& d, const Vector& x,
                                const Vector& e) {
  const Vector u_nominal = -d.K * x;
  const Vector u = u_nominal + d.K * e;
  const Vector next_nominal = sys.A * x + sys.B * u_nominal;
  const Vector next = next_nominal + sys.B * d.K * e;
  return stage_cost(x, u, d.weights) - stage_cost(x, u_nominal, d.weights) + next.dot(d.P * next) -
         next_nominal.dot(d.P * next_nominal);
}

}  // namespace wncs

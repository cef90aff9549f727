#include <random>

#include <gtest/gtest.h>

#include "generators.hpp"
#include "wncs/estimation.hpp"
#include "wncs/scenarios.hpp"

using namespace wncs;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

SystemMatrices scalar_plant(double a) { return {scalar(a), scalar(1.0), scalar(1.0)}; }

NoiseModel scalar_noise(double w, double v) { return {scalar(w), scalar(v), scalar(0.0)}; }

}  // namespace

TEST(Predict, Examples) {
  const SystemMatrices eye{Matrix::Identity(2, 2), Matrix::Zero(2, 1), Matrix::Identity(2, 2)};
  auto p = predict({Vector::Zero(2), Matrix::Zero(2, 2)}, eye, Vector::Zero(1), Matrix::Identity(2, 2));
  EXPECT_EQ(p.Ebar, Matrix::Identity(2, 2));
  EXPECT_EQ(p.xbar, Vector::Zero(2));

  p = predict({Vector::Zero(1), scalar(1.0)}, scalar_plant(2.0), Vector::Zero(1), scalar(1.0));
  EXPECT_EQ(p.Ebar(0, 0), 5.0);
}

TEST(KalmanGain, Examples) {
  EXPECT_EQ(kalman_gain(scalar(0.0), scalar(1.0), scalar(1.0))(0, 0), 0.0);
  EXPECT_EQ(kalman_gain(scalar(1.0), scalar(1.0), scalar(0.0))(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(kalman_gain(scalar(1.0), scalar(1.0), scalar(1.0))(0, 0), 0.5);
}

TEST(KalmanGain, SingularInnovationThrows) {
  EXPECT_THROW(kalman_gain(scalar(0.0), scalar(1.0), scalar(0.0)), SingularInnovation);
}

TEST(UpdateRealized, NotReceivedPassesThrough) {
  const Prediction pred{Vector::Constant(1, 3.0), scalar(2.0)};
  const auto fs = update_realized(pred, Vector::Constant(1, 7.0), false, scalar(1.0), scalar(1.0));
  EXPECT_EQ(fs.xhat, pred.xbar);
  EXPECT_EQ(fs.E, pred.Ebar);
}

TEST(UpdateRealized, ExactObservation) {
  const auto fs = update_realized({Vector::Zero(1), scalar(1.0)}, Vector::Constant(1, 4.0), true, scalar(1.0), scalar(0.0));
  EXPECT_EQ(fs.E(0, 0), 0.0);
  EXPECT_EQ(fs.xhat(0), 4.0);
}

TEST(UpdateRealized, NoisyObservation) {
  const auto fs = update_realized({Vector::Zero(1), scalar(1.0)}, Vector::Constant(1, 2.0), true, scalar(1.0), scalar(1.0));
  EXPECT_DOUBLE_EQ(fs.xhat(0), 1.0);
  EXPECT_DOUBLE_EQ(fs.E(0, 0), 0.5);
}

TEST(ExpectedCovStep, NoGrantIsPurePrediction) {
  std::mt19937_64 g(21);
  const auto sys = double_integrator();
  const auto noise = NoiseModel::make(gen::psd(g, 2, 0.01, 0.1), gen::psd(g, 2, 0.01, 0.1), Matrix::Zero(2, 2));
  const Matrix E = gen::psd(g, 2);
  EXPECT_LE(max_abs(expected_cov_step(E, 0.0, 0.7, sys, noise) - (sys.A * E * sys.A.transpose() + noise.W)), 1e-15);
}

TEST(ExpectedCovStep, ScalarExamples) {
  const auto sys = scalar_plant(1.0);
  const auto noise = scalar_noise(1.0, 0.0);
  EXPECT_EQ(expected_cov_step(scalar(0.0), 1.0, 1.0, sys, noise)(0, 0), 0.0);
  EXPECT_EQ(expected_cov_step(scalar(0.0), 1.0, 0.5, sys, noise)(0, 0), 0.5);
}

TEST(ExpectedCovStep, VIsClampedOnIngestion) {
  const auto noise = NoiseModel::make(scalar(1.0), scalar(0.0), scalar(0.0));
  EXPECT_GE(noise.V(0, 0), 1e-12);
  EXPECT_NEAR(expected_cov_step(scalar(0.0), 1.0, 1.0, scalar_plant(1.0), noise)(0, 0), 0.0, 1e-11);
}

TEST(ExpectedCovStep, TraceMonotoneInDelta) {
  std::mt19937_64 g(22);
  for (int t = 0; t < 1000; ++t) {
    const auto n = gen::integer(g, 1, 4);
    const SystemMatrices sys{gen::gaussian(g, n, n), Matrix::Zero(n, 1), gen::gaussian(g, gen::integer(g, 1, 3), n)};
    const auto noise = NoiseModel::make(gen::psd(g, n, 0.0, 1.0), gen::psd(g, sys.outputs(), 0.01, 1.0), Matrix::Zero(n, n));
    const Matrix E = gen::psd(g, n, 0.0, 2.0);
    const double sigma = gen::uniform(g, 0.0, 1.0);
    const double with = expected_cov_step(E, 1.0, sigma, sys, noise).trace();
    const double without = expected_cov_step(E, 0.0, sigma, sys, noise).trace();
    EXPECT_LE(with, without + 1e-12 * std::max(1.0, without));
  }
}

TEST(ExpectedCovStep, AffineInDelta) {
  std::mt19937_64 g(23);
  for (int t = 0; t < 500; ++t) {
    const auto n = gen::integer(g, 1, 4);
    const SystemMatrices sys{gen::gaussian(g, n, n), Matrix::Zero(n, 1), Matrix::Identity(n, n)};
    const auto noise = NoiseModel::make(gen::psd(g, n, 0.0, 1.0), gen::psd(g, n, 0.01, 1.0), Matrix::Zero(n, n));
    const Matrix E = gen::psd(g, n);
    const double sigma = gen::uniform(g, 0.0, 1.0);
    const double d = gen::uniform(g, 0.0, 1.0);
    const Matrix mixed = d * expected_cov_step(E, 1.0, sigma, sys, noise) + (1.0 - d) * expected_cov_step(E, 0.0, sigma, sys, noise);
    const Matrix direct = expected_cov_step(E, d, sigma, sys, noise);
    EXPECT_LE(max_abs(direct - mixed), 1e-12 * std::max(1.0, max_abs(direct)));
  }
}

TEST(ExpectedCovStep, StaysSymmetricPsdOverLongRandomWalks) {
  std::mt19937_64 g(24);
  const auto n = 3;
  const SystemMatrices sys{gen::stable(g, n, 1.1), Matrix::Zero(n, 1), gen::gaussian(g, 2, n)};
  const auto noise = NoiseModel::make(gen::psd(g, n, 0.01, 0.2), gen::psd(g, 2, 0.01, 0.2), Matrix::Zero(n, n));
  Matrix E = gen::psd(g, n);
  for (int k = 0; k < 10000; ++k) {
    E = expected_cov_step(E, gen::integer(g, 0, 1), gen::uniform(g, 0.0, 1.0), sys, noise);
    ASSERT_LE(max_abs(E - E.transpose()), 1e-10);
    ASSERT_GE(Eigen::SelfAdjointEigenSolver<Matrix>(E).eigenvalues().minCoeff(), -1e-10 * std::max(1.0, max_abs(E)));
  }
}

TEST(ExpectedCovStep, MatchesRealizedPathWhenEveryPacketArrives) {
  std::mt19937_64 g(25);
  const auto sys = double_integrator();
  const auto noise = NoiseModel::make(0.01 * Matrix::Identity(2, 2), 0.001 * Matrix::Identity(2, 2), 0.1 * Matrix::Identity(2, 2));
  Matrix E_planned = noise.X0;
  FilterState fs{Vector::Zero(2), noise.X0};
  for (int k = 0; k < 200; ++k) {
    E_planned = expected_cov_step(E_planned, 1.0, 1.0, sys, noise);
    const auto pred = predict(fs, sys, Vector::Zero(1), noise.W);
    fs = update_realized(pred, gen::gaussian(g, 2, 1), true, sys.C, noise.V);
    ASSERT_TRUE((E_planned.array() == fs.E.array()).all()) << "step " << k;
  }
}

TEST(ExpectedCovStep, ConvergesToRiccatiSteadyState) {
  const auto sys = double_integrator();
  const auto noise = NoiseModel::make(0.01 * Matrix::Identity(2, 2), 0.001 * Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  Matrix E = noise.X0;
  double step = 1.0;
  for (int k = 0; k < 5000 && step > 1e-9; ++k) {
    const Matrix next = expected_cov_step(E, 1.0, 1.0, sys, noise);
    step = max_abs(next - E);
    E = next;
  }
  EXPECT_LE(step, 1e-9);
}

#include <cstdlib>
#include <random>

#include <gtest/gtest.h>

#include "generators.hpp"
#include "wncs/scenarios.hpp"
#include "wncs/simulator.hpp"

using namespace wncs;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

Scenario short_identical4(Strategy s, int steps, int runs) {
  Scenario sc = identical4();
  sc.strategy = s;
  sc.steps = steps;
  sc.runs = runs;
  return sc;
}

Scenario noiseless(int agents, double x0_var) {
  Scenario sc;
  sc.name = "noiseless";
  for (int i = 0; i < agents; ++i) sc.agents.push_back(make_agent(double_integrator(), default_weights(), 0.0, 0.0, x0_var));
  sc.capacity = agents;
  sc.horizon = 2;
  sc.steps = 40;
  sc.runs = 3;
  sc.sigma = SigmaModel::constant_for(std::vector<double>(agents, 1.0));
  sc.strategy = Strategy::Baseline;
  return sc;
}

struct ScopedWorkers {
  explicit ScopedWorkers(const char* n) { setenv("WNCS_WORKERS", n, 1); }
  ~ScopedWorkers() { unsetenv("WNCS_WORKERS"); }
};

bool same_trace(const SimTrace& a, const SimTrace& b) {
  if (a.agents != b.agents || a.steps != b.steps) return false;
  for (std::size_t r = 0; r < a.records.size(); ++r) {
    const auto& x = a.records[r];
    const auto& y = b.records[r];
    if (x.x != y.x || x.xhat != y.xhat || x.u != y.u || x.E != y.E || x.delta != y.delta || x.s != y.s ||
        x.stage_cost != y.stage_cost || x.tr_gamma_E != y.tr_gamma_E || x.tr_P_X != y.tr_P_X) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(ClosedLoop, NoiselessSystemStaysAtRest) {
  const auto t = run_closed_loop(noiseless(2, 0.0), 0);
  for (const auto& r : t.records) {
    EXPECT_EQ(r.x, r.xhat);
    EXPECT_EQ(r.stage_cost, 0.0);
    EXPECT_LE(r.tr_gamma_E, 1e-10);
  }
}

TEST(ClosedLoop, NoiselessPerfectLinkDecaysLikeTheLyapunovDesign) {
  const Scenario sc = noiseless(1, 1.0);
  const auto t = run_closed_loop(sc, 0);
  const auto& d = sc.agents[0].design;
  const Matrix Qeff = lyapunov_weight(sc.agents[0].sys, d);
  for (int k = 1; k + 1 < t.steps; ++k) {
    const Vector& x = t.at(k, 0).x;
    const Vector& next = t.at(k + 1, 0).x;
    const double dV = next.dot(d.P * next) - x.dot(d.P * x);
    // V is floored at 1e-12, so measurements carry noise of order 1e-6
    EXPECT_LE(dV, -x.dot(Qeff * x) + 1e-4 * std::max(1.0, x.dot(d.P * x))) << "step " << k;
    EXPECT_LE((t.at(k, 0).x - t.at(k, 0).xhat).norm(), 1e-5);
  }
  EXPECT_LT(t.at(t.steps - 1, 0).stage_cost, t.at(1, 0).stage_cost);
}

TEST(ClosedLoop, IdenticalAgentsSettleIntoRoundRobin) {
  const auto t = run_closed_loop(short_identical4(Strategy::Exhaustive, 30, 1), 0);
  auto served = [&](int k) {
    for (int i = 0; i < 4; ++i) {
      if (t.at(k, i).delta) return i;
    }
    return -1;
  };
  for (int k = 10; k + 4 < t.steps; ++k) EXPECT_EQ(served(k), served(k + 4)) << "step " << k;
  for (int k = 10; k < 14; ++k) {
    for (int j = k + 1; j < 14; ++j) EXPECT_NE(served(k), served(j));
  }
}

TEST(ClosedLoop, BaselineAlternatesOnLossyChannel) {
  Scenario sc = lossy2(kSevereFloor);
  sc.strategy = Strategy::Baseline;
  sc.steps = 30;
  const auto t = run_closed_loop(sc, 3);
  for (int k = 1; k < t.steps; ++k) {
    EXPECT_EQ(t.at(k, 0).delta + t.at(k, 1).delta, 1);
    if (k > 1) EXPECT_NE(t.at(k, 0).delta, t.at(k - 1, 0).delta);
  }
}

TEST(ClosedLoop, SuccessRequiresAGrantAndCapacityHolds) {
  Scenario sc = lossy2(kModerateFloor);
  sc.steps = 25;
  sc.horizon = 3;
  for (std::uint64_t run = 0; run < 3; ++run) {
    const auto t = run_closed_loop(sc, run);
    for (int k = 0; k < t.steps; ++k) {
      int used = 0;
      for (int i = 0; i < t.agents; ++i) {
        used += t.at(k, i).delta;
        if (t.at(k, i).delta == 0) EXPECT_EQ(t.at(k, i).s, 0);
      }
      EXPECT_LE(used, sc.capacity);
    }
  }
}

TEST(ClosedLoop, DeterministicForSameSeed) {
  const Scenario sc = short_identical4(Strategy::Greedy, 30, 1);
  EXPECT_TRUE(same_trace(run_closed_loop(sc, 5), run_closed_loop(sc, 5)));
  EXPECT_FALSE(same_trace(run_closed_loop(sc, 5), run_closed_loop(sc, 6)));
}

TEST(ClosedLoop, AddingAnAgentLeavesOtherDrawsAlone) {
  Scenario two = noiseless(2, 0.1);
  Scenario three = noiseless(3, 0.1);
  for (auto* sc : {&two, &three}) {
    for (auto& a : sc->agents) a.noise = NoiseModel::make(1e-2 * Matrix::Identity(2, 2), 1e-3 * Matrix::Identity(2, 2), a.noise.X0);
  }
  const auto a = run_closed_loop(two, 0);
  const auto b = run_closed_loop(three, 0);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(closed_loop_cost_of_agent(a, i), closed_loop_cost_of_agent(b, i));
  double sum = 0.0;
  for (int i = 0; i < 3; ++i) sum += closed_loop_cost_of_agent(b, i);
  EXPECT_NEAR(closed_loop_cost(b).J, sum, 1e-12 * sum);
}

TEST(ClosedLoop, InvalidScenarioRejected) {
  Scenario sc = identical4();
  sc.steps = sc.horizon;
  EXPECT_THROW(run_closed_loop(sc, 0), ValidationError);
}

TEST(Cost, Examples) {
  SimTrace empty{1, 2, std::vector<AgentStep>(2)};
  EXPECT_EQ(closed_loop_cost(empty).J, 0.0);

  SimTrace t{1, 2, std::vector<AgentStep>(2)};
  const LqrWeights w{scalar(1), scalar(1), scalar(0)};
  t.at(0, 0).stage_cost = stage_cost(Vector::Constant(1, 1.0), Vector::Zero(1), w);
  t.at(1, 0).stage_cost = stage_cost(Vector::Constant(1, 2.0), Vector::Zero(1), w);
  EXPECT_EQ(closed_loop_cost(t).J, 2.5);
}

TEST(MonteCarlo, SingleRunEqualsTraceSummary) {
  Scenario sc = short_identical4(Strategy::Baseline, 20, 1);
  const auto st = monte_carlo(sc);
  const auto s = summarize(run_closed_loop(sc, 0));
  EXPECT_EQ(st.J_mean, s.cost.J);
  EXPECT_EQ(st.J_stderr, 0.0);
  EXPECT_EQ(st.trace_cost_mean, s.cost.trace_cost);
}

TEST(MonteCarlo, IndependentOfWorkerCount) {
  Scenario sc = short_identical4(Strategy::Greedy, 20, 8);
  MCStats one, four;
  {
    ScopedWorkers w("1");
    one = monte_carlo(sc);
  }
  {
    ScopedWorkers w("4");
    four = monte_carlo(sc);
  }
  EXPECT_EQ(one.J_runs, four.J_runs);
  EXPECT_EQ(one.J_mean, four.J_mean);
  EXPECT_EQ(one.grants_mean, four.grants_mean);
}

TEST(MonteCarlo, StandardErrorShrinksLikeOneOverRootRuns) {
  // Quadrupling the run count halves the standard error on average.
  double small = 0.0, large = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    Scenario sc = short_identical4(Strategy::Baseline, 40, 8);
    sc.seed = 1000 + rep;
    small += monte_carlo(sc).J_stderr;
    sc.runs = 32;
    sc.seed = 5000 + rep;
    large += monte_carlo(sc).J_stderr;
  }
  EXPECT_NEAR(large / small, 0.5, 0.5 * 0.3);
}

TEST(MonteCarlo, BaselineNormalizesToOne) {
  const auto st = monte_carlo(short_identical4(Strategy::Baseline, 20, 3));
  EXPECT_EQ(normalized_to_baseline(st.J_mean, st.J_mean), 1.0);
  const auto js = scaled_around_minimum({3.0, 1.5, 6.0});
  EXPECT_EQ(js, (std::vector<double>{2.0, 1.0, 4.0}));
}

TEST(Sigma, DistanceModelRange) {
  const auto unit = SigmaModel::distance(std::exp(-1.0));
  for (long k = 0; k < 200; ++k) {
    for (int i = 0; i < 2; ++i) {
      const double d = SigmaModel::distance_at(i, k);
      EXPECT_NEAR(unit(i, k), std::exp(-d * d), 1e-15);
    }
  }
  const auto severe = SigmaModel::distance(0.1);
  double lo = 1.0, hi = 0.0;
  for (long k = 0; k < 200; ++k) {
    lo = std::min(lo, severe(0, k));
    hi = std::max(hi, severe(0, k));
  }
  EXPECT_GE(lo, 0.1 - 1e-12);
  EXPECT_LT(lo, 0.11);
  EXPECT_GT(hi, 0.99);
  // the two agents are in antiphase: when one link is good the other is poor
  EXPECT_NEAR(SigmaModel::distance_at(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(std::abs(SigmaModel::distance_at(1, 0)), 1.0, 1e-15);
}

TEST(DeltaV, MeanIncreaseIsTraceGammaE) {
  const auto sys = double_integrator();
  const auto d = design_lqr(sys, default_weights());
  std::mt19937_64 g(51);
  const Matrix E = gen::psd(g, 2, 0.01, 0.1);
  const Matrix Es = covariance_sqrt(E);
  const Vector x = Vector::Constant(2, 0.7);
  const int n = 20000;
  std::vector<double> samples;
  for (int s = 0; s < n; ++s) samples.push_back(lyapunov_increase(sys, d, x, sample_gaussian(Es, g)));
  EXPECT_NEAR(mean_of(samples), (d.Gamma * E).trace(), 3.0 * stderr_of(samples));
}

TEST(Monitor, NoiselessRunPassesTrivially) {
  const Scenario sc = noiseless(2, 0.0);
  std::vector<SimTrace> traces{run_closed_loop(sc, 0), run_closed_loop(sc, 1)};
  const auto fm = fleet_matrices(sc);
  const auto rep = lsp_bound_monitor(traces, fm.P, fm.Q, fm.W, 0.0, sc.horizon);
  EXPECT_FALSE(rep.flagged());
  EXPECT_EQ(rep.limsup_estimate, 0.0);
  EXPECT_EQ(rep.fraction_runs_inside, 1.0);
}

TEST(Monitor, SilencedUnstableAgentIsFlagged) {
  SystemMatrices sys{scalar(1.2), scalar(1.0), scalar(1.0)};
  Scenario sc;
  sc.agents.push_back({sys, NoiseModel::make(scalar(0.01), scalar(0.001), scalar(0.1)), design_lqr(sys, {scalar(1), scalar(1), scalar(0)})});
  sc.capacity = 1;
  sc.horizon = 1;
  sc.steps = 80;
  sc.sigma = SigmaModel::constant_for({0.0});
  sc.strategy = Strategy::Baseline;
  std::vector<SimTrace> traces;
  for (int r = 0; r < 5; ++r) traces.push_back(run_closed_loop(sc, r));
  EXPECT_GT(traces[0].at(79, 0).tr_gamma_E, 1e4 * traces[0].at(1, 0).tr_gamma_E);
  const auto fm = fleet_matrices(sc);
  const auto rep = lsp_bound_monitor(traces, fm.P, fm.Q, fm.W, baseline_steady_state_mu(identical4()), sc.horizon);
  EXPECT_TRUE(rep.flagged());
  EXPECT_LT(rep.margin, 0.0);
}

TEST(Monitor, AlphaOutsideRangeThrows) {
  EXPECT_THROW(lsp_bound_monitor({}, scalar(1.0), scalar(0.0), scalar(0.0), 0.0, 1), InvalidAlpha);
}

TEST(Scenarios, LibraryBuildsEveryEntry) {
  for (const auto& info : scenario_library()) {
    const Scenario sc = make_scenario(info.name);
    EXPECT_NO_THROW(sc.validate()) << info.name;
    EXPECT_EQ(sc.name, info.name);
  }
  EXPECT_THROW(make_scenario("nope"), ValidationError);
  EXPECT_EQ(make_scenario("hetero", {1.0, 5, 0.5}).agent_count(), 5);
}

TEST(Scenarios, TuningScalesGammaByASquared) {
  const Scenario sc = tuning2(3.0);
  EXPECT_LE(max_abs(sc.agents[1].design.K - sc.agents[0].design.K), 1e-9);
  EXPECT_LE(max_abs(sc.agents[1].design.Gamma - 9.0 * sc.agents[0].design.Gamma), 1e-8);
}

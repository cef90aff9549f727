#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "wncs/control_core.hpp"
#include "wncs/estimation.hpp"
#include "wncs/scheduler.hpp"

namespace wncs {

struct LinearAgent {
  SystemMatrices sys;
  NoiseModel noise;
  ControllerDesign design;
};

// Per-slot success probability of agent i (0-based) at step k.
struct SigmaModel {
  enum class Kind { Constant, Distance };

  Kind kind = Kind::Constant;
  std::vector<double> constant;  // one per agent; missing entries default to 1
  // Distance model: d = cos(0.1 k + (i + 1) pi / 2), sigma = exp(-lambda d^2) with lambda = -ln(floor),
  // so sigma ranges over [floor, 1]. floor = exp(-1) gives sigma = exp(-d^2).
  double floor = std::exp(-1.0);

  static SigmaModel constant_for(std::vector<double> values) { return {Kind::Constant, std::move(values), 0.0}; }
  static SigmaModel distance(double floor) { return {Kind::Distance, {}, floor}; }

  static double distance_at(int agent, long k) {
    return std::cos(0.1 * static_cast<double>(k) + (agent + 1) * std::numbers::pi / 2.0);
  }

  double operator()(int agent, long k) const {
    if (kind == Kind::Constant) {
      return agent < static_cast<int>(constant.size()) ? constant[agent] : 1.0;
    }
    const double d = distance_at(agent, k);
    return std::exp(std::log(floor) * d * d);
  }
};

struct Scenario {
  std::string name;
  std::vector<LinearAgent> agents;
  int capacity = 1;
  int horizon = 1;  // N
  int steps = 100;  // T
  int runs = 1;
  std::uint64_t seed = 1;
  SigmaModel sigma;
  Strategy strategy = Strategy::Exhaustive;
  bool loss_aware = true;  // planner sees the true sigma, otherwise plans with sigma = 1
  RecedingOptions solver;

  int agent_count() const { return static_cast<int>(agents.size()); }

  void validate() const {
    if (agents.empty()) throw ValidationError("scenario has no agents");
    if (capacity < 1) throw ValidationError("gamma must be >= 1");
    if (horizon < 1) throw ValidationError("N must be >= 1");
    if (steps < horizon + 1) throw ValidationError("T must be >= N + 1");
    if (runs < 1) throw ValidationError("runs must be >= 1");
    for (const auto& a : agents) {
      a.sys.validate();
      a.noise.validate(a.sys);
      if (spectral_radius(a.sys.closed_loop(a.design.K)) >= 1.0) throw NotStabilizing("agent design is not stabilizing");
    }
  }
};

struct AgentStep {
  Vector x, xhat, u;
  Matrix E;  // realized posterior covariance
  int delta = 0;
  int s = 0;
  double sigma = 1.0;
  double stage_cost = 0.0;
  double tr_gamma_E = 0.0;
  double tr_P_X = 0.0;  // x^T P x, the single-run sample of tr(P X_k)
};

struct SimTrace {
  int agents = 0;
  int steps = 0;
  std::vector<AgentStep> records;  // step-major

  const AgentStep& at(int step, int agent) const { return records[static_cast<std::size_t>(step) * agents + agent]; }
  AgentStep& at(int step, int agent) { return records[static_cast<std::size_t>(step) * agents + agent]; }
};

namespace rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class Source : std::uint64_t { InitialState = 1, Process = 2, Measurement = 3, Channel = 4 };

// Independent stream per (seed, run, agent, source).
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t run, std::uint64_t agent, Source src) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ run);
  h = splitmix64(h ^ (agent + 0x100));
  h = splitmix64(h ^ static_cast<std::uint64_t>(src));
  return std::mt19937_64(h);
}

inline std::uint64_t run_seed(std::uint64_t seed, std::uint64_t run) { return splitmix64(splitmix64(seed) + run); }

}  // namespace rng

// Symmetric square root of a PSD covariance; negative eigenvalues are clamped to zero.
inline Matrix covariance_sqrt(const Matrix& cov) {
  if (cov.size() == 0) return cov;
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(cov));
  const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

inline Vector sample_gaussian(const Matrix& cov_sqrt, std::mt19937_64& gen) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z(cov_sqrt.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(gen);
  return cov_sqrt * z;
}

// Planning problem posed at step `time` from the agents' realized covariances.
inline AllocationProblem planning_problem(const Scenario& sc, const std::vector<Matrix>& E_prev, long time) {
  AllocationProblem p;
  p.horizon = sc.horizon;
  p.capacity = sc.capacity;
  p.E_init = E_prev;
  for (int i = 0; i < sc.agent_count(); ++i) {
    const auto& a = sc.agents[i];
    PlanningAgent pa{a.design.Gamma, a.sys, a.noise, {}};
    pa.sigma.reserve(sc.horizon + 1);
    for (int k = 0; k <= sc.horizon; ++k) pa.sigma.push_back(sc.loss_aware ? sc.sigma(i, time + k) : 1.0);
    p.agents.push_back(std::move(pa));
  }
  return p;
}

// Step 0 has no transmission slot (x_hat_0 = E{x_0} = 0, E_0 = X0). For k >= 1 the scheduler plans from
// E_{k-1}, granted agents draw a Bernoulli(sigma) outcome, filters update, u_k = -K x_hat_k, plants step.
inline SimTrace run_closed_loop(const Scenario& sc, std::uint64_t run_index) {
  sc.validate();
  const int M = sc.agent_count();
  const std::uint64_t seed = rng::run_seed(sc.seed, run_index);

  struct AgentRuntime {
    std::mt19937_64 process, measurement, channel;
    Matrix w_sqrt, v_sqrt;
    Vector x, u;
    FilterState filter;
  };
  std::vector<AgentRuntime> rt;
  rt.reserve(M);
  for (int i = 0; i < M; ++i) {
    const auto& a = sc.agents[i];
    auto init = rng::stream(seed, run_index, i, rng::Source::InitialState);
    AgentRuntime r{rng::stream(seed, run_index, i, rng::Source::Process),
                   rng::stream(seed, run_index, i, rng::Source::Measurement),
                   rng::stream(seed, run_index, i, rng::Source::Channel),
                   covariance_sqrt(a.noise.W),
                   covariance_sqrt(a.noise.V),
                   Vector(),
                   Vector::Zero(a.sys.inputs()),
                   {Vector::Zero(a.sys.states()), a.noise.X0}};
    r.x = sample_gaussian(covariance_sqrt(a.noise.X0), init);
    rt.push_back(std::move(r));
  }

  SimTrace trace{M, sc.steps, std::vector<AgentStep>(static_cast<std::size_t>(sc.steps) * M)};
  Plan plan;
  bool have_plan = false;
  std::vector<Matrix> E_prev(M);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (int k = 0; k < sc.steps; ++k) {
    Eigen::VectorXi grants = Eigen::VectorXi::Zero(M);
    if (k > 0) {
      for (int i = 0; i < M; ++i) E_prev[i] = rt[i].filter.E;
      const AllocationProblem problem = planning_problem(sc, E_prev, k);
      plan = receding_horizon_step(problem, sc.strategy, have_plan ? &plan : nullptr, k, sc.solver);
      have_plan = true;
      grants = plan.first_slot();
      if (grants.sum() > sc.capacity) throw InfeasibleSchedule("scheduler exceeded channel capacity");
    }
    for (int i = 0; i < M; ++i) {
      const auto& a = sc.agents[i];
      auto& r = rt[i];
      AgentStep& rec = trace.at(k, i);
      rec.sigma = sc.sigma(i, k);
      if (k > 0) {
        const Prediction pred = predict(r.filter, a.sys, r.u, a.noise.W);
        const Vector v = sample_gaussian(r.v_sqrt, r.measurement);
        const double draw = unit(r.channel);
        rec.delta = grants(i);
        rec.s = (rec.delta == 1 && draw < rec.sigma) ? 1 : 0;
        const Vector y = a.sys.C * r.x + v;
        r.filter = update_realized(pred, y, rec.s == 1, a.sys.C, a.noise.V);
      }
      r.u = -a.design.K * r.filter.xhat;
      rec.x = r.x;
      rec.xhat = r.filter.xhat;
      rec.u = r.u;
      rec.E = r.filter.E;
      rec.stage_cost = stage_cost(r.x, r.u, a.design.weights);
      rec.tr_gamma_E = (a.design.Gamma * r.filter.E).trace();
      rec.tr_P_X = r.x.dot(a.design.P * r.x);
      r.x = a.sys.A * r.x + a.sys.B * r.u + sample_gaussian(r.w_sqrt, r.process);
    }
  }
  return trace;
}

struct ClosedLoopCost {
  double J = 0.0;           // (1/T) sum_k sum_i l_i(x, u)
  double trace_cost = 0.0;  // sum_k sum_i tr(Gamma_i E_i)
};

inline ClosedLoopCost closed_loop_cost(const SimTrace& trace) {
  ClosedLoopCost c;
  if (trace.steps == 0) return c;
  for (int k = 0; k < trace.steps; ++k) {
    for (int i = 0; i < trace.agents; ++i) {
      c.J += trace.at(k, i).stage_cost;
      c.trace_cost += trace.at(k, i).tr_gamma_E;
    }
  }
  c.J /= trace.steps;
  return c;
}

inline double closed_loop_cost_of_agent(const SimTrace& trace, int agent) {
  if (trace.steps == 0) return 0.0;
  double sum = 0.0;
  for (int k = 0; k < trace.steps; ++k) sum += trace.at(k, agent).stage_cost;
  return sum / trace.steps;
}

struct MCStats {
  int runs = 0;
  double J_mean = 0.0;
  double J_stderr = 0.0;
  double trace_cost_mean = 0.0;
  double trace_cost_stderr = 0.0;
  std::vector<double> grants_mean;  // per agent, averaged over runs
  double ratio = std::numeric_limits<double>::quiet_NaN();  // sum delta_2 / sum delta_1
  std::vector<double> J_runs;
};

struct RunSummary {
  ClosedLoopCost cost;
  std::vector<long> grants;
};

inline RunSummary summarize(const SimTrace& trace) {
  RunSummary s{closed_loop_cost(trace), std::vector<long>(trace.agents, 0)};
  for (int k = 0; k < trace.steps; ++k) {
    for (int i = 0; i < trace.agents; ++i) s.grants[i] += trace.at(k, i).delta;
  }
  return s;
}

inline double mean_of(const std::vector<double>& v) {
  double sum = 0.0;
  for (double x : v) sum += x;
  return v.empty() ? 0.0 : sum / static_cast<double>(v.size());
}

// Standard error of the mean (sample standard deviation / sqrt(n)); zero for a single sample.
inline double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

inline MCStats aggregate(const std::vector<RunSummary>& runs) {
  MCStats st;
  st.runs = static_cast<int>(runs.size());
  if (runs.empty()) return st;
  const std::size_t M = runs.front().grants.size();
  std::vector<double> trace_costs;
  std::vector<double> totals(M, 0.0);
  for (const auto& r : runs) {
    st.J_runs.push_back(r.cost.J);
    trace_costs.push_back(r.cost.trace_cost);
    for (std::size_t i = 0; i < M; ++i) totals[i] += static_cast<double>(r.grants[i]);
  }
  st.J_mean = mean_of(st.J_runs);
  st.J_stderr = stderr_of(st.J_runs);
  st.trace_cost_mean = mean_of(trace_costs);
  st.trace_cost_stderr = stderr_of(trace_costs);
  for (double t : totals) st.grants_mean.push_back(t / static_cast<double>(runs.size()));
  if (M >= 2 && totals[0] > 0.0) st.ratio = totals[1] / totals[0];
  return st;
}

// WNCS_WORKERS overrides the worker count.
inline unsigned worker_count() {
  if (const char* env = std::getenv("WNCS_WORKERS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs `count` independent jobs; output slot i is written only by job i.
template <typename Result>
std::vector<Result> parallel_runs(int count, const std::function<Result(int)>& job) {
  std::vector<Result> out(count);
  const unsigned workers = std::min<unsigned>(worker_count(), static_cast<unsigned>(std::max(1, count)));
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) out[i] = job(i);
    return out;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = next++; i < count; i = next++) out[i] = job(i);
      } catch (...) {
        errors[w] = std::current_exception();
        next = count;
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

inline MCStats monte_carlo(const Scenario& sc) {
  sc.validate();
  auto runs = parallel_runs<RunSummary>(sc.runs, [&](int r) { return summarize(run_closed_loop(sc, r)); });
  return aggregate(runs);
}

inline double normalized_to_baseline(double J, double J_baseline) { return J / J_baseline; }

// J_s = J / min(J) over a sweep.
inline std::vector<double> scaled_around_minimum(const std::vector<double>& J) {
  if (J.empty()) return {};
  const double lo = *std::min_element(J.begin(), J.end());
  std::vector<double> out;
  for (double v : J) out.push_back(v / lo);
  return out;
}

// ---------------------------------------------------------------------------------------------
// Stability-in-probability bound monitor.

inline Matrix block_diagonal(const std::vector<Matrix>& blocks) {
  Eigen::Index rows = 0, cols = 0;
  for (const auto& b : blocks) {
    rows += b.rows();
    cols += b.cols();
  }
  Matrix out = Matrix::Zero(rows, cols);
  Eigen::Index r = 0, c = 0;
  for (const auto& b : blocks) {
    out.block(r, c, b.rows(), b.cols()) = b;
    r += b.rows();
    c += b.cols();
  }
  return out;
}

struct FleetMatrices {
  Matrix P, Q, W, Gamma;
};

// Q is the closed-loop Lyapunov weight P - A_K^T P A_K of each agent's design.
inline FleetMatrices fleet_matrices(const Scenario& sc) {
  std::vector<Matrix> P, Q, W, G;
  for (const auto& a : sc.agents) {
    P.push_back(a.design.P);
    Q.push_back(lyapunov_weight(a.sys, a.design));
    W.push_back(a.noise.W);
    G.push_back(a.design.Gamma);
  }
  return {block_diagonal(P), block_diagonal(Q), block_diagonal(W), block_diagonal(G)};
}

// Steady-state maximum of sum_i tr(Gamma_i E_i) under the round-robin baseline, using the
// planner's expected-covariance recursion from X0.
inline double baseline_steady_state_mu(const Scenario& sc, int periods = 50) {
  const int M = sc.agent_count();
  const int period = (M + sc.capacity - 1) / sc.capacity;
  const int total = periods * period;
  std::vector<Matrix> E;
  for (const auto& a : sc.agents) E.push_back(a.noise.X0);
  double mu = 0.0;
  for (int k = 1; k <= total; ++k) {
    Schedule col = baseline_round_robin(M, sc.capacity, 0, static_cast<long>(k) * sc.capacity);
    double sum = 0.0;
    for (int i = 0; i < M; ++i) {
      const auto& a = sc.agents[i];
      E[i] = expected_cov_step(E[i], col.delta(i, 0), sc.sigma(i, k), a.sys, a.noise);
      sum += (a.design.Gamma * E[i]).trace();
    }
    if (k > total - 2 * period) mu = std::max(mu, sum);
  }
  return mu;
}

struct LspReport {
  double alpha = 0.0;
  double nu = 0.0;
  double bound = 0.0;              // nu / (1 - alpha)
  std::vector<double> empirical;   // per step: mean over runs of x_k^T P x_k
  double limsup_estimate = 0.0;    // largest window average over the second half of the horizon
  double margin = 0.0;             // bound - limsup_estimate
  std::vector<int> flagged_windows;  // start steps of windows above 1.1 * bound
  double fraction_runs_inside = 0.0;
  bool flagged() const { return !flagged_windows.empty(); }
};

// alpha = 1 - lambda_min(Q P^{-1}) clipped at 0, nu = tr(P W) + N mu.
inline LspReport lsp_bound_monitor(const std::vector<SimTrace>& traces, const Matrix& P, const Matrix& Q,
                                   const Matrix& W, double mu, int horizon, int window = 10) {
  LspReport rep;
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> ges(symmetrized(Q), symmetrized(P));
  if (ges.info() != Eigen::Success) throw InvalidAlpha("lsp_bound_monitor: P must be positive definite");
  rep.alpha = std::max(0.0, 1.0 - ges.eigenvalues().minCoeff());
  if (rep.alpha >= 1.0) throw InvalidAlpha("lsp_bound_monitor: alpha >= 1, Q is too weak relative to P");
  rep.nu = (P * W).trace() + horizon * mu;
  rep.bound = rep.nu / (1.0 - rep.alpha);
  if (traces.empty()) return rep;

  const int steps = traces.front().steps;
  auto fleet_value = [](const SimTrace& t, int k) {
    double v = 0.0;
    for (int i = 0; i < t.agents; ++i) v += t.at(k, i).tr_P_X;
    return v;
  };
  rep.empirical.assign(steps, 0.0);
  for (const auto& t : traces) {
    for (int k = 0; k < steps; ++k) rep.empirical[k] += fleet_value(t, k);
  }
  for (double& v : rep.empirical) v /= static_cast<double>(traces.size());

  window = std::max(1, std::min(window, steps));
  rep.limsup_estimate = 0.0;
  for (int start = 0; start + window <= steps; ++start) {
    double avg = 0.0;
    for (int k = start; k < start + window; ++k) avg += rep.empirical[k];
    avg /= window;
    if (avg > 1.1 * rep.bound) rep.flagged_windows.push_back(start);
    if (start >= steps / 2) rep.limsup_estimate = std::max(rep.limsup_estimate, avg);
  }
  rep.margin = rep.bound - rep.limsup_estimate;

  int inside = 0;
  for (const auto& t : traces) {
    double avg = 0.0;
    for (int k = steps / 2; k < steps; ++k) avg += fleet_value(t, k);
    avg /= std::max(1, steps - steps / 2);
    if (avg <= rep.bound) ++inside;
  }
  rep.fraction_runs_inside = static_cast<double>(inside) / static_cast<double>(traces.size());
  return rep;
}

}  // namespace wncs

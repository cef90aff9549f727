#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "wncs/control_core.hpp"
#include "wncs/estimation.hpp"

namespace wncs {

// Everything the planner needs to know about one agent.
struct PlanningAgent {
  Matrix Gamma;
  SystemMatrices sys;
  NoiseModel noise;
  std::vector<double> sigma;  // success probability per planned slot, length >= N + 1
};

// Finite-horizon allocation posed at some time j: slots j..j+N are indexed 0..N here.
struct AllocationProblem {
  std::vector<PlanningAgent> agents;
  std::vector<Matrix> E_init;  // E_{i,j-1}
  int horizon = 1;             // N
  int capacity = 1;            // gamma

  int agent_count() const { return static_cast<int>(agents.size()); }
  int slots() const { return horizon + 1; }

  void validate() const {
    if (capacity < 1) throw ValidationError("capacity must be >= 1");
    if (horizon < 1) throw ValidationError("horizon must be >= 1");
    if (agents.empty()) throw ValidationError("allocation problem has no agents");
    if (E_init.size() != agents.size()) throw ValidationError("one initial covariance per agent required");
    for (const auto& a : agents) {
      if (static_cast<int>(a.sigma.size()) < slots()) throw ValidationError("sigma trajectory shorter than N + 1");
    }
  }
};

struct Schedule {
  Eigen::MatrixXi delta;  // agents x slots, entries in {0, 1}

  static Schedule zeros(int agents, int slots) { return {Eigen::MatrixXi::Zero(agents, slots)}; }

  int agents() const { return static_cast<int>(delta.rows()); }
  int slots() const { return static_cast<int>(delta.cols()); }
  int grants(int agent) const { return delta.row(agent).sum(); }
  Matrix as_real() const { return delta.cast<double>(); }

  bool feasible(int capacity) const {
    for (int k = 0; k < slots(); ++k) {
      if (delta.col(k).sum() > capacity) return false;
    }
    return ((delta.array() == 0) || (delta.array() == 1)).all();
  }

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

struct RelaxedSchedule {
  Matrix delta;  // agents x slots, entries in [0, 1]

  bool feasible(int capacity, double tol = 1e-9) const {
    if ((delta.array() < -tol).any() || (delta.array() > 1.0 + tol).any()) return false;
    for (Eigen::Index k = 0; k < delta.cols(); ++k) {
      if (delta.col(k).sum() > capacity + tol) return false;
    }
    return true;
  }
};

namespace detail {

inline void check_shape(const AllocationProblem& p, const Matrix& delta) {
  if (delta.rows() != p.agent_count() || delta.cols() != p.slots()) {
    throw DimensionMismatch("schedule shape does not match the allocation problem");
  }
}

}  // namespace detail

// Single-agent cumulative cost sum_k tr(Gamma E_k) of one schedule row.
inline double voi(const PlanningAgent& agent, const Vector& delta_row, const Matrix& E_prev) {
  if (agent.Gamma.isZero(0.0)) return 0.0;
  Matrix E = E_prev;
  double total = 0.0;
  for (Eigen::Index k = 0; k < delta_row.size(); ++k) {
    E = expected_cov_step(E, delta_row(k), agent.sigma[k], agent.sys, agent.noise);
    total += (agent.Gamma * E).trace();
  }
  return total;
}

inline double voi(const AllocationProblem& p, int agent, const Vector& delta_row) {
  return voi(p.agents.at(agent), delta_row, p.E_init.at(agent));
}

// Rolls every agent forward slot by slot and sums tr(Gamma_i E_{i,k}).
inline double allocation_cost(const AllocationProblem& p, const Matrix& delta) {
  detail::check_shape(p, delta);
  if (!RelaxedSchedule{delta}.feasible(p.capacity)) throw InfeasibleSchedule("schedule violates capacity or [0,1] bounds");
  std::vector<Matrix> E = p.E_init;
  double total = 0.0;
  for (int k = 0; k < p.slots(); ++k) {
    for (int i = 0; i < p.agent_count(); ++i) {
      const auto& a = p.agents[i];
      E[i] = expected_cov_step(E[i], delta(i, k), a.sigma[k], a.sys, a.noise);
      total += (a.Gamma * E[i]).trace();
    }
  }
  return total;
}

inline double allocation_cost(const AllocationProblem& p, const Schedule& s) {
  return allocation_cost(p, s.as_real());
}

inline double allocation_cost(const AllocationProblem& p, const RelaxedSchedule& s) {
  return allocation_cost(p, s.delta);
}

struct CostGradient {
  double cost = 0.0;
  Matrix gradient;  // d cost / d delta, agents x slots
};

// Reverse-mode derivative through Ebar -> L -> E for every agent. Writing T = L C and c = delta*sigma,
// dE = (I - cT) dEbar (I - cT)^T + (c - c^2) T dEbar T^T - sigma T Ebar d(delta).
inline CostGradient allocation_gradient(const AllocationProblem& p, const Matrix& delta) {
  detail::check_shape(p, delta);
  const int slots = p.slots();
  CostGradient out{0.0, Matrix::Zero(p.agent_count(), slots)};
  std::vector<Matrix> Ebar(slots), T(slots);
  for (int i = 0; i < p.agent_count(); ++i) {
    const auto& a = p.agents[i];
    const auto n = a.sys.states();
    const Matrix I = Matrix::Identity(n, n);
    Matrix E = p.E_init[i];
    for (int k = 0; k < slots; ++k) {
      Ebar[k] = symmetrized(a.sys.A * E * a.sys.A.transpose() + a.noise.W);
      T[k] = kalman_gain(Ebar[k], a.sys.C, a.noise.V) * a.sys.C;
      const double c = delta(i, k) * a.sigma[k];
      E = symmetrized((I - c * T[k]) * Ebar[k]);
      out.cost += (a.Gamma * E).trace();
    }
    Matrix G = a.Gamma;  // d cost / d E_k
    for (int k = slots - 1; k >= 0; --k) {
      const double sigma = a.sigma[k];
      const double c = delta(i, k) * sigma;
      out.gradient(i, k) = -sigma * (G * T[k] * Ebar[k]).trace();
      const Matrix J = I - c * T[k];
      const Matrix H = J.transpose() * G * J + (c - c * c) * T[k].transpose() * G * T[k];
      if (k > 0) G = symmetrized(a.Gamma + a.sys.A.transpose() * H * a.sys.A);
    }
  }
  return out;
}

// Euclidean projection of v onto {x in [0,1]^M : sum x <= cap}.
inline Vector project_capped_simplex(const Vector& v, double cap) {
  Vector clipped = v.cwiseMax(0.0).cwiseMin(1.0);
  if (clipped.sum() <= cap) return clipped;
  // x(tau) = clip(v - tau, 0, 1) is piecewise linear and non-increasing in tau; find sum x(tau) = cap.
  std::vector<double> breaks;
  breaks.reserve(2 * v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    breaks.push_back(v(i) - 1.0);
    breaks.push_back(v(i));
  }
  std::sort(breaks.begin(), breaks.end());
  auto mass = [&](double tau) { return (v.array() - tau).cwiseMax(0.0).cwiseMin(1.0).sum(); };
  double lo = breaks.front(), hi = breaks.back();
  double mass_lo = mass(lo), mass_hi = 0.0;
  for (double b : breaks) {
    const double m = mass(b);
    if (m >= cap) {
      lo = b;
      mass_lo = m;
    } else {
      hi = b;
      mass_hi = m;
      break;
    }
  }
  const double tau = (mass_lo == mass_hi) ? lo : lo + (mass_lo - cap) * (hi - lo) / (mass_lo - mass_hi);
  return (v.array() - tau).cwiseMax(0.0).cwiseMin(1.0).matrix();
}

inline Matrix project_schedule(const Matrix& delta, int capacity) {
  Matrix out(delta.rows(), delta.cols());
  for (Eigen::Index k = 0; k < delta.cols(); ++k) out.col(k) = project_capped_simplex(delta.col(k), capacity);
  return out;
}

struct ScheduleResult {
  Schedule schedule;
  double cost = 0.0;
};

namespace detail {

// Binary columns with at most `capacity` ones, in lexicographic order of (agent 0, agent 1, ...).
inline std::vector<std::uint32_t> feasible_columns(int agents, int capacity) {
  std::vector<std::uint32_t> cols;
  for (std::uint32_t mask = 0; mask < (1u << agents); ++mask) {
    if (std::popcount(mask) <= capacity) cols.push_back(mask);
  }
  auto lex_key = [agents](std::uint32_t m) {
    std::uint32_t key = 0;
    for (int i = 0; i < agents; ++i) key = (key << 1) | ((m >> i) & 1u);
    return key;
  };
  std::sort(cols.begin(), cols.end(), [&](auto a, auto b) { return lex_key(a) < lex_key(b); });
  return cols;
}

// Row-major (agent, then slot) lexicographic comparison.
inline bool lex_less(const Eigen::MatrixXi& a, const Eigen::MatrixXi& b) {
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      if (a(i, k) != b(i, k)) return a(i, k) < b(i, k);
    }
  }
  return false;
}

inline double tie_tolerance(double cost) { return 1e-12 * std::max(1.0, std::abs(cost)); }

}  // namespace detail

inline constexpr double kMaxEnumeration = 1e7;

// Global optimum by depth-first enumeration of feasible columns. Partial sums are lower bounds
// (Gamma and E are PSD), so branches already worse than the incumbent are cut. Ties within
// 1e-12 relative go to the lexicographically smallest flattened schedule.
inline ScheduleResult solve_exhaustive(const AllocationProblem& p) {
  p.validate();
  const int M = p.agent_count();
  const int slots = p.slots();
  if (M > 24) throw TooLarge("exhaustive: too many agents");
  const auto cols = detail::feasible_columns(M, p.capacity);
  double count = 1.0;
  for (int k = 0; k < slots; ++k) count *= static_cast<double>(cols.size());
  if (count > kMaxEnumeration) {
    throw TooLarge("exhaustive: " + std::to_string(count) + " schedules exceed the enumeration bound");
  }

  // Per depth: the agents' covariances entering that slot.
  std::vector<std::vector<Matrix>> E(slots + 1, std::vector<Matrix>(M));
  E[0] = p.E_init;
  std::vector<std::vector<Matrix>> next0(slots, std::vector<Matrix>(M)), next1(slots, std::vector<Matrix>(M));
  std::vector<std::vector<double>> cost0(slots, std::vector<double>(M)), cost1(slots, std::vector<double>(M));
  std::vector<std::uint32_t> chosen(slots, 0);

  ScheduleResult best{Schedule::zeros(M, slots), std::numeric_limits<double>::infinity()};
  Eigen::MatrixXi candidate(M, slots);

  auto visit = [&](auto&& self, int depth, double acc) -> void {
    if (acc > best.cost + detail::tie_tolerance(best.cost)) return;
    if (depth == slots) {
      for (int k = 0; k < slots; ++k) {
        for (int i = 0; i < M; ++i) candidate(i, k) = static_cast<int>((chosen[k] >> i) & 1u);
      }
      if (!std::isfinite(best.cost) || acc < best.cost - detail::tie_tolerance(best.cost) ||
          (acc <= best.cost + detail::tie_tolerance(best.cost) && detail::lex_less(candidate, best.schedule.delta))) {
        best.cost = acc;
        best.schedule.delta = candidate;
      }
      return;
    }
    for (int i = 0; i < M; ++i) {
      const auto& a = p.agents[i];
      next0[depth][i] = expected_cov_step(E[depth][i], 0.0, a.sigma[depth], a.sys, a.noise);
      next1[depth][i] = expected_cov_step(E[depth][i], 1.0, a.sigma[depth], a.sys, a.noise);
      cost0[depth][i] = (a.Gamma * next0[depth][i]).trace();
      cost1[depth][i] = (a.Gamma * next1[depth][i]).trace();
    }
    for (std::uint32_t col : cols) {
      double step = 0.0;
      for (int i = 0; i < M; ++i) {
        const bool on = (col >> i) & 1u;
        step += on ? cost1[depth][i] : cost0[depth][i];
        E[depth + 1][i] = on ? next1[depth][i] : next0[depth][i];
      }
      chosen[depth] = col;
      self(self, depth + 1, acc + step);
    }
  };
  visit(visit, 0, 0.0);
  best.cost = allocation_cost(p, best.schedule);
  return best;
}

// Slot by slot, grant the channel to the agents with the largest one-slot reduction of tr(Gamma E).
inline ScheduleResult solve_greedy_voi(const AllocationProblem& p) {
  p.validate();
  const int M = p.agent_count();
  Schedule s = Schedule::zeros(M, p.slots());
  std::vector<Matrix> E = p.E_init;
  std::vector<int> order(M);
  std::vector<double> gain(M);
  std::vector<Matrix> off(M), on(M);
  for (int k = 0; k < p.slots(); ++k) {
    for (int i = 0; i < M; ++i) {
      const auto& a = p.agents[i];
      off[i] = expected_cov_step(E[i], 0.0, a.sigma[k], a.sys, a.noise);
      on[i] = expected_cov_step(E[i], 1.0, a.sigma[k], a.sys, a.noise);
      gain[i] = (a.Gamma * (off[i] - on[i])).trace();
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return gain[x] > gain[y]; });
    for (int r = 0; r < M; ++r) {
      const int i = order[r];
      const bool grant = r < p.capacity && gain[i] > 0.0;
      s.delta(i, k) = grant ? 1 : 0;
      E[i] = grant ? on[i] : off[i];
    }
  }
  return {s, allocation_cost(p, s)};
}

struct RelaxedOptions {
  int max_iterations = 10000;
  double stationarity = 1e-6;  // ||delta - Proj(delta - grad)||_inf
};

struct RelaxedResult {
  RelaxedSchedule schedule;
  double cost = 0.0;
  int iterations = 0;
  double stationarity = 0.0;
};

inline double projected_gradient_norm(const Matrix& delta, const Matrix& gradient, int capacity) {
  return max_abs(delta - project_schedule(delta - gradient, capacity));
}

// Spectral projected gradient: Barzilai-Borwein step along d = Proj(x - lambda g) - x with a
// nonmonotone Armijo test against the largest of the last `memory` costs.
inline RelaxedResult solve_relaxed(const AllocationProblem& p, const RelaxedSchedule& init,
                                   const RelaxedOptions& opt = {}) {
  p.validate();
  detail::check_shape(p, init.delta);
  if (!init.feasible(p.capacity)) throw InfeasibleSchedule("solve_relaxed: infeasible initial point");
  constexpr int memory = 10;
  constexpr double lambda_min = 1e-10, lambda_max = 1e10;

  Matrix x = project_schedule(init.delta, p.capacity);
  CostGradient cg = allocation_gradient(p, x);
  std::vector<double> history{cg.cost};
  double lambda = std::clamp(1.0 / std::max(1e-300, max_abs(project_schedule(x - cg.gradient, p.capacity) - x)),
                             lambda_min, lambda_max);
  for (int it = 0; it < opt.max_iterations; ++it) {
    const double pg = projected_gradient_norm(x, cg.gradient, p.capacity);
    if (pg <= opt.stationarity) return {{x}, cg.cost, it, pg};

    const Matrix d = project_schedule(x - lambda * cg.gradient, p.capacity) - x;
    const double slope = (cg.gradient.array() * d.array()).sum();
    const double reference = *std::max_element(history.begin(), history.end());
    double t = 1.0;
    Matrix trial;
    double trial_cost = 0.0;
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      trial = x + t * d;
      trial_cost = allocation_cost(p, trial);
      if (trial_cost <= reference + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    // No representable decrease left along d.
    if (!accepted || slope >= 0.0) return {{x}, cg.cost, it, pg};

    CostGradient next = allocation_gradient(p, trial);
    const Matrix s = trial - x;
    const Matrix y = next.gradient - cg.gradient;
    const double sy = (s.array() * y.array()).sum();
    lambda = sy <= 0.0 ? lambda_max : std::clamp((s.array() * s.array()).sum() / sy, lambda_min, lambda_max);
    x = std::move(trial);
    cg = std::move(next);
    history.push_back(cg.cost);
    if (static_cast<int>(history.size()) > memory) history.erase(history.begin());
  }
  const double pg = projected_gradient_norm(x, cg.gradient, p.capacity);
  if (pg <= opt.stationarity) return {{x}, cg.cost, opt.max_iterations, pg};
  throw NonConvergent("solve_relaxed: iteration budget exhausted (projected gradient " + std::to_string(pg) + ")");
}

// Sum-up rounding with per-slot capacity repair.
inline Schedule round_schedule(const RelaxedSchedule& r, int capacity) {
  const auto M = static_cast<int>(r.delta.rows());
  const auto slots = static_cast<int>(r.delta.cols());
  Schedule s = Schedule::zeros(M, slots);
  std::vector<double> acc(M, 0.0);
  std::vector<int> candidates;
  for (int k = 0; k < slots; ++k) {
    candidates.clear();
    for (int i = 0; i < M; ++i) {
      acc[i] += r.delta(i, k);
      if (acc[i] >= 0.5 - 1e-12) candidates.push_back(i);
    }
    if (static_cast<int>(candidates.size()) > capacity) {
      std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) { return acc[a] > acc[b]; });
      candidates.resize(capacity);
    }
    for (int i : candidates) {
      s.delta(i, k) = 1;
      acc[i] -= 1.0;
    }
  }
  return s;
}

// Fixed rotation granting `capacity` agents per slot; slot k starts at agent (phase + k*capacity) mod M.
inline Schedule baseline_round_robin(int agents, int capacity, int horizon, long phase = 0) {
  if (agents < 1) throw ValidationError("baseline_round_robin: need at least one agent");
  Schedule s = Schedule::zeros(agents, horizon + 1);
  const int per_slot = std::min(capacity, agents);
  for (int k = 0; k <= horizon; ++k) {
    for (int j = 0; j < per_slot; ++j) {
      const long idx = ((phase + static_cast<long>(k) * capacity + j) % agents + agents) % agents;
      s.delta(static_cast<int>(idx), k) = 1;
    }
  }
  return s;
}

// Deterministic start set for the nonconvex relaxation: the uniform fractional point, the greedy
// schedule and every phase of the round-robin baseline.
inline std::vector<Matrix> relaxed_starts(const AllocationProblem& p) {
  const int M = p.agent_count();
  std::vector<Matrix> starts;
  starts.push_back(Matrix::Constant(M, p.slots(), std::min(1.0, static_cast<double>(p.capacity) / M)));
  starts.push_back(solve_greedy_voi(p).schedule.as_real());
  for (int phase = 0; phase < M; ++phase) starts.push_back(baseline_round_robin(M, p.capacity, p.horizon, phase).as_real());
  return starts;
}

// Best local solution over several starts; ties keep the earliest start.
inline RelaxedResult solve_relaxed_multistart(const AllocationProblem& p, const std::vector<Matrix>& starts,
                                              const RelaxedOptions& opt = {}) {
  if (starts.empty()) throw ValidationError("solve_relaxed_multistart: no starting points");
  std::optional<RelaxedResult> best;
  for (const auto& s : starts) {
    RelaxedResult r = solve_relaxed(p, {s}, opt);
    if (!best || r.cost < best->cost - detail::tie_tolerance(best->cost)) best = std::move(r);
  }
  return *best;
}

enum class Strategy { Exhaustive, Greedy, Relaxed, Baseline };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::Exhaustive: return "exhaustive";
    case Strategy::Greedy: return "greedy";
    case Strategy::Relaxed: return "relaxed";
    case Strategy::Baseline: return "baseline";
  }
  return "unknown";
}

inline std::optional<Strategy> parse_strategy(const std::string& name) {
  if (name == "exhaustive") return Strategy::Exhaustive;
  if (name == "greedy") return Strategy::Greedy;
  if (name == "relaxed" || name == "relaxed+round") return Strategy::Relaxed;
  if (name == "baseline") return Strategy::Baseline;
  return std::nullopt;
}

struct Plan {
  Schedule schedule;
  Matrix relaxed;  // continuous iterate backing the plan (equals schedule for integer strategies)
  double cost = 0.0;

  Eigen::VectorXi first_slot() const { return schedule.delta.col(0); }
};

// Drops the executed slot and repeats the last one.
inline Matrix shift_plan(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  if (m.cols() > 1) out.leftCols(m.cols() - 1) = m.rightCols(m.cols() - 1);
  out.col(m.cols() - 1) = m.col(m.cols() - 1);
  return out;
}

inline Schedule shift_plan(const Schedule& s) {
  Eigen::MatrixXi out(s.delta.rows(), s.delta.cols());
  if (s.delta.cols() > 1) out.leftCols(s.delta.cols() - 1) = s.delta.rightCols(s.delta.cols() - 1);
  out.col(s.delta.cols() - 1) = s.delta.col(s.delta.cols() - 1);
  return {out};
}

struct RecedingOptions {
  RelaxedOptions relaxed;
};

// Solves the horizon problem posed at `time`. A feasible shifted warm start is kept whenever the
// fresh solution is not strictly cheaper, so the returned cost never exceeds the incumbent's.
inline Plan receding_horizon_step(const AllocationProblem& p, Strategy strategy, const Plan* warm_start, long time,
                                  const RecedingOptions& opt = {}) {
  p.validate();
  const int M = p.agent_count();
  if (strategy == Strategy::Baseline) {
    Schedule s = baseline_round_robin(M, p.capacity, p.horizon, time * p.capacity);
    return {s, s.as_real(), allocation_cost(p, s)};
  }

  Plan fresh;
  switch (strategy) {
    case Strategy::Exhaustive: {
      auto r = solve_exhaustive(p);
      fresh = {r.schedule, r.schedule.as_real(), r.cost};
      break;
    }
    case Strategy::Greedy: {
      auto r = solve_greedy_voi(p);
      fresh = {r.schedule, r.schedule.as_real(), r.cost};
      break;
    }
    default: {
      // Each start is solved, rounded and scored on the integer cost that will actually be applied.
      std::vector<Matrix> starts;
      if (warm_start && warm_start->relaxed.rows() == M && warm_start->relaxed.cols() == p.slots()) {
        starts.push_back(project_schedule(shift_plan(warm_start->relaxed), p.capacity));
      }
      for (auto& s : relaxed_starts(p)) starts.push_back(std::move(s));
      bool have = false;
      for (const auto& start : starts) {
        auto r = solve_relaxed(p, {start}, opt.relaxed);
        Schedule s = round_schedule(r.schedule, p.capacity);
        const double cost = allocation_cost(p, s);
        if (!have || cost < fresh.cost - detail::tie_tolerance(fresh.cost)) {
          fresh = {std::move(s), std::move(r.schedule.delta), cost};
          have = true;
        }
      }
      break;
    }
  }

  if (warm_start && warm_start->schedule.agents() == M && warm_start->schedule.slots() == p.slots()) {
    Schedule incumbent = shift_plan(warm_start->schedule);
    const double incumbent_cost = allocation_cost(p, incumbent);
    if (incumbent_cost < fresh.cost - detail::tie_tolerance(fresh.cost)) {
      Matrix relaxed = incumbent.as_real();
      return {std::move(incumbent), std::move(relaxed), incumbent_cost};
    }
  }
  return fresh;
}

}  // namespace wncs

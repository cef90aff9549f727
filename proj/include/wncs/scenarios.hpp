#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wncs/simulator.hpp"

namespace wncs {

// Double integrator sampled at 0.1 s, measured through C = I.
inline SystemMatrices double_integrator() {
  SystemMatrices sys{Matrix(2, 2), Matrix(2, 1), Matrix::Identity(2, 2)};
  sys.A << 1.0, 0.1, 0.0, 1.0;
  sys.B << 0.005, 0.1;
  return sys;
}

inline LqrWeights default_weights() {
  return {Matrix::Identity(2, 2), Matrix::Constant(1, 1, 0.01), Matrix::Zero(1, 2)};
}

inline LinearAgent make_agent(const SystemMatrices& sys, const LqrWeights& w, double process_var,
                              double measurement_var, double initial_var) {
  const auto n = sys.states();
  const auto p = sys.outputs();
  return {sys,
          NoiseModel::make(process_var * Matrix::Identity(n, n), measurement_var * Matrix::Identity(p, p),
                           initial_var * Matrix::Identity(n, n)),
          design_lqr(sys, w)};
}

struct ScenarioParams {
  double a = 1.0;                       // tuning2: second agent's weights scaled by a^2
  int agents = 10;                      // hetero: fleet size
  double floor = std::exp(-1.0);        // lossy2: smallest success probability
};

inline constexpr double kInitialVariance = 0.1;
inline constexpr double kMildFloor = 0.9;
inline constexpr double kModerateFloor = 0.5;
inline constexpr double kSevereFloor = 0.1;

// Four identical double integrators, W = 1e-2 I, V = 1e-3 I, one slot per step, perfect channel.
inline Scenario identical4() {
  Scenario sc;
  sc.name = "identical4";
  for (int i = 0; i < 4; ++i) sc.agents.push_back(make_agent(double_integrator(), default_weights(), 1e-2, 1e-3, kInitialVariance));
  sc.capacity = 1;
  sc.horizon = 4;
  sc.steps = 60;
  sc.runs = 20;
  sc.sigma = SigmaModel::constant_for(std::vector<double>(4, 1.0));
  sc.strategy = Strategy::Exhaustive;
  return sc;
}

// Two identical agents; the second uses Q2 = a^2 Q1, R2 = a^2 R1 (same K, Gamma2 = a^2 Gamma1).
inline Scenario tuning2(double a) {
  Scenario sc;
  sc.name = "tuning2";
  sc.agents.push_back(make_agent(double_integrator(), default_weights(), 1e-2, 1e-3, kInitialVariance));
  sc.agents.push_back(make_agent(double_integrator(), default_weights().scaled(a * a), 1e-2, 1e-3, kInitialVariance));
  sc.capacity = 1;
  sc.horizon = 4;
  sc.steps = 100;
  sc.runs = 10;
  sc.sigma = SigmaModel::constant_for({1.0, 1.0});
  sc.strategy = Strategy::Exhaustive;
  return sc;
}

// Two identical agents on a lossy channel whose success probability oscillates in antiphase.
inline Scenario lossy2(double floor) {
  Scenario sc;
  sc.name = "lossy2";
  for (int i = 0; i < 2; ++i) sc.agents.push_back(make_agent(double_integrator(), default_weights(), 1e-2, 1e-3, kInitialVariance));
  sc.capacity = 1;
  sc.horizon = 5;
  sc.steps = 100;
  sc.runs = 100;
  sc.sigma = SigmaModel::distance(floor);
  sc.strategy = Strategy::Relaxed;
  return sc;
}

// M double integrators whose process noise grows log-uniformly from 1e-3 to 1e-1.
inline Scenario hetero(int agents) {
  if (agents < 1) throw ValidationError("hetero: M must be >= 1");
  Scenario sc;
  sc.name = "hetero";
  for (int i = 0; i < agents; ++i) {
    const double t = agents == 1 ? 0.0 : static_cast<double>(i) / (agents - 1);
    sc.agents.push_back(make_agent(double_integrator(), default_weights(), std::pow(10.0, -3.0 + 2.0 * t), 1e-3, kInitialVariance));
  }
  sc.capacity = 1;
  sc.horizon = 3;
  sc.steps = 100;
  sc.runs = 20;
  sc.sigma = SigmaModel::constant_for(std::vector<double>(agents, 1.0));
  sc.strategy = Strategy::Relaxed;
  return sc;
}

struct ScenarioInfo {
  std::string name;
  std::string description;
};

inline std::vector<ScenarioInfo> scenario_library() {
  return {
      {"identical4", "4 identical double integrators, W=1e-2 I, V=1e-3 I, gamma=1, perfect channel"},
      {"tuning2", "2 identical agents, second with weights scaled by a^2 (parameter a)"},
      {"lossy2", "2 agents, sigma=exp(-lambda d^2), d=cos(0.1k+i pi/2), floor exp(-1) by default (parameter floor)"},
      {"lossy2-mild", "lossy2 with success probability floor 0.9"},
      {"lossy2-moderate", "lossy2 with success probability floor 0.5"},
      {"lossy2-severe", "lossy2 with success probability floor 0.1"},
      {"hetero", "M double integrators with log-spaced process noise (parameter M)"},
  };
}

inline bool scenario_exists(const std::string& name) {
  for (const auto& s : scenario_library()) {
    if (s.name == name) return true;
  }
  return false;
}

inline Scenario make_scenario(const std::string& name, const ScenarioParams& params = {}) {
  Scenario sc;
  if (name == "identical4") {
    sc = identical4();
  } else if (name == "tuning2") {
    sc = tuning2(params.a);
  } else if (name == "lossy2") {
    sc = lossy2(params.floor);
  } else if (name == "lossy2-mild") {
    sc = lossy2(kMildFloor);
  } else if (name == "lossy2-moderate") {
    sc = lossy2(kModerateFloor);
  } else if (name == "lossy2-severe") {
    sc = lossy2(kSevereFloor);
  } else if (name == "hetero") {
    sc = hetero(params.agents);
  } else {
    throw ValidationError("unknown scenario '" + name + "'");
  }
  sc.name = name;
  return sc;
}

}  // namespace wncs

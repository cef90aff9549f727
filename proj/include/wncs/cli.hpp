#pragma once

#include <charconv>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"
#include "wncs/scenarios.hpp"
#include "wncs/simulator.hpp"

namespace wncs {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------------------------
// Number formatting: shortest representation that parses back to the same double.

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ParseError("bad number '" + s + "'", 0, 0);
  return v;
}

// ---------------------------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  std::string scenario;                  // library name, or the inline scenario's name
  std::optional<nlohmann::json> inline_scenario;
  std::vector<Strategy> strategies;
  std::vector<int> horizons;             // N sweep; empty means scenario default
  std::vector<int> capacities;           // gamma sweep; empty means scenario default
  std::vector<double> a_values{1.0};
  std::vector<int> agent_counts;         // M sweep (hetero)
  std::vector<bool> loss_aware{true};
  std::optional<double> floor;
  std::optional<int> runs;
  std::optional<int> steps;
  std::uint64_t seed = 1;
  std::string out_dir = "results";
  bool emit_traces = false;
  nlohmann::json source;  // validated document, used for the manifest hash
};

namespace detail {

inline std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

template <typename T>
std::vector<T> sweep(const nlohmann::json& doc, const std::string& key) {
  const auto& v = doc.at(key);
  std::vector<T> out;
  try {
    if (v.is_array()) {
      for (const auto& e : v) out.push_back(e.get<T>());
    } else {
      out.push_back(v.get<T>());
    }
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(key + ": wrong value type");
  }
  if (out.empty()) throw ValidationError(key + ": empty sweep");
  return out;
}

inline Matrix matrix_from_json(const nlohmann::json& j, const std::string& what) {
  if (j.is_number()) return Matrix::Constant(1, 1, j.get<double>());
  if (!j.is_array() || j.empty()) throw ValidationError(what + ": expected a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  Eigen::Index cols = -1;
  Matrix m;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[r];
    if (row.is_number()) {
      if (cols == -1) {
        cols = 1;
        m.resize(rows, 1);
      }
      if (cols != 1) throw ValidationError(what + ": ragged rows");
      m(r, 0) = row.get<double>();
      continue;
    }
    if (!row.is_array()) throw ValidationError(what + ": rows must be arrays of numbers");
    if (cols == -1) {
      cols = static_cast<Eigen::Index>(row.size());
      m.resize(rows, cols);
    }
    if (static_cast<Eigen::Index>(row.size()) != cols) throw ValidationError(what + ": ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) {
      if (!row[c].is_number()) throw ValidationError(what + ": non-numeric entry");
      m(r, c) = row[c].get<double>();
    }
  }
  return m;
}

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) throw ValidationError(where + "unknown key \"" + it.key() + "\"");
  }
}

}  // namespace detail

// Inline scenario: {"name", "agents": [{A,B,C,W,V,X0,Q,R[,S][,K]}], "gamma", "N", "T", "runs",
// "sigma": {"model": "constant", "values": [...]} | {"model": "distance", "floor": f}}.
// An agent with "K" uses that gain, its Lyapunov matrix from Q and the weights R = I, S = K, Q = K^T K.
inline Scenario scenario_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("scenario: expected an object");
  detail::reject_unknown(j, {"name", "agents", "gamma", "N", "T", "runs", "sigma"}, "scenario: ");
  Scenario sc;
  sc.name = j.value("name", std::string("inline"));
  if (!j.contains("agents") || !j["agents"].is_array() || j["agents"].empty()) {
    throw ValidationError("scenario.agents: expected a non-empty array");
  }
  int idx = 0;
  for (const auto& a : j["agents"]) {
    const std::string where = "scenario.agents[" + std::to_string(idx++) + "].";
    detail::reject_unknown(a, {"A", "B", "C", "W", "V", "X0", "Q", "R", "S", "K"}, where);
    for (const char* key : {"A", "B", "C", "W", "V", "X0", "Q"}) {
      if (!a.contains(key)) throw ValidationError(where + key + ": missing");
    }
    auto get = [&](const char* key) { return detail::matrix_from_json(a.at(key), where + key); };
    SystemMatrices sys{get("A"), get("B"), get("C")};
    try {
      sys.validate();
    } catch (const DimensionMismatch& e) {
      throw ValidationError(where + e.what());
    }
    NoiseModel noise = NoiseModel::make(get("W"), get("V"), get("X0"));
    ControllerDesign design;
    try {
      noise.validate(sys);
      if (a.contains("K")) {
        design = design_from_gain(sys, get("K"), get("Q"));
      } else {
        if (!a.contains("R")) throw ValidationError(where + "R: missing");
        LqrWeights w{get("Q"), get("R"), a.contains("S") ? get("S") : Matrix::Zero(sys.inputs(), sys.states())};
        w.validate(sys.states(), sys.inputs());
        design = design_lqr(sys, w);
      }
    } catch (const DimensionMismatch& e) {
      throw ValidationError(where + e.what());
    }
    sc.agents.push_back({sys, noise, design});
  }
  const int M = sc.agent_count();
  sc.capacity = j.value("gamma", 1);
  sc.horizon = j.value("N", 1);
  sc.steps = j.value("T", 100);
  sc.runs = j.value("runs", 1);
  sc.sigma = SigmaModel::constant_for(std::vector<double>(M, 1.0));
  if (j.contains("sigma")) {
    const auto& s = j["sigma"];
    detail::reject_unknown(s, {"model", "values", "floor"}, "scenario.sigma: ");
    const std::string model = s.value("model", std::string("constant"));
    if (model == "constant") {
      auto values = s.value("values", std::vector<double>(M, 1.0));
      if (static_cast<int>(values.size()) != M) throw ValidationError("scenario.sigma.values: one value per agent");
      for (double v : values) {
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("scenario.sigma.values: must lie in [0,1]");
      }
      sc.sigma = SigmaModel::constant_for(values);
    } else if (model == "distance") {
      const double fl = s.value("floor", std::exp(-1.0));
      if (!(fl > 0.0 && fl <= 1.0)) throw ValidationError("scenario.sigma.floor: must lie in (0,1]");
      sc.sigma = SigmaModel::distance(fl);
    } else {
      throw ValidationError("scenario.sigma.model: expected \"constant\" or \"distance\"");
    }
  }
  return sc;
}

inline RunConfig parse_config(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = detail::line_column(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ParseError(std::string("invalid JSON: ") + e.what(), line, col);
  }
  if (!doc.is_object()) throw ValidationError("config: expected a JSON object");
  detail::reject_unknown(doc,
                         {"scenario", "strategy", "N", "gamma", "a", "M", "loss_aware", "floor", "seed", "runs",
                          "T", "out", "emit_traces"},
                         "config: ");

  RunConfig cfg;
  if (!doc.contains("scenario")) throw ValidationError("scenario: missing");
  if (doc["scenario"].is_string()) {
    cfg.scenario = doc["scenario"].get<std::string>();
    if (!scenario_exists(cfg.scenario)) throw ValidationError("scenario: unknown scenario \"" + cfg.scenario + "\"");
  } else if (doc["scenario"].is_object()) {
    scenario_from_json(doc["scenario"]);  // validates eagerly
    cfg.inline_scenario = doc["scenario"];
    cfg.scenario = doc["scenario"].value("name", std::string("inline"));
  } else {
    throw ValidationError("scenario: expected a name or an inline definition");
  }

  if (!doc.contains("strategy")) throw ValidationError("strategy: missing");
  for (const auto& name : detail::sweep<std::string>(doc, "strategy")) {
    auto s = parse_strategy(name);
    if (!s) throw ValidationError("strategy: unknown strategy \"" + name + "\"");
    cfg.strategies.push_back(*s);
  }
  if (doc.contains("N")) {
    cfg.horizons = detail::sweep<int>(doc, "N");
    for (int n : cfg.horizons) {
      if (n < 1) throw ValidationError("N: values must be >= 1");
    }
  }
  if (doc.contains("gamma")) {
    cfg.capacities = detail::sweep<int>(doc, "gamma");
    for (int g : cfg.capacities) {
      if (g < 1) throw ValidationError("gamma: values must be >= 1");
    }
  }
  if (doc.contains("a")) {
    cfg.a_values = detail::sweep<double>(doc, "a");
    for (double a : cfg.a_values) {
      if (!(a > 0.0)) throw ValidationError("a: values must be > 0");
    }
  }
  if (doc.contains("M")) {
    cfg.agent_counts = detail::sweep<int>(doc, "M");
    for (int m : cfg.agent_counts) {
      if (m < 1) throw ValidationError("M: values must be >= 1");
    }
  }
  if (doc.contains("loss_aware")) cfg.loss_aware = detail::sweep<bool>(doc, "loss_aware");
  try {
    if (doc.contains("floor")) {
      cfg.floor = doc["floor"].get<double>();
      if (!(*cfg.floor > 0.0 && *cfg.floor <= 1.0)) throw ValidationError("floor: must lie in (0,1]");
    }
    if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("runs")) {
      cfg.runs = doc["runs"].get<int>();
      if (*cfg.runs < 1) throw ValidationError("runs: must be >= 1");
    }
    if (doc.contains("T")) {
      cfg.steps = doc["T"].get<int>();
      if (*cfg.steps < 2) throw ValidationError("T: must be >= 2");
    }
    if (doc.contains("out")) cfg.out_dir = doc["out"].get<std::string>();
    if (doc.contains("emit_traces")) cfg.emit_traces = doc["emit_traces"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: wrong value type (") + e.what() + ")");
  }
  cfg.source = doc;
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------------------------
// Traces

inline const char* const kTraceFixedColumns[] = {"step", "agent", "delta", "s", "sigma", "stage_cost", "tr_gamma_E", "tr_P_X"};

inline void write_trace(const SimTrace& trace, std::ostream& out) {
  Eigen::Index n = 0;
  for (const auto& r : trace.records) n = std::max(n, r.x.size());
  std::string header;
  for (const char* c : kTraceFixedColumns) header += std::string(header.empty() ? "" : ",") + c;
  for (Eigen::Index j = 0; j < n; ++j) header += ",x" + std::to_string(j);
  for (Eigen::Index j = 0; j < n; ++j) header += ",xhat" + std::to_string(j);
  out << header << '\n';
  for (int k = 0; k < trace.steps; ++k) {
    for (int i = 0; i < trace.agents; ++i) {
      const auto& r = trace.at(k, i);
      out << k << ',' << i << ',' << r.delta << ',' << r.s << ',' << format_double(r.sigma) << ','
          << format_double(r.stage_cost) << ',' << format_double(r.tr_gamma_E) << ',' << format_double(r.tr_P_X);
      for (Eigen::Index j = 0; j < n; ++j) out << ',' << (j < r.x.size() ? format_double(r.x(j)) : "");
      for (Eigen::Index j = 0; j < n; ++j) out << ',' << (j < r.xhat.size() ? format_double(r.xhat(j)) : "");
      out << '\n';
    }
  }
}

inline void emit_trace(const SimTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write trace " + path.string());
  write_trace(trace, out);
  if (!out) throw IoError("error writing trace " + path.string());
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

// Inverse of write_trace for the emitted columns (u and E are not part of the file).
inline SimTrace read_trace(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("trace: missing header", 1, 1);
  const auto header = detail::split_csv(line);
  if (header.size() < 8 || (header.size() - 8) % 2 != 0) throw ParseError("trace: malformed header", 1, 1);
  const std::size_t n = (header.size() - 8) / 2;
  std::vector<std::vector<std::string>> rows;
  int max_step = -1, max_agent = -1;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = detail::split_csv(line);
    if (cells.size() != header.size()) throw ParseError("trace: wrong column count", lineno, 1);
    max_step = std::max(max_step, std::stoi(cells[0]));
    max_agent = std::max(max_agent, std::stoi(cells[1]));
    rows.push_back(std::move(cells));
  }
  SimTrace t{max_agent + 1, max_step + 1, {}};
  t.records.resize(static_cast<std::size_t>(t.agents) * t.steps);
  for (const auto& c : rows) {
    AgentStep& r = t.at(std::stoi(c[0]), std::stoi(c[1]));
    r.delta = std::stoi(c[2]);
    r.s = std::stoi(c[3]);
    r.sigma = parse_double(c[4]);
    r.stage_cost = parse_double(c[5]);
    r.tr_gamma_E = parse_double(c[6]);
    r.tr_P_X = parse_double(c[7]);
    std::size_t width = 0;
    while (width < n && !c[8 + width].empty()) ++width;
    r.x.resize(width);
    r.xhat.resize(width);
    for (std::size_t j = 0; j < width; ++j) {
      r.x(j) = parse_double(c[8 + j]);
      r.xhat(j) = parse_double(c[8 + n + j]);
    }
  }
  return t;
}

// ---------------------------------------------------------------------------------------------
// Experiments

struct ResultRow {
  std::string scenario;
  Strategy strategy = Strategy::Exhaustive;
  bool loss_aware = true;
  int N = 1;
  int gamma = 1;
  double a = 1.0;
  int M = 1;
  double floor = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 1;
  int runs = 1;
  int T = 1;
  MCStats stats;
  double wall_ms = 0.0;
};

// results.csv column order; stable within a major version.
inline const char* const kResultColumns[] = {"scenario", "strategy", "loss_aware", "N",       "gamma",
                                             "a",        "M",        "floor",      "seed",    "runs",
                                             "T",        "J_mean",   "J_stderr",   "J_trace_mean",
                                             "ratio_r",  "grants"};

inline std::string result_header() {
  std::string h;
  for (const char* c : kResultColumns) h += std::string(h.empty() ? "" : ",") + c;
  return h;
}

inline std::string result_line(const ResultRow& r) {
  std::ostringstream out;
  out << r.scenario << ',' << to_string(r.strategy) << ',' << (r.loss_aware ? 1 : 0) << ',' << r.N << ',' << r.gamma
      << ',' << format_double(r.a) << ',' << r.M << ',' << (std::isnan(r.floor) ? "" : format_double(r.floor)) << ','
      << r.seed << ',' << r.runs << ',' << r.T << ',' << format_double(r.stats.J_mean) << ','
      << format_double(r.stats.J_stderr) << ',' << format_double(r.stats.trace_cost_mean) << ','
      << (std::isnan(r.stats.ratio) ? "" : format_double(r.stats.ratio)) << ',';
  for (std::size_t i = 0; i < r.stats.grants_mean.size(); ++i) {
    out << (i ? ";" : "") << format_double(r.stats.grants_mean[i]);
  }
  return out.str();
}

// FNV-1a over the canonical (sorted-key) JSON dump.
inline std::string config_hash(const nlohmann::json& doc) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : doc.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

struct SweepPoint {
  Strategy strategy;
  bool loss_aware;
  int N;
  int gamma;
  double a;
  int M;
};

inline Scenario scenario_for(const RunConfig& cfg, const SweepPoint& pt) {
  Scenario sc;
  if (cfg.inline_scenario) {
    sc = scenario_from_json(*cfg.inline_scenario);
  } else {
    ScenarioParams params;
    params.a = pt.a;
    if (pt.M > 0) params.agents = pt.M;
    if (cfg.floor) params.floor = *cfg.floor;
    sc = make_scenario(cfg.scenario, params);
  }
  sc.strategy = pt.strategy;
  sc.loss_aware = pt.loss_aware;
  if (pt.N > 0) sc.horizon = pt.N;
  if (pt.gamma > 0) sc.capacity = pt.gamma;
  if (cfg.runs) sc.runs = *cfg.runs;
  if (cfg.steps) sc.steps = *cfg.steps;
  sc.seed = cfg.seed;
  if (sc.steps < sc.horizon + 1) sc.steps = sc.horizon + 1;
  return sc;
}

inline std::vector<SweepPoint> sweep_points(const RunConfig& cfg) {
  std::vector<SweepPoint> pts;
  const std::vector<int> Ns = cfg.horizons.empty() ? std::vector<int>{0} : cfg.horizons;
  const std::vector<int> gammas = cfg.capacities.empty() ? std::vector<int>{0} : cfg.capacities;
  const std::vector<int> Ms = cfg.agent_counts.empty() ? std::vector<int>{0} : cfg.agent_counts;
  for (Strategy s : cfg.strategies) {
    for (bool aware : cfg.loss_aware) {
      for (int M : Ms) {
        for (double a : cfg.a_values) {
          for (int g : gammas) {
            for (int N : Ns) pts.push_back({s, aware, N, g, a, M});
          }
        }
      }
    }
  }
  return pts;
}

struct ExperimentOutput {
  std::vector<ResultRow> rows;
  std::filesystem::path results_csv;
  std::filesystem::path manifest;
};

// Runs the Cartesian sweep sequentially; Monte Carlo runs of one point run in parallel.
// results.csv is flushed after every row so a failure leaves the completed rows on disk.
inline ExperimentOutput run_experiment(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path out_dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

  ExperimentOutput result{{}, out_dir / "results.csv", out_dir / "manifest.json"};
  std::ofstream csv(result.results_csv, std::ios::binary);
  std::ofstream timings(out_dir / "timings.csv", std::ios::binary);
  if (!csv || !timings) throw IoError("cannot write into " + out_dir.string());
  csv << result_header() << '\n' << std::flush;
  timings << "row,wall_ms\n";

  const auto points = sweep_points(cfg);
  for (std::size_t idx = 0; idx < points.size(); ++idx) {
    const auto& pt = points[idx];
    const Scenario sc = scenario_for(cfg, pt);
    const auto t0 = std::chrono::steady_clock::now();

    ResultRow row;
    row.scenario = cfg.scenario;
    row.strategy = pt.strategy;
    row.loss_aware = pt.loss_aware;
    row.N = sc.horizon;
    row.gamma = sc.capacity;
    row.a = pt.a;
    row.M = sc.agent_count();
    if (sc.sigma.kind == SigmaModel::Kind::Distance) row.floor = sc.sigma.floor;
    row.seed = sc.seed;
    row.runs = sc.runs;
    row.T = sc.steps;
    if (cfg.emit_traces) {
      auto traces = parallel_runs<SimTrace>(sc.runs, [&](int r) { return run_closed_loop(sc, r); });
      std::vector<RunSummary> summaries;
      const fs::path trace_dir = out_dir / "traces";
      fs::create_directories(trace_dir, ec);
      if (ec) throw IoError("cannot create " + trace_dir.string());
      for (std::size_t r = 0; r < traces.size(); ++r) {
        summaries.push_back(summarize(traces[r]));
        emit_trace(traces[r], trace_dir / ("point" + std::to_string(idx) + "_run" + std::to_string(r) + ".csv"));
      }
      row.stats = aggregate(summaries);
    } else {
      row.stats = monte_carlo(sc);
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    csv << result_line(row) << '\n' << std::flush;
    timings << idx << ',' << format_double(row.wall_ms) << '\n' << std::flush;
    if (!csv) throw IoError("error writing " + result.results_csv.string());
    result.rows.push_back(std::move(row));
  }

  nlohmann::json manifest;
  manifest["config"] = cfg.source;
  manifest["config_hash"] = config_hash(cfg.source);
  manifest["seed"] = cfg.seed;
  manifest["rows"] = result.rows.size();
  manifest["columns"] = std::vector<std::string>(std::begin(kResultColumns), std::end(kResultColumns));
  manifest["versions"] = {{"wncs", kVersion},
                          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                        "." + std::to_string(EIGEN_MINOR_VERSION)},
                          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  std::ofstream mf(result.manifest, std::ios::binary);
  if (!mf) throw IoError("cannot write " + result.manifest.string());
  mf << manifest.dump(2) << '\n';
  return result;
}

}  // namespace wncs

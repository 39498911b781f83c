#include "morseflow/driver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "morseflow/critical.hpp"
#include "morseflow/heatflow.hpp"

namespace fs = std::filesystem;
using njson = nlohmann::ordered_json;

namespace morseflow {

std::uint64_t fnv1a(const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string fnv1a_hex(const std::string& bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(bytes.data(), bytes.size())));
  return buf;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

std::time_t driver_epoch() {
  if (const char* e = std::getenv("SOURCE_DATE_EPOCH")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(e, &end, 10);
    if (end != nullptr && *end == '\0') return static_cast<std::time_t>(v);
  }
  return std::time(nullptr);
}

std::string utc_stamp(std::time_t t) {
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<int> to_std(const Eigen::VectorXi& v) {
  return std::vector<int>(v.data(), v.data() + v.size());
}

njson vector_json(const Eigen::VectorXd& v) {
  njson a = njson::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

// ------------------------------------------------------------- scenario io

njson scenario_to_json(const Scenario& s) {
  njson j;
  j["id"] = s.id;
  j["backend"] = s.backend;
  j["winding"] = to_std(s.winding);
  njson cos_terms = njson::array();
  for (const CosTerm& c : s.perturbation.cos_terms)
    cos_terms.push_back({{"amplitude", c.amplitude},
                         {"k", to_std(c.k)},
                         {"omega", c.omega},
                         {"phase", c.phase}});
  njson height_terms = njson::array();
  for (const HeightTerm& h : s.perturbation.height_terms)
    height_terms.push_back({{"amplitude", h.amplitude},
                            {"axis", {h.axis[0], h.axis[1], h.axis[2]}},
                            {"omega", h.omega},
                            {"phase", h.phase}});
  j["perturbation"] = {{"cos_terms", cos_terms}, {"height_terms", height_terms}};
  j["grid"] = {{"n_t", s.grid.n_t},
               {"n_s", s.grid.n_s},
               {"S", s.grid.S},
               {"step_h", s.grid.step_h},
               {"s_budget", s.grid.s_budget}};
  j["lift"] = {{"n_t", s.lift.lift_nt},
               {"h_s", s.lift.lift_hs},
               {"S", s.lift.lift_S},
               {"p", s.lift.p}};
  j["eps_list"] = s.eps_list;
  j["count_eps"] = s.count_eps;
  j["p_list"] = s.p_list;
  j["action_cut"] = s.action_cut;
  j["seed"] = s.seed;
  j["starts_per_dim"] = s.starts_per_dim;
  j["shift_sigma"] = s.shift_sigma;
  j["homology"] = {{"cuts", s.homology_cuts},
                   {"eps", s.homology_eps},
                   {"reference", s.reference}};
  return j;
}

template <typename T>
T get_key(const njson& j, const std::string& key) {
  if (!j.contains(key))
    throw ConfigError("config is missing required key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

template <typename T>
T get_key(const njson& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

Eigen::VectorXi from_std(const std::vector<int>& v) {
  Eigen::VectorXi out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

Scenario scenario_from_json(const njson& j) {
  Scenario s;
  s.id = get_key<std::string>(j, "id");
  s.backend = get_key<std::string>(j, "backend");
  s.winding = from_std(get_key<std::vector<int>>(j, "winding", {}));
  const njson pj = get_key<njson>(j, "perturbation");
  for (const njson& cj : get_key<njson>(pj, "cos_terms", njson::array())) {
    CosTerm c;
    c.amplitude = get_key<double>(cj, "amplitude");
    c.k = from_std(get_key<std::vector<int>>(cj, "k"));
    c.omega = get_key<int>(cj, "omega", 0);
    c.phase = get_key<double>(cj, "phase", 0.0);
    s.perturbation.cos_terms.push_back(std::move(c));
  }
  for (const njson& hj : get_key<njson>(pj, "height_terms", njson::array())) {
    HeightTerm h;
    h.amplitude = get_key<double>(hj, "amplitude");
    const std::vector<double> axis =
        get_key<std::vector<double>>(hj, "axis", {0.0, 0.0, 1.0});
    if (axis.size() != 3)
      throw ConfigError("height term axis must have three components");
    h.axis = Eigen::Vector3d(axis[0], axis[1], axis[2]);
    h.omega = get_key<int>(hj, "omega", 0);
    h.phase = get_key<double>(hj, "phase", 0.0);
    s.perturbation.height_terms.push_back(std::move(h));
  }
  const njson gj = get_key<njson>(j, "grid");
  s.grid.n_t = get_key<int>(gj, "n_t");
  s.grid.n_s = get_key<int>(gj, "n_s");
  s.grid.S = get_key<double>(gj, "S");
  s.grid.step_h = get_key<double>(gj, "step_h", 0.05);
  s.grid.s_budget = get_key<double>(gj, "s_budget", 400.0);
  const njson lj = get_key<njson>(j, "lift", njson::object());
  s.lift.lift_nt = get_key<int>(lj, "n_t", 16);
  s.lift.lift_hs = get_key<double>(lj, "h_s", 0.06);
  s.lift.lift_S = get_key<double>(lj, "S", 24.0);
  s.lift.p = get_key<double>(lj, "p", 2.0);
  s.eps_list = get_key<std::vector<double>>(j, "eps_list");
  s.count_eps = get_key<std::vector<double>>(j, "count_eps", {0.1, 0.05});
  s.p_list = get_key<std::vector<double>>(j, "p_list", {2.0});
  s.action_cut = get_key<double>(j, "action_cut");
  s.seed = get_key<std::uint64_t>(j, "seed");
  s.starts_per_dim = get_key<int>(j, "starts_per_dim", 8);
  s.shift_sigma = get_key<double>(j, "shift_sigma", 0.07);
  const njson hj = get_key<njson>(j, "homology", njson::object());
  s.homology_cuts = get_key<std::vector<double>>(hj, "cuts", {});
  s.homology_eps = get_key<double>(hj, "eps", 0.1);
  s.reference = get_key<std::string>(hj, "reference", "");
  return s;
}

bool descending(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] < v[i - 1])) return false;
  return true;
}

// ------------------------------------------------------------- file pieces

void atomic_write(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ConfigError("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string dump(const njson& j) { return j.dump(2) + "\n"; }

// ------------------------------------------------------------ stage shared

std::vector<DiscreteLoop> make_starts(const Scenario& s) {
  const Manifold man = s.manifold();
  std::vector<DiscreteLoop> starts;
  if (!man.flat()) {
    for (int axis = 0; axis < 3; ++axis)
      for (int sign = -1; sign <= 1; sign += 2) {
        Eigen::VectorXd p = Eigen::VectorXd::Zero(3);
        p[axis] = sign;
        starts.push_back(make_constant_loop(man, p, s.grid.n_t));
      }
    return starts;
  }
  const int d = man.dim();
  const int spd = s.starts_per_dim;
  const int nt = s.grid.n_t;
  int total = 1;
  for (int i = 0; i < d; ++i) total *= spd;
  for (int c = 0; c < total; ++c) {
    DiscreteLoop lp;
    lp.man = man;
    lp.nodes.resize(d, nt);
    int rem = c;
    for (int i = 0; i < d; ++i) {
      const double base = static_cast<double>(rem % spd) / spd;
      rem /= spd;
      for (int k = 0; k < nt; ++k)
        lp.nodes(i, k) =
            wrap_unit(base + static_cast<double>(s.winding[i]) * k / nt);
    }
    validate_loop(lp);
    starts.push_back(std::move(lp));
  }
  return starts;
}

bool same_winding(const Eigen::VectorXi& a, const Eigen::VectorXi& b) {
  return a.size() == b.size() && a == b;
}

std::vector<PeriodicOrbit> scenario_orbits(const Scenario& s) {
  std::vector<PeriodicOrbit> all =
      enumerate_orbits(s.perturbation, s.action_cut, make_starts(s));
  if (!s.manifold().flat()) return all;
  std::vector<PeriodicOrbit> out;
  for (PeriodicOrbit& o : all)
    if (same_winding(winding_vector(o.loop), s.winding)) out.push_back(std::move(o));
  return out;
}

struct PairKey {
  int upper = 0;
  int lower = 0;
};

std::vector<PairKey> connecting_pairs(const std::vector<PeriodicOrbit>& orbits) {
  std::vector<PairKey> pairs;
  for (int i = 0; i < static_cast<int>(orbits.size()); ++i)
    for (int j = 0; j < static_cast<int>(orbits.size()); ++j)
      if (orbits[static_cast<std::size_t>(i)].index ==
              orbits[static_cast<std::size_t>(j)].index + 1 &&
          orbits[static_cast<std::size_t>(i)].action >
              orbits[static_cast<std::size_t>(j)].action)
        pairs.push_back({i, j});
  return pairs;
}

EpsEnumOptions enum_opts(const Scenario& s) {
  EpsEnumOptions o = s.lift;
  o.m0_grid = s.grid_spec();
  return o;
}

Cylinder to_lift_grid(const Cylinder& r, const Scenario& s) {
  const double S2 = std::min(s.lift.lift_S, r.S);
  const int ns2 = 2 * static_cast<int>(std::llround(S2 / s.lift.lift_hs)) + 1;
  return regrid_cylinder(r, s.perturbation, S2, ns2, s.lift.lift_nt);
}

double lls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ------------------------------------------------------------------ stages

njson orbit_row(const std::string& id, const PeriodicOrbit& o) {
  njson row;
  row["orbit"] = id;
  row["index"] = o.index;
  row["action"] = o.action;
  row["lowest_eigenvalue"] =
      o.spectrum_head.size() > 0 ? o.spectrum_head[0] : 0.0;
  row["margin"] = o.nondeg_margin;
  row["residual"] = o.residual;
  row["winding"] = to_std(winding_vector(o.loop));
  row["x0"] = vector_json(o.loop.nodes.col(0));
  return row;
}

njson stage_orbits(const Scenario& s) {
  const std::vector<PeriodicOrbit> orbits = scenario_orbits(s);
  njson rows = njson::array();
  for (std::size_t k = 0; k < orbits.size(); ++k)
    rows.push_back(orbit_row("o" + std::to_string(k), orbits[k]));
  njson out;
  out["orbit_count"] = orbits.size();
  out["orbits"] = rows;
  return out;
}

njson stage_heat_connect(const Scenario& s) {
  const std::vector<PeriodicOrbit> orbits = scenario_orbits(s);
  const std::vector<PairKey> pairs = connecting_pairs(orbits);
  njson jpairs = njson::array();
  int total = 0;
  for (const PairKey& pk : pairs) {
    const PeriodicOrbit& up = orbits[static_cast<std::size_t>(pk.upper)];
    const PeriodicOrbit& lo = orbits[static_cast<std::size_t>(pk.lower)];
    const std::vector<Cylinder> reps =
        enumerate_M0(up, lo, s.perturbation, s.grid_spec());
    njson jcyl = njson::array();
    const double drop = up.action - lo.action;
    for (const Cylinder& r : reps) {
      const double energy = cylinder_energy(r);
      njson slices = njson::array();
      for (int j = 0; j < r.ns(); ++j) {
        njson row = njson::array();
        row.push_back(r.s_of(j));
        const Eigen::MatrixXd& nodes = r.loops[static_cast<std::size_t>(j)].nodes;
        for (int k = 0; k < nodes.cols(); ++k)
          for (int i = 0; i < nodes.rows(); ++i) row.push_back(nodes(i, k));
        slices.push_back(std::move(row));
      }
      jcyl.push_back({{"energy", energy},
                      {"energy_gap", std::abs(energy - drop)},
                      {"residual", heat_residual_sup(r, s.perturbation)},
                      {"spectral_flow", spectral_flow_index(r, s.perturbation)},
                      {"S", r.S},
                      {"h_s", r.h_s},
                      {"n_s", r.ns()},
                      {"n_t", r.nt()},
                      {"slices", std::move(slices)}});
    }
    total += static_cast<int>(reps.size());
    jpairs.push_back({{"upper", "o" + std::to_string(pk.upper)},
                      {"lower", "o" + std::to_string(pk.lower)},
                      {"action_drop", drop},
                      {"count", reps.size()},
                      {"cylinders", std::move(jcyl)}});
  }
  njson out;
  out["pair_count"] = pairs.size();
  out["cylinder_count"] = total;
  out["pairs"] = jpairs;
  return out;
}

double pair_gap_sup(const CylinderPair& w) {
  double gap = 0.0;
  for (std::size_t j = 0; j < w.u.loops.size(); ++j)
    gap = std::max(gap, sup_norm(velocity(w.u.loops[j]).vectors -
                                 w.v[j].vectors));
  return gap / (w.eps * w.eps);
}

njson lift_rows(const Scenario& s, const std::vector<double>& eps_list,
                bool with_history) {
  const std::vector<PeriodicOrbit> orbits = scenario_orbits(s);
  const std::vector<PairKey> pairs = connecting_pairs(orbits);
  njson cylinders = njson::array();
  for (const PairKey& pk : pairs) {
    const PeriodicOrbit& up = orbits[static_cast<std::size_t>(pk.upper)];
    const PeriodicOrbit& lo = orbits[static_cast<std::size_t>(pk.lower)];
    const std::vector<Cylinder> reps =
        enumerate_M0(up, lo, s.perturbation, s.grid_spec());
    for (std::size_t c = 0; c < reps.size(); ++c) {
      const Cylinder ul = to_lift_grid(reps[c], s);
      const double drop = ul.xminus.action - ul.xplus.action;
      njson points = njson::array();
      std::vector<double> log_eps, log_corr, rhos;
      for (double eps : eps_list) {
        LiftReport lr;
        const CylinderPair w =
            newton_picard_lift(ul, eps, s.lift.p, s.perturbation, &lr);
        const double energy = energy_eps(w, s.perturbation);
        const DecayFit decay = fit_energy_decay(w, s.perturbation);
        njson pt;
        pt["eps"] = eps;
        pt["iterations"] = lr.iterations;
        pt["converged"] = lr.converged;
        pt["residual"] =
            lr.residual_history.empty() ? 0.0 : lr.residual_history.back();
        pt["correction"] = lr.correction_total;
        pt["energy"] = energy;
        pt["action_drop"] = drop;
        pt["energy_gap"] = std::abs(energy - drop);
        pt["gap_sup"] = pair_gap_sup(w);
        pt["exact"] = w.exact;
        pt["decay_rho"] = decay.rho;
        pt["decay_rms"] = decay.rms;
        pt["decay_ok"] = decay.ok;
        if (with_history) {
          pt["residual_history"] = lr.residual_history;
          pt["correction_history"] = lr.correction_history;
        }
        if (lr.correction_total > 0.0) {
          log_eps.push_back(std::log(eps));
          log_corr.push_back(std::log(lr.correction_total));
        }
        if (decay.ok && decay.rho > 0.0) rhos.push_back(decay.rho);
        points.push_back(std::move(pt));
      }
      njson jc;
      jc["pair"] = "o" + std::to_string(pk.upper) + "->o" +
                   std::to_string(pk.lower);
      jc["cylinder"] = c;
      jc["action_drop"] = drop;
      jc["n_s"] = ul.ns();
      jc["n_t"] = ul.nt();
      jc["S"] = ul.S;
      jc["fit_exponent"] = log_eps.size() >= 2 ? lls_slope(log_eps, log_corr) : 0.0;
      if (!rhos.empty()) {
        const auto [lo_it, hi_it] = std::minmax_element(rhos.begin(), rhos.end());
        jc["rho_min"] = *lo_it;
        jc["rho_max"] = *hi_it;
        jc["rho_spread"] = *lo_it > 0.0 ? *hi_it / *lo_it : 0.0;
      } else {
        jc["rho_min"] = 0.0;
        jc["rho_max"] = 0.0;
        jc["rho_spread"] = 0.0;
      }
      jc["points"] = std::move(points);
      cylinders.push_back(std::move(jc));
    }
  }
  njson out;
  out["eps_list"] = eps_list;
  out["cylinders"] = cylinders;
  return out;
}

njson stage_floer_lift(const Scenario& s) { return lift_rows(s, s.eps_list, true); }

njson stage_sweep(const Scenario& s) { return lift_rows(s, s.eps_list, false); }

njson stage_count_check(const Scenario& s) {
  const std::vector<PeriodicOrbit> orbits = scenario_orbits(s);
  const std::vector<PairKey> pairs = connecting_pairs(orbits);
  const EpsEnumOptions opts = enum_opts(s);
  njson jpairs = njson::array();
  bool all_equal = true;
  Cylinder first_rep;
  bool have_rep = false;
  CylinderPair first_lift;
  bool have_lift = false;
  for (const PairKey& pk : pairs) {
    const PeriodicOrbit& up = orbits[static_cast<std::size_t>(pk.upper)];
    const PeriodicOrbit& lo = orbits[static_cast<std::size_t>(pk.lower)];
    const std::vector<Cylinder> m0 =
        enumerate_M0(up, lo, s.perturbation, s.grid_spec());
    if (!m0.empty() && !have_rep) {
      first_rep = m0.front();
      have_rep = true;
    }
    njson per_eps = njson::array();
    for (double eps : s.count_eps) {
      const std::vector<CylinderPair> lifts =
          enumerate_M_eps(up, lo, eps, s.perturbation, opts);
      njson jl = njson::array();
      double max_gap = 0.0;
      for (const CylinderPair& w : lifts) {
        const double drop = w.u.xminus.action - w.u.xplus.action;
        const double gap = std::abs(energy_eps(w, s.perturbation) - drop);
        max_gap = std::max(max_gap, gap);
        jl.push_back({{"exact", w.exact}, {"energy_gap", gap}});
      }
      if (!lifts.empty() && !have_lift) {
        first_lift = lifts.front();
        have_lift = true;
      }
      const bool equal = lifts.size() == m0.size();
      all_equal = all_equal && equal;
      per_eps.push_back({{"eps", eps},
                         {"count_eps", lifts.size()},
                         {"equal", equal},
                         {"distinct", true},
                         {"max_energy_gap", max_gap},
                         {"lifts", std::move(jl)}});
    }
    jpairs.push_back({{"upper", "o" + std::to_string(pk.upper)},
                      {"lower", "o" + std::to_string(pk.lower)},
                      {"count_m0", m0.size()},
                      {"per_eps", std::move(per_eps)}});
  }
  njson uniq;
  uniq["checked"] = have_lift;
  if (have_lift) {
    const CylinderPair again = newton_picard_lift(first_lift.u, first_lift.eps,
                                                  s.lift.p, s.perturbation);
    uniq["eps"] = first_lift.eps;
    uniq["same"] = verify_uniqueness(first_lift.u, first_lift, again,
                                     first_lift.eps, s.perturbation);
  }
  njson shift;
  shift["checked"] = have_rep && !s.count_eps.empty();
  if (have_rep && !s.count_eps.empty()) {
    const double eps0 = s.count_eps.front();
    const Cylinder u0 = to_lift_grid(first_rep, s);
    const Cylinder us = shift_cylinder(u0, s.perturbation, s.shift_sigma);
    const CylinderPair w = newton_picard_lift(us, eps0, s.lift.p, s.perturbation);
    double c_measured = 0.0;
    const double sigma_hat =
        fit_time_shift(u0, w, eps0, s.lift.p, s.perturbation, 0.25, &c_measured);
    shift["eps"] = eps0;
    shift["sigma"] = s.shift_sigma;
    shift["sigma_hat"] = sigma_hat;
    shift["abs_error"] = std::abs(sigma_hat - s.shift_sigma);
    shift["c_measured"] = c_measured;
  }
  njson out;
  out["counts_all_equal"] = all_equal;
  out["pairs"] = jpairs;
  out["uniqueness"] = uniq;
  out["shift_recovery"] = shift;
  return out;
}

ComplexMode mode_from_string(const std::string& m) {
  if (m == "heat") return ComplexMode::Heat;
  if (m == "floer") return ComplexMode::Floer;
  throw ConfigError("unknown homology mode '" + m + "' (heat or floer)");
}

njson ranks_json(const std::vector<ComponentRanks>& ranks) {
  njson out = njson::array();
  for (const ComponentRanks& cr : ranks)
    out.push_back({{"winding", to_std(cr.winding)}, {"ranks", cr.ranks}});
  return out;
}

bool boundary_squares_to_zero(const ChainComplex& C) {
  for (std::size_t k = 2; k < C.boundary.size(); ++k) {
    const Eigen::MatrixXi& a = C.boundary[k - 1];
    const Eigen::MatrixXi& b = C.boundary[k];
    if (a.size() == 0 || b.size() == 0) continue;
    const Eigen::MatrixXi prod = a * b;
    for (Eigen::Index i = 0; i < prod.size(); ++i)
      if (prod(i) % 2 != 0) return false;
  }
  return true;
}

Eigen::MatrixXi mod2(const Eigen::MatrixXi& m) {
  return m.unaryExpr([](int x) { return x & 1; });
}

njson stage_homology(const Scenario& s, std::vector<std::string> modes) {
  if (modes.empty()) modes = {"heat", "floer"};
  ComplexOptions copts;
  copts.eps = s.homology_eps;
  copts.grid = s.grid_spec();
  copts.lift = enum_opts(s);
  const std::vector<DiscreteLoop> starts = make_starts(s);
  njson jmodes = njson::array();
  std::vector<std::vector<ComponentRanks>> mode_ranks;
  for (const std::string& m : modes) {
    const ChainComplex C = build_complex(s.perturbation, s.action_cut,
                                         mode_from_string(m), starts, copts);
    const std::vector<ComponentRanks> ranks = homology_ranks(C);
    mode_ranks.push_back(ranks);
    njson gens = njson::array();
    for (std::size_t g = 0; g < C.generators.size(); ++g)
      gens.push_back({{"index", C.generators[g].index},
                      {"action", C.generators[g].action},
                      {"winding", to_std(C.windings[g])}});
    njson bounds = njson::array();
    for (std::size_t k = 1; k < C.boundary.size(); ++k)
      bounds.push_back({{"degree", k}, {"bits", bitmatrix(C.boundary[k])}});
    njson jm;
    jm["mode"] = m;
    jm["eps"] = m == "floer" ? s.homology_eps : 0.0;
    jm["generator_count"] = C.generators.size();
    jm["degree_counts"] = degree_counts(C);
    jm["generators"] = std::move(gens);
    jm["d2_zero"] = boundary_squares_to_zero(C);
    jm["ranks"] = ranks_json(ranks);
    if (!s.reference.empty()) {
      const ReferenceReport ref = compare_reference(C, s.reference);
      jm["reference"] = {{"key", ref.key},
                         {"expected", ref.expected},
                         {"measured", ref.measured},
                         {"pass", ref.pass}};
    }
    jm["boundaries"] = std::move(bounds);
    jmodes.push_back(std::move(jm));
  }
  bool ranks_equal = true;
  for (std::size_t m = 1; m < mode_ranks.size(); ++m) {
    if (mode_ranks[m].size() != mode_ranks[0].size()) ranks_equal = false;
    for (std::size_t c = 0; ranks_equal && c < mode_ranks[m].size(); ++c)
      ranks_equal = same_winding(mode_ranks[m][c].winding,
                                 mode_ranks[0][c].winding) &&
                    mode_ranks[m][c].ranks == mode_ranks[0][c].ranks;
  }
  njson filt;
  filt["cuts"] = s.homology_cuts;
  filt["checked"] = s.homology_cuts.size() >= 3;
  if (s.homology_cuts.size() >= 3) {
    std::vector<ChainComplex> cs;
    njson cut_ranks = njson::array();
    for (double cut : s.homology_cuts) {
      cs.push_back(
          build_complex(s.perturbation, cut, ComplexMode::Heat, starts, copts));
      cut_ranks.push_back(ranks_json(homology_ranks(cs.back())));
    }
    bool functorial = true;
    const FiltrationMap f01 = filtration_map(cs[0], cs[1]);
    const FiltrationMap f12 = filtration_map(cs[1], cs[2]);
    const FiltrationMap f02 = filtration_map(cs[0], cs[2]);
    const std::size_t nk = std::min({f01.maps.size(), f12.maps.size(),
                                     f02.maps.size()});
    for (std::size_t k = 0; k < nk; ++k) {
      if (f01.maps[k].size() == 0 || f12.maps[k].size() == 0) {
        if (f02.maps[k].size() != 0 && mod2(f02.maps[k]).any())
          functorial = false;
        continue;
      }
      if (mod2(f12.maps[k] * f01.maps[k]) != mod2(f02.maps[k]))
        functorial = false;
    }
    filt["ranks"] = std::move(cut_ranks);
    filt["functorial"] = functorial;
  }
  njson out;
  out["modes"] = jmodes;
  out["ranks_equal_across_modes"] = ranks_equal;
  out["filtration"] = std::move(filt);
  return out;
}

njson report_json(const EstimateReport& r) {
  njson pts = njson::array();
  for (const EstimatePoint& pt : r.points)
    pts.push_back({{"label", pt.label},
                   {"eps", pt.eps},
                   {"p", pt.p},
                   {"grid", pt.grid},
                   {"measured", pt.measured},
                   {"bound_ok", pt.bound_ok}});
  njson j;
  j["estimate_id"] = r.estimate_id;
  j["max_measured"] = r.max_measured;
  j["uniformity"] = r.uniformity;
  j["stability"] = r.stability;
  j["all_ok"] = r.all_ok;
  j["points"] = std::move(pts);
  return j;
}

njson stage_estimates(const Scenario& s, const std::string& stage) {
  static const std::set<std::string> known = {
      "", "all", "mean-value", "multiplier", "lp", "eat", "linear", "nonlinear"};
  if (!known.count(stage))
    throw ConfigError("unknown estimates stage '" + stage + "'");
  const auto want = [&](const char* tag) {
    return stage.empty() || stage == "all" || stage == tag;
  };
  std::vector<EstimateReport> reports;
  if (want("mean-value"))
    for (double eps : {0.25, 1.0})
      for (double r : {0.5, 1.0})
        for (double a : {0.0, 1.0}) reports.push_back(mean_value_check(eps, r, a));
  if (want("multiplier"))
    for (MultiplierId id : {MultiplierId::CzM11, MultiplierId::CzM12,
                            MultiplierId::CzM21, MultiplierId::CzM22,
                            MultiplierId::ParabolicM})
      reports.push_back(multiplier_condition_check(id));
  if (want("lp")) {
    for (double p : s.p_list) {
      reports.push_back(lp_inequality_check(LpWhich::CZ, p));
      reports.push_back(lp_inequality_check(LpWhich::Parabolic, p));
    }
    reports.push_back(lp_inequality_check(LpWhich::CZEps, 2.0));
  }
  if (want("eat"))
    for (double p : s.p_list)
      for (double eps : s.eps_list) reports.push_back(eat_eps_check(p, eps));
  if (want("linear") || want("nonlinear")) {
    const std::vector<PeriodicOrbit> orbits = scenario_orbits(s);
    const std::vector<PairKey> pairs = connecting_pairs(orbits);
    if (pairs.empty())
      throw ConfigError("scenario has no connecting pairs for the sweeps");
    const std::vector<Cylinder> reps = enumerate_M0(
        orbits[static_cast<std::size_t>(pairs[0].upper)],
        orbits[static_cast<std::size_t>(pairs[0].lower)], s.perturbation,
        s.grid_spec());
    if (reps.empty())
      throw ConfigError("scenario has no connecting cylinder for the sweeps");
    const Cylinder ul = to_lift_grid(reps.front(), s);
    if (want("linear")) {
      for (double p : s.p_list)
        for (LinearWhich which : {LinearWhich::Elliptic, LinearWhich::Inverse,
                                  LinearWhich::Composite})
          reports.push_back(
              linear_estimate_sweep(ul, which, p, s.eps_list, s.perturbation));
      reports.push_back(linear_estimate_sweep(ul, LinearWhich::Balanced, 4.0,
                                              s.eps_list, s.perturbation));
    }
    if (want("nonlinear"))
      for (NonlinearWhich which :
           {NonlinearWhich::Apriori, NonlinearWhich::Gradient,
            NonlinearWhich::Second, NonlinearWhich::Decay})
        reports.push_back(nonlinear_bound_sweep(ul, which, s.eps_list,
                                                s.perturbation, s.lift));
  }
  njson jr = njson::array();
  bool all_ok = true;
  for (const EstimateReport& r : reports) {
    all_ok = all_ok && r.all_ok;
    jr.push_back(report_json(r));
  }
  njson out;
  out["stage"] = stage.empty() ? "all" : stage;
  out["report_count"] = reports.size();
  out["all_ok"] = all_ok;
  out["reports"] = std::move(jr);
  return out;
}

// --------------------------------------------------------------- rendering

std::string csv_bool(bool b) { return b ? "1" : "0"; }

std::string render_orbits_csv(const njson& summary) {
  std::string out;
  const njson& orbits = summary.at("orbits");
  std::size_t d = 1;
  if (!orbits.empty()) d = orbits.front().at("winding").size();
  out = "orbit,index,action,lowest_eig,margin,residual";
  for (std::size_t i = 0; i < d; ++i) out += ",winding_" + std::to_string(i);
  const std::size_t dx = orbits.empty() ? d : orbits.front().at("x0").size();
  for (std::size_t i = 0; i < dx; ++i) out += ",x0_" + std::to_string(i);
  out += "\n";
  for (const njson& row : orbits) {
    out += row.at("orbit").get<std::string>();
    out += "," + std::to_string(row.at("index").get<int>());
    out += "," + num(row.at("action").get<double>());
    out += "," + num(row.at("lowest_eigenvalue").get<double>());
    out += "," + num(row.at("margin").get<double>());
    out += "," + num(row.at("residual").get<double>());
    for (const njson& w : row.at("winding"))
      out += "," + std::to_string(w.get<int>());
    for (const njson& x : row.at("x0")) out += "," + num(x.get<double>());
    out += "\n";
  }
  return out;
}

std::string render_trajectories_csv(const njson& summary) {
  std::size_t ncoord = 0;
  for (const njson& pair : summary.at("pairs"))
    for (const njson& cyl : pair.at("cylinders"))
      if (!cyl.at("slices").empty())
        ncoord = std::max(ncoord, cyl.at("slices").front().size() - 1);
  std::string out = "pair,cylinder,slice,s";
  for (std::size_t i = 0; i < ncoord; ++i) out += ",u" + std::to_string(i);
  out += "\n";
  for (const njson& pair : summary.at("pairs")) {
    const std::string pid = pair.at("upper").get<std::string>() + "->" +
                            pair.at("lower").get<std::string>();
    int ci = 0;
    for (const njson& cyl : pair.at("cylinders")) {
      int j = 0;
      for (const njson& row : cyl.at("slices")) {
        out += pid + "," + std::to_string(ci) + "," + std::to_string(j);
        for (const njson& v : row) out += "," + num(v.get<double>());
        out += "\n";
        ++j;
      }
      ++ci;
    }
  }
  return out;
}

njson strip_slices(const njson& summary) {
  njson out = summary;
  for (njson& pair : out.at("pairs"))
    for (njson& cyl : pair.at("cylinders")) cyl.erase("slices");
  return out;
}

std::string render_lift_csv(const njson& summary) {
  std::string out =
      "pair,cylinder,eps,iterations,converged,residual,correction,energy,"
      "action_drop,energy_gap,gap_sup,exact,decay_rho,decay_rms,decay_ok,"
      "fit_exponent,rho_spread\n";
  for (const njson& cyl : summary.at("cylinders")) {
    for (const njson& pt : cyl.at("points")) {
      out += cyl.at("pair").get<std::string>();
      out += "," + std::to_string(cyl.at("cylinder").get<int>());
      out += "," + num(pt.at("eps").get<double>());
      out += "," + std::to_string(pt.at("iterations").get<int>());
      out += "," + csv_bool(pt.at("converged").get<bool>());
      out += "," + num(pt.at("residual").get<double>());
      out += "," + num(pt.at("correction").get<double>());
      out += "," + num(pt.at("energy").get<double>());
      out += "," + num(pt.at("action_drop").get<double>());
      out += "," + num(pt.at("energy_gap").get<double>());
      out += "," + num(pt.at("gap_sup").get<double>());
      out += "," + csv_bool(pt.at("exact").get<bool>());
      out += "," + num(pt.at("decay_rho").get<double>());
      out += "," + num(pt.at("decay_rms").get<double>());
      out += "," + csv_bool(pt.at("decay_ok").get<bool>());
      out += "," + num(cyl.at("fit_exponent").get<double>());
      out += "," + num(cyl.at("rho_spread").get<double>());
      out += "\n";
    }
  }
  return out;
}

std::string render_corrections_csv(const njson& summary) {
  std::string out = "pair,cylinder,eps,iter,residual,correction\n";
  for (const njson& cyl : summary.at("cylinders")) {
    for (const njson& pt : cyl.at("points")) {
      if (!pt.contains("residual_history")) continue;
      const njson& res = pt.at("residual_history");
      const njson& cor = pt.at("correction_history");
      for (std::size_t i = 0; i < res.size(); ++i) {
        out += cyl.at("pair").get<std::string>();
        out += "," + std::to_string(cyl.at("cylinder").get<int>());
        out += "," + num(pt.at("eps").get<double>());
        out += "," + std::to_string(i);
        out += "," + num(res[i].get<double>());
        out += i < cor.size() ? "," + num(cor[i].get<double>()) : std::string(",");
        out += "\n";
      }
    }
  }
  return out;
}

std::string render_counts_csv(const njson& summary) {
  std::string out = "pair,eps,count_m0,count_eps,equal,max_energy_gap\n";
  for (const njson& pair : summary.at("pairs")) {
    const std::string pid = pair.at("upper").get<std::string>() + "->" +
                            pair.at("lower").get<std::string>();
    for (const njson& pe : pair.at("per_eps")) {
      out += pid;
      out += "," + num(pe.at("eps").get<double>());
      out += "," + std::to_string(pair.at("count_m0").get<int>());
      out += "," + std::to_string(pe.at("count_eps").get<int>());
      out += "," + csv_bool(pe.at("equal").get<bool>());
      out += "," + num(pe.at("max_energy_gap").get<double>());
      out += "\n";
    }
  }
  return out;
}

std::string render_ranks_csv(const njson& summary) {
  std::string out = "mode,eps,winding,degree,rank\n";
  for (const njson& jm : summary.at("modes")) {
    for (const njson& comp : jm.at("ranks")) {
      std::string w;
      for (const njson& wi : comp.at("winding")) {
        if (!w.empty()) w += " ";
        w += std::to_string(wi.get<int>());
      }
      int deg = 0;
      for (const njson& r : comp.at("ranks")) {
        out += jm.at("mode").get<std::string>();
        out += "," + num(jm.at("eps").get<double>());
        out += "," + w;
        out += "," + std::to_string(deg);
        out += "," + std::to_string(r.get<int>());
        out += "\n";
        ++deg;
      }
    }
  }
  return out;
}

std::string render_estimates_csv(const njson& summary) {
  std::string out =
      "estimate_id,label,eps,p,grid_0,grid_1,measured,bound_ok,uniformity,"
      "stability,max_measured\n";
  for (const njson& rep : summary.at("reports")) {
    for (const njson& pt : rep.at("points")) {
      out += rep.at("estimate_id").get<std::string>();
      out += "," + pt.at("label").get<std::string>();
      out += "," + num(pt.at("eps").get<double>());
      out += "," + num(pt.at("p").get<double>());
      const njson& grid = pt.at("grid");
      out += "," + (grid.size() > 0 ? std::to_string(grid[0].get<int>())
                                    : std::string());
      out += "," + (grid.size() > 1 ? std::to_string(grid[1].get<int>())
                                    : std::string());
      out += "," + num(pt.at("measured").get<double>());
      out += "," + csv_bool(pt.at("bound_ok").get<bool>());
      out += "," + num(rep.at("uniformity").get<double>());
      out += "," + num(rep.at("stability").get<double>());
      out += "," + num(rep.at("max_measured").get<double>());
      out += "\n";
    }
  }
  return out;
}

njson with_scenario(const std::string& id, const njson& summary) {
  njson a;
  a["scenario"] = id;
  for (const auto& item : summary.items()) a[item.key()] = item.value();
  return a;
}

std::vector<std::pair<std::string, std::string>> render_artifacts(
    const std::string& command, const njson& record) {
  const njson& summary = record.at("summary");
  const std::string id = record.at("scenario").at("id").get<std::string>();
  std::vector<std::pair<std::string, std::string>> out;
  if (command == "orbits") {
    out.emplace_back("orbits.json", dump(with_scenario(id, summary)));
    out.emplace_back("orbits.csv", render_orbits_csv(summary));
  } else if (command == "heat-connect") {
    out.emplace_back("moduli.json", dump(with_scenario(id, strip_slices(summary))));
    out.emplace_back("trajectories.csv", render_trajectories_csv(summary));
  } else if (command == "floer-lift") {
    out.emplace_back("lifts.json", dump(with_scenario(id, summary)));
    out.emplace_back("lifts.csv", render_lift_csv(summary));
    out.emplace_back("corrections.csv", render_corrections_csv(summary));
  } else if (command == "sweep") {
    out.emplace_back("sweep.json", dump(with_scenario(id, summary)));
    out.emplace_back("sweep.csv", render_lift_csv(summary));
  } else if (command == "count-check") {
    out.emplace_back("counts.json", dump(with_scenario(id, summary)));
    out.emplace_back("counts.csv", render_counts_csv(summary));
  } else if (command == "homology") {
    out.emplace_back("homology.json", dump(with_scenario(id, summary)));
    out.emplace_back("ranks.csv", render_ranks_csv(summary));
    for (const njson& jm : summary.at("modes"))
      for (const njson& b : jm.at("boundaries"))
        out.emplace_back("boundary-" + jm.at("mode").get<std::string>() + "-d" +
                             std::to_string(b.at("degree").get<int>()) + ".txt",
                         b.at("bits").get<std::string>());
  } else if (command == "estimates") {
    out.emplace_back("estimates.json", dump(with_scenario(id, summary)));
    out.emplace_back("estimates.csv", render_estimates_csv(summary));
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  return out;
}

njson run_stage(const std::string& command, const Scenario& s,
                const DriverOptions& opts) {
  if (!opts.stage.empty() && command != "estimates")
    throw ConfigError("--stage applies to the estimates command only");
  if (!opts.modes.empty() && command != "homology")
    throw ConfigError("--mode applies to the homology command only");
  if (command == "orbits") return stage_orbits(s);
  if (command == "heat-connect") return stage_heat_connect(s);
  if (command == "floer-lift") return stage_floer_lift(s);
  if (command == "sweep") return stage_sweep(s);
  if (command == "count-check") return stage_count_check(s);
  if (command == "homology") return stage_homology(s, opts.modes);
  if (command == "estimates") return stage_estimates(s, opts.stage);
  throw ConfigError("unknown command '" + command + "'");
}

}  // namespace

Manifold Scenario::manifold() const {
  if (backend == "torus1") return Manifold::flat_torus(1);
  if (backend == "torus2") return Manifold::flat_torus(2);
  if (backend == "sphere2") return Manifold::sphere2();
  throw ConfigError("unknown backend '" + backend + "'");
}

CylinderGridSpec Scenario::grid_spec() const {
  CylinderGridSpec g;
  g.S = grid.S;
  g.n_s = grid.n_s;
  g.h_target = 2.0 * grid.S / (grid.n_s - 1);
  g.step_h = grid.step_h;
  g.s_budget = grid.s_budget;
  return g;
}

void validate_scenario(const Scenario& s) {
  if (s.id.empty()) throw ConfigError("scenario id must not be empty");
  for (char c : s.id)
    if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-' || c == '_'))
      throw ConfigError("scenario id may use only [a-z0-9_-]");
  const Manifold man = s.manifold();
  const int wdim = man.flat() ? man.dim() : 0;
  if (s.winding.size() != wdim)
    throw ConfigError("winding must have one entry per torus dimension");
  for (const CosTerm& c : s.perturbation.cos_terms)
    if (man.flat() && c.k.size() != man.dim())
      throw ConfigError("cos term wave vector must match the torus dimension");
  if (!power_of_two(s.grid.n_t) || s.grid.n_t < 16 || s.grid.n_t > 512)
    throw ConfigError("grid n_t must be a power of two in [16, 512]");
  if (s.grid.n_s < 64 || s.grid.n_s > 4096)
    throw ConfigError("grid n_s must lie in [64, 4096]");
  if (!(s.grid.S > 0.0)) throw ConfigError("grid S must be positive");
  if (!(s.grid.step_h > 0.0)) throw ConfigError("grid step_h must be positive");
  if (!(s.grid.s_budget > 0.0))
    throw ConfigError("grid s_budget must be positive");
  if (!power_of_two(s.lift.lift_nt) || s.lift.lift_nt < 8 ||
      s.grid.n_t % s.lift.lift_nt != 0)
    throw ConfigError("lift n_t must be a power-of-two divisor of grid n_t");
  if (!(s.lift.lift_hs > 0.0) || s.lift.lift_hs > 1.0)
    throw ConfigError("lift h_s must lie in (0, 1]");
  if (!(s.lift.lift_S > 0.0) || s.lift.lift_S > s.grid.S)
    throw ConfigError("lift S must lie in (0, grid S]");
  if (!(s.lift.p > 1.0)) throw ConfigError("lift p must exceed one");
  if (s.eps_list.empty()) throw ConfigError("eps_list must not be empty");
  for (double e : s.eps_list)
    if (!(e > 0.0) || e > 1.0) throw ConfigError("eps values must lie in (0, 1]");
  if (!descending(s.eps_list))
    throw ConfigError("eps_list must be sorted strictly descending");
  for (double e : s.count_eps)
    if (!(e > 0.0) || e > 1.0)
      throw ConfigError("count_eps values must lie in (0, 1]");
  if (!descending(s.count_eps))
    throw ConfigError("count_eps must be sorted strictly descending");
  if (s.p_list.empty()) throw ConfigError("p_list must not be empty");
  for (double p : s.p_list)
    if (!(p > 1.0)) throw ConfigError("p_list entries must exceed one");
  if (!std::isfinite(s.action_cut))
    throw ConfigError("action_cut must be finite");
  if (s.starts_per_dim < 1 || s.starts_per_dim > 64)
    throw ConfigError("starts_per_dim must lie in [1, 64]");
  if (!(s.shift_sigma > 0.0) || s.shift_sigma > 0.2)
    throw ConfigError("shift_sigma must lie in (0, 0.2]");
  for (std::size_t i = 1; i < s.homology_cuts.size(); ++i)
    if (!(s.homology_cuts[i] > s.homology_cuts[i - 1]))
      throw ConfigError("homology cuts must be strictly ascending");
  if (!(s.homology_eps > 0.0) || s.homology_eps > 1.0)
    throw ConfigError("homology eps must lie in (0, 1]");
}

std::string scenario_json_string(const Scenario& s) {
  return dump(scenario_to_json(s));
}

Scenario load_scenario(const std::string& config_path) {
  if (!fs::exists(config_path))
    throw ConfigError("config file '" + config_path + "' does not exist");
  njson j;
  try {
    j = njson::parse(read_file(config_path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + config_path + "' does not parse: " + e.what());
  }
  Scenario s = scenario_from_json(j);
  validate_scenario(s);
  return s;
}

std::vector<std::string> builtin_scenario_ids() {
  return {"t1-contractible", "t1-winding", "t1-wobble", "t2-product"};
}

Scenario builtin_scenario(const std::string& id) {
  Scenario s;
  s.id = id;
  s.eps_list = {0.2, 0.1, 0.05, 0.025};
  s.count_eps = {0.1, 0.05};
  s.p_list = {2.0};
  if (id == "t1-contractible") {
    s.backend = "torus1";
    s.winding = Eigen::VectorXi::Zero(1);
    s.perturbation.cos_terms = {{0.01, Eigen::VectorXi::Ones(1), 0, 0.0}};
    s.grid.n_t = 64;
    s.homology_cuts = {0.0, 0.5, 1.0};
    s.reference = "circle-contractible";
  } else if (id == "t1-winding") {
    s.backend = "torus1";
    s.winding = Eigen::VectorXi::Ones(1);
    s.perturbation.cos_terms = {{0.01, Eigen::VectorXi::Ones(1), -1, 0.0}};
    s.grid.n_t = 16;
    s.homology_cuts = {0.5, 0.6, 1.0};
    s.reference = "circle-winding-1";
  } else if (id == "t1-wobble") {
    s.backend = "torus1";
    s.winding = Eigen::VectorXi::Zero(1);
    s.perturbation.cos_terms = {{0.01, Eigen::VectorXi::Ones(1), 0, 0.0},
                                {0.0025, Eigen::VectorXi::Ones(1), -1, 0.0},
                                {-0.0025, Eigen::VectorXi::Ones(1), 1, 0.0}};
    s.grid.n_t = 64;
    s.homology_cuts = {0.0, 0.5, 1.0};
    s.reference = "circle-contractible";
  } else if (id == "t2-product") {
    s.backend = "torus2";
    s.winding = Eigen::VectorXi::Zero(2);
    Eigen::VectorXi k1(2), k2(2);
    k1 << 1, 0;
    k2 << 0, 1;
    s.perturbation.cos_terms = {{0.01, k1, 0, 0.0}, {0.01, k2, 0, 0.0}};
    s.grid.n_t = 16;
    s.starts_per_dim = 4;
    s.lift.lift_hs = 0.08;
    s.homology_cuts = {-0.01, 0.01, 1.0};
    s.reference = "torus2-contractible";
  } else {
    throw ConfigError("no builtin scenario named '" + id + "'");
  }
  validate_scenario(s);
  return s;
}

RunHandle run_command(const std::string& command, const Scenario& s,
                      const DriverOptions& opts) {
  validate_scenario(s);
  const std::time_t t0 = driver_epoch();
  const njson summary = run_stage(command, s, opts);
  const std::time_t t1 = driver_epoch();

  const fs::path sdir = fs::path(opts.out_dir) / s.id;
  fs::create_directories(sdir);
  const std::string echo = scenario_json_string(s);
  const fs::path spath = sdir / "scenario.json";
  if (fs::exists(spath)) {
    if (read_file(spath) != echo)
      throw ConfigError("scenario id '" + s.id +
                        "' is already bound to a different configuration in " +
                        sdir.string());
  } else {
    atomic_write(spath, echo);
  }
  int n = 1;
  char tag[16];
  for (;; ++n) {
    std::snprintf(tag, sizeof tag, "r%03d", n);
    if (!fs::exists(sdir / (command + "-" + tag))) break;
  }
  const std::string run_name = command + "-" + tag;
  const fs::path rdir = sdir / run_name;
  fs::create_directory(rdir);

  njson record;
  record["run_id"] = s.id + "/" + run_name;
  record["command"] = command;
  record["status"] = "ok";
  record["timestamps"] = {{"started", utc_stamp(t0)}, {"finished", utc_stamp(t1)}};
  record["scenario"] = scenario_to_json(s);
  record["summary"] = summary;
  const auto artifacts = render_artifacts(command, record);
  njson digests = njson::array();
  for (const auto& [name, bytes] : artifacts)
    digests.push_back({{"file", name}, {"fnv1a", fnv1a_hex(bytes)}});
  record["artifacts"] = digests;
  for (const auto& [name, bytes] : artifacts) atomic_write(rdir / name, bytes);
  atomic_write(rdir / "run.json", dump(record));

  RunHandle h;
  h.run_id = record["run_id"].get<std::string>();
  h.dir = rdir.string();
  for (const auto& [name, bytes] : artifacts) h.artifacts.push_back(name);
  return h;
}

int run(const std::string& command, const DriverOptions& opts) {
  if (opts.config_path.empty())
    throw ConfigError("--config is required for the " + command + " command");
  Scenario s = load_scenario(opts.config_path);
  if (opts.seed) s.seed = *opts.seed;
  if (!opts.eps_override.empty()) s.eps_list = opts.eps_override;
  const RunHandle h = run_command(command, s, opts);
  std::cout << "run " << h.run_id << "\n";
  for (const std::string& a : h.artifacts)
    std::cout << "  " << (fs::path(h.dir) / a).string() << "\n";
  return 0;
}

void emit_report(const std::string& run_id, const std::string& format,
                 const std::string& out_dir) {
  if (format != "json" && format != "csv")
    throw ConfigError("--format must be json or csv");
  const fs::path rdir = fs::path(out_dir) / run_id;
  const fs::path rj = rdir / "run.json";
  if (!fs::exists(rj))
    throw UnknownRun("no run '" + run_id + "' under '" + out_dir + "'");
  njson record;
  try {
    record = njson::parse(read_file(rj));
  } catch (const nlohmann::json::exception& e) {
    throw UnknownRun("record of '" + run_id + "' does not parse: " + e.what());
  }
  const std::string command = record.at("command").get<std::string>();
  const auto artifacts = render_artifacts(command, record);
  std::set<std::string> recorded;
  for (const njson& d : record.at("artifacts")) {
    const std::string name = d.at("file").get<std::string>();
    for (const auto& [aname, bytes] : artifacts)
      if (aname == name && d.at("fnv1a").get<std::string>() != fnv1a_hex(bytes))
        throw AcceptanceError("re-emitted artifact '" + name +
                              "' differs from the recorded digest");
    recorded.insert(name);
  }
  for (const auto& [name, bytes] : artifacts) {
    if (!recorded.count(name))
      throw AcceptanceError("artifact '" + name + "' is missing from the record");
    const bool is_json = name.size() > 5 && name.rfind(".json") == name.size() - 5;
    if (format == "json" && !is_json) continue;
    if (format == "csv" && is_json) continue;
    atomic_write(rdir / name, bytes);
    std::cout << "  " << (rdir / name).string() << "\n";
  }
}

}  // namespace morseflow

#include "morseflow/homology.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "morseflow/errors.hpp"

namespace morseflow {
namespace {

constexpr double kActionMatchTol = 1e-9;
constexpr double kLoopMatchTol = 1e-6;

Eigen::MatrixXi mod2(Eigen::MatrixXi M) {
  return M.unaryExpr([](int v) { return v & 1; });
}

// Row reduction mod 2; returns the rank and leaves M in reduced form with
// pivot columns recorded in order.
int z2_eliminate(Eigen::MatrixXi* M, std::vector<int>* pivot_cols) {
  const int rows = static_cast<int>(M->rows());
  const int cols = static_cast<int>(M->cols());
  int rank = 0;
  for (int c = 0; c < cols && rank < rows; ++c) {
    int piv = -1;
    for (int r = rank; r < rows; ++r)
      if ((*M)(r, c) & 1) {
        piv = r;
        break;
      }
    if (piv < 0) continue;
    M->row(piv).swap(M->row(rank));
    for (int r = 0; r < rows; ++r)
      if (r != rank && ((*M)(r, c) & 1))
        M->row(r) = (M->row(r) + M->row(rank)).unaryExpr([](int v) { return v & 1; });
    if (pivot_cols != nullptr) pivot_cols->push_back(c);
    ++rank;
  }
  return rank;
}

int z2_rank(Eigen::MatrixXi M) { return z2_eliminate(&M, nullptr); }

// Columns spanning the kernel of M over Z2.
Eigen::MatrixXi z2_kernel(Eigen::MatrixXi M) {
  const int cols = static_cast<int>(M.cols());
  std::vector<int> pivots;
  const int rank = z2_eliminate(&M, &pivots);
  std::vector<char> is_pivot(static_cast<size_t>(cols), 0);
  for (int c : pivots) is_pivot[static_cast<size_t>(c)] = 1;
  Eigen::MatrixXi K = Eigen::MatrixXi::Zero(cols, cols - rank);
  int kcol = 0;
  for (int c = 0; c < cols; ++c) {
    if (is_pivot[static_cast<size_t>(c)]) continue;
    K(c, kcol) = 1;
    for (int r = 0; r < rank; ++r)
      if (M(r, c) & 1) K(pivots[static_cast<size_t>(r)], kcol) = 1;
    ++kcol;
  }
  return K;
}

// Solves A x = b over Z2 (free variables set to zero); false if inconsistent.
bool z2_solve(const Eigen::MatrixXi& A, const Eigen::VectorXi& b,
              Eigen::VectorXi* x) {
  const int rows = static_cast<int>(A.rows());
  const int cols = static_cast<int>(A.cols());
  Eigen::MatrixXi aug(rows, cols + 1);
  aug.leftCols(cols) = A;
  aug.col(cols) = b;
  std::vector<int> pivots;
  int rank = 0;
  for (int c = 0; c < cols && rank < rows; ++c) {
    int piv = -1;
    for (int r = rank; r < rows; ++r)
      if (aug(r, c) & 1) {
        piv = r;
        break;
      }
    if (piv < 0) continue;
    aug.row(piv).swap(aug.row(rank));
    for (int r = 0; r < rows; ++r)
      if (r != rank && (aug(r, c) & 1))
        aug.row(r) = (aug.row(r) + aug.row(rank)).unaryExpr([](int v) { return v & 1; });
    pivots.push_back(c);
    ++rank;
  }
  for (int r = rank; r < rows; ++r)
    if (aug(r, cols) & 1) return false;
  if (x != nullptr) {
    *x = Eigen::VectorXi::Zero(cols);
    for (int r = 0; r < rank; ++r) (*x)[pivots[static_cast<size_t>(r)]] = aug(r, cols);
  }
  return true;
}

bool in_span(const Eigen::MatrixXi& basis, const Eigen::VectorXi& v) {
  if (basis.cols() == 0) return v.isZero();
  return z2_solve(basis, v, nullptr);
}

Eigen::MatrixXi append_col(const Eigen::MatrixXi& M, const Eigen::VectorXi& v) {
  Eigen::MatrixXi out(v.size(), M.cols() + 1);
  out.leftCols(M.cols()) = M;
  out.col(M.cols()) = v;
  return out;
}

// Cycle representatives of H_k together with the [image | reps] frame used
// to read off homology coordinates of a cycle.
struct DegreeHomology {
  Eigen::MatrixXi reps;
  Eigen::MatrixXi frame;
  int image_rank = 0;
};

DegreeHomology degree_homology(const Eigen::MatrixXi& bout,
                               const Eigen::MatrixXi& bin) {
  const int n = static_cast<int>(bout.cols());
  DegreeHomology out;
  const Eigen::MatrixXi K = z2_kernel(bout);
  Eigen::MatrixXi frame = Eigen::MatrixXi::Zero(n, 0);
  for (int c = 0; c < bin.cols(); ++c) {
    const Eigen::VectorXi v = mod2(bin.col(c));
    if (!in_span(frame, v)) frame = append_col(frame, v);
  }
  out.image_rank = static_cast<int>(frame.cols());
  Eigen::MatrixXi reps = Eigen::MatrixXi::Zero(n, 0);
  for (int c = 0; c < K.cols(); ++c) {
    if (!in_span(frame, K.col(c))) {
      frame = append_col(frame, K.col(c));
      reps = append_col(reps, K.col(c));
    }
  }
  out.reps = reps;
  out.frame = frame;
  return out;
}

// Positions of each generator inside its degree block, in global order.
std::vector<std::vector<int>> degree_members(const ChainComplex& C) {
  const int K = max_degree(C);
  std::vector<std::vector<int>> by_degree(static_cast<size_t>(K + 1));
  for (size_t i = 0; i < C.generators.size(); ++i)
    by_degree[static_cast<size_t>(C.generators[i].index)].push_back(
        static_cast<int>(i));
  return by_degree;
}

bool same_winding(const Eigen::VectorXi& a, const Eigen::VectorXi& b) {
  return a.size() == b.size() && a == b;
}

void check_square_zero(const ChainComplex& C) {
  for (size_t k = 2; k < C.boundary.size(); ++k) {
    const Eigen::MatrixXi prod = mod2(C.boundary[k - 1] * C.boundary[k]);
    if (!prod.isZero())
      throw DegenerateComplex("boundary does not square to zero at degree " +
                              std::to_string(k));
  }
}

Eigen::MatrixXi boundary_or_empty(const ChainComplex& C, int k,
                                  const std::vector<std::vector<int>>& members) {
  const int K = max_degree(C);
  if (k >= 1 && k <= K) return C.boundary[static_cast<size_t>(k)];
  const int nk = (k >= 0 && k <= K) ? static_cast<int>(members[static_cast<size_t>(k)].size()) : 0;
  if (k > K) return Eigen::MatrixXi::Zero(k - 1 >= 0 && k - 1 <= K
                                              ? static_cast<int>(members[static_cast<size_t>(k - 1)].size())
                                              : 0,
                                          0);
  return Eigen::MatrixXi::Zero(0, nk);
}

}  // namespace

int max_degree(const ChainComplex& C) {
  int K = -1;
  for (const PeriodicOrbit& g : C.generators) K = std::max(K, g.index);
  return K;
}

std::vector<int> degree_counts(const ChainComplex& C) {
  std::vector<int> counts(static_cast<size_t>(max_degree(C) + 1), 0);
  for (const PeriodicOrbit& g : C.generators)
    ++counts[static_cast<size_t>(g.index)];
  return counts;
}

ChainComplex build_complex(const Perturbation& P, double a, ComplexMode mode,
                           const std::vector<DiscreteLoop>& starts,
                           const ComplexOptions& opts) {
  ChainComplex C;
  C.action_cut = a;
  C.mode = mode;
  C.eps = mode == ComplexMode::Floer ? opts.eps : 0.0;
  C.generators = enumerate_orbits(P, a, starts);
  for (const PeriodicOrbit& g : C.generators) {
    if (!(g.nondeg_margin > 0.0))
      throw Degenerate("an orbit in the action window is degenerate");
    if (g.index < 0)
      throw Degenerate("an orbit in the action window has negative index");
  }
  C.windings.reserve(C.generators.size());
  for (const PeriodicOrbit& g : C.generators)
    C.windings.push_back(winding_vector(g.loop));

  const int K = max_degree(C);
  const std::vector<std::vector<int>> members = degree_members(C);
  C.boundary.resize(static_cast<size_t>(std::max(K + 1, 1)));
  C.boundary[0] = Eigen::MatrixXi::Zero(
      0, K >= 0 ? static_cast<int>(members[0].size()) : 0);
  for (int k = 1; k <= K; ++k) {
    const std::vector<int>& rows = members[static_cast<size_t>(k - 1)];
    const std::vector<int>& cols = members[static_cast<size_t>(k)];
    Eigen::MatrixXi B = Eigen::MatrixXi::Zero(static_cast<int>(rows.size()),
                                              static_cast<int>(cols.size()));
    for (size_t cj = 0; cj < cols.size(); ++cj) {
      for (size_t ri = 0; ri < rows.size(); ++ri) {
        const int gi = cols[cj];
        const int gj = rows[ri];
        if (!same_winding(C.windings[static_cast<size_t>(gi)],
                          C.windings[static_cast<size_t>(gj)]))
          continue;
        size_t count;
        if (mode == ComplexMode::Heat) {
          count = enumerate_M0(C.generators[static_cast<size_t>(gi)],
                               C.generators[static_cast<size_t>(gj)], P, opts.grid)
                      .size();
        } else {
          count = enumerate_M_eps(C.generators[static_cast<size_t>(gi)],
                                  C.generators[static_cast<size_t>(gj)], opts.eps,
                                  P, opts.lift)
                      .size();
        }
        B(static_cast<int>(ri), static_cast<int>(cj)) =
            static_cast<int>(count % 2);
      }
    }
    C.boundary[static_cast<size_t>(k)] = B;
  }
  check_square_zero(C);
  return C;
}

std::vector<ComponentRanks> homology_ranks(const ChainComplex& C) {
  check_square_zero(C);
  std::vector<ComponentRanks> out;
  if (C.generators.empty()) return out;
  const int K = max_degree(C);
  const std::vector<std::vector<int>> members = degree_members(C);
  // Component keys in order of first appearance (the global order is
  // component-major).
  std::vector<Eigen::VectorXi> keys;
  for (const Eigen::VectorXi& w : C.windings) {
    bool seen = false;
    for (const Eigen::VectorXi& k : keys)
      if (same_winding(k, w)) {
        seen = true;
        break;
      }
    if (!seen) keys.push_back(w);
  }
  for (const Eigen::VectorXi& key : keys) {
    // Within-degree positions of this component.
    std::vector<std::vector<int>> local(static_cast<size_t>(K + 1));
    for (int k = 0; k <= K; ++k) {
      const std::vector<int>& mem = members[static_cast<size_t>(k)];
      for (size_t pos = 0; pos < mem.size(); ++pos)
        if (same_winding(C.windings[static_cast<size_t>(mem[pos])], key))
          local[static_cast<size_t>(k)].push_back(static_cast<int>(pos));
    }
    auto block = [&](int k) {
      if (k < 1 || k > K)
        return Eigen::MatrixXi(
            Eigen::MatrixXi::Zero(0, k == 0 ? static_cast<int>(local[0].size()) : 0));
      const std::vector<int>& r = local[static_cast<size_t>(k - 1)];
      const std::vector<int>& c = local[static_cast<size_t>(k)];
      Eigen::MatrixXi B(static_cast<int>(r.size()), static_cast<int>(c.size()));
      for (size_t i = 0; i < r.size(); ++i)
        for (size_t j = 0; j < c.size(); ++j)
          B(static_cast<int>(i), static_cast<int>(j)) =
              C.boundary[static_cast<size_t>(k)](r[i], c[j]);
      return B;
    };
    ComponentRanks cr;
    cr.winding = key;
    cr.ranks.resize(static_cast<size_t>(K + 1), 0);
    for (int k = 0; k <= K; ++k) {
      const int nk = static_cast<int>(local[static_cast<size_t>(k)].size());
      const int rk = k >= 1 ? z2_rank(block(k)) : 0;
      const int rk1 = k + 1 <= K ? z2_rank(block(k + 1)) : 0;
      cr.ranks[static_cast<size_t>(k)] = nk - rk - rk1;
    }
    out.push_back(cr);
  }
  return out;
}

FiltrationMap filtration_map(const ChainComplex& Ca, const ChainComplex& Cb) {
  if (Ca.mode != Cb.mode)
    throw ArgumentError("filtration map needs matching complex modes");
  if (Ca.mode == ComplexMode::Floer && Ca.eps != Cb.eps)
    throw ArgumentError("filtration map needs matching eps");
  if (!(Ca.action_cut <= Cb.action_cut + 1e-12))
    throw ArgumentError("filtration map needs an increasing action cut");
  check_square_zero(Ca);
  check_square_zero(Cb);

  // Inclusion on generators.
  std::vector<int> inc(Ca.generators.size(), -1);
  for (size_t i = 0; i < Ca.generators.size(); ++i) {
    const PeriodicOrbit& g = Ca.generators[i];
    for (size_t j = 0; j < Cb.generators.size(); ++j) {
      const PeriodicOrbit& h = Cb.generators[j];
      if (g.index != h.index) continue;
      if (!same_winding(Ca.windings[i], Cb.windings[j])) continue;
      if (std::abs(g.action - h.action) > kActionMatchTol) continue;
      if (loop_distance(g.loop, h.loop) > kLoopMatchTol) continue;
      inc[i] = static_cast<int>(j);
      break;
    }
    if (inc[i] < 0)
      throw NotNested("a generator of the lower complex is missing upstream");
  }

  const int Ka = max_degree(Ca);
  const int Kb = max_degree(Cb);
  const int K = std::max(Ka, Kb);
  const std::vector<std::vector<int>> mem_a = degree_members(Ca);
  const std::vector<std::vector<int>> mem_b = degree_members(Cb);
  FiltrationMap out;
  out.maps.resize(static_cast<size_t>(K + 1));
  for (int k = 0; k <= K; ++k) {
    const Eigen::MatrixXi bout_a = boundary_or_empty(Ca, k, mem_a);
    const Eigen::MatrixXi bin_a = boundary_or_empty(Ca, k + 1, mem_a);
    const Eigen::MatrixXi bout_b = boundary_or_empty(Cb, k, mem_b);
    const Eigen::MatrixXi bin_b = boundary_or_empty(Cb, k + 1, mem_b);
    const DegreeHomology ha = k <= Ka
                                  ? degree_homology(bout_a, bin_a)
                                  : DegreeHomology{Eigen::MatrixXi::Zero(0, 0),
                                                   Eigen::MatrixXi::Zero(0, 0), 0};
    const DegreeHomology hb = k <= Kb
                                  ? degree_homology(bout_b, bin_b)
                                  : DegreeHomology{Eigen::MatrixXi::Zero(0, 0),
                                                   Eigen::MatrixXi::Zero(0, 0), 0};
    const int ranka = static_cast<int>(ha.reps.cols());
    const int rankb = static_cast<int>(hb.reps.cols());
    Eigen::MatrixXi M = Eigen::MatrixXi::Zero(rankb, ranka);
    if (ranka > 0 && k <= Kb) {
      // Within-degree position of each upstream generator.
      std::vector<int> pos_b(Cb.generators.size(), -1);
      const std::vector<int>& bmem = mem_b[static_cast<size_t>(k)];
      for (size_t p = 0; p < bmem.size(); ++p)
        pos_b[static_cast<size_t>(bmem[p])] = static_cast<int>(p);
      const std::vector<int>& amem = mem_a[static_cast<size_t>(k)];
      const int nb = static_cast<int>(bmem.size());
      for (int c = 0; c < ranka; ++c) {
        Eigen::VectorXi vb = Eigen::VectorXi::Zero(nb);
        for (size_t p = 0; p < amem.size(); ++p) {
          const int target = inc[static_cast<size_t>(amem[p])];
          vb[pos_b[static_cast<size_t>(target)]] = ha.reps(static_cast<int>(p), c);
        }
        if (!mod2(bout_b * vb).isZero())
          throw DegenerateComplex(
              "included cycle fails to be a cycle upstream");
        Eigen::VectorXi w;
        if (!z2_solve(hb.frame, vb, &w))
          throw DegenerateComplex(
              "included cycle leaves the upstream cycle space");
        M.col(c) = w.tail(rankb);
      }
    }
    out.maps[static_cast<size_t>(k)] = M;
  }
  return out;
}

ReferenceReport compare_reference(const ChainComplex& C,
                                  const std::string& reference_key) {
  ReferenceReport rep;
  rep.key = reference_key;
  if (reference_key == "circle-contractible") {
    rep.winding = Eigen::VectorXi::Zero(1);
    rep.expected = {1, 1};
  } else if (reference_key.rfind("circle-winding-", 0) == 0) {
    const std::string tail = reference_key.substr(15);
    try {
      size_t used = 0;
      const int w = std::stoi(tail, &used);
      if (used != tail.size()) throw std::invalid_argument(tail);
      rep.winding = Eigen::VectorXi::Constant(1, w);
    } catch (const std::exception&) {
      throw UnknownReference("no reference table named " + reference_key);
    }
    rep.expected = {1, 1};
  } else if (reference_key == "torus2-contractible") {
    rep.winding = Eigen::VectorXi::Zero(2);
    rep.expected = {1, 2, 1};
  } else {
    throw UnknownReference("no reference table named " + reference_key);
  }
  const std::vector<ComponentRanks> ranks = homology_ranks(C);
  for (const ComponentRanks& cr : ranks)
    if (same_winding(cr.winding, rep.winding)) {
      rep.measured = cr.ranks;
      break;
    }
  const size_t n = std::max(rep.expected.size(), rep.measured.size());
  rep.pass = true;
  for (size_t k = 0; k < n; ++k) {
    const int e = k < rep.expected.size() ? rep.expected[k] : 0;
    const int m = k < rep.measured.size() ? rep.measured[k] : 0;
    if (e != m) {
      rep.failed_degrees.push_back(static_cast<int>(k));
      rep.pass = false;
    }
  }
  return rep;
}

std::string bitmatrix(const Eigen::MatrixXi& B) {
  std::string out;
  out.reserve(static_cast<size_t>(B.rows()) * (static_cast<size_t>(B.cols()) + 1));
  for (int r = 0; r < B.rows(); ++r) {
    for (int c = 0; c < B.cols(); ++c) out.push_back((B(r, c) & 1) ? '1' : '0');
    out.push_back('\n');
  }
  return out;
}

}  // namespace morseflow

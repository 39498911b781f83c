#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "morseflow/floer.hpp"

namespace morseflow {

enum class ComplexMode { Heat, Floer };

struct ComplexOptions {
  double eps = 0.1;       // continuation parameter for Floer-mode counts
  CylinderGridSpec grid;  // heat trajectory enumeration grid
  EpsEnumOptions lift;    // lift settings for Floer-mode counts
};

// Z2 sublevel chain complex.  Generators are ordered by (component, index,
// action, lexicographic coordinates); boundary[k] maps degree k to degree
// k-1 in that order with entries mod 2, boundary[0] is the empty map.
struct ChainComplex {
  std::vector<PeriodicOrbit> generators;
  std::vector<Eigen::VectorXi> windings;  // component key per generator
  std::vector<Eigen::MatrixXi> boundary;
  double action_cut = 0.0;
  ComplexMode mode = ComplexMode::Heat;
  double eps = 0.0;  // zero in Heat mode
};

int max_degree(const ChainComplex& C);  // -1 when the complex is empty
std::vector<int> degree_counts(const ChainComplex& C);

// Runs the orbit enumeration from the given starts, keeps actions <= a and
// fills the boundary with trajectory (Heat) or continuation-pair (Floer)
// counts mod 2 between generators of index difference one within one
// component.
ChainComplex build_complex(const Perturbation& P, double a, ComplexMode mode,
                           const std::vector<DiscreteLoop>& starts,
                           const ComplexOptions& opts = {});

struct ComponentRanks {
  Eigen::VectorXi winding;
  std::vector<int> ranks;  // Z2 Betti numbers by degree
};

std::vector<ComponentRanks> homology_ranks(const ChainComplex& C);

// Map induced on Z2 homology by the sublevel inclusion; maps[k] has one
// column per degree-k class of the lower complex.
struct FiltrationMap {
  std::vector<Eigen::MatrixXi> maps;
};

FiltrationMap filtration_map(const ChainComplex& Ca, const ChainComplex& Cb);

struct ReferenceReport {
  std::string key;
  Eigen::VectorXi winding;
  std::vector<int> expected;
  std::vector<int> measured;
  std::vector<int> failed_degrees;
  bool pass = false;
};

// Shipped rank tables.  circle-contractible and circle-winding-w: the
// component retracts to the circle of rotated loops, ranks (1,1,0,...);
// torus2-contractible: constant loops form a torus, ranks (1,2,1,0,...).
ReferenceReport compare_reference(const ChainComplex& C,
                                  const std::string& reference_key);

// Plain-text bitmatrix, one row per line.
std::string bitmatrix(const Eigen::MatrixXi& B);

}  // namespace morseflow

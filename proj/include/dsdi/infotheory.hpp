// SPDX-License-Identifier: Apache-2.0
//
// Exact information measures on small discrete joints, brute-force searches
// for minimal sufficient representations Z = g(X1), and a numeric check of
// the identity I(X1;Y) = I(Z_I*;Y) + eps1 with eps1 = I(X1;Y|X2).
//
// All logarithms are base 2, with 0 log 0 = 0.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsdi/random.hpp"
#include "json.hpp"

namespace dsdi {

/// Variable indices inside a Distribution built from a DiscreteJoint.
inline constexpr int kX1 = 0;
inline constexpr int kX2 = 1;
inline constexpr int kY = 2;
inline constexpr int kZ = 3;

/// Probability table over a few discrete variables, row-major, first variable slowest.
struct Distribution {
  std::vector<int> sizes;
  std::vector<double> p;

  std::size_t rank() const { return sizes.size(); }
  /// Marginal over `vars`, in the given order.
  Distribution marginal(std::span<const int> vars) const;
};

/// P(X1, X2, Y) as a 3-d table indexed [x1][x2][y].
struct DiscreteJoint {
  int nx1 = 0, nx2 = 0, ny = 0;
  std::vector<double> p;

  DiscreteJoint() = default;
  DiscreteJoint(int nx1, int nx2, int ny);

  double& at(int x1, int x2, int y) { return p[static_cast<std::size_t>((x1 * nx2 + x2) * ny + y)]; }
  double at(int x1, int x2, int y) const { return p[static_cast<std::size_t>((x1 * nx2 + x2) * ny + y)]; }

  /// Throws InputError unless every entry is finite and >= 0 and the sum is 1 within 1e-12.
  void validate() const;
  Distribution distribution() const;

  /// {"alphabets": {"x1", "x2", "y"}, "probs": [[[...]]]} with probs indexed [x1][x2][y].
  nlohmann::json to_json() const;
  /// Also accepts a flat "probs" array of length |X1||X2||Y|. Throws InputError.
  static DiscreteJoint from_json(const nlohmann::json& j);
};

/// Deterministic Z = g(X1).
struct DeterministicMap {
  std::vector<int> table;  // g(x1) for x1 = 0 .. |X1|-1
  int z_size = 0;

  int operator()(int x1) const { return table[static_cast<std::size_t>(x1)]; }
  bool operator==(const DeterministicMap&) const = default;
};

/// The joint of (X1, X2, Y, Z) with Z = g(X1).
Distribution with_map(const DiscreteJoint& joint, const DeterministicMap& g);

double entropy(const Distribution& d, std::span<const int> vars);
double mutual_info(const Distribution& d, std::span<const int> a, std::span<const int> b);
double cond_mutual_info(const Distribution& d, std::span<const int> a, std::span<const int> b,
                        std::span<const int> given);

// Convenience overloads taking braced lists, e.g. mutual_info(d, {kX1}, {kY}).
double entropy(const Distribution& d, std::initializer_list<int> vars);
double mutual_info(const Distribution& d, std::initializer_list<int> a, std::initializer_list<int> b);
double cond_mutual_info(const Distribution& d, std::initializer_list<int> a,
                        std::initializer_list<int> b, std::initializer_list<int> given);

/// Number of maps |Z|^|X1|; throws SizeError above kMaxMaps.
inline constexpr std::uint64_t kMaxMaps = 10'000'000;
std::uint64_t map_count(int x1_size, int z_size);

struct RepresentationSearch {
  DeterministicMap map;
  double target_info = 0;       // I(Z;T), T = Y or X2
  double compression = 0;       // I(Z;X1) = H(Z)
  double bound = 0;             // I(X1;T)
  bool sufficient = false;      // target_info reaches the bound within 1e-10
  std::uint64_t enumerated = 0;
  std::uint64_t ties = 0;       // maps sharing the optimal (target_info, compression)
};

/// argmax_g I(g(X1);Y), then argmin I(g(X1);X1); the lexicographically
/// smallest table wins ties. Enumerates every map.
RepresentationSearch find_minimal_sufficient_sup(const DiscreteJoint& joint, int z_alphabet);
/// Same with X2 as the target.
RepresentationSearch find_minimal_sufficient_inv(const DiscreteJoint& joint, int z_alphabet);

/// Conditions under which the chain rules of the identity's derivation apply
/// to the found Z_I*.
struct TheoremPrecondition {
  double i_x1_x2 = 0, i_zi_x2 = 0;                  // sufficiency: equal
  double i_x1_x2_given_y = 0, i_zi_x2_given_y = 0;  // equal
  double i_zi_y_given_x2 = 0;                       // zero
  bool markov_literal = false;  // I(X1;X2|Y) = 0, i.e. X2 - Y - X1 holds as stated
  bool passes = false;
};

struct Theorem1Report {
  double lhs = 0;        // I(X1;Y)
  double i_zsup_y = 0;   // I(Z_sup*;Y)
  double i_zi_y = 0;     // I(Z_I*;Y)
  double epsilon1 = 0;   // I(X1;Y|X2)
  double rhs = 0;        // I(Z_I*;Y) + eps1
  double residual = 0;   // |lhs - rhs|
  double part1_residual = 0;  // |I(Z_sup*;Y) - I(X1;Y)|
  double chain_residual = 0;  // max error of I(Z;X2) = I(Z;Y) - I(Z;Y|X2) + I(Z;X2|Y) over Z in {X1, Z_I*}
  RepresentationSearch z_sup, z_inv;
  TheoremPrecondition precondition;
  bool in_scope = false;
  bool holds = false;  // in_scope and residual < kTheoremTolerance
  std::string status;  // "holds", "violated" or "out of theorem scope"

  nlohmann::json to_json() const;
};

inline constexpr double kPreconditionTolerance = 1e-10;
inline constexpr double kTheoremTolerance = 1e-9;

Theorem1Report verify_theorem1(const DiscreteJoint& joint, int z_alphabet);

/// Whether some map reaches I(g(X1);Y|X2) = I(X1;Y|X2), i.e. whether a
/// specific representation can carry all of eps1.
struct SpecificityReport {
  double epsilon1 = 0;
  double best = 0;
  DeterministicMap map;
  bool achievable = false;
  nlohmann::json to_json() const;
};
SpecificityReport check_specificity(const DiscreteJoint& joint, int z_alphabet);

/// Invariants over every map g: [X1] -> [Z].
struct MapInvariantReport {
  std::uint64_t maps = 0;
  double max_i_z_y_given_x1 = 0;   // conditional independence: 0
  double max_i_z_x2_given_x1 = 0;  // conditional independence: 0
  double max_dpi_excess = 0;       // max(I(g;Y) - I(X1;Y), I(g;X2) - I(X1;X2)); <= 0
};
MapInvariantReport check_map_invariants(const DiscreteJoint& joint, int z_alphabet);

// Builtin joints.

/// U, V fair independent bits; X1 = (U, V) encoded 2U + V, X2 = U, Y = U xor V.
DiscreteJoint xor_joint();
/// As xor_joint() with V = 0: Y = U is fully shared.
DiscreteJoint xor_joint_constant_v();

/// Random P(X1, Y) with X2 = h(X1) for a random h; passes the precondition.
DiscreteJoint random_structured_joint(Rng& rng, int nx1, int nx2, int ny);
/// Dirichlet(1)-like random table over all cells.
DiscreteJoint random_joint(Rng& rng, int nx1, int nx2, int ny);

}  // namespace dsdi

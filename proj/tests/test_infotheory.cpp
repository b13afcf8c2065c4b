// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "dsdi/errors.hpp"
#include "dsdi/infotheory.hpp"

using namespace dsdi;

namespace {

// Oracles built only from entropies, independent of the direct summations.
double h(const Distribution& d, std::initializer_list<int> v) { return entropy(d, v); }

double mi_oracle(const Distribution& d, int a, int b) { return h(d, {a}) + h(d, {b}) - h(d, {a, b}); }

double cmi_oracle(const Distribution& d, int a, int b, int c) {
  return h(d, {a, c}) + h(d, {b, c}) - h(d, {a, b, c}) - h(d, {c});
}

// Exhaustive search over maps in reverse lexicographic order using entropy
// formulas; returns the optimal (target_info, compression) pair.
std::pair<double, double> reference_search(const DiscreteJoint& j, int nz, int target) {
  double best_info = -1, best_h = 0;
  std::vector<int> g(static_cast<std::size_t>(j.nx1), nz - 1);
  std::function<void(int)> rec = [&](int pos) {
    if (pos == j.nx1) {
      const Distribution d = with_map(j, {g, nz});
      const double info = h(d, {kZ}) + h(d, {target}) - h(d, {kZ, target});
      const double hz = h(d, {kZ});
      if (info > best_info + 1e-12 || (std::abs(info - best_info) <= 1e-12 && hz < best_h - 1e-12)) {
        best_info = info;
        best_h = hz;
      }
      return;
    }
    for (int z = nz - 1; z >= 0; --z) {
      g[static_cast<std::size_t>(pos)] = z;
      rec(pos + 1);
    }
  };
  rec(0);
  return {best_info, best_h};
}

DiscreteJoint fair_independent_bits() {
  DiscreteJoint j(2, 1, 2);
  for (int a = 0; a < 2; ++a)
    for (int y = 0; y < 2; ++y) j.at(a, 0, y) = 0.25;
  return j;
}

}  // namespace

TEST_CASE("entropy and mutual information on textbook cases") {
  const Distribution ind = fair_independent_bits().distribution();
  CHECK(std::abs(mutual_info(ind, {kX1}, {kY})) < 1e-15);
  CHECK(entropy(ind, {kX1}) == doctest::Approx(1.0));
  CHECK(entropy(ind, {kY}) == doctest::Approx(1.0));

  DiscreteJoint copy(2, 1, 2);
  copy.at(0, 0, 0) = copy.at(1, 0, 1) = 0.5;
  const Distribution c = copy.distribution();
  CHECK(mutual_info(c, {kX1}, {kY}) == doctest::Approx(1.0));
  CHECK(cond_mutual_info(c, {kX1}, {kY}, {kX2}) == doctest::Approx(1.0));
  // 0 log 0 = 0: a zero-probability symbol leaves the entropy unchanged.
  DiscreteJoint padded(3, 1, 2);
  padded.at(0, 0, 0) = padded.at(1, 0, 1) = 0.5;
  CHECK(entropy(padded.distribution(), {kX1}) == doctest::Approx(1.0));
}

TEST_CASE("direct summation agrees with entropy identities on random joints") {
  Rng rng(2021);
  for (int trial = 0; trial < 50; ++trial) {
    const DiscreteJoint j = random_joint(rng, 3, 3, 2);
    const Distribution d = j.distribution();
    // Co-information two ways.
    const double co_direct = mutual_info(d, {kX1}, {kY}) - cond_mutual_info(d, {kX1}, {kY}, {kX2});
    const double co_entropy = h(d, {kX1}) + h(d, {kY}) + h(d, {kX2}) - h(d, {kX1, kY}) -
                              h(d, {kX1, kX2}) - h(d, {kY, kX2}) + h(d, {kX1, kX2, kY});
    CHECK(std::abs(co_direct - co_entropy) < 1e-10);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        if (a == b) continue;
        const int c = 3 - a - b;
        const double i = mutual_info(d, {a}, {b});
        CHECK(std::abs(i - mi_oracle(d, a, b)) < 1e-12);
        CHECK(i >= -1e-15);
        CHECK(std::abs(i - mutual_info(d, {b}, {a})) < 1e-15);
        const double ci = cond_mutual_info(d, {a}, {b}, {c});
        CHECK(std::abs(ci - cmi_oracle(d, a, b, c)) < 1e-12);
        CHECK(ci >= -1e-15);
        // Chain rule: I(A; B,C) = I(A;C) + I(A;B|C).
        const std::vector<int> av{a}, bc{b, c}, cv{c};
        CHECK(std::abs(mutual_info(d, std::span<const int>(av), std::span<const int>(bc)) -
                       mutual_info(d, {a}, {c}) - ci) < 1e-10);
      }
  }
}

TEST_CASE("joint validation and JSON") {
  DiscreteJoint bad(2, 1, 1);
  bad.p = {0.5, 0.4};
  CHECK_THROWS_AS(bad.validate(), InputError);
  bad.p = {1.2, -0.2};
  CHECK_THROWS_AS(bad.validate(), InputError);
  bad.p = {0.5, std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(bad.validate(), InputError);
  CHECK_THROWS_AS(bad.distribution(), InputError);

  const DiscreteJoint x = xor_joint();
  const DiscreteJoint back = DiscreteJoint::from_json(x.to_json());
  CHECK(back.p == x.p);
  nlohmann::json flat = {{"alphabets", {{"x1", 4}, {"x2", 2}, {"y", 2}}}, {"probs", x.p}};
  CHECK(DiscreteJoint::from_json(flat).p == x.p);
  flat["probs"].erase(0);
  CHECK_THROWS_AS(DiscreteJoint::from_json(flat), InputError);
  CHECK_THROWS_AS(DiscreteJoint::from_json(nlohmann::json{{"probs", 1}}), InputError);
}

TEST_CASE("map enumeration size cap") {
  CHECK(map_count(6, 6) == 46656);
  CHECK(map_count(7, 7) == 823543);
  CHECK_THROWS_AS(map_count(8, 8), SizeError);
  CHECK_THROWS_AS(find_minimal_sufficient_inv(xor_joint(), 100), SizeError);
}

TEST_CASE("minimal sufficient representation for the label") {
  SUBCASE("Y = f(X1) deterministic: I(Z;Y) = H(Y)") {
    DiscreteJoint j(4, 1, 2);
    const double px[4] = {0.1, 0.2, 0.3, 0.4};
    const int f[4] = {1, 0, 1, 1};
    for (int a = 0; a < 4; ++a) j.at(a, 0, f[a]) = px[a];
    const auto r = find_minimal_sufficient_sup(j, 4);
    CHECK(r.target_info == doctest::Approx(entropy(j.distribution(), {kY})).epsilon(1e-12));
    CHECK(r.sufficient);
    // Minimality: Z carries nothing beyond Y.
    CHECK(r.compression == doctest::Approx(r.target_info).epsilon(1e-12));
    CHECK(r.map.table == std::vector<int>{0, 1, 0, 0});  // lexicographically first relabeling of f
  }

  SUBCASE("Y independent of X1: constant map") {
    DiscreteJoint j(3, 1, 2);
    for (int a = 0; a < 3; ++a)
      for (int y = 0; y < 2; ++y) j.at(a, 0, y) = (a + 1) / 6.0 * (y ? 0.3 : 0.7);
    const auto r = find_minimal_sufficient_sup(j, 3);
    CHECK(r.map.table == std::vector<int>{0, 0, 0});
    CHECK(std::abs(r.compression) < 1e-15);
    CHECK(std::abs(r.target_info) < 1e-15);
  }

  SUBCASE("two P(Y|x) classes over four symbols are merged") {
    // Rows 0 and 2 share P(Y|x) = (0.8, 0.2); rows 1 and 3 share (0.3, 0.7).
    DiscreteJoint j(4, 1, 2);
    const double px[4] = {0.1, 0.2, 0.3, 0.4};
    const double py1[4] = {0.2, 0.7, 0.2, 0.7};
    for (int a = 0; a < 4; ++a) {
      j.at(a, 0, 1) = px[a] * py1[a];
      j.at(a, 0, 0) = px[a] * (1 - py1[a]);
    }
    const auto r = find_minimal_sufficient_sup(j, 4);
    CHECK(r.map.table == std::vector<int>{0, 1, 0, 1});
    CHECK(r.sufficient);
    const auto ref = reference_search(j, 4, kY);
    CHECK(std::abs(r.target_info - ref.first) < 1e-12);
    CHECK(std::abs(r.compression - ref.second) < 1e-12);
    CHECK(r.enumerated == 256);
  }

  SUBCASE("too small an alphabet is reported as insufficient") {
    DiscreteJoint j(3, 1, 3);
    for (int a = 0; a < 3; ++a) j.at(a, 0, a) = 1.0 / 3.0;
    const auto r = find_minimal_sufficient_sup(j, 2);
    CHECK_FALSE(r.sufficient);
    CHECK(r.target_info < r.bound);
  }
}

TEST_CASE("minimal sufficient representation across domains") {
  SUBCASE("X2 = X1: an injective map attains H(X1)") {
    DiscreteJoint j(3, 3, 1);
    j.at(0, 0, 0) = 0.5;
    j.at(1, 1, 0) = 0.25;
    j.at(2, 2, 0) = 0.25;
    const auto r = find_minimal_sufficient_inv(j, 3);
    CHECK(r.target_info == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(r.map.table == std::vector<int>{0, 1, 2});
  }

  SUBCASE("X2 independent of X1: constant map") {
    DiscreteJoint j(3, 2, 1);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 2; ++b) j.at(a, b, 0) = 1.0 / 6.0;
    const auto r = find_minimal_sufficient_inv(j, 3);
    CHECK(r.map.table == std::vector<int>{0, 0, 0});
    CHECK(std::abs(r.target_info) < 1e-15);
  }

  SUBCASE("XOR: Z_I* recovers exactly the shared coordinate U") {
    const auto r = find_minimal_sufficient_inv(xor_joint(), 4);
    CHECK(r.map.table == std::vector<int>{0, 0, 1, 1});  // x1 = 2U + V
    CHECK(r.target_info == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.compression == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("agrees with the reference enumeration on random joints") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      const DiscreteJoint j = trial % 2 ? random_joint(rng, 4, 3, 2) : random_structured_joint(rng, 4, 3, 2);
      for (int target : {kY, kX2}) {
        const auto r = target == kY ? find_minimal_sufficient_sup(j, 4) : find_minimal_sufficient_inv(j, 4);
        const auto ref = reference_search(j, 4, target);
        CHECK(std::abs(r.target_info - ref.first) < 1e-12);
        CHECK(std::abs(r.compression - ref.second) < 1e-12);
      }
    }
  }
}

TEST_CASE("verify_theorem1") {
  SUBCASE("XOR construction") {
    const auto r = verify_theorem1(xor_joint(), 4);
    CHECK(r.lhs == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(r.i_zi_y) < 1e-15);
    CHECK(r.epsilon1 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.residual < 1e-12);
    CHECK(r.part1_residual < 1e-12);
    CHECK(r.chain_residual < 1e-12);
    CHECK(r.precondition.passes);
    CHECK(r.holds);
    CHECK(r.status == "holds");
    // X1 and X2 stay dependent given Y, so X2 - Y - X1 does not hold literally.
    CHECK_FALSE(r.precondition.markov_literal);
    CHECK(r.precondition.i_x1_x2_given_y == doctest::Approx(1.0).epsilon(1e-12));
    const auto j = r.to_json();
    CHECK(j["status"] == "holds");
    CHECK(j["z_i_star"]["map"] == std::vector<int>{0, 0, 1, 1});
  }

  SUBCASE("constant V: no specific information") {
    const auto r = verify_theorem1(xor_joint_constant_v(), 4);
    CHECK(std::abs(r.epsilon1) < 1e-15);
    CHECK(std::abs(r.lhs - r.i_zi_y) < 1e-12);
    CHECK(r.holds);
  }

  SUBCASE("joints with X2 = h(X1) pass the precondition and satisfy the identity") {
    Rng rng(77);
    int passed = 0;
    double worst = 0;
    for (int trial = 0; trial < 120; ++trial) {
      const int nx1 = 2 + static_cast<int>(uniform_below(rng, 5));  // 2..6
      const int nx2 = 2 + static_cast<int>(uniform_below(rng, 2));
      const int ny = 2 + static_cast<int>(uniform_below(rng, 2));
      const auto r = verify_theorem1(random_structured_joint(rng, nx1, nx2, ny), nx1);
      passed += r.in_scope;
      if (r.in_scope) worst = std::max(worst, r.residual);
      CHECK(r.chain_residual < 1e-10);
      CHECK(r.part1_residual < 1e-10);
    }
    CHECK(passed >= 100);
    CHECK(worst < 1e-9);
  }

  SUBCASE("generic joints are flagged, not failed") {
    Rng rng(8);
    int out_of_scope = 0;
    for (int trial = 0; trial < 20; ++trial) {
      const auto r = verify_theorem1(random_joint(rng, 3, 2, 2), 3);
      if (!r.in_scope) {
        ++out_of_scope;
        CHECK(r.status == "out of theorem scope");
        CHECK_FALSE(r.holds);
        CHECK(std::isfinite(r.residual));
      }
    }
    CHECK(out_of_scope > 0);
  }
}

TEST_CASE("deterministic-map invariants") {
  Rng rng(13);
  for (int trial = 0; trial < 6; ++trial) {
    const DiscreteJoint j = trial % 2 ? random_joint(rng, 4, 3, 2) : random_structured_joint(rng, 4, 2, 3);
    const auto r = check_map_invariants(j, 3);
    CHECK(r.maps == 81);
    CHECK(r.max_i_z_y_given_x1 == 0.0);
    CHECK(r.max_i_z_x2_given_x1 == 0.0);
    CHECK(r.max_dpi_excess <= 1e-12);
  }
  const auto x = check_map_invariants(xor_joint(), 4);
  CHECK(x.max_i_z_y_given_x1 == 0.0);
  CHECK(x.max_dpi_excess <= 1e-12);
}

TEST_CASE("specificity report") {
  const auto r = check_specificity(xor_joint(), 4);
  CHECK(r.epsilon1 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.achievable);
  const auto c = check_specificity(xor_joint_constant_v(), 4);
  CHECK_FALSE(c.to_json()["epsilon1_positive"].get<bool>());
}

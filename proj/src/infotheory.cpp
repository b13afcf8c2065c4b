// SPDX-License-Identifier: Apache-2.0
#include "dsdi/infotheory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dsdi/errors.hpp"

namespace dsdi {

namespace {

constexpr double kNormTolerance = 1e-12;
constexpr double kTieTolerance = 1e-12;

std::vector<std::size_t> strides_of(const std::vector<int>& sizes) {
  std::vector<std::size_t> s(sizes.size(), 1);
  for (std::size_t i = sizes.size(); i-- > 1;) s[i - 1] = s[i] * static_cast<std::size_t>(sizes[i]);
  return s;
}

std::vector<int> concat(std::span<const int> a, std::span<const int> b) {
  std::vector<int> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

void check_vars(const Distribution& d, std::span<const int> vars) {
  for (int v : vars)
    if (v < 0 || static_cast<std::size_t>(v) >= d.rank())
      throw InputError("variable index " + std::to_string(v) + " out of range");
}

}  // namespace

Distribution Distribution::marginal(std::span<const int> vars) const {
  check_vars(*this, vars);
  Distribution out;
  for (int v : vars) out.sizes.push_back(sizes[static_cast<std::size_t>(v)]);
  const std::size_t n_out = std::accumulate(out.sizes.begin(), out.sizes.end(), std::size_t{1},
                                            [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  out.p.assign(n_out, 0.0);
  const auto in_strides = strides_of(sizes);
  const auto out_strides = strides_of(out.sizes);
  for (std::size_t flat = 0; flat < p.size(); ++flat) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < vars.size(); ++k) {
      const auto v = static_cast<std::size_t>(vars[k]);
      const std::size_t coord = (flat / in_strides[v]) % static_cast<std::size_t>(sizes[v]);
      o += coord * out_strides[k];
    }
    out.p[o] += p[flat];
  }
  return out;
}

DiscreteJoint::DiscreteJoint(int x1, int x2, int y) : nx1(x1), nx2(x2), ny(y) {
  if (x1 < 1 || x2 < 1 || y < 1) throw InputError("alphabet sizes must be >= 1");
  p.assign(static_cast<std::size_t>(x1 * x2 * y), 0.0);
}

void DiscreteJoint::validate() const {
  if (nx1 < 1 || nx2 < 1 || ny < 1) throw InputError("alphabet sizes must be >= 1");
  if (p.size() != static_cast<std::size_t>(nx1 * nx2 * ny))
    throw InputError("probability table has " + std::to_string(p.size()) + " entries, expected " +
                     std::to_string(nx1 * nx2 * ny));
  double sum = 0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0) throw InputError("probabilities must be finite and >= 0");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kNormTolerance)
    throw InputError("probabilities sum to " + std::to_string(sum) + ", not 1");
}

Distribution DiscreteJoint::distribution() const {
  validate();
  return {{nx1, nx2, ny}, p};
}

nlohmann::json DiscreteJoint::to_json() const {
  nlohmann::json probs = nlohmann::json::array();
  for (int a = 0; a < nx1; ++a) {
    nlohmann::json plane = nlohmann::json::array();
    for (int b = 0; b < nx2; ++b) {
      nlohmann::json row = nlohmann::json::array();
      for (int y = 0; y < ny; ++y) row.push_back(at(a, b, y));
      plane.push_back(row);
    }
    probs.push_back(plane);
  }
  return {{"alphabets", {{"x1", nx1}, {"x2", nx2}, {"y", ny}}}, {"probs", probs}};
}

DiscreteJoint DiscreteJoint::from_json(const nlohmann::json& j) {
  try {
    const auto& al = j.at("alphabets");
    DiscreteJoint d(al.at("x1").get<int>(), al.at("x2").get<int>(), al.at("y").get<int>());
    const auto& probs = j.at("probs");
    if (!probs.is_array()) throw InputError("probs must be an array");
    if (!probs.empty() && probs.front().is_array()) {
      if (probs.size() != static_cast<std::size_t>(d.nx1)) throw InputError("probs: wrong |X1| extent");
      for (int a = 0; a < d.nx1; ++a) {
        const auto& plane = probs[static_cast<std::size_t>(a)];
        if (!plane.is_array() || plane.size() != static_cast<std::size_t>(d.nx2))
          throw InputError("probs: wrong |X2| extent");
        for (int b = 0; b < d.nx2; ++b) {
          const auto& row = plane[static_cast<std::size_t>(b)];
          if (!row.is_array() || row.size() != static_cast<std::size_t>(d.ny))
            throw InputError("probs: wrong |Y| extent");
          for (int y = 0; y < d.ny; ++y) d.at(a, b, y) = row[static_cast<std::size_t>(y)].get<double>();
        }
      }
    } else {
      if (probs.size() != d.p.size())
        throw InputError("probs: expected " + std::to_string(d.p.size()) + " entries");
      for (std::size_t i = 0; i < d.p.size(); ++i) d.p[i] = probs[i].get<double>();
    }
    d.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed joint: ") + e.what());
  }
}

Distribution with_map(const DiscreteJoint& joint, const DeterministicMap& g) {
  joint.validate();
  if (g.table.size() != static_cast<std::size_t>(joint.nx1))
    throw InputError("map table size does not match |X1|");
  for (int z : g.table)
    if (z < 0 || z >= g.z_size) throw InputError("map value out of range");
  Distribution d{{joint.nx1, joint.nx2, joint.ny, g.z_size}, {}};
  d.p.assign(joint.p.size() * static_cast<std::size_t>(g.z_size), 0.0);
  for (int a = 0; a < joint.nx1; ++a)
    for (int b = 0; b < joint.nx2; ++b)
      for (int y = 0; y < joint.ny; ++y)
        d.p[static_cast<std::size_t>(((a * joint.nx2 + b) * joint.ny + y) * g.z_size + g(a))] = joint.at(a, b, y);
  return d;
}

double entropy(const Distribution& d, std::span<const int> vars) {
  const Distribution m = d.marginal(vars);
  double h = 0;
  for (double v : m.p)
    if (v > 0) h -= v * std::log2(v);
  return h;
}

double mutual_info(const Distribution& d, std::span<const int> a, std::span<const int> b) {
  // Direct summation: sum p(a,b) log p(a,b) / (p(a) p(b)).
  const auto ab = concat(a, b);
  const Distribution pab = d.marginal(ab);
  const Distribution pa = d.marginal(a);
  const Distribution pb = d.marginal(b);
  const std::size_t nb = pb.p.size();
  double i = 0;
  for (std::size_t x = 0; x < pa.p.size(); ++x)
    for (std::size_t y = 0; y < nb; ++y) {
      const double v = pab.p[x * nb + y];
      if (v > 0) i += v * std::log2(v / (pa.p[x] * pb.p[y]));
    }
  return i;
}

double cond_mutual_info(const Distribution& d, std::span<const int> a, std::span<const int> b,
                        std::span<const int> given) {
  // sum p(a,b,c) log p(a,b,c) p(c) / (p(a,c) p(b,c)).
  const auto abc = concat(concat(a, b), given);
  const Distribution pabc = d.marginal(abc);
  const Distribution pac = d.marginal(concat(a, given));
  const Distribution pbc = d.marginal(concat(b, given));
  const Distribution pc = d.marginal(given);
  const std::size_t na = d.marginal(a).p.size();
  const std::size_t nb = d.marginal(b).p.size();
  const std::size_t nc = pc.p.size();
  double i = 0;
  for (std::size_t x = 0; x < na; ++x)
    for (std::size_t y = 0; y < nb; ++y)
      for (std::size_t z = 0; z < nc; ++z) {
        const double v = pabc.p[(x * nb + y) * nc + z];
        if (v > 0) i += v * std::log2(v * pc.p[z] / (pac.p[x * nc + z] * pbc.p[y * nc + z]));
      }
  return i;
}

double entropy(const Distribution& d, std::initializer_list<int> vars) {
  return entropy(d, std::span<const int>(vars.begin(), vars.size()));
}
double mutual_info(const Distribution& d, std::initializer_list<int> a, std::initializer_list<int> b) {
  return mutual_info(d, std::span<const int>(a.begin(), a.size()), std::span<const int>(b.begin(), b.size()));
}
double cond_mutual_info(const Distribution& d, std::initializer_list<int> a,
                        std::initializer_list<int> b, std::initializer_list<int> given) {
  return cond_mutual_info(d, std::span<const int>(a.begin(), a.size()),
                          std::span<const int>(b.begin(), b.size()),
                          std::span<const int>(given.begin(), given.size()));
}

std::uint64_t map_count(int x1_size, int z_size) {
  if (x1_size < 1 || z_size < 1) throw InputError("alphabet sizes must be >= 1");
  std::uint64_t n = 1;
  for (int i = 0; i < x1_size; ++i) {
    n *= static_cast<std::uint64_t>(z_size);
    if (n > kMaxMaps)
      throw SizeError(std::to_string(z_size) + "^" + std::to_string(x1_size) +
                      " maps exceed the enumeration cap of " + std::to_string(kMaxMaps));
  }
  return n;
}

namespace {

/// Calls fn(table) for every map in lexicographic order of the table.
template <typename Fn>
std::uint64_t for_each_map(int x1_size, int z_size, Fn&& fn) {
  const std::uint64_t total = map_count(x1_size, z_size);
  std::vector<int> table(static_cast<std::size_t>(x1_size), 0);
  for (std::uint64_t k = 0; k < total; ++k) {
    fn(table);
    for (int pos = x1_size - 1; pos >= 0; --pos) {
      auto& t = table[static_cast<std::size_t>(pos)];
      if (++t < z_size) break;
      t = 0;
    }
  }
  return total;
}

/// P(X1, T) for T = Y or X2, as a |X1| x |T| table.
std::vector<double> x1_target(const DiscreteJoint& j, int target, int& nt) {
  nt = target == kY ? j.ny : j.nx2;
  std::vector<double> out(static_cast<std::size_t>(j.nx1 * nt), 0.0);
  for (int a = 0; a < j.nx1; ++a)
    for (int b = 0; b < j.nx2; ++b)
      for (int y = 0; y < j.ny; ++y)
        out[static_cast<std::size_t>(a * nt + (target == kY ? y : b))] += j.at(a, b, y);
  return out;
}

RepresentationSearch search(const DiscreteJoint& joint, int z_alphabet, int target) {
  joint.validate();
  if (z_alphabet < 1) throw InputError("z alphabet must be >= 1");
  int nt = 0;
  const auto pxt = x1_target(joint, target, nt);
  std::vector<double> px(static_cast<std::size_t>(joint.nx1), 0.0), pt(static_cast<std::size_t>(nt), 0.0);
  for (int a = 0; a < joint.nx1; ++a)
    for (int t = 0; t < nt; ++t) {
      px[static_cast<std::size_t>(a)] += pxt[static_cast<std::size_t>(a * nt + t)];
      pt[static_cast<std::size_t>(t)] += pxt[static_cast<std::size_t>(a * nt + t)];
    }

  RepresentationSearch best;
  best.target_info = -1;
  std::vector<double> pzt(static_cast<std::size_t>(z_alphabet * nt)), pz(static_cast<std::size_t>(z_alphabet));
  best.enumerated = for_each_map(joint.nx1, z_alphabet, [&](const std::vector<int>& g) {
    std::fill(pzt.begin(), pzt.end(), 0.0);
    std::fill(pz.begin(), pz.end(), 0.0);
    for (int a = 0; a < joint.nx1; ++a) {
      const int z = g[static_cast<std::size_t>(a)];
      pz[static_cast<std::size_t>(z)] += px[static_cast<std::size_t>(a)];
      for (int t = 0; t < nt; ++t)
        pzt[static_cast<std::size_t>(z * nt + t)] += pxt[static_cast<std::size_t>(a * nt + t)];
    }
    double info = 0, h = 0;
    for (int z = 0; z < z_alphabet; ++z) {
      const double q = pz[static_cast<std::size_t>(z)];
      if (q <= 0) continue;
      h -= q * std::log2(q);
      for (int t = 0; t < nt; ++t) {
        const double v = pzt[static_cast<std::size_t>(z * nt + t)];
        if (v > 0) info += v * std::log2(v / (q * pt[static_cast<std::size_t>(t)]));
      }
    }
    const bool better_info = info > best.target_info + kTieTolerance;
    const bool same_info = std::abs(info - best.target_info) <= kTieTolerance;
    if (better_info || (same_info && h < best.compression - kTieTolerance)) {
      best.map = {g, z_alphabet};
      best.target_info = info;
      best.compression = h;
      best.ties = 1;
    } else if (same_info && std::abs(h - best.compression) <= kTieTolerance) {
      ++best.ties;
    }
  });
  const Distribution d = joint.distribution();
  best.bound = mutual_info(d, {kX1}, {target});
  // Recompute the winner's values with the general routines.
  const Distribution dz = with_map(joint, best.map);
  best.target_info = mutual_info(dz, {kZ}, {target});
  best.compression = mutual_info(dz, {kZ}, {kX1});
  best.sufficient = std::abs(best.target_info - best.bound) <= kPreconditionTolerance;
  return best;
}

nlohmann::json search_json(const RepresentationSearch& s) {
  return {{"map", s.map.table},         {"z_alphabet", s.map.z_size},
          {"target_info", s.target_info}, {"compression", s.compression},
          {"bound", s.bound},           {"sufficient", s.sufficient},
          {"enumerated", s.enumerated}, {"ties", s.ties}};
}

}  // namespace

RepresentationSearch find_minimal_sufficient_sup(const DiscreteJoint& joint, int z_alphabet) {
  return search(joint, z_alphabet, kY);
}

RepresentationSearch find_minimal_sufficient_inv(const DiscreteJoint& joint, int z_alphabet) {
  return search(joint, z_alphabet, kX2);
}

Theorem1Report verify_theorem1(const DiscreteJoint& joint, int z_alphabet) {
  const Distribution d = joint.distribution();
  Theorem1Report r;
  r.z_sup = find_minimal_sufficient_sup(joint, z_alphabet);
  r.z_inv = find_minimal_sufficient_inv(joint, z_alphabet);
  const Distribution dsup = with_map(joint, r.z_sup.map);
  const Distribution dinv = with_map(joint, r.z_inv.map);

  r.lhs = mutual_info(d, {kX1}, {kY});
  r.i_zsup_y = mutual_info(dsup, {kZ}, {kY});
  r.i_zi_y = mutual_info(dinv, {kZ}, {kY});
  r.epsilon1 = cond_mutual_info(d, {kX1}, {kY}, {kX2});
  r.rhs = r.i_zi_y + r.epsilon1;
  r.residual = std::abs(r.lhs - r.rhs);
  r.part1_residual = std::abs(r.i_zsup_y - r.lhs);

  auto chain = [](const Distribution& dist, int z) {
    const double lhs = mutual_info(dist, {z}, {kX2});
    const double rhs = mutual_info(dist, {z}, {kY}) - cond_mutual_info(dist, {z}, {kY}, {kX2}) +
                       cond_mutual_info(dist, {z}, {kX2}, {kY});
    return std::abs(lhs - rhs);
  };
  r.chain_residual = std::max(chain(d, kX1), chain(dinv, kZ));

  auto& pc = r.precondition;
  pc.i_x1_x2 = mutual_info(d, {kX1}, {kX2});
  pc.i_zi_x2 = mutual_info(dinv, {kZ}, {kX2});
  pc.i_x1_x2_given_y = cond_mutual_info(d, {kX1}, {kX2}, {kY});
  pc.i_zi_x2_given_y = cond_mutual_info(dinv, {kZ}, {kX2}, {kY});
  pc.i_zi_y_given_x2 = cond_mutual_info(dinv, {kZ}, {kY}, {kX2});
  pc.markov_literal = pc.i_x1_x2_given_y <= kPreconditionTolerance;
  pc.passes = std::abs(pc.i_x1_x2 - pc.i_zi_x2) <= kPreconditionTolerance &&
              std::abs(pc.i_x1_x2_given_y - pc.i_zi_x2_given_y) <= kPreconditionTolerance &&
              pc.i_zi_y_given_x2 <= kPreconditionTolerance;

  r.in_scope = pc.passes;
  r.holds = r.in_scope && r.residual < kTheoremTolerance;
  r.status = !r.in_scope ? "out of theorem scope" : r.holds ? "holds" : "violated";
  return r;
}

nlohmann::json Theorem1Report::to_json() const {
  const auto& pc = precondition;
  return {{"lhs", lhs},
          {"rhs", rhs},
          {"i_x1_y", lhs},
          {"i_zsup_y", i_zsup_y},
          {"i_zi_y", i_zi_y},
          {"epsilon1", epsilon1},
          {"residual", residual},
          {"part1_residual", part1_residual},
          {"chain_residual", chain_residual},
          {"holds", holds},
          {"in_scope", in_scope},
          {"status", status},
          {"tolerance", kTheoremTolerance},
          {"z_sup_star", search_json(z_sup)},
          {"z_i_star", search_json(z_inv)},
          {"precondition",
           {{"i_x1_x2", pc.i_x1_x2},
            {"i_zi_x2", pc.i_zi_x2},
            {"i_x1_x2_given_y", pc.i_x1_x2_given_y},
            {"i_zi_x2_given_y", pc.i_zi_x2_given_y},
            {"i_zi_y_given_x2", pc.i_zi_y_given_x2},
            {"markov_chain_x2_y_x1", pc.markov_literal},
            {"passes", pc.passes},
            {"tolerance", kPreconditionTolerance}}}};
}

SpecificityReport check_specificity(const DiscreteJoint& joint, int z_alphabet) {
  const Distribution d = joint.distribution();
  SpecificityReport r;
  r.epsilon1 = cond_mutual_info(d, {kX1}, {kY}, {kX2});
  r.best = -1;
  for_each_map(joint.nx1, z_alphabet, [&](const std::vector<int>& g) {
    const DeterministicMap m{g, z_alphabet};
    const double v = cond_mutual_info(with_map(joint, m), {kZ}, {kY}, {kX2});
    if (v > r.best + kTieTolerance) {
      r.best = v;
      r.map = m;
    }
  });
  r.achievable = std::abs(r.best - r.epsilon1) <= kPreconditionTolerance;
  return r;
}

nlohmann::json SpecificityReport::to_json() const {
  return {{"epsilon1", epsilon1},
          {"best_i_z_y_given_x2", best},
          {"map", map.table},
          {"achievable", achievable},
          {"epsilon1_positive", epsilon1 > kPreconditionTolerance}};
}

MapInvariantReport check_map_invariants(const DiscreteJoint& joint, int z_alphabet) {
  const Distribution d = joint.distribution();
  const double i_x1_y = mutual_info(d, {kX1}, {kY});
  const double i_x1_x2 = mutual_info(d, {kX1}, {kX2});
  MapInvariantReport r;
  r.max_dpi_excess = -std::numeric_limits<double>::infinity();
  r.maps = for_each_map(joint.nx1, z_alphabet, [&](const std::vector<int>& g) {
    const Distribution dz = with_map(joint, {g, z_alphabet});
    r.max_i_z_y_given_x1 = std::max(r.max_i_z_y_given_x1, std::abs(cond_mutual_info(dz, {kZ}, {kY}, {kX1})));
    r.max_i_z_x2_given_x1 = std::max(r.max_i_z_x2_given_x1, std::abs(cond_mutual_info(dz, {kZ}, {kX2}, {kX1})));
    r.max_dpi_excess = std::max({r.max_dpi_excess, mutual_info(dz, {kZ}, {kY}) - i_x1_y,
                                 mutual_info(dz, {kZ}, {kX2}) - i_x1_x2});
  });
  return r;
}

DiscreteJoint xor_joint() {
  DiscreteJoint j(4, 2, 2);
  for (int u = 0; u < 2; ++u)
    for (int v = 0; v < 2; ++v) j.at(2 * u + v, u, u ^ v) = 0.25;
  return j;
}

DiscreteJoint xor_joint_constant_v() {
  DiscreteJoint j(4, 2, 2);
  for (int u = 0; u < 2; ++u) j.at(2 * u, u, u) = 0.5;
  return j;
}

namespace {

void normalize(DiscreteJoint& j) {
  double sum = 0;
  for (double v : j.p) sum += v;
  for (double& v : j.p) v /= sum;
  // Fold the rounding remainder into the largest cell so the sum is 1 to the last ulp we can get.
  double s2 = 0;
  for (double v : j.p) s2 += v;
  *std::max_element(j.p.begin(), j.p.end()) += 1.0 - s2;
}

double exp_variate(Rng& rng) { return -std::log(1.0 - uniform01(rng)); }

}  // namespace

DiscreteJoint random_structured_joint(Rng& rng, int nx1, int nx2, int ny) {
  DiscreteJoint j(nx1, nx2, ny);
  std::vector<int> h(static_cast<std::size_t>(nx1));
  for (auto& v : h) v = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(nx2)));
  for (int a = 0; a < nx1; ++a)
    for (int y = 0; y < ny; ++y) j.at(a, h[static_cast<std::size_t>(a)], y) = exp_variate(rng);
  normalize(j);
  return j;
}

DiscreteJoint random_joint(Rng& rng, int nx1, int nx2, int ny) {
  DiscreteJoint j(nx1, nx2, ny);
  for (double& v : j.p) v = exp_variate(rng);
  normalize(j);
  return j;
}

}  // namespace dsdi

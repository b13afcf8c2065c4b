// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <map>

#include "dsdi/errors.hpp"
#include "dsdi/losses.hpp"
#include "gradcheck.hpp"

using namespace dsdi;
using dsdi::testing::gradient_relative_error;
using dsdi::testing::random_tensor;

namespace {

using Grads = std::map<std::string, Tensor<double>>;

struct Fixture {
  std::mt19937_64 rng{17};
  DsdiModel<double> model{ModelDims{}, 31};
  Tensor<double> images = random_tensor({6, 3, 8, 8}, rng, 0.0, 1.0);
  std::vector<int> labels = {0, 3, 9, 1, 3, 5};
  std::vector<int> domains = {0, 0, 1, 1, 2, 2};

  // Parameter gradients of one bundle term after a single backward pass.
  template <typename Pick>
  Grads grads(const LossWeights& w, double grl, Pick pick) {
    model.zero_grad();
    Tape<double> tape;
    const auto out = forward_all(tape, model, images, grl);
    const auto b = loss_total(out, labels, domains, w);
    tape.backward(pick(b));
    Grads g;
    for (auto* p : model.parameters()) g[p->name] = p->grad;
    return g;
  }
  Grads total(const LossWeights& w, double grl = 1.0) {
    return grads(w, grl, [](const LossBundle<double>& b) { return b.l_a; });
  }
};

double max_abs_diff(const Grads& a, const Grads& b, const std::string& prefix = "") {
  double worst = 0.0;
  for (const auto& [name, g] : a)
    if (name.starts_with(prefix))
      worst = std::max(worst, (g.array() - b.at(name).array()).abs().maxCoeff());
  return worst;
}

double max_abs(const Grads& a, const std::string& prefix) {
  double worst = 0.0;
  for (const auto& [name, g] : a)
    if (name.starts_with(prefix)) worst = std::max(worst, g.array().abs().maxCoeff());
  return worst;
}

Grads combine(const Grads& a, double sa, const Grads& b, double sb) {
  Grads out;
  for (const auto& [name, g] : a) {
    Tensor<double> t(g.shape());
    t.array() = sa * g.array() + sb * b.at(name).array();
    out[name] = t;
  }
  return out;
}

}  // namespace

TEST_CASE("cross-entropy terms at uniform and confident logits") {
  Tape<double> tape;
  const std::vector<int> d = {0, 1, 2, 1};
  const std::vector<int> y = {0, 9, 4, 4};
  const auto uniform3 = tape.constant(Tensor<double>({4, 3}, 0.7));
  const auto uniform10 = tape.constant(Tensor<double>({4, 10}, -2.0));
  CHECK(loss_zi(uniform3, d).item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(loss_zs(uniform3, d).item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(loss_task(uniform10, y).item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  Tensor<double> sharp({4, 3}, 0.0);
  for (int i = 0; i < 4; ++i) sharp[i * 3 + d[static_cast<std::size_t>(i)]] = 50.0;
  CHECK(loss_zi(tape.constant(sharp), d).item() < 1e-12);

  // One-hot target, matching argmax and a unit margin: no smoothing means < ln 2.
  Tensor<double> margin({1, 10}, 0.0);
  margin[4] = 3.0;
  const std::vector<int> four = {4};
  CHECK(loss_task(tape.constant(margin), four).item() < std::log(2.0));
}

TEST_CASE("loss_task gradient check through F") {
  std::mt19937_64 rng(3);
  const std::vector<int> y = {2, 0, 1, 2, 1};
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_tensor({5, 6}, rng);
    const auto w = random_tensor({6, 3}, rng);
    const auto bias = random_tensor({3}, rng);
    const double err = gradient_relative_error(
        [&](Tape<double>&, const std::vector<Var<double>>& v) {
          return loss_task(add_channel_bias(matmul(v[0], v[1]), v[2]), y);
        },
        {z, w, bias});
    CHECK(err < 1e-4);
  }
}

TEST_CASE("loss_disentangle") {
  std::mt19937_64 rng(5);
  Tape<double> tape;
  const auto zi = random_tensor({8, 4}, rng);
  const auto zs = random_tensor({8, 5}, rng);

  SUBCASE("constant z_s gives zero") {
    Tensor<double> c({8, 5});
    for (Index i = 0; i < 8; ++i)
      for (Index j = 0; j < 5; ++j) c[i * 5 + j] = static_cast<double>(j) - 1.5;
    CHECK(loss_disentangle(tape.constant(zi), tape.constant(c)).item() == 0.0);
  }
  SUBCASE("copied features give the norm of the self-covariance") {
    const double got = loss_disentangle(tape.constant(zi), tape.constant(zi)).item();
    const double expect = covariance_matrix(zi, zi).norm();
    CHECK(got > 0.0);
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("row shift invariance") {
    Tensor<double> shifted = zi;
    const double offsets[4] = {3.0, -1.0, 100.0, 0.5};
    for (Index i = 0; i < 8; ++i)
      for (Index j = 0; j < 4; ++j) shifted[i * 4 + j] += offsets[j];
    CHECK(loss_disentangle(tape.constant(shifted), tape.constant(zs)).item() ==
          doctest::Approx(loss_disentangle(tape.constant(zi), tape.constant(zs)).item()).epsilon(1e-10));
  }
  SUBCASE("degenerate batch") {
    CHECK_THROWS_AS(loss_disentangle(tape.constant(Tensor<double>({1, 4})),
                                     tape.constant(Tensor<double>({1, 5}))),
                    DegenerateBatchError);
  }
  SUBCASE("non-negative on random batches") {
    for (int t = 0; t < 20; ++t)
      CHECK(loss_disentangle(tape.constant(random_tensor({4, 3}, rng)),
                             tape.constant(random_tensor({4, 3}, rng)))
                .item() >= 0.0);
  }
}

TEST_CASE("loss_total composition") {
  Fixture fx;

  SUBCASE("exact weighted sum of independently computed terms") {
    Tape<double> tape;
    const auto out = forward_all(tape, fx.model, fx.images, 1.0);
    const auto b = loss_total(out, fx.labels, fx.domains, LossWeights{});
    const double sum = b.l_zi.item() + b.l_zs.item() + b.l_d.item() + b.l_t.item();
    CHECK(std::abs(b.l_a.item() - sum) < 1e-12);
    CHECK(b.l_zi.item() == loss_zi(out.domain_logits_i, fx.domains).item());
    CHECK(b.l_zs.item() == loss_zs(out.domain_logits_s, fx.domains).item());
    CHECK(b.l_d.item() == loss_disentangle(out.z_i, out.z_s).item());
    CHECK(b.l_t.item() == loss_task(out.class_logits, fx.labels).item());
    for (const auto& v : {b.l_zi, b.l_zs, b.l_d, b.l_t}) CHECK(v.item() >= 0.0);

    const LossWeights w{0.3, 2.0, 0.7};
    Tape<double> t2;
    const auto o2 = forward_all(t2, fx.model, fx.images, 1.0);
    const auto b2 = loss_total(o2, fx.labels, fx.domains, w);
    CHECK(b2.l_a.item() == ((0.3 * b2.l_zi.item() + 2.0 * b2.l_zs.item()) + 0.7 * b2.l_d.item()) +
                               b2.l_t.item());
  }

  SUBCASE("zero weights reduce L_A to L_T and silence the domain heads") {
    const LossWeights zero{0.0, 0.0, 0.0};
    Tape<double> tape;
    const auto out = forward_all(tape, fx.model, fx.images, 1.0);
    const auto b = loss_total(out, fx.labels, fx.domains, zero);
    CHECK(b.l_a.item() == b.l_t.item());
    const Grads g = fx.total(zero);
    CHECK(max_abs(g, "D_I") == 0.0);
    CHECK(max_abs(g, "D_S") == 0.0);
    CHECK(max_abs(g, "Q") > 0.0);
  }

  SUBCASE("one backward of L_A equals the sum of per-term backward passes") {
    const LossWeights w{0.5, 1.5, 2.0};
    const Grads all = fx.total(w);
    const Grads zi = fx.grads(w, 1.0, [](const LossBundle<double>& b) { return b.l_zi; });
    const Grads zs = fx.grads(w, 1.0, [](const LossBundle<double>& b) { return b.l_zs; });
    const Grads d = fx.grads(w, 1.0, [](const LossBundle<double>& b) { return b.l_d; });
    const Grads t = fx.grads(w, 1.0, [](const LossBundle<double>& b) { return b.l_t; });
    const Grads sum =
        combine(combine(combine(zi, 0.5, zs, 1.5), 1.0, d, 2.0), 1.0, t, 1.0);
    CHECK(max_abs_diff(all, sum) < 1e-10);
  }

  SUBCASE("adversarial identity on Q") {
    // Contribution of L_ZI to dL_A/dtheta_Q equals -lambda_zi times the
    // gradient of the same cross-entropy taken without reversal.
    const double lz = 0.8;
    const Grads with = fx.total({lz, 0.0, 0.0});
    const Grads without_term = fx.total({0.0, 0.0, 0.0});
    const Grads plain = fx.grads({1.0, 0.0, 0.0}, -1.0, [](const LossBundle<double>& b) { return b.l_zi; });
    const Grads contribution = combine(with, 1.0, without_term, -1.0);
    CHECK(max_abs_diff(contribution, combine(plain, -lz, plain, 0.0), "Q") < 1e-10);
    CHECK(max_abs(plain, "Q") > 0.0);
    // The discriminator itself sees the same gradient with or without reversal.
    const Grads reversed = fx.grads({1.0, 0.0, 0.0}, 1.0, [](const LossBundle<double>& b) { return b.l_zi; });
    CHECK(max_abs_diff(reversed, plain, "D_I") < 1e-12);
    CHECK(max_abs_diff(reversed, combine(plain, -1.0, plain, 0.0), "Q") < 1e-12);
  }

  SUBCASE("L_ZS is cooperative: R and D_S descend together") {
    const Grads g = fx.grads({0.0, 1.0, 0.0}, 1.0, [](const LossBundle<double>& b) { return b.l_zs; });
    CHECK(max_abs(g, "R") > 0.0);
    CHECK(max_abs(g, "D_S") > 0.0);
    CHECK(max_abs(g, "Q") == 0.0);
    auto value = [&] {
      Tape<double> tape;
      const auto out = forward_all(tape, fx.model, fx.images, 1.0);
      return loss_zs(out.domain_logits_s, fx.domains).item();
    };
    const double before = value();
    // A small step against the gradient in R alone and in D_S alone each lowers the loss.
    for (const std::string prefix : {"R.", "D_S."}) {
      for (auto* p : fx.model.parameters())
        if (p->name.starts_with(prefix)) p->value.array() -= 1e-3 * g.at(p->name).array();
      CHECK(value() < before);
      for (auto* p : fx.model.parameters())
        if (p->name.starts_with(prefix)) p->value.array() += 1e-3 * g.at(p->name).array();
    }
  }

  SUBCASE("doubling lambda_d doubles the disentanglement contribution") {
    const Grads g0 = fx.total({1.0, 1.0, 0.0});
    const Grads g1 = fx.total({1.0, 1.0, 1.0});
    const Grads g2 = fx.total({1.0, 1.0, 2.0});
    const Grads c1 = combine(g1, 1.0, g0, -1.0);
    const Grads c2 = combine(g2, 1.0, g0, -1.0);
    CHECK(max_abs_diff(c2, combine(c1, 2.0, c1, 0.0)) < 1e-10);
    CHECK(max_abs(c1, "Q") > 0.0);
    CHECK(max_abs(c1, "R") > 0.0);
    CHECK(max_abs(c1, "F") == 0.0);
  }

  SUBCASE("invalid weights") {
    Tape<double> tape;
    const auto out = forward_all(tape, fx.model, fx.images, 1.0);
    CHECK_THROWS_AS(loss_total(out, fx.labels, fx.domains, LossWeights{-0.1, 1.0, 1.0}), ConfigError);
    CHECK_THROWS_AS(loss_total(out, fx.labels, fx.domains, LossWeights{1.0, 1.0, NAN}), ConfigError);
    CHECK_THROWS_AS(LossWeights::from_json({{"lambda_d", -1.0}}), ConfigError);
  }

  SUBCASE("single-branch layouts leave absent terms at zero") {
    ModelDims di;
    di.specific_branch = false;
    DsdiModel<double> m(di, 2);
    Tape<double> tape;
    const auto out = forward_all(tape, m, fx.images, 1.0);
    const auto b = loss_total(out, fx.labels, fx.domains, LossWeights{});
    CHECK(b.l_zs.item() == 0.0);
    CHECK(b.l_d.item() == 0.0);
    CHECK(b.l_a.item() == b.l_zi.item() + b.l_t.item());
  }
}

TEST_CASE("L_ZS decreases while training R and D_S on a hue-coded toy set") {
  // Three domains whose images are dominated by red, green or blue.
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.0, 0.4);
  const Index n = 12, hw = 8;
  Tensor<double> images({n, 3, hw, hw});
  std::vector<int> domains(static_cast<std::size_t>(n)), labels(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i) {
    const int d = static_cast<int>(i % 3);
    domains[static_cast<std::size_t>(i)] = d;
    for (Index c = 0; c < 3; ++c)
      for (Index p = 0; p < hw * hw; ++p)
        images[(i * 3 + c) * hw * hw + p] = (c == d ? 0.6 : 0.0) + u(rng);
  }
  ModelDims dims;
  dims.invariant_branch = false;
  DsdiModel<double> model(dims, 3);
  auto step = [&](bool update) {
    model.zero_grad();
    Tape<double> tape;
    const auto out = forward_all(tape, model, images, 1.0, GroupMask::only({Group::R, Group::DS}));
    const auto l = loss_zs(out.domain_logits_s, domains);
    if (update) {
      tape.backward(l);
      for (Group g : {Group::R, Group::DS})
        for (auto* p : model.parameters(g)) p->value.array() -= 0.01 * p->grad.array();
    }
    return l.item();
  };
  const double first = step(false);
  for (int i = 0; i < 200; ++i) step(true);
  const double last = step(false);
  MESSAGE("L_ZS " << first << " -> " << last);
  CHECK(last < 0.5 * first);
}

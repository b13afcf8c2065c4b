// SPDX-License-Identifier: Apache-2.0
#include "dsdi/losses.hpp"

#include <cmath>

#include "dsdi/errors.hpp"

namespace dsdi {

void LossWeights::validate() const {
  for (double w : {lambda_zi, lambda_zs, lambda_d})
    if (!std::isfinite(w) || w < 0.0)
      throw ConfigError("loss weights must be finite and non-negative, got " + std::to_string(w));
}

nlohmann::json LossWeights::to_json() const {
  return {{"lambda_zi", lambda_zi}, {"lambda_zs", lambda_zs}, {"lambda_d", lambda_d}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.lambda_zi = j.value("lambda_zi", w.lambda_zi);
  w.lambda_zs = j.value("lambda_zs", w.lambda_zs);
  w.lambda_d = j.value("lambda_d", w.lambda_d);
  w.validate();
  return w;
}

template <typename Scalar>
Var<Scalar> loss_zi(const Var<Scalar>& domain_logits_i, std::span<const int> domains) {
  return cross_entropy(domain_logits_i, domains);
}

template <typename Scalar>
Var<Scalar> loss_zs(const Var<Scalar>& domain_logits_s, std::span<const int> domains) {
  return cross_entropy(domain_logits_s, domains);
}

template <typename Scalar>
Var<Scalar> loss_disentangle(const Var<Scalar>& z_i, const Var<Scalar>& z_s) {
  return frobenius_norm(batch_covariance(z_i, z_s));
}

template <typename Scalar>
Var<Scalar> loss_task(const Var<Scalar>& class_logits, std::span<const int> labels) {
  return cross_entropy(class_logits, labels);
}

template <typename Scalar>
LossBundle<Scalar> loss_total(const ForwardOutputs<Scalar>& out, std::span<const int> labels,
                              std::span<const int> domains, const LossWeights& weights) {
  weights.validate();
  Tape<Scalar>& tape = out.class_logits.tape();
  auto zero = [&] { return tape.constant(Tensor<Scalar>({1})); };
  LossBundle<Scalar> b;
  b.l_t = loss_task(out.class_logits, labels);
  b.l_zi = out.domain_logits_i.valid() ? loss_zi(out.domain_logits_i, domains) : zero();
  b.l_zs = out.domain_logits_s.valid() ? loss_zs(out.domain_logits_s, domains) : zero();
  b.l_d = out.z_i.valid() && out.z_s.valid() ? loss_disentangle(out.z_i, out.z_s) : zero();
  b.l_a = add(add(add(scale(b.l_zi, static_cast<Scalar>(weights.lambda_zi)),
                      scale(b.l_zs, static_cast<Scalar>(weights.lambda_zs))),
                  scale(b.l_d, static_cast<Scalar>(weights.lambda_d))),
              b.l_t);
  return b;
}

#define DSDI_INSTANTIATE_LOSSES(S)                                                        \
  template Var<S> loss_zi<S>(const Var<S>&, std::span<const int>);                        \
  template Var<S> loss_zs<S>(const Var<S>&, std::span<const int>);                        \
  template Var<S> loss_disentangle<S>(const Var<S>&, const Var<S>&);                      \
  template Var<S> loss_task<S>(const Var<S>&, std::span<const int>);                      \
  template LossBundle<S> loss_total<S>(const ForwardOutputs<S>&, std::span<const int>,    \
                                       std::span<const int>, const LossWeights&);
DSDI_INSTANTIATE_LOSSES(float)
DSDI_INSTANTIATE_LOSSES(double)
#undef DSDI_INSTANTIATE_LOSSES

}  // namespace dsdi

// SPDX-License-Identifier: Apache-2.0
//
// The four training losses and their weighted sum
//   L_A = lambda_zi L_ZI + lambda_zs L_ZS + lambda_d L_D + L_T.
// L_ZI is a plain cross-entropy; the min-max over Q and D_I comes from the
// gradient reversal applied to z_i inside forward_all.
#pragma once

#include <span>

#include "dsdi/autodiff.hpp"
#include "dsdi/model.hpp"
#include "json.hpp"

namespace dsdi {

struct LossWeights {
  double lambda_zi = 1.0;
  double lambda_zs = 1.0;
  double lambda_d = 1.0;

  /// Throws ConfigError unless every weight is finite and non-negative.
  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

template <typename Scalar>
struct LossBundle {
  Var<Scalar> l_zi, l_zs, l_d, l_t, l_a;
};

/// Mean cross-entropy of the domain prediction made from z_i.
template <typename Scalar>
Var<Scalar> loss_zi(const Var<Scalar>& domain_logits_i, std::span<const int> domains);

/// Mean cross-entropy of the domain prediction made from z_s.
template <typename Scalar>
Var<Scalar> loss_zs(const Var<Scalar>& domain_logits_s, std::span<const int> domains);

/// Frobenius norm of the unbiased cross-covariance of z_i and z_s. Needs B >= 2.
template <typename Scalar>
Var<Scalar> loss_disentangle(const Var<Scalar>& z_i, const Var<Scalar>& z_s);

/// Mean cross-entropy over the classes.
template <typename Scalar>
Var<Scalar> loss_task(const Var<Scalar>& class_logits, std::span<const int> labels);

/// Every term present in `out`; terms whose inputs are absent (single-branch
/// layouts) are zero constants. l_a is evaluated as
/// ((lambda_zi l_zi + lambda_zs l_zs) + lambda_d l_d) + l_t.
template <typename Scalar>
LossBundle<Scalar> loss_total(const ForwardOutputs<Scalar>& out, std::span<const int> labels,
                              std::span<const int> domains, const LossWeights& weights);

}  // namespace dsdi

// SPDX-License-Identifier: Apache-2.0
//
// First-order episodic meta-learning on a subset of the parameter groups.
// For held-out domain j, with w the adapted parameters:
//   g_tr = grad_w f(w, S_{B/j}),  w' = w - inner_lr g_tr,
//   g_te = grad_w f(w', S_j),
// and g_te is returned to be applied at w. f is the task cross-entropy with
// the non-adapted branch's features held fixed.
#pragma once

#include <span>
#include <vector>

#include "dsdi/datasets.hpp"
#include "dsdi/model.hpp"

namespace dsdi {

/// Which branch's feature enters f as a constant.
enum class FrozenBranch { None, Invariant, Specific };

/// Meta-learned parameter sets: Specific = (R, F) with z_i frozen,
/// Invariant = (Q, F) with z_s frozen, Both = (Q, R, F).
enum class MetaTarget { Specific, Invariant, Both };

struct MetaPlan {
  FrozenBranch frozen = FrozenBranch::None;
  std::vector<Group> adapt;
};

/// Resolves a target against the model layout: a frozen branch only exists
/// when the model has it.
MetaPlan meta_plan(MetaTarget target, const ModelDims& dims);

template <typename Scalar>
struct MetaBatch {
  Tensor<Scalar> images;
  std::vector<int> labels;
  Tensor<Scalar> frozen;  // [B,128] features of the frozen branch; empty if none
};

template <typename Scalar>
struct MetaEpisode {
  int held_out = 0;
  MetaBatch<Scalar> meta_train;  // every domain except held_out
  MetaBatch<Scalar> meta_test;   // held_out only
};

/// Features of the frozen branch for `images`, without gradient state.
template <typename Scalar>
Tensor<Scalar> frozen_features(const DsdiModel<Scalar>& model, const Tensor<Scalar>& images,
                               FrozenBranch frozen);

/// One episode per domain, in domain order. `frozen[j]` holds the frozen
/// features of batch j (or is empty).
template <typename Scalar>
std::vector<MetaEpisode<Scalar>> make_episodes(std::span<const DomainBatch<Scalar>> batches,
                                               std::span<const Tensor<Scalar>> frozen);

/// Task cross-entropy through F and the non-frozen encoders. Groups outside
/// `trainable` enter as constants.
template <typename Scalar>
Var<Scalar> meta_task_loss(Tape<Scalar>& tape, DsdiModel<Scalar>& model, const MetaBatch<Scalar>& batch,
                           FrozenBranch frozen, const GroupMask& trainable);

template <typename Scalar>
struct MetaStepResult {
  std::vector<Parameter<Scalar>*> params;  // adapted parameters, in group order
  std::vector<Tensor<Scalar>> grads;       // g_te per parameter
  double train_loss = 0.0;                 // f(w, S_mr)
  double test_loss = 0.0;                  // f(w', S_me)
};

/// Leaves every parameter value of `model` unchanged; gradient buffers of the
/// adapted groups are overwritten.
template <typename Scalar>
MetaStepResult<Scalar> meta_step(DsdiModel<Scalar>& model, const MetaEpisode<Scalar>& episode,
                                 double inner_lr, const MetaPlan& plan);

}  // namespace dsdi

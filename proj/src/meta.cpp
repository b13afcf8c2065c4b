// SPDX-License-Identifier: Apache-2.0
#include "dsdi/meta.hpp"

#include <algorithm>
#include <cmath>

#include "dsdi/errors.hpp"
#include "dsdi/losses.hpp"

namespace dsdi {

MetaPlan meta_plan(MetaTarget target, const ModelDims& dims) {
  MetaPlan plan;
  switch (target) {
    case MetaTarget::Specific:
      if (!dims.specific_branch) throw ConfigError("meta on the specific branch needs R");
      plan.adapt = {Group::R, Group::F};
      if (dims.invariant_branch) plan.frozen = FrozenBranch::Invariant;
      break;
    case MetaTarget::Invariant:
      if (!dims.invariant_branch) throw ConfigError("meta on the invariant branch needs Q");
      plan.adapt = {Group::Q, Group::F};
      if (dims.specific_branch) plan.frozen = FrozenBranch::Specific;
      break;
    case MetaTarget::Both:
      if (dims.invariant_branch) plan.adapt.push_back(Group::Q);
      if (dims.specific_branch) plan.adapt.push_back(Group::R);
      plan.adapt.push_back(Group::F);
      break;
  }
  return plan;
}

template <typename Scalar>
Tensor<Scalar> frozen_features(const DsdiModel<Scalar>& model, const Tensor<Scalar>& images,
                               FrozenBranch frozen) {
  if (frozen == FrozenBranch::None) return {};
  // Parameters enter as constants, so the const_cast never leads to a write.
  auto& m = const_cast<DsdiModel<Scalar>&>(model);
  Tape<Scalar> tape;
  const Var<Scalar> x = tape.constant(images);
  ConvNet<Scalar>& net = frozen == FrozenBranch::Invariant ? m.q : m.r;
  return backbone_forward(tape, net, x, model.dims().groups, false).value();
}

namespace {

template <typename Scalar>
void append(MetaBatch<Scalar>& dst, const DomainBatch<Scalar>& b, const Tensor<Scalar>& frozen,
            std::vector<Scalar>& pixels, std::vector<Scalar>& feats) {
  pixels.insert(pixels.end(), b.images.data(), b.images.data() + b.images.size());
  feats.insert(feats.end(), frozen.data(), frozen.data() + frozen.size());
  dst.labels.insert(dst.labels.end(), b.labels.begin(), b.labels.end());
}

template <typename Scalar>
Tensor<Scalar> from_rows(const std::vector<Scalar>& data, Shape shape) {
  Tensor<Scalar> t(std::move(shape));
  std::copy(data.begin(), data.end(), t.data());
  return t;
}

}  // namespace

template <typename Scalar>
std::vector<MetaEpisode<Scalar>> make_episodes(std::span<const DomainBatch<Scalar>> batches,
                                               std::span<const Tensor<Scalar>> frozen) {
  if (batches.size() < 2) throw ConfigError("meta-learning needs at least two source domains");
  if (frozen.size() != batches.size()) throw ShapeError("one frozen tensor per domain batch");
  const bool has_frozen = !frozen.front().empty();
  const Shape image_shape = batches.front().images.shape();
  std::vector<MetaEpisode<Scalar>> episodes;
  for (std::size_t j = 0; j < batches.size(); ++j) {
    MetaEpisode<Scalar> ep;
    ep.held_out = static_cast<int>(j);
    std::vector<Scalar> tr_px, tr_ft, te_px, te_ft;
    Index n_train = 0;
    for (std::size_t k = 0; k < batches.size(); ++k) {
      if (k == j) {
        append(ep.meta_test, batches[k], frozen[k], te_px, te_ft);
      } else {
        append(ep.meta_train, batches[k], frozen[k], tr_px, tr_ft);
        n_train += batches[k].size();
      }
    }
    Shape s = image_shape;
    s[0] = n_train;
    ep.meta_train.images = from_rows(tr_px, s);
    s[0] = batches[j].size();
    ep.meta_test.images = from_rows(te_px, s);
    if (has_frozen) {
      const Index width = frozen.front().dim(1);
      ep.meta_train.frozen = from_rows(tr_ft, {n_train, width});
      ep.meta_test.frozen = from_rows(te_ft, {batches[j].size(), width});
    }
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

template <typename Scalar>
Var<Scalar> meta_task_loss(Tape<Scalar>& tape, DsdiModel<Scalar>& model, const MetaBatch<Scalar>& batch,
                           FrozenBranch frozen, const GroupMask& trainable) {
  const ModelDims& dims = model.dims();
  const Var<Scalar> x = tape.constant(batch.images);
  Var<Scalar> z_i, z_s;
  if (dims.invariant_branch)
    z_i = frozen == FrozenBranch::Invariant
              ? tape.constant(batch.frozen)
              : backbone_forward(tape, model.q, x, dims.groups, trainable[Group::Q]);
  if (dims.specific_branch)
    z_s = frozen == FrozenBranch::Specific
              ? tape.constant(batch.frozen)
              : backbone_forward(tape, model.r, x, dims.groups, trainable[Group::R]);
  const Var<Scalar> joint = z_i.valid() && z_s.valid() ? concat(z_i, z_s) : (z_i.valid() ? z_i : z_s);
  return loss_task(linear_forward(tape, model.f, joint, trainable[Group::F]),
                   std::span<const int>(batch.labels));
}

template <typename Scalar>
MetaStepResult<Scalar> meta_step(DsdiModel<Scalar>& model, const MetaEpisode<Scalar>& episode,
                                 double inner_lr, const MetaPlan& plan) {
  GroupMask mask = GroupMask::none();
  MetaStepResult<Scalar> result;
  for (Group g : plan.adapt) {
    mask.on[static_cast<std::size_t>(g)] = true;
    for (auto* p : model.parameters(g)) result.params.push_back(p);
  }
  auto gradient = [&](const MetaBatch<Scalar>& batch) {
    for (auto* p : result.params) p->zero_grad();
    Tape<Scalar> tape;
    const Var<Scalar> loss = meta_task_loss(tape, model, batch, plan.frozen, mask);
    tape.backward(loss);
    return static_cast<double>(loss.item());
  };

  result.train_loss = gradient(episode.meta_train);
  std::vector<Tensor<Scalar>> saved;
  saved.reserve(result.params.size());
  bool finite = true;
  for (auto* p : result.params) {
    saved.push_back(p->value);
    p->value.array() -= static_cast<Scalar>(inner_lr) * p->grad.array();
    finite = finite && p->value.all_finite();
  }
  if (!finite) {
    for (std::size_t i = 0; i < saved.size(); ++i) result.params[i]->value = std::move(saved[i]);
    throw DivergenceError("non-finite adapted parameters in meta episode " +
                          std::to_string(episode.held_out));
  }
  result.test_loss = gradient(episode.meta_test);
  for (std::size_t i = 0; i < saved.size(); ++i) {
    result.grads.push_back(result.params[i]->grad);
    result.params[i]->value = std::move(saved[i]);
  }
  return result;
}

#define DSDI_INSTANTIATE_META(S)                                                                  \
  template Tensor<S> frozen_features<S>(const DsdiModel<S>&, const Tensor<S>&, FrozenBranch);     \
  template std::vector<MetaEpisode<S>> make_episodes<S>(std::span<const DomainBatch<S>>,          \
                                                        std::span<const Tensor<S>>);              \
  template Var<S> meta_task_loss<S>(Tape<S>&, DsdiModel<S>&, const MetaBatch<S>&, FrozenBranch,   \
                                    const GroupMask&);                                            \
  template MetaStepResult<S> meta_step<S>(DsdiModel<S>&, const MetaEpisode<S>&, double,           \
                                          const MetaPlan&);
DSDI_INSTANTIATE_META(float)
DSDI_INSTANTIATE_META(double)
#undef DSDI_INSTANTIATE_META

}  // namespace dsdi

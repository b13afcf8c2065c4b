// SPDX-License-Identifier: Apache-2.0
//
// The five-network model: encoders Q (invariant) and R (specific), the
// adversarial domain discriminator D_I on Q's features, the domain classifier
// D_S on R's features, and the task classifier F on both.
//
// Encoder (per branch), 3x3 kernels with padding 1:
//   conv(d->64)    ReLU GN(8)
//   conv(64->128, stride 2) ReLU GN(8)
//   conv(128->128) ReLU GN(8)
//   conv(128->128) ReLU GN(8)
//   global average pool -> 128
// Domain heads: Linear(128->256) ReLU Linear(256->256) ReLU Linear(256->N).
// Task head: Linear(F_in -> K), F_in = 128 per active encoder.
//
// With both encoders and both heads the parameter count is
//   2(576 d + 369984) + 2(98816 + 257 N) + 257 K
// which is 945168 for d = 3, N = 3, K = 10 (see parameter_count()).
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dsdi/autodiff.hpp"
#include "dsdi/blocks.hpp"
#include "dsdi/tensor.hpp"
#include "json.hpp"

namespace dsdi {

enum class Group { Q = 0, R = 1, DI = 2, DS = 3, F = 4 };
constexpr std::array<Group, 5> kAllGroups = {Group::Q, Group::R, Group::DI, Group::DS, Group::F};
const char* group_name(Group g);

/// Which parameter groups a forward pass records as trainable. Others enter
/// the tape as constants and receive no gradient.
struct GroupMask {
  std::array<bool, 5> on{true, true, true, true, true};

  static GroupMask all() { return {}; }
  static GroupMask none() { return {{false, false, false, false, false}}; }
  static GroupMask only(std::initializer_list<Group> groups) {
    GroupMask m = none();
    for (Group g : groups) m.on[static_cast<std::size_t>(g)] = true;
    return m;
  }
  bool operator[](Group g) const { return on[static_cast<std::size_t>(g)]; }
};

struct ModelDims {
  Index in_channels = 3;
  Index n_domains = 3;
  Index n_classes = 10;
  Index feature_dim = 128;
  Index head_width = 256;
  Index groups = 8;
  bool invariant_branch = true;  // Q and D_I
  bool specific_branch = true;   // R and D_S
  bool domain_heads = true;      // D_I / D_S present for the active branches

  Index classifier_inputs() const {
    return feature_dim * ((invariant_branch ? 1 : 0) + (specific_branch ? 1 : 0));
  }
  nlohmann::json to_json() const;
  static ModelDims from_json(const nlohmann::json& j);
  bool operator==(const ModelDims&) const = default;
};

/// Closed-form parameter count for `dims`.
Index parameter_count(const ModelDims& dims);

template <typename Scalar>
struct ConvNet {
  std::array<Parameter<Scalar>, 4> weight, bias, gamma, beta;
};

template <typename Scalar>
struct Linear {
  Parameter<Scalar> weight;  // [in, out]
  Parameter<Scalar> bias;    // [out]
};

template <typename Scalar>
struct Mlp {
  std::vector<Linear<Scalar>> layers;
};

template <typename Scalar>
struct ForwardOutputs {
  Var<Scalar> z_i, z_s;
  Var<Scalar> domain_logits_i;  // D_I(GRL(z_i))
  Var<Scalar> domain_logits_s;  // D_S(z_s)
  Var<Scalar> class_logits;     // F(z_i ++ z_s)
};

template <typename Scalar>
class DsdiModel {
 public:
  DsdiModel() = default;
  DsdiModel(const ModelDims& dims, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }
  std::uint64_t seed() const { return seed_; }

  ConvNet<Scalar> q, r;
  Mlp<Scalar> d_i, d_s;
  Linear<Scalar> f;

  /// Parameters of one group in a fixed order; empty for absent groups.
  std::vector<Parameter<Scalar>*> parameters(Group g);
  std::vector<const Parameter<Scalar>*> parameters(Group g) const;
  std::vector<Parameter<Scalar>*> parameters();
  std::vector<const Parameter<Scalar>*> parameters() const;
  bool has_group(Group g) const;
  Index parameter_count() const;
  void zero_grad();

  template <typename Other>
  DsdiModel<Other> cast() const;

 private:
  ModelDims dims_;
  std::uint64_t seed_ = 0;
};

template <typename Scalar>
Var<Scalar> backbone_forward(Tape<Scalar>& tape, ConvNet<Scalar>& net, const Var<Scalar>& images,
                             Index groups, bool trainable);
template <typename Scalar>
Var<Scalar> linear_forward(Tape<Scalar>& tape, Linear<Scalar>& layer, const Var<Scalar>& x,
                           bool trainable);
/// ReLU between layers, none after the last.
template <typename Scalar>
Var<Scalar> mlp_forward(Tape<Scalar>& tape, Mlp<Scalar>& mlp, const Var<Scalar>& x,
                        bool trainable);

/// Records the full forward pass. Absent branches leave their outputs invalid.
template <typename Scalar>
ForwardOutputs<Scalar> forward_all(Tape<Scalar>& tape, DsdiModel<Scalar>& model,
                                   const Tensor<Scalar>& images, Scalar grl_lambda,
                                   const GroupMask& trainable = GroupMask::all());

/// Inference-only class logits, processed in chunks of `chunk` samples.
template <typename Scalar>
Tensor<Scalar> predict_logits(const DsdiModel<Scalar>& model, const Tensor<Scalar>& images,
                              Index chunk = 256);

struct FeatureSet {
  Tensor<float> z_i, z_s;  // [n, 128]; empty for absent branches
  Tensor<float> class_logits;
  Tensor<float> domain_logits_i, domain_logits_s;
};

/// Inference pass returning features and all head outputs.
template <typename Scalar>
FeatureSet extract_features(const DsdiModel<Scalar>& model, const Tensor<Scalar>& images,
                            Index chunk = 256);

// ---------------------------------------------------------------------------
// Checkpoints
//
// `<stem>.bin`: one named block per parameter (see blocks.hpp).
// `<stem>.json`: model dims, seed, iteration, block names/shapes, and the
//   SHA-256 of the .bin file, plus caller-supplied fields under "extra".

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& stem, const DsdiModel<Scalar>& model,
                     std::int64_t iteration, const nlohmann::json& extra = nlohmann::json::object());

struct CheckpointInfo {
  ModelDims dims;
  std::uint64_t seed = 0;
  std::int64_t iteration = 0;
  nlohmann::json manifest;
};

CheckpointInfo read_checkpoint_manifest(const std::filesystem::path& stem);

template <typename Scalar>
DsdiModel<Scalar> load_checkpoint(const std::filesystem::path& stem,
                                  CheckpointInfo* info = nullptr);

/// Assigns every parameter from the block of the same name; shapes must match.
template <typename Scalar>
void load_parameters(DsdiModel<Scalar>& model, const std::vector<NamedTensor>& blocks,
                     const std::string& source);

/// Copies values between models with identical dims.
template <typename Scalar>
void copy_parameters(const DsdiModel<Scalar>& from, DsdiModel<Scalar>& to);

}  // namespace dsdi

// SPDX-License-Identifier: Apache-2.0
#include "dsdi/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "dsdi/blocks.hpp"
#include "dsdi/errors.hpp"
#include "dsdi/hash.hpp"
#include "dsdi/random.hpp"

namespace dsdi {

namespace {

constexpr Index kKernel = 3;
constexpr Index kPad = 1;
constexpr std::array<Index, 4> kConvOut = {64, 128, 128, 128};
constexpr std::array<Index, 4> kConvStride = {1, 2, 1, 1};

// Kaiming-uniform for ReLU networks: U(-b, b) with b = sqrt(6 / fan_in).
template <typename Scalar>
Tensor<Scalar> kaiming_uniform(Shape shape, Index fan_in, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < t.size(); ++i)
    t[i] = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * bound);
  return t;
}

template <typename Scalar>
ConvNet<Scalar> make_convnet(const std::string& prefix, Index in_channels, Rng& rng) {
  ConvNet<Scalar> net;
  Index c_in = in_channels;
  for (std::size_t l = 0; l < 4; ++l) {
    const Index c_out = kConvOut[l];
    const std::string name = prefix + ".conv" + std::to_string(l + 1);
    net.weight[l] = Parameter<Scalar>(name + ".weight",
                                      kaiming_uniform<Scalar>({c_out, c_in, kKernel, kKernel},
                                                              c_in * kKernel * kKernel, rng));
    net.bias[l] = Parameter<Scalar>(name + ".bias", Tensor<Scalar>({c_out}));
    const std::string gn = prefix + ".gn" + std::to_string(l + 1);
    net.gamma[l] = Parameter<Scalar>(gn + ".gamma", Tensor<Scalar>({c_out}, Scalar(1)));
    net.beta[l] = Parameter<Scalar>(gn + ".beta", Tensor<Scalar>({c_out}));
    c_in = c_out;
  }
  return net;
}

template <typename Scalar>
Linear<Scalar> make_linear(const std::string& name, Index in, Index out, Rng& rng) {
  return {Parameter<Scalar>(name + ".weight", kaiming_uniform<Scalar>({in, out}, in, rng)),
          Parameter<Scalar>(name + ".bias", Tensor<Scalar>({out}))};
}

template <typename Scalar>
Mlp<Scalar> make_head(const std::string& prefix, const ModelDims& dims, Rng& rng) {
  Mlp<Scalar> mlp;
  mlp.layers.push_back(make_linear<Scalar>(prefix + ".fc1", dims.feature_dim, dims.head_width, rng));
  mlp.layers.push_back(make_linear<Scalar>(prefix + ".fc2", dims.head_width, dims.head_width, rng));
  mlp.layers.push_back(make_linear<Scalar>(prefix + ".fc3", dims.head_width, dims.n_domains, rng));
  return mlp;
}

template <typename P, typename Net>
void append_convnet(std::vector<P*>& out, Net& net) {
  for (std::size_t l = 0; l < 4; ++l) {
    out.push_back(&net.weight[l]);
    out.push_back(&net.bias[l]);
    out.push_back(&net.gamma[l]);
    out.push_back(&net.beta[l]);
  }
}

template <typename P, typename M>
void append_mlp(std::vector<P*>& out, M& mlp) {
  for (auto& layer : mlp.layers) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
}

template <typename P, typename Model>
std::vector<P*> group_parameters(Model& m, Group g) {
  std::vector<P*> out;
  if (!m.has_group(g)) return out;
  switch (g) {
    case Group::Q: append_convnet(out, m.q); break;
    case Group::R: append_convnet(out, m.r); break;
    case Group::DI: append_mlp(out, m.d_i); break;
    case Group::DS: append_mlp(out, m.d_s); break;
    case Group::F:
      out.push_back(&m.f.weight);
      out.push_back(&m.f.bias);
      break;
  }
  return out;
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

}  // namespace

const char* group_name(Group g) {
  switch (g) {
    case Group::Q: return "Q";
    case Group::R: return "R";
    case Group::DI: return "D_I";
    case Group::DS: return "D_S";
    case Group::F: return "F";
  }
  return "?";
}

nlohmann::json ModelDims::to_json() const {
  return {{"in_channels", in_channels},     {"n_domains", n_domains},
          {"n_classes", n_classes},         {"feature_dim", feature_dim},
          {"head_width", head_width},       {"groups", groups},
          {"invariant_branch", invariant_branch}, {"specific_branch", specific_branch},
          {"domain_heads", domain_heads}};
}

ModelDims ModelDims::from_json(const nlohmann::json& j) {
  ModelDims d;
  d.in_channels = j.at("in_channels").get<Index>();
  d.n_domains = j.at("n_domains").get<Index>();
  d.n_classes = j.at("n_classes").get<Index>();
  d.feature_dim = j.at("feature_dim").get<Index>();
  d.head_width = j.at("head_width").get<Index>();
  d.groups = j.at("groups").get<Index>();
  d.invariant_branch = j.at("invariant_branch").get<bool>();
  d.specific_branch = j.at("specific_branch").get<bool>();
  d.domain_heads = j.at("domain_heads").get<bool>();
  return d;
}

Index parameter_count(const ModelDims& d) {
  const Index k2 = kKernel * kKernel;
  Index encoder = 0;
  Index c_in = d.in_channels;
  for (Index c_out : kConvOut) {
    encoder += c_out * c_in * k2 + c_out + 2 * c_out;
    c_in = c_out;
  }
  const Index head = (d.feature_dim + 1) * d.head_width + (d.head_width + 1) * d.head_width +
                     (d.head_width + 1) * d.n_domains;
  const Index branches = (d.invariant_branch ? 1 : 0) + (d.specific_branch ? 1 : 0);
  return branches * encoder + (d.domain_heads ? branches * head : 0) +
         (d.classifier_inputs() + 1) * d.n_classes;
}

template <typename Scalar>
DsdiModel<Scalar>::DsdiModel(const ModelDims& dims, std::uint64_t seed) : dims_(dims), seed_(seed) {
  if (dims.in_channels < 1 || dims.in_channels > 3)
    throw ConfigError("input channels must be 1, 2 or 3");
  if (dims.n_domains < 1 || dims.n_classes < 2) throw ConfigError("invalid domain/class counts");
  if (!dims.invariant_branch && !dims.specific_branch)
    throw ConfigError("at least one encoder branch is required");
  if (dims.feature_dim != kConvOut.back())
    throw ConfigError("feature_dim must equal the encoder width " + std::to_string(kConvOut.back()));
  for (Index c : kConvOut)
    if (c % dims.groups != 0) throw ConfigError("GroupNorm groups must divide every width");

  // One stream per group so that toggling a branch leaves the others unchanged.
  Rng rq(derive_seed(seed, 1)), rr(derive_seed(seed, 2)), rdi(derive_seed(seed, 3)),
      rds(derive_seed(seed, 4)), rf(derive_seed(seed, 5));
  if (dims.invariant_branch) {
    q = make_convnet<Scalar>("Q", dims.in_channels, rq);
    if (dims.domain_heads) d_i = make_head<Scalar>("D_I", dims, rdi);
  }
  if (dims.specific_branch) {
    r = make_convnet<Scalar>("R", dims.in_channels, rr);
    if (dims.domain_heads) d_s = make_head<Scalar>("D_S", dims, rds);
  }
  f = make_linear<Scalar>("F", dims.classifier_inputs(), dims.n_classes, rf);
}

template <typename Scalar>
bool DsdiModel<Scalar>::has_group(Group g) const {
  switch (g) {
    case Group::Q: return dims_.invariant_branch;
    case Group::R: return dims_.specific_branch;
    case Group::DI: return dims_.invariant_branch && dims_.domain_heads;
    case Group::DS: return dims_.specific_branch && dims_.domain_heads;
    case Group::F: return true;
  }
  return false;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> DsdiModel<Scalar>::parameters(Group g) {
  return group_parameters<Parameter<Scalar>>(*this, g);
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> DsdiModel<Scalar>::parameters(Group g) const {
  return group_parameters<const Parameter<Scalar>>(*this, g);
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> DsdiModel<Scalar>::parameters() {
  std::vector<Parameter<Scalar>*> out;
  for (Group g : kAllGroups)
    for (auto* p : parameters(g)) out.push_back(p);
  return out;
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> DsdiModel<Scalar>::parameters() const {
  std::vector<const Parameter<Scalar>*> out;
  for (Group g : kAllGroups)
    for (auto* p : parameters(g)) out.push_back(p);
  return out;
}

template <typename Scalar>
Index DsdiModel<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename Scalar>
void DsdiModel<Scalar>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename Scalar>
template <typename Other>
DsdiModel<Other> DsdiModel<Scalar>::cast() const {
  DsdiModel<Other> out(dims_, seed_);
  auto dst = out.parameters();
  const auto src = parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<Other>();
  return out;
}

// ---------------------------------------------------------------------------
// Forward

template <typename Scalar>
Var<Scalar> backbone_forward(Tape<Scalar>& tape, ConvNet<Scalar>& net, const Var<Scalar>& images,
                             Index groups, bool trainable) {
  const Shape& s = images.shape();
  const Index expected = net.weight[0].value.dim(1);
  if (s.size() != 4 || s[1] != expected)
    throw ShapeError("encoder expects [B," + std::to_string(expected) + ",H,W] images, got " +
                     shape_string(s));
  Var<Scalar> h = images;
  for (std::size_t l = 0; l < 4; ++l) {
    h = conv2d(h, tape.parameter(net.weight[l], trainable), kConvStride[l], kPad);
    h = add_channel_bias(h, tape.parameter(net.bias[l], trainable));
    h = relu(h);
    h = group_norm(h, groups, tape.parameter(net.gamma[l], trainable),
                   tape.parameter(net.beta[l], trainable));
  }
  return global_avg_pool(h);
}

template <typename Scalar>
Var<Scalar> linear_forward(Tape<Scalar>& tape, Linear<Scalar>& layer, const Var<Scalar>& x,
                           bool trainable) {
  return add_channel_bias(matmul(x, tape.parameter(layer.weight, trainable)),
                          tape.parameter(layer.bias, trainable));
}

template <typename Scalar>
Var<Scalar> mlp_forward(Tape<Scalar>& tape, Mlp<Scalar>& mlp, const Var<Scalar>& x,
                        bool trainable) {
  Var<Scalar> h = x;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    h = linear_forward(tape, mlp.layers[l], h, trainable);
    if (l + 1 < mlp.layers.size()) h = relu(h);
  }
  return h;
}

template <typename Scalar>
ForwardOutputs<Scalar> forward_all(Tape<Scalar>& tape, DsdiModel<Scalar>& model,
                                   const Tensor<Scalar>& images, Scalar grl_lambda,
                                   const GroupMask& trainable) {
  const ModelDims& dims = model.dims();
  const Var<Scalar> x = tape.constant(images);
  ForwardOutputs<Scalar> out;
  if (dims.invariant_branch) {
    out.z_i = backbone_forward(tape, model.q, x, dims.groups, trainable[Group::Q]);
    if (dims.domain_heads)
      out.domain_logits_i =
          mlp_forward(tape, model.d_i, gradient_reversal(out.z_i, grl_lambda), trainable[Group::DI]);
  }
  if (dims.specific_branch) {
    out.z_s = backbone_forward(tape, model.r, x, dims.groups, trainable[Group::R]);
    if (dims.domain_heads)
      out.domain_logits_s = mlp_forward(tape, model.d_s, out.z_s, trainable[Group::DS]);
  }
  Var<Scalar> joint;
  if (out.z_i.valid() && out.z_s.valid())
    joint = concat(out.z_i, out.z_s);
  else
    joint = out.z_i.valid() ? out.z_i : out.z_s;
  out.class_logits = linear_forward(tape, model.f, joint, trainable[Group::F]);
  return out;
}

namespace {

template <typename Scalar>
Tensor<Scalar> rows(const Tensor<Scalar>& t, Index begin, Index end) {
  Shape s = t.shape();
  const Index per = t.size() / s[0];
  s[0] = end - begin;
  Tensor<Scalar> out(s);
  out.array() = t.array().segment(begin * per, (end - begin) * per);
  return out;
}

void append_rows(Tensor<float>& dst, const Tensor<float>& src, Index row) {
  dst.array().segment(row * src.dim(1), src.size()) = src.array();
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> predict_logits(const DsdiModel<Scalar>& model, const Tensor<Scalar>& images,
                              Index chunk) {
  const Index n = images.dim(0);
  Tensor<Scalar> out({n, model.dims().n_classes});
  // With an all-false mask parameters enter the tape as copied constants.
  auto& m = const_cast<DsdiModel<Scalar>&>(model);
  for (Index b = 0; b < n; b += chunk) {
    const Index e = std::min(n, b + chunk);
    Tape<Scalar> tape;
    const auto o = forward_all(tape, m, rows(images, b, e), Scalar(1), GroupMask::none());
    out.array().segment(b * out.dim(1), o.class_logits.value().size()) =
        o.class_logits.value().array();
  }
  return out;
}

template <typename Scalar>
FeatureSet extract_features(const DsdiModel<Scalar>& model, const Tensor<Scalar>& images,
                            Index chunk) {
  const ModelDims& d = model.dims();
  const Index n = images.dim(0);
  FeatureSet fs;
  fs.class_logits = Tensor<float>({n, d.n_classes});
  if (d.invariant_branch) fs.z_i = Tensor<float>({n, d.feature_dim});
  if (d.specific_branch) fs.z_s = Tensor<float>({n, d.feature_dim});
  if (d.invariant_branch && d.domain_heads) fs.domain_logits_i = Tensor<float>({n, d.n_domains});
  if (d.specific_branch && d.domain_heads) fs.domain_logits_s = Tensor<float>({n, d.n_domains});
  auto& m = const_cast<DsdiModel<Scalar>&>(model);
  for (Index b = 0; b < n; b += chunk) {
    const Index e = std::min(n, b + chunk);
    Tape<Scalar> tape;
    const auto o = forward_all(tape, m, rows(images, b, e), Scalar(1), GroupMask::none());
    append_rows(fs.class_logits, o.class_logits.value().template cast<float>(), b);
    if (o.z_i.valid()) append_rows(fs.z_i, o.z_i.value().template cast<float>(), b);
    if (o.z_s.valid()) append_rows(fs.z_s, o.z_s.value().template cast<float>(), b);
    if (o.domain_logits_i.valid())
      append_rows(fs.domain_logits_i, o.domain_logits_i.value().template cast<float>(), b);
    if (o.domain_logits_s.valid())
      append_rows(fs.domain_logits_s, o.domain_logits_s.value().template cast<float>(), b);
  }
  return fs;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& stem, const DsdiModel<Scalar>& model,
                     std::int64_t iteration, const nlohmann::json& extra) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  const auto bin = with_suffix(stem, ".bin");
  std::vector<NamedTensor> blocks;
  nlohmann::json names = nlohmann::json::array();
  for (const auto* p : model.parameters()) {
    blocks.emplace_back(p->name, p->value.template cast<float>());
    names.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  }
  write_blocks(bin, blocks);
  const nlohmann::json manifest = {{"format", "DSCK"},
                                   {"version", 1},
                                   {"dims", model.dims().to_json()},
                                   {"seed", model.seed()},
                                   {"iteration", iteration},
                                   {"parameter_count", model.parameter_count()},
                                   {"blocks", names},
                                   {"sha256", sha256_hex(read_bytes(bin))},
                                   {"extra", extra}};
  std::ofstream js(with_suffix(stem, ".json"), std::ios::trunc);
  js << manifest.dump(2) << '\n';
  if (!js) throw InputError("cannot write checkpoint manifest for " + stem.string());
}

CheckpointInfo read_checkpoint_manifest(const std::filesystem::path& stem) {
  const auto path = with_suffix(stem, ".json");
  std::ifstream in(path);
  if (!in) throw InputError("missing checkpoint manifest " + path.string());
  CheckpointInfo info;
  try {
    info.manifest = nlohmann::json::parse(in);
    info.dims = ModelDims::from_json(info.manifest.at("dims"));
    info.seed = info.manifest.at("seed").get<std::uint64_t>();
    info.iteration = info.manifest.at("iteration").get<std::int64_t>();
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), static_cast<std::int64_t>(e.byte));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return info;
}

template <typename Scalar>
DsdiModel<Scalar> load_checkpoint(const std::filesystem::path& stem, CheckpointInfo* info_out) {
  CheckpointInfo info = read_checkpoint_manifest(stem);
  const auto bin = with_suffix(stem, ".bin");
  if (sha256_hex(read_bytes(bin)) != info.manifest.value("sha256", std::string()))
    throw InputError(bin.string() + ": checksum does not match manifest");
  DsdiModel<Scalar> model(info.dims, info.seed);
  load_parameters(model, read_blocks(bin), bin.filename().string());
  if (info_out) *info_out = std::move(info);
  return model;
}

template <typename Scalar>
void load_parameters(DsdiModel<Scalar>& model, const std::vector<NamedTensor>& blocks,
                     const std::string& source) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : blocks) by_name[name] = &t;
  for (auto* p : model.parameters()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw InputError(source + ": missing block " + p->name);
    if (it->second->shape() != p->value.shape())
      throw InputError(source + ": block " + p->name + " has shape " +
                       shape_string(it->second->shape()) + ", expected " +
                       shape_string(p->value.shape()));
    p->value = it->second->template cast<Scalar>();
    p->zero_grad();
  }
}

template <typename Scalar>
void copy_parameters(const DsdiModel<Scalar>& from, DsdiModel<Scalar>& to) {
  if (!(from.dims() == to.dims())) throw ShapeError("copy_parameters: architectures differ");
  const auto src = from.parameters();
  auto dst = to.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
}

#define DSDI_INSTANTIATE_MODEL(S)                                                                 \
  template class DsdiModel<S>;                                                                    \
  template Var<S> backbone_forward<S>(Tape<S>&, ConvNet<S>&, const Var<S>&, Index, bool);         \
  template Var<S> linear_forward<S>(Tape<S>&, Linear<S>&, const Var<S>&, bool);                   \
  template Var<S> mlp_forward<S>(Tape<S>&, Mlp<S>&, const Var<S>&, bool);                         \
  template ForwardOutputs<S> forward_all<S>(Tape<S>&, DsdiModel<S>&, const Tensor<S>&, S,         \
                                            const GroupMask&);                                    \
  template Tensor<S> predict_logits<S>(const DsdiModel<S>&, const Tensor<S>&, Index);             \
  template FeatureSet extract_features<S>(const DsdiModel<S>&, const Tensor<S>&, Index);          \
  template void save_checkpoint<S>(const std::filesystem::path&, const DsdiModel<S>&,             \
                                   std::int64_t, const nlohmann::json&);                          \
  template DsdiModel<S> load_checkpoint<S>(const std::filesystem::path&, CheckpointInfo*);        \
  template void copy_parameters<S>(const DsdiModel<S>&, DsdiModel<S>&);                          \
  template void load_parameters<S>(DsdiModel<S>&, const std::vector<NamedTensor>&, const std::string&);
DSDI_INSTANTIATE_MODEL(float)
DSDI_INSTANTIATE_MODEL(double)
#undef DSDI_INSTANTIATE_MODEL

template DsdiModel<double> DsdiModel<float>::cast<double>() const;
template DsdiModel<float> DsdiModel<double>::cast<float>() const;
template DsdiModel<double> DsdiModel<double>::cast<double>() const;
template DsdiModel<float> DsdiModel<float>::cast<float>() const;

}  // namespace dsdi

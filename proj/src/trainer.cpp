// SPDX-License-Identifier: Apache-2.0
#include "dsdi/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "dsdi/blocks.hpp"
#include "dsdi/errors.hpp"
#include "dsdi/random.hpp"

namespace dsdi {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

// ---------------------------------------------------------------------------
// Adam

template <typename Scalar>
void adam_update(std::span<Parameter<Scalar>* const> params,
                 std::span<const Tensor<Scalar>* const> grads, AdamState<Scalar>& state,
                 double lr) {
  if (params.size() != grads.size())
    throw ShapeError("adam_update: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  if (state.step == 0 && state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_update: optimizer state holds " + std::to_string(state.m.size()) +
                     " buffers for " + std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& s = params[i]->value.shape();
    if (grads[i]->shape() != s || state.m[i].shape() != s || state.v[i].shape() != s)
      throw ShapeError("adam_update: shape mismatch for " + params[i]->name);
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!grads[i]->all_finite())
      throw DivergenceError("non-finite gradient for " + params[i]->name);

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(state.beta1);
  const auto b2 = static_cast<Scalar>(state.beta2);
  const auto step = static_cast<Scalar>(lr / bc1);
  const auto inv_bc2 = static_cast<Scalar>(1.0 / bc2);
  const auto eps = static_cast<Scalar>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = grads[i]->array();
    auto& m = state.m[i].array();
    auto& v = state.v[i].array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    params[i]->value.array() -= step * m / ((v * inv_bc2).sqrt() + eps);
  }
}

template <typename Scalar>
void adam_update(std::span<Parameter<Scalar>* const> params, AdamState<Scalar>& state, double lr) {
  std::vector<const Tensor<Scalar>*> grads;
  grads.reserve(params.size());
  for (const auto* p : params) grads.push_back(&p->grad);
  adam_update<Scalar>(params, grads, state, lr);
}

template void adam_update<float>(std::span<Parameter<float>* const>,
                                 std::span<const Tensor<float>* const>, AdamState<float>&, double);
template void adam_update<double>(std::span<Parameter<double>* const>,
                                  std::span<const Tensor<double>* const>, AdamState<double>&, double);
template void adam_update<float>(std::span<Parameter<float>* const>, AdamState<float>&, double);
template void adam_update<double>(std::span<Parameter<double>* const>, AdamState<double>&, double);

// ---------------------------------------------------------------------------
// Modes

namespace {

constexpr std::array<std::pair<AblationMode, const char*>, 10> kModeNames = {{
    {AblationMode::DI, "DI"},
    {AblationMode::DI_META, "DI_META"},
    {AblationMode::DS, "DS"},
    {AblationMode::DS_META, "DS_META"},
    {AblationMode::DSDI_NO_LD, "DSDI_NO_LD"},
    {AblationMode::DSDI_NO_META, "DSDI_NO_META"},
    {AblationMode::DSDI_META_BOTH, "DSDI_META_BOTH"},
    {AblationMode::DSDI_META_DI, "DSDI_META_DI"},
    {AblationMode::DSDI_META_DS, "DSDI_META_DS"},
    {AblationMode::ERM_REF, "ERM_REF"},
}};

}  // namespace

const char* mode_name(AblationMode mode) {
  for (const auto& [m, name] : kModeNames)
    if (m == mode) return name;
  return "?";
}

AblationMode parse_mode(const std::string& name) {
  for (const auto& [m, n] : kModeNames)
    if (name == n) return m;
  std::string known;
  for (const auto& [m, n] : kModeNames) known += std::string(known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown mode '" + name + "' (expected one of " + known + ")");
}

ModeSpec mode_spec(AblationMode mode) {
  ModeSpec s;
  switch (mode) {
    case AblationMode::DI:
    case AblationMode::DI_META:
      s.specific_branch = false;
      s.use_disentangle = false;
      if (mode == AblationMode::DI_META) s.meta = MetaTarget::Invariant;
      break;
    case AblationMode::DS:
    case AblationMode::DS_META:
      s.invariant_branch = false;
      s.use_disentangle = false;
      if (mode == AblationMode::DS_META) s.meta = MetaTarget::Specific;
      break;
    case AblationMode::DSDI_NO_LD:
      s.use_disentangle = false;
      s.meta = MetaTarget::Specific;
      break;
    case AblationMode::DSDI_NO_META: break;
    case AblationMode::DSDI_META_BOTH: s.meta = MetaTarget::Both; break;
    case AblationMode::DSDI_META_DI: s.meta = MetaTarget::Invariant; break;
    case AblationMode::DSDI_META_DS: s.meta = MetaTarget::Specific; break;
    case AblationMode::ERM_REF:
      s.specific_branch = false;
      s.domain_heads = false;
      s.use_disentangle = false;
      break;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string join_errors(const std::vector<std::string>& errors) {
  std::string msg = "invalid training config:";
  for (const auto& e : errors) msg += "\n  - " + e;
  return msg;
}

std::vector<std::string> range_errors(const TrainConfig& c) {
  std::vector<std::string> errors;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  check(std::isfinite(c.lr) && c.lr > 0, "lr must be > 0");
  check(c.batch_size >= 2, "batch_size must be >= 2");
  check(c.iterations >= 1, "iterations must be >= 1");
  check(!c.seeds.empty(), "seeds must not be empty");
  check(c.eval_every >= 1, "eval_every must be >= 1");
  check(!c.inner_lr || (std::isfinite(*c.inner_lr) && *c.inner_lr >= 0), "inner_lr must be >= 0");
  check(std::isfinite(c.grl_lambda) && c.grl_lambda >= 0, "grl_lambda must be >= 0");
  check(c.adam_beta1 >= 0 && c.adam_beta1 < 1, "adam_beta1 must be in [0, 1)");
  check(c.adam_beta2 >= 0 && c.adam_beta2 < 1, "adam_beta2 must be in [0, 1)");
  check(c.adam_eps > 0, "adam_eps must be > 0");
  check(c.val_fraction > 0 && c.val_fraction < 1, "val_fraction must be in (0, 1)");
  check(c.eval_limit >= 0, "eval_limit must be >= 0");
  check(c.loss_window >= 1, "loss_window must be >= 1");
  try {
    c.weights.validate();
  } catch (const ConfigError& e) {
    errors.emplace_back(e.what());
  }
  return errors;
}

}  // namespace

void TrainConfig::validate() const {
  const auto errors = range_errors(*this);
  if (!errors.empty()) throw ConfigError(join_errors(errors));
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"batch_size", batch_size},
          {"iterations", iterations},
          {"seeds", seeds},
          {"weights", weights.to_json()},
          {"mode", mode_name(mode)},
          {"eval_every", eval_every},
          {"inner_lr", inner_lr ? nlohmann::json(*inner_lr) : nlohmann::json(nullptr)},
          {"meta_enabled", meta_enabled},
          {"grl_lambda", grl_lambda},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"val_fraction", val_fraction},
          {"eval_limit", eval_limit},
          {"loss_window", loss_window}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainConfig c;
  std::vector<std::string> errors;
  auto number = [&](const char* key, double& dst) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number())
      errors.push_back(std::string(key) + ": expected a number, got " + it->type_name());
    else
      dst = it->get<double>();
  };
  auto integer = [&](const char* key, auto& dst) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number_integer())
      errors.push_back(std::string(key) + ": expected an integer, got " + it->type_name());
    else
      dst = it->get<std::remove_reference_t<decltype(dst)>>();
  };
  static const std::set<std::string> known = {
      "lr",         "batch_size", "iterations",  "seeds",      "weights",    "mode",
      "eval_every", "inner_lr",   "meta_enabled", "grl_lambda", "adam_beta1", "adam_beta2",
      "adam_eps",   "val_fraction", "eval_limit", "loss_window", "$schema"};
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) errors.push_back("unknown key '" + key + "'");

  number("lr", c.lr);
  integer("batch_size", c.batch_size);
  integer("iterations", c.iterations);
  if (auto it = j.find("seeds"); it != j.end()) {
    if (!it->is_array()) {
      errors.push_back("seeds: expected an array of non-negative integers");
    } else {
      c.seeds.clear();
      for (const auto& s : *it) {
        if (!s.is_number_unsigned()) {
          errors.push_back("seeds: expected non-negative integers");
          break;
        }
        c.seeds.push_back(s.get<std::uint64_t>());
      }
    }
  }
  if (auto it = j.find("weights"); it != j.end()) {
    if (!it->is_object()) {
      errors.push_back("weights: expected an object");
    } else {
      for (const auto& [key, value] : it->items()) {
        if (key != "lambda_zi" && key != "lambda_zs" && key != "lambda_d")
          errors.push_back("weights: unknown key '" + key + "'");
        else if (!value.is_number())
          errors.push_back("weights." + key + ": expected a number");
      }
      auto w = [&](const char* key, double& dst) {
        auto f = it->find(key);
        if (f != it->end() && f->is_number()) dst = f->get<double>();
      };
      w("lambda_zi", c.weights.lambda_zi);
      w("lambda_zs", c.weights.lambda_zs);
      w("lambda_d", c.weights.lambda_d);
    }
  }
  if (auto it = j.find("mode"); it != j.end()) {
    if (!it->is_string()) {
      errors.push_back("mode: expected a string");
    } else {
      try {
        c.mode = parse_mode(it->get<std::string>());
      } catch (const ConfigError& e) {
        errors.emplace_back(e.what());
      }
    }
  }
  integer("eval_every", c.eval_every);
  if (auto it = j.find("inner_lr"); it != j.end() && !it->is_null()) {
    if (!it->is_number())
      errors.push_back("inner_lr: expected a number or null");
    else
      c.inner_lr = it->get<double>();
  }
  if (auto it = j.find("meta_enabled"); it != j.end()) {
    if (!it->is_boolean())
      errors.push_back("meta_enabled: expected a boolean");
    else
      c.meta_enabled = it->get<bool>();
  }
  number("grl_lambda", c.grl_lambda);
  number("adam_beta1", c.adam_beta1);
  number("adam_beta2", c.adam_beta2);
  number("adam_eps", c.adam_eps);
  number("val_fraction", c.val_fraction);
  integer("eval_limit", c.eval_limit);
  integer("loss_window", c.loss_window);

  for (auto& e : range_errors(c)) errors.push_back(std::move(e));
  if (!errors.empty()) throw ConfigError(join_errors(errors));
  return c;
}

nlohmann::json train_config_schema() {
  using nlohmann::json;
  std::vector<std::string> modes;
  for (const auto& [m, n] : kModeNames) modes.emplace_back(n);
  auto num = [](double min, bool exclusive) {
    json j = {{"type", "number"}};
    j[exclusive ? "exclusiveMinimum" : "minimum"] = min;
    return j;
  };
  auto integer = [](std::int64_t min) { return json{{"type", "integer"}, {"minimum", min}}; };
  return {
      {"$schema", "https://json-schema.org/draft/2020-12/schema"},
      {"title", "DSDI training configuration"},
      {"type", "object"},
      {"additionalProperties", false},
      {"properties",
       {{"$schema", {{"type", "string"}}},
        {"lr", num(0, true)},
        {"batch_size", integer(2)},
        {"iterations", integer(1)},
        {"seeds", {{"type", "array"}, {"minItems", 1}, {"items", integer(0)}}},
        {"weights",
         {{"type", "object"},
          {"additionalProperties", false},
          {"properties",
           {{"lambda_zi", num(0, false)}, {"lambda_zs", num(0, false)}, {"lambda_d", num(0, false)}}}}},
        {"mode", {{"enum", modes}}},
        {"eval_every", integer(1)},
        {"inner_lr", {{"type", json::array({"number", "null"})}, {"minimum", 0}}},
        {"meta_enabled", {{"type", "boolean"}}},
        {"grl_lambda", num(0, false)},
        {"adam_beta1", {{"type", "number"}, {"minimum", 0}, {"exclusiveMaximum", 1}}},
        {"adam_beta2", {{"type", "number"}, {"minimum", 0}, {"exclusiveMaximum", 1}}},
        {"adam_eps", num(0, true)},
        {"val_fraction", {{"type", "number"}, {"exclusiveMinimum", 0}, {"exclusiveMaximum", 1}}},
        {"eval_limit", integer(0)},
        {"loss_window", integer(1)}}}};
}

ModelDims model_dims_for(AblationMode mode, const DomainDataset& like, Index n_sources) {
  const ModeSpec s = mode_spec(mode);
  ModelDims d;
  d.in_channels = like.channels;
  d.n_domains = n_sources;
  d.n_classes = like.n_classes;
  d.invariant_branch = s.invariant_branch;
  d.specific_branch = s.specific_branch;
  d.domain_heads = s.domain_heads;
  return d;
}

LossWeights effective_weights(const TrainConfig& config) {
  const ModeSpec s = mode_spec(config.mode);
  LossWeights w = config.weights;
  if (!s.invariant_branch || !s.domain_heads) w.lambda_zi = 0;
  if (!s.specific_branch || !s.domain_heads) w.lambda_zs = 0;
  if (!s.use_disentangle || !s.invariant_branch || !s.specific_branch) w.lambda_d = 0;
  return w;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

double number_or_nan(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::vector<double> numbers_or_nan(const nlohmann::json& j) {
  std::vector<double> out;
  for (const auto& v : j) out.push_back(number_or_nan(v));
  return out;
}

nlohmann::json numbers_or_null(const std::vector<double>& v) {
  nlohmann::json out = nlohmann::json::array();
  for (double x : v) out.push_back(number_or_null(x));
  return out;
}

std::string format_number(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

nlohmann::json MetricsRecord::to_json() const {
  return {{"iteration", iteration},
          {"l_zi", number_or_null(l_zi)},
          {"l_zs", number_or_null(l_zs)},
          {"l_d", number_or_null(l_d)},
          {"l_t", number_or_null(l_t)},
          {"l_a", number_or_null(l_a)},
          {"meta_train", number_or_null(meta_train)},
          {"meta_test", number_or_null(meta_test)},
          {"train_acc", numbers_or_null(train_acc)},
          {"val_acc", numbers_or_null(val_acc)},
          {"val_acc_pooled", number_or_null(val_acc_pooled)},
          {"test_acc", numbers_or_null(test_acc)},
          {"test_acc_pooled", number_or_null(test_acc_pooled)},
          {"domain_acc_zi", number_or_null(domain_acc_zi)},
          {"domain_acc_zs", number_or_null(domain_acc_zs)},
          {"cov_is", number_or_null(cov_is)},
          {"cov_ii", number_or_null(cov_ii)},
          {"cov_ss", number_or_null(cov_ss)},
          {"wall_seconds", wall_seconds}};
}

MetricsRecord MetricsRecord::from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.iteration = j.at("iteration").get<std::int64_t>();
  r.l_zi = number_or_nan(j.at("l_zi"));
  r.l_zs = number_or_nan(j.at("l_zs"));
  r.l_d = number_or_nan(j.at("l_d"));
  r.l_t = number_or_nan(j.at("l_t"));
  r.l_a = number_or_nan(j.at("l_a"));
  r.meta_train = number_or_nan(j.at("meta_train"));
  r.meta_test = number_or_nan(j.at("meta_test"));
  r.train_acc = numbers_or_nan(j.at("train_acc"));
  r.val_acc = numbers_or_nan(j.at("val_acc"));
  r.val_acc_pooled = number_or_nan(j.at("val_acc_pooled"));
  r.test_acc = numbers_or_nan(j.at("test_acc"));
  r.test_acc_pooled = number_or_nan(j.at("test_acc_pooled"));
  r.domain_acc_zi = number_or_nan(j.at("domain_acc_zi"));
  r.domain_acc_zs = number_or_nan(j.at("domain_acc_zs"));
  r.cov_is = number_or_nan(j.at("cov_is"));
  r.cov_ii = number_or_nan(j.at("cov_ii"));
  r.cov_ss = number_or_nan(j.at("cov_ss"));
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

std::string metrics_csv_header(std::span<const std::string> source_names,
                               std::span<const std::string> target_names) {
  std::string h = "iteration,l_zi,l_zs,l_d,l_t,l_a,meta_train,meta_test";
  for (const auto& n : source_names) h += ",train_acc_" + n;
  for (const auto& n : source_names) h += ",val_acc_" + n;
  h += ",val_acc";
  for (const auto& n : target_names) h += ",test_acc_" + n;
  h += ",test_acc,domain_acc_zi,domain_acc_zs,cov_is_fro,cov_ii_fro,cov_ss_fro";
  return h;
}

std::string metrics_csv_row(const MetricsRecord& r) {
  std::string row = std::to_string(r.iteration);
  auto add = [&](double v) { row += "," + format_number(v); };
  for (double v : {r.l_zi, r.l_zs, r.l_d, r.l_t, r.l_a, r.meta_train, r.meta_test}) add(v);
  for (double v : r.train_acc) add(v);
  for (double v : r.val_acc) add(v);
  add(r.val_acc_pooled);
  for (double v : r.test_acc) add(v);
  for (double v : {r.test_acc_pooled, r.domain_acc_zi, r.domain_acc_zs, r.cov_is, r.cov_ii, r.cov_ss})
    add(v);
  return row;
}

std::vector<std::vector<std::pair<std::string, double>>> read_metrics_csv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty metrics file", 0);
  const auto header = split(line);
  std::vector<std::vector<std::pair<std::string, double>>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size())
      throw ParseError(path.string() + ": row " + std::to_string(rows.size() + 1) +
                           " has " + std::to_string(cells.size()) + " fields, header has " +
                           std::to_string(header.size()),
                       -1);
    std::vector<std::pair<std::string, double>> row;
    for (std::size_t i = 0; i < cells.size(); ++i)
      row.emplace_back(header[i], cells[i].empty() ? kNaN : std::stod(cells[i]));
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

void check_compatible(const DsdiModel<float>& model, const DomainDataset& ds) {
  const ModelDims& d = model.dims();
  if (d.in_channels != ds.channels || d.n_classes != ds.n_classes)
    throw ShapeError("model expects " + std::to_string(d.in_channels) + " channels and " +
                     std::to_string(d.n_classes) + " classes; dataset " + ds.name + " has " +
                     std::to_string(ds.channels) + " and " + std::to_string(ds.n_classes));
}

std::vector<Index> all_indices(Index n) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  return idx;
}

/// Deterministic subset of at most `limit` indices, returned sorted.
std::vector<Index> limited(std::vector<Index> idx, Index limit, std::uint64_t seed) {
  if (limit <= 0 || static_cast<Index>(idx.size()) <= limit) return idx;
  Rng rng(seed);
  shuffle_in_place(idx, rng);
  idx.resize(static_cast<std::size_t>(limit));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct Counts {
  Index correct = 0, total = 0;
  double rate() const { return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : kNaN; }
};

Counts count_correct(const DsdiModel<float>& model, const DomainDataset& ds,
                     std::span<const Index> indices, Index chunk) {
  check_compatible(model, ds);
  Counts c;
  for (std::size_t b = 0; b < indices.size(); b += static_cast<std::size_t>(chunk)) {
    const auto part = indices.subspan(b, std::min<std::size_t>(static_cast<std::size_t>(chunk),
                                                               indices.size() - b));
    const auto batch = gather_batch<float>(ds, part, 0);
    const auto pred = argmax_rows(predict_logits(model, batch.images, chunk));
    for (std::size_t i = 0; i < pred.size(); ++i) c.correct += pred[i] == batch.labels[i];
    c.total += static_cast<Index>(pred.size());
  }
  return c;
}

double frobenius(const RowMatrix<double>& m) { return m.norm(); }

}  // namespace

double evaluate(const DsdiModel<float>& model, const DomainDataset& dataset,
                std::span<const Index> indices, Index chunk) {
  if (chunk < 1) throw ConfigError("evaluation chunk must be >= 1");
  if (indices.empty()) {
    const auto idx = all_indices(dataset.size());
    return count_correct(model, dataset, idx, chunk).rate();
  }
  return count_correct(model, dataset, indices, chunk).rate();
}

// ---------------------------------------------------------------------------
// Training

TrainData train_data(const DatasetBundle& bundle) {
  TrainData d;
  for (int id : bundle.source_ids) d.sources.push_back(&bundle.domains.at(static_cast<std::size_t>(id)));
  for (int id : bundle.target_ids) d.targets.push_back(&bundle.domains.at(static_cast<std::size_t>(id)));
  return d;
}

namespace {

constexpr std::size_t kSeries = 7;  // l_zi l_zs l_d l_t l_a meta_train meta_test
constexpr Index kEvalChunk = 256;

struct LossWindows {
  std::size_t capacity = 100;
  std::array<std::deque<double>, kSeries> series;

  void push(std::size_t k, double v) {
    auto& s = series[k];
    s.push_back(v);
    if (s.size() > capacity) s.pop_front();
  }
  double mean(std::size_t k) const {
    const auto& s = series[k];
    if (s.empty()) return kNaN;
    double sum = 0;
    for (double v : s) sum += v;
    return sum / static_cast<double>(s.size());
  }
};

struct RunContext {
  const TrainConfig& config;
  const TrainData& data;
  std::uint64_t seed;
  ModeSpec spec;
  bool meta_on;
  std::optional<MetaPlan> plan;
  std::vector<SplitPlan> splits;
  std::vector<std::vector<Index>> train_eval, target_eval;
  std::vector<std::string> source_names, target_names;
};

void validate_data(const TrainConfig& config, const TrainData& data) {
  if (data.sources.empty()) throw ConfigError("training needs at least one source domain");
  if (mode_spec(config.mode).meta && config.meta_enabled && data.sources.size() < 2)
    throw ConfigError(std::string("mode ") + mode_name(config.mode) +
                      " needs at least 2 source domains");
  const DomainDataset& ref = *data.sources.front();
  auto same = [&](const DomainDataset* d) {
    if (d == nullptr) throw ConfigError("null dataset pointer");
    if (d->channels != ref.channels || d->height != ref.height || d->width != ref.width ||
        d->n_classes != ref.n_classes)
      throw ConfigError("domain " + d->name + " does not match the layout of " + ref.name);
  };
  for (const auto* d : data.sources) {
    same(d);
    if (d->size() < 5) throw ConfigError("source domain " + d->name + " has fewer than 5 samples");
  }
  for (const auto* d : data.targets) same(d);
}

MetricsRecord evaluate_run(const RunContext& ctx, const DsdiModel<float>& model,
                           const LossWindows& windows, std::int64_t iteration) {
  MetricsRecord r;
  r.iteration = iteration;
  r.l_zi = windows.mean(0);
  r.l_zs = windows.mean(1);
  r.l_d = windows.mean(2);
  r.l_t = windows.mean(3);
  r.l_a = windows.mean(4);
  r.meta_train = windows.mean(5);
  r.meta_test = windows.mean(6);

  const auto& sources = ctx.data.sources;
  for (std::size_t j = 0; j < sources.size(); ++j)
    r.train_acc.push_back(count_correct(model, *sources[j], ctx.train_eval[j], kEvalChunk).rate());

  // Validation: class accuracy, domain-head accuracy and feature covariances.
  Counts pooled, dom_i, dom_s;
  std::vector<float> zi_rows, zs_rows;
  const Index fdim = model.dims().feature_dim;
  for (std::size_t j = 0; j < sources.size(); ++j) {
    const auto& idx = ctx.splits[j].val_indices;
    Counts c;
    for (std::size_t b = 0; b < idx.size(); b += static_cast<std::size_t>(kEvalChunk)) {
      const std::span<const Index> part(idx.data() + b,
                                        std::min<std::size_t>(kEvalChunk, idx.size() - b));
      const auto batch = gather_batch<float>(*sources[j], part, static_cast<int>(j));
      const FeatureSet fs = extract_features(model, batch.images, kEvalChunk);
      const auto pred = argmax_rows(fs.class_logits);
      for (std::size_t i = 0; i < pred.size(); ++i) c.correct += pred[i] == batch.labels[i];
      c.total += static_cast<Index>(pred.size());
      if (!fs.domain_logits_i.empty()) {
        for (int p : argmax_rows(fs.domain_logits_i)) dom_i.correct += p == static_cast<int>(j);
        dom_i.total += static_cast<Index>(pred.size());
      }
      if (!fs.domain_logits_s.empty()) {
        for (int p : argmax_rows(fs.domain_logits_s)) dom_s.correct += p == static_cast<int>(j);
        dom_s.total += static_cast<Index>(pred.size());
      }
      if (!fs.z_i.empty()) zi_rows.insert(zi_rows.end(), fs.z_i.data(), fs.z_i.data() + fs.z_i.size());
      if (!fs.z_s.empty()) zs_rows.insert(zs_rows.end(), fs.z_s.data(), fs.z_s.data() + fs.z_s.size());
    }
    r.val_acc.push_back(c.rate());
    pooled.correct += c.correct;
    pooled.total += c.total;
  }
  r.val_acc_pooled = pooled.rate();
  r.domain_acc_zi = dom_i.rate();
  r.domain_acc_zs = dom_s.rate();

  auto to_tensor = [&](const std::vector<float>& rows) {
    Tensor<double> t({static_cast<Index>(rows.size()) / fdim, fdim});
    for (std::size_t i = 0; i < rows.size(); ++i) t[static_cast<Index>(i)] = rows[i];
    return t;
  };
  r.cov_is = r.cov_ii = r.cov_ss = kNaN;
  const Index n_val = pooled.total;
  if (n_val >= 2) {
    if (!zi_rows.empty()) {
      const auto zi = to_tensor(zi_rows);
      r.cov_ii = frobenius(covariance_matrix(zi, zi));
      if (!zs_rows.empty()) r.cov_is = frobenius(covariance_matrix(zi, to_tensor(zs_rows)));
    }
    if (!zs_rows.empty()) {
      const auto zs = to_tensor(zs_rows);
      r.cov_ss = frobenius(covariance_matrix(zs, zs));
    }
  }

  Counts test;
  for (std::size_t t = 0; t < ctx.data.targets.size(); ++t) {
    const Counts c = count_correct(model, *ctx.data.targets[t], ctx.target_eval[t], kEvalChunk);
    r.test_acc.push_back(c.rate());
    test.correct += c.correct;
    test.total += c.total;
  }
  r.test_acc_pooled = test.rate();
  return r;
}

// --- resumable state --------------------------------------------------------

struct TrainState {
  std::int64_t iteration = 0;  // last completed iteration
  DsdiModel<float> model, best;
  AdamState<float> adam, meta_adam;
  std::vector<BatchSampler> samplers;
  LossWindows windows;
  std::vector<MetricsRecord> records;
  std::int64_t best_iteration = 0;
  double best_val = -1.0;
  double best_test = kNaN;
  double elapsed = 0;  // wall seconds spent before this process
};

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << text;
    if (!out) throw InputError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void append_adam(std::vector<NamedTensor>& blocks, const std::string& prefix,
                 const AdamState<float>& s) {
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    blocks.emplace_back(prefix + "/m/" + std::to_string(i), s.m[i]);
    blocks.emplace_back(prefix + "/v/" + std::to_string(i), s.v[i]);
  }
}

void save_state(const std::filesystem::path& dir, const TrainConfig& config, std::uint64_t seed,
                const TrainState& st, double elapsed) {
  std::vector<NamedTensor> blocks;
  for (const auto* p : st.model.parameters()) blocks.emplace_back("model/" + p->name, p->value);
  for (const auto* p : st.best.parameters()) blocks.emplace_back("best/" + p->name, p->value);
  append_adam(blocks, "adam", st.adam);
  append_adam(blocks, "meta_adam", st.meta_adam);
  const auto bin_tmp = dir / "state.bin.tmp";
  write_blocks(bin_tmp, blocks);
  std::filesystem::rename(bin_tmp, dir / "state.bin");

  nlohmann::json samplers = nlohmann::json::array();
  for (const auto& s : st.samplers) samplers.push_back(s.state());
  nlohmann::json windows = nlohmann::json::array();
  for (const auto& s : st.windows.series) windows.push_back(std::vector<double>(s.begin(), s.end()));
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : st.records) records.push_back(r.to_json());
  const nlohmann::json j = {{"format", "dsdi-train-state"},
                            {"version", 1},
                            {"config", config.to_json()},
                            {"seed", seed},
                            {"iteration", st.iteration},
                            {"adam_step", st.adam.step},
                            {"adam_buffers", st.adam.m.size()},
                            {"meta_adam_step", st.meta_adam.step},
                            {"meta_adam_buffers", st.meta_adam.m.size()},
                            {"samplers", samplers},
                            {"windows", windows},
                            {"records", records},
                            {"best_iteration", st.best_iteration},
                            {"best_val", st.best_val},
                            {"best_test", number_or_null(st.best_test)},
                            {"elapsed", elapsed}};
  write_text_atomic(dir / "state.json", j.dump(1) + "\n");
}

void restore_adam(AdamState<float>& s, const std::string& prefix, std::size_t buffers,
                  std::int64_t step, const std::map<std::string, const Tensor<float>*>& by_name) {
  s.step = step;
  s.m.clear();
  s.v.clear();
  for (std::size_t i = 0; i < buffers; ++i) {
    const auto m = by_name.find(prefix + "/m/" + std::to_string(i));
    const auto v = by_name.find(prefix + "/v/" + std::to_string(i));
    if (m == by_name.end() || v == by_name.end())
      throw InputError("training state is missing optimizer buffer " + prefix + " " + std::to_string(i));
    s.m.push_back(*m->second);
    s.v.push_back(*v->second);
  }
}

void load_state(const std::filesystem::path& dir, const TrainConfig& config, std::uint64_t seed,
                TrainState& st) {
  std::ifstream in(dir / "state.json");
  if (!in) throw InputError("cannot open " + (dir / "state.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("state.json: " + std::string(e.what()), static_cast<std::int64_t>(e.byte));
  }
  if (j.at("config") != config.to_json() || j.at("seed").get<std::uint64_t>() != seed)
    throw ConfigError("cannot resume: " + dir.string() + " was written with a different config or seed");
  const auto blocks = read_blocks(dir / "state.bin");
  std::vector<NamedTensor> model_blocks, best_blocks;
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : blocks) {
    by_name[name] = &t;
    if (name.rfind("model/", 0) == 0) model_blocks.emplace_back(name.substr(6), t);
    if (name.rfind("best/", 0) == 0) best_blocks.emplace_back(name.substr(5), t);
  }
  load_parameters(st.model, model_blocks, "state.bin");
  load_parameters(st.best, best_blocks, "state.bin");
  restore_adam(st.adam, "adam", j.at("adam_buffers").get<std::size_t>(),
               j.at("adam_step").get<std::int64_t>(), by_name);
  restore_adam(st.meta_adam, "meta_adam", j.at("meta_adam_buffers").get<std::size_t>(),
               j.at("meta_adam_step").get<std::int64_t>(), by_name);
  const auto& samplers = j.at("samplers");
  if (samplers.size() != st.samplers.size()) throw InputError("state.json: sampler count mismatch");
  for (std::size_t i = 0; i < st.samplers.size(); ++i)
    st.samplers[i].restore(samplers[i].get<std::string>());
  const auto& windows = j.at("windows");
  for (std::size_t k = 0; k < kSeries; ++k) {
    st.windows.series[k].clear();
    for (const auto& v : windows.at(k)) st.windows.series[k].push_back(number_or_nan(v));
  }
  st.records.clear();
  for (const auto& r : j.at("records")) st.records.push_back(MetricsRecord::from_json(r));
  st.iteration = j.at("iteration").get<std::int64_t>();
  st.best_iteration = j.at("best_iteration").get<std::int64_t>();
  st.best_val = j.at("best_val").get<double>();
  st.best_test = number_or_nan(j.at("best_test"));
  st.elapsed = j.at("elapsed").get<double>();
}

void write_metrics(const std::filesystem::path& dir, const RunContext& ctx,
                   const std::vector<MetricsRecord>& records) {
  std::string text = metrics_csv_header(ctx.source_names, ctx.target_names) + "\n";
  for (const auto& r : records) text += metrics_csv_row(r) + "\n";
  write_text_atomic(dir / "metrics.csv", text);
}

template <typename Fn>
auto at_iteration(std::int64_t it, Fn&& fn) {
  try {
    return fn();
  } catch (const DivergenceError& e) {
    throw DivergenceError(std::string(e.what()) + " at iteration " + std::to_string(it), it);
  }
}

}  // namespace

TrainResult train(const TrainConfig& config, std::uint64_t seed, const TrainData& data,
                  const TrainOptions& options) {
  config.validate();
  validate_data(config, data);
  const auto wall_start = std::chrono::steady_clock::now();

  RunContext ctx{config, data, seed, mode_spec(config.mode), false, std::nullopt, {}, {}, {}, {}, {}};
  const auto n_sources = static_cast<Index>(data.sources.size());
  const ModelDims dims = model_dims_for(config.mode, *data.sources.front(), n_sources);
  ctx.meta_on = ctx.spec.meta.has_value() && config.meta_enabled;
  if (ctx.meta_on) ctx.plan = meta_plan(*ctx.spec.meta, dims);

  TrainState st;
  st.model = DsdiModel<float>(dims, derive_seed(seed, 10));
  st.best = st.model;
  for (auto* s : {&st.adam, &st.meta_adam}) {
    s->beta1 = config.adam_beta1;
    s->beta2 = config.adam_beta2;
    s->eps = config.adam_eps;
  }
  st.windows.capacity = static_cast<std::size_t>(config.loss_window);
  for (Index j = 0; j < n_sources; ++j) {
    const DomainDataset& ds = *data.sources[static_cast<std::size_t>(j)];
    ctx.splits.push_back(
        split_train_val(ds.size(), config.val_fraction, derive_seed(seed, 20 + static_cast<std::uint64_t>(j))));
    st.samplers.emplace_back(ctx.splits.back().train_indices, derive_seed(seed, 30 + static_cast<std::uint64_t>(j)));
    ctx.train_eval.push_back(limited(ctx.splits.back().train_indices, config.eval_limit,
                                     derive_seed(seed, 40 + static_cast<std::uint64_t>(j))));
    ctx.source_names.push_back(ds.name);
  }
  for (std::size_t t = 0; t < data.targets.size(); ++t) {
    const DomainDataset& ds = *data.targets[t];
    ctx.target_eval.push_back(limited(all_indices(ds.size()), config.eval_limit, derive_seed(seed, 60 + t)));
    ctx.target_names.push_back(ds.name);
  }

  const bool to_disk = !options.out_dir.empty();
  if (to_disk) std::filesystem::create_directories(options.out_dir);
  if (to_disk && options.resume && std::filesystem::exists(options.out_dir / "state.json"))
    load_state(options.out_dir, config, seed, st);

  const LossWeights weights = effective_weights(config);
  const double inner_lr = config.effective_inner_lr();
  const auto grl = static_cast<float>(config.grl_lambda);
  auto elapsed = [&] {
    return st.elapsed +
           std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  };
  auto summary = [&](bool completed) {
    return nlohmann::json{
        {"mode", mode_name(config.mode)},
        {"seed", seed},
        {"completed", completed},
        {"iterations_run", st.iteration},
        {"best_iteration", st.best_iteration},
        {"best_val_acc", st.best_val},
        {"best_test_acc", number_or_null(st.best_test)},
        {"final", st.records.empty() ? nlohmann::json(nullptr) : st.records.back().to_json()},
        {"wall_seconds", elapsed()},
        {"config", config.to_json()},
        {"model_dims", dims.to_json()},
        {"parameter_count", st.model.parameter_count()},
        {"effective_weights", weights.to_json()},
        {"meta",
         {{"enabled", ctx.meta_on},
          {"inner_lr", inner_lr},
          {"first_order", true},
          {"optimizer_state", "separate Adam state for meta updates"},
          {"frozen_features", "recomputed after the L_A step"}}},
        {"sources", ctx.source_names},
        {"targets", ctx.target_names}};
  };

  const std::vector<const DomainDataset*>& sources = data.sources;
  bool stopped = false;
  for (std::int64_t it = st.iteration + 1; it <= config.iterations; ++it) {
    const auto batches = sample_batch<float>(sources, st.samplers, config.batch_size);
    const std::array<DomainBatch<float>, 1> merged_holder{
        concat_batches<float>(std::span<const DomainBatch<float>>(batches))};
    const DomainBatch<float>& merged = merged_holder[0];

    // Step 1: joint update on L_A.
    st.model.zero_grad();
    {
      Tape<float> tape;
      const auto out = forward_all(tape, st.model, merged.images, grl);
      const auto losses = loss_total(out, merged.labels, merged.domains, weights);
      const double l_a = losses.l_a.item();
      if (!std::isfinite(l_a))
        throw DivergenceError("non-finite L_A at iteration " + std::to_string(it), it);
      tape.backward(losses.l_a);
      st.windows.push(0, out.domain_logits_i.valid() ? losses.l_zi.item() : kNaN);
      st.windows.push(1, out.domain_logits_s.valid() ? losses.l_zs.item() : kNaN);
      st.windows.push(2, out.z_i.valid() && out.z_s.valid() ? losses.l_d.item() : kNaN);
      st.windows.push(3, losses.l_t.item());
      st.windows.push(4, l_a);
    }
    const auto params = st.model.parameters();
    at_iteration(it, [&] { adam_update<float>(params, st.adam, config.lr); });

    // Step 2: one episode per held-out source domain, applied sequentially.
    if (ctx.meta_on) {
      std::vector<Tensor<float>> frozen;
      for (const auto& b : batches) frozen.push_back(frozen_features(st.model, b.images, ctx.plan->frozen));
      const auto episodes = make_episodes<float>(batches, frozen);
      double tr = 0, te = 0;
      for (const auto& ep : episodes) {
        at_iteration(it, [&] {
          const auto res = meta_step(st.model, ep, inner_lr, *ctx.plan);
          std::vector<const Tensor<float>*> grads;
          for (const auto& g : res.grads) grads.push_back(&g);
          adam_update<float>(res.params, grads, st.meta_adam, config.lr);
          tr += res.train_loss;
          te += res.test_loss;
        });
      }
      st.windows.push(5, tr / static_cast<double>(episodes.size()));
      st.windows.push(6, te / static_cast<double>(episodes.size()));
    }
    st.iteration = it;

    const bool eval_now = it % config.eval_every == 0 || it == config.iterations;
    if (eval_now) {
      MetricsRecord rec = evaluate_run(ctx, st.model, st.windows, it);
      rec.wall_seconds = elapsed();
      if (rec.val_acc_pooled > st.best_val) {
        st.best_val = rec.val_acc_pooled;
        st.best_test = rec.test_acc_pooled;
        st.best_iteration = it;
        copy_parameters(st.model, st.best);
        if (to_disk)
          save_checkpoint(options.out_dir / "best", st.best, it,
                          {{"mode", mode_name(config.mode)},
                           {"val_acc", st.best_val},
                           {"test_acc", number_or_null(st.best_test)}});
      }
      st.records.push_back(rec);
      if (options.on_record) options.on_record(rec);
      if (to_disk) write_metrics(options.out_dir, ctx, st.records);
    }
    stopped = options.stop_after > 0 && it == options.stop_after && it < config.iterations;
    if (to_disk && (eval_now || stopped)) save_state(options.out_dir, config, seed, st, elapsed());
    if (stopped) break;
  }

  TrainResult result;
  result.completed = !stopped;
  result.summary = summary(result.completed);
  if (to_disk) {
    write_text_atomic(options.out_dir / "summary.json", result.summary.dump(2) + "\n");
    if (!std::filesystem::exists(options.out_dir / "best.json"))
      save_checkpoint(options.out_dir / "best", st.best, st.best_iteration);
  }
  result.best = std::move(st.best);
  result.best_iteration = st.best_iteration;
  result.best_val_acc = st.best_val;
  result.best_test_acc = st.best_test;
  result.records = std::move(st.records);
  return result;
}

// ---------------------------------------------------------------------------
// Ablation

namespace {

void finish_row(AblationRow& row) {
  const auto n = static_cast<double>(row.target_acc.size());
  if (row.target_acc.empty()) {
    row.mean = row.std = kNaN;
    return;
  }
  row.mean = std::accumulate(row.target_acc.begin(), row.target_acc.end(), 0.0) / n;
  double ss = 0;
  for (double a : row.target_acc) ss += (a - row.mean) * (a - row.mean);
  row.std = row.target_acc.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
}

std::optional<nlohmann::json> read_summary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

}  // namespace

std::vector<AblationRow> run_ablation_suite(
    const TrainConfig& base, const TrainData& data, const std::filesystem::path& out_dir,
    std::span<const AblationMode> modes,
    const std::function<void(AblationMode, std::uint64_t, const TrainResult&)>& on_run) {
  base.validate();
  if (base.seeds.size() < 3) throw ConfigError("the ablation suite needs at least 3 seeds");
  std::vector<AblationRow> rows;
  for (AblationMode mode : modes) {
    TrainConfig cfg = base;
    cfg.mode = mode;
    AblationRow row;
    row.mode = mode;
    for (std::uint64_t seed : base.seeds) {
      const auto dir = out_dir / mode_name(mode) / ("seed_" + std::to_string(seed));
      const auto prior = read_summary(dir / "summary.json");
      double test = kNaN, val = kNaN;
      if (prior && prior->value("completed", false) && prior->at("config") == cfg.to_json()) {
        test = number_or_nan(prior->at("best_test_acc"));
        val = prior->at("best_val_acc").get<double>();
        if (on_run) {
          TrainResult reused;
          reused.summary = *prior;
          reused.completed = true;
          reused.best_test_acc = test;
          reused.best_val_acc = val;
          on_run(mode, seed, reused);
        }
      } else {
        TrainOptions opts;
        opts.out_dir = dir;
        opts.resume = true;
        const TrainResult res = train(cfg, seed, data, opts);
        test = res.best_test_acc;
        val = res.best_val_acc;
        if (on_run) on_run(mode, seed, res);
      }
      row.seeds.push_back(seed);
      row.target_acc.push_back(test);
      row.val_acc.push_back(val);
    }
    finish_row(row);
    rows.push_back(std::move(row));
  }
  std::filesystem::create_directories(out_dir);
  write_ablation_csv(out_dir / "ablation.csv", rows);
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows) {
  std::string text = "mode,mean_acc_pct,std_acc_pct,n_seeds,seed_acc_pct,mean_val_acc_pct\n";
  char buf[64];
  for (const auto& r : rows) {
    text += mode_name(r.mode);
    std::snprintf(buf, sizeof buf, ",%.2f,%.2f,%zu,", 100.0 * r.mean, 100.0 * r.std, r.target_acc.size());
    text += buf;
    for (std::size_t i = 0; i < r.target_acc.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.2f", i ? ";" : "", 100.0 * r.target_acc[i]);
      text += buf;
    }
    const double val = r.val_acc.empty() ? kNaN
                                         : std::accumulate(r.val_acc.begin(), r.val_acc.end(), 0.0) /
                                               static_cast<double>(r.val_acc.size());
    std::snprintf(buf, sizeof buf, ",%.2f\n", 100.0 * val);
    text += buf;
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_text_atomic(path, text);
}

std::vector<AblationRow> collect_ablation_results(const std::filesystem::path& out_dir) {
  std::vector<AblationRow> rows;
  for (const auto& [mode, name] : kModeNames) {
    const auto mode_dir = out_dir / name;
    if (!std::filesystem::is_directory(mode_dir)) continue;
    std::vector<std::pair<std::uint64_t, nlohmann::json>> runs;
    for (const auto& entry : std::filesystem::directory_iterator(mode_dir)) {
      const auto s = read_summary(entry.path() / "summary.json");
      if (s && s->value("completed", false)) runs.emplace_back(s->at("seed").get<std::uint64_t>(), *s);
    }
    if (runs.empty()) continue;
    std::sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    AblationRow row;
    row.mode = mode;
    for (const auto& [seed, s] : runs) {
      row.seeds.push_back(seed);
      row.target_acc.push_back(number_or_nan(s.at("best_test_acc")));
      row.val_acc.push_back(s.at("best_val_acc").get<double>());
    }
    finish_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dsdi

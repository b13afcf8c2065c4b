// SPDX-License-Identifier: Apache-2.0
//
// Training loop, optimizer, model selection and the ablation harness.
//
// One iteration:
//   1. sample one batch of `batch_size` per source domain;
//   2. one Adam step on L_A over every present parameter group;
//   3. in meta modes, one episode per source domain (in domain order), each
//      followed by a step of a second Adam state on the adapted groups.
// Every `eval_every` iterations the model is evaluated on the pooled source
// validation splits; the first strict maximum is kept as the best checkpoint.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsdi/datasets.hpp"
#include "dsdi/losses.hpp"
#include "dsdi/meta.hpp"
#include "dsdi/model.hpp"
#include "json.hpp"

namespace dsdi {

// ---------------------------------------------------------------------------
// Adam

template <typename Scalar>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Tensor<Scalar>> m, v;  // allocated on the first update
};

/// m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
/// p <- p - lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
/// Throws DivergenceError on a non-finite gradient before touching anything,
/// and ShapeError if the parameter list does not match the state.
template <typename Scalar>
void adam_update(std::span<Parameter<Scalar>* const> params,
                 std::span<const Tensor<Scalar>* const> grads, AdamState<Scalar>& state,
                 double lr);

/// Uses each parameter's own gradient buffer.
template <typename Scalar>
void adam_update(std::span<Parameter<Scalar>* const> params, AdamState<Scalar>& state, double lr);

// ---------------------------------------------------------------------------
// Modes

enum class AblationMode {
  DI,
  DI_META,
  DS,
  DS_META,
  DSDI_NO_LD,
  DSDI_NO_META,
  DSDI_META_BOTH,
  DSDI_META_DI,
  DSDI_META_DS,
  ERM_REF,
};

/// The nine rows of the ablation table, in table order.
constexpr std::array<AblationMode, 9> kAblationModes = {
    AblationMode::DI,           AblationMode::DI_META,        AblationMode::DS,
    AblationMode::DS_META,      AblationMode::DSDI_NO_LD,     AblationMode::DSDI_NO_META,
    AblationMode::DSDI_META_BOTH, AblationMode::DSDI_META_DI, AblationMode::DSDI_META_DS};

const char* mode_name(AblationMode mode);
/// Throws ConfigError for unknown names.
AblationMode parse_mode(const std::string& name);

struct ModeSpec {
  bool invariant_branch = true;
  bool specific_branch = true;
  bool domain_heads = true;
  bool use_disentangle = true;
  std::optional<MetaTarget> meta;  // empty: no meta step
};

ModeSpec mode_spec(AblationMode mode);

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  double lr = 1e-3;
  Index batch_size = 64;  // per source domain
  std::int64_t iterations = 5000;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  LossWeights weights;
  AblationMode mode = AblationMode::DSDI_META_DS;
  std::int64_t eval_every = 100;
  std::optional<double> inner_lr;  // defaults to lr
  bool meta_enabled = true;        // false turns off step 3 in meta modes
  double grl_lambda = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double val_fraction = 0.2;
  Index eval_limit = 0;  // >0 caps the samples scored per train split and target domain
  std::int64_t loss_window = 100;

  double effective_inner_lr() const { return inner_lr.value_or(lr); }
  /// Throws ConfigError listing every violated constraint.
  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys, wrong types and range violations are all reported together.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// JSON Schema (draft 2020-12) describing TrainConfig documents.
nlohmann::json train_config_schema();

ModelDims model_dims_for(AblationMode mode, const DomainDataset& like, Index n_sources);

/// Loss weights with the terms disabled by `mode` set to zero.
LossWeights effective_weights(const TrainConfig& config);

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRecord {
  std::int64_t iteration = 0;
  // Moving averages over the last `loss_window` iterations. NaN when absent.
  double l_zi = 0, l_zs = 0, l_d = 0, l_t = 0, l_a = 0;
  double meta_train = 0, meta_test = 0;
  std::vector<double> train_acc, val_acc;  // per source domain
  double val_acc_pooled = 0;
  std::vector<double> test_acc;  // per target domain
  double test_acc_pooled = 0;
  double domain_acc_zi = 0, domain_acc_zs = 0;  // on the pooled validation splits
  // Frobenius norms of Cov(z_i, z_s), Cov(z_i, z_i), Cov(z_s, z_s) on the validation splits.
  double cov_is = 0, cov_ii = 0, cov_ss = 0;
  double wall_seconds = 0;  // not written to the CSV

  nlohmann::json to_json() const;
  static MetricsRecord from_json(const nlohmann::json& j);
};

std::string metrics_csv_header(std::span<const std::string> source_names,
                               std::span<const std::string> target_names);
std::string metrics_csv_row(const MetricsRecord& record);

/// Reads a metrics CSV written by train(); one map per row, empty fields as NaN.
std::vector<std::vector<std::pair<std::string, double>>> read_metrics_csv(
    const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training

struct TrainData {
  std::vector<const DomainDataset*> sources;
  std::vector<const DomainDataset*> targets;
};

TrainData train_data(const DatasetBundle& bundle);

struct TrainOptions {
  /// Output directory for metrics.csv, summary.json, best checkpoint and the
  /// resumable state. Empty: keep everything in memory.
  std::filesystem::path out_dir;
  bool resume = false;
  /// Stop (after saving state) once this iteration completes; 0 = run to the end.
  std::int64_t stop_after = 0;
  std::function<void(const MetricsRecord&)> on_record;
};

struct TrainResult {
  DsdiModel<float> best;
  std::int64_t best_iteration = 0;
  double best_val_acc = 0;
  double best_test_acc = 0;
  std::vector<MetricsRecord> records;
  nlohmann::json summary;
  bool completed = false;  // false when stopped by stop_after
};

/// Throws ConfigError on invalid configs or data layouts, DivergenceError
/// (carrying the iteration) on a non-finite loss or gradient.
TrainResult train(const TrainConfig& config, std::uint64_t seed, const TrainData& data,
                  const TrainOptions& options = {});

/// Top-1 accuracy of the class head on `indices` of `dataset` (all when empty).
double evaluate(const DsdiModel<float>& model, const DomainDataset& dataset,
                std::span<const Index> indices = {}, Index chunk = 256);

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  AblationMode mode = AblationMode::DI;
  std::vector<std::uint64_t> seeds;
  std::vector<double> target_acc;  // pooled target accuracy of the best checkpoint per seed
  std::vector<double> val_acc;
  double mean = 0, std = 0;  // over seeds, sample standard deviation
};

/// Runs every mode for every seed under `out_dir/<MODE>/seed_<s>/`, reusing
/// runs whose summary.json matches the requested config. Writes
/// `out_dir/ablation.csv` and returns the rows in `modes` order. Needs >= 3 seeds.
std::vector<AblationRow> run_ablation_suite(
    const TrainConfig& base, const TrainData& data, const std::filesystem::path& out_dir,
    std::span<const AblationMode> modes = kAblationModes,
    const std::function<void(AblationMode, std::uint64_t, const TrainResult&)>& on_run = {});

void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows);

/// Rebuilds rows from the per-run summaries under `out_dir`; modes without
/// any finished run are omitted.
std::vector<AblationRow> collect_ablation_results(const std::filesystem::path& out_dir);

}  // namespace dsdi

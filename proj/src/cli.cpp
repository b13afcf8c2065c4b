// SPDX-License-Identifier: Apache-2.0
#include "dsdi/cli.hpp"

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>

#include "CLI11.hpp"
#include "dsdi/datasets.hpp"
#include "dsdi/errors.hpp"
#include "dsdi/hash.hpp"
#include "dsdi/infotheory.hpp"
#include "dsdi/model.hpp"
#include "dsdi/trainer.hpp"

#ifndef DSDI_BUILD_ID
#define DSDI_BUILD_ID "unknown"
#endif

namespace dsdi {

namespace fs = std::filesystem;

std::string build_id() { return DSDI_BUILD_ID; }

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json RunManifest::to_json() const {
  return {{"command", command},         {"argv", argv},
          {"config", config},           {"dataset_hashes", dataset_hashes},
          {"build_id", build_id},       {"seeds", seeds},
          {"threads", threads},         {"started_at", started_at},
          {"finished_at", finished_at}, {"outputs", outputs}};
}

void RunManifest::add_output(const fs::path& root, const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw InputError("cannot hash " + file.string());
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  outputs[fs::relative(file, root).generic_string()] = sha256_hex(bytes);
}

void RunManifest::write(const fs::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  out << to_json().dump(2) << '\n';
  if (!out) throw InputError("cannot write " + path.string());
}

namespace {

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

RunManifest start_manifest(const std::string& command, int argc, const char* const* argv) {
  RunManifest m;
  m.command = command;
  m.argv.assign(argv, argv + argc);
  m.build_id = build_id();
  m.threads = Eigen::nbThreads();
  m.started_at = utc_timestamp();
  return m;
}

void record_dataset(RunManifest& m, const DatasetBundle& bundle) {
  for (const auto& d : bundle.sidecar.at("domains"))
    m.dataset_hashes[d.at("file").get<std::string>()] = d.at("sha256").get<std::string>();
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), static_cast<std::int64_t>(e.byte));
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw InputError("cannot write " + path.string());
}

std::string fmt(double v, const char* spec = "%.4f") {
  if (!std::isfinite(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// --- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  std::string dataset;
  std::string mnist_dir;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<double> rates = {0.1, 0.2, 0.9};
  std::vector<double> angles = {0, 15, 30, 45, 60, 75};
};

int cmd_gen_data(const GenDataArgs& a, Streams io, RunManifest manifest) {
  const MnistSet mnist = load_mnist_dir(a.mnist_dir);
  DatasetBundle bundle;
  if (a.dataset == "bcm")
    bundle = make_bcm_bundle(gen_background_colored_mnist(mnist, a.seed));
  else if (a.dataset == "cmnist")
    bundle = make_cmnist_bundle(gen_colored_mnist(mnist, a.rates, a.seed));
  else
    bundle = make_rmnist_bundle(gen_rotated_mnist(mnist, a.angles, a.seed));
  const fs::path out(a.out);
  const auto sidecar = write_dataset_dir(out, bundle, a.seed);
  for (const auto& d : sidecar.at("domains"))
    io.out << d.at("name").get<std::string>() << " (" << d.at("role").get<std::string>()
           << "): " << d.at("count").get<Index>() << " images\n";
  manifest.config = {{"dataset", a.dataset}, {"seed", a.seed}};
  if (a.dataset == "cmnist") manifest.config["rates"] = a.rates;
  if (a.dataset == "rmnist") manifest.config["angles"] = a.angles;
  manifest.seeds = {a.seed};
  manifest.add_output(out, out / "dataset.json");
  for (const auto& d : sidecar.at("domains")) manifest.add_output(out, out / d.at("file").get<std::string>());
  manifest.finished_at = utc_timestamp();
  manifest.write(out / "manifest.json");
  return kExitOk;
}

// --- train / ablate -----------------------------------------------------------

struct TrainOverrides {
  std::string config_path;
  std::string mode;
  std::optional<std::int64_t> iterations, eval_every, eval_limit, batch_size;
  std::optional<double> lr;
};

TrainConfig load_config(const TrainOverrides& o) {
  TrainConfig c;
  if (!o.config_path.empty()) c = TrainConfig::from_json(read_json_file(o.config_path));
  if (!o.mode.empty()) c.mode = parse_mode(o.mode);
  if (o.iterations) c.iterations = *o.iterations;
  if (o.eval_every) c.eval_every = *o.eval_every;
  if (o.eval_limit) c.eval_limit = *o.eval_limit;
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.lr) c.lr = *o.lr;
  c.validate();
  return c;
}

void add_train_overrides(CLI::App* sub, TrainOverrides& o) {
  sub->add_option("--config", o.config_path, "JSON training config")->check(CLI::ExistingFile);
  sub->add_option("--iterations", o.iterations, "Override the iteration budget");
  sub->add_option("--eval-every", o.eval_every, "Override the evaluation cadence");
  sub->add_option("--eval-limit", o.eval_limit, "Cap samples scored per train split and target domain");
  sub->add_option("--batch-size", o.batch_size, "Override the per-domain batch size");
  sub->add_option("--lr", o.lr, "Override the learning rate");
}

struct TrainArgs {
  TrainOverrides overrides;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool resume = false;
  std::int64_t stop_after = 0;
};

int cmd_train(const TrainArgs& a, Streams io, RunManifest manifest) {
  const TrainConfig config = load_config(a.overrides);
  const std::uint64_t seed = a.seed.value_or(config.seeds.front());
  const DatasetBundle bundle = read_dataset_dir(a.data);
  const TrainData data = train_data(bundle);
  const fs::path out(a.out);

  TrainOptions opts;
  opts.out_dir = out;
  opts.resume = a.resume;
  opts.stop_after = a.stop_after;
  opts.on_record = [&](const MetricsRecord& r) {
    io.out << "iter " << r.iteration << "  L_A " << fmt(r.l_a) << "  L_T " << fmt(r.l_t)
           << "  L_D " << fmt(r.l_d, "%.3g") << "  val " << fmt(r.val_acc_pooled) << "  target "
           << fmt(r.test_acc_pooled) << "  dom(Z_I) " << fmt(r.domain_acc_zi) << "  dom(Z_S) "
           << fmt(r.domain_acc_zs) << "\n";
    io.out.flush();
  };
  const TrainResult res = train(config, seed, data, opts);
  if (!res.completed) io.out << "stopped; continue with --resume\n";
  io.out << mode_name(config.mode) << " seed " << seed << ": best iteration " << res.best_iteration
         << ", val " << fmt(res.best_val_acc) << ", target " << fmt(res.best_test_acc) << "\n";

  manifest.config = config.to_json();
  manifest.seeds = {seed};
  record_dataset(manifest, bundle);
  for (const char* f : {"metrics.csv", "summary.json", "best.bin", "best.json"})
    if (fs::exists(out / f)) manifest.add_output(out, out / f);
  manifest.finished_at = utc_timestamp();
  manifest.write(out / "manifest.json");
  return kExitOk;
}

struct AblateArgs {
  TrainOverrides overrides;
  std::string data;
  std::string out;
  std::optional<int> seeds;
  std::vector<std::string> modes;
};

int cmd_ablate(const AblateArgs& a, Streams io, RunManifest manifest) {
  TrainConfig config = load_config(a.overrides);
  if (a.seeds) {
    if (*a.seeds < 1) throw ConfigError("--seeds must be >= 1");
    config.seeds.clear();
    for (int s = 0; s < *a.seeds; ++s) config.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  std::vector<AblationMode> modes;
  for (const auto& m : a.modes) modes.push_back(parse_mode(m));
  if (modes.empty()) modes.assign(kAblationModes.begin(), kAblationModes.end());
  config.validate();
  if (config.seeds.size() < 3) throw ConfigError("ablate needs at least 3 seeds");

  const DatasetBundle bundle = read_dataset_dir(a.data);
  const TrainData data = train_data(bundle);
  const fs::path out(a.out);
  const auto rows = run_ablation_suite(
      config, data, out, modes, [&](AblationMode m, std::uint64_t seed, const TrainResult& r) {
        io.out << mode_name(m) << " seed " << seed << ": target " << fmt(r.best_test_acc)
               << (r.records.empty() ? " (reused)" : "") << "\n";
        io.out.flush();
      });
  io.out << "\nmode                 target accuracy (%)\n";
  for (const auto& r : rows)
    io.out << std::left << std::setw(20) << mode_name(r.mode) << " " << fmt(100 * r.mean, "%.1f")
           << " +- " << fmt(100 * r.std, "%.1f") << "\n";

  manifest.config = config.to_json();
  manifest.seeds = config.seeds;
  record_dataset(manifest, bundle);
  manifest.add_output(out, out / "ablation.csv");
  for (AblationMode m : modes)
    for (std::uint64_t s : config.seeds) {
      const auto dir = out / mode_name(m) / ("seed_" + std::to_string(s));
      for (const char* f : {"metrics.csv", "summary.json"})
        if (fs::exists(dir / f)) manifest.add_output(out, dir / f);
    }
  manifest.finished_at = utc_timestamp();
  manifest.write(out / "manifest.json");
  return kExitOk;
}

// --- verify-theory ------------------------------------------------------------

struct VerifyArgs {
  std::string joint;
  std::string builtin;
  std::optional<int> z_alphabet;
  std::string out;
};

int cmd_verify(const VerifyArgs& a, Streams io, RunManifest manifest) {
  DiscreteJoint joint;
  if (!a.builtin.empty())
    joint = a.builtin == "xor" ? xor_joint() : xor_joint_constant_v();
  else
    joint = DiscreteJoint::from_json(read_json_file(a.joint));
  const int z = a.z_alphabet.value_or(joint.nx1);
  const Theorem1Report t = verify_theorem1(joint, z);
  const SpecificityReport s = check_specificity(joint, z);
  const MapInvariantReport inv = check_map_invariants(joint, z);
  const nlohmann::json report = {
      {"joint", joint.to_json()},
      {"z_alphabet", z},
      {"theorem1", t.to_json()},
      {"specificity", s.to_json()},
      {"map_invariants",
       {{"maps", inv.maps},
        {"max_i_z_y_given_x1", inv.max_i_z_y_given_x1},
        {"max_i_z_x2_given_x1", inv.max_i_z_x2_given_x1},
        {"max_dpi_excess", inv.max_dpi_excess},
        {"conditional_independence_exact",
         inv.max_i_z_y_given_x1 == 0.0 && inv.max_i_z_x2_given_x1 == 0.0},
        {"dpi_holds", inv.max_dpi_excess <= 1e-12}}}};
  write_json_file(a.out, report);
  io.out << "I(X1;Y) = " << fmt(t.lhs, "%.12g") << ", I(Z_I*;Y) + eps1 = " << fmt(t.rhs, "%.12g")
         << ", residual " << fmt(t.residual, "%.3g") << "\n"
         << "status: " << t.status << " (holds=" << (t.holds ? "true" : "false") << ")\n";
  (void)manifest;
  return kExitOk;
}

// --- export-features ----------------------------------------------------------

struct ExportArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "all";
};

/// Projection of the rows of `x` ([n, d]) onto the two leading principal
/// axes; each axis is signed so that its largest-magnitude component is positive.
Eigen::MatrixXd pca2(const Eigen::MatrixXd& x) {
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(std::max<Index>(1, x.rows() - 1));
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  Eigen::MatrixXd axes(x.cols(), 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(x.cols() - 1 - k);
    Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    axes.col(k) = v;
  }
  return centered * axes;
}

fs::path checkpoint_stem(const std::string& arg) {
  fs::path p(arg);
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  return p;
}

int cmd_export(const ExportArgs& a, Streams io, RunManifest manifest) {
  CheckpointInfo info;
  const DsdiModel<float> model = load_checkpoint<float>(checkpoint_stem(a.checkpoint), &info);
  const DatasetBundle bundle = read_dataset_dir(a.data);
  std::vector<const DomainDataset*> domains;
  for (const auto& d : bundle.domains) {
    const bool is_target = std::find(bundle.target_ids.begin(), bundle.target_ids.end(), d.domain_id) !=
                           bundle.target_ids.end();
    if (a.split == "all" || (a.split == "targets") == is_target) domains.push_back(&d);
  }
  Index n = 0;
  for (const auto* d : domains) {
    if (d->channels != info.dims.in_channels || d->n_classes != info.dims.n_classes)
      throw ShapeError("checkpoint expects " + std::to_string(info.dims.in_channels) + " channels and " +
                       std::to_string(info.dims.n_classes) + " classes; " + d->name + " does not match");
    n += d->size();
  }
  const Index fdim = info.dims.feature_dim;
  const bool has_i = info.dims.invariant_branch, has_s = info.dims.specific_branch;
  Eigen::MatrixXd zi(has_i ? n : 0, fdim), zs(has_s ? n : 0, fdim);
  std::vector<std::pair<const DomainDataset*, int>> rows;
  Index row = 0;
  for (const auto* d : domains) {
    const FeatureSet f = extract_features(model, d->images);
    if (has_i) zi.middleRows(row, d->size()) = f.z_i.matrix().cast<double>();
    if (has_s) zs.middleRows(row, d->size()) = f.z_s.matrix().cast<double>();
    for (int label : d->labels) rows.emplace_back(d, label);
    row += d->size();
  }
  const Eigen::MatrixXd pi = has_i && n >= 2 ? pca2(zi) : Eigen::MatrixXd();
  const Eigen::MatrixXd ps = has_s && n >= 2 ? pca2(zs) : Eigen::MatrixXd();

  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream csv(out, std::ios::trunc);
  if (!csv) throw InputError("cannot write " + out.string());
  csv << "domain,label";
  for (Index k = 0; k < fdim; ++k) csv << ",z_i_" << k;
  for (Index k = 0; k < fdim; ++k) csv << ",z_s_" << k;
  csv << ",pca_i_0,pca_i_1,pca_s_0,pca_s_1\n";
  char buf[32];
  auto cell = [&](bool present, double v) {
    csv << ',';
    if (!present) return;
    std::snprintf(buf, sizeof buf, "%.9g", v);
    csv << buf;
  };
  for (Index r = 0; r < n; ++r) {
    csv << rows[static_cast<std::size_t>(r)].first->name << ',' << rows[static_cast<std::size_t>(r)].second;
    for (Index k = 0; k < fdim; ++k) cell(has_i, has_i ? zi(r, k) : 0.0);
    for (Index k = 0; k < fdim; ++k) cell(has_s, has_s ? zs(r, k) : 0.0);
    for (int k = 0; k < 2; ++k) cell(pi.size() > 0, pi.size() > 0 ? pi(r, k) : 0.0);
    for (int k = 0; k < 2; ++k) cell(ps.size() > 0, ps.size() > 0 ? ps(r, k) : 0.0);
    csv << '\n';
  }
  csv.close();
  if (!csv) throw InputError("failed writing " + out.string());
  io.out << "wrote " << n << " rows to " << out.string() << "\n";
  (void)manifest;
  return kExitOk;
}

int configure_threads(std::ostream& err) {
  const char* env = std::getenv("DSDI_THREADS");
  if (env == nullptr || *env == '\0') return kExitOk;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) {
    err << "error: DSDI_THREADS must be a positive integer, got '" << env << "'\n";
    return kExitUsage;
  }
  Eigen::setNbThreads(static_cast<int>(n));
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain-specific and domain-invariant representation learning for domain generalization"};
  app.name("dsdi");
  app.require_subcommand(1);
  app.set_version_flag("--version", build_id());

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Build a multi-domain dataset from raw MNIST");
  gen_cmd->add_option("--dataset", gen.dataset, "bcm, cmnist or rmnist")
      ->required()
      ->check(CLI::IsMember({"bcm", "cmnist", "rmnist"}));
  gen_cmd->add_option("--mnist-dir", gen.mnist_dir, "Directory with the four MNIST IDX files")->required();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Generation seed");
  gen_cmd->add_option("--rates", gen.rates, "Colored-MNIST color-flip rates, one domain each");
  gen_cmd->add_option("--angles", gen.angles, "Rotated-MNIST angles in degrees, one domain each");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one model");
  add_train_overrides(train_cmd, tr.overrides);
  train_cmd->add_option("--mode", tr.overrides.mode, "Ablation mode (overrides the config)");
  train_cmd->add_option("--data", tr.data, "Dataset directory written by gen-data")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--seed", tr.seed, "Run seed (default: first config seed)");
  train_cmd->add_flag("--resume", tr.resume, "Continue from the state saved in --out");
  train_cmd->add_option("--stop-after", tr.stop_after, "Save state and stop at this iteration (0: run to the end)")
      ->check(CLI::NonNegativeNumber);

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run every ablation mode over several seeds");
  add_train_overrides(ablate_cmd, ab.overrides);
  ablate_cmd->add_option("--data", ab.data, "Dataset directory written by gen-data")->required();
  ablate_cmd->add_option("--out", ab.out, "Output directory")->required();
  ablate_cmd->add_option("--seeds", ab.seeds, "Number of seeds (0..N-1); default: config seeds");
  ablate_cmd->add_option("--modes", ab.modes, "Subset of modes (default: all nine)")->delimiter(',');

  VerifyArgs ver;
  auto* verify_cmd = app.add_subcommand("verify-theory", "Check the label-information identity by enumeration");
  auto* joint_opt = verify_cmd->add_option("--joint", ver.joint, "Joint table JSON")->check(CLI::ExistingFile);
  auto* builtin_opt = verify_cmd->add_option("--builtin", ver.builtin, "xor or xor-constant-v")
                          ->check(CLI::IsMember({"xor", "xor-constant-v"}));
  joint_opt->excludes(builtin_opt);
  verify_cmd->add_option("--z-alphabet", ver.z_alphabet, "Size of the representation alphabet (default |X1|)");
  verify_cmd->add_option("--out", ver.out, "Report JSON")->required();

  ExportArgs ex;
  auto* export_cmd = app.add_subcommand("export-features", "Write Z_I / Z_S features and a 2-D PCA projection");
  export_cmd->add_option("--checkpoint", ex.checkpoint, "Checkpoint stem, .bin or .json")->required();
  export_cmd->add_option("--data", ex.data, "Dataset directory")->required();
  export_cmd->add_option("--out", ex.out, "Output CSV")->required();
  export_cmd->add_option("--split", ex.split, "all, sources or targets")
      ->check(CLI::IsMember({"all", "sources", "targets"}));

  bool schema = false;
  auto* config_cmd = app.add_subcommand("config", "Print the default training config or its JSON schema");
  config_cmd->add_flag("--schema", schema, "Print the schema instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, r;
    const int code = app.exit(e, o, r);
    out << o.str();
    err << r.str();
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (verify_cmd->parsed() && ver.joint.empty() && ver.builtin.empty()) {
    err << "error: verify-theory needs --joint or --builtin\n";
    return kExitUsage;
  }
  if (const int rc = configure_threads(err); rc != kExitOk) return rc;

  Streams io{out, err};
  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen, io, start_manifest("gen-data", argc, argv));
    if (train_cmd->parsed()) return cmd_train(tr, io, start_manifest("train", argc, argv));
    if (ablate_cmd->parsed()) return cmd_ablate(ab, io, start_manifest("ablate", argc, argv));
    if (verify_cmd->parsed()) return cmd_verify(ver, io, start_manifest("verify-theory", argc, argv));
    if (export_cmd->parsed()) return cmd_export(ex, io, start_manifest("export-features", argc, argv));
    if (config_cmd->parsed()) {
      out << (schema ? train_config_schema() : TrainConfig().to_json()).dump(2) << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SizeError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace dsdi

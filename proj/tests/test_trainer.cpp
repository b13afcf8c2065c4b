// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <unistd.h>

#include "dsdi/errors.hpp"
#include "dsdi/random.hpp"
#include "dsdi/trainer.hpp"

using namespace dsdi;
namespace fs = std::filesystem;

namespace {

// Class c lights a 2x2 patch at a class-specific position; the domain sets the
// background color. Pixel noise is uniform in [0, 0.1).
DomainDataset synth_domain(int id, Index n, int classes, std::array<float, 3> background,
                           std::uint64_t seed, Index side = 8) {
  DomainDataset d;
  d.domain_id = id;
  d.name = "synth_" + std::to_string(id);
  d.channels = 3;
  d.height = d.width = side;
  d.n_classes = classes;
  d.images = Tensor<float>({n, 3, side, side});
  Rng rng(seed);
  for (Index i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % classes);
    d.labels.push_back(c);
    d.digits.push_back(c);
    const Index pr = 2 * (c / 4), pc = 2 * (c % 4);
    for (Index ch = 0; ch < 3; ++ch)
      for (Index y = 0; y < side; ++y)
        for (Index x = 0; x < side; ++x) {
          const bool on = y >= pr && y < pr + 2 && x >= pc && x < pc + 2;
          const double v = (on ? 1.0 : background[static_cast<std::size_t>(ch)] * 0.5) + 0.1 * uniform01(rng);
          d.images[((i * 3 + ch) * side + y) * side + x] = static_cast<float>(v);
        }
  }
  return d;
}

struct SynthWorld {
  std::vector<DomainDataset> domains;
  TrainData data;
  explicit SynthWorld(Index per_domain = 40, int classes = 4) {
    const std::array<std::array<float, 3>, 4> bg = {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}}};
    for (int d = 0; d < 4; ++d)
      domains.push_back(synth_domain(d, per_domain, classes, bg[static_cast<std::size_t>(d)], 100 + d));
    for (int d = 0; d < 3; ++d) data.sources.push_back(&domains[static_cast<std::size_t>(d)]);
    data.targets.push_back(&domains[3]);
  }
};

TrainConfig tiny_config(AblationMode mode) {
  TrainConfig c;
  c.mode = mode;
  c.batch_size = 4;
  c.iterations = 6;
  c.eval_every = 2;
  c.loss_window = 3;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dsdi_trainer_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

bool same_values(const DsdiModel<float>& a, const DsdiModel<float>& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->value.shape() != pb[i]->value.shape() ||
        std::memcmp(pa[i]->value.data(), pb[i]->value.data(),
                    static_cast<std::size_t>(pa[i]->value.size()) * sizeof(float)) != 0)
      return false;
  return true;
}

}  // namespace

TEST_CASE("adam_update") {
  SUBCASE("first step moves each coordinate by about lr in the direction of -sign(g)") {
    Parameter<double> p("p", Tensor<double>({4}, {0.5, -1.0, 2.0, 0.0}));
    const Tensor<double> g({4}, {3.0, -0.01, 1e-3, -250.0});
    const std::vector<Parameter<double>*> params{&p};
    const std::vector<const Tensor<double>*> grads{&g};
    AdamState<double> st;
    const Tensor<double> before = p.value;
    adam_update<double>(params, grads, st, 0.01);
    for (Index i = 0; i < 4; ++i) {
      const double delta = p.value[i] - before[i];
      CHECK(delta == doctest::Approx(-0.01 * (g[i] > 0 ? 1.0 : -1.0)).epsilon(1e-4));
    }
    CHECK(st.step == 1);
  }

  SUBCASE("zero gradient leaves parameters unchanged") {
    Parameter<double> p("p", Tensor<double>({3}, {1.0, 2.0, 3.0}));
    const std::vector<Parameter<double>*> params{&p};
    AdamState<double> st;
    adam_update<double>(params, st, 0.1);
    CHECK(p.value[0] == 1.0);
    CHECK(p.value[1] == 2.0);
    CHECK(p.value[2] == 3.0);
  }

  SUBCASE("100 steps on x^2 from x = 1 with lr 0.1") {
    Parameter<double> x("x", Tensor<double>({1}, {1.0}));
    const std::vector<Parameter<double>*> params{&x};
    AdamState<double> st;
    for (int k = 0; k < 100; ++k) {
      x.grad[0] = 2.0 * x.value[0];
      adam_update<double>(params, st, 0.1);
    }
    CHECK(std::abs(x.value[0]) < 0.05);
  }

  SUBCASE("non-finite gradients raise before any change") {
    Parameter<float> a("a", Tensor<float>({2}, {1.f, 2.f}));
    Parameter<float> b("b", Tensor<float>({1}, {3.f}));
    b.grad[0] = std::numeric_limits<float>::quiet_NaN();
    a.grad[0] = 1.f;
    const std::vector<Parameter<float>*> params{&a, &b};
    AdamState<float> st;
    CHECK_THROWS_AS(adam_update<float>(params, st, 0.1), DivergenceError);
    CHECK(a.value[0] == 1.f);
    CHECK(st.step == 0);
  }

  SUBCASE("shape mismatches are rejected") {
    Parameter<double> p("p", Tensor<double>({2}));
    const Tensor<double> g({3});
    const std::vector<Parameter<double>*> params{&p};
    const std::vector<const Tensor<double>*> grads{&g};
    AdamState<double> st;
    CHECK_THROWS_AS(adam_update<double>(params, grads, st, 0.1), ShapeError);
    Parameter<double> q("q", Tensor<double>({2}));
    const std::vector<Parameter<double>*> two{&p, &q};
    adam_update<double>(params, st, 0.1);
    CHECK_THROWS_AS(adam_update<double>(two, st, 0.1), ShapeError);
  }
}

TEST_CASE("modes") {
  for (AblationMode m : kAblationModes) CHECK(parse_mode(mode_name(m)) == m);
  CHECK(parse_mode("ERM_REF") == AblationMode::ERM_REF);
  CHECK_THROWS_AS(parse_mode("DSDI"), ConfigError);

  DomainDataset like;
  like.channels = 3;
  like.n_classes = 10;

  SUBCASE("DI: no specific branch, L_ZS and L_D off, no meta") {
    const ModeSpec s = mode_spec(AblationMode::DI);
    CHECK_FALSE(s.specific_branch);
    CHECK_FALSE(s.meta.has_value());
    TrainConfig c;
    c.mode = AblationMode::DI;
    const LossWeights w = effective_weights(c);
    CHECK(w.lambda_zi == 1.0);
    CHECK(w.lambda_zs == 0.0);
    CHECK(w.lambda_d == 0.0);
    const ModelDims d = model_dims_for(AblationMode::DI, like, 3);
    CHECK(d.classifier_inputs() == 128);
    CHECK(parameter_count(d) == 576 * 3 + 369984 + 98816 + 257 * 3 + 129 * 10);
  }

  SUBCASE("DSDI_NO_LD: full model with lambda_D = 0 and meta on the specific branch") {
    TrainConfig c;
    c.mode = AblationMode::DSDI_NO_LD;
    const LossWeights w = effective_weights(c);
    CHECK(w.lambda_d == 0.0);
    CHECK(w.lambda_zi == 1.0);
    CHECK(w.lambda_zs == 1.0);
    CHECK(parameter_count(model_dims_for(c.mode, like, 3)) == 945168);
    CHECK(mode_spec(c.mode).meta == MetaTarget::Specific);
  }

  SUBCASE("meta targets") {
    CHECK(mode_spec(AblationMode::DSDI_META_DS).meta == MetaTarget::Specific);
    CHECK(mode_spec(AblationMode::DSDI_META_DI).meta == MetaTarget::Invariant);
    CHECK(mode_spec(AblationMode::DSDI_META_BOTH).meta == MetaTarget::Both);
    CHECK(mode_spec(AblationMode::DS_META).meta == MetaTarget::Specific);
    CHECK(mode_spec(AblationMode::DI_META).meta == MetaTarget::Invariant);
    CHECK_FALSE(mode_spec(AblationMode::DSDI_NO_META).meta.has_value());
  }

  SUBCASE("ERM_REF: one encoder and a linear head") {
    const ModelDims d = model_dims_for(AblationMode::ERM_REF, like, 2);
    CHECK_FALSE(d.domain_heads);
    CHECK(parameter_count(d) == 576 * 3 + 369984 + 129 * 10);
    TrainConfig c;
    c.mode = AblationMode::ERM_REF;
    const LossWeights w = effective_weights(c);
    CHECK(w.lambda_zi + w.lambda_zs + w.lambda_d == 0.0);
  }
}

TEST_CASE("TrainConfig") {
  const TrainConfig c;
  CHECK(c.lr == 1e-3);
  CHECK(c.batch_size == 64);
  CHECK(c.iterations == 5000);
  CHECK(c.weights.lambda_zi == 1.0);
  CHECK(c.weights.lambda_zs == 1.0);
  CHECK(c.weights.lambda_d == 1.0);
  CHECK(c.effective_inner_lr() == c.lr);
  CHECK(c.eval_every == 100);

  SUBCASE("JSON round trip") {
    TrainConfig d = tiny_config(AblationMode::DS_META);
    d.inner_lr = 0.25;
    d.seeds = {4, 5, 6};
    d.weights.lambda_d = 0.5;
    const TrainConfig e = TrainConfig::from_json(d.to_json());
    CHECK(e.to_json() == d.to_json());
    CHECK(e.inner_lr == 0.25);
  }

  SUBCASE("every violation is reported at once") {
    nlohmann::json j = TrainConfig().to_json();
    j["batch_size"] = 1;
    j["lr"] = "fast";
    j["colour"] = 3;
    j["mode"] = "NOPE";
    j["weights"]["lambda_d"] = -1.0;
    try {
      (void)TrainConfig::from_json(j);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("batch_size") != std::string::npos);
      CHECK(msg.find("lr: expected a number") != std::string::npos);
      CHECK(msg.find("unknown key 'colour'") != std::string::npos);
      CHECK(msg.find("unknown mode 'NOPE'") != std::string::npos);
      CHECK(msg.find("non-negative") != std::string::npos);
    }
  }

  SUBCASE("the schema covers every serialized field") {
    const auto schema = train_config_schema();
    const auto fields = TrainConfig().to_json();
    for (const auto& [key, value] : fields.items())
      CHECK(schema["properties"].contains(key));
    CHECK(schema["additionalProperties"] == false);
  }
}

TEST_CASE("evaluate") {
  SynthWorld world(200, 10);
  const ModelDims dims = model_dims_for(AblationMode::DSDI_META_DS, world.domains[0], 3);
  const DsdiModel<float> model(dims, 7);

  SUBCASE("an untrained model scores near chance on balanced data") {
    // Images carry no class information, so any fixed predictor is at chance.
    DomainDataset noise = synth_domain(9, 1000, 10, {0, 0, 0}, 11);
    Rng rng(12);
    for (Index i = 0; i < noise.images.size(); ++i) noise.images[i] = static_cast<float>(uniform01(rng));
    const double acc = evaluate(model, noise);
    CHECK(acc >= 0.05);
    CHECK(acc <= 0.15);
  }

  SUBCASE("invariant to the order of the dataset and the chunk size") {
    DomainDataset shuffled = world.domains[1];
    std::vector<Index> perm(static_cast<std::size_t>(shuffled.size()));
    std::iota(perm.begin(), perm.end(), Index{0});
    Rng rng(3);
    shuffle_in_place(perm, rng);
    const Index per = shuffled.image_size();
    for (std::size_t i = 0; i < perm.size(); ++i) {
      const auto src = static_cast<std::size_t>(perm[i]);
      std::memcpy(shuffled.images.data() + static_cast<Index>(i) * per,
                  world.domains[1].images.data() + static_cast<Index>(src) * per,
                  static_cast<std::size_t>(per) * sizeof(float));
      shuffled.labels[i] = world.domains[1].labels[src];
    }
    const double a = evaluate(model, world.domains[1]);
    CHECK(evaluate(model, shuffled) == a);
    CHECK(evaluate(model, world.domains[1], {}, 7) == a);
  }

  SUBCASE("index subsets and incompatible datasets") {
    const std::vector<Index> first{0, 1, 2, 3};
    const double a = evaluate(model, world.domains[0], first);
    CHECK(a * 4 == doctest::Approx(std::round(a * 4)));
    DomainDataset gray = world.domains[0];
    gray.channels = 1;
    CHECK_THROWS_AS(evaluate(model, gray), ShapeError);
  }
}

TEST_CASE("train: records, determinism, resume") {
  SynthWorld world;
  const TrainConfig cfg = tiny_config(AblationMode::DSDI_META_DS);

  SUBCASE("one record per evaluation with accuracies in [0, 1]") {
    TrainConfig c = cfg;
    c.iterations = 7;
    int callbacks = 0;
    TrainOptions opts;
    opts.on_record = [&](const MetricsRecord&) { ++callbacks; };
    const auto res = train(c, 0, world.data, opts);
    REQUIRE(res.records.size() == 4);  // 2, 4, 6 and the final 7
    CHECK(callbacks == 4);
    CHECK(res.records.back().iteration == 7);
    CHECK(res.completed);
    for (const auto& r : res.records) {
      for (double a : r.train_acc) CHECK((a >= 0 && a <= 1));
      for (double a : r.val_acc) CHECK((a >= 0 && a <= 1));
      CHECK((r.test_acc_pooled >= 0 && r.test_acc_pooled <= 1));
      CHECK((r.domain_acc_zi >= 0 && r.domain_acc_zi <= 1));
      CHECK((r.domain_acc_zs >= 0 && r.domain_acc_zs <= 1));
      CHECK(std::isfinite(r.meta_train));
      CHECK(std::isfinite(r.meta_test));
      CHECK(std::isfinite(r.cov_is));
      CHECK(r.train_acc.size() == 3);
      CHECK(r.test_acc.size() == 1);
    }
    // The best checkpoint is the first strict maximum of validation accuracy.
    double best = -1;
    std::int64_t at = 0;
    for (const auto& r : res.records)
      if (r.val_acc_pooled > best) {
        best = r.val_acc_pooled;
        at = r.iteration;
      }
    CHECK(res.best_iteration == at);
    CHECK(res.best_val_acc == best);
  }

  SUBCASE("identical config and seed give byte-identical metrics") {
    TempDir a("det_a"), b("det_b");
    TrainOptions oa, ob;
    oa.out_dir = a.path;
    ob.out_dir = b.path;
    train(cfg, 3, world.data, oa);
    train(cfg, 3, world.data, ob);
    const std::string ma = slurp(a.path / "metrics.csv");
    CHECK(!ma.empty());
    CHECK(ma == slurp(b.path / "metrics.csv"));
    CHECK(slurp(a.path / "best.bin") == slurp(b.path / "best.bin"));
    const auto rows = read_metrics_csv(a.path / "metrics.csv");
    CHECK(rows.size() == 3);
    CHECK(rows[0][0].first == "iteration");
    CHECK(fs::exists(a.path / "summary.json"));
  }

  SUBCASE("a different seed gives a different stream") {
    const auto r0 = train(cfg, 0, world.data);
    const auto r1 = train(cfg, 1, world.data);
    CHECK(r0.records.back().l_a != r1.records.back().l_a);
  }

  SUBCASE("resuming reproduces the uninterrupted run") {
    TempDir full("resume_full"), part("resume_part");
    TrainOptions of;
    of.out_dir = full.path;
    const auto ref = train(cfg, 5, world.data, of);

    TrainOptions op;
    op.out_dir = part.path;
    op.stop_after = 3;  // between evaluations
    const auto stopped = train(cfg, 5, world.data, op);
    CHECK_FALSE(stopped.completed);
    op.stop_after = 0;
    op.resume = true;
    const auto resumed = train(cfg, 5, world.data, op);
    CHECK(resumed.completed);
    CHECK(slurp(full.path / "metrics.csv") == slurp(part.path / "metrics.csv"));
    CHECK(same_values(ref.best, resumed.best));

    TrainConfig other = cfg;
    other.lr = 2e-3;
    CHECK_THROWS_AS(train(other, 5, world.data, op), ConfigError);
  }

  SUBCASE("meta disabled by config reproduces DSDI_NO_META exactly") {
    TrainConfig off = cfg;
    off.meta_enabled = false;
    const auto a = train(off, 9, world.data);
    const auto b = train(tiny_config(AblationMode::DSDI_NO_META), 9, world.data);
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i)
      CHECK(metrics_csv_row(a.records[i]) == metrics_csv_row(b.records[i]));
    CHECK(same_values(a.best, b.best));
    CHECK(std::isnan(a.records.back().meta_train));
  }

  SUBCASE("single-branch modes leave the absent columns empty") {
    const auto res = train(tiny_config(AblationMode::ERM_REF), 0, world.data);
    const auto& r = res.records.back();
    CHECK(std::isnan(r.l_zi));
    CHECK(std::isnan(r.l_zs));
    CHECK(std::isnan(r.l_d));
    CHECK(std::isnan(r.domain_acc_zi));
    CHECK(std::isnan(r.cov_is));
    CHECK(std::isfinite(r.cov_ii));
    CHECK(metrics_csv_row(r).find(",,") != std::string::npos);
  }
}

TEST_CASE("train: errors") {
  SynthWorld world;
  SUBCASE("meta modes need two source domains") {
    TrainData one{{world.data.sources[0]}, {}};
    CHECK_THROWS_AS(train(tiny_config(AblationMode::DSDI_META_DS), 0, one), ConfigError);
    CHECK_NOTHROW(train(tiny_config(AblationMode::DSDI_NO_META), 0, one));
  }
  SUBCASE("mismatched layouts") {
    DomainDataset small = synth_domain(5, 20, 4, {1, 1, 1}, 1, 6);
    TrainData mixed{{world.data.sources[0], &small}, {}};
    CHECK_THROWS_AS(train(tiny_config(AblationMode::DSDI_NO_META), 0, mixed), ConfigError);
  }
  SUBCASE("a non-finite input aborts with the iteration") {
    DomainDataset bad = world.domains[0];
    bad.images.array() = std::numeric_limits<float>::quiet_NaN();
    TrainData data{{&bad, world.data.sources[1], world.data.sources[2]}, {}};
    try {
      train(tiny_config(AblationMode::DSDI_NO_META), 0, data);
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(e.iteration() == 1);
    }
  }
}

TEST_CASE("training fits the source domains of an easy task") {
  SynthWorld world(60, 4);
  TrainConfig c = tiny_config(AblationMode::DSDI_META_DS);
  c.iterations = 40;
  c.eval_every = 20;
  c.batch_size = 8;
  c.lr = 3e-3;
  const auto res = train(c, 0, world.data);
  const auto& last = res.records.back();
  double train_mean = 0;
  for (double a : last.train_acc) train_mean += a / 3.0;
  CHECK(train_mean > 0.9);
  CHECK(train_mean >= last.test_acc_pooled);
  // Source domains differ only in background color, which R reads easily.
  CHECK(last.domain_acc_zs > 0.9);
}

TEST_CASE("ablation suite") {
  SynthWorld world(20, 4);
  TempDir dir("ablate");
  TrainConfig base = tiny_config(AblationMode::DSDI_META_DS);
  base.iterations = 2;
  base.eval_every = 1;
  base.batch_size = 2;
  int trained = 0;
  const auto rows = run_ablation_suite(base, world.data, dir.path, kAblationModes,
                                       [&](AblationMode, std::uint64_t, const TrainResult&) { ++trained; });
  CHECK(trained == 27);
  REQUIRE(rows.size() == 9);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].mode == kAblationModes[i]);
    CHECK(rows[i].target_acc.size() == 3);
    CHECK((rows[i].mean >= 0 && rows[i].mean <= 1));
    CHECK(rows[i].std >= 0);
  }
  std::ifstream csv(dir.path / "ablation.csv");
  std::vector<std::string> lines;
  for (std::string line; std::getline(csv, line);) lines.push_back(line);
  REQUIRE(lines.size() == 10);
  CHECK(lines[0].rfind("mode,mean_acc_pct", 0) == 0);
  CHECK(lines[9].rfind("DSDI_META_DS,", 0) == 0);

  const auto collected = collect_ablation_results(dir.path);
  REQUIRE(collected.size() == 9);
  for (std::size_t i = 0; i < 9; ++i) CHECK(collected[i].target_acc == rows[i].target_acc);

  // Finished runs are reused.
  trained = 0;
  std::vector<bool> reused;
  run_ablation_suite(base, world.data, dir.path, kAblationModes,
                     [&](AblationMode, std::uint64_t, const TrainResult& r) {
                       reused.push_back(r.records.empty());
                       ++trained;
                     });
  CHECK(trained == 27);
  CHECK(std::all_of(reused.begin(), reused.end(), [](bool b) { return b; }));

  base.seeds = {0, 1};
  CHECK_THROWS_AS(run_ablation_suite(base, world.data, dir.path), ConfigError);
}

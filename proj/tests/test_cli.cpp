// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dsdi/cli.hpp"
#include "dsdi/hash.hpp"
#include "dsdi/infotheory.hpp"
#include "dsdi/trainer.hpp"
#include "synthetic_mnist.hpp"

using namespace dsdi;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dsdi");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dsdi_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// 90 synthetic digits: three 30-image rotated domains.
const fs::path& mnist_dir() {
  static const fs::path dir = [] {
    const fs::path d = scratch("mnist");
    testing::write_mnist_dir(d, MnistSet{testing::synthetic_mnist(60, 1), testing::synthetic_mnist(30, 2)});
    return d;
  }();
  return dir;
}

const fs::path& rmnist_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "dsdi_test_cli_rmnist";
    fs::remove_all(d);
    const CliRun r = cli({"gen-data", "--dataset", "rmnist", "--mnist-dir", mnist_dir().string(), "--out",
                          d.string(), "--seed", "3", "--angles", "0", "30", "60"});
    REQUIRE(r.code == kExitOk);
    return d;
  }();
  return dir;
}

std::vector<std::string> tiny_train_flags() {
  return {"--iterations", "2", "--eval-every", "1", "--batch-size", "2", "--eval-limit", "10"};
}

}  // namespace

TEST_CASE("exit codes for usage errors") {
  CHECK(cli({"--help"}).code == kExitOk);
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"train", "--data", "x"}).code == kExitUsage);  // --out missing
  CHECK(cli({"gen-data", "--dataset", "svhn", "--mnist-dir", "x", "--out", "y"}).code == kExitUsage);
  CHECK(cli({"verify-theory", "--out", "x.json"}).code == kExitUsage);
  CHECK(cli({"verify-theory", "--builtin", "parity", "--out", "x.json"}).code == kExitUsage);

  const fs::path dir = scratch("usage");
  const CliRun missing = cli({"gen-data", "--dataset", "bcm", "--mnist-dir", (dir / "none").string(), "--out",
                              (dir / "out").string()});
  CHECK(missing.code == kExitUsage);
  CHECK(missing.err.find("cannot open") != std::string::npos);

  ::setenv("DSDI_THREADS", "many", 1);
  CHECK(cli({"config"}).code == kExitUsage);
  ::setenv("DSDI_THREADS", "1", 1);
  CHECK(cli({"config"}).code == kExitOk);
  ::unsetenv("DSDI_THREADS");
}

TEST_CASE("config command matches the shipped config files") {
  const CliRun def = cli({"config"});
  REQUIRE(def.code == kExitOk);
  CHECK(nlohmann::json::parse(def.out) == TrainConfig().to_json());
  CHECK(nlohmann::json::parse(def.out) == read_json(fs::path(DSDI_SOURCE_DIR) / "configs/default.json"));
  const CliRun schema = cli({"config", "--schema"});
  REQUIRE(schema.code == kExitOk);
  CHECK(nlohmann::json::parse(schema.out) == read_json(fs::path(DSDI_SOURCE_DIR) / "configs/schema.json"));
  CHECK(TrainConfig::from_json(read_json(fs::path(DSDI_SOURCE_DIR) / "configs/default.json")).to_json() ==
        TrainConfig().to_json());
}

TEST_CASE("gen-data is reproducible from the seed") {
  const fs::path dir = scratch("gen");
  auto gen = [&](const std::string& name, const std::string& seed) {
    const CliRun r = cli({"gen-data", "--dataset", "cmnist", "--mnist-dir", mnist_dir().string(), "--out",
                          (dir / name).string(), "--seed", seed});
    REQUIRE(r.code == kExitOk);
    CHECK(r.out.find("cmnist_noise_0.9 (target): 30 images") != std::string::npos);
    return read_json(dir / name / "manifest.json");
  };
  const auto a = gen("a", "5"), b = gen("b", "5"), c = gen("c", "6");
  CHECK(a.at("outputs") == b.at("outputs"));
  CHECK(a.at("outputs") != c.at("outputs"));
  CHECK(a.at("command") == "gen-data");
  CHECK(a.at("seeds") == nlohmann::json::array({5}));
  CHECK(a.at("config").at("rates") == nlohmann::json::array({0.1, 0.2, 0.9}));
  for (const auto& [file, hash] : a.at("outputs").items())
    CHECK(sha256_hex(slurp(dir / "a" / file)) == hash.get<std::string>());
}

TEST_CASE("verify-theory reports") {
  const fs::path dir = scratch("verify");
  SUBCASE("xor") {
    const CliRun r = cli({"verify-theory", "--builtin", "xor", "--out", (dir / "xor.json").string()});
    REQUIRE(r.code == kExitOk);
    CHECK(r.out.find("residual 0") != std::string::npos);
    const auto j = read_json(dir / "xor.json");
    CHECK(j.at("theorem1").at("holds") == true);
    CHECK(j.at("theorem1").at("residual").get<double>() == 0.0);
    CHECK(j.at("theorem1").at("epsilon1").get<double>() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(j.at("map_invariants").at("conditional_independence_exact") == true);
    CHECK(j.at("map_invariants").at("dpi_holds") == true);
    CHECK(j.at("specificity").is_object());
  }
  SUBCASE("joint file") {
    std::ofstream(dir / "joint.json") << xor_joint_constant_v().to_json().dump();
    const CliRun r = cli({"verify-theory", "--joint", (dir / "joint.json").string(), "--z-alphabet", "2",
                          "--out", (dir / "r.json").string()});
    REQUIRE(r.code == kExitOk);
    CHECK(read_json(dir / "r.json").at("theorem1").at("holds") == true);
    CHECK(read_json(dir / "r.json").at("z_alphabet") == 2);
  }
  SUBCASE("malformed joint") {
    std::ofstream(dir / "bad.json") << R"({"alphabets": {"x1": 2, "x2": 1, "y": 1}, "probs": [0.7, 0.7]})";
    CHECK(cli({"verify-theory", "--joint", (dir / "bad.json").string(), "--out", (dir / "o.json").string()})
              .code == kExitUsage);
    std::ofstream(dir / "trunc.json") << "{\"alphabets\":";
    CHECK(cli({"verify-theory", "--joint", (dir / "trunc.json").string(), "--out", (dir / "o.json").string()})
              .code == kExitUsage);
  }
  SUBCASE("oversized search") {
    CHECK(cli({"verify-theory", "--builtin", "xor", "--z-alphabet", "100", "--out", (dir / "o.json").string()})
              .code == kExitUsage);
  }
}

TEST_CASE("train rejects bad configs before touching the output directory") {
  const fs::path dir = scratch("badcfg");
  std::ofstream(dir / "cfg.json") << R"({"lr": -1, "batch_sise": 8})";
  const CliRun r = cli({"train", "--config", (dir / "cfg.json").string(), "--data", rmnist_dir().string(),
                        "--out", (dir / "run").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("batch_sise") != std::string::npos);
  CHECK(r.err.find("lr") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "run"));
  CHECK(cli({"train", "--mode", "DSDI_FAST", "--data", rmnist_dir().string(), "--out", (dir / "run").string()})
            .code == kExitUsage);
  CHECK(cli({"train", "--data", (dir / "missing").string(), "--out", (dir / "run").string()}).code ==
        kExitUsage);
}

TEST_CASE("train writes a manifest and export-features reads the checkpoint") {
  const fs::path dir = scratch("train");
  std::vector<std::string> args = {"train", "--data", rmnist_dir().string(), "--out", (dir / "run").string(),
                                   "--seed", "4"};
  for (const auto& f : tiny_train_flags()) args.push_back(f);
  const CliRun r = cli(args);
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("iter 2") != std::string::npos);

  const auto m = read_json(dir / "run/manifest.json");
  CHECK(m.at("command") == "train");
  CHECK(m.at("seeds") == nlohmann::json::array({4}));
  CHECK(m.at("config").at("iterations") == 2);
  CHECK(m.at("config").at("mode") == "DSDI_META_DS");
  const auto sidecar = read_json(rmnist_dir() / "dataset.json");
  for (const auto& d : sidecar.at("domains"))
    CHECK(m.at("dataset_hashes").at(d.at("file").get<std::string>()) == d.at("sha256"));
  for (const char* f : {"metrics.csv", "summary.json", "best.bin", "best.json"}) {
    REQUIRE(m.at("outputs").contains(f));
    CHECK(sha256_hex(slurp(dir / "run" / f)) == m.at("outputs").at(f).get<std::string>());
  }

  SUBCASE("all domains") {
    const CliRun e = cli({"export-features", "--checkpoint", (dir / "run/best.json").string(), "--data",
                          rmnist_dir().string(), "--out", (dir / "feat.csv").string()});
    REQUIRE(e.code == kExitOk);
    std::ifstream in(dir / "feat.csv");
    std::string header, line;
    std::getline(in, header);
    CHECK(header.rfind("domain,label,z_i_0,", 0) == 0);
    CHECK(header.find(",z_i_127,z_s_0,") != std::string::npos);
    CHECK(header.substr(header.size() - 31) == "pca_i_0,pca_i_1,pca_s_0,pca_s_1");
    int rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      CHECK(std::count(line.begin(), line.end(), ',') == 2 + 256 + 4 - 1);
      CHECK(line.find(",,") == std::string::npos);
    }
    CHECK(rows == 90);
  }
  SUBCASE("targets only") {
    REQUIRE(cli({"export-features", "--checkpoint", (dir / "run/best").string(), "--data", rmnist_dir().string(),
                 "--out", (dir / "t.csv").string(), "--split", "targets"})
                .code == kExitOk);
    const std::string csv = slurp(dir / "t.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 31);
    CHECK(csv.find("rmnist_0") == std::string::npos);
  }
  SUBCASE("missing checkpoint") {
    CHECK(cli({"export-features", "--checkpoint", (dir / "nope").string(), "--data", rmnist_dir().string(),
               "--out", (dir / "x.csv").string()})
              .code == kExitUsage);
  }
}

TEST_CASE("stop and resume matches an uninterrupted run") {
  const fs::path dir = scratch("resume");
  auto run = [&](const std::string& out, const std::string& iters, std::vector<std::string> extra) {
    std::vector<std::string> args = {"train", "--data", rmnist_dir().string(), "--out", (dir / out).string(),
                                     "--mode", "ERM_REF", "--batch-size", "2", "--eval-every", "1",
                                     "--eval-limit", "10", "--iterations", iters};
    args.insert(args.end(), extra.begin(), extra.end());
    return cli(args);
  };
  REQUIRE(run("full", "3", {}).code == kExitOk);
  const CliRun first = run("split", "3", {"--stop-after", "1"});
  REQUIRE(first.code == kExitOk);
  CHECK(first.out.find("stopped") != std::string::npos);
  CHECK(read_json(dir / "split/summary.json").at("completed") == false);
  CHECK(run("split", "4", {"--resume"}).code == kExitUsage);  // config changed
  REQUIRE(run("split", "3", {"--resume"}).code == kExitOk);
  for (const char* f : {"metrics.csv", "best.bin"}) CHECK(slurp(dir / "full" / f) == slurp(dir / "split" / f));
}

TEST_CASE("ablate runs a reduced suite") {
  const fs::path dir = scratch("ablate");
  const std::vector<std::string> base = {"ablate", "--data", rmnist_dir().string(), "--out",
                                         (dir / "abl").string(), "--modes", "DI,ERM_REF", "--iterations",
                                         "1", "--eval-every", "1", "--batch-size", "2", "--eval-limit", "10"};
  auto with = [&](std::vector<std::string> extra) {
    auto a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    return cli(a);
  };
  CHECK(with({"--seeds", "2"}).code == kExitUsage);
  const CliRun r = with({"--seeds", "3"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("ERM_REF") != std::string::npos);
  const std::string csv = slurp(dir / "abl/ablation.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(fs::exists(dir / "abl/DI/seed_2/summary.json"));
  const auto m = read_json(dir / "abl/manifest.json");
  CHECK(m.at("seeds") == nlohmann::json::array({0, 1, 2}));
  CHECK(m.at("outputs").contains("ablation.csv"));
  // A second invocation reuses every completed run.
  const CliRun again = with({"--seeds", "3"});
  REQUIRE(again.code == kExitOk);
  CHECK(again.out.find("(reused)") != std::string::npos);
  CHECK(slurp(dir / "abl/ablation.csv") == csv);
}

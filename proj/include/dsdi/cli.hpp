// SPDX-License-Identifier: Apache-2.0
//
// The `dsdi` command line: gen-data, train, ablate, verify-theory,
// export-features and config.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage, config or input error.
#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

namespace dsdi {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Everything needed to re-run a command bit-identically, plus content
/// hashes of what it wrote.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> dataset_hashes;  // domain file -> sha256
  std::string build_id;
  std::vector<std::uint64_t> seeds;
  int threads = 1;
  std::string started_at, finished_at;  // UTC, ISO 8601
  std::map<std::string, std::string> outputs;  // relative path -> sha256

  nlohmann::json to_json() const;
  void add_output(const std::filesystem::path& root, const std::filesystem::path& file);
  void write(const std::filesystem::path& path) const;
};

std::string build_id();
std::string utc_timestamp();

/// Runs one command line; never throws. Diagnostics go to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dsdi

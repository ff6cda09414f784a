#pragma once

#include <map>
#include <string>
#include <vector>

#include "spanlab/config.hpp"

namespace spanlab {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kSeedEnvVar = "SPANLAB_SEED";

enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 1,
  kExitRuntime = 2,
  kExitCheckFailed = 3,
};

/// Provenance record written next to every command's outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  Json config;
  std::uint64_t seed = 0;
  /// Role -> path of every artifact the command wrote.
  std::map<std::string, std::string> artifacts;
  /// Stage -> seconds.
  std::map<std::string, double> timings;
  std::string started_at;
  std::string finished_at;

  Json to_json() const;
};

/// Writes `dir/manifest.json` atomically.
void write_run_manifest(const std::string& dir, const RunManifest& manifest);

/// Seed from SPANLAB_SEED, or `fallback` when unset. Throws ValidationError on garbage.
std::uint64_t default_seed(std::uint64_t fallback);

/// Entry point of the spanlab tool; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace spanlab

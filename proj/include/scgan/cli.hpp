#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace scgan::cli {

enum ExitCode { kOk = 0, kUsage = 1, kRuntime = 2 };

struct RunMetadata {
  std::vector<std::string> command_line;
  std::string subcommand;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string code_version;
  std::string started_at;   // UTC, ISO 8601
  std::string finished_at;
};

nlohmann::json metadata_to_json(const RunMetadata& meta);
// Writes <dir>/run_metadata.json, replacing any previous record.
void write_run_metadata(const std::filesystem::path& dir, const RunMetadata& meta);

std::string code_version();

// Entry point shared by the executable and the tests. Diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace scgan::cli

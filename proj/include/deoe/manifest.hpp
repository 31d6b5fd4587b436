#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deoe/digest.hpp"
#include "deoe/version.hpp"

namespace deoe {

// Written before a subcommand starts real work: the resolved configuration,
// seed, code version, digests of every input file, and the planned output
// paths. Enough to re-run the command exactly.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::string version = kVersion;
  std::map<std::string, std::string> input_digests;
  std::vector<std::string> outputs;

  void add_input(const std::string& path) {
    input_digests[path] = hex64(digest_file(path));
  }
};

inline void write_manifest(const std::string& path, const RunManifest& m) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  nlohmann::json j;
  j["command"] = m.command;
  j["config"] = m.config;
  j["seed"] = m.seed;
  j["version"] = m.version;
  j["inputs"] = m.input_digests;
  j["outputs"] = m.outputs;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace deoe

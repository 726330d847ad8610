#pragma once

// Run manifests: what a subcommand read and wrote, with git-style content
// checksums (SHA-1 over "blob <size>\0" + bytes).

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace pepdpo::manifest {

std::string git_blob_sha1(std::string_view bytes);
std::string file_checksum(const std::filesystem::path& path);

struct FileEntry {
  std::string path;  // relative to the output directory when inside it
  std::string sha1;
  std::uint64_t bytes = 0;
  bool volatile_content = false;  // contains wallclock values
};

struct RunManifest {
  std::string command;
  std::string config_hash;  // git_blob_sha1 of the canonical config text
  std::vector<std::pair<std::string, std::uint64_t>> seeds;
  std::vector<FileEntry> inputs;
  std::vector<FileEntry> outputs;
  std::vector<std::pair<std::string, std::uint64_t>> counts;  // e.g. n_pairs_train
  double wallclock_s = 0.0;

  void add_input(const std::filesystem::path& path, const std::filesystem::path& root);
  void add_output(const std::filesystem::path& path, const std::filesystem::path& root, bool volatile_content = false);
};

std::string to_json(const RunManifest& m);
RunManifest from_json(const std::string& text);

}  // namespace pepdpo::manifest

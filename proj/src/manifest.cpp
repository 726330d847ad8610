#include "pepdpo/manifest.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <json.hpp>
#include <sstream>

#include "pepdpo/error.hpp"

namespace pepdpo::manifest {
namespace {

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Data, "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

FileEntry entry(const std::filesystem::path& path, const std::filesystem::path& root, bool volatile_content) {
  const std::string bytes = read_all(path);
  std::string shown = path.lexically_normal().string();
  const auto rel = path.lexically_normal().lexically_relative(root.lexically_normal());
  if (!rel.empty() && *rel.begin() != "..") shown = rel.string();
  return {shown, git_blob_sha1(bytes), bytes.size(), volatile_content};
}

}  // namespace

std::string git_blob_sha1(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) && EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) fail(ErrorKind::State, "SHA-1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    const unsigned char b = digest[i];
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

std::string file_checksum(const std::filesystem::path& path) { return git_blob_sha1(read_all(path)); }

void RunManifest::add_input(const std::filesystem::path& path, const std::filesystem::path& root) {
  inputs.push_back(entry(path, root, false));
}

void RunManifest::add_output(const std::filesystem::path& path, const std::filesystem::path& root,
                             bool volatile_content) {
  outputs.push_back(entry(path, root, volatile_content));
}

std::string to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["config_hash"] = m.config_hash;
  auto& seeds = j["seeds"] = nlohmann::ordered_json::object();
  for (const auto& [name, value] : m.seeds) seeds[name] = value;
  auto files = [](const std::vector<FileEntry>& list) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& f : list) {
      nlohmann::ordered_json e;
      e["path"] = f.path;
      e["sha1"] = f.sha1;
      e["bytes"] = f.bytes;
      if (f.volatile_content) e["volatile"] = true;
      arr.push_back(std::move(e));
    }
    return arr;
  };
  j["inputs"] = files(m.inputs);
  j["outputs"] = files(m.outputs);
  auto& counts = j["counts"] = nlohmann::ordered_json::object();
  for (const auto& [name, value] : m.counts) counts[name] = value;
  j["wallclock_s"] = m.wallclock_s;
  return j.dump(2) + "\n";
}

RunManifest from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [k, v] : j.at("seeds").items()) m.seeds.emplace_back(k, v.get<std::uint64_t>());
    auto files = [](const nlohmann::json& arr) {
      std::vector<FileEntry> out;
      for (const auto& e : arr)
        out.push_back({e.at("path").get<std::string>(), e.at("sha1").get<std::string>(),
                       e.at("bytes").get<std::uint64_t>(), e.value("volatile", false)});
      return out;
    };
    m.inputs = files(j.at("inputs"));
    m.outputs = files(j.at("outputs"));
    if (j.contains("counts"))
      for (const auto& [k, v] : j.at("counts").items()) m.counts.emplace_back(k, v.get<std::uint64_t>());
    m.wallclock_s = j.at("wallclock_s").get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Data, std::string("manifest: ") + e.what());
  }
}

}  // namespace pepdpo::manifest

#include "sfd/checkpoint.hpp"

#include <filesystem>
#include <fstream>

namespace sfd {

nlohmann::json checkpoint_to_json(const EpsNet& net, const CheckpointMeta& meta) {
  std::vector<double> params(net.params().data(), net.params().data() + net.params().size());
  nlohmann::json m = {{"seed", meta.seed}, {"iteration", meta.iteration}};
  for (const auto& [k, v] : meta.extra.items()) m[k] = v;
  return {{"format", "sfd-checkpoint"},
          {"version", kCheckpointVersion},
          {"arch", net.arch().to_json()},
          {"params", std::move(params)},
          {"meta", std::move(m)}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw FormatError("checkpoint: document is not an object");
  for (const char* key : {"format", "version", "arch", "params", "meta"})
    if (!doc.contains(key)) throw FormatError(std::string("checkpoint: missing field '") + key + "'");
  if (doc["format"] != "sfd-checkpoint") throw FormatError("checkpoint: field 'format' is not 'sfd-checkpoint'");
  if (!doc["version"].is_number_integer()) throw FormatError("checkpoint: field 'version' is not an integer");
  const int version = doc["version"].get<int>();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: incompatible version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  NetArch arch = NetArch::from_json(doc["arch"]);
  const auto& jp = doc["params"];
  if (!jp.is_array()) throw FormatError("checkpoint: field 'params' is not an array");
  Vec params(static_cast<Eigen::Index>(jp.size()));
  for (std::size_t i = 0; i < jp.size(); ++i) {
    if (!jp[i].is_number()) throw FormatError("checkpoint: field 'params' holds a non-number at " + std::to_string(i));
    params(static_cast<Eigen::Index>(i)) = jp[i].get<double>();
  }
  const auto& jm = doc["meta"];
  if (!jm.is_object()) throw FormatError("checkpoint: field 'meta' is not an object");
  CheckpointMeta meta;
  try {
    meta.seed = jm.at("seed").get<std::uint64_t>();
    meta.iteration = jm.at("iteration").get<std::int64_t>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError("checkpoint: field 'meta' needs integer 'seed' and 'iteration'");
  }
  for (const auto& [k, v] : jm.items())
    if (k != "seed" && k != "iteration") meta.extra[k] = v;
  try {
    return {EpsNet(std::move(arch), std::move(params)), std::move(meta)};
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("checkpoint: field 'params': ") + e.what());
  }
}

void save_checkpoint(const std::string& path, const EpsNet& net, const CheckpointMeta& meta) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  // Write-then-rename keeps an existing checkpoint intact if serialization fails.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("checkpoint: cannot write " + tmp);
    out << checkpoint_to_json(net, meta).dump() << '\n';
    if (!out) throw FormatError("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: " + path + " is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(doc);
}

}  // namespace sfd

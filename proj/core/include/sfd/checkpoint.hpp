#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "sfd/model.hpp"

namespace sfd {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::int64_t iteration = 0;
  nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
  EpsNet net;
  CheckpointMeta meta;
};

nlohmann::json checkpoint_to_json(const EpsNet& net, const CheckpointMeta& meta);
/// Throws FormatError naming the offending field.
Checkpoint checkpoint_from_json(const nlohmann::json& doc);

/// Doubles are written with round-trip precision, so load(save(net)) is bit-exact.
void save_checkpoint(const std::string& path, const EpsNet& net, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sfd

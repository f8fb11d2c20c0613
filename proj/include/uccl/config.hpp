#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "uccl/trainer.hpp"

namespace uccl {

// The run configuration is one flat JSON object; every TrainConfig field (including the dataset,
// model and augmentation sub-configs) is a top-level key. Missing keys keep their defaults and
// unknown keys are rejected.

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& flat);

TrainConfig load_config(const std::filesystem::path& file);
void save_config(const std::filesystem::path& file, const TrainConfig& cfg);

/// First 16 hex digits of SHA-256 over the canonical (sorted-key) dump.
std::string config_hash(const TrainConfig& cfg);

}  // namespace uccl

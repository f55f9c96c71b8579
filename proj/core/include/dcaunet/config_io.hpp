#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcaunet/data.hpp"
#include "dcaunet/net.hpp"
#include "dcaunet/train.hpp"

namespace dcaunet {

struct DataConfig {
  // Empty manifest: samples come from the synthetic generator in memory,
  // indices [0, train) train, then val, then test.
  std::string manifest;
  std::size_t train_count = 8;
  std::size_t val_count = 0;
  std::size_t test_count = 0;
  std::string eval_split = "train";  // split used by eval / dump-attention
};

struct RunConfig {
  std::uint64_t seed = 0;  // drives network init and training order/augmentation
  NetworkConfig network;
  TrainConfig train;
  SynthSpec synth{.size = 224, .num_classes = 9};  // matches the network defaults
  DataConfig data;
  std::string out_dir = "runs/default";

  // Copies `seed` into the network and train sections.
  void apply_seed();
  // Validates every section; geometry checks run before any allocation.
  void validate() const;
};

nlohmann::ordered_json network_config_to_json(const NetworkConfig& c);
NetworkConfig network_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json run_config_to_json(const RunConfig& c);
// Unknown keys and ill-typed values throw ConfigError naming the key.
RunConfig run_config_from_json(const nlohmann::json& j);

// "a.b.c=value"; value parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Reads `path` (empty: defaults), applies overrides in order, then the seed
// when given, and validates.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          const std::uint64_t* seed = nullptr);

// 16 hex digits of FNV-1a over the canonical JSON dump, out_dir excluded.
std::string config_hash(const RunConfig& c);

std::string to_string(ShapeFamily f);
std::string to_string(AttentionKind k);

}  // namespace dcaunet

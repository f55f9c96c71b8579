#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dcaunet/net.hpp"
#include "dcaunet/tensor.hpp"

namespace dcaunet {

// Binary container shared by checkpoints and attention dumps. Layout is in
// docs/formats.md; all integers little-endian, payload as IEEE-754 float32.
inline constexpr char kArchiveMagic[8] = {'D', 'C', 'A', 'U', 'N', 'E', 'T', '\0'};
inline constexpr std::uint32_t kArchiveVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Archive {
  std::string metadata;  // UTF-8 JSON text, may be empty
  std::vector<TensorRecord> records;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_archive(const Archive& archive);
// Throws FormatError on bad magic, version, truncation or checksum mismatch.
Archive decode_archive(std::span<const std::uint8_t> bytes);

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

TensorRecord to_record(const std::string& name, const Tensor& t);

// Network config JSON plus every registry entry (parameters and BN buffers).
Archive network_archive(const Network& net, const std::string& extra_json = "{}");
void save_checkpoint(const std::filesystem::path& path, const Network& net,
                     const std::string& extra_json = "{}");

struct LoadedCheckpoint {
  Network network;
  std::string extra_json;
};

// Rebuilds the network from the stored config, then copies every tensor in.
// Names and shapes must match the registry exactly.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
void load_weights(Network& net, const Archive& archive);

}  // namespace dcaunet

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dcaunet/metrics.hpp"
#include "dcaunet/tensor.hpp"

namespace dcaunet {

enum class ShapeFamily { ellipse, rectangle, annulus };

struct SynthSpec {
  std::uint64_t seed = 1;
  std::size_t size = 64;          // square canvas
  std::size_t num_classes = 4;    // including background
  // Family per foreground class, cycled when shorter than K-1.
  std::vector<ShapeFamily> families{ShapeFamily::ellipse, ShapeFamily::rectangle,
                                    ShapeFamily::annulus};
  double background = 0.1;        // class 0 intensity
  double foreground_max = 0.9;    // class K-1 intensity; others evenly spaced
  double noise_std = 0.02;
  std::size_t min_count = 1, max_count = 2;      // instances per class
  double min_extent = 0.08, max_extent = 0.22;   // semi-axis as fraction of size
  std::size_t max_attempts = 200;

  double class_intensity(std::size_t class_id) const;
  // Rejects K whose intensity gap is below 4 noise std (or 4 grey levels).
  void validate() const;
};

struct ShapeInstance {
  std::int32_t class_id = 0;
  ShapeFamily family = ShapeFamily::ellipse;
  double cy = 0, cx = 0;   // centre, pixel units
  double ry = 0, rx = 0;   // semi-axes (annulus: ry = rx = outer radius)
  double angle = 0;        // radians
  double inner = 0;        // annulus inner radius / outer radius
};

// Pixel-centre membership test, (y, x) in pixel coordinates.
bool shape_contains(const ShapeInstance& s, double y, double x);

struct Sample {
  std::string id;
  Tensor image;  // (H, W, 1) in [0, 1]
  LabelMask mask;
};

struct GeneratedSample {
  Sample sample;
  std::vector<ShapeInstance> shapes;
};

// Pure function of (spec, index).
GeneratedSample generate(const SynthSpec& spec, std::size_t index);
std::vector<Sample> generate_dataset(const SynthSpec& spec, std::size_t count, std::size_t first_index = 0);

struct SampleBatch {
  Tensor images;  // (B, H, W, C)
  std::vector<LabelMask> masks;
  std::vector<std::string> ids;
};

SampleBatch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

struct AugmentConfig {
  bool enabled = true;
  bool rotate90 = true;
  double max_angle_deg = 15.0;  // small-angle rotation drawn uniformly in ±max
  bool flips = true;
};

// Geometric primitives; image is (H, W, C), mask is H x W.
std::pair<Tensor, LabelMask> rotate90(const Tensor& image, const LabelMask& mask, int quarter_turns);
std::pair<Tensor, LabelMask> flip(const Tensor& image, const LabelMask& mask, bool horizontal);
// Rotation about the image centre; bilinear for the image, nearest for the
// mask, edge-clamped sampling outside the canvas.
std::pair<Tensor, LabelMask> rotate_small(const Tensor& image, const LabelMask& mask, double degrees);

std::pair<Tensor, LabelMask> augment(const Tensor& image, const LabelMask& mask, std::uint64_t seed,
                                     const AugmentConfig& cfg = {});

// Permutation of [0, n) that depends only on (epoch, seed).
std::vector<std::size_t> shuffle_order(std::size_t n, std::uint64_t epoch, std::uint64_t seed);

// --- graymap I/O -----------------------------------------------------------

struct Graymap {
  std::size_t width = 0, height = 0;
  std::uint32_t maxval = 255;  // 255 or 65535
  std::vector<std::uint16_t> pixels;
};

void write_pgm(const std::filesystem::path& path, const Graymap& g);
Graymap read_pgm(const std::filesystem::path& path);

// Image values in [0,1] quantized to round(v * maxval).
void write_image(const std::filesystem::path& path, const Tensor& image, int bits = 16);
Tensor read_image(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const LabelMask& mask);
LabelMask read_mask(const std::filesystem::path& path, std::size_t num_classes);

struct ManifestEntry {
  std::string image, mask, split;
};

// Tab-separated with a "#dcaunet-manifest v1" first line and a column header.
// Relative paths resolve against the manifest's directory.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
// Loads every entry of the split; empty split selects all entries.
std::vector<Sample> load_split(const std::filesystem::path& manifest, const std::string& split,
                               std::size_t num_classes);

}  // namespace dcaunet

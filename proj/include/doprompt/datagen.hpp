#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "doprompt/tensor.hpp"

namespace doprompt {

/// Visual style shared by every image of one domain.
struct DomainStyleSpec {
  std::string name;
  double hue_rotation = 0.0;       // degrees in [0, 360); 0 leaves the foreground untinted
  double background = 0.0;         // gray level in [0, 1]
  double noise = 0.0;              // uniform noise amplitude in [0, 1]
  bool outline_only = false;       // draw only the shape boundary
  double texture_frequency = 0.0;  // diagonal grating cycles per image, 0 = none

  void validate() const;
};

enum class ShapeClass { disk = 0, square, cross, triangle, stripes };
inline constexpr std::size_t kNumShapeClasses = 5;
inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kImageChannels = 3;

/// One image, channel-major [3 x size x size], values in [0, 1]. The class
/// fixes the geometry (with jittered position and scale); the style fixes
/// color, background, texture and noise.
std::vector<float> render_image(int class_index, const DomainStyleSpec& style,
                                std::mt19937_64& rng, std::size_t size = kImageSize);

/// Built-in style table. Domain 2 interpolates hue, background, noise and
/// texture between domains 0 and 1.
std::vector<DomainStyleSpec> builtin_styles(std::size_t num_domains);

/// In-memory multi-domain image set. Pixels are [N x C x H x W] float32.
struct SyntheticDataset {
  std::size_t num_domains = 0;
  std::size_t num_classes = 0;
  std::size_t channels = kImageChannels;
  std::size_t height = kImageSize;
  std::size_t width = kImageSize;
  std::uint64_t seed = 0;
  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<int> domains;
  std::vector<std::string> domain_names;
  std::vector<std::string> warnings;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * height * width; }
  std::span<const float> image(std::size_t index) const;
  std::vector<std::size_t> indices_of_domain(int domain) const;
  /// Selected images as a [B x C x H x W] tensor.
  Tensor images(std::span<const std::size_t> indices) const;
  std::vector<int> labels_of(std::span<const std::size_t> indices) const;
  /// Throws FormatError if the arrays are inconsistent.
  void validate() const;
};

/// Balanced classes per domain; image i of a domain has class i % C and is
/// rendered from its own RNG stream derived from (seed, domain, i).
SyntheticDataset generate_dataset(std::size_t num_domains, std::size_t per_domain_count,
                                  std::uint64_t seed);

/// Cache layout (little-endian):
///   "DPD1", u64 num_images, num_domains, num_classes, channels, height, width, seed,
///   f32 pixels[num_images * C * H * W], i32 labels[num_images], i32 domains[num_images]
void save_dataset(const std::filesystem::path& path, const SyntheticDataset& data);
SyntheticDataset load_dataset(const std::filesystem::path& path);

/// Directory-of-raw-arrays layout, for replacing the generator with external
/// data:
///   meta.txt     key=value lines: num_images, num_domains, num_classes,
///                channels, height, width (optional: seed, domain_names as a
///                comma-separated list)
///   pixels.f32   little-endian float32, [num_images x C x H x W], values in [0, 1]
///   labels.i32   little-endian int32, [num_images]
///   domains.i32  little-endian int32, [num_images]
SyntheticDataset import_raw_directory(const std::filesystem::path& dir);
void export_raw_directory(const std::filesystem::path& dir, const SyntheticDataset& data);

/// Mixes a seed with stream identifiers (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace doprompt

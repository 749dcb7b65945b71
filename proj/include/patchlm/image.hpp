#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace patchlm {

/// RGB image with channels interleaved row-major. Pixels are stored in the
/// normalized space v/127.5 - 1, so 8-bit input maps to [-1, 1].
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  RawImage() = default;
  RawImage(std::size_t w, std::size_t h, double fill = 0.0);

  static RawImage from_bytes(std::size_t w, std::size_t h, std::span<const std::uint8_t> rgb);
  static RawImage solid(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b);

  double at(std::size_t x, std::size_t y, std::size_t channel) const { return pixels[(y * width + x) * 3 + channel]; }
  double& at(std::size_t x, std::size_t y, std::size_t channel) { return pixels[(y * width + x) * 3 + channel]; }

  // Throws ContractError on zero dimensions or a mismatched pixel count.
  void validate() const;

  std::vector<std::uint8_t> to_bytes() const;

  bool operator==(const RawImage&) const = default;
};

double normalize_channel(std::uint8_t v);

// Binary PPM (P6, maxval 255).
RawImage decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const RawImage& img);
RawImage load_ppm(const std::filesystem::path& path);
void save_ppm(const std::filesystem::path& path, const RawImage& img);

}  // namespace patchlm

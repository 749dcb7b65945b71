#include "patchlm/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

#include "patchlm/errors.hpp"

namespace patchlm {

RawImage::RawImage(std::size_t w, std::size_t h, double fill) : width(w), height(h), pixels(w * h * 3, fill) {
  validate();
}

double normalize_channel(std::uint8_t v) { return static_cast<double>(v) / 127.5 - 1.0; }

RawImage RawImage::from_bytes(std::size_t w, std::size_t h, std::span<const std::uint8_t> rgb) {
  if (rgb.size() != w * h * 3) {
    throw ContractError("image byte count " + std::to_string(rgb.size()) + " != " + std::to_string(w) + "x" +
                        std::to_string(h) + "x3");
  }
  RawImage img(w, h);
  std::transform(rgb.begin(), rgb.end(), img.pixels.begin(), normalize_channel);
  return img;
}

RawImage RawImage::solid(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  RawImage img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    img.pixels[3 * i] = normalize_channel(r);
    img.pixels[3 * i + 1] = normalize_channel(g);
    img.pixels[3 * i + 2] = normalize_channel(b);
  }
  return img;
}

void RawImage::validate() const {
  if (width == 0 || height == 0) {
    throw ContractError("image must be at least 1x1, got " + std::to_string(width) + "x" + std::to_string(height));
  }
  if (pixels.size() != width * height * 3) throw ContractError("image pixel buffer does not match its dimensions");
}

std::vector<std::uint8_t> RawImage::to_bytes() const {
  std::vector<std::uint8_t> out(pixels.size());
  std::transform(pixels.begin(), pixels.end(), out.begin(), [](double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround((v + 1.0) * 127.5), 0L, 255L));
  });
  return out;
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::size_t read_header_number(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (std::isspace(bytes[pos])) {
      ++pos;
    } else if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  std::size_t value = 0;
  std::size_t digits = 0;
  while (pos < bytes.size() && std::isdigit(bytes[pos])) {
    value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
    ++pos;
    ++digits;
  }
  if (digits == 0) throw IoError("malformed PPM header");
  return value;
}

}  // namespace

RawImage decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw IoError("not a binary PPM (P6) file");
  std::size_t pos = 2;
  const std::size_t w = read_header_number(bytes, pos);
  const std::size_t h = read_header_number(bytes, pos);
  const std::size_t maxval = read_header_number(bytes, pos);
  if (maxval != 255) throw IoError("only 8-bit PPM is supported (maxval " + std::to_string(maxval) + ")");
  if (w == 0 || h == 0) throw IoError("PPM has a zero dimension");
  ++pos;  // single whitespace byte before the raster
  if (bytes.size() < pos + w * h * 3) throw IoError("truncated PPM raster");
  return RawImage::from_bytes(w, h, bytes.subspan(pos, w * h * 3));
}

std::vector<std::uint8_t> encode_ppm(const RawImage& img) {
  img.validate();
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto raster = img.to_bytes();
  out.insert(out.end(), raster.begin(), raster.end());
  return out;
}

RawImage load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_ppm(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void save_ppm(const std::filesystem::path& path, const RawImage& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace patchlm

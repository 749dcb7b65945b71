#include "patchlm/patchifier.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "patchlm/errors.hpp"

namespace patchlm {
namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

std::size_t parse_side(const std::string& text) {
  std::size_t used = 0;
  unsigned long value = 0;
  try {
    value = std::stoul(text, &used);
  } catch (const std::exception&) {
    throw ConfigError("invalid resolution side '" + text + "'");
  }
  if (used != text.size()) throw ConfigError("invalid resolution side '" + text + "'");
  return value;
}

}  // namespace

ResizePolicy ResizePolicy::fixed(std::size_t side) {
  ResizePolicy p{Kind::kFixed, {side}};
  p.validate();
  return p;
}

ResizePolicy ResizePolicy::dynamic(std::vector<std::size_t> sides) {
  ResizePolicy p{Kind::kDynamic, std::move(sides)};
  p.validate();
  return p;
}

ResizePolicy ResizePolicy::parse(const std::string& text) {
  if (text == "original") return original();
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ConfigError("resolution must be fixed:S, dynamic:S1,S2,... or original");
  const std::string kind = text.substr(0, colon);
  std::vector<std::size_t> sides;
  std::stringstream rest(text.substr(colon + 1));
  for (std::string item; std::getline(rest, item, ',');) sides.push_back(parse_side(item));
  if (kind == "fixed") {
    if (sides.size() != 1) throw ConfigError("fixed resolution takes exactly one side");
    return fixed(sides[0]);
  }
  if (kind == "dynamic") return dynamic(std::move(sides));
  throw ConfigError("unknown resolution policy '" + kind + "'");
}

std::string ResizePolicy::to_string() const {
  switch (kind) {
    case Kind::kOriginal:
      return "original";
    case Kind::kFixed:
      return "fixed:" + std::to_string(sides.at(0));
    case Kind::kDynamic: {
      std::string out = "dynamic:";
      for (std::size_t i = 0; i < sides.size(); ++i) out += (i ? "," : "") + std::to_string(sides[i]);
      return out;
    }
  }
  return {};
}

void ResizePolicy::validate() const {
  if (kind == Kind::kOriginal) return;
  if (sides.empty()) throw ContractError("resolution set must be non-empty");
  if (kind == Kind::kFixed && sides.size() != 1) throw ContractError("fixed resolution takes exactly one side");
  for (auto s : sides) {
    if (s < kPatchSide) throw ContractError("resolution side " + std::to_string(s) + " is below the patch size 30");
  }
}

std::vector<LayoutSlot> PatchGrid::layout() const {
  std::vector<LayoutSlot> out;
  out.reserve(sequence_length());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.push_back({false, r * cols + c});
    out.push_back({true, 0});
  }
  return out;
}

TokenBudget token_budget(std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw ContractError("token_budget: dimensions must be >= 1");
  const std::size_t rows = ceil_div(height, kPatchSide);
  const std::size_t cols = ceil_div(width, kPatchSide);
  return {rows * cols, rows};
}

RawImage resize_image(const RawImage& img, std::size_t target_w, std::size_t target_h) {
  img.validate();
  if (target_w == 0 || target_h == 0) {
    throw ContractError("resize_image: target " + std::to_string(target_w) + "x" + std::to_string(target_h) +
                        " has a zero dimension");
  }
  if (target_w == img.width && target_h == img.height) return img;

  RawImage out(target_w, target_h);
  const double sx = target_w > 1 ? static_cast<double>(img.width - 1) / static_cast<double>(target_w - 1) : 0.0;
  const double sy = target_h > 1 ? static_cast<double>(img.height - 1) / static_cast<double>(target_h - 1) : 0.0;
  for (std::size_t y = 0; y < target_h; ++y) {
    const double fy = static_cast<double>(y) * sy;
    const auto y0 = std::min(static_cast<std::size_t>(fy), img.height - 1);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target_w; ++x) {
      const double fx = static_cast<double>(x) * sx;
      const auto x0 = std::min(static_cast<std::size_t>(fx), img.width - 1);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = img.at(x0, y0, c) * (1.0 - wx) + img.at(x1, y0, c) * wx;
        const double bottom = img.at(x0, y1, c) * (1.0 - wx) + img.at(x1, y1, c) * wx;
        out.at(x, y, c) = top * (1.0 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

RawImage pad_to_patch_multiple(const RawImage& img) {
  img.validate();
  const std::size_t w = ceil_div(img.width, kPatchSide) * kPatchSide;
  const std::size_t h = ceil_div(img.height, kPatchSide) * kPatchSide;
  if (w == img.width && h == img.height) return img;
  RawImage out(w, h, 0.0);
  for (std::size_t y = 0; y < img.height; ++y) {
    std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(y * img.width * 3), img.width * 3,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(y * w * 3));
  }
  return out;
}

std::size_t sample_dynamic_resolution(const std::vector<std::size_t>& sides, std::mt19937_64& rng) {
  if (sides.empty()) throw ContractError("sample_dynamic_resolution: empty resolution set");
  std::uniform_int_distribution<std::size_t> pick(0, sides.size() - 1);
  return sides[pick(rng)];
}

PatchGrid patchify(const RawImage& img, const ResizePolicy& policy, std::mt19937_64* rng) {
  img.validate();
  policy.validate();
  RawImage resized;
  switch (policy.kind) {
    case ResizePolicy::Kind::kOriginal:
      resized = img;
      break;
    case ResizePolicy::Kind::kFixed:
      resized = resize_image(img, policy.sides[0], policy.sides[0]);
      break;
    case ResizePolicy::Kind::kDynamic: {
      if (rng == nullptr) throw ContractError("patchify: dynamic resolution requires an rng");
      const std::size_t side = sample_dynamic_resolution(policy.sides, *rng);
      resized = resize_image(img, side, side);
      break;
    }
  }
  const RawImage padded = pad_to_patch_multiple(resized);

  PatchGrid grid;
  grid.rows = padded.height / kPatchSide;
  grid.cols = padded.width / kPatchSide;
  grid.source_width = resized.width;
  grid.source_height = resized.height;
  grid.patches = Tensor({grid.rows * grid.cols, kPatchDim});
  auto dst = grid.patches.data();
  std::size_t offset = 0;
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      for (std::size_t py = 0; py < kPatchSide; ++py) {
        const std::size_t src = ((r * kPatchSide + py) * padded.width + c * kPatchSide) * 3;
        std::copy_n(padded.pixels.begin() + static_cast<std::ptrdiff_t>(src), kPatchSide * 3,
                    dst.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += kPatchSide * 3;
      }
    }
  }
  return grid;
}

RawImage depatchify(const PatchGrid& grid) {
  if (grid.rows == 0 || grid.cols == 0 || grid.patch_side != kPatchSide ||
      grid.patches.shape() != Shape{grid.rows * grid.cols, kPatchDim}) {
    throw ContractError("depatchify: inconsistent patch grid");
  }
  RawImage out(grid.cols * kPatchSide, grid.rows * kPatchSide);
  auto src = grid.patches.data();
  std::size_t offset = 0;
  for (std::size_t r = 0; r < grid.rows; ++r) {
    for (std::size_t c = 0; c < grid.cols; ++c) {
      for (std::size_t py = 0; py < kPatchSide; ++py) {
        const std::size_t dst = ((r * kPatchSide + py) * out.width + c * kPatchSide) * 3;
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(offset), kPatchSide * 3,
                    out.pixels.begin() + static_cast<std::ptrdiff_t>(dst));
        offset += kPatchSide * 3;
      }
    }
  }
  return out;
}

}  // namespace patchlm

#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "patchlm/image.hpp"
#include "patchlm/tensor.hpp"

namespace patchlm {

inline constexpr std::size_t kPatchSide = 30;
inline constexpr std::size_t kPatchDim = kPatchSide * kPatchSide * 3;

/// How an image is resized before patchification.
struct ResizePolicy {
  enum class Kind { kFixed, kDynamic, kOriginal };

  Kind kind = Kind::kOriginal;
  std::vector<std::size_t> sides;  // one entry for kFixed, the candidate set for kDynamic

  static ResizePolicy fixed(std::size_t side);
  static ResizePolicy dynamic(std::vector<std::size_t> sides);
  static ResizePolicy original() { return {}; }

  // "fixed:512", "dynamic:448,512,768,1024" or "original".
  static ResizePolicy parse(const std::string& text);
  std::string to_string() const;

  void validate() const;
};

struct TokenBudget {
  std::size_t image_tokens = 0;
  std::size_t newline_tokens = 0;

  std::size_t total() const { return image_tokens + newline_tokens; }
  bool operator==(const TokenBudget&) const = default;
};

// One slot of the flattened image layout: either a patch index or a row break.
struct LayoutSlot {
  bool newline = false;
  std::size_t patch = 0;
};

/// A padded image cut into 30x30 patches in raster-scan order.
struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t patch_side = kPatchSide;
  Tensor patches;  // (rows*cols) x kPatchDim, row-major inside each patch, RGB interleaved
  std::size_t source_width = 0;   // image size after resizing, before padding
  std::size_t source_height = 0;

  std::size_t num_patches() const { return rows * cols; }
  std::size_t sequence_length() const { return rows * (cols + 1); }

  // cols patches followed by one newline, repeated rows times. Patch (r, c)
  // sits at r*(cols+1)+c and row r's newline at r*(cols+1)+cols.
  std::vector<LayoutSlot> layout() const;
};

TokenBudget token_budget(std::size_t width, std::size_t height);

// Bilinear resampling with align-corners sampling.
RawImage resize_image(const RawImage& img, std::size_t target_w, std::size_t target_h);

// Pads bottom/right with 0.0 (normalized mid-gray) to the next multiple of 30.
RawImage pad_to_patch_multiple(const RawImage& img);

std::size_t sample_dynamic_resolution(const std::vector<std::size_t>& sides, std::mt19937_64& rng);

// Resizes per policy (drawing from rng for kDynamic), pads, and cuts patches.
PatchGrid patchify(const RawImage& img, const ResizePolicy& policy, std::mt19937_64* rng = nullptr);

// Inverse of the patch cut: rebuilds the padded image.
RawImage depatchify(const PatchGrid& grid);

}  // namespace patchlm

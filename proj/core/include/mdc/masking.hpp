#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdc/tensor.hpp"

// Patch-level masking of degraded inputs.
//
// A MaskMap partitions an image into square patches and marks each patch
// KEPT or MASKED. Masking is exact-count: requesting ratio r on P patches
// masks round(r*P) patches, never a Bernoulli approximation, so sweeps over
// r are noise-free.
namespace mdc::mask {

enum class MaskingMethod { RANDOM = 0, SQUARE = 1, BLOCK_WISE = 2 };

const char* method_name(MaskingMethod m);
MaskingMethod method_from_name(const std::string& name);

struct MaskMap {
  int patch_size = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<std::uint8_t> kept;  // grid_h*grid_w entries, 1 = KEPT
  MaskingMethod method = MaskingMethod::RANDOM;
  std::uint64_t seed = 0;

  int height() const { return grid_h * patch_size; }
  int width() const { return grid_w * patch_size; }
  int total_patches() const { return grid_h * grid_w; }

  bool is_kept(int py, int px) const {
    return kept[static_cast<std::size_t>(py) * grid_w + px] != 0;
  }
  int masked_count() const;
};

// Builds a mask over a height×width image. Throws InvalidShapeError when the
// sides are not multiples of patch_size (images are cropped to multiples
// upstream; padding would make the masked/kept arithmetic inexact) and
// std::invalid_argument for ratio outside [0,1].
//
// RANDOM draws a uniform subset; SQUARE masks one centered near-square
// region; BLOCK_WISE unions random 2..4-patch rectangles until the quota is
// met, trimming the newest cells to land on the exact count.
MaskMap generate_mask(int height, int width, int patch_size, double ratio,
                      MaskingMethod method, std::uint64_t seed);

// Hadamard-style application: kept pixels pass through unchanged, masked
// pixels become `fill` (0 by default — a 0/1 mask product).
Tensor apply_mask(const Tensor& x, const MaskMap& m, float fill = 0.0f);

// Masked-patch fraction recomputed from the grid.
double mask_ratio_of(const MaskMap& m);

// Compact binary form: fixed header (patch size, dims, ratio, method, seed)
// followed by a kept-bitset. Round-trips exactly.
void save_mask(const std::string& path, const MaskMap& m);
MaskMap load_mask(const std::string& path);

// Number of 4-neighbor patch pairs with one side KEPT and the other MASKED;
// a contiguity measure (lower = blockier masks).
int boundary_adjacency(const MaskMap& m);

}  // namespace mdc::mask

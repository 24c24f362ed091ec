#pragma once

#include <cstdint>
#include <string>

#include "mdc/tensor.hpp"

// PNG storage and procedural clean-image synthesis.
//
// The codec is deliberately small: it writes 8-bit RGB (or grayscale) PNGs
// and reads 8-bit grayscale/RGB/RGBA non-interlaced PNGs, which covers every
// file this library produces. Pixels are float in [0,1]; writing quantizes to
// 8 bits, so a stored-then-loaded image may differ from the original by up to
// half a quantization step per channel.
namespace mdc::img {

// Reads a PNG into a 3-channel [0,1] tensor. Grayscale is replicated across
// channels; alpha is dropped. Throws std::runtime_error on malformed files
// and unsupported variants (palette, 16-bit, interlaced).
Tensor read_png(const std::string& path);

// Writes a 1- or 3-channel tensor as an 8-bit PNG, clamping to [0,1] first.
void write_png(const std::string& path, const Tensor& t);

// Deterministic synthetic "clean" image: one of several flat-ish motifs
// (checkerboard, linear gradient, smooth value noise, plaid) with seeded
// colors and geometry, plus a sub-quantization dither so no region is
// perfectly constant. Same (h, w, seed) always yields the same image.
Tensor procedural_clean(int h, int w, std::uint64_t seed);

Tensor crop(const Tensor& t, int y, int x, int ch, int cw);
Tensor center_crop(const Tensor& t, int ch, int cw);
Tensor hflip(const Tensor& t);

}  // namespace mdc::img

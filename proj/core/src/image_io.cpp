#include "mdc/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "mdc/errors.hpp"
#include "mdc/rng.hpp"

namespace mdc::img {

namespace {

void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

std::uint32_t get_u32_be(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void append_chunk(std::vector<unsigned char>& out, const char type[4],
                  const std::vector<unsigned char>& payload) {
  put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
  std::size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + type_at, static_cast<uInt>(4 + payload.size()));
  put_u32_be(out, static_cast<std::uint32_t>(crc));
}

const unsigned char kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_png(const std::string& path, const Tensor& t) {
  if (t.c != 1 && t.c != 3)
    throw InvalidShapeError("write_png: expected 1 or 3 channels, got " +
                            std::to_string(t.c));
  if (t.h <= 0 || t.w <= 0)
    throw InvalidShapeError("write_png: empty image");

  const int channels = t.c;
  const std::size_t stride = static_cast<std::size_t>(t.w) * channels;
  std::vector<unsigned char> raw((stride + 1) * t.h);
  std::size_t pos = 0;
  for (int y = 0; y < t.h; ++y) {
    raw[pos++] = 0;  // filter: None
    for (int x = 0; x < t.w; ++x) {
      for (int ci = 0; ci < channels; ++ci) {
        float v = t.at(ci, y, x);
        if (v < 0.0f) v = 0.0f;
        if (v > 1.0f) v = 1.0f;
        raw[pos++] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  }

  uLongf comp_bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> comp(comp_bound);
  if (compress2(comp.data(), &comp_bound, raw.data(),
                static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK)
    throw std::runtime_error("write_png: deflate failed for " + path);
  comp.resize(comp_bound);

  std::vector<unsigned char> file(kSignature, kSignature + 8);
  std::vector<unsigned char> ihdr;
  put_u32_be(ihdr, static_cast<std::uint32_t>(t.w));
  put_u32_be(ihdr, static_cast<std::uint32_t>(t.h));
  ihdr.push_back(8);                                      // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);                  // color type
  ihdr.push_back(0);                                      // compression
  ihdr.push_back(0);                                      // filter
  ihdr.push_back(0);                                      // interlace
  append_chunk(file, "IHDR", ihdr);
  append_chunk(file, "IDAT", comp);
  append_chunk(file, "IEND", {});

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_png: cannot open " + path);
  out.write(reinterpret_cast<const char*>(file.data()),
            static_cast<std::streamsize>(file.size()));
  if (!out) throw std::runtime_error("write_png: short write to " + path);
}

Tensor read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_png: cannot open " + path);
  std::vector<unsigned char> file((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (file.size() < 8 || std::memcmp(file.data(), kSignature, 8) != 0)
    throw std::runtime_error("read_png: not a PNG: " + path);

  std::size_t pos = 8;
  int width = 0, height = 0, bit_depth = 0, color_type = 0, interlace = 0;
  bool have_ihdr = false;
  std::vector<unsigned char> idat;

  while (pos + 12 <= file.size()) {
    std::uint32_t len = get_u32_be(&file[pos]);
    if (pos + 12 + len > file.size())
      throw std::runtime_error("read_png: truncated chunk in " + path);
    const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
    const unsigned char* payload = &file[pos + 8];

    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, &file[pos + 4], 4 + len);
    if (static_cast<std::uint32_t>(crc) != get_u32_be(&file[pos + 8 + len]))
      throw std::runtime_error("read_png: bad chunk CRC in " + path);

    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw std::runtime_error("read_png: bad IHDR in " + path);
      width = static_cast<int>(get_u32_be(payload));
      height = static_cast<int>(get_u32_be(payload + 4));
      bit_depth = payload[8];
      color_type = payload[9];
      interlace = payload[12];
      have_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), payload, payload + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }

  if (!have_ihdr || width <= 0 || height <= 0)
    throw std::runtime_error("read_png: missing IHDR in " + path);
  if (bit_depth != 8)
    throw std::runtime_error("read_png: only 8-bit PNGs supported: " + path);
  if (interlace != 0)
    throw std::runtime_error("read_png: interlaced PNGs unsupported: " + path);
  int src_channels;
  switch (color_type) {
    case 0: src_channels = 1; break;
    case 2: src_channels = 3; break;
    case 6: src_channels = 4; break;
    default:
      throw std::runtime_error("read_png: unsupported color type " +
                               std::to_string(color_type) + ": " + path);
  }

  const std::size_t stride = static_cast<std::size_t>(width) * src_channels;
  std::vector<unsigned char> raw((stride + 1) * height);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  int zrc = uncompress(raw.data(), &raw_len, idat.data(),
                       static_cast<uLong>(idat.size()));
  if (zrc != Z_OK || raw_len != raw.size())
    throw std::runtime_error("read_png: inflate failed for " + path);

  // Undo per-row filtering in place (bpp = bytes per complete pixel).
  const int bpp = src_channels;
  std::vector<unsigned char> prev(stride, 0);
  std::vector<unsigned char> cur(stride);
  Tensor out(3, height, width);
  for (int y = 0; y < height; ++y) {
    const unsigned char* row = &raw[static_cast<std::size_t>(y) * (stride + 1)];
    int filter = row[0];
    const unsigned char* src = row + 1;
    for (std::size_t i = 0; i < stride; ++i) {
      int a = i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0;
      int b = prev[i];
      int c = i >= static_cast<std::size_t>(bpp) ? prev[i - bpp] : 0;
      int x = src[i];
      switch (filter) {
        case 0: break;
        case 1: x += a; break;
        case 2: x += b; break;
        case 3: x += (a + b) / 2; break;
        case 4: x += paeth(a, b, c); break;
        default:
          throw std::runtime_error("read_png: bad filter byte in " + path);
      }
      cur[i] = static_cast<unsigned char>(x & 0xff);
    }
    for (int x = 0; x < width; ++x) {
      for (int ci = 0; ci < 3; ++ci) {
        int src_ci = src_channels == 1 ? 0 : ci;
        out.at(ci, y, x) =
            static_cast<float>(cur[static_cast<std::size_t>(x) * src_channels +
                                   src_ci]) /
            255.0f;
      }
    }
    std::swap(prev, cur);
  }
  return out;
}

namespace {

struct Color {
  float r, g, b;
};

Color random_color(rng::Stream& s, float lo = 0.08f, float hi = 0.95f) {
  return {static_cast<float>(s.uniform(lo, hi)),
          static_cast<float>(s.uniform(lo, hi)),
          static_cast<float>(s.uniform(lo, hi))};
}

void put(Tensor& t, int y, int x, Color c, float blend = 1.0f) {
  t.at(0, y, x) = t.at(0, y, x) * (1.0f - blend) + c.r * blend;
  t.at(1, y, x) = t.at(1, y, x) * (1.0f - blend) + c.g * blend;
  t.at(2, y, x) = t.at(2, y, x) * (1.0f - blend) + c.b * blend;
}

Color lerp(Color a, Color b, float t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

}  // namespace

Tensor procedural_clean(int h, int w, std::uint64_t seed) {
  if (h <= 0 || w <= 0)
    throw InvalidShapeError("procedural_clean: empty image requested");
  rng::Stream s(rng::derive(seed, "clean-image"));
  Tensor out(3, h, w);
  Color c0 = random_color(s), c1 = random_color(s);
  int mode = static_cast<int>(s.uniform_int(0, 3));

  switch (mode) {
    case 0: {  // checkerboard
      int cell = static_cast<int>(s.uniform_int(4, 12));
      int oy = static_cast<int>(s.uniform_int(0, cell - 1));
      int ox = static_cast<int>(s.uniform_int(0, cell - 1));
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          bool odd = (((y + oy) / cell) + ((x + ox) / cell)) & 1;
          put(out, y, x, odd ? c1 : c0);
        }
      break;
    }
    case 1: {  // oriented linear gradient
      double theta = s.uniform(0.0, 2.0 * 3.14159265358979323846);
      double dy = std::sin(theta), dx = std::cos(theta);
      double span = std::abs(dy) * (h - 1) + std::abs(dx) * (w - 1) + 1e-9;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double proj = dy * y + dx * x;
          double lo = std::min(0.0, dy * (h - 1)) + std::min(0.0, dx * (w - 1));
          float t = static_cast<float>((proj - lo) / span);
          put(out, y, x, lerp(c0, c1, t));
        }
      break;
    }
    case 2: {  // smooth value noise on a coarse lattice
      int cell = static_cast<int>(s.uniform_int(8, 16));
      int gh = h / cell + 2, gw = w / cell + 2;
      std::vector<float> node(static_cast<std::size_t>(gh) * gw);
      for (float& v : node) v = static_cast<float>(s.next_double());
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          float fy = static_cast<float>(y) / cell, fx = static_cast<float>(x) / cell;
          int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
          float ty = fy - iy, tx = fx - ix;
          const auto n = [&](int yy, int xx) {
            return node[static_cast<std::size_t>(yy) * gw + xx];
          };
          float v = n(iy, ix) * (1 - ty) * (1 - tx) +
                    n(iy + 1, ix) * ty * (1 - tx) +
                    n(iy, ix + 1) * (1 - ty) * tx + n(iy + 1, ix + 1) * ty * tx;
          put(out, y, x, lerp(c0, c1, v));
        }
      break;
    }
    default: {  // plaid: averaged horizontal and vertical stripe fields
      Color c2 = random_color(s), c3 = random_color(s);
      int sh = static_cast<int>(s.uniform_int(3, 9));
      int sw = static_cast<int>(s.uniform_int(3, 9));
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          Color a = ((y / sh) & 1) ? c1 : c0;
          Color b = ((x / sw) & 1) ? c3 : c2;
          put(out, y, x, lerp(a, b, 0.5f));
        }
      break;
    }
  }

  // Sub-quantization dither so no window is exactly constant; amplitude is
  // half an 8-bit step, which survives PNG round-trips as at most ±1 level.
  std::uint64_t dither_seed = rng::derive(seed, "clean-dither");
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::uint64_t hsh = rng::hash_combine(
          dither_seed, (static_cast<std::uint64_t>(y) << 32) |
                           static_cast<std::uint32_t>(x));
      float d = (static_cast<float>(hsh >> 40) / 16777216.0f - 0.5f) / 255.0f;
      for (int ci = 0; ci < 3; ++ci) {
        float v = out.at(ci, y, x) + d;
        out.at(ci, y, x) = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
      }
    }
  return out;
}

Tensor crop(const Tensor& t, int y, int x, int ch, int cw) {
  if (y < 0 || x < 0 || ch <= 0 || cw <= 0 || y + ch > t.h || x + cw > t.w)
    throw InvalidShapeError("crop: window " + std::to_string(ch) + "x" +
                            std::to_string(cw) + "@(" + std::to_string(y) +
                            "," + std::to_string(x) + ") outside " +
                            std::to_string(t.h) + "x" + std::to_string(t.w));
  Tensor out(t.c, ch, cw);
  for (int ci = 0; ci < t.c; ++ci)
    for (int yy = 0; yy < ch; ++yy)
      for (int xx = 0; xx < cw; ++xx)
        out.at(ci, yy, xx) = t.at(ci, y + yy, x + xx);
  return out;
}

Tensor center_crop(const Tensor& t, int ch, int cw) {
  if (ch > t.h || cw > t.w)
    throw InvalidShapeError("center_crop: window larger than image");
  return crop(t, (t.h - ch) / 2, (t.w - cw) / 2, ch, cw);
}

Tensor hflip(const Tensor& t) {
  Tensor out(t.c, t.h, t.w);
  for (int ci = 0; ci < t.c; ++ci)
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x)
        out.at(ci, y, x) = t.at(ci, y, t.w - 1 - x);
  return out;
}

}  // namespace mdc::img

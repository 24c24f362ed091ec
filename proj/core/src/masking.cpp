#include "mdc/masking.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mdc/errors.hpp"
#include "mdc/rng.hpp"

namespace mdc::mask {

const char* method_name(MaskingMethod m) {
  switch (m) {
    case MaskingMethod::RANDOM: return "random";
    case MaskingMethod::SQUARE: return "square";
    case MaskingMethod::BLOCK_WISE: return "block_wise";
  }
  return "?";
}

MaskingMethod method_from_name(const std::string& name) {
  if (name == "random") return MaskingMethod::RANDOM;
  if (name == "square") return MaskingMethod::SQUARE;
  if (name == "block_wise" || name == "blockwise")
    return MaskingMethod::BLOCK_WISE;
  throw std::invalid_argument("unknown masking method: " + name);
}

int MaskMap::masked_count() const {
  int n = 0;
  for (std::uint8_t k : kept) n += (k == 0);
  return n;
}

namespace {

void mask_square(MaskMap& m, int quota) {
  if (quota == 0) return;
  int gh = m.grid_h, gw = m.grid_w;
  int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(quota))));
  if (side > gw) side = gw;
  // Widen rows-wise if the grid is too flat for a square of this width.
  while ((quota + side - 1) / side > gh) ++side;
  int full_rows = quota / side;
  int rem = quota % side;
  int rows_used = full_rows + (rem > 0 ? 1 : 0);
  int top = (gh - rows_used) / 2;
  int left = (gw - side) / 2;
  for (int r = 0; r < full_rows; ++r)
    for (int c = 0; c < side; ++c)
      m.kept[static_cast<std::size_t>(top + r) * gw + left + c] = 0;
  if (rem > 0) {
    int left_rem = (gw - rem) / 2;
    for (int c = 0; c < rem; ++c)
      m.kept[static_cast<std::size_t>(top + full_rows) * gw + left_rem + c] = 0;
  }
}

void mask_block_wise(MaskMap& m, int quota, rng::Stream& s) {
  int gh = m.grid_h, gw = m.grid_w;
  std::vector<int> marked_order;
  marked_order.reserve(static_cast<std::size_t>(quota) + 16);
  int masked = 0;
  while (masked < quota) {
    int bh = gh < 2 ? 1 : static_cast<int>(s.uniform_int(2, std::min(4, gh)));
    int bw = gw < 2 ? 1 : static_cast<int>(s.uniform_int(2, std::min(4, gw)));
    int y0 = static_cast<int>(s.uniform_int(0, gh - bh));
    int x0 = static_cast<int>(s.uniform_int(0, gw - bw));
    for (int y = y0; y < y0 + bh; ++y)
      for (int x = x0; x < x0 + bw; ++x) {
        std::size_t idx = static_cast<std::size_t>(y) * gw + x;
        if (m.kept[idx]) {
          m.kept[idx] = 0;
          marked_order.push_back(static_cast<int>(idx));
          ++masked;
        }
      }
  }
  // Un-mask the newest cells to hit the quota exactly; only the final block
  // loses cells, so earlier blocks stay contiguous.
  while (masked > quota) {
    m.kept[static_cast<std::size_t>(marked_order.back())] = 1;
    marked_order.pop_back();
    --masked;
  }
}

}  // namespace

MaskMap generate_mask(int height, int width, int patch_size, double ratio,
                      MaskingMethod method, std::uint64_t seed) {
  if (patch_size <= 0)
    throw std::invalid_argument("generate_mask: patch_size must be positive");
  if (height <= 0 || width <= 0 || height % patch_size != 0 ||
      width % patch_size != 0)
    throw InvalidShapeError("generate_mask: " + std::to_string(height) + "x" +
                            std::to_string(width) +
                            " not divisible by patch size " +
                            std::to_string(patch_size));
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw std::invalid_argument("generate_mask: ratio must be in [0,1], got " +
                                std::to_string(ratio));

  MaskMap m;
  m.patch_size = patch_size;
  m.grid_h = height / patch_size;
  m.grid_w = width / patch_size;
  m.method = method;
  m.seed = seed;
  m.kept.assign(static_cast<std::size_t>(m.total_patches()), 1);

  int quota = static_cast<int>(std::lround(ratio * m.total_patches()));
  rng::Stream s(rng::derive(seed, "mask", static_cast<std::uint64_t>(m.grid_h),
                            static_cast<std::uint64_t>(m.grid_w)));
  switch (method) {
    case MaskingMethod::RANDOM: {
      std::vector<int> order(static_cast<std::size_t>(m.total_patches()));
      std::iota(order.begin(), order.end(), 0);
      s.partial_shuffle(order, static_cast<std::size_t>(quota));
      for (int i = 0; i < quota; ++i)
        m.kept[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
      break;
    }
    case MaskingMethod::SQUARE:
      mask_square(m, quota);
      break;
    case MaskingMethod::BLOCK_WISE:
      mask_block_wise(m, quota, s);
      break;
  }
  return m;
}

Tensor apply_mask(const Tensor& x, const MaskMap& m, float fill) {
  if (x.h != m.height() || x.w != m.width())
    throw InvalidShapeError("apply_mask: image " + std::to_string(x.h) + "x" +
                            std::to_string(x.w) + " vs mask " +
                            std::to_string(m.height()) + "x" +
                            std::to_string(m.width()));
  Tensor out = x;
  for (int py = 0; py < m.grid_h; ++py)
    for (int px = 0; px < m.grid_w; ++px) {
      if (m.is_kept(py, px)) continue;
      for (int ci = 0; ci < x.c; ++ci)
        for (int y = py * m.patch_size; y < (py + 1) * m.patch_size; ++y)
          for (int xx = px * m.patch_size; xx < (px + 1) * m.patch_size; ++xx)
            out.at(ci, y, xx) = fill;
    }
  return out;
}

double mask_ratio_of(const MaskMap& m) {
  if (m.total_patches() == 0) return 0.0;
  return static_cast<double>(m.masked_count()) / m.total_patches();
}

void save_mask(const std::string& path, const MaskMap& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_mask: cannot open " + path);
  const char magic[8] = {'M', 'D', 'C', 'M', 'A', 'S', 'K', '1'};
  out.write(magic, 8);
  auto w32 = [&](std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
  };
  w32(static_cast<std::uint32_t>(m.patch_size));
  w32(static_cast<std::uint32_t>(m.height()));
  w32(static_cast<std::uint32_t>(m.width()));
  double ratio = mask_ratio_of(m);
  out.write(reinterpret_cast<const char*>(&ratio), 8);
  std::uint8_t method = static_cast<std::uint8_t>(m.method);
  out.write(reinterpret_cast<const char*>(&method), 1);
  out.write(reinterpret_cast<const char*>(&m.seed), 8);
  std::vector<std::uint8_t> bits((m.kept.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < m.kept.size(); ++i)
    if (m.kept[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  out.write(reinterpret_cast<const char*>(bits.data()),
            static_cast<std::streamsize>(bits.size()));
  if (!out) throw std::runtime_error("save_mask: short write to " + path);
}

MaskMap load_mask(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_mask: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "MDCMASK1", 8) != 0)
    throw std::runtime_error("load_mask: bad magic in " + path);
  auto r32 = [&]() {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  MaskMap m;
  m.patch_size = static_cast<int>(r32());
  int height = static_cast<int>(r32());
  int width = static_cast<int>(r32());
  double ratio = 0;
  in.read(reinterpret_cast<char*>(&ratio), 8);
  std::uint8_t method = 0;
  in.read(reinterpret_cast<char*>(&method), 1);
  in.read(reinterpret_cast<char*>(&m.seed), 8);
  if (!in || m.patch_size <= 0 || height % m.patch_size != 0 ||
      width % m.patch_size != 0 || method > 2)
    throw std::runtime_error("load_mask: corrupt header in " + path);
  m.grid_h = height / m.patch_size;
  m.grid_w = width / m.patch_size;
  m.method = static_cast<MaskingMethod>(method);
  std::vector<std::uint8_t> bits(
      (static_cast<std::size_t>(m.total_patches()) + 7) / 8);
  in.read(reinterpret_cast<char*>(bits.data()),
          static_cast<std::streamsize>(bits.size()));
  if (!in) throw std::runtime_error("load_mask: truncated bitset in " + path);
  m.kept.assign(static_cast<std::size_t>(m.total_patches()), 0);
  for (std::size_t i = 0; i < m.kept.size(); ++i)
    m.kept[i] = (bits[i / 8] >> (i % 8)) & 1u;
  // The stored ratio is redundant with the bitset; treat disagreement beyond
  // rounding as corruption.
  if (std::abs(mask_ratio_of(m) - ratio) > 0.5 / std::max(1, m.total_patches()))
    throw std::runtime_error("load_mask: ratio/bitset mismatch in " + path);
  return m;
}

int boundary_adjacency(const MaskMap& m) {
  int n = 0;
  for (int y = 0; y < m.grid_h; ++y)
    for (int x = 0; x < m.grid_w; ++x) {
      if (x + 1 < m.grid_w && m.is_kept(y, x) != m.is_kept(y, x + 1)) ++n;
      if (y + 1 < m.grid_h && m.is_kept(y, x) != m.is_kept(y + 1, x)) ++n;
    }
  return n;
}

}  // namespace mdc::mask

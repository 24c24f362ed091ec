#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <vector>

#include "mdc/errors.hpp"
#include "mdc/masking.hpp"
#include "mdc/rng.hpp"

using namespace mdc;

namespace {

Tensor random_image(int c, int h, int w, std::uint64_t seed) {
  Tensor t(c, h, w);
  rng::Stream s(seed);
  for (float& v : t.data) v = static_cast<float>(s.next_double());
  return t;
}

}  // namespace

TEST_SUITE("masking") {

TEST_CASE("masked count is exactly round(ratio * patches)") {
  // 256x256 at patch 16: 256 patches, ratio 0.5 -> exactly 128 masked.
  mask::MaskMap m =
      mask::generate_mask(256, 256, 16, 0.5, mask::MaskingMethod::RANDOM, 1);
  CHECK(m.total_patches() == 256);
  CHECK(m.masked_count() == 128);

  for (auto method :
       {mask::MaskingMethod::RANDOM, mask::MaskingMethod::SQUARE,
        mask::MaskingMethod::BLOCK_WISE})
    for (double ratio : {0.0, 0.25, 0.33, 0.5, 0.75, 1.0}) {
      mask::MaskMap g = mask::generate_mask(64, 64, 8, ratio, method, 7);
      CHECK(g.masked_count() ==
            static_cast<int>(std::lround(ratio * g.total_patches())));
    }
}

TEST_CASE("ratio 0 keeps everything; ratio 1 masks everything") {
  mask::MaskMap keep =
      mask::generate_mask(32, 32, 8, 0.0, mask::MaskingMethod::RANDOM, 3);
  mask::MaskMap drop =
      mask::generate_mask(32, 32, 8, 1.0, mask::MaskingMethod::SQUARE, 3);
  CHECK(keep.masked_count() == 0);
  CHECK(drop.masked_count() == drop.total_patches());
}

TEST_CASE("indivisible sides and bad ratios are rejected") {
  CHECK_THROWS_AS(
      mask::generate_mask(30, 32, 8, 0.5, mask::MaskingMethod::RANDOM, 0),
      InvalidShapeError);
  CHECK_THROWS_AS(
      mask::generate_mask(32, 32, 8, 1.5, mask::MaskingMethod::RANDOM, 0),
      std::invalid_argument);
  CHECK_THROWS_AS(
      mask::generate_mask(32, 32, 8, -0.1, mask::MaskingMethod::RANDOM, 0),
      std::invalid_argument);
}

TEST_CASE("random masking is per-patch uniform (binomial bound)") {
  // 10,000 draws at ratio 0.5 on an 8x8 grid: every patch's masked
  // frequency must lie within 4 binomial standard deviations.
  const int draws = 10000;
  std::vector<int> hits(64, 0);
  for (int d = 0; d < draws; ++d) {
    mask::MaskMap m = mask::generate_mask(
        64, 64, 8, 0.5, mask::MaskingMethod::RANDOM,
        rng::derive(99, "mask-freq", static_cast<std::uint64_t>(d)));
    for (int p = 0; p < 64; ++p)
      if (!m.kept[static_cast<std::size_t>(p)]) ++hits[static_cast<std::size_t>(p)];
  }
  const double band = 4.0 * std::sqrt(0.25 / draws);
  for (int h : hits)
    CHECK(std::abs(static_cast<double>(h) / draws - 0.5) <= band);
}

TEST_CASE("same seed reproduces; distinct seeds give distinct random masks") {
  mask::MaskMap a =
      mask::generate_mask(64, 64, 8, 0.5, mask::MaskingMethod::RANDOM, 5);
  mask::MaskMap b =
      mask::generate_mask(64, 64, 8, 0.5, mask::MaskingMethod::RANDOM, 5);
  CHECK(a.kept == b.kept);
  std::set<std::vector<std::uint8_t>> distinct;
  for (std::uint64_t s = 0; s < 100; ++s)
    distinct.insert(
        mask::generate_mask(64, 64, 8, 0.5, mask::MaskingMethod::RANDOM, s)
            .kept);
  CHECK(distinct.size() == 100);
}

TEST_CASE("apply_mask passes kept pixels and zeroes masked ones") {
  Tensor x = random_image(3, 32, 32, 11);
  mask::MaskMap m =
      mask::generate_mask(32, 32, 8, 0.5, mask::MaskingMethod::RANDOM, 2);
  Tensor y = mask::apply_mask(x, m);
  REQUIRE(y.same_shape(x));
  for (int c = 0; c < 3; ++c)
    for (int yy = 0; yy < 32; ++yy)
      for (int xx = 0; xx < 32; ++xx) {
        if (m.is_kept(yy / 8, xx / 8))
          CHECK(y.at(c, yy, xx) == x.at(c, yy, xx));
        else
          CHECK(y.at(c, yy, xx) == 0.0f);
      }
}

TEST_CASE("all-kept mask is the identity; all-masked zeroes the image") {
  Tensor x = random_image(3, 16, 16, 1);
  mask::MaskMap keep =
      mask::generate_mask(16, 16, 8, 0.0, mask::MaskingMethod::RANDOM, 0);
  mask::MaskMap drop =
      mask::generate_mask(16, 16, 8, 1.0, mask::MaskingMethod::RANDOM, 0);
  CHECK(mask::apply_mask(x, keep).data == x.data);
  for (float v : mask::apply_mask(x, drop).data) CHECK(v == 0.0f);
}

TEST_CASE("half mask of a constant-1 image halves the mean exactly") {
  Tensor ones(1, 32, 32, 1.0f);
  mask::MaskMap m =
      mask::generate_mask(32, 32, 8, 0.5, mask::MaskingMethod::RANDOM, 8);
  Tensor y = mask::apply_mask(ones, m);
  double sum = 0.0;
  for (float v : y.data) sum += v;
  CHECK(sum / static_cast<double>(y.size()) == 0.5);  // binary-exact
}

TEST_CASE("mask_ratio_of recomputes the masked fraction") {
  mask::MaskMap m =
      mask::generate_mask(64, 64, 8, 0.75, mask::MaskingMethod::RANDOM, 4);
  CHECK(mask::mask_ratio_of(m) == m.masked_count() / 64.0);
  // 8x8 grid with 13 masked patches -> 13/64 exactly.
  mask::MaskMap t =
      mask::generate_mask(64, 64, 8, 13.0 / 64.0, mask::MaskingMethod::RANDOM, 4);
  CHECK(t.masked_count() == 13);
  CHECK(mask::mask_ratio_of(t) == 0.203125);
}

TEST_CASE("serialized masks round-trip exactly") {
  std::string path =
      (std::filesystem::temp_directory_path() / "mdc_mask.bin").string();
  for (auto method :
       {mask::MaskingMethod::RANDOM, mask::MaskingMethod::SQUARE,
        mask::MaskingMethod::BLOCK_WISE}) {
    mask::MaskMap m = mask::generate_mask(48, 64, 8, 0.4, method, 77);
    mask::save_mask(path, m);
    mask::MaskMap back = mask::load_mask(path);
    CHECK(back.patch_size == m.patch_size);
    CHECK(back.grid_h == m.grid_h);
    CHECK(back.grid_w == m.grid_w);
    CHECK(back.kept == m.kept);
    CHECK(back.method == m.method);
    CHECK(back.seed == m.seed);
  }
  std::remove(path.c_str());
}

TEST_CASE("square and block-wise masks are more contiguous than random") {
  // Compare each structured method's kept/masked adjacency count against
  // the mean over random masks at the same ratio.
  double random_mean = 0.0;
  const int trials = 50;
  for (std::uint64_t s = 0; s < trials; ++s)
    random_mean += mask::boundary_adjacency(mask::generate_mask(
        128, 128, 8, 0.5, mask::MaskingMethod::RANDOM, s));
  random_mean /= trials;
  for (auto method :
       {mask::MaskingMethod::SQUARE, mask::MaskingMethod::BLOCK_WISE})
    for (std::uint64_t s = 0; s < 10; ++s)
      CHECK(mask::boundary_adjacency(
                mask::generate_mask(128, 128, 8, 0.5, method, s)) <
            random_mean);
}

TEST_CASE("method names round-trip") {
  for (auto m :
       {mask::MaskingMethod::RANDOM, mask::MaskingMethod::SQUARE,
        mask::MaskingMethod::BLOCK_WISE})
    CHECK(mask::method_from_name(mask::method_name(m)) == m);
  CHECK_THROWS(mask::method_from_name("diagonal"));
}

}  // TEST_SUITE

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "mdc/errors.hpp"
#include "mdc/image_io.hpp"
#include "mdc/rng.hpp"
#include "mdc/tensor.hpp"

using namespace mdc;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

Tensor random_image(int c, int h, int w, std::uint64_t seed) {
  Tensor t(c, h, w);
  rng::Stream s(seed);
  for (float& v : t.data) v = static_cast<float>(s.next_double());
  return t;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("construction fills and indexes in CHW order") {
  Tensor t(2, 3, 4, 0.5f);
  CHECK(t.size() == 24);
  CHECK(t.at(0, 0, 0) == 0.5f);
  t.at(1, 2, 3) = 7.0f;
  CHECK(t.data[1 * 12 + 2 * 4 + 3] == 7.0f);
}

TEST_CASE("clamp01 clips both tails and keeps interior") {
  Tensor t(1, 1, 3);
  t.data = {-0.5f, 0.25f, 1.5f};
  Tensor c = clamp01(t);
  CHECK(c.data[0] == 0.0f);
  CHECK(c.data[1] == 0.25f);
  CHECK(c.data[2] == 1.0f);
}

TEST_CASE("mse and mean_abs_diff agree with hand values") {
  Tensor a(1, 1, 4, 0.0f), b(1, 1, 4, 0.0f);
  b.data = {0.1f, -0.1f, 0.3f, 0.0f};
  CHECK(mse(a, b) == doctest::Approx(0.11 / 4.0).epsilon(1e-6));
  CHECK(mean_abs_diff(a, b) == doctest::Approx(0.5 / 4.0).epsilon(1e-6));
}

TEST_CASE("shape mismatch throws") {
  Tensor a(1, 2, 2), b(1, 2, 3);
  CHECK_THROWS_AS(check_same_shape(a, b, "test"), InvalidShapeError);
  CHECK_THROWS_AS(mse(a, b), InvalidShapeError);
}

TEST_CASE("digest is content- and shape-sensitive") {
  Tensor a = random_image(3, 8, 8, 1);
  Tensor b = a;
  CHECK(digest(a) == digest(b));
  b.data[17] += 1e-6f;
  CHECK(digest(a) != digest(b));
}

TEST_CASE("all_finite flags NaN and infinity") {
  Tensor t(1, 2, 2, 1.0f);
  CHECK(all_finite(t));
  t.at(0, 1, 1) = std::nanf("");
  CHECK_FALSE(all_finite(t));
}

}  // TEST_SUITE

TEST_SUITE("image_io") {

TEST_CASE("png round-trip is exact for quantized values") {
  // Values already on the 8-bit lattice must survive bit-exactly.
  Tensor t(3, 9, 7);
  rng::Stream s(3);
  for (float& v : t.data)
    v = static_cast<float>(s.uniform_int(0, 255)) / 255.0f;
  std::string path = temp_path("mdc_roundtrip.png");
  img::write_png(path, t);
  Tensor back = img::read_png(path);
  REQUIRE(back.same_shape(t));
  for (std::size_t i = 0; i < t.size(); ++i)
    CHECK(back.data[i] == t.data[i]);  // same byte/255.0f expression both ways
  std::remove(path.c_str());
}

TEST_CASE("png quantization error is at most half a step") {
  Tensor t = random_image(3, 16, 16, 9);
  std::string path = temp_path("mdc_quant.png");
  img::write_png(path, t);
  Tensor back = img::read_png(path);
  double worst = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i)
    worst = std::max(worst, std::abs(double(back.data[i]) - t.data[i]));
  CHECK(worst <= 0.5 / 255.0 + 1e-9);
  std::remove(path.c_str());
}

TEST_CASE("grayscale png reads back replicated to 3 channels") {
  Tensor g(1, 5, 5, 0.25f);
  std::string path = temp_path("mdc_gray.png");
  img::write_png(path, g);
  Tensor back = img::read_png(path);
  CHECK(back.c == 3);
  for (int c = 0; c < 3; ++c)
    CHECK(back.at(c, 2, 2) == doctest::Approx(0.25).epsilon(0.01));
  std::remove(path.c_str());
}

TEST_CASE("malformed png throws") {
  std::string path = temp_path("mdc_bad.png");
  std::ofstream f(path, std::ios::binary);
  f << "definitely not a png";
  f.close();
  CHECK_THROWS(img::read_png(path));
  std::remove(path.c_str());
}

TEST_CASE("procedural_clean is deterministic, in range, and seed-sensitive") {
  Tensor a = img::procedural_clean(32, 32, 5);
  Tensor b = img::procedural_clean(32, 32, 5);
  Tensor c = img::procedural_clean(32, 32, 6);
  CHECK(a.data == b.data);
  CHECK(a.data != c.data);
  for (float v : a.data) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
}

TEST_CASE("crop extracts the exact window") {
  Tensor t = random_image(3, 10, 12, 2);
  Tensor w = img::crop(t, 2, 3, 4, 5);
  CHECK(w.c == 3);
  CHECK(w.h == 4);
  CHECK(w.w == 5);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x)
        CHECK(w.at(c, y, x) == t.at(c, y + 2, x + 3));
  CHECK_THROWS_AS(img::crop(t, 8, 0, 4, 4), InvalidShapeError);
}

TEST_CASE("center_crop is centered") {
  Tensor t = random_image(1, 8, 8, 4);
  Tensor w = img::center_crop(t, 4, 4);
  CHECK(w.at(0, 0, 0) == t.at(0, 2, 2));
  CHECK(w.at(0, 3, 3) == t.at(0, 5, 5));
}

TEST_CASE("hflip mirrors columns and is an involution") {
  Tensor t = random_image(3, 6, 9, 7);
  Tensor f = img::hflip(t);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 9; ++x)
        CHECK(f.at(c, y, x) == t.at(c, y, 8 - x));
  Tensor ff = img::hflip(f);
  CHECK(ff.data == t.data);
}

}  // TEST_SUITE

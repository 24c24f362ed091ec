#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "mdc/degrade.hpp"
#include "mdc/errors.hpp"
#include "mdc/image_io.hpp"
#include "mdc/rng.hpp"

using namespace mdc;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

fs::path temp_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("degrade") {

TEST_CASE("family names round-trip; unknown names throw") {
  for (int i = 0; i < degrade::kNumFamilies; ++i) {
    auto f = static_cast<degrade::Family>(i);
    CHECK(degrade::family_from_name(degrade::family_name(f)) == f);
  }
  CHECK_THROWS_AS(degrade::family_from_name("sandstorm"),
                  std::invalid_argument);
}

TEST_CASE("gaussian noise statistics on a constant image") {
  Tensor gt(3, 64, 64, 0.5f);
  Tensor lq = degrade::apply_gaussian_noise(gt, 25.0, 7);
  const double n = static_cast<double>(lq.size());
  double sum = 0.0, sq = 0.0;
  for (float v : lq.data) {
    sum += v;
    sq += double(v) * v;
  }
  double mean = sum / n;
  double stdev = std::sqrt(sq / n - mean * mean);
  double target_std = 25.0 / 255.0;
  CHECK(std::abs(mean - 0.5) < 3.0 * target_std / std::sqrt(n));
  CHECK(std::abs(stdev - target_std) < 0.05 * target_std);
  CHECK_THROWS_AS(degrade::apply_gaussian_noise(gt, 0.0, 7),
                  std::invalid_argument);
}

TEST_CASE("motion blur: constant image is unchanged; impulse spreads evenly") {
  Tensor gt(1, 16, 16, 0.7f);
  Tensor lq = degrade::apply_motion_blur(gt, 3, 0.0);
  for (float v : lq.data) CHECK(v == doctest::Approx(0.7).epsilon(1e-6));

  // A single white pixel with a length-5 horizontal kernel becomes exactly
  // five 1/5-valued pixels in a row.
  Tensor impulse(1, 21, 21, 0.0f);
  impulse.at(0, 10, 10) = 1.0f;
  Tensor spread = degrade::apply_motion_blur(impulse, 5, 0.0);
  int nonzero = 0;
  for (int y = 0; y < 21; ++y)
    for (int x = 0; x < 21; ++x)
      if (spread.at(0, y, x) != 0.0f) {
        ++nonzero;
        CHECK(y == 10);
        CHECK(std::abs(x - 10) <= 2);
        CHECK(spread.at(0, y, x) == doctest::Approx(0.2).epsilon(1e-6));
      }
  CHECK(nonzero == 5);
  CHECK_THROWS_AS(degrade::apply_motion_blur(gt, 4, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(degrade::apply_motion_blur(gt, 33, 0.0),
                  std::invalid_argument);
}

TEST_CASE("motion blur preserves total mass away from borders") {
  // The kernel sums to 1, so blurring an interior impulse preserves its sum
  // for any length/angle.
  Tensor impulse(1, 41, 41, 0.0f);
  impulse.at(0, 20, 20) = 1.0f;
  for (int len : {3, 5, 9, 13})
    for (double ang : {0.0, 17.0, 45.0, 90.0, 133.0}) {
      Tensor out = degrade::apply_motion_blur(impulse, len, ang);
      double sum = 0.0;
      for (float v : out.data) sum += v;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("haze follows the scattering closed form") {
  Tensor gt(3, 32, 32, 0.0f);
  // Near-zero beta transmits everything.
  Tensor thin = degrade::apply_haze(img::procedural_clean(32, 32, 1), 1e-9, 0.9);
  Tensor clean = img::procedural_clean(32, 32, 1);
  for (std::size_t i = 0; i < thin.size(); ++i)
    CHECK(std::abs(thin.data[i] - clean.data[i]) < 1e-6);
  // Huge beta converges to the airlight where depth = 1 (bottom row).
  Tensor thick = degrade::apply_haze(clean, 50.0, 0.9);
  for (int x = 0; x < 32; ++x)
    CHECK(std::abs(thick.at(0, 31, x) - 0.9f) < 1e-6);
  // Black image, beta=1, A=0.9: bottom row is 0.9*(1 - e^-1).
  Tensor black = degrade::apply_haze(gt, 1.0, 0.9);
  double expect = 0.9 * (1.0 - std::exp(-1.0));
  for (int x = 0; x < 32; ++x)
    CHECK(black.at(0, 31, x) == doctest::Approx(expect).epsilon(1e-6));
  CHECK_THROWS_AS(degrade::apply_haze(gt, 1.0, 0.5), std::invalid_argument);
}

TEST_CASE("rain streaks only brighten, at roughly the requested density") {
  Tensor gt(3, 64, 64, 0.5f);
  Tensor lq = degrade::apply_rain_streaks(gt, 0.08, 10.0, 3);
  for (std::size_t i = 0; i < lq.size(); ++i)
    CHECK(lq.data[i] >= gt.data[i] - 1e-7f);
  int brightened = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if (lq.at(0, y, x) - gt.at(0, y, x) > 0.1f) ++brightened;
  double frac = brightened / (64.0 * 64.0);
  CHECK(frac >= 0.04);  // within +-50% of 0.08
  CHECK(frac <= 0.12);
  CHECK_THROWS_AS(degrade::apply_rain_streaks(gt, 0.0, 10.0, 3),
                  std::invalid_argument);
  CHECK_THROWS_AS(degrade::apply_rain_streaks(gt, 0.25, 10.0, 3),
                  std::invalid_argument);
}

TEST_CASE("low light darkens by the gamma closed form") {
  Tensor ones(3, 8, 8, 1.0f);
  Tensor a = degrade::apply_low_light(ones, 2.0, 0.3, 0.0, 1);
  for (float v : a.data) CHECK(v == doctest::Approx(0.3).epsilon(1e-6));
  Tensor half(3, 8, 8, 0.5f);
  Tensor b = degrade::apply_low_light(half, 2.0, 0.4, 0.0, 1);
  for (float v : b.data) CHECK(v == doctest::Approx(0.1).epsilon(1e-6));
  Tensor zero(3, 8, 8, 0.0f);
  Tensor c = degrade::apply_low_light(zero, 2.0, 0.4, 3.0, 1);
  for (float v : c.data) CHECK(v >= 0.0f);
  CHECK_THROWS_AS(degrade::apply_low_light(ones, 0.5, 0.4, 0.0, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(degrade::apply_low_light(ones, 2.0, 1.5, 0.0, 1),
                  std::invalid_argument);
}

TEST_CASE("generators are deterministic and pure") {
  Tensor gt = img::procedural_clean(48, 48, 11);
  Tensor gt_copy = gt;
  degrade::DegradationSpec spec;
  for (int i = 0; i < degrade::kNumFamilies; ++i) {
    auto f = static_cast<degrade::Family>(i);
    spec = degrade::sample_spec(f, degrade::ParamRanges{}, 21);
    Tensor a = degrade::apply_degradation(gt, spec);
    Tensor b = degrade::apply_degradation(gt, spec);
    CHECK(a.data == b.data);
    CHECK(gt.data == gt_copy.data);  // input untouched
    for (float v : a.data) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
    REQUIRE(a.same_shape(gt));
  }
}

TEST_CASE("corpus build honors counts and loads back consistently") {
  fs::path dir = temp_dir("mdc_corpus_small");
  degrade::CorpusSpec spec;
  spec.procedural_pool = 8;
  spec.image_h = spec.image_w = 32;
  spec.seed = 99;
  spec.counts = {{degrade::Family::GAUSSIAN_NOISE, 10}};
  degrade::CorpusManifest m = degrade::build_corpus(spec, dir.string());
  CHECK(m.entries.size() == 10);
  for (const degrade::CorpusEntry& e : m.entries)
    CHECK(e.family == degrade::Family::GAUSSIAN_NOISE);

  std::vector<degrade::PairedSample> samples =
      degrade::load_corpus((dir / "manifest.json").string());
  REQUIRE(samples.size() == 10);
  std::map<degrade::Family, int> hist;
  for (const auto& s : samples) {
    ++hist[s.spec.family];
    CHECK(s.lq.same_shape(s.gt));
    CHECK(s.lq.h == 32);
    for (float v : s.lq.data) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
  for (const auto& [f, n] : m.counts) CHECK(hist[f] == n);
  fs::remove_all(dir);
}

TEST_CASE("corpus build is byte-identical across runs") {
  degrade::CorpusSpec spec;
  spec.procedural_pool = 6;
  spec.image_h = spec.image_w = 32;
  spec.seed = 5;
  spec.counts = {{degrade::Family::HAZE, 3}, {degrade::Family::LOW_LIGHT, 2}};
  fs::path a = temp_dir("mdc_corpus_a"), b = temp_dir("mdc_corpus_b");
  degrade::build_corpus(spec, a.string());
  degrade::build_corpus(spec, b.string());
  CHECK(read_bytes((a / "manifest.json").string()) ==
        read_bytes((b / "manifest.json").string()));
  for (const auto& entry : fs::recursive_directory_iterator(a))
    if (entry.is_regular_file()) {
      fs::path rel = fs::relative(entry.path(), a);
      CHECK(read_bytes(entry.path().string()) ==
            read_bytes((b / rel).string()));
    }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("long-tail counts are honored exactly") {
  // 1/100-scale version of the five-family corpus shape.
  fs::path dir = temp_dir("mdc_corpus_tail");
  degrade::CorpusSpec spec;
  spec.procedural_pool = 16;
  spec.image_h = spec.image_w = 24;
  spec.seed = 3;
  spec.counts = {{degrade::Family::HAZE, 721},
                 {degrade::Family::RAIN_STREAK, 2},
                 {degrade::Family::GAUSSIAN_NOISE, 51},
                 {degrade::Family::MOTION_BLUR, 21},
                 {degrade::Family::LOW_LIGHT, 5}};
  degrade::CorpusManifest m = degrade::build_corpus(spec, dir.string());
  CHECK(m.entries.size() == 800);
  std::map<degrade::Family, std::int64_t> hist;
  for (const auto& e : m.entries) ++hist[e.family];
  for (const auto& [f, n] : spec.counts)
    CHECK(hist[f] == n);
  fs::remove_all(dir);
}

TEST_CASE("corrupt corpora are rejected") {
  fs::path dir = temp_dir("mdc_corpus_corrupt");
  degrade::CorpusSpec spec;
  spec.procedural_pool = 4;
  spec.image_h = spec.image_w = 24;
  spec.seed = 1;
  spec.counts = {{degrade::Family::LOW_LIGHT, 3}};
  degrade::CorpusManifest m = degrade::build_corpus(spec, dir.string());
  std::string manifest = (dir / "manifest.json").string();

  SUBCASE("deleted image file") {
    fs::remove(dir / m.entries[1].lq_path);
    CHECK_THROWS_AS(degrade::load_corpus(manifest), CorruptCorpusError);
  }
  SUBCASE("tampered image file") {
    std::ofstream f(dir / m.entries[0].gt_path,
                    std::ios::binary | std::ios::app);
    f << "tail garbage";
    f.close();
    CHECK_THROWS_AS(degrade::load_corpus(manifest), CorruptCorpusError);
  }
  SUBCASE("missing manifest") {
    CHECK_THROWS(degrade::load_corpus((dir / "nope.json").string()));
  }
  fs::remove_all(dir);
}

TEST_CASE("stored images survive within 8-bit quantization") {
  fs::path dir = temp_dir("mdc_corpus_quant");
  degrade::CorpusSpec spec;
  spec.procedural_pool = 4;
  spec.image_h = spec.image_w = 32;
  spec.seed = 13;
  spec.counts = {{degrade::Family::HAZE, 2}};
  degrade::CorpusManifest m = degrade::build_corpus(spec, dir.string());
  std::vector<degrade::PairedSample> samples =
      degrade::load_corpus((dir / "manifest.json").string());
  // Regenerate the degraded image from the stored gt and spec: it must
  // match the stored lq up to one quantization step per channel.
  for (const degrade::PairedSample& s : samples) {
    Tensor redone = degrade::apply_degradation(s.gt, s.spec);
    double worst = 0.0;
    for (std::size_t i = 0; i < redone.size(); ++i)
      worst = std::max(worst, std::abs(double(redone.data[i]) - s.lq.data[i]));
    CHECK(worst <= 1.0 / 255.0 + 1e-6);
  }
  fs::remove_all(dir);
}

}  // TEST_SUITE

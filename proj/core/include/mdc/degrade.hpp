#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mdc/tensor.hpp"

// Synthetic degradation corpus: five degradation families applied to clean
// images, plus building/loading persisted (lq, gt) pair corpora.
//
// The synthesis formulas are documented constants of this library (the
// original datasets behind each family are photographs that cannot be
// regenerated from code):
//   GAUSSIAN_NOISE  lq = clip(gt + n), n ~ N(0, (sigma/255)^2) i.i.d.
//   MOTION_BLUR     lq = gt * k, k a normalized linear kernel (length, angle)
//   HAZE            lq = gt*t + A*(1-t), t = exp(-beta*d), d a vertical
//                   depth ramp rising 0 -> 1 top to bottom
//   RAIN_STREAK     lq = clip(gt + streaks), additive bright oriented lines
//   LOW_LIGHT       lq = clip(scale*gt^gamma + read noise)
namespace mdc::degrade {

enum class Family {
  HAZE = 0,
  RAIN_STREAK = 1,
  GAUSSIAN_NOISE = 2,
  MOTION_BLUR = 3,
  LOW_LIGHT = 4,
};
inline constexpr int kNumFamilies = 5;

const char* family_name(Family f);
Family family_from_name(const std::string& name);

// A degradation instance: the family label plus its named level parameters
// and the seed for its stochastic parts.
struct DegradationSpec {
  Family family = Family::HAZE;
  std::map<std::string, double> params;
  std::uint64_t seed = 0;
};

struct PairedSample {
  Tensor lq;
  Tensor gt;
  DegradationSpec spec;
  std::string id;
};

// sigma is in 8-bit units (e.g. 25 means std 25/255); must be > 0.
Tensor apply_gaussian_noise(const Tensor& gt, double sigma, std::uint64_t seed);

// kernel_length must be odd and in [3, 31]; angle in degrees, 0 = horizontal.
// Reflect padding at borders; the kernel always sums to 1.
Tensor apply_motion_blur(const Tensor& gt, int kernel_length, double angle_deg);

// beta > 0; airlight in [0.7, 1.0].
Tensor apply_haze(const Tensor& gt, double beta, double airlight);

// streak_density in (0, 0.2]: target fraction of pixels covered by streaks.
// angle in degrees, 0 = vertical fall.
Tensor apply_rain_streaks(const Tensor& gt, double streak_density,
                          double angle_deg, std::uint64_t seed);

// gamma >= 1 and scale <= 1 (the transform must darken);
// read_noise_sigma >= 0 in 8-bit units.
Tensor apply_low_light(const Tensor& gt, double gamma, double scale,
                       double read_noise_sigma, std::uint64_t seed);

// The blur kernel as a size×size row-major grid (exposed for tests).
std::vector<float> motion_kernel(int kernel_length, double angle_deg,
                                 int& size);

// Dispatch on spec.family, reading the family's named params
// (missing/ill-typed params throw std::invalid_argument).
Tensor apply_degradation(const Tensor& gt, const DegradationSpec& spec);

// Uniform sampling ranges for corpus synthesis. Defaults give moderate,
// clearly visible degradations on [0,1] images.
struct ParamRange {
  double lo = 0.0;
  double hi = 0.0;
};
struct ParamRanges {
  ParamRange noise_sigma{10.0, 50.0};
  ParamRange blur_length{5.0, 13.0};  // odd integers only
  ParamRange blur_angle{0.0, 180.0};
  ParamRange haze_beta{0.6, 2.2};
  ParamRange haze_airlight{0.75, 0.95};
  ParamRange rain_density{0.03, 0.12};
  ParamRange rain_angle{-25.0, 25.0};  // degrees from vertical
  ParamRange lowlight_gamma{1.5, 3.0};
  ParamRange lowlight_scale{0.2, 0.5};
  ParamRange lowlight_read_sigma{2.0, 6.0};
};

// Draws a complete DegradationSpec for one family from the ranges.
DegradationSpec sample_spec(Family f, const ParamRanges& ranges,
                            std::uint64_t seed);

struct CorpusEntry {
  std::string id;
  Family family = Family::HAZE;
  std::map<std::string, double> params;
  std::uint64_t apply_seed = 0;
  std::string lq_path;  // relative to the manifest's directory
  std::string gt_path;
  int height = 0;
  int width = 0;
  std::string checksum_lq;  // fnv1a-64 over file bytes, hex
  std::string checksum_gt;
};

struct CorpusManifest {
  int version = 1;
  std::uint64_t seed = 0;
  std::string root;  // directory holding the manifest
  std::map<Family, int> counts;
  std::vector<CorpusEntry> entries;
};

// What to synthesize. With an empty clean_dir a pool of procedural textures
// is used, so corpora build with zero external inputs; otherwise PNG files
// from clean_dir are center-cropped to (image_h, image_w).
struct CorpusSpec {
  std::string clean_dir;
  int procedural_pool = 64;
  int image_h = 64;
  int image_w = 64;
  std::map<Family, int> counts;
  ParamRanges ranges;
  std::uint64_t seed = 0;
};

// Writes images/ plus manifest.json under out_dir and returns the manifest.
// Fully deterministic: same spec -> byte-identical files.
CorpusManifest build_corpus(const CorpusSpec& spec, const std::string& out_dir);

// Parses a manifest without touching the image files.
CorpusManifest load_manifest(const std::string& manifest_path);
void save_manifest(const CorpusManifest& m, const std::string& manifest_path);

// Loads every sample, verifying checksums and shapes.
// Throws CorruptCorpusError on any inconsistency.
std::vector<PairedSample> load_corpus(const std::string& manifest_path);

}  // namespace mdc::degrade

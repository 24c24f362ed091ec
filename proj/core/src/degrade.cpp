#include "mdc/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mdc/errors.hpp"
#include "mdc/image_io.hpp"
#include "mdc/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mdc::degrade {

const char* family_name(Family f) {
  switch (f) {
    case Family::HAZE: return "haze";
    case Family::RAIN_STREAK: return "rain_streak";
    case Family::GAUSSIAN_NOISE: return "gaussian_noise";
    case Family::MOTION_BLUR: return "motion_blur";
    case Family::LOW_LIGHT: return "low_light";
  }
  return "?";
}

Family family_from_name(const std::string& name) {
  for (int i = 0; i < kNumFamilies; ++i) {
    Family f = static_cast<Family>(i);
    if (name == family_name(f)) return f;
  }
  throw std::invalid_argument("unknown degradation family: " + name);
}

namespace {

float clip01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

// Snaps values to the 8-bit lattice exactly as a PNG write+read would.
void quantize8(Tensor& t) {
  for (float& v : t.data)
    v = static_cast<float>(std::lround(clip01(v) * 255.0f)) / 255.0f;
}

int reflect(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace

Tensor apply_gaussian_noise(const Tensor& gt, double sigma, std::uint64_t seed) {
  if (!(sigma > 0.0))
    throw std::invalid_argument("apply_gaussian_noise: sigma must be > 0, got " +
                                std::to_string(sigma));
  rng::Stream s(rng::derive(seed, "gaussian-noise"));
  double std01 = sigma / 255.0;
  Tensor out = gt;
  for (float& v : out.data)
    v = clip01(v + static_cast<float>(s.normal() * std01));
  return out;
}

std::vector<float> motion_kernel(int kernel_length, double angle_deg,
                                 int& size) {
  if (kernel_length < 3 || kernel_length > 31 || kernel_length % 2 == 0)
    throw std::invalid_argument(
        "motion_kernel: length must be odd in [3,31], got " +
        std::to_string(kernel_length));
  // One extra ring so bilinear splats at the line's endpoints stay in-grid.
  size = kernel_length + 2;
  int c = (size - 1) / 2;
  std::vector<float> k(static_cast<std::size_t>(size) * size, 0.0f);
  double rad = angle_deg * kPi / 180.0;
  double dx = std::cos(rad), dy = std::sin(rad);
  for (int i = 0; i < kernel_length; ++i) {
    double o = i - (kernel_length - 1) / 2.0;
    double px = c + o * dx, py = c + o * dy;
    int x0 = static_cast<int>(std::floor(px));
    int y0 = static_cast<int>(std::floor(py));
    float fx = static_cast<float>(px - x0), fy = static_cast<float>(py - y0);
    k[static_cast<std::size_t>(y0) * size + x0] += (1 - fx) * (1 - fy);
    k[static_cast<std::size_t>(y0) * size + x0 + 1] += fx * (1 - fy);
    k[static_cast<std::size_t>(y0 + 1) * size + x0] += (1 - fx) * fy;
    k[static_cast<std::size_t>(y0 + 1) * size + x0 + 1] += fx * fy;
  }
  float sum = 0.0f;
  for (float v : k) sum += v;
  for (float& v : k) v /= sum;
  return k;
}

Tensor apply_motion_blur(const Tensor& gt, int kernel_length, double angle_deg) {
  int size = 0;
  std::vector<float> k = motion_kernel(kernel_length, angle_deg, size);
  int r = (size - 1) / 2;
  Tensor out(gt.c, gt.h, gt.w);
  for (int ci = 0; ci < gt.c; ++ci)
    for (int y = 0; y < gt.h; ++y)
      for (int x = 0; x < gt.w; ++x) {
        float acc = 0.0f;
        for (int v = 0; v < size; ++v) {
          int yy = reflect(y + v - r, gt.h);
          for (int u = 0; u < size; ++u) {
            float kv = k[static_cast<std::size_t>(v) * size + u];
            if (kv == 0.0f) continue;
            acc += kv * gt.at(ci, yy, reflect(x + u - r, gt.w));
          }
        }
        out.at(ci, y, x) = clip01(acc);
      }
  return out;
}

Tensor apply_haze(const Tensor& gt, double beta, double airlight) {
  if (!(beta > 0.0))
    throw std::invalid_argument("apply_haze: beta must be > 0");
  if (!(airlight >= 0.7 && airlight <= 1.0))
    throw std::invalid_argument("apply_haze: airlight must be in [0.7,1.0], got " +
                                std::to_string(airlight));
  Tensor out(gt.c, gt.h, gt.w);
  for (int y = 0; y < gt.h; ++y) {
    double d = gt.h > 1 ? static_cast<double>(y) / (gt.h - 1) : 1.0;
    float t = static_cast<float>(std::exp(-beta * d));
    float a = static_cast<float>(airlight) * (1.0f - t);
    for (int ci = 0; ci < gt.c; ++ci)
      for (int x = 0; x < gt.w; ++x)
        out.at(ci, y, x) = clip01(gt.at(ci, y, x) * t + a);
  }
  return out;
}

Tensor apply_rain_streaks(const Tensor& gt, double streak_density,
                          double angle_deg, std::uint64_t seed) {
  if (!(streak_density > 0.0 && streak_density <= 0.2))
    throw std::invalid_argument(
        "apply_rain_streaks: density must be in (0,0.2], got " +
        std::to_string(streak_density));
  rng::Stream s(rng::derive(seed, "rain"));
  // Angle is measured from vertical, so 0 means straight falling rain.
  double rad = angle_deg * kPi / 180.0;
  double dx = std::sin(rad), dy = std::cos(rad);

  std::vector<float> layer(static_cast<std::size_t>(gt.h) * gt.w, 0.0f);
  long quota = std::lround(streak_density * gt.h * gt.w);
  long painted = 0;
  long total = static_cast<long>(gt.h) * gt.w;
  while (painted < quota && painted < total) {
    double x0 = s.uniform(0.0, gt.w - 1.0);
    double y0 = s.uniform(0.0, gt.h - 1.0);
    int len = static_cast<int>(s.uniform_int(6, 14));
    float bright = static_cast<float>(s.uniform(0.15, 0.40));
    for (int t = 0; t < len; ++t) {
      int xi = static_cast<int>(std::lround(x0 + t * dx));
      int yi = static_cast<int>(std::lround(y0 + t * dy));
      if (xi < 0 || xi >= gt.w || yi < 0 || yi >= gt.h) continue;
      float& cell = layer[static_cast<std::size_t>(yi) * gt.w + xi];
      if (cell == 0.0f) ++painted;
      cell = std::max(cell, bright);
    }
  }

  Tensor out = gt;
  for (int ci = 0; ci < gt.c; ++ci)
    for (int y = 0; y < gt.h; ++y)
      for (int x = 0; x < gt.w; ++x)
        out.at(ci, y, x) =
            clip01(out.at(ci, y, x) + layer[static_cast<std::size_t>(y) * gt.w + x]);
  return out;
}

Tensor apply_low_light(const Tensor& gt, double gamma, double scale,
                       double read_noise_sigma, std::uint64_t seed) {
  if (gamma < 1.0 || scale > 1.0)
    throw std::invalid_argument(
        "apply_low_light: need gamma >= 1 and scale <= 1 (must darken), got "
        "gamma=" + std::to_string(gamma) + " scale=" + std::to_string(scale));
  if (read_noise_sigma < 0.0)
    throw std::invalid_argument("apply_low_light: negative read noise");
  rng::Stream s(rng::derive(seed, "low-light"));
  double std01 = read_noise_sigma / 255.0;
  Tensor out(gt.c, gt.h, gt.w);
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    double dark = scale * std::pow(static_cast<double>(gt.data[i]), gamma);
    if (std01 > 0.0) dark += s.normal() * std01;
    out.data[i] = clip01(static_cast<float>(dark));
  }
  return out;
}

Tensor apply_degradation(const Tensor& gt, const DegradationSpec& spec) {
  auto param = [&](const char* name) {
    auto it = spec.params.find(name);
    if (it == spec.params.end())
      throw std::invalid_argument(std::string("apply_degradation: ") +
                                  family_name(spec.family) +
                                  " spec missing param '" + name + "'");
    return it->second;
  };
  switch (spec.family) {
    case Family::HAZE:
      return apply_haze(gt, param("beta"), param("airlight"));
    case Family::RAIN_STREAK:
      return apply_rain_streaks(gt, param("streak_density"), param("angle_deg"),
                                spec.seed);
    case Family::GAUSSIAN_NOISE:
      return apply_gaussian_noise(gt, param("sigma"), spec.seed);
    case Family::MOTION_BLUR:
      return apply_motion_blur(gt, static_cast<int>(param("kernel_length")),
                               param("angle_deg"));
    case Family::LOW_LIGHT:
      return apply_low_light(gt, param("gamma"), param("scale"),
                             param("read_noise_sigma"), spec.seed);
  }
  throw std::invalid_argument("apply_degradation: bad family tag");
}

DegradationSpec sample_spec(Family f, const ParamRanges& ranges,
                            std::uint64_t seed) {
  rng::Stream s(rng::derive(seed, "spec"));
  DegradationSpec spec;
  spec.family = f;
  spec.seed = rng::derive(seed, "apply");
  switch (f) {
    case Family::HAZE:
      spec.params["beta"] = s.uniform(ranges.haze_beta.lo, ranges.haze_beta.hi);
      spec.params["airlight"] =
          s.uniform(ranges.haze_airlight.lo, ranges.haze_airlight.hi);
      break;
    case Family::RAIN_STREAK:
      spec.params["streak_density"] =
          s.uniform(ranges.rain_density.lo, ranges.rain_density.hi);
      spec.params["angle_deg"] =
          s.uniform(ranges.rain_angle.lo, ranges.rain_angle.hi);
      break;
    case Family::GAUSSIAN_NOISE:
      spec.params["sigma"] =
          s.uniform(ranges.noise_sigma.lo, ranges.noise_sigma.hi);
      break;
    case Family::MOTION_BLUR: {
      int lo = static_cast<int>(std::lround(ranges.blur_length.lo));
      int hi = static_cast<int>(std::lround(ranges.blur_length.hi));
      if (lo % 2 == 0) ++lo;
      int steps = (hi - lo) / 2;
      spec.params["kernel_length"] =
          static_cast<double>(lo + 2 * s.uniform_int(0, std::max(0, steps)));
      spec.params["angle_deg"] =
          s.uniform(ranges.blur_angle.lo, ranges.blur_angle.hi);
      break;
    }
    case Family::LOW_LIGHT:
      spec.params["gamma"] =
          s.uniform(ranges.lowlight_gamma.lo, ranges.lowlight_gamma.hi);
      spec.params["scale"] =
          s.uniform(ranges.lowlight_scale.lo, ranges.lowlight_scale.hi);
      spec.params["read_noise_sigma"] =
          s.uniform(ranges.lowlight_read_sigma.lo, ranges.lowlight_read_sigma.hi);
      break;
  }
  return spec;
}

namespace {

std::string file_digest_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return rng::hex64(rng::fnv1a(bytes.data(), bytes.size()));
}

json entry_to_json(const CorpusEntry& e) {
  json j;
  j["id"] = e.id;
  j["family"] = family_name(e.family);
  j["params"] = e.params;
  j["seed"] = e.apply_seed;
  j["lq_path"] = e.lq_path;
  j["gt_path"] = e.gt_path;
  j["height"] = e.height;
  j["width"] = e.width;
  j["checksum_lq"] = e.checksum_lq;
  j["checksum_gt"] = e.checksum_gt;
  return j;
}

CorpusEntry entry_from_json(const json& j) {
  CorpusEntry e;
  e.id = j.at("id").get<std::string>();
  e.family = family_from_name(j.at("family").get<std::string>());
  for (auto& [k, v] : j.at("params").items())
    e.params[k] = v.get<double>();
  e.apply_seed = j.at("seed").get<std::uint64_t>();
  e.lq_path = j.at("lq_path").get<std::string>();
  e.gt_path = j.at("gt_path").get<std::string>();
  e.height = j.at("height").get<int>();
  e.width = j.at("width").get<int>();
  e.checksum_lq = j.at("checksum_lq").get<std::string>();
  e.checksum_gt = j.at("checksum_gt").get<std::string>();
  return e;
}

}  // namespace

void save_manifest(const CorpusManifest& m, const std::string& manifest_path) {
  json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["root"] = ".";
  json counts = json::object();
  for (auto& [f, n] : m.counts) counts[family_name(f)] = n;
  j["counts"] = counts;
  j["entries"] = json::array();
  for (const CorpusEntry& e : m.entries) j["entries"].push_back(entry_to_json(e));
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw std::runtime_error("save_manifest: cannot open " + manifest_path);
  out << j.dump(2) << "\n";
}

CorpusManifest load_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in)
    throw CorruptCorpusError("load_manifest: cannot open " + manifest_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw CorruptCorpusError("load_manifest: bad JSON in " + manifest_path +
                             ": " + e.what());
  }
  CorpusManifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != 1)
      throw CorruptCorpusError("load_manifest: unsupported version " +
                               std::to_string(m.version));
    m.seed = j.at("seed").get<std::uint64_t>();
    for (auto& [k, v] : j.at("counts").items())
      m.counts[family_from_name(k)] = v.get<int>();
    for (const json& e : j.at("entries")) m.entries.push_back(entry_from_json(e));
  } catch (const json::exception& e) {
    throw CorruptCorpusError("load_manifest: missing/ill-typed key in " +
                             manifest_path + ": " + e.what());
  }
  m.root = fs::path(manifest_path).parent_path().string();
  if (m.root.empty()) m.root = ".";

  std::map<Family, int> recount;
  for (const CorpusEntry& e : m.entries) ++recount[e.family];
  for (auto& [f, n] : m.counts)
    if (n != 0 && recount[f] != n)
      throw CorruptCorpusError(std::string("load_manifest: counts[") +
                               family_name(f) + "] = " + std::to_string(n) +
                               " but " + std::to_string(recount[f]) +
                               " entries present");
  return m;
}

CorpusManifest build_corpus(const CorpusSpec& spec, const std::string& out_dir) {
  for (auto& [f, n] : spec.counts)
    if (n < 0)
      throw std::invalid_argument(std::string("build_corpus: negative count for ") +
                                  family_name(f));
  if (spec.image_h <= 0 || spec.image_w <= 0)
    throw std::invalid_argument("build_corpus: image size must be positive");

  std::vector<std::string> pool_files;
  if (!spec.clean_dir.empty()) {
    for (const auto& ent : fs::directory_iterator(spec.clean_dir))
      if (ent.is_regular_file() && ent.path().extension() == ".png")
        pool_files.push_back(ent.path().string());
    std::sort(pool_files.begin(), pool_files.end());
    if (pool_files.empty())
      throw std::invalid_argument("build_corpus: no .png files in " +
                                  spec.clean_dir);
  }
  int pool_n = pool_files.empty() ? std::max(1, spec.procedural_pool)
                                  : static_cast<int>(pool_files.size());

  fs::create_directories(fs::path(out_dir) / "images");

  CorpusManifest m;
  m.version = 1;
  m.seed = spec.seed;
  m.root = out_dir;

  int gi = 0;
  for (int fi = 0; fi < kNumFamilies; ++fi) {
    Family fam = static_cast<Family>(fi);
    auto it = spec.counts.find(fam);
    int count = it == spec.counts.end() ? 0 : it->second;
    m.counts[fam] = count;
    for (int j = 0; j < count; ++j, ++gi) {
      rng::Stream pick(rng::derive(spec.seed, "pick", static_cast<std::uint64_t>(gi)));
      int pidx = static_cast<int>(pick.uniform_int(0, pool_n - 1));
      Tensor gt;
      if (pool_files.empty()) {
        gt = img::procedural_clean(spec.image_h, spec.image_w,
                                   rng::derive(spec.seed, "pool",
                                               static_cast<std::uint64_t>(pidx)));
      } else {
        Tensor full = img::read_png(pool_files[static_cast<std::size_t>(pidx)]);
        if (full.h < spec.image_h || full.w < spec.image_w)
          throw std::invalid_argument("build_corpus: clean image " +
                                      pool_files[static_cast<std::size_t>(pidx)] +
                                      " smaller than requested size");
        gt = img::center_crop(full, spec.image_h, spec.image_w);
      }
      quantize8(gt);

      DegradationSpec dspec = sample_spec(
          fam, spec.ranges, rng::derive(spec.seed, "params",
                                        static_cast<std::uint64_t>(gi)));
      Tensor lq = apply_degradation(gt, dspec);

      char idbuf[64];
      std::snprintf(idbuf, sizeof(idbuf), "%s_%04d", family_name(fam), j);
      CorpusEntry e;
      e.id = idbuf;
      e.family = fam;
      e.params = dspec.params;
      e.apply_seed = dspec.seed;
      e.lq_path = std::string("images/") + idbuf + "_lq.png";
      e.gt_path = std::string("images/") + idbuf + "_gt.png";
      e.height = spec.image_h;
      e.width = spec.image_w;
      img::write_png((fs::path(out_dir) / e.gt_path).string(), gt);
      img::write_png((fs::path(out_dir) / e.lq_path).string(), lq);
      e.checksum_gt = file_digest_hex((fs::path(out_dir) / e.gt_path).string());
      e.checksum_lq = file_digest_hex((fs::path(out_dir) / e.lq_path).string());
      m.entries.push_back(std::move(e));
    }
  }

  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  return m;
}

std::vector<PairedSample> load_corpus(const std::string& manifest_path) {
  CorpusManifest m = load_manifest(manifest_path);
  std::vector<PairedSample> samples;
  samples.reserve(m.entries.size());
  for (const CorpusEntry& e : m.entries) {
    std::string lq_file = (fs::path(m.root) / e.lq_path).string();
    std::string gt_file = (fs::path(m.root) / e.gt_path).string();
    for (const std::string& f : {lq_file, gt_file})
      if (!fs::exists(f))
        throw CorruptCorpusError("load_corpus: entry " + e.id +
                                 " references missing file " + f);
    if (file_digest_hex(lq_file) != e.checksum_lq ||
        file_digest_hex(gt_file) != e.checksum_gt)
      throw CorruptCorpusError("load_corpus: checksum mismatch for " + e.id);

    PairedSample s;
    s.id = e.id;
    s.lq = img::read_png(lq_file);
    s.gt = img::read_png(gt_file);
    if (s.lq.h != e.height || s.lq.w != e.width || !s.lq.same_shape(s.gt))
      throw CorruptCorpusError("load_corpus: shape mismatch for " + e.id);
    s.spec.family = e.family;
    s.spec.params = e.params;
    s.spec.seed = e.apply_seed;
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace mdc::degrade

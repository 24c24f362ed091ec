#include "mdc/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdc/errors.hpp"

namespace mdc::metrics {

double psnr(const Tensor& a, const Tensor& b, double data_range) {
  check_same_shape(a, b, "psnr");
  if (a.size() == 0) throw std::invalid_argument("psnr: empty tensors");
  if (!(data_range > 0.0))
    throw std::invalid_argument("psnr: data_range must be > 0");
  double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / m);
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

// Normalized 11x11 Gaussian, built once.
const std::vector<double>& gaussian_window() {
  static const std::vector<double> win = [] {
    std::vector<double> w(kWindow * kWindow);
    double sum = 0.0;
    int half = kWindow / 2;
    for (int y = 0; y < kWindow; ++y)
      for (int x = 0; x < kWindow; ++x) {
        double dy = y - half, dx = x - half;
        double v = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
        w[static_cast<std::size_t>(y) * kWindow + x] = v;
        sum += v;
      }
    for (double& v : w) v /= sum;
    return w;
  }();
  return win;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "ssim");
  if (a.h < kWindow || a.w < kWindow)
    throw InvalidShapeError("ssim: image " + std::to_string(a.h) + "x" +
                            std::to_string(a.w) + " is smaller than the " +
                            std::to_string(kWindow) + "x" +
                            std::to_string(kWindow) + " window");
  const std::vector<double>& win = gaussian_window();

  double acc = 0.0;
  std::int64_t n = 0;
  for (int ci = 0; ci < a.c; ++ci)
    for (int y = 0; y + kWindow <= a.h; ++y)
      for (int x = 0; x + kWindow <= a.w; ++x) {
        double mu_a = 0.0, mu_b = 0.0, aa = 0.0, bb = 0.0, ab = 0.0;
        for (int dy = 0; dy < kWindow; ++dy)
          for (int dx = 0; dx < kWindow; ++dx) {
            double w = win[static_cast<std::size_t>(dy) * kWindow + dx];
            double va = a.at(ci, y + dy, x + dx);
            double vb = b.at(ci, y + dy, x + dx);
            mu_a += w * va;
            mu_b += w * vb;
            aa += w * va * va;
            bb += w * vb * vb;
            ab += w * va * vb;
          }
        double var_a = aa - mu_a * mu_a;
        double var_b = bb - mu_b * mu_b;
        double cov = ab - mu_a * mu_b;
        double s = ((2.0 * mu_a * mu_b + kC1) * (2.0 * cov + kC2)) /
                   ((mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2));
        acc += s;
        ++n;
      }
  return acc / static_cast<double>(n);
}

}  // namespace mdc::metrics

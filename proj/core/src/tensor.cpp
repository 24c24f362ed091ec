#include "mdc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "mdc/errors.hpp"
#include "mdc/rng.hpp"

namespace mdc {

Tensor::Tensor(int c_, int h_, int w_, float fill) : c(c_), h(h_), w(w_) {
  if (c_ < 0 || h_ < 0 || w_ < 0)
    throw InvalidShapeError("tensor dims must be non-negative, got " +
                            std::to_string(c_) + "x" + std::to_string(h_) +
                            "x" + std::to_string(w_));
  data.assign(static_cast<std::size_t>(c_) * h_ * w_, fill);
}

void Tensor::zero() { std::fill(data.begin(), data.end(), 0.0f); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* ctx) {
  if (!a.same_shape(b))
    throw InvalidShapeError(std::string(ctx) + ": shape mismatch " +
                            std::to_string(a.c) + "x" + std::to_string(a.h) +
                            "x" + std::to_string(a.w) + " vs " +
                            std::to_string(b.c) + "x" + std::to_string(b.h) +
                            "x" + std::to_string(b.w));
}

Tensor clamp01(const Tensor& t) {
  Tensor out = t;
  for (float& v : out.data) {
    if (v < 0.0f) v = 0.0f;
    if (v > 1.0f) v = 1.0f;
  }
  return out;
}

double mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  if (a.data.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mean_abs_diff");
  if (a.data.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    acc += std::abs(static_cast<double>(a.data[i]) -
                    static_cast<double>(b.data[i]));
  return acc / static_cast<double>(a.data.size());
}

bool all_finite(const Tensor& t) {
  for (float v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::uint64_t digest(const Tensor& t) {
  std::uint64_t h = rng::fnv1a(t.data.data(), t.data.size() * sizeof(float));
  h = rng::hash_combine(h, static_cast<std::uint64_t>(t.c));
  h = rng::hash_combine(h, static_cast<std::uint64_t>(t.h));
  h = rng::hash_combine(h, static_cast<std::uint64_t>(t.w));
  return h;
}

}  // namespace mdc

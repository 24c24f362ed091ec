#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace mdc {

// Dense CHW float tensor. All images and feature maps in the library use this
// layout; batches are plain vectors of Tensor.
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int c_, int h_, int w_, float fill = 0.0f);

  float& at(int ci, int yi, int xi) {
    return data[(static_cast<std::size_t>(ci) * h + yi) * w + xi];
  }
  const float& at(int ci, int yi, int xi) const {
    return data[(static_cast<std::size_t>(ci) * h + yi) * w + xi];
  }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const {
    return c == o.c && h == o.h && w == o.w;
  }
  void zero();
};

// Throws InvalidShapeError naming `ctx` when the shapes differ.
void check_same_shape(const Tensor& a, const Tensor& b, const char* ctx);

// Elementwise clamp to [0,1]; used before quantizing to 8-bit storage.
Tensor clamp01(const Tensor& t);

double mse(const Tensor& a, const Tensor& b);
double mean_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

// Content digest over the raw float bytes (order- and shape-sensitive).
std::uint64_t digest(const Tensor& t);

}  // namespace mdc

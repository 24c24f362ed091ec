#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdc/masking.hpp"
#include "mdc/rng.hpp"
#include "mdc/tensor.hpp"

// Minimal neural-network substrate with explicit forward/backward passes.
//
// Parameters live in flat per-component ParamStores (one contiguous float
// buffer plus a name/shape/offset directory). Layers hold offsets into a
// store rather than owning weights, which makes optimizer steps, gradient
// accumulation and checkpointing trivial: a gradient arena is just a float
// vector aligned with the store.
//
// All backward methods accumulate parameter gradients into such an arena and
// return the gradient with respect to their input.
namespace mdc::nn {

struct ParamInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

class ParamStore {
 public:
  // Registers a zero-initialized parameter tensor and returns its offset.
  std::size_t add(const std::string& name, const std::vector<int>& shape);
  const ParamInfo* find(const std::string& name) const;

  float* ptr(std::size_t offset) { return values.data() + offset; }
  const float* ptr(std::size_t offset) const { return values.data() + offset; }
  std::size_t size() const { return values.size(); }

  std::vector<ParamInfo> entries;
  std::vector<float> values;
};

// Boolean per-site activity map at one feature resolution. An empty `kept`
// vector means "all sites kept" and makes every masked code path collapse to
// the plain one, so unmasked forwards are bit-identical to a plain network.
struct KeptMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> kept;

  bool all() const { return kept.empty(); }
  bool at(int y, int x) const {
    return kept.empty() || kept[static_cast<std::size_t>(y) * w + x] != 0;
  }

  static KeptMap all_kept(int h, int w) { return {h, w, {}}; }
  // Pixel-resolution map from a patch mask (patch cells expanded to pixels).
  static KeptMap from_mask(const mask::MaskMap& m);
  // A coarse site stays kept only if its whole factor×factor footprint is
  // kept — the conservative choice, so no masked pixel can influence any
  // kept feature site at any depth.
  KeptMap min_pool(int factor) const;
};

struct Conv2d {
  int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
  std::size_t w_off = 0, b_off = 0;  // weights [out_c][in_c][k][k], bias [out_c]

  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int in_c, int out_c, int k,
         int stride, int pad);

  // kin/kout restrict the convolution to kept sites: inputs at non-kept
  // sites are treated as absent (zeroed before use) and outputs at non-kept
  // sites are exactly zero, bias included. Null maps mean plain convolution.
  Tensor forward(const ParamStore& ps, const Tensor& x,
                 const KeptMap* kin = nullptr,
                 const KeptMap* kout = nullptr) const;
  Tensor backward(const ParamStore& ps, std::vector<float>& grad,
                  const Tensor& x, const Tensor& gy,
                  const KeptMap* kin = nullptr,
                  const KeptMap* kout = nullptr) const;

  int out_h(int in_h) const { return (in_h + 2 * pad - k) / stride + 1; }
  int out_w(int in_w) const { return (in_w + 2 * pad - k) / stride + 1; }
};

// Per-sample normalization over all of (C,H,W) with per-channel affine
// parameters; statistics never cross samples.
struct LayerNorm {
  int channels = 0;
  std::size_t g_off = 0, b_off = 0;
  double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int channels);

  Tensor forward(const ParamStore& ps, const Tensor& x) const;
  Tensor backward(const ParamStore& ps, std::vector<float>& grad,
                  const Tensor& x, const Tensor& gy) const;
};

struct Linear {
  int in = 0, out = 0;
  std::size_t w_off = 0, b_off = 0;  // weights [out][in]

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out);

  std::vector<double> forward(const ParamStore& ps,
                              const std::vector<float>& x) const;
  std::vector<float> backward(const ParamStore& ps, std::vector<float>& grad,
                              const std::vector<float>& x,
                              const std::vector<double>& gy) const;
};

Tensor leaky_relu(const Tensor& x, float slope = 0.1f);
// `pre` is the activation's input (needed to pick the branch).
Tensor leaky_relu_backward(const Tensor& pre, const Tensor& gy,
                           float slope = 0.1f);

Tensor avg_pool(const Tensor& x, int factor);
Tensor avg_pool_backward(const Tensor& gy, int factor);

Tensor upsample_nearest(const Tensor& x, int factor);
Tensor upsample_nearest_backward(const Tensor& gy, int factor);

std::vector<float> global_avg(const Tensor& x);
Tensor global_avg_backward(const std::vector<float>& gy, int c, int h, int w);

void add_inplace(Tensor& dst, const Tensor& src);

// He-style fan-in init for conv weights (bias zero).
void he_init(ParamStore& ps, const Conv2d& c, rng::Stream& s);
// Zero-mean gaussian with explicit stddev; used for near-identity heads.
void gaussian_init(ParamStore& ps, const Conv2d& c, rng::Stream& s,
                   double stddev);
void he_init(ParamStore& ps, const Linear& l, rng::Stream& s);

// Adam with decoupled weight decay (decay defaults to zero and stays zero in
// this library's training recipes).
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::vector<float> m, v;
  std::int64_t step = 0;
  void init(std::size_t n) {
    m.assign(n, 0.0f);
    v.assign(n, 0.0f);
    step = 0;
  }
};

// One update over the whole store. lr == 0 leaves parameters and state
// bit-untouched (the split-learning-rate contract relies on this).
void adam_step(ParamStore& ps, const std::vector<float>& grad, AdamState& st,
               const AdamConfig& cfg, double lr);

}  // namespace mdc::nn

#include "mdc/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "mdc/errors.hpp"

namespace mdc::nn {

std::size_t ParamStore::add(const std::string& name,
                            const std::vector<int>& shape) {
  if (find(name) != nullptr)
    throw std::invalid_argument("ParamStore: duplicate parameter '" + name +
                                "'");
  std::size_t count = 1;
  for (int d : shape) {
    if (d <= 0)
      throw InvalidShapeError("ParamStore: non-positive dim in '" + name + "'");
    count *= static_cast<std::size_t>(d);
  }
  ParamInfo info{name, shape, values.size(), count};
  entries.push_back(std::move(info));
  values.resize(values.size() + count, 0.0f);
  return entries.back().offset;
}

const ParamInfo* ParamStore::find(const std::string& name) const {
  for (const ParamInfo& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

KeptMap KeptMap::from_mask(const mask::MaskMap& m) {
  KeptMap out;
  out.h = m.height();
  out.w = m.width();
  out.kept.assign(static_cast<std::size_t>(out.h) * out.w, 1);
  bool any_masked = false;
  for (int py = 0; py < m.grid_h; ++py)
    for (int px = 0; px < m.grid_w; ++px) {
      if (m.is_kept(py, px)) continue;
      any_masked = true;
      for (int y = py * m.patch_size; y < (py + 1) * m.patch_size; ++y)
        for (int x = px * m.patch_size; x < (px + 1) * m.patch_size; ++x)
          out.kept[static_cast<std::size_t>(y) * out.w + x] = 0;
    }
  if (!any_masked) out.kept.clear();  // collapse to the fast all-kept form
  return out;
}

KeptMap KeptMap::min_pool(int factor) const {
  if (factor == 1) return *this;
  if (h % factor != 0 || w % factor != 0)
    throw InvalidShapeError("KeptMap::min_pool: " + std::to_string(h) + "x" +
                            std::to_string(w) + " not divisible by " +
                            std::to_string(factor));
  KeptMap out;
  out.h = h / factor;
  out.w = w / factor;
  if (all()) return out;
  out.kept.assign(static_cast<std::size_t>(out.h) * out.w, 1);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      bool keep = true;
      for (int dy = 0; dy < factor && keep; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          if (!kept[static_cast<std::size_t>(y * factor + dy) * w + x * factor +
                    dx]) {
            keep = false;
            break;
          }
      out.kept[static_cast<std::size_t>(y) * out.w + x] = keep ? 1 : 0;
    }
  return out;
}

namespace {

// Zeroes non-kept sites; returns x untouched (by const ref semantics the
// caller keeps using the original) when the map keeps everything.
Tensor masked_copy(const Tensor& x, const KeptMap& m) {
  Tensor out = x;
  for (int y = 0; y < x.h; ++y)
    for (int xx = 0; xx < x.w; ++xx)
      if (!m.at(y, xx))
        for (int ci = 0; ci < x.c; ++ci) out.at(ci, y, xx) = 0.0f;
  return out;
}

}  // namespace

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int in_c_, int out_c_,
               int k_, int stride_, int pad_)
    : in_c(in_c_), out_c(out_c_), k(k_), stride(stride_), pad(pad_) {
  if (in_c <= 0 || out_c <= 0 || k <= 0 || stride <= 0 || pad < 0)
    throw std::invalid_argument("Conv2d: bad spec for '" + name + "'");
  w_off = ps.add(name + ".weight", {out_c, in_c, k, k});
  b_off = ps.add(name + ".bias", {out_c});
}

Tensor Conv2d::forward(const ParamStore& ps, const Tensor& x,
                       const KeptMap* kin, const KeptMap* kout) const {
  if (x.c != in_c)
    throw InvalidShapeError("Conv2d::forward: expected " +
                            std::to_string(in_c) + " channels, got " +
                            std::to_string(x.c));
  const bool mask_in = kin != nullptr && !kin->all();
  const bool mask_out = kout != nullptr && !kout->all();
  const Tensor& xin = mask_in ? masked_copy(x, *kin) : x;

  const int oh = out_h(x.h), ow = out_w(x.w);
  Tensor y(out_c, oh, ow);
  const float* w = ps.ptr(w_off);
  const float* b = ps.ptr(b_off);

  for (int oc = 0; oc < out_c; ++oc) {
    float* yplane = &y.at(oc, 0, 0);
    float bias = b[oc];
    for (int i = 0; i < oh * ow; ++i) yplane[i] = bias;
    for (int ic = 0; ic < in_c; ++ic) {
      const float* xplane = &xin.at(ic, 0, 0);
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          float wv = w[((static_cast<std::size_t>(oc) * in_c + ic) * k + ky) * k +
                       kx];
          if (wv == 0.0f) continue;
          // valid output range so the tapped input stays in bounds
          int oy0 = 0, oy1 = oh;
          while (oy0 < oh && oy0 * stride - pad + ky < 0) ++oy0;
          while (oy1 > oy0 && (oy1 - 1) * stride - pad + ky >= x.h) --oy1;
          int ox0 = 0, ox1 = ow;
          while (ox0 < ow && ox0 * stride - pad + kx < 0) ++ox0;
          while (ox1 > ox0 && (ox1 - 1) * stride - pad + kx >= x.w) --ox1;
          for (int oy = oy0; oy < oy1; ++oy) {
            const float* xrow = xplane + (oy * stride - pad + ky) * x.w;
            float* yrow = yplane + oy * ow;
            if (stride == 1) {
              const float* xp = xrow - pad + kx;
              for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xp[ox];
            } else {
              for (int ox = ox0; ox < ox1; ++ox)
                yrow[ox] += wv * xrow[ox * stride - pad + kx];
            }
          }
        }
    }
  }

  if (mask_out) {
    for (int y2 = 0; y2 < oh; ++y2)
      for (int x2 = 0; x2 < ow; ++x2)
        if (!kout->at(y2, x2))
          for (int oc = 0; oc < out_c; ++oc) y.at(oc, y2, x2) = 0.0f;
  }
  return y;
}

Tensor Conv2d::backward(const ParamStore& ps, std::vector<float>& grad,
                        const Tensor& x, const Tensor& gy, const KeptMap* kin,
                        const KeptMap* kout) const {
  if (grad.size() != ps.size())
    throw std::invalid_argument("Conv2d::backward: grad arena size mismatch");
  const bool mask_in = kin != nullptr && !kin->all();
  const bool mask_out = kout != nullptr && !kout->all();
  const Tensor& xin = mask_in ? masked_copy(x, *kin) : x;
  const Tensor& gout = mask_out ? masked_copy(gy, *kout) : gy;

  const int oh = gy.h, ow = gy.w;
  const float* w = ps.ptr(w_off);
  float* gw = grad.data() + w_off;
  float* gb = grad.data() + b_off;
  Tensor gx(in_c, x.h, x.w);

  for (int oc = 0; oc < out_c; ++oc) {
    const float* gplane = &gout.at(oc, 0, 0);
    double bacc = 0.0;
    for (int i = 0; i < oh * ow; ++i) bacc += gplane[i];
    gb[oc] += static_cast<float>(bacc);

    for (int ic = 0; ic < in_c; ++ic) {
      const float* xplane = &xin.at(ic, 0, 0);
      float* gxplane = &gx.at(ic, 0, 0);
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          int oy0 = 0, oy1 = oh;
          while (oy0 < oh && oy0 * stride - pad + ky < 0) ++oy0;
          while (oy1 > oy0 && (oy1 - 1) * stride - pad + ky >= x.h) --oy1;
          int ox0 = 0, ox1 = ow;
          while (ox0 < ow && ox0 * stride - pad + kx < 0) ++ox0;
          while (ox1 > ox0 && (ox1 - 1) * stride - pad + kx >= x.w) --ox1;

          std::size_t widx =
              ((static_cast<std::size_t>(oc) * in_c + ic) * k + ky) * k + kx;
          float wv = w[widx];
          double wacc = 0.0;
          for (int oy = oy0; oy < oy1; ++oy) {
            const float* grow = gplane + oy * ow;
            const float* xrow = xplane + (oy * stride - pad + ky) * x.w;
            float* gxrow = gxplane + (oy * stride - pad + ky) * x.w;
            if (stride == 1) {
              const float* xp = xrow - pad + kx;
              float* gxp = gxrow - pad + kx;
              for (int ox = ox0; ox < ox1; ++ox) {
                wacc += static_cast<double>(grow[ox]) * xp[ox];
                gxp[ox] += wv * grow[ox];
              }
            } else {
              for (int ox = ox0; ox < ox1; ++ox) {
                int ix = ox * stride - pad + kx;
                wacc += static_cast<double>(grow[ox]) * xrow[ix];
                gxrow[ix] += wv * grow[ox];
              }
            }
          }
          gw[widx] += static_cast<float>(wacc);
        }
    }
  }

  if (mask_in) {
    for (int y2 = 0; y2 < x.h; ++y2)
      for (int x2 = 0; x2 < x.w; ++x2)
        if (!kin->at(y2, x2))
          for (int ic = 0; ic < in_c; ++ic) gx.at(ic, y2, x2) = 0.0f;
  }
  return gx;
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, int channels_)
    : channels(channels_) {
  g_off = ps.add(name + ".gain", {channels});
  b_off = ps.add(name + ".bias", {channels});
  float* g = ps.ptr(g_off);
  for (int i = 0; i < channels; ++i) g[i] = 1.0f;
}

Tensor LayerNorm::forward(const ParamStore& ps, const Tensor& x) const {
  if (x.c != channels)
    throw InvalidShapeError("LayerNorm::forward: channel mismatch");
  const std::size_t n = x.data.size();
  double mean = 0.0;
  for (float v : x.data) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float v : x.data) {
    double d = v - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  double inv_std = 1.0 / std::sqrt(var + eps);

  const float* g = ps.ptr(g_off);
  const float* b = ps.ptr(b_off);
  Tensor y(x.c, x.h, x.w);
  for (int ci = 0; ci < x.c; ++ci) {
    float gain = g[ci], bias = b[ci];
    const float* xp = &x.at(ci, 0, 0);
    float* yp = &y.at(ci, 0, 0);
    for (int i = 0; i < x.h * x.w; ++i)
      yp[i] = static_cast<float>((xp[i] - mean) * inv_std) * gain + bias;
  }
  return y;
}

Tensor LayerNorm::backward(const ParamStore& ps, std::vector<float>& grad,
                           const Tensor& x, const Tensor& gy) const {
  const std::size_t n = x.data.size();
  double mean = 0.0;
  for (float v : x.data) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float v : x.data) {
    double d = v - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  double inv_std = 1.0 / std::sqrt(var + eps);

  const float* g = ps.ptr(g_off);
  float* gg = grad.data() + g_off;
  float* gb = grad.data() + b_off;

  // ghat = gy * gain; dx = inv_std * (ghat - mean(ghat) - xhat * mean(ghat*xhat))
  double sum_gh = 0.0, sum_ghx = 0.0;
  for (int ci = 0; ci < x.c; ++ci) {
    const float* xp = &x.at(ci, 0, 0);
    const float* gp = &gy.at(ci, 0, 0);
    double dgain = 0.0, dbias = 0.0;
    for (int i = 0; i < x.h * x.w; ++i) {
      double xhat = (xp[i] - mean) * inv_std;
      double gh = static_cast<double>(gp[i]) * g[ci];
      sum_gh += gh;
      sum_ghx += gh * xhat;
      dgain += static_cast<double>(gp[i]) * xhat;
      dbias += gp[i];
    }
    gg[ci] += static_cast<float>(dgain);
    gb[ci] += static_cast<float>(dbias);
  }
  double mean_gh = sum_gh / static_cast<double>(n);
  double mean_ghx = sum_ghx / static_cast<double>(n);

  Tensor gx(x.c, x.h, x.w);
  for (int ci = 0; ci < x.c; ++ci) {
    const float* xp = &x.at(ci, 0, 0);
    const float* gp = &gy.at(ci, 0, 0);
    float* op = &gx.at(ci, 0, 0);
    for (int i = 0; i < x.h * x.w; ++i) {
      double xhat = (xp[i] - mean) * inv_std;
      double gh = static_cast<double>(gp[i]) * g[ci];
      op[i] = static_cast<float>(inv_std * (gh - mean_gh - xhat * mean_ghx));
    }
  }
  return gx;
}

Linear::Linear(ParamStore& ps, const std::string& name, int in_, int out_)
    : in(in_), out(out_) {
  w_off = ps.add(name + ".weight", {out, in});
  b_off = ps.add(name + ".bias", {out});
}

std::vector<double> Linear::forward(const ParamStore& ps,
                                    const std::vector<float>& x) const {
  if (static_cast<int>(x.size()) != in)
    throw InvalidShapeError("Linear::forward: expected " + std::to_string(in) +
                            " inputs, got " + std::to_string(x.size()));
  const float* w = ps.ptr(w_off);
  const float* b = ps.ptr(b_off);
  std::vector<double> y(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    double acc = b[o];
    const float* wrow = w + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) acc += static_cast<double>(wrow[i]) * x[i];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

std::vector<float> Linear::backward(const ParamStore& ps,
                                    std::vector<float>& grad,
                                    const std::vector<float>& x,
                                    const std::vector<double>& gy) const {
  const float* w = ps.ptr(w_off);
  float* gw = grad.data() + w_off;
  float* gb = grad.data() + b_off;
  std::vector<float> gx(static_cast<std::size_t>(in), 0.0f);
  for (int o = 0; o < out; ++o) {
    float g = static_cast<float>(gy[static_cast<std::size_t>(o)]);
    gb[o] += g;
    const float* wrow = w + static_cast<std::size_t>(o) * in;
    float* gwrow = gw + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      gwrow[i] += g * x[static_cast<std::size_t>(i)];
      gx[static_cast<std::size_t>(i)] += g * wrow[i];
    }
  }
  return gx;
}

Tensor leaky_relu(const Tensor& x, float slope) {
  Tensor y = x;
  for (float& v : y.data)
    if (v < 0.0f) v *= slope;
  return y;
}

Tensor leaky_relu_backward(const Tensor& pre, const Tensor& gy, float slope) {
  check_same_shape(pre, gy, "leaky_relu_backward");
  Tensor gx = gy;
  for (std::size_t i = 0; i < pre.data.size(); ++i)
    if (pre.data[i] < 0.0f) gx.data[i] *= slope;
  return gx;
}

Tensor avg_pool(const Tensor& x, int factor) {
  if (factor == 1) return x;
  if (x.h % factor != 0 || x.w % factor != 0)
    throw InvalidShapeError("avg_pool: dims not divisible by factor");
  Tensor y(x.c, x.h / factor, x.w / factor);
  float norm = 1.0f / static_cast<float>(factor * factor);
  for (int ci = 0; ci < x.c; ++ci)
    for (int oy = 0; oy < y.h; ++oy)
      for (int ox = 0; ox < y.w; ++ox) {
        float acc = 0.0f;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx)
            acc += x.at(ci, oy * factor + dy, ox * factor + dx);
        y.at(ci, oy, ox) = acc * norm;
      }
  return y;
}

Tensor avg_pool_backward(const Tensor& gy, int factor) {
  if (factor == 1) return gy;
  Tensor gx(gy.c, gy.h * factor, gy.w * factor);
  float norm = 1.0f / static_cast<float>(factor * factor);
  for (int ci = 0; ci < gy.c; ++ci)
    for (int oy = 0; oy < gy.h; ++oy)
      for (int ox = 0; ox < gy.w; ++ox) {
        float g = gy.at(ci, oy, ox) * norm;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx)
            gx.at(ci, oy * factor + dy, ox * factor + dx) = g;
      }
  return gx;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (factor == 1) return x;
  Tensor y(x.c, x.h * factor, x.w * factor);
  for (int ci = 0; ci < x.c; ++ci)
    for (int yy = 0; yy < y.h; ++yy)
      for (int xx = 0; xx < y.w; ++xx)
        y.at(ci, yy, xx) = x.at(ci, yy / factor, xx / factor);
  return y;
}

Tensor upsample_nearest_backward(const Tensor& gy, int factor) {
  if (factor == 1) return gy;
  if (gy.h % factor != 0 || gy.w % factor != 0)
    throw InvalidShapeError("upsample_nearest_backward: bad dims");
  Tensor gx(gy.c, gy.h / factor, gy.w / factor);
  for (int ci = 0; ci < gy.c; ++ci)
    for (int yy = 0; yy < gy.h; ++yy)
      for (int xx = 0; xx < gy.w; ++xx)
        gx.at(ci, yy / factor, xx / factor) += gy.at(ci, yy, xx);
  return gx;
}

std::vector<float> global_avg(const Tensor& x) {
  std::vector<float> out(static_cast<std::size_t>(x.c), 0.0f);
  float norm = 1.0f / static_cast<float>(x.h * x.w);
  for (int ci = 0; ci < x.c; ++ci) {
    double acc = 0.0;
    const float* p = &x.at(ci, 0, 0);
    for (int i = 0; i < x.h * x.w; ++i) acc += p[i];
    out[static_cast<std::size_t>(ci)] = static_cast<float>(acc) * norm;
  }
  return out;
}

Tensor global_avg_backward(const std::vector<float>& gy, int c, int h, int w) {
  Tensor gx(c, h, w);
  float norm = 1.0f / static_cast<float>(h * w);
  for (int ci = 0; ci < c; ++ci) {
    float g = gy[static_cast<std::size_t>(ci)] * norm;
    float* p = &gx.at(ci, 0, 0);
    for (int i = 0; i < h * w; ++i) p[i] = g;
  }
  return gx;
}

void add_inplace(Tensor& dst, const Tensor& src) {
  check_same_shape(dst, src, "add_inplace");
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

void he_init(ParamStore& ps, const Conv2d& c, rng::Stream& s) {
  double stddev = std::sqrt(2.0 / (static_cast<double>(c.in_c) * c.k * c.k));
  float* w = ps.ptr(c.w_off);
  std::size_t n = static_cast<std::size_t>(c.out_c) * c.in_c * c.k * c.k;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = static_cast<float>(s.normal() * stddev);
  float* b = ps.ptr(c.b_off);
  for (int i = 0; i < c.out_c; ++i) b[i] = 0.0f;
}

void gaussian_init(ParamStore& ps, const Conv2d& c, rng::Stream& s,
                   double stddev) {
  float* w = ps.ptr(c.w_off);
  std::size_t n = static_cast<std::size_t>(c.out_c) * c.in_c * c.k * c.k;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = static_cast<float>(s.normal() * stddev);
  float* b = ps.ptr(c.b_off);
  for (int i = 0; i < c.out_c; ++i) b[i] = 0.0f;
}

void he_init(ParamStore& ps, const Linear& l, rng::Stream& s) {
  double stddev = std::sqrt(2.0 / static_cast<double>(l.in));
  float* w = ps.ptr(l.w_off);
  std::size_t n = static_cast<std::size_t>(l.out) * l.in;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = static_cast<float>(s.normal() * stddev);
  float* b = ps.ptr(l.b_off);
  for (int i = 0; i < l.out; ++i) b[i] = 0.0f;
}

void adam_step(ParamStore& ps, const std::vector<float>& grad, AdamState& st,
               const AdamConfig& cfg, double lr) {
  if (grad.size() != ps.size())
    throw std::invalid_argument("adam_step: grad size mismatch");
  if (st.m.size() != ps.size()) st.init(ps.size());
  if (lr == 0.0) return;  // parameters must stay bit-identical

  st.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    double g = grad[i];
    double m = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    double v = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
    st.m[i] = static_cast<float>(m);
    st.v[i] = static_cast<float>(v);
    double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
    double p = ps.values[i];
    p -= lr * update;
    if (cfg.weight_decay != 0.0) p -= lr * cfg.weight_decay * ps.values[i];
    ps.values[i] = static_cast<float>(p);
  }
}

}  // namespace mdc::nn

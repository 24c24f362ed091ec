#include "mdc/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mdc/errors.hpp"

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace mdc::model {

void EncoderConfig::validate() const {
  if (num_blocks < 2)
    throw std::invalid_argument("EncoderConfig: need at least 2 blocks, got " +
                                std::to_string(num_blocks));
  if (static_cast<int>(channels.size()) != num_blocks)
    throw std::invalid_argument("EncoderConfig: channels list has " +
                                std::to_string(channels.size()) +
                                " entries for " + std::to_string(num_blocks) +
                                " blocks");
  for (int c : channels)
    if (c <= 0) throw std::invalid_argument("EncoderConfig: channel <= 0");
  if (input_channels <= 0)
    throw std::invalid_argument("EncoderConfig: input_channels <= 0");
  if (topology == Topology::PLAIN) {
    if (static_cast<int>(strides.size()) != num_blocks)
      throw std::invalid_argument("EncoderConfig: strides list has " +
                                  std::to_string(strides.size()) +
                                  " entries for " +
                                  std::to_string(num_blocks) + " blocks");
    for (int s : strides)
      if (s != 1 && s != 2)
        throw std::invalid_argument("EncoderConfig: strides must be 1 or 2");
  } else {
    // U-shaped topology: skip connections add down-path outputs into
    // up-path outputs, so mirrored blocks must agree on channel count.
    int downs = (num_blocks + 1) / 2;
    for (int j = 1; j <= downs - 1; ++j)
      if (channels[static_cast<std::size_t>(downs + j - 1)] !=
          channels[static_cast<std::size_t>(downs - j - 1)])
        throw std::invalid_argument(
            "EncoderConfig: UNET_LITE channels must mirror (block " +
            std::to_string(downs + j) + " vs block " +
            std::to_string(downs - j) + ")");
  }
}

std::vector<int> tap_indices(int num_blocks) {
  std::vector<int> taps;
  for (int i = num_blocks / 2 + 1; i <= num_blocks; ++i) taps.push_back(i);
  return taps;
}

std::vector<BlockPlan> plan_blocks(const EncoderConfig& cfg) {
  cfg.validate();
  const int l = cfg.num_blocks;
  std::vector<BlockPlan> plan(static_cast<std::size_t>(l));
  int in_c = cfg.input_channels;
  int factor = 1;

  if (cfg.topology == Topology::PLAIN) {
    for (int b = 0; b < l; ++b) {
      BlockPlan& p = plan[static_cast<std::size_t>(b)];
      p.in_c = in_c;
      p.out_c = cfg.channels[static_cast<std::size_t>(b)];
      p.stride = cfg.strides[static_cast<std::size_t>(b)];
      p.up = 1;
      p.skip_from = 0;
      p.residual = p.stride == 1 && p.in_c == p.out_c;
      p.in_factor = factor;
      factor *= p.stride;
      p.out_factor = factor;
      in_c = p.out_c;
    }
  } else {
    const int downs = (l + 1) / 2;
    for (int b = 0; b < l; ++b) {
      BlockPlan& p = plan[static_cast<std::size_t>(b)];
      p.in_c = in_c;
      p.out_c = cfg.channels[static_cast<std::size_t>(b)];
      if (b < downs) {
        p.stride = b == 0 ? 1 : 2;
        p.up = 1;
        p.skip_from = 0;
      } else {
        int j = b - downs + 1;  // index on the up path
        p.stride = 1;
        p.up = j <= downs - 1 ? 2 : 1;
        p.skip_from = j <= downs - 1 ? downs - j : 0;
      }
      p.in_factor = factor;
      factor = factor / p.up * p.stride;
      p.out_factor = factor;
      p.residual =
          p.stride == 1 && p.up == 1 && p.skip_from == 0 && p.in_c == p.out_c;
      in_c = p.out_c;
    }
  }
  return plan;
}

namespace {

void zero_non_kept(Tensor& t, const nn::KeptMap& m) {
  if (m.all()) return;
  for (int y = 0; y < t.h; ++y)
    for (int x = 0; x < t.w; ++x)
      if (!m.at(y, x))
        for (int ci = 0; ci < t.c; ++ci) t.at(ci, y, x) = 0.0f;
}

double dot(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    acc += static_cast<double>(a.data[i]) * b.data[i];
  return acc;
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (dst.size() == 0)
    dst = src;
  else
    nn::add_inplace(dst, src);
}

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg), plan_(plan_blocks(cfg)) {
  convs_.reserve(plan_.size());
  for (std::size_t b = 0; b < plan_.size(); ++b) {
    const BlockPlan& p = plan_[b];
    convs_.emplace_back(ps_, "block" + std::to_string(b + 1), p.in_c, p.out_c,
                        3, p.stride, 1);
    rng::Stream s(rng::derive(init_seed, "encoder-conv", b));
    nn::he_init(ps_, convs_.back(), s);
  }
}

FeaturePyramid Encoder::forward(const Tensor& x, const mask::MaskMap* mask,
                                Trace* tr) const {
  if (x.c != cfg_.input_channels)
    throw InvalidShapeError("Encoder::forward: expected " +
                            std::to_string(cfg_.input_channels) +
                            " input channels, got " + std::to_string(x.c));
  if (mask != nullptr && !cfg_.masked_mode)
    throw std::invalid_argument(
        "Encoder::forward: mask passed to an encoder without masked_mode");
  if (mask != nullptr && (mask->height() != x.h || mask->width() != x.w))
    throw InvalidShapeError("Encoder::forward: mask " +
                            std::to_string(mask->height()) + "x" +
                            std::to_string(mask->width()) + " vs input " +
                            std::to_string(x.h) + "x" + std::to_string(x.w));
  int max_factor = 1;
  for (const BlockPlan& p : plan_)
    max_factor = std::max(max_factor, p.out_factor);
  if (x.h % max_factor != 0 || x.w % max_factor != 0)
    throw InvalidShapeError("Encoder::forward: input dims must be multiples of " +
                            std::to_string(max_factor));

  const bool masked = cfg_.masked_mode && mask != nullptr;
  std::map<int, nn::KeptMap> canon;
  if (masked) canon.emplace(1, nn::KeptMap::from_mask(*mask));
  auto canon_at = [&](int f) -> const nn::KeptMap* {
    if (!masked) return nullptr;
    auto it = canon.find(f);
    if (it == canon.end()) it = canon.emplace(f, canon.at(1).min_pool(f)).first;
    return &it->second;
  };

  const int l = cfg_.num_blocks;
  std::vector<Tensor> outs(static_cast<std::size_t>(l));
  if (tr) {
    tr->conv_in.resize(static_cast<std::size_t>(l));
    tr->preact.resize(static_cast<std::size_t>(l));
    tr->out.resize(static_cast<std::size_t>(l));
    tr->in_map.resize(static_cast<std::size_t>(l));
    tr->out_map.resize(static_cast<std::size_t>(l));
  }

  Tensor cur = x;
  for (int b = 0; b < l; ++b) {
    const BlockPlan& p = plan_[static_cast<std::size_t>(b)];
    Tensor cin = p.up == 2 ? nn::upsample_nearest(cur, 2) : std::move(cur);
    // cin lives at the post-upsample resolution.
    const nn::KeptMap* kin = canon_at(p.in_factor / p.up);
    const nn::KeptMap* kout = canon_at(p.out_factor);
    Tensor pre = convs_[static_cast<std::size_t>(b)].forward(ps_, cin, kin, kout);
    Tensor out = nn::leaky_relu(pre, 0.1f);
    if (p.residual) nn::add_inplace(out, cin);
    if (p.skip_from > 0)
      nn::add_inplace(out, outs[static_cast<std::size_t>(p.skip_from - 1)]);
    // Keep the masked-site invariant airtight after residual/skip adds.
    if (kout != nullptr) zero_non_kept(out, *kout);
    if (tr) {
      tr->conv_in[static_cast<std::size_t>(b)] = cin;
      tr->preact[static_cast<std::size_t>(b)] = std::move(pre);
      tr->in_map[static_cast<std::size_t>(b)] =
          kin ? *kin : nn::KeptMap::all_kept(cin.h, cin.w);
      tr->out_map[static_cast<std::size_t>(b)] =
          kout ? *kout : nn::KeptMap::all_kept(out.h, out.w);
    }
    outs[static_cast<std::size_t>(b)] = std::move(out);
    cur = outs[static_cast<std::size_t>(b)];
  }
  if (tr) tr->out = outs;

  FeaturePyramid pyr;
  for (int i : tap_indices(l)) {
    FeatureEntry e;
    e.block_index = i;
    e.feature = outs[static_cast<std::size_t>(i - 1)];
    const nn::KeptMap* km =
        canon_at(plan_[static_cast<std::size_t>(i - 1)].out_factor);
    e.trace = km ? *km : nn::KeptMap::all_kept(e.feature.h, e.feature.w);
    pyr.entries.push_back(std::move(e));
  }
  return pyr;
}

Tensor Encoder::backward(const Trace& tr, const std::vector<Tensor>& tap_grads,
                         std::vector<float>& grad) const {
  const int l = cfg_.num_blocks;
  std::vector<int> taps = tap_indices(l);
  if (tap_grads.size() != taps.size())
    throw std::invalid_argument("Encoder::backward: tap gradient count " +
                                std::to_string(tap_grads.size()) + " vs " +
                                std::to_string(taps.size()) + " taps");

  std::vector<Tensor> gout(static_cast<std::size_t>(l));
  for (std::size_t i = 0; i < taps.size(); ++i)
    if (tap_grads[i].size() != 0)
      accumulate(gout[static_cast<std::size_t>(taps[i] - 1)], tap_grads[i]);

  Tensor gx;
  for (int b = l; b >= 1; --b) {
    const BlockPlan& p = plan_[static_cast<std::size_t>(b - 1)];
    Tensor g = std::move(gout[static_cast<std::size_t>(b - 1)]);
    if (g.size() == 0) {
      const Tensor& o = tr.out[static_cast<std::size_t>(b - 1)];
      g = Tensor(o.c, o.h, o.w);
    }
    // Mirror the forward pass's projection onto kept sites.
    zero_non_kept(g, tr.out_map[static_cast<std::size_t>(b - 1)]);
    if (p.skip_from > 0)
      accumulate(gout[static_cast<std::size_t>(p.skip_from - 1)], g);
    Tensor gpre = nn::leaky_relu_backward(
        tr.preact[static_cast<std::size_t>(b - 1)], g, 0.1f);
    Tensor gin = convs_[static_cast<std::size_t>(b - 1)].backward(
        ps_, grad, tr.conv_in[static_cast<std::size_t>(b - 1)], gpre,
        &tr.in_map[static_cast<std::size_t>(b - 1)],
        &tr.out_map[static_cast<std::size_t>(b - 1)]);
    if (p.residual) nn::add_inplace(gin, g);
    if (p.up == 2) gin = nn::upsample_nearest_backward(gin, 2);
    if (b == 1)
      gx = std::move(gin);
    else
      accumulate(gout[static_cast<std::size_t>(b - 2)], gin);
  }
  return gx;
}

void ClsDecoderConfig::validate() const {
  if (num_classes < 2)
    throw std::invalid_argument("ClsDecoderConfig: need at least 2 classes");
  if (base_width <= 0 || blocks_per_stage <= 0)
    throw std::invalid_argument("ClsDecoderConfig: non-positive size field");
}

ClsDecoder::ClsDecoder(const ClsDecoderConfig& cfg,
                       const EncoderConfig& enc_cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg.validate();
  std::vector<BlockPlan> plan = plan_blocks(enc_cfg);
  std::vector<int> taps = tap_indices(enc_cfg.num_blocks);
  const int S = static_cast<int>(taps.size());

  for (int i : taps) {
    tap_channels_.push_back(plan[static_cast<std::size_t>(i - 1)].out_c);
    tap_factor_.push_back(plan[static_cast<std::size_t>(i - 1)].out_factor);
  }
  for (int i = 0; i < S; ++i) {
    stage_width_.push_back(cfg.base_width << i);
    stage_factor_.push_back(tap_factor_[0] << i);
    if (stage_factor_[static_cast<std::size_t>(i)] %
            tap_factor_[static_cast<std::size_t>(i)] !=
        0)
      throw std::invalid_argument(
          "ClsDecoder: tap " + std::to_string(i + 1) +
          " resolution incompatible with its classifier stage");
    pool_factor_.push_back(stage_factor_[static_cast<std::size_t>(i)] /
                           tap_factor_[static_cast<std::size_t>(i)]);
  }

  int init_idx = 0;
  auto stream = [&]() {
    return rng::Stream(
        rng::derive(init_seed, "cls-init", static_cast<std::uint64_t>(init_idx++)));
  };

  conv1_.resize(static_cast<std::size_t>(S));
  conv2_.resize(static_cast<std::size_t>(S));
  ln1_.resize(static_cast<std::size_t>(S));
  ln2_.resize(static_cast<std::size_t>(S));
  for (int i = 1; i <= S; ++i) {
    std::string sp = "stage" + std::to_string(i);
    omega_off_.push_back(ps_.add("omega" + std::to_string(i), {1}));
    ps_.values[omega_off_.back()] = 1.0f;  // identity scaling at start

    proj_.emplace_back(ps_, sp + ".proj",
                       tap_channels_[static_cast<std::size_t>(i - 1)],
                       stage_width_[static_cast<std::size_t>(i - 1)], 1, 1, 0);
    {
      rng::Stream s = stream();
      nn::he_init(ps_, proj_.back(), s);
    }
    if (i >= 2) {
      trans_.emplace_back(ps_, sp + ".trans",
                          stage_width_[static_cast<std::size_t>(i - 2)],
                          stage_width_[static_cast<std::size_t>(i - 1)], 1, 2,
                          0);
      rng::Stream s = stream();
      nn::he_init(ps_, trans_.back(), s);
    }
    int w = stage_width_[static_cast<std::size_t>(i - 1)];
    for (int j = 1; j <= cfg.blocks_per_stage; ++j) {
      std::string bp = sp + ".block" + std::to_string(j);
      conv1_[static_cast<std::size_t>(i - 1)].emplace_back(ps_, bp + ".conv1",
                                                           w, w, 3, 1, 1);
      {
        rng::Stream s = stream();
        nn::he_init(ps_, conv1_[static_cast<std::size_t>(i - 1)].back(), s);
      }
      ln1_[static_cast<std::size_t>(i - 1)].emplace_back(ps_, bp + ".ln1", w);
      conv2_[static_cast<std::size_t>(i - 1)].emplace_back(ps_, bp + ".conv2",
                                                           w, w, 3, 1, 1);
      {
        rng::Stream s = stream();
        nn::he_init(ps_, conv2_[static_cast<std::size_t>(i - 1)].back(), s);
      }
      ln2_[static_cast<std::size_t>(i - 1)].emplace_back(ps_, bp + ".ln2", w);
    }
  }
  head_ = nn::Linear(ps_, "head", stage_width_.back(), cfg.num_classes);
  {
    rng::Stream s = stream();
    nn::he_init(ps_, head_, s);
  }
}

double ClsDecoder::omega(int stage) const {
  return ps_.values[omega_off_[static_cast<std::size_t>(stage - 1)]];
}

std::vector<double> ClsDecoder::forward(const FeaturePyramid& pyr,
                                        Trace* tr) const {
  const int S = stages();
  if (static_cast<int>(pyr.entries.size()) != S)
    throw std::invalid_argument("ClsDecoder::forward: tap count " +
                                std::to_string(pyr.entries.size()) +
                                " does not match " + std::to_string(S) +
                                " decoder stages");
  if (tr) tr->stages.assign(static_cast<std::size_t>(S), {});

  Tensor y;
  for (int i = 0; i < S; ++i) {
    const Tensor& F = pyr.entries[static_cast<std::size_t>(i)].feature;
    if (F.c != tap_channels_[static_cast<std::size_t>(i)])
      throw InvalidShapeError("ClsDecoder::forward: tap " + std::to_string(i + 1) +
                              " has " + std::to_string(F.c) +
                              " channels, expected " +
                              std::to_string(tap_channels_[static_cast<std::size_t>(i)]));
    float w = ps_.values[omega_off_[static_cast<std::size_t>(i)]];
    Tensor scaled = F;
    for (float& v : scaled.data) v *= w;
    Tensor pooled = nn::avg_pool(scaled, pool_factor_[static_cast<std::size_t>(i)]);
    Tensor inj = proj_[static_cast<std::size_t>(i)].forward(ps_, pooled);

    Tensor cur;
    if (i == 0) {
      cur = std::move(inj);
    } else {
      cur = trans_[static_cast<std::size_t>(i - 1)].forward(ps_, y);
      if (!cur.same_shape(inj))
        throw InvalidShapeError(
            "ClsDecoder::forward: stage " + std::to_string(i + 1) +
            " shape mismatch (input too small for the stage pyramid?)");
      nn::add_inplace(cur, inj);
    }

    if (tr) {
      tr->stages[static_cast<std::size_t>(i)].tap = F;
      tr->stages[static_cast<std::size_t>(i)].pooled = pooled;
      tr->stages[static_cast<std::size_t>(i)].blocks.resize(
          static_cast<std::size_t>(cfg_.blocks_per_stage));
    }

    for (int j = 0; j < cfg_.blocks_per_stage; ++j) {
      const nn::Conv2d& c1 = conv1_[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      const nn::Conv2d& c2 = conv2_[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      const nn::LayerNorm& l1 = ln1_[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      const nn::LayerNorm& l2 = ln2_[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      Tensor t1 = c1.forward(ps_, cur);
      Tensor n1 = l1.forward(ps_, t1);
      Tensor a1 = nn::leaky_relu(n1, 0.1f);
      Tensor t2 = c2.forward(ps_, a1);
      Tensor n2 = l2.forward(ps_, t2);
      Tensor pre2 = cur;
      nn::add_inplace(pre2, n2);
      Tensor next = nn::leaky_relu(pre2, 0.1f);
      if (tr) {
        auto& bl = tr->stages[static_cast<std::size_t>(i)]
                       .blocks[static_cast<std::size_t>(j)];
        bl.in = std::move(cur);
        bl.t1 = std::move(t1);
        bl.n1 = std::move(n1);
        bl.a1 = std::move(a1);
        bl.t2 = std::move(t2);
        bl.pre2 = std::move(pre2);
      }
      cur = std::move(next);
    }
    if (tr) tr->stages[static_cast<std::size_t>(i)].out = cur;
    y = std::move(cur);
  }

  std::vector<float> gap = nn::global_avg(y);
  if (tr) tr->gap = gap;
  return head_.forward(ps_, gap);
}

std::vector<Tensor> ClsDecoder::backward(const Trace& tr,
                                         const std::vector<double>& glogits,
                                         std::vector<float>& grad) const {
  const int S = stages();
  std::vector<float> ggap = head_.backward(ps_, grad, tr.gap, glogits);
  const Tensor& yS = tr.stages.back().out;
  Tensor g = nn::global_avg_backward(ggap, yS.c, yS.h, yS.w);

  std::vector<Tensor> gF(static_cast<std::size_t>(S));
  for (int i = S; i >= 1; --i) {
    const Trace::Stage& st = tr.stages[static_cast<std::size_t>(i - 1)];
    for (int j = cfg_.blocks_per_stage; j >= 1; --j) {
      const Trace::Block& bl = st.blocks[static_cast<std::size_t>(j - 1)];
      const nn::Conv2d& c1 = conv1_[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)];
      const nn::Conv2d& c2 = conv2_[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)];
      const nn::LayerNorm& l1 = ln1_[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)];
      const nn::LayerNorm& l2 = ln2_[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)];

      Tensor gpre2 = nn::leaky_relu_backward(bl.pre2, g, 0.1f);
      Tensor gt2 = l2.backward(ps_, grad, bl.t2, gpre2);
      Tensor ga1 = c2.backward(ps_, grad, bl.a1, gt2);
      Tensor gn1 = nn::leaky_relu_backward(bl.n1, ga1, 0.1f);
      Tensor gt1 = l1.backward(ps_, grad, bl.t1, gn1);
      Tensor gin = c1.backward(ps_, grad, bl.in, gt1);
      nn::add_inplace(gin, gpre2);  // identity branch of the residual block
      g = std::move(gin);
    }
    // g is now the gradient at the stage input = trans(prev) + proj(pooled).
    Tensor gpooled = proj_[static_cast<std::size_t>(i - 1)].backward(
        ps_, grad, st.pooled, g);
    Tensor gscaled =
        nn::avg_pool_backward(gpooled, pool_factor_[static_cast<std::size_t>(i - 1)]);
    grad[omega_off_[static_cast<std::size_t>(i - 1)]] +=
        static_cast<float>(dot(gscaled, st.tap));
    float w = ps_.values[omega_off_[static_cast<std::size_t>(i - 1)]];
    Tensor& gf = gF[static_cast<std::size_t>(i - 1)];
    gf = std::move(gscaled);
    for (float& v : gf.data) v *= w;

    if (i >= 2)
      g = trans_[static_cast<std::size_t>(i - 2)].backward(
          ps_, grad, tr.stages[static_cast<std::size_t>(i - 2)].out, g);
  }
  return gF;
}

ReconDecoder::ReconDecoder(int in_channels, int in_factor, int out_channels,
                           std::uint64_t init_seed, bool near_zero_final)
    : in_channels_(in_channels),
      in_factor_(in_factor),
      out_channels_(out_channels) {
  if (in_channels <= 0 || out_channels <= 0)
    throw std::invalid_argument("ReconDecoder: non-positive channel count");
  int f = in_factor, ups = 0;
  while (f > 1) {
    if (f % 2 != 0)
      throw std::invalid_argument(
          "ReconDecoder: input downsample factor must be a power of 2, got " +
          std::to_string(in_factor));
    f /= 2;
    ++ups;
  }

  int w = in_channels;
  convs_.emplace_back(ps_, "conv0", in_channels, w, 3, 1, 1);
  pre_up_.push_back(1);
  for (int j = 1; j <= ups; ++j) {
    int w2 = std::max(16, w / 2);
    convs_.emplace_back(ps_, "up" + std::to_string(j), w, w2, 3, 1, 1);
    pre_up_.push_back(2);
    w = w2;
  }
  convs_.emplace_back(ps_, "final", w, out_channels, 3, 1, 1);
  pre_up_.push_back(1);

  for (std::size_t i = 0; i < convs_.size(); ++i) {
    rng::Stream s(rng::derive(init_seed, "recon-conv", i));
    if (i + 1 == convs_.size() && near_zero_final)
      nn::gaussian_init(ps_, convs_[i], s, 1e-3);
    else
      nn::he_init(ps_, convs_[i], s);
  }
}

Tensor ReconDecoder::forward(const Tensor& f, Trace* tr) const {
  if (f.c != in_channels_)
    throw InvalidShapeError("ReconDecoder::forward: expected " +
                            std::to_string(in_channels_) + " channels, got " +
                            std::to_string(f.c));
  if (tr) {
    tr->conv_in.resize(convs_.size());
    tr->preact.resize(convs_.size());
  }
  Tensor cur = f;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    if (pre_up_[i] == 2) cur = nn::upsample_nearest(cur, 2);
    Tensor pre = convs_[i].forward(ps_, cur);
    if (tr) {
      tr->conv_in[i] = std::move(cur);
      tr->preact[i] = pre;
    }
    cur = i + 1 < convs_.size() ? nn::leaky_relu(pre, 0.1f) : std::move(pre);
  }
  return cur;
}

Tensor ReconDecoder::backward(const Trace& tr, const Tensor& gy,
                              std::vector<float>& grad) const {
  Tensor g = gy;
  for (int i = static_cast<int>(convs_.size()) - 1; i >= 0; --i) {
    std::size_t ui = static_cast<std::size_t>(i);
    Tensor gpre = ui + 1 < convs_.size()
                      ? nn::leaky_relu_backward(tr.preact[ui], g, 0.1f)
                      : std::move(g);
    Tensor gin = convs_[ui].backward(ps_, grad, tr.conv_in[ui], gpre);
    if (pre_up_[ui] == 2) gin = nn::upsample_nearest_backward(gin, 2);
    g = std::move(gin);
  }
  return g;
}

PretrainModel::PretrainModel(const EncoderConfig& enc_cfg,
                             const ClsDecoderConfig& cls_cfg,
                             std::uint64_t seed)
    : encoder(enc_cfg, rng::derive(seed, "encoder")),
      cls(cls_cfg, enc_cfg, rng::derive(seed, "cls-decoder")),
      recon(encoder.deepest_channels(), encoder.deepest_factor(),
            enc_cfg.input_channels, rng::derive(seed, "recon-decoder"),
            /*near_zero_final=*/false) {}

namespace {

EncoderConfig unmasked(EncoderConfig cfg) {
  cfg.masked_mode = false;
  return cfg;
}

}  // namespace

RestorationModel::RestorationModel(EncoderConfig enc_cfg, std::uint64_t seed)
    : encoder(unmasked(std::move(enc_cfg)), rng::derive(seed, "encoder")),
      head(encoder.deepest_channels(), encoder.deepest_factor(),
           encoder.config().input_channels, rng::derive(seed, "head"),
           /*near_zero_final=*/true) {}

Tensor RestorationModel::restore(const Tensor& lq) const {
  FeaturePyramid pyr = encoder.forward(lq, nullptr);
  Tensor res = head.forward(pyr.entries.back().feature);
  Tensor out = lq;
  nn::add_inplace(out, res);
  return out;
}

// ---- checkpoints -----------------------------------------------------------

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  json h;
  h["format_version"] = c.format_version;
  h["kind"] = c.kind;
  h["config"] = c.config;
  h["meta"] = {{"iteration", c.meta.iteration},
               {"seed", c.meta.seed},
               {"loss_digest", c.meta.loss_digest}};
  json tens = json::array();
  std::uint64_t offset = 0;
  for (const NamedTensor& t : c.tensors) {
    tens.push_back({{"name", t.name},
                    {"shape", t.shape},
                    {"dtype", "f32"},
                    {"offset", offset},
                    {"count", t.data.size()}});
    offset += t.data.size();
  }
  h["tensors"] = std::move(tens);
  std::string header = h.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("save_checkpoint: cannot open " + path);
  out.write("MDCCKPT1", 8);
  std::uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const NamedTensor& t : c.tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!out) throw CheckpointError("save_checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "MDCCKPT1", 8) != 0)
    throw CheckpointError("load_checkpoint: bad magic in " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || hlen == 0 || hlen > (1ull << 30))
    throw CheckpointError("load_checkpoint: bad header length in " + path);
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw CheckpointError("load_checkpoint: truncated header in " + path);

  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw CheckpointError("load_checkpoint: bad header JSON in " + path + ": " +
                          e.what());
  }
  Checkpoint c;
  try {
    c.format_version = h.at("format_version").get<int>();
    if (c.format_version != 1)
      throw CheckpointError("load_checkpoint: unsupported format version " +
                            std::to_string(c.format_version) + " in " + path);
    c.kind = h.at("kind").get<std::string>();
    for (auto& [k, v] : h.at("config").items())
      c.config[k] = v.get<std::string>();
    c.meta.iteration = h.at("meta").at("iteration").get<std::int64_t>();
    c.meta.seed = h.at("meta").at("seed").get<std::uint64_t>();
    c.meta.loss_digest = h.at("meta").at("loss_digest").get<std::string>();
    for (const json& tj : h.at("tensors")) {
      NamedTensor t;
      t.name = tj.at("name").get<std::string>();
      t.shape = tj.at("shape").get<std::vector<int>>();
      std::size_t count = tj.at("count").get<std::size_t>();
      t.data.resize(count);
      c.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw CheckpointError("load_checkpoint: malformed header in " + path +
                          ": " + e.what());
  }
  for (NamedTensor& t : c.tensors) {
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in)
      throw CheckpointError("load_checkpoint: truncated tensor '" + t.name +
                            "' in " + path);
  }
  return c;
}

void dump_store(Checkpoint& c, const std::string& prefix,
                const nn::ParamStore& ps) {
  for (const nn::ParamInfo& e : ps.entries) {
    NamedTensor t;
    t.name = prefix + "." + e.name;
    t.shape = e.shape;
    t.data.assign(ps.values.begin() + static_cast<std::ptrdiff_t>(e.offset),
                  ps.values.begin() +
                      static_cast<std::ptrdiff_t>(e.offset + e.count));
    c.tensors.push_back(std::move(t));
  }
}

void load_store(const Checkpoint& c, const std::string& prefix,
                nn::ParamStore& ps) {
  for (const nn::ParamInfo& e : ps.entries) {
    std::string name = prefix + "." + e.name;
    const NamedTensor* t = c.find(name);
    if (t == nullptr)
      throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (t->shape != e.shape || t->data.size() != e.count) {
      std::ostringstream os;
      os << "shape mismatch for tensor '" << name << "': checkpoint [";
      for (std::size_t i = 0; i < t->shape.size(); ++i)
        os << (i ? "," : "") << t->shape[i];
      os << "] vs model [";
      for (std::size_t i = 0; i < e.shape.size(); ++i)
        os << (i ? "," : "") << e.shape[i];
      os << "]";
      throw CheckpointError(os.str());
    }
    std::copy(t->data.begin(), t->data.end(),
              ps.values.begin() + static_cast<std::ptrdiff_t>(e.offset));
  }
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

const std::string& require(const std::map<std::string, std::string>& m,
                           const std::string& key) {
  auto it = m.find(key);
  if (it == m.end())
    throw CheckpointError("checkpoint config is missing key '" + key + "'");
  return it->second;
}

}  // namespace

std::map<std::string, std::string> encoder_config_map(const EncoderConfig& c) {
  std::map<std::string, std::string> m;
  m["encoder.num_blocks"] = std::to_string(c.num_blocks);
  m["encoder.channels"] = join_ints(c.channels);
  m["encoder.strides"] = join_ints(c.strides);
  m["encoder.input_channels"] = std::to_string(c.input_channels);
  m["encoder.topology"] =
      c.topology == Topology::PLAIN ? "plain" : "unet_lite";
  return m;
}

EncoderConfig encoder_config_from_map(
    const std::map<std::string, std::string>& m) {
  EncoderConfig c;
  c.num_blocks = std::stoi(require(m, "encoder.num_blocks"));
  c.channels = parse_int_list(require(m, "encoder.channels"));
  c.strides = parse_int_list(require(m, "encoder.strides"));
  c.input_channels = std::stoi(require(m, "encoder.input_channels"));
  const std::string& topo = require(m, "encoder.topology");
  if (topo == "plain")
    c.topology = Topology::PLAIN;
  else if (topo == "unet_lite")
    c.topology = Topology::UNET_LITE;
  else
    throw CheckpointError("unknown encoder topology '" + topo + "'");
  c.validate();
  return c;
}

std::map<std::string, std::string> cls_config_map(const ClsDecoderConfig& c) {
  std::map<std::string, std::string> m;
  m["cls.num_classes"] = std::to_string(c.num_classes);
  m["cls.base_width"] = std::to_string(c.base_width);
  m["cls.blocks_per_stage"] = std::to_string(c.blocks_per_stage);
  return m;
}

ClsDecoderConfig cls_config_from_map(
    const std::map<std::string, std::string>& m) {
  ClsDecoderConfig c;
  c.num_classes = std::stoi(require(m, "cls.num_classes"));
  c.base_width = std::stoi(require(m, "cls.base_width"));
  c.blocks_per_stage = std::stoi(require(m, "cls.blocks_per_stage"));
  c.validate();
  return c;
}

void export_encoder(const std::string& checkpoint_path,
                    const std::string& out_path) {
  Checkpoint full = load_checkpoint(checkpoint_path);
  if (full.kind != "pretrain" && full.kind != "encoder")
    throw CheckpointError("export_encoder: cannot export from a '" +
                          full.kind + "' checkpoint");
  Checkpoint enc;
  enc.kind = "encoder";
  enc.meta = full.meta;
  for (const auto& [k, v] : full.config)
    if (k.rfind("encoder.", 0) == 0) enc.config[k] = v;
  for (const NamedTensor& t : full.tensors)
    if (t.name.rfind("encoder.", 0) == 0) enc.tensors.push_back(t);
  save_checkpoint(enc, out_path);
}

void import_encoder(const std::string& checkpoint_path,
                    RestorationModel& target) {
  Checkpoint c = load_checkpoint(checkpoint_path);
  if (c.kind != "pretrain" && c.kind != "encoder")
    throw CheckpointError("import_encoder: cannot import from a '" + c.kind +
                          "' checkpoint");
  std::map<std::string, std::string> want =
      encoder_config_map(target.encoder.config());
  for (const auto& [k, v] : want) {
    auto it = c.config.find(k);
    if (it == c.config.end())
      throw CheckpointError("import_encoder: checkpoint lacks config key '" +
                            k + "'");
    if (it->second != v)
      throw CheckpointError("import_encoder: config mismatch on '" + k +
                            "': checkpoint '" + it->second + "' vs model '" +
                            v + "'");
  }
  load_store(c, "encoder", target.encoder.params());
}

}  // namespace mdc::model

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mdc/masking.hpp"
#include "mdc/nn.hpp"
#include "mdc/tensor.hpp"

// The masked encoder with its two pre-training decoders, the fine-tuning
// restoration model, and checkpoint serialization.
//
// Encoder blocks are 3×3 convolutions with leaky-ReLU activations and
// residual adds where shapes permit. The latter half of the blocks
// (indices floor(l/2)+1 .. l) export their outputs as the feature pyramid.
// In masked mode every convolution is restricted to kept sites ("masked"
// convolution), where the kept map at each resolution is the conservative
// min-pool of the pixel-level map — a feature site counts as kept only if
// every pixel it covers is kept, so values inside masked patches can never
// influence any exported feature.
namespace mdc::model {

enum class Topology { PLAIN = 0, UNET_LITE = 1 };

struct EncoderConfig {
  int num_blocks = 8;
  std::vector<int> channels = {32, 32, 32, 48, 48, 48, 64, 64};
  // PLAIN: per-block conv stride (1 or 2). UNET_LITE ignores this and derives
  // its own down/up geometry from num_blocks.
  std::vector<int> strides = {1, 1, 2, 1, 1, 2, 1, 1};
  int input_channels = 3;
  Topology topology = Topology::PLAIN;
  // Runtime mode, not an architectural property: the same weights serve both
  // modes, so this field is not serialized into checkpoints.
  bool masked_mode = false;

  void validate() const;  // throws std::invalid_argument on inconsistency
};

// 1-based indices of the exported blocks: floor(l/2)+1 .. l.
std::vector<int> tap_indices(int num_blocks);

// Static per-block geometry derived from a config.
struct BlockPlan {
  int in_c = 0, out_c = 0;
  int stride = 1;     // conv stride (1 or 2)
  int up = 1;         // nearest-neighbor upsample factor applied before conv
  int skip_from = 0;  // 1-based index of a block whose output adds into this
                      // block's output (0 = none)
  bool residual = false;  // add the block input to the activation output
  int in_factor = 1;      // downsample factor of the block input vs pixels
  int out_factor = 1;
};
std::vector<BlockPlan> plan_blocks(const EncoderConfig& cfg);

struct FeatureEntry {
  int block_index = 0;  // 1-based
  Tensor feature;
  nn::KeptMap trace;  // kept/masked map aligned with the feature's resolution
};
struct FeaturePyramid {
  std::vector<FeatureEntry> entries;  // block indices strictly increasing
};

class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, std::uint64_t init_seed);

  // Everything the backward pass needs from a forward pass.
  struct Trace {
    std::vector<Tensor> conv_in;  // per block: conv input (after upsample)
    std::vector<Tensor> preact;   // per block: conv output before activation
    std::vector<Tensor> out;      // per block: block output
    std::vector<nn::KeptMap> in_map, out_map;
  };

  // mask may be null (plain forward). Passing a mask requires masked_mode.
  FeaturePyramid forward(const Tensor& x, const mask::MaskMap* mask,
                         Trace* trace = nullptr) const;

  // tap_grads aligns with the pyramid entries (empty tensors are treated as
  // zero). Accumulates parameter gradients into `grad` and returns dL/dx.
  Tensor backward(const Trace& tr, const std::vector<Tensor>& tap_grads,
                  std::vector<float>& grad) const;

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<BlockPlan>& plan() const { return plan_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

  int deepest_channels() const { return plan_.back().out_c; }
  int deepest_factor() const { return plan_.back().out_factor; }

 private:
  EncoderConfig cfg_;
  std::vector<BlockPlan> plan_;
  std::vector<nn::Conv2d> convs_;
  nn::ParamStore ps_;
};

// Lightweight residual classifier fed by the tapped features: one stage per
// tap, stage resolutions halving from the first tap's. Each tap is scaled by
// a learnable scalar omega_i, average-pooled to its stage's resolution,
// projected by a 1×1 conv and added into the stage input. Normalization is
// per-sample (layer-style), never across the batch.
struct ClsDecoderConfig {
  int num_classes = 5;
  int base_width = 16;  // stage widths: base, 2*base, 4*base, ...
  int blocks_per_stage = 2;

  void validate() const;
};

class ClsDecoder {
 public:
  ClsDecoder(const ClsDecoderConfig& cfg, const EncoderConfig& enc_cfg,
             std::uint64_t init_seed);

  struct Trace {
    struct Block {
      Tensor in, t1, n1, a1, t2, pre2;
    };
    struct Stage {
      Tensor tap, pooled;
      std::vector<Block> blocks;
      Tensor out;
    };
    std::vector<Stage> stages;
    std::vector<float> gap;
  };

  std::vector<double> forward(const FeaturePyramid& pyr,
                              Trace* trace = nullptr) const;
  // Returns dL/dF_i per pyramid entry.
  std::vector<Tensor> backward(const Trace& tr,
                               const std::vector<double>& glogits,
                               std::vector<float>& grad) const;

  const ClsDecoderConfig& config() const { return cfg_; }
  int stages() const { return static_cast<int>(stage_width_.size()); }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  double omega(int stage) const;  // 1-based, for inspection in tests

 private:
  ClsDecoderConfig cfg_;
  std::vector<int> tap_channels_, tap_factor_;
  std::vector<int> stage_width_, stage_factor_, pool_factor_;
  std::vector<std::size_t> omega_off_;
  std::vector<nn::Conv2d> proj_, trans_;
  std::vector<std::vector<nn::Conv2d>> conv1_, conv2_;
  std::vector<std::vector<nn::LayerNorm>> ln1_, ln2_;
  nn::Linear head_;
  nn::ParamStore ps_;
};

// Conv/upsample stack mapping the deepest tapped feature back to image
// space. Doubles as the fine-tuning restoration head, where the final conv
// is initialized near zero so training starts close to the identity
// residual (the restored image is lq + head output).
class ReconDecoder {
 public:
  ReconDecoder(int in_channels, int in_factor, int out_channels,
               std::uint64_t init_seed, bool near_zero_final);

  struct Trace {
    std::vector<Tensor> conv_in, preact;
  };

  Tensor forward(const Tensor& f, Trace* trace = nullptr) const;
  Tensor backward(const Trace& tr, const Tensor& gy,
                  std::vector<float>& grad) const;

  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

 private:
  int in_channels_, in_factor_, out_channels_;
  std::vector<nn::Conv2d> convs_;  // conv0, per-upsample convs, final
  std::vector<int> pre_up_;        // upsample factor before each conv
  nn::ParamStore ps_;
};

struct PretrainModel {
  PretrainModel(const EncoderConfig& enc_cfg, const ClsDecoderConfig& cls_cfg,
                std::uint64_t seed);
  Encoder encoder;
  ClsDecoder cls;
  ReconDecoder recon;
};

struct RestorationModel {
  RestorationModel(EncoderConfig enc_cfg, std::uint64_t seed);
  Tensor restore(const Tensor& lq) const;  // lq + head(F_deepest)
  Encoder encoder;
  ReconDecoder head;
};

// ---- checkpoints -----------------------------------------------------------

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct CheckpointMeta {
  std::int64_t iteration = 0;
  std::uint64_t seed = 0;
  std::string loss_digest;  // rolling digest of the loss log
};

// Self-describing container: a JSON header (format version, kind, flat
// string config map, metadata, tensor directory) followed by raw
// little-endian float32 blobs. save→load→save is byte-identical.
struct Checkpoint {
  int format_version = 1;
  std::string kind;  // "pretrain" | "encoder" | "restoration"
  std::map<std::string, std::string> config;
  CheckpointMeta meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);  // throws CheckpointError

// Copies all parameters of a store into/out of a checkpoint under
// "<prefix>.<param name>". Loading validates names and shapes and throws
// CheckpointError naming the first offending tensor.
void dump_store(Checkpoint& c, const std::string& prefix,
                const nn::ParamStore& ps);
void load_store(const Checkpoint& c, const std::string& prefix,
                nn::ParamStore& ps);

std::map<std::string, std::string> encoder_config_map(const EncoderConfig&);
EncoderConfig encoder_config_from_map(
    const std::map<std::string, std::string>& m);
std::map<std::string, std::string> cls_config_map(const ClsDecoderConfig&);
ClsDecoderConfig cls_config_from_map(
    const std::map<std::string, std::string>& m);

// Strips a pre-training checkpoint down to its encoder (kind "encoder").
void export_encoder(const std::string& checkpoint_path,
                    const std::string& out_path);
// Transplants encoder parameters from a "pretrain" or "encoder" checkpoint
// into an already-constructed restoration model with a matching config.
void import_encoder(const std::string& checkpoint_path,
                    RestorationModel& target);

}  // namespace mdc::model

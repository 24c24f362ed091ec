#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mdc/degrade.hpp"
#include "mdc/masking.hpp"
#include "mdc/model.hpp"
#include "mdc/nn.hpp"
#include "mdc/objectives.hpp"
#include "mdc/report.hpp"

// Training drivers: family-rebalancing sampler, the masked pre-training
// loop (joint reconstruction + degradation classification), the supervised
// fine-tuning loop, and the ablation runner. Everything is deterministic
// given a seed: per-sample randomness (crops, flips, masks, batch order) is
// derived from (seed, iteration, slot) counters, never from shared mutable
// RNG state.
namespace mdc::pipeline {

// Epoch builder that repeats each sample an integer number of times by
// family, then shuffles with a per-epoch derived seed. Per-epoch family
// histograms are exact, never approximated.
class RepeatSampler {
 public:
  // `sample_families[i]` is the family of corpus sample i. Factors default
  // to 1 for unlisted families; factors < 1 throw std::invalid_argument;
  // factors for families absent from the corpus are recorded as warnings
  // and ignored.
  RepeatSampler(const std::vector<degrade::Family>& sample_families,
                const std::map<degrade::Family, int>& factors,
                std::uint64_t seed);

  std::size_t epoch_length() const { return base_.size(); }
  // Deterministic permutation of the repeated-sample multiset for epoch e.
  const std::vector<std::size_t>& epoch(std::int64_t e) const;
  // Sample index for a global position (position / epoch_length selects the
  // epoch, the remainder indexes its permutation).
  std::size_t sample_at(std::int64_t position) const;
  // Exact per-epoch occurrence counts by family.
  std::map<degrade::Family, std::int64_t> histogram() const;
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  std::vector<std::size_t> base_;  // sample index, repeated factor(f) times
  std::vector<degrade::Family> families_;
  std::uint64_t seed_ = 0;
  std::vector<std::string> warnings_;
  mutable std::int64_t cached_epoch_ = -1;
  mutable std::vector<std::size_t> cached_perm_;
};

enum class TrainMode { PRETRAIN = 0, FINETUNE = 1 };

struct TrainConfig {
  TrainMode mode = TrainMode::PRETRAIN;
  std::int64_t iterations = 2000;
  int batch_size = 8;
  int crop = 64;
  double lr_encoder = 3e-4;
  double lr_decoder = 1e-4;
  double mask_ratio = 0.5;
  int mask_patch = 8;
  mask::MaskingMethod mask_method = mask::MaskingMethod::RANDOM;
  double alpha = 1.0;
  double gamma = 2.0;
  std::uint64_t seed = 0;

  model::EncoderConfig encoder;
  model::ClsDecoderConfig cls;
  std::map<degrade::Family, int> repeat_factors;  // default: all 1

  std::int64_t checkpoint_every = 500;  // 0 = only the final checkpoint
  bool probe = true;                    // quartile probe snapshots (PRETRAIN)
  int probe_k = 5;
  int probe_max_per_family = 0;  // 0 = use every sample

  void validate() const;  // throws std::invalid_argument
};

// JSON config file with keys mirroring TrainConfig (documented in the
// README). Unknown keys are rejected so typos can't silently fall back to
// defaults.
TrainConfig load_train_config(const std::string& path);

// Canonical key=value rendering; its digest identifies a run's config.
std::string config_canonical(const TrainConfig& cfg);
std::string config_digest(const TrainConfig& cfg);

// Optimizer state for the three pre-training parameter stores (the
// fine-tuning loop uses enc + recon only).
struct TrainState {
  nn::AdamConfig adam;
  nn::AdamState enc, cls, recon;
  std::int64_t iteration = 0;  // completed steps

  void init(const model::PretrainModel& m);
  void init(const model::RestorationModel& m);
};

// One pre-training update over a batch: per sample — random crop/flip,
// exact-count mask, masked encoder forward, both decoder forwards, combined
// loss — then a single optimizer step with split learning rates
// (lr_encoder for the encoder store, lr_decoder for both decoder stores).
// Returns the batch-mean loss breakdown. Throws std::runtime_error with the
// iteration, seed, and batch ids when the loss turns non-finite.
objectives::LossBreakdown pretrain_step(
    model::PretrainModel& m, TrainState& st,
    const std::vector<const degrade::PairedSample*>& batch,
    const TrainConfig& cfg);

// Full pre-training run: constant learning rates, TSV loss log
// (iter, pix, cls, total, lr_enc, lr_dec), periodic + final checkpoints,
// and probe-accuracy snapshots at 0/25/50/75/100% of the iterations.
// `resume_from` (optional checkpoint path) continues a previous run
// bit-exactly. Returns the final checkpoint (also written to
// out_dir/checkpoint_final.ckpt).
model::Checkpoint pretrain_run(const TrainConfig& cfg,
                               const std::string& manifest_path,
                               const std::string& out_dir,
                               const std::string& resume_from = "");

struct FinetuneResult {
  model::RestorationModel model;
  report::EvalReport report;
  std::string checkpoint_path;
};

// Supervised restoration fine-tuning (L1 only, unmasked forward) with a
// cosine learning-rate schedule from lr_encoder down to 1e-6 shared by the
// encoder and head. `init_checkpoint` may name a "pretrain" or "encoder"
// checkpoint ("" = random initialization). Every 6th sample per family is
// held out; the returned report carries per-family PSNR/SSIM on that split.
FinetuneResult finetune_run(const TrainConfig& cfg,
                            const std::string& manifest_path,
                            const std::string& init_checkpoint,
                            const std::string& out_dir);

// Cosine schedule value for step t of `total`: lr(0) = lr0,
// lr(total-1) = 1e-6 (single-step runs stay at lr0).
double cosine_lr(double lr0, std::int64_t t, std::int64_t total);

enum class AblationAxis { MASK_RATIO = 0, PATCH_SIZE = 1, MASK_METHOD = 2 };

struct AblationRow {
  std::string value;
  double psnr_avg = 0.0;  // mean of per-family means
  double ssim_avg = 0.0;
};

// For each value: pretrain with the axis override, fine-tune from the
// result, evaluate. Rows are appended to out_dir/ablation.tsv as they
// finish, so partial results survive a failing arm (the failure is then
// rethrown).
std::vector<AblationRow> run_ablation(AblationAxis axis,
                                      const std::vector<std::string>& values,
                                      const TrainConfig& pretrain_cfg,
                                      const TrainConfig& finetune_cfg,
                                      const std::string& manifest_path,
                                      const std::string& out_dir);

}  // namespace mdc::pipeline

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mdc/degrade.hpp"
#include "mdc/model.hpp"

// kNN degradation probe: measures how well frozen encoder features separate
// degradation families. Each sample's degraded image is center-cropped,
// optionally masked, forwarded through the encoder, and the deepest tapped
// feature is flattened into one vector; a k-nearest-neighbor classifier over
// a stratified 2:1 train/test split scores the representation.
namespace mdc::probe {

struct ProbeDataset {
  std::vector<std::vector<float>> features;  // all the same length
  std::vector<int> labels;                   // family indices
  std::vector<std::size_t> train_idx, test_idx;
};

// Splits indices per family at 2:1 (train count differs from 2x the test
// count by at most one sample per family), shuffled by `seed`.
void stratified_split(ProbeDataset& ds, std::uint64_t seed);

// Center-crops each sample's degraded image to crop_size, masks round(ratio*P)
// patches when mask_ratio > 0 (per-sample seeds derived from `seed`), runs the
// encoder and flattens the deepest tapped feature. Deterministic per seed;
// with mask_ratio == 0 the seed does not influence the features at all.
// Throws InvalidShapeError when crop_size exceeds an image side and
// std::invalid_argument for mask_ratio outside [0,1].
ProbeDataset extract_probe_features(const model::Encoder& enc,
                                    const std::vector<degrade::PairedSample>& samples,
                                    int crop_size, double mask_ratio,
                                    int mask_patch, std::uint64_t seed);

// Majority vote over the k Euclidean-nearest training vectors. Ties are
// broken by the smaller summed distance of the tied label's voters, then by
// the lower family index. Throws std::invalid_argument on an empty training
// set or k < 1 (k is clamped to the training-set size).
int knn_classify(const std::vector<std::vector<float>>& train_features,
                 const std::vector<int>& train_labels,
                 const std::vector<float>& query, int k);

// Fraction of TEST samples whose kNN prediction matches their label.
double dataset_accuracy(const ProbeDataset& ds, int k);

// Mean accuracy over five repetitions with derived seeds. Each repetition
// re-splits (and, when mask_ratio > 0, re-masks) the corpus.
double probe_accuracy(const model::Encoder& enc,
                      const std::vector<degrade::PairedSample>& samples,
                      int crop_size, double mask_ratio, int mask_patch, int k,
                      std::uint64_t seed);

// probe_accuracy at each ratio with the same base seed.
std::vector<std::pair<double, double>> mask_ratio_sweep(
    const model::Encoder& enc,
    const std::vector<degrade::PairedSample>& samples, int crop_size,
    const std::vector<double>& ratios, int mask_patch, int k,
    std::uint64_t seed);

}  // namespace mdc::probe

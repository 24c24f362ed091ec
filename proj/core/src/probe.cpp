#include "mdc/probe.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "mdc/errors.hpp"
#include "mdc/image_io.hpp"
#include "mdc/masking.hpp"
#include "mdc/rng.hpp"

namespace mdc::probe {

void stratified_split(ProbeDataset& ds, std::uint64_t seed) {
  ds.train_idx.clear();
  ds.test_idx.clear();
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    by_label[ds.labels[i]].push_back(i);
  for (auto& [label, idx] : by_label) {
    rng::Stream s(rng::derive(seed, "probe-split",
                              static_cast<std::uint64_t>(label)));
    s.shuffle(idx);
    std::size_t n = idx.size();
    std::size_t train_n = static_cast<std::size_t>(
        std::lround(2.0 * static_cast<double>(n) / 3.0));
    for (std::size_t i = 0; i < n; ++i)
      (i < train_n ? ds.train_idx : ds.test_idx).push_back(idx[i]);
  }
  std::sort(ds.train_idx.begin(), ds.train_idx.end());
  std::sort(ds.test_idx.begin(), ds.test_idx.end());
}

ProbeDataset extract_probe_features(
    const model::Encoder& enc,
    const std::vector<degrade::PairedSample>& samples, int crop_size,
    double mask_ratio, int mask_patch, std::uint64_t seed) {
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
    throw std::invalid_argument("extract_probe_features: mask_ratio " +
                                std::to_string(mask_ratio) +
                                " outside [0,1]");
  if (samples.empty())
    throw std::invalid_argument("extract_probe_features: no samples");

  ProbeDataset ds;
  ds.features.reserve(samples.size());
  ds.labels.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const degrade::PairedSample& s = samples[i];
    if (s.lq.h < crop_size || s.lq.w < crop_size)
      throw InvalidShapeError("extract_probe_features: sample '" + s.id +
                              "' is " + std::to_string(s.lq.h) + "x" +
                              std::to_string(s.lq.w) +
                              ", smaller than crop " +
                              std::to_string(crop_size));
    Tensor x = img::center_crop(s.lq, crop_size, crop_size);
    Tensor deepest;
    if (mask_ratio > 0.0) {
      mask::MaskMap m = mask::generate_mask(
          crop_size, crop_size, mask_patch, mask_ratio,
          mask::MaskingMethod::RANDOM, rng::derive(seed, "probe-mask", i));
      Tensor masked = mask::apply_mask(x, m);
      model::FeaturePyramid pyr = enc.forward(masked, &m);
      deepest = std::move(pyr.entries.back().feature);
    } else {
      model::FeaturePyramid pyr = enc.forward(x, nullptr);
      deepest = std::move(pyr.entries.back().feature);
    }
    ds.features.push_back(std::move(deepest.data));
    ds.labels.push_back(static_cast<int>(s.spec.family));
  }
  stratified_split(ds, seed);
  return ds;
}

int knn_classify(const std::vector<std::vector<float>>& train_features,
                 const std::vector<int>& train_labels,
                 const std::vector<float>& query, int k) {
  if (train_features.empty())
    throw std::invalid_argument("knn_classify: empty training set");
  if (train_features.size() != train_labels.size())
    throw std::invalid_argument("knn_classify: feature/label count mismatch");
  if (k < 1) throw std::invalid_argument("knn_classify: k must be >= 1");
  k = std::min<int>(k, static_cast<int>(train_features.size()));

  // (squared distance, training index); index makes the ordering total.
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(train_features.size());
  for (std::size_t i = 0; i < train_features.size(); ++i) {
    const std::vector<float>& f = train_features[i];
    if (f.size() != query.size())
      throw InvalidShapeError("knn_classify: feature length mismatch");
    double d = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) {
      double diff = static_cast<double>(f[j]) - query[j];
      d += diff * diff;
    }
    dist.emplace_back(d, i);
  }
  std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

  std::map<int, std::pair<int, double>> votes;  // label -> (count, dist sum)
  for (int i = 0; i < k; ++i) {
    int label = train_labels[dist[static_cast<std::size_t>(i)].second];
    auto& v = votes[label];
    v.first += 1;
    v.second += std::sqrt(dist[static_cast<std::size_t>(i)].first);
  }
  int best_label = -1;
  int best_count = -1;
  double best_sum = 0.0;
  for (const auto& [label, v] : votes) {
    bool better = v.first > best_count ||
                  (v.first == best_count && v.second < best_sum);
    // std::map iterates labels in increasing order, so on full ties the
    // lowest family index is kept.
    if (better) {
      best_label = label;
      best_count = v.first;
      best_sum = v.second;
    }
  }
  return best_label;
}

double dataset_accuracy(const ProbeDataset& ds, int k) {
  if (ds.test_idx.empty())
    throw std::invalid_argument("dataset_accuracy: empty test split");
  std::vector<std::vector<float>> train_f;
  std::vector<int> train_l;
  train_f.reserve(ds.train_idx.size());
  for (std::size_t i : ds.train_idx) {
    train_f.push_back(ds.features[i]);
    train_l.push_back(ds.labels[i]);
  }
  std::int64_t hits = 0;
  for (std::size_t i : ds.test_idx)
    if (knn_classify(train_f, train_l, ds.features[i], k) == ds.labels[i])
      ++hits;
  return static_cast<double>(hits) /
         static_cast<double>(ds.test_idx.size());
}

double probe_accuracy(const model::Encoder& enc,
                      const std::vector<degrade::PairedSample>& samples,
                      int crop_size, double mask_ratio, int mask_patch, int k,
                      std::uint64_t seed) {
  constexpr int kReps = 5;
  double acc = 0.0;
  // Features are seed-independent at ratio 0, so extract them once and only
  // re-split per repetition.
  if (mask_ratio == 0.0) {
    ProbeDataset ds = extract_probe_features(enc, samples, crop_size, 0.0,
                                             mask_patch, seed);
    for (int r = 0; r < kReps; ++r) {
      stratified_split(ds, rng::derive(seed, "probe-rep",
                                       static_cast<std::uint64_t>(r)));
      acc += dataset_accuracy(ds, k);
    }
  } else {
    for (int r = 0; r < kReps; ++r) {
      std::uint64_t rep_seed =
          rng::derive(seed, "probe-rep", static_cast<std::uint64_t>(r));
      ProbeDataset ds = extract_probe_features(enc, samples, crop_size,
                                               mask_ratio, mask_patch, rep_seed);
      acc += dataset_accuracy(ds, k);
    }
  }
  return acc / kReps;
}

std::vector<std::pair<double, double>> mask_ratio_sweep(
    const model::Encoder& enc,
    const std::vector<degrade::PairedSample>& samples, int crop_size,
    const std::vector<double>& ratios, int mask_patch, int k,
    std::uint64_t seed) {
  std::vector<std::pair<double, double>> table;
  table.reserve(ratios.size());
  for (double r : ratios)
    table.emplace_back(
        r, probe_accuracy(enc, samples, crop_size, r, mask_patch, k, seed));
  return table;
}

}  // namespace mdc::probe

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "phreg/image.hpp"

namespace phreg {

/// Lower-tail similarity percentiles: pXX is the cosine at the XX-th
/// percentile of the dissimilarity order, so p99 is close to the worst patch.
struct CosinePercentiles {
  static constexpr std::array<int, 5> levels{50, 70, 90, 95, 99};
  std::array<double, 5> values{};  // aligned with `levels`
  double mean = 0.0;
  std::size_t count = 0;

  double at(int level) const;
};

/// Per-patch cosine over channels with a 1e-8 denominator guard.
std::vector<double> patch_cosines(const FeatureGrid& pred, const FeatureGrid& target);

/// Nearest-rank percentile of `values` taken in descending order.
double dissimilarity_percentile(std::vector<double> values, double level);

/// Pools every patch cosine across the batch.
CosinePercentiles cosine_percentiles(const std::vector<FeatureGrid>& pred, const std::vector<FeatureGrid>& target);

struct NormStats {
  double mean = 0.0;
  double variance = 0.0;  // population variance
  double median = 0.0;
  double mad = 0.0;
  double outlier_fraction = 0.0;  // strictly outside median +- 3 * 1.4826 * MAD
  std::size_t count = 0;
};

std::vector<double> token_norms(const FeatureGrid& features);
NormStats token_norm_stats(const std::vector<FeatureGrid>& features);

struct SegmentationScores {
  double miou = 0.0;  // percent
  double macc = 0.0;  // percent
  std::vector<double> iou;     // per class, NaN when excluded
  std::vector<double> recall;  // per class, NaN when the class is absent from the truth
};

/// Classes absent from both prediction and truth are excluded from mIoU; mAcc
/// averages recall over classes present in the truth.
SegmentationScores segmentation_scores(const std::vector<std::int32_t>& predicted,
                                       const std::vector<std::int32_t>& truth, std::size_t num_classes);

struct ProbeConfig {
  double learning_rate = 5e-3;
  std::size_t iterations = 1000;
  bool standardize = true;  // z-score channels with training statistics
};

struct ProbeResult {
  SegmentationScores scores;
  std::vector<std::int32_t> predictions;  // test tokens, concatenated over images
  double final_train_loss = 0.0;
};

/// Softmax-regression decoder trained by full-batch gradient descent on frozen token features.
ProbeResult linear_probe(const std::vector<FeatureGrid>& train_features,
                         const std::vector<std::vector<std::int32_t>>& train_labels,
                         const std::vector<FeatureGrid>& test_features,
                         const std::vector<std::vector<std::int32_t>>& test_labels, std::size_t num_classes,
                         const ProbeConfig& config = {});

/// Cosine of each token with `query`; zero-norm tokens give 0.
std::vector<double> zero_shot_heatmap(const FeatureGrid& features, const std::vector<float>& query);

/// Pearson r; 0 when either side has zero variance.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

/// heatmaps[image][class] against one-hot maps of labels[image]; averaged over
/// classes within an image, then over images.
double pearson_zero_shot(const std::vector<std::vector<std::vector<double>>>& heatmaps,
                         const std::vector<std::vector<std::int32_t>>& labels);

struct MetricsReport {
  CosinePercentiles cosine;
  NormStats norms;
  double miou = 0.0;
  double macc = 0.0;
  double pearson = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  static std::string csv_header();
  std::string csv_row() const;
};

}  // namespace phreg

#include "phreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace phreg {

double CosinePercentiles::at(int level) const {
  for (std::size_t i = 0; i < levels.size(); ++i)
    if (levels[i] == level) return values[i];
  throw std::out_of_range("no cosine percentile at level " + std::to_string(level));
}

std::vector<double> patch_cosines(const FeatureGrid& pred, const FeatureGrid& target) {
  if (!pred.same_extents(target))
    throw std::invalid_argument("cosine: prediction and target extents differ");
  std::vector<double> out(pred.tokens());
  for (std::size_t t = 0; t < pred.tokens(); ++t) {
    const auto a = pred.token(t), b = target.token(t);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < pred.dim; ++j) {
      dot += double(a[j]) * b[j];
      na += double(a[j]) * a[j];
      nb += double(b[j]) * b[j];
    }
    out[t] = dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-8);
  }
  return out;
}

double dissimilarity_percentile(std::vector<double> values, double level) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  std::sort(values.begin(), values.end(), std::greater<>());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(level / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

CosinePercentiles cosine_percentiles(const std::vector<FeatureGrid>& pred, const std::vector<FeatureGrid>& target) {
  if (pred.empty()) throw std::invalid_argument("cosine_percentiles: empty batch");
  if (pred.size() != target.size()) throw std::invalid_argument("cosine_percentiles: batch sizes differ");
  std::vector<double> pooled;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto c = patch_cosines(pred[i], target[i]);
    pooled.insert(pooled.end(), c.begin(), c.end());
  }
  if (pooled.empty()) throw std::invalid_argument("cosine_percentiles: no patches");
  CosinePercentiles out;
  out.count = pooled.size();
  out.mean = std::accumulate(pooled.begin(), pooled.end(), 0.0) / static_cast<double>(pooled.size());
  std::sort(pooled.begin(), pooled.end(), std::greater<>());
  for (std::size_t i = 0; i < out.levels.size(); ++i) out.values[i] = dissimilarity_percentile(pooled, out.levels[i]);
  return out;
}

std::vector<double> token_norms(const FeatureGrid& features) {
  std::vector<double> out(features.tokens());
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    double n2 = 0.0;
    for (float x : features.token(t)) n2 += double(x) * x;
    out[t] = std::sqrt(n2);
  }
  return out;
}

namespace {

double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

NormStats token_norm_stats(const std::vector<FeatureGrid>& features) {
  std::vector<double> norms;
  for (const auto& f : features) {
    const auto n = token_norms(f);
    norms.insert(norms.end(), n.begin(), n.end());
  }
  NormStats s;
  s.count = norms.size();
  if (norms.empty()) return s;
  const double n = static_cast<double>(norms.size());
  s.mean = std::accumulate(norms.begin(), norms.end(), 0.0) / n;
  for (double x : norms) s.variance += (x - s.mean) * (x - s.mean);
  s.variance /= n;
  s.median = median_of(norms);
  std::vector<double> dev(norms.size());
  for (std::size_t i = 0; i < norms.size(); ++i) dev[i] = std::abs(norms[i] - s.median);
  s.mad = median_of(dev);
  const double band = 3.0 * 1.4826 * s.mad;
  const auto outliers = std::count_if(norms.begin(), norms.end(),
                                      [&](double x) { return std::abs(x - s.median) > band; });
  s.outlier_fraction = static_cast<double>(outliers) / n;
  return s;
}

SegmentationScores segmentation_scores(const std::vector<std::int32_t>& predicted,
                                       const std::vector<std::int32_t>& truth, std::size_t num_classes) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("segmentation: label counts differ");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i]), t = static_cast<std::size_t>(truth[i]);
    if (p >= num_classes || t >= num_classes) throw std::out_of_range("segmentation: label out of range");
    if (p == t) {
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  SegmentationScores s;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  s.iou.assign(num_classes, nan);
  s.recall.assign(num_classes, nan);
  double iou_sum = 0.0, rec_sum = 0.0;
  std::size_t iou_n = 0, rec_n = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t uni = tp[c] + fp[c] + fn[c];
    if (uni > 0) {
      s.iou[c] = double(tp[c]) / double(uni);
      iou_sum += s.iou[c];
      ++iou_n;
    }
    if (tp[c] + fn[c] > 0) {
      s.recall[c] = double(tp[c]) / double(tp[c] + fn[c]);
      rec_sum += s.recall[c];
      ++rec_n;
    }
  }
  s.miou = iou_n ? 100.0 * iou_sum / double(iou_n) : 0.0;
  s.macc = rec_n ? 100.0 * rec_sum / double(rec_n) : 0.0;
  return s;
}

namespace {

struct TokenMatrix {
  std::size_t rows = 0, dim = 0;
  std::vector<double> x;
  std::vector<std::int32_t> y;
};

TokenMatrix flatten(const std::vector<FeatureGrid>& features, const std::vector<std::vector<std::int32_t>>& labels) {
  if (features.size() != labels.size()) throw std::invalid_argument("linear_probe: feature and label counts differ");
  TokenMatrix m;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& f = features[i];
    if (labels[i].size() != f.tokens()) throw std::invalid_argument("linear_probe: label grid does not match features");
    if (m.dim == 0) m.dim = f.dim;
    if (f.dim != m.dim) throw std::invalid_argument("linear_probe: feature dimension differs between images");
    m.x.insert(m.x.end(), f.values.begin(), f.values.end());
    m.y.insert(m.y.end(), labels[i].begin(), labels[i].end());
    m.rows += f.tokens();
  }
  return m;
}

}  // namespace

ProbeResult linear_probe(const std::vector<FeatureGrid>& train_features,
                         const std::vector<std::vector<std::int32_t>>& train_labels,
                         const std::vector<FeatureGrid>& test_features,
                         const std::vector<std::vector<std::int32_t>>& test_labels, std::size_t num_classes,
                         const ProbeConfig& config) {
  TokenMatrix train = flatten(train_features, train_labels);
  TokenMatrix test = flatten(test_features, test_labels);
  if (train.rows == 0) throw std::invalid_argument("linear_probe: no training tokens");
  if (test.rows > 0 && test.dim != train.dim) throw std::invalid_argument("linear_probe: train/test dimensions differ");
  const std::size_t d = train.dim, K = num_classes;

  std::vector<double> mu(d, 0.0), sd(d, 1.0);
  if (config.standardize) {
    for (std::size_t i = 0; i < train.rows; ++i)
      for (std::size_t j = 0; j < d; ++j) mu[j] += train.x[i * d + j];
    for (auto& m : mu) m /= double(train.rows);
    std::fill(sd.begin(), sd.end(), 0.0);
    for (std::size_t i = 0; i < train.rows; ++i)
      for (std::size_t j = 0; j < d; ++j) sd[j] += (train.x[i * d + j] - mu[j]) * (train.x[i * d + j] - mu[j]);
    for (auto& s : sd) s = std::max(std::sqrt(s / double(train.rows)), 1e-8);
  }
  auto normalize = [&](TokenMatrix& m) {
    for (std::size_t i = 0; i < m.rows; ++i)
      for (std::size_t j = 0; j < d; ++j) m.x[i * d + j] = (m.x[i * d + j] - mu[j]) / sd[j];
  };
  normalize(train);
  normalize(test);

  std::vector<double> W(d * K, 0.0), b(K, 0.0), gW(d * K), gb(K), logits(K);
  auto forward = [&](const double* x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      double z = b[k];
      for (std::size_t j = 0; j < d; ++j) z += x[j] * W[j * K + k];
      logits[k] = z;
      mx = std::max(mx, z);
    }
    double sum = 0.0;
    for (auto& z : logits) sum += (z = std::exp(z - mx));
    for (auto& z : logits) z /= sum;
  };

  ProbeResult result;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < train.rows; ++i) {
      const double* x = &train.x[i * d];
      forward(x);
      const auto y = static_cast<std::size_t>(train.y[i]);
      loss -= std::log(std::max(logits[y], 1e-300));
      logits[y] -= 1.0;
      for (std::size_t k = 0; k < K; ++k) gb[k] += logits[k];
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < K; ++k) gW[j * K + k] += x[j] * logits[k];
    }
    const double inv = 1.0 / double(train.rows);
    for (std::size_t i = 0; i < W.size(); ++i) W[i] -= config.learning_rate * gW[i] * inv;
    for (std::size_t k = 0; k < K; ++k) b[k] -= config.learning_rate * gb[k] * inv;
    result.final_train_loss = loss * inv;
  }

  result.predictions.resize(test.rows);
  for (std::size_t i = 0; i < test.rows; ++i) {
    forward(&test.x[i * d]);
    result.predictions[i] =
        static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  result.scores = segmentation_scores(result.predictions, test.y, K);
  return result;
}

std::vector<double> zero_shot_heatmap(const FeatureGrid& features, const std::vector<float>& query) {
  if (query.size() != features.dim) throw std::invalid_argument("zero_shot_heatmap: query dimension mismatch");
  double qn = 0.0;
  for (float q : query) qn += double(q) * q;
  qn = std::sqrt(qn);
  std::vector<double> out(features.tokens());
  for (std::size_t t = 0; t < features.tokens(); ++t) {
    const auto tok = features.token(t);
    double dot = 0.0, n2 = 0.0;
    for (std::size_t j = 0; j < features.dim; ++j) {
      dot += double(tok[j]) * query[j];
      n2 += double(tok[j]) * tok[j];
    }
    out[t] = dot / std::max(std::sqrt(n2) * qn, 1e-8);
  }
  return out;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  const double n = static_cast<double>(x.size());
  if (x.size() < 2) return 0.0;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  // Relative threshold so rounding noise on a constant map does not count as variance.
  const double tiny = 1e-12;
  if (sxx <= tiny * std::max(1.0, mx * mx * n) || syy <= tiny * std::max(1.0, my * my * n)) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double pearson_zero_shot(const std::vector<std::vector<std::vector<double>>>& heatmaps,
                         const std::vector<std::vector<std::int32_t>>& labels) {
  if (heatmaps.size() != labels.size()) throw std::invalid_argument("pearson_zero_shot: image counts differ");
  if (heatmaps.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    const auto& per_class = heatmaps[i];
    if (per_class.empty()) continue;
    double image_sum = 0.0;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      std::vector<double> onehot(labels[i].size());
      for (std::size_t t = 0; t < onehot.size(); ++t) onehot[t] = labels[i][t] == static_cast<std::int32_t>(c);
      image_sum += pearson(per_class[c], onehot);
    }
    total += image_sum / double(per_class.size());
  }
  return total / double(heatmaps.size());
}

std::string MetricsReport::csv_header() {
  return "seed,config_hash,cos_mean,cos_p50,cos_p70,cos_p90,cos_p95,cos_p99,norm_mean,norm_var,"
         "norm_outlier_frac,miou,macc,pearson";
}

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os << std::setprecision(9) << seed << ',' << std::hex << std::setw(16) << std::setfill('0') << config_hash
     << std::dec << std::setfill(' ') << ',' << cosine.mean;
  for (double v : cosine.values) os << ',' << v;
  os << ',' << norms.mean << ',' << norms.variance << ',' << norms.outlier_fraction << ',' << miou << ','
     << macc << ',' << pearson;
  return os.str();
}

}  // namespace phreg

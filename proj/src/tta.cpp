#include "phreg/tta.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace phreg {

CoordGrid CoordGrid::identity(std::size_t rows, std::size_t cols) {
  CoordGrid g;
  g.rows = rows;
  g.cols = cols;
  g.u.resize(rows * cols);
  g.v.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      g.u[r * cols + c] = static_cast<float>((c + 0.5) / cols);
      g.v[r * cols + c] = static_cast<float>((r + 0.5) / rows);
    }
  return g;
}

bool CoordGrid::valid(std::size_t r, std::size_t c) const { return !std::isnan(u[r * cols + c]); }

std::pair<std::size_t, std::size_t> CoordGrid::source(std::size_t r, std::size_t c) const {
  const float uu = u[r * cols + c], vv = v[r * cols + c];
  const auto sr = static_cast<std::size_t>(std::floor(vv * static_cast<float>(rows)));
  const auto sc = static_cast<std::size_t>(std::floor(uu * static_cast<float>(cols)));
  return {std::min(sr, rows - 1), std::min(sc, cols - 1)};
}

int quantize_shift(double pixels, std::size_t k) {
  const double q = std::abs(pixels) / static_cast<double>(k);
  double whole = std::floor(q);
  if (q - whole > 0.5) whole += 1.0;
  const int magnitude = static_cast<int>(whole) * static_cast<int>(k);
  return pixels < 0 ? -magnitude : magnitude;
}

std::vector<AugmentationParams> sample_aug_params(Rng& rng, std::size_t n, double max_shift_frac,
                                                  double flip_prob, std::size_t k, std::size_t height,
                                                  std::size_t width) {
  if (n == 0) throw std::invalid_argument("sample_aug_params: need at least one view");
  if (k == 0) throw std::invalid_argument("sample_aug_params: patch size must be positive");
  std::vector<AugmentationParams> out;
  out.reserve(n);
  out.push_back({});
  std::uniform_real_distribution<double> frac(-max_shift_frac, max_shift_frac);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto axis = [&](double f, std::size_t extent) {
    const double limit = max_shift_frac * static_cast<double>(extent);
    int s = quantize_shift(f * static_cast<double>(extent), k);
    // Nearest rounding can overshoot the sampling range by less than one patch.
    if (std::abs(s) > limit) s -= (s > 0 ? 1 : -1) * static_cast<int>(k);
    return s;
  };
  for (std::size_t i = 1; i < n; ++i) {
    const double fx = frac(rng);
    const double fy = frac(rng);
    const bool flip = unit(rng) < flip_prob;
    out.push_back({axis(fx, width), axis(fy, height), flip});
  }
  return out;
}

CoordGrid transform_coords(const CoordGrid& coords, const AugmentationParams& theta, std::size_t k) {
  if (theta.shift_x % static_cast<int>(k) || theta.shift_y % static_cast<int>(k))
    throw std::invalid_argument("augmentation shift must be a multiple of the patch size");
  const long dx = theta.shift_x / static_cast<int>(k), dy = theta.shift_y / static_cast<int>(k);
  const long rows = static_cast<long>(coords.rows), cols = static_cast<long>(coords.cols);
  CoordGrid out;
  out.rows = coords.rows;
  out.cols = coords.cols;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  out.u.assign(coords.u.size(), nan);
  out.v.assign(coords.v.size(), nan);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      // Destination after the shift, then mirrored if flipped.
      const long sr = r - dy;
      const long sc_shifted = theta.flip ? (cols - 1 - c) : c;
      const long sc = sc_shifted - dx;
      if (sr < 0 || sr >= rows || sc < 0 || sc >= cols) continue;
      out.u[r * cols + c] = coords.u[sr * cols + sc];
      out.v[r * cols + c] = coords.v[sr * cols + sc];
    }
  return out;
}

std::pair<Image, CoordGrid> transform(const Image& image, const CoordGrid& coords,
                                      const AugmentationParams& theta, std::size_t k,
                                      const std::array<float, 3>& pad) {
  if (coords.rows * k != image.height || coords.cols * k != image.width)
    throw std::invalid_argument("transform: coordinate grid does not match the image token grid");
  const long h = static_cast<long>(image.height), w = static_cast<long>(image.width);
  Image out(image.height, image.width);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const long xs = theta.flip ? (w - 1 - x) : x;
      const long sy = y - theta.shift_y, sx = xs - theta.shift_x;
      for (std::size_t ch = 0; ch < 3; ++ch)
        out.at(y, x, ch) = (sy < 0 || sy >= h || sx < 0 || sx >= w) ? pad[ch] : image.at(sy, sx, ch);
    }
  return {std::move(out), transform_coords(coords, theta, k)};
}

PlacedFeatures inverse_restore(const FeatureGrid& features, const CoordGrid& coords) {
  if (features.rows != coords.rows || features.cols != coords.cols)
    throw std::invalid_argument("inverse_restore: features and coordinates disagree on the token grid");
  PlacedFeatures out{FeatureGrid(features.rows, features.cols, features.dim),
                     std::vector<std::uint8_t>(features.tokens(), 0)};
  for (std::size_t r = 0; r < features.rows; ++r)
    for (std::size_t c = 0; c < features.cols; ++c) {
      if (!coords.valid(r, c)) continue;
      const auto [sr, sc] = coords.source(r, c);
      auto& slot = out.mask[sr * features.cols + sc];
      if (slot) throw std::logic_error("inverse_restore: two tokens map to the same source location");
      slot = 1;
      auto src = features.token(r, c);
      std::copy(src.begin(), src.end(), out.features.token(sr, sc).begin());
    }
  return out;
}

FeatureAccumulator::FeatureAccumulator(std::size_t rows, std::size_t cols, std::size_t dim)
    : sum_(rows, cols, dim), count_(rows * cols, 0) {}

void FeatureAccumulator::add(const PlacedFeatures& placed) {
  if (!placed.features.same_extents(sum_))
    throw std::invalid_argument("accumulate: grid extents differ between views");
  for (std::size_t t = 0; t < count_.size(); ++t) {
    if (!placed.mask[t]) continue;
    ++count_[t];
    const float* src = placed.features.values.data() + t * sum_.dim;
    float* dst = sum_.values.data() + t * sum_.dim;
    for (std::size_t j = 0; j < sum_.dim; ++j) dst[j] += src[j];
  }
  ++views_;
}

FeatureGrid FeatureAccumulator::finish() const {
  FeatureGrid out = sum_;
  out.coverage = count_;
  for (std::size_t t = 0; t < count_.size(); ++t) {
    if (count_[t] == 0)
      throw std::runtime_error("accumulate: token " + std::to_string(t) +
                               " was never covered; the first view must be the identity");
    const float n = static_cast<float>(count_[t]);
    for (std::size_t j = 0; j < out.dim; ++j) out.values[t * out.dim + j] /= n;
  }
  return out;
}

FeatureGrid accumulate_mean(const std::vector<PlacedFeatures>& placed) {
  if (placed.empty()) throw std::invalid_argument("accumulate_mean: no views");
  const auto& first = placed.front().features;
  FeatureAccumulator acc(first.rows, first.cols, first.dim);
  for (const auto& p : placed) acc.add(p);
  return acc.finish();
}

FeatureGrid denoise_with_params(const FeatureFn& teacher, const Image& image,
                                const std::vector<AugmentationParams>& params, std::size_t k,
                                const std::array<float, 3>& pad) {
  if (params.empty()) throw std::invalid_argument("denoise: no augmentation parameters");
  const auto base = CoordGrid::identity(image.height / k, image.width / k);
  std::optional<FeatureAccumulator> acc;
  for (const auto& theta : params) {
    auto [view, coords] = transform(image, base, theta, k, pad);
    const FeatureGrid f = teacher(view);
    if (!acc) acc.emplace(f.rows, f.cols, f.dim);
    acc->add(inverse_restore(f, coords));
  }
  return acc->finish();
}

FeatureGrid denoise(const FeatureFn& teacher, const Image& image, std::size_t k, const TtaConfig& cfg,
                    Rng& rng) {
  const auto params =
      sample_aug_params(rng, cfg.num_views, cfg.max_shift_frac, cfg.flip_prob, k, image.height, image.width);
  return denoise_with_params(teacher, image, params, k, cfg.pad_color());
}

FeatureGrid denoise_precomputed(const std::vector<FeatureGrid>& views,
                                const std::vector<AugmentationParams>& params, std::size_t k) {
  if (views.empty() || views.size() != params.size())
    throw std::invalid_argument("denoise: need one augmentation record per feature view");
  const auto base = CoordGrid::identity(views.front().rows, views.front().cols);
  FeatureAccumulator acc(views.front().rows, views.front().cols, views.front().dim);
  for (std::size_t i = 0; i < views.size(); ++i)
    acc.add(inverse_restore(views[i], transform_coords(base, params[i], k)));
  return acc.finish();
}

}  // namespace phreg

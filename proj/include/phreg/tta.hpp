#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "phreg/image.hpp"
#include "phreg/rng.hpp"
#include "phreg/vit.hpp"

namespace phreg {

/// One view: integer pixel shift (multiples of the patch size) then an optional
/// horizontal flip.
struct AugmentationParams {
  int shift_x = 0;
  int shift_y = 0;
  bool flip = false;

  bool is_identity() const { return shift_x == 0 && shift_y == 0 && !flip; }
  bool operator==(const AugmentationParams&) const = default;
};

/// Per-token (u, v) source coordinates in [0, 1]; NaN marks an invalid entry.
/// u runs left to right, v top to bottom; a token's coordinate is its patch center.
struct CoordGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> u;
  std::vector<float> v;

  static CoordGrid identity(std::size_t rows, std::size_t cols);
  bool valid(std::size_t r, std::size_t c) const;
  /// Source token index for a valid entry.
  std::pair<std::size_t, std::size_t> source(std::size_t r, std::size_t c) const;
};

enum class PadMode { mean_color, white };

struct TtaConfig {
  std::size_t num_views = 10;
  double max_shift_frac = 0.15;
  double flip_prob = 0.5;
  PadMode pad_mode = PadMode::mean_color;
  // Pad color in PadMode::mean_color; the dataset mean, which is zero after normalization.
  std::array<float, 3> mean_color{0.5f, 0.5f, 0.5f};

  std::array<float, 3> pad_color() const {
    return pad_mode == PadMode::white ? std::array<float, 3>{1.0f, 1.0f, 1.0f} : mean_color;
  }
};

/// Rounds pixels to the nearest multiple of k, ties toward zero.
int quantize_shift(double pixels, std::size_t k);

/// Element 0 is always the identity; the rest are drawn i.i.d. from `rng`
/// (x fraction, y fraction, flip, in that order), so shorter lists are
/// prefixes of longer ones for the same stream.
std::vector<AugmentationParams> sample_aug_params(Rng& rng, std::size_t n, double max_shift_frac,
                                                  double flip_prob, std::size_t k, std::size_t height,
                                                  std::size_t width);

CoordGrid transform_coords(const CoordGrid& coords, const AugmentationParams& theta, std::size_t k);

/// Shift (vacated pixels take `pad`), then flip; coordinates follow the same map.
std::pair<Image, CoordGrid> transform(const Image& image, const CoordGrid& coords,
                                      const AugmentationParams& theta, std::size_t k,
                                      const std::array<float, 3>& pad);

struct PlacedFeatures {
  FeatureGrid features;
  std::vector<std::uint8_t> mask;  // rows * cols, 1 where a token was written
};

/// Writes each valid token back to its pre-augmentation location.
PlacedFeatures inverse_restore(const FeatureGrid& features, const CoordGrid& coords);

/// Streaming sum of restored views with per-location occurrence counts.
class FeatureAccumulator {
 public:
  FeatureAccumulator(std::size_t rows, std::size_t cols, std::size_t dim);
  void add(const PlacedFeatures& placed);
  std::size_t views() const { return views_; }
  /// Dimension-wise mean; throws if any location was never covered.
  FeatureGrid finish() const;

 private:
  FeatureGrid sum_;
  std::vector<std::int32_t> count_;
  std::size_t views_ = 0;
};

FeatureGrid accumulate_mean(const std::vector<PlacedFeatures>& placed);

/// Runs the teacher on every augmented view and averages the restored features.
FeatureGrid denoise_with_params(const FeatureFn& teacher, const Image& image,
                                const std::vector<AugmentationParams>& params, std::size_t k,
                                const std::array<float, 3>& pad);

FeatureGrid denoise(const FeatureFn& teacher, const Image& image, std::size_t k, const TtaConfig& cfg,
                    Rng& rng);

/// Denoises features an external model produced on the augmented views.
FeatureGrid denoise_precomputed(const std::vector<FeatureGrid>& views,
                                const std::vector<AugmentationParams>& params, std::size_t k);

}  // namespace phreg

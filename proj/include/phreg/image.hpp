#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace phreg {

/// H x W x 3 float image, row-major, channels last. Values nominally in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w * 3, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

/// Dense per-patch features on the (rows x cols) token grid, plus an optional
/// per-location coverage count filled in by the augmentation denoiser.
struct FeatureGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t dim = 0;
  std::vector<float> values;
  std::vector<std::int32_t> coverage;  // empty when absent, else rows * cols

  FeatureGrid() = default;
  FeatureGrid(std::size_t r, std::size_t c, std::size_t d) : rows(r), cols(c), dim(d), values(r * c * d, 0.0f) {}

  std::size_t tokens() const { return rows * cols; }
  std::span<float> token(std::size_t r, std::size_t c) {
    return {values.data() + (r * cols + c) * dim, dim};
  }
  std::span<const float> token(std::size_t r, std::size_t c) const {
    return {values.data() + (r * cols + c) * dim, dim};
  }
  std::span<const float> token(std::size_t flat) const { return {values.data() + flat * dim, dim}; }
  bool same_extents(const FeatureGrid& o) const { return rows == o.rows && cols == o.cols && dim == o.dim; }
  bool operator==(const FeatureGrid&) const = default;
};

/// Catmull-Rom (a = -0.5) cubic weights for the four taps around fractional offset t.
void cubic_weights(double t, double out[4]);

/// Bicubic resize, corner-aligned, borders replicated.
Image resize_bicubic(const Image& image, std::size_t height, std::size_t width);

/// Resizes so the shorter side equals `side`, keeping aspect ratio.
Image resize_shorter_side(const Image& image, std::size_t side);

Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

/// Binary 8-bit PPM (P6). Values are clamped to [0, 1] and rounded to 1/255.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

}  // namespace phreg

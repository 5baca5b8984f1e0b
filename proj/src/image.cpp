#include "phreg/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace phreg {

void cubic_weights(double t, double out[4]) {
  constexpr double a = -0.5;
  auto near = [](double x) { return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0; };
  auto far = [](double x) { return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a; };
  out[0] = far(t + 1.0);
  out[1] = near(t);
  out[2] = near(1.0 - t);
  out[3] = far(2.0 - t);
}

namespace {

// Interpolation weights from `src` samples to `dst` samples along one axis.
std::vector<std::vector<std::pair<std::size_t, double>>> axis_taps(std::size_t src, std::size_t dst) {
  std::vector<std::vector<std::pair<std::size_t, double>>> taps(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const double pos = dst == 1 ? 0.0 : static_cast<double>(i) * (src - 1) / (dst - 1);
    const double base = std::floor(pos);
    const double t = pos - base;
    double w[4];
    cubic_weights(t, w);
    for (int k = 0; k < 4; ++k) {
      const auto idx = static_cast<long>(base) - 1 + k;
      const auto clamped = static_cast<std::size_t>(std::clamp<long>(idx, 0, static_cast<long>(src) - 1));
      if (w[k] != 0.0) taps[i].emplace_back(clamped, w[k]);
    }
  }
  return taps;
}

}  // namespace

Image resize_bicubic(const Image& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw std::invalid_argument("resize_bicubic: empty target");
  if (height == image.height && width == image.width) return image;
  const auto ty = axis_taps(image.height, height);
  const auto tx = axis_taps(image.width, width);
  // Separable: rows first, then columns.
  std::vector<double> tmp(image.height * width * 3, 0.0);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (auto [sx, w] : tx[x])
        for (std::size_t c = 0; c < 3; ++c) tmp[(y * width + x) * 3 + c] += w * image.at(y, sx, c);
  Image out(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (auto [sy, w] : ty[y]) acc += w * tmp[(sy * width + x) * 3 + c];
        out.at(y, x, c) = static_cast<float>(acc);
      }
  return out;
}

Image resize_shorter_side(const Image& image, std::size_t side) {
  if (image.height == 0 || image.width == 0) throw std::invalid_argument("resize of empty image");
  if (image.height <= image.width) {
    const auto w = static_cast<std::size_t>(std::lround(double(image.width) * side / image.height));
    return resize_bicubic(image, side, w);
  }
  const auto h = static_cast<std::size_t>(std::lround(double(image.height) * side / image.width));
  return resize_bicubic(image, h, side);
}

Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  if (top + height > image.height || left + width > image.width)
    throw std::invalid_argument("crop window " + std::to_string(height) + "x" + std::to_string(width) +
                                " at (" + std::to_string(top) + "," + std::to_string(left) +
                                ") exceeds image " + std::to_string(image.height) + "x" +
                                std::to_string(image.width));
  Image out(height, width);
  for (std::size_t y = 0; y < height; ++y)
    std::copy_n(image.pixels.begin() + static_cast<std::ptrdiff_t>(((top + y) * image.width + left) * 3),
                width * 3, out.pixels.begin() + static_cast<std::ptrdiff_t>(y * width * 3));
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::string bytes(image.pixels.size(), '\0');
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<char>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  auto token = [&] {
    std::string t;
    char c = 0;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
      } else {
        t.push_back(c);
      }
    }
    return t;
  };
  if (token() != "P6") throw std::runtime_error(path.string() + ": not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": malformed PPM header");
  }
  if (maxval != 255) throw std::runtime_error(path.string() + ": only 8-bit PPM is supported");
  Image img(h, w);
  std::string bytes(img.pixels.size(), '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw std::runtime_error(path.string() + ": truncated PPM");
  for (std::size_t i = 0; i < bytes.size(); ++i)
    img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / 255.0f;
  return img;
}

}  // namespace phreg

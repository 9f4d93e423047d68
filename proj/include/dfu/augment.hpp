#pragma once

// The 15-fold patch augmentation (rotations, flips, color-space conversions,
// contrast enhancement, random crops) and the zero-center input normalizer.

#include <dfu/image.hpp>
#include <dfu/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfu {

struct PatchRecord {
  ImageBuffer image;
  std::size_t label = 0;
  std::string source_id;
  std::string provenance = "original";  // or "augmented:<kind>"
};

// ---------------------------------------------------------------------------
// Geometric transforms (exact pixel permutations)

inline ImageBuffer rotate90(const ImageBuffer& img) {  // clockwise
  ImageBuffer out = make_image(img.height, img.width, img.channels, img.colorspace);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c)
      for (std::size_t ch = 0; ch < img.channels; ++ch)
        out.at(r, c, ch) = img.at(img.height - 1 - c, r, ch);
  return out;
}

inline ImageBuffer rotate180(const ImageBuffer& img) {
  ImageBuffer out = make_image(img.width, img.height, img.channels, img.colorspace);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c)
      for (std::size_t ch = 0; ch < img.channels; ++ch)
        out.at(r, c, ch) = img.at(img.height - 1 - r, img.width - 1 - c, ch);
  return out;
}

inline ImageBuffer rotate270(const ImageBuffer& img) {
  ImageBuffer out = make_image(img.height, img.width, img.channels, img.colorspace);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c)
      for (std::size_t ch = 0; ch < img.channels; ++ch)
        out.at(r, c, ch) = img.at(c, img.width - 1 - r, ch);
  return out;
}

inline ImageBuffer flip_horizontal(const ImageBuffer& img) {  // mirror left-right
  ImageBuffer out = img;
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c)
      for (std::size_t ch = 0; ch < img.channels; ++ch)
        out.at(r, c, ch) = img.at(r, img.width - 1 - c, ch);
  return out;
}

inline ImageBuffer flip_vertical(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c)
      for (std::size_t ch = 0; ch < img.channels; ++ch)
        out.at(r, c, ch) = img.at(img.height - 1 - r, c, ch);
  return out;
}

// ---------------------------------------------------------------------------
// Random crop: a 90%-side window at a random offset, rotated by a random
// angle (bilinear sampling, reflected borders), rescaled to the input size.

namespace detail {

inline std::size_t reflect_index(long t, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n) - 2;
  t = std::abs(t) % period;
  if (t >= static_cast<long>(n)) t = period - t;
  return static_cast<std::size_t>(t);
}

inline double sample_reflect(const ImageBuffer& img, double y, double x, std::size_t ch) {
  const long x0 = static_cast<long>(std::floor(x));
  const long y0 = static_cast<long>(std::floor(y));
  const double wx = x - static_cast<double>(x0);
  const double wy = y - static_cast<double>(y0);
  const std::size_t xa = reflect_index(x0, img.width);
  const std::size_t xb = reflect_index(x0 + 1, img.width);
  const std::size_t ya = reflect_index(y0, img.height);
  const std::size_t yb = reflect_index(y0 + 1, img.height);
  return (1 - wy) * ((1 - wx) * img.at(ya, xa, ch) + wx * img.at(ya, xb, ch)) +
         wy * ((1 - wx) * img.at(yb, xa, ch) + wx * img.at(yb, xb, ch));
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline double unit_draw(std::mt19937_64& gen) {
  return (gen() >> 11) * (1.0 / 9007199254740992.0);
}

}  // namespace detail

inline ImageBuffer random_rotated_crop(const ImageBuffer& img, std::mt19937_64& gen) {
  const std::size_t cw = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                      std::llround(0.9 * static_cast<double>(img.width))));
  const std::size_t ch = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                      std::llround(0.9 * static_cast<double>(img.height))));
  const std::size_t ox = img.width > cw ? gen() % (img.width - cw + 1) : 0;
  const std::size_t oy = img.height > ch ? gen() % (img.height - ch + 1) : 0;
  const double theta = detail::unit_draw(gen) * 2.0 * 3.14159265358979323846;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const double cx = static_cast<double>(ox) + (static_cast<double>(cw) - 1) / 2.0;
  const double cy = static_cast<double>(oy) + (static_cast<double>(ch) - 1) / 2.0;

  ImageBuffer out = make_image(img.width, img.height, img.channels, img.colorspace);
  const double sx = img.width > 1 ? static_cast<double>(cw - 1) / static_cast<double>(img.width - 1)
                                  : 0.0;
  const double sy = img.height > 1
                        ? static_cast<double>(ch - 1) / static_cast<double>(img.height - 1)
                        : 0.0;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double px = static_cast<double>(ox) + static_cast<double>(x) * sx;
      const double py = static_cast<double>(oy) + static_cast<double>(y) * sy;
      const double dx = px - cx, dy = py - cy;
      const double srcx = cos_t * dx - sin_t * dy + cx;
      const double srcy = sin_t * dx + cos_t * dy + cy;
      for (std::size_t c = 0; c < img.channels; ++c)
        out.at(y, x, c) = static_cast<std::uint8_t>(
            std::clamp(std::lround(detail::sample_reflect(img, srcy, srcx, c)), 0L, 255L));
    }
  return out;
}

// ---------------------------------------------------------------------------
// The 15 augmented variants of one RGB patch, in fixed order: three
// rotations, three flips, four color-space conversions, three contrast
// modes, two random crops. Crop randomness derives from (seed, source_id);
// labels and source ids carry over.

inline const std::vector<std::string>& augmentation_kinds() {
  static const std::vector<std::string> kinds = {
      "rot90", "rot180", "rot270", "fliph", "flipv", "fliphv", "ycbcr", "yiq",
      "hsv",   "lab",    "adjust", "histeq", "clahe", "crop1", "crop2"};
  return kinds;
}

inline std::vector<PatchRecord> augment_patch(const PatchRecord& patch, std::uint64_t seed) {
  patch.image.validate();
  if (patch.image.channels != 3 || patch.image.colorspace != Colorspace::kRgb)
    throw std::invalid_argument("augment: input patch must be RGB");

  std::vector<ImageBuffer> images;
  images.reserve(15);
  images.push_back(rotate90(patch.image));
  images.push_back(rotate180(patch.image));
  images.push_back(rotate270(patch.image));
  images.push_back(flip_horizontal(patch.image));
  images.push_back(flip_vertical(patch.image));
  images.push_back(flip_horizontal(flip_vertical(patch.image)));
  images.push_back(convert_colorspace(patch.image, Colorspace::kYcbcr));
  images.push_back(convert_colorspace(patch.image, Colorspace::kYiq));
  images.push_back(convert_colorspace(patch.image, Colorspace::kHsv));
  images.push_back(convert_colorspace(patch.image, Colorspace::kLab));
  images.push_back(contrast_enhance(patch.image, ContrastMode::kIntensityAdjust));
  images.push_back(contrast_enhance(patch.image, ContrastMode::kHistEq));
  images.push_back(contrast_enhance(patch.image, ContrastMode::kClahe));
  std::mt19937_64 gen(seed ^ detail::fnv1a(patch.source_id));
  images.push_back(random_rotated_crop(patch.image, gen));
  images.push_back(random_rotated_crop(patch.image, gen));

  std::vector<PatchRecord> out;
  out.reserve(15);
  for (std::size_t i = 0; i < images.size(); ++i)
    out.push_back(PatchRecord{std::move(images[i]), patch.label, patch.source_id,
                              "augmented:" + augmentation_kinds()[i]});
  return out;
}

// ---------------------------------------------------------------------------
// Zero-center normalizer: per pixel-channel mean and population standard
// deviation over the fit set; apply returns (x - mean) / (std + epsilon).

struct Normalizer {
  Tensor mean;  // C x H x W
  Tensor stddev;
  double epsilon = 1e-8;
};

// Raw 0..255 sample values as a C x H x W tensor.
inline Tensor patch_to_tensor(const ImageBuffer& img) {
  img.validate();
  Tensor t({img.channels, img.height, img.width});
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        t[(c * img.height + y) * img.width + x] = static_cast<double>(img.at(y, x, c));
  return t;
}

inline Normalizer fit_normalizer(const std::vector<Tensor>& patches, double epsilon = 1e-8) {
  if (patches.empty()) throw std::invalid_argument("normalizer: empty fit set");
  const auto& shape = patches[0].shape();
  Normalizer n;
  n.epsilon = epsilon;
  n.mean = Tensor(shape);
  n.stddev = Tensor(shape);
  for (const Tensor& p : patches) {
    if (p.shape() != shape)
      throw std::invalid_argument("normalizer: fit patches must share one shape");
    for (std::size_t i = 0; i < p.size(); ++i) n.mean[i] += p[i];
  }
  const double count = static_cast<double>(patches.size());
  for (std::size_t i = 0; i < n.mean.size(); ++i) n.mean[i] /= count;
  for (const Tensor& p : patches)
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = p[i] - n.mean[i];
      n.stddev[i] += d * d;
    }
  for (std::size_t i = 0; i < n.stddev.size(); ++i) n.stddev[i] = std::sqrt(n.stddev[i] / count);
  return n;
}

inline Tensor apply_normalizer(const Normalizer& n, const Tensor& patch) {
  if (patch.shape() != n.mean.shape())
    throw std::invalid_argument("normalizer: patch shape differs from the fitted shape");
  Tensor out(patch.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (patch[i] - n.mean[i]) / (n.stddev[i] + n.epsilon);
  return out;
}

}  // namespace dfu

#pragma once

// 8-bit image buffers with PPM (P6) I/O, RGB color-space conversions
// (HSV, full-range YCbCr, YIQ, CIE L*a*b* and L*u*v* under D65), contrast
// enhancement (percentile intensity rescale, histogram equalization, CLAHE),
// and bilinear resizing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfu {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Colorspace { kRgb, kGray, kHsv, kYcbcr, kYiq, kLab, kLuv };

inline const char* colorspace_name(Colorspace c) {
  switch (c) {
    case Colorspace::kRgb: return "rgb";
    case Colorspace::kGray: return "gray";
    case Colorspace::kHsv: return "hsv";
    case Colorspace::kYcbcr: return "ycbcr";
    case Colorspace::kYiq: return "yiq";
    case Colorspace::kLab: return "lab";
    case Colorspace::kLuv: return "luv";
  }
  return "?";
}

struct ImageBuffer {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 or 3
  Colorspace colorspace = Colorspace::kRgb;
  std::vector<std::uint8_t> samples;  // row-major, interleaved

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return samples[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return samples[(y * width + x) * channels + c];
  }

  void validate() const {
    if (width == 0 || height == 0) throw std::invalid_argument("image: empty extent");
    if (channels != 1 && channels != 3)
      throw std::invalid_argument("image: channels must be 1 or 3");
    if (samples.size() != width * height * channels)
      throw std::invalid_argument("image: sample count does not match extents");
  }
};

inline ImageBuffer make_image(std::size_t width, std::size_t height, std::size_t channels,
                              Colorspace cs = Colorspace::kRgb, std::uint8_t fill = 0) {
  ImageBuffer img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.colorspace = cs;
  img.samples.assign(width * height * channels, fill);
  img.validate();
  return img;
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)

namespace detail {

// Reads the next header token, skipping whitespace and '#' comments.
inline std::string ppm_token(const std::string& data, std::size_t& pos) {
  while (pos < data.size()) {
    const char c = data[pos];
    if (c == '#') {
      while (pos < data.size() && data[pos] != '\n') ++pos;
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
  if (start == pos) throw IoError("ppm: unexpected end of header");
  return data.substr(start, pos - start);
}

inline std::size_t ppm_number(const std::string& data, std::size_t& pos) {
  const std::string tok = ppm_token(data, pos);
  for (char c : tok)
    if (!std::isdigit(static_cast<unsigned char>(c))) throw IoError("ppm: bad header number");
  return static_cast<std::size_t>(std::stoull(tok));
}

}  // namespace detail

inline ImageBuffer read_ppm(const std::string& data) {
  std::size_t pos = 0;
  const std::string magic = detail::ppm_token(data, pos);
  if (magic != "P6") throw IoError("ppm: not a binary P6 file (magic '" + magic + "')");
  const std::size_t width = detail::ppm_number(data, pos);
  const std::size_t height = detail::ppm_number(data, pos);
  const std::size_t maxval = detail::ppm_number(data, pos);
  if (maxval != 255) throw IoError("ppm: only maxval 255 is supported");
  if (width == 0 || height == 0) throw IoError("ppm: zero extent");
  if (pos >= data.size()) throw IoError("ppm: truncated before payload");
  ++pos;  // the single whitespace byte after maxval
  const std::size_t need = width * height * 3;
  if (data.size() - pos < need) throw IoError("ppm: truncated payload");
  ImageBuffer img = make_image(width, height, 3);
  std::copy_n(reinterpret_cast<const std::uint8_t*>(data.data()) + pos, need,
              img.samples.begin());
  return img;
}

inline std::string write_ppm(const ImageBuffer& img) {
  img.validate();
  if (img.channels != 3) throw std::invalid_argument("ppm: only 3-channel buffers are written");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                    "\n255\n";
  out.append(reinterpret_cast<const char*>(img.samples.data()), img.samples.size());
  return out;
}

inline ImageBuffer read_ppm_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return read_ppm(data);
}

inline void write_ppm_file(const std::string& path, const ImageBuffer& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const std::string data = write_ppm(img);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Color-space conversions

namespace detail {

inline std::uint8_t q8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

inline double srgb_linear(double c) {  // c in [0,1]
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline void rgb_to_xyz(double r, double g, double b, double& x, double& y, double& z) {
  r = srgb_linear(r);
  g = srgb_linear(g);
  b = srgb_linear(b);
  x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
}

constexpr double kXn = 0.95047, kYn = 1.0, kZn = 1.08883;  // D65 white

inline double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
}

// YIQ component ranges on unit RGB, used for 8-bit requantization.
constexpr double kIMax = 0.595716, kQMax = 0.522591;

}  // namespace detail

inline std::array<double, 3> rgb_to_hsv_unit(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double c = mx - mn;
  double h = 0.0;
  if (c > 0.0) {
    if (mx == r)
      h = std::fmod((g - b) / c, 6.0);
    else if (mx == g)
      h = (b - r) / c + 2.0;
    else
      h = (r - g) / c + 4.0;
    h *= 60.0;
    if (h < 0) h += 360.0;
  }
  const double s = mx > 0.0 ? c / mx : 0.0;
  return {h, s, mx};
}

inline std::array<double, 3> hsv_to_rgb_unit(double h, double s, double v) {
  const double c = v * s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// Converts an RGB buffer to the target space, requantized to 8-bit channels.
// Hue spans [0,255] over the full circle; Lab/Luv use the common 8-bit
// offsets (L*255/100, a/b+128, u/v affinely mapped to [0,255]).
inline ImageBuffer convert_colorspace(const ImageBuffer& img, Colorspace target) {
  img.validate();
  if (img.colorspace != Colorspace::kRgb || img.channels != 3)
    throw std::invalid_argument("convert_colorspace: source must be RGB");
  if (target == Colorspace::kRgb) return img;

  ImageBuffer out = make_image(img.width, img.height, target == Colorspace::kGray ? 1 : 3, target);
  const std::size_t n = img.width * img.height;
  for (std::size_t i = 0; i < n; ++i) {
    const double r255 = img.samples[i * 3 + 0];
    const double g255 = img.samples[i * 3 + 1];
    const double b255 = img.samples[i * 3 + 2];
    const double r = r255 / 255.0, g = g255 / 255.0, b = b255 / 255.0;
    switch (target) {
      case Colorspace::kGray: {
        out.samples[i] = detail::q8(0.299 * r255 + 0.587 * g255 + 0.114 * b255);
        break;
      }
      case Colorspace::kHsv: {
        const auto hsv = rgb_to_hsv_unit(r, g, b);
        out.samples[i * 3 + 0] = detail::q8(hsv[0] / 360.0 * 255.0);
        out.samples[i * 3 + 1] = detail::q8(hsv[1] * 255.0);
        out.samples[i * 3 + 2] = detail::q8(hsv[2] * 255.0);
        break;
      }
      case Colorspace::kYcbcr: {  // full-range BT.601
        out.samples[i * 3 + 0] = detail::q8(0.299 * r255 + 0.587 * g255 + 0.114 * b255);
        out.samples[i * 3 + 1] =
            detail::q8(128.0 - 0.168736 * r255 - 0.331264 * g255 + 0.5 * b255);
        out.samples[i * 3 + 2] =
            detail::q8(128.0 + 0.5 * r255 - 0.418688 * g255 - 0.081312 * b255);
        break;
      }
      case Colorspace::kYiq: {
        const double y = 0.299 * r + 0.587 * g + 0.114 * b;
        const double iq = 0.595716 * r - 0.274453 * g - 0.321263 * b;
        const double qq = 0.211456 * r - 0.522591 * g + 0.311135 * b;
        out.samples[i * 3 + 0] = detail::q8(y * 255.0);
        out.samples[i * 3 + 1] =
            detail::q8((iq + detail::kIMax) / (2 * detail::kIMax) * 255.0);
        out.samples[i * 3 + 2] =
            detail::q8((qq + detail::kQMax) / (2 * detail::kQMax) * 255.0);
        break;
      }
      case Colorspace::kLab: {
        double x, y, z;
        detail::rgb_to_xyz(r, g, b, x, y, z);
        const double fx = detail::lab_f(x / detail::kXn);
        const double fy = detail::lab_f(y / detail::kYn);
        const double fz = detail::lab_f(z / detail::kZn);
        const double l = 116.0 * fy - 16.0;
        out.samples[i * 3 + 0] = detail::q8(l * 255.0 / 100.0);
        out.samples[i * 3 + 1] = detail::q8(500.0 * (fx - fy) + 128.0);
        out.samples[i * 3 + 2] = detail::q8(200.0 * (fy - fz) + 128.0);
        break;
      }
      case Colorspace::kLuv: {
        double x, y, z;
        detail::rgb_to_xyz(r, g, b, x, y, z);
        const double l = 116.0 * detail::lab_f(y / detail::kYn) - 16.0;
        const double denom = x + 15.0 * y + 3.0 * z;
        const double un = 4.0 * detail::kXn / (detail::kXn + 15.0 * detail::kYn + 3.0 * detail::kZn);
        const double vn = 9.0 * detail::kYn / (detail::kXn + 15.0 * detail::kYn + 3.0 * detail::kZn);
        const double up = denom > 0.0 ? 4.0 * x / denom : un;
        const double vp = denom > 0.0 ? 9.0 * y / denom : vn;
        const double u = 13.0 * l * (up - un);
        const double v = 13.0 * l * (vp - vn);
        out.samples[i * 3 + 0] = detail::q8(l * 255.0 / 100.0);
        out.samples[i * 3 + 1] = detail::q8(255.0 / 354.0 * (u + 134.0));
        out.samples[i * 3 + 2] = detail::q8(255.0 / 262.0 * (v + 140.0));
        break;
      }
      default:
        throw std::invalid_argument("convert_colorspace: unsupported target");
    }
  }
  return out;
}

// Inverse of the HSV conversion above (used to close the round trip).
inline ImageBuffer hsv_to_rgb(const ImageBuffer& img) {
  img.validate();
  if (img.colorspace != Colorspace::kHsv)
    throw std::invalid_argument("hsv_to_rgb: source must be HSV");
  ImageBuffer out = make_image(img.width, img.height, 3, Colorspace::kRgb);
  const std::size_t n = img.width * img.height;
  for (std::size_t i = 0; i < n; ++i) {
    const double h = img.samples[i * 3 + 0] / 255.0 * 360.0;
    const double s = img.samples[i * 3 + 1] / 255.0;
    const double v = img.samples[i * 3 + 2] / 255.0;
    const auto rgb = hsv_to_rgb_unit(std::min(h, 359.999999), s, v);
    for (int c = 0; c < 3; ++c) out.samples[i * 3 + c] = detail::q8(rgb[c] * 255.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contrast enhancement

enum class ContrastMode { kIntensityAdjust, kHistEq, kClahe };

namespace detail {

inline std::array<std::size_t, 256> histogram(const std::vector<std::uint8_t>& v) {
  std::array<std::size_t, 256> h{};
  for (std::uint8_t s : v) ++h[s];
  return h;
}

// Smallest level with cdf >= q * total.
inline int percentile_level(const std::array<std::size_t, 256>& hist, std::size_t total, double q) {
  const double target = q * static_cast<double>(total);
  double cum = 0.0;
  for (int lvl = 0; lvl < 256; ++lvl) {
    cum += static_cast<double>(hist[lvl]);
    if (cum >= target) return lvl;
  }
  return 255;
}

inline std::vector<std::uint8_t> luminance_plane(const ImageBuffer& img) {
  std::vector<std::uint8_t> y(img.width * img.height);
  if (img.channels == 1) {
    y = img.samples;
  } else {
    for (std::size_t i = 0; i < y.size(); ++i)
      y[i] = q8(0.299 * img.samples[i * 3] + 0.587 * img.samples[i * 3 + 1] +
                0.114 * img.samples[i * 3 + 2]);
  }
  return y;
}

// Applies a luminance remap y -> y' to an image: grayscale directly, RGB by
// scaling all channels by y'/y.
inline ImageBuffer apply_luminance_map(const ImageBuffer& img,
                                       const std::vector<std::uint8_t>& y_old,
                                       const std::vector<double>& y_new) {
  ImageBuffer out = img;
  const std::size_t n = img.width * img.height;
  if (img.channels == 1) {
    for (std::size_t i = 0; i < n; ++i) out.samples[i] = q8(y_new[i]);
    return out;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double scale = y_old[i] > 0 ? y_new[i] / static_cast<double>(y_old[i]) : 1.0;
    for (int c = 0; c < 3; ++c) out.samples[i * 3 + c] = q8(img.samples[i * 3 + c] * scale);
  }
  return out;
}

// Equalization map T(v) = round(255 * cdf(v)); a single occupied level maps
// to itself so constant inputs are fixed points.
inline std::array<double, 256> equalization_lut(const std::array<std::size_t, 256>& hist,
                                                std::size_t total) {
  std::array<double, 256> lut{};
  int occupied = 0, only = 0;
  for (int lvl = 0; lvl < 256; ++lvl)
    if (hist[lvl]) {
      ++occupied;
      only = lvl;
    }
  if (occupied <= 1) {
    for (int lvl = 0; lvl < 256; ++lvl) lut[lvl] = lvl;
    (void)only;
    return lut;
  }
  double cum = 0.0;
  for (int lvl = 0; lvl < 256; ++lvl) {
    cum += static_cast<double>(hist[lvl]);
    lut[lvl] = 255.0 * cum / static_cast<double>(total);
  }
  return lut;
}

// Clipped equalization map for one CLAHE tile: histogram mass above the clip
// limit is redistributed uniformly before building the cdf.
inline std::array<double, 256> clahe_tile_lut(const std::array<std::size_t, 256>& hist,
                                              std::size_t total, double clip_fraction) {
  int occupied = 0;
  for (int lvl = 0; lvl < 256; ++lvl)
    if (hist[lvl]) ++occupied;
  std::array<double, 256> lut{};
  if (occupied <= 1 || total == 0) {
    for (int lvl = 0; lvl < 256; ++lvl) lut[lvl] = lvl;
    return lut;
  }
  const double clip = std::max(1.0, clip_fraction * static_cast<double>(total));
  std::array<double, 256> h{};
  double excess = 0.0;
  for (int lvl = 0; lvl < 256; ++lvl) {
    const double v = static_cast<double>(hist[lvl]);
    h[lvl] = std::min(v, clip);
    excess += v - h[lvl];
  }
  const double share = excess / 256.0;
  double cum = 0.0;
  for (int lvl = 0; lvl < 256; ++lvl) {
    cum += h[lvl] + share;
    lut[lvl] = 255.0 * cum / static_cast<double>(total);
  }
  return lut;
}

}  // namespace detail

// intensity-adjust: linearly rescales the 1st-99th percentile range of each
// channel to [0,255]. hist-eq: equalizes the luminance histogram. clahe:
// tiled equalization (8x8 tiles, clip 0.01 of tile mass) with bilinear
// interpolation between tile maps.
inline ImageBuffer contrast_enhance(const ImageBuffer& img, ContrastMode mode) {
  img.validate();
  if (img.channels == 3 && img.colorspace != Colorspace::kRgb)
    throw std::invalid_argument("contrast: 3-channel input must be RGB");

  if (mode == ContrastMode::kIntensityAdjust) {
    ImageBuffer out = img;
    const std::size_t n = img.width * img.height;
    for (std::size_t c = 0; c < img.channels; ++c) {
      std::vector<std::uint8_t> plane(n);
      for (std::size_t i = 0; i < n; ++i) plane[i] = img.samples[i * img.channels + c];
      const auto hist = detail::histogram(plane);
      const int lo = detail::percentile_level(hist, n, 0.01);
      const int hi = detail::percentile_level(hist, n, 0.99);
      if (hi <= lo) continue;  // degenerate range: leave the channel unchanged
      const double scale = 255.0 / static_cast<double>(hi - lo);
      for (std::size_t i = 0; i < n; ++i)
        out.samples[i * img.channels + c] =
            detail::q8((static_cast<double>(plane[i]) - lo) * scale);
    }
    return out;
  }

  const std::vector<std::uint8_t> y = detail::luminance_plane(img);
  const std::size_t n = y.size();

  if (mode == ContrastMode::kHistEq) {
    const auto lut = detail::equalization_lut(detail::histogram(y), n);
    std::vector<double> mapped(n);
    for (std::size_t i = 0; i < n; ++i) mapped[i] = lut[y[i]];
    return detail::apply_luminance_map(img, y, mapped);
  }

  if (mode != ContrastMode::kClahe) throw std::invalid_argument("contrast: unsupported mode");

  // CLAHE on the luminance plane
  constexpr std::size_t kGrid = 8;
  constexpr double kClipFraction = 0.01;
  const std::size_t tile_h = (img.height + kGrid - 1) / kGrid;
  const std::size_t tile_w = (img.width + kGrid - 1) / kGrid;
  const std::size_t rows = (img.height + tile_h - 1) / tile_h;
  const std::size_t cols = (img.width + tile_w - 1) / tile_w;

  std::vector<std::array<double, 256>> luts(rows * cols);
  std::vector<std::pair<double, double>> centers(rows * cols);
  for (std::size_t tr = 0; tr < rows; ++tr)
    for (std::size_t tc = 0; tc < cols; ++tc) {
      const std::size_t y0 = tr * tile_h, y1 = std::min(y0 + tile_h, img.height);
      const std::size_t x0 = tc * tile_w, x1 = std::min(x0 + tile_w, img.width);
      std::array<std::size_t, 256> hist{};
      for (std::size_t yy = y0; yy < y1; ++yy)
        for (std::size_t xx = x0; xx < x1; ++xx) ++hist[y[yy * img.width + xx]];
      const std::size_t count = (y1 - y0) * (x1 - x0);
      luts[tr * cols + tc] = detail::clahe_tile_lut(hist, count, kClipFraction);
      centers[tr * cols + tc] = {(static_cast<double>(y0) + static_cast<double>(y1) - 1) / 2.0,
                                 (static_cast<double>(x0) + static_cast<double>(x1) - 1) / 2.0};
    }

  std::vector<double> mapped(n);
  for (std::size_t yy = 0; yy < img.height; ++yy) {
    // bracket the row between two tile-center rows
    double ry = 0;
    std::size_t tr0 = 0;
    if (rows == 1) {
      tr0 = 0;
      ry = 0;
    } else if (static_cast<double>(yy) <= centers[0].first) {
      tr0 = 0;
      ry = 0;
    } else if (static_cast<double>(yy) >= centers[(rows - 1) * cols].first) {
      tr0 = rows - 2;
      ry = 1;
    } else {
      while (tr0 + 1 < rows && centers[(tr0 + 1) * cols].first < static_cast<double>(yy)) ++tr0;
      const double c0 = centers[tr0 * cols].first, c1 = centers[(tr0 + 1) * cols].first;
      ry = (static_cast<double>(yy) - c0) / (c1 - c0);
    }
    for (std::size_t xx = 0; xx < img.width; ++xx) {
      double rx = 0;
      std::size_t tc0 = 0;
      if (cols == 1) {
        tc0 = 0;
        rx = 0;
      } else if (static_cast<double>(xx) <= centers[0].second) {
        tc0 = 0;
        rx = 0;
      } else if (static_cast<double>(xx) >= centers[cols - 1].second) {
        tc0 = cols - 2;
        rx = 1;
      } else {
        while (tc0 + 1 < cols && centers[tc0 + 1].second < static_cast<double>(xx)) ++tc0;
        const double c0 = centers[tc0].second, c1 = centers[tc0 + 1].second;
        rx = (static_cast<double>(xx) - c0) / (c1 - c0);
      }
      const std::uint8_t v = y[yy * img.width + xx];
      const std::size_t tr1 = rows == 1 ? tr0 : tr0 + 1;
      const std::size_t tc1 = cols == 1 ? tc0 : tc0 + 1;
      const double v00 = luts[tr0 * cols + tc0][v], v01 = luts[tr0 * cols + tc1][v];
      const double v10 = luts[tr1 * cols + tc0][v], v11 = luts[tr1 * cols + tc1][v];
      mapped[yy * img.width + xx] =
          (1 - ry) * ((1 - rx) * v00 + rx * v01) + ry * ((1 - rx) * v10 + rx * v11);
    }
  }
  return detail::apply_luminance_map(img, y, mapped);
}

// ---------------------------------------------------------------------------
// Bilinear resize, corner-aligned sampling.

inline ImageBuffer resize_patch(const ImageBuffer& img, std::size_t target_w,
                                std::size_t target_h) {
  img.validate();
  if (target_w == 0 || target_h == 0)
    throw std::invalid_argument("resize: target extents must be positive");
  ImageBuffer out = make_image(target_w, target_h, img.channels, img.colorspace);
  const double sx = target_w > 1 ? static_cast<double>(img.width - 1) /
                                       static_cast<double>(target_w - 1)
                                 : 0.0;
  const double sy = target_h > 1 ? static_cast<double>(img.height - 1) /
                                       static_cast<double>(target_h - 1)
                                 : 0.0;
  for (std::size_t y = 0; y < target_h; ++y) {
    const double fy = static_cast<double>(y) * sy;
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < target_w; ++x) {
      const double fx = static_cast<double>(x) * sx;
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double v = (1 - wy) * ((1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c)) +
                         wy * ((1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c));
        out.at(y, x, c) = detail::q8(v);
      }
    }
  }
  return out;
}

}  // namespace dfu

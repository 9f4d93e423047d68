#pragma once

// Classical patch descriptors: uniform LBP-8,1 histogram, Dalal-Triggs HOG
// with L2-Hys block normalization, and per-channel color histograms in
// RGB/HSV/L*u*v, concatenated into one self-describing feature vector.

#include <dfu/image.hpp>

#include <json.hpp>

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfu {

struct LbpConfig {
  std::size_t radius = 1;
  std::size_t neighbors = 8;  // uniform-59 mapping
};

struct HogConfig {
  std::size_t cell = 8;          // pixels per cell side
  std::size_t block = 2;         // cells per block side
  std::size_t block_stride = 1;  // cells
  std::size_t bins = 9;          // unsigned orientations over [0,180)
  double clip = 0.2;             // L2-Hys clip
};

struct ColorHistConfig {
  std::size_t bins = 32;  // per channel, over [0,255]
  std::vector<Colorspace> spaces = {Colorspace::kRgb, Colorspace::kHsv, Colorspace::kLuv};
};

struct FeatureConfig {
  LbpConfig lbp;
  HogConfig hog;
  ColorHistConfig color;
  std::size_t resize_to = 256;
};

struct FeatureSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};

struct FeatureVector {
  std::vector<double> values;
  std::vector<FeatureSegment> layout;
};

enum class FeatureSelection { kLbp, kLbpHog, kLbpHogColor };

inline FeatureSelection feature_selection_from_string(const std::string& s) {
  if (s == "lbp") return FeatureSelection::kLbp;
  if (s == "lbp+hog") return FeatureSelection::kLbpHog;
  if (s == "lbp+hog+color") return FeatureSelection::kLbpHogColor;
  throw std::invalid_argument("unknown feature selection: " + s);
}

inline const char* feature_selection_name(FeatureSelection s) {
  switch (s) {
    case FeatureSelection::kLbp: return "lbp";
    case FeatureSelection::kLbpHog: return "lbp+hog";
    case FeatureSelection::kLbpHogColor: return "lbp+hog+color";
  }
  return "?";
}

namespace detail {

inline std::vector<double> gray_plane(const ImageBuffer& img) {
  img.validate();
  std::vector<double> plane(img.width * img.height);
  if (img.channels == 1) {
    for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = img.samples[i];
  } else {
    if (img.colorspace != Colorspace::kRgb)
      throw std::invalid_argument("features: 3-channel input must be RGB");
    for (std::size_t i = 0; i < plane.size(); ++i)
      plane[i] = 0.299 * img.samples[i * 3] + 0.587 * img.samples[i * 3 + 1] +
                 0.114 * img.samples[i * 3 + 2];
  }
  return plane;
}

// circular bit-transition count of an 8-bit code
inline int bit_transitions(unsigned code) {
  int t = 0;
  for (int i = 0; i < 8; ++i) {
    const unsigned a = (code >> i) & 1u;
    const unsigned b = (code >> ((i + 1) % 8)) & 1u;
    t += a != b;
  }
  return t;
}

// code -> histogram bin: the 58 uniform patterns in ascending order, then
// one shared bin for the rest
inline const std::array<int, 256>& lbp_uniform_table() {
  static const std::array<int, 256> table = [] {
    std::array<int, 256> t{};
    int next = 0;
    for (int code = 0; code < 256; ++code)
      t[code] = bit_transitions(static_cast<unsigned>(code)) <= 2 ? next++ : -1;
    for (int code = 0; code < 256; ++code)
      if (t[code] < 0) t[code] = 58;
    return t;
  }();
  return table;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// LBP: per interior pixel an 8-bit code, one bit per neighbor clockwise from
// the top-left, set when neighbor >= center; uniform codes (at most two
// circular transitions) get their own bins, the rest share one.

inline std::vector<double> lbp_histogram(const ImageBuffer& img, const LbpConfig& cfg = {}) {
  if (cfg.radius != 1 || cfg.neighbors != 8)
    throw std::invalid_argument("lbp: only the 8,1 configuration is implemented");
  if (img.width < 3 || img.height < 3)
    throw std::invalid_argument("lbp: image must be at least 3x3");
  const std::vector<double> plane = detail::gray_plane(img);
  const std::size_t w = img.width, h = img.height;
  // clockwise from top-left; the first neighbor is the most significant bit
  static constexpr std::array<std::array<int, 2>, 8> kOffsets = {
      {{-1, -1}, {-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}}};
  std::vector<double> hist(59, 0.0);
  std::size_t count = 0;
  for (std::size_t y = 1; y + 1 < h; ++y)
    for (std::size_t x = 1; x + 1 < w; ++x) {
      const double center = plane[y * w + x];
      unsigned code = 0;
      for (std::size_t i = 0; i < 8; ++i) {
        const double v = plane[(y + kOffsets[i][0]) * w + (x + kOffsets[i][1])];
        if (v >= center) code |= 1u << (7 - i);
      }
      hist[detail::lbp_uniform_table()[code]] += 1.0;
      ++count;
    }
  for (double& v : hist) v /= static_cast<double>(count);
  return hist;
}

// ---------------------------------------------------------------------------
// HOG on a grayscale plane: clamped central differences, magnitude-weighted
// bilinear votes into 9 unsigned orientation bins (centers at 0,20,...,160
// degrees), 2x2-cell blocks at 1-cell stride with L2-Hys normalization.

inline std::vector<double> hog_descriptor_plane(const std::vector<double>& plane, std::size_t w,
                                                std::size_t h, const HogConfig& cfg = {}) {
  const std::size_t cells_x = w / cfg.cell, cells_y = h / cfg.cell;
  if (cells_x < cfg.block || cells_y < cfg.block)
    throw std::invalid_argument("hog: image smaller than one block");
  const std::size_t bins = cfg.bins;
  std::vector<double> cell_hist(cells_x * cells_y * bins, 0.0);

  const double bin_width = 180.0 / static_cast<double>(bins);
  for (std::size_t y = 0; y < cells_y * cfg.cell; ++y)
    for (std::size_t x = 0; x < cells_x * cfg.cell; ++x) {
      const std::size_t xl = x > 0 ? x - 1 : 0, xr = x + 1 < w ? x + 1 : w - 1;
      const std::size_t yu = y > 0 ? y - 1 : 0, yd = y + 1 < h ? y + 1 : h - 1;
      const double gx = plane[y * w + xr] - plane[y * w + xl];
      const double gy = plane[yd * w + x] - plane[yu * w + x];
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      double theta = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
      theta = std::fmod(theta + 360.0, 180.0);
      const double t = theta / bin_width;
      const std::size_t b0 = static_cast<std::size_t>(t) % bins;
      const double frac = t - std::floor(t);
      const std::size_t cell_idx = (y / cfg.cell) * cells_x + (x / cfg.cell);
      cell_hist[cell_idx * bins + b0] += (1.0 - frac) * mag;
      cell_hist[cell_idx * bins + (b0 + 1) % bins] += frac * mag;
    }

  const std::size_t blocks_x = (cells_x - cfg.block) / cfg.block_stride + 1;
  const std::size_t blocks_y = (cells_y - cfg.block) / cfg.block_stride + 1;
  const std::size_t block_len = cfg.block * cfg.block * bins;
  std::vector<double> out;
  out.reserve(blocks_x * blocks_y * block_len);
  constexpr double kEps2 = 1e-24;
  std::vector<double> block(block_len);
  for (std::size_t by = 0; by < blocks_y; ++by)
    for (std::size_t bx = 0; bx < blocks_x; ++bx) {
      std::size_t at = 0;
      for (std::size_t cy = 0; cy < cfg.block; ++cy)
        for (std::size_t cx = 0; cx < cfg.block; ++cx) {
          const std::size_t cell_idx =
              (by * cfg.block_stride + cy) * cells_x + (bx * cfg.block_stride + cx);
          for (std::size_t b = 0; b < bins; ++b) block[at++] = cell_hist[cell_idx * bins + b];
        }
      double norm2 = kEps2;
      for (double v : block) norm2 += v * v;
      double inv = 1.0 / std::sqrt(norm2);
      for (double& v : block) v = std::min(v * inv, cfg.clip);
      norm2 = kEps2;
      for (double v : block) norm2 += v * v;
      inv = 1.0 / std::sqrt(norm2);
      for (double v : block) out.push_back(v * inv);
    }
  return out;
}

inline std::vector<double> hog_descriptor(const ImageBuffer& img, const HogConfig& cfg = {}) {
  return hog_descriptor_plane(detail::gray_plane(img), img.width, img.height, cfg);
}

inline std::size_t hog_length(std::size_t w, std::size_t h, const HogConfig& cfg = {}) {
  const std::size_t cells_x = w / cfg.cell, cells_y = h / cfg.cell;
  const std::size_t blocks_x = (cells_x - cfg.block) / cfg.block_stride + 1;
  const std::size_t blocks_y = (cells_y - cfg.block) / cfg.block_stride + 1;
  return blocks_x * blocks_y * cfg.block * cfg.block * cfg.bins;
}

// ---------------------------------------------------------------------------
// Per-channel color histograms in each configured space, 32 bins over
// [0,255], each channel histogram normalized to sum 1.

inline std::vector<std::pair<std::string, std::vector<double>>> color_histograms(
    const ImageBuffer& img, const ColorHistConfig& cfg = {}) {
  img.validate();
  if (img.channels != 3 || img.colorspace != Colorspace::kRgb)
    throw std::invalid_argument("color histograms: input must be RGB");
  std::vector<std::pair<std::string, std::vector<double>>> out;
  const std::size_t n = img.width * img.height;
  const std::size_t shift = 256 / cfg.bins;
  for (Colorspace space : cfg.spaces) {
    const ImageBuffer converted = convert_colorspace(img, space);
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> hist(cfg.bins, 0.0);
      for (std::size_t i = 0; i < n; ++i) hist[converted.samples[i * 3 + c] / shift] += 1.0;
      for (double& v : hist) v /= static_cast<double>(n);
      out.emplace_back(std::string("color:") + colorspace_name(space) + ":" + std::to_string(c),
                       std::move(hist));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Assembly: resize to 256x256, compute the selected descriptors, concatenate
// lbp || hog || color with a layout descriptor.

inline FeatureVector extract_features(const ImageBuffer& patch, FeatureSelection which,
                                      const FeatureConfig& cfg = {}) {
  const ImageBuffer resized = resize_patch(patch, cfg.resize_to, cfg.resize_to);
  FeatureVector fv;
  auto append = [&fv](const std::string& name, const std::vector<double>& values) {
    fv.layout.push_back({name, fv.values.size(), values.size()});
    fv.values.insert(fv.values.end(), values.begin(), values.end());
  };
  append("lbp", lbp_histogram(resized, cfg.lbp));
  if (which != FeatureSelection::kLbp) append("hog", hog_descriptor(resized, cfg.hog));
  if (which == FeatureSelection::kLbpHogColor)
    for (auto& [name, hist] : color_histograms(resized, cfg.color)) append(name, hist);
  return fv;
}

// ---------------------------------------------------------------------------
// Feature matrix file: CSV with header "id,label,f0..fN"; a sidecar JSON
// (path + ".meta.json") records the configuration and segment layout.

struct FeatureRow {
  std::string id;
  int label = 0;
  std::vector<double> values;
};

inline void write_feature_csv(const std::string& path, const std::vector<FeatureRow>& rows,
                              const std::vector<FeatureSegment>& layout,
                              FeatureSelection which, const FeatureConfig& cfg = {}) {
  if (rows.empty()) throw std::invalid_argument("feature csv: no rows");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "id,label";
  for (std::size_t i = 0; i < rows.front().values.size(); ++i) out << ",f" << i;
  out << '\n';
  out.precision(17);
  for (const FeatureRow& row : rows) {
    out << row.id << ',' << row.label;
    for (double v : row.values) out << ',' << v;
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);

  nlohmann::json meta = {
      {"which", feature_selection_name(which)},
      {"resize_to", cfg.resize_to},
      {"lbp", {{"radius", cfg.lbp.radius}, {"neighbors", cfg.lbp.neighbors}, {"bins", 59}}},
      {"hog",
       {{"cell", cfg.hog.cell},
        {"block", cfg.hog.block},
        {"block_stride", cfg.hog.block_stride},
        {"bins", cfg.hog.bins},
        {"clip", cfg.hog.clip}}},
      {"color", {{"bins", cfg.color.bins}}},
  };
  nlohmann::json segments = nlohmann::json::array();
  for (const FeatureSegment& s : layout)
    segments.push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.length}});
  meta["layout"] = segments;
  std::ofstream meta_out(path + ".meta.json");
  if (!meta_out) throw IoError("cannot open " + path + ".meta.json for writing");
  meta_out << meta.dump(2) << '\n';
}

inline std::vector<FeatureRow> read_feature_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open feature csv: " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("id,label", 0) != 0)
    throw IoError("feature csv must start with the id,label header");
  std::vector<FeatureRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    FeatureRow row;
    std::size_t pos = line.find(',');
    if (pos == std::string::npos) throw IoError("feature csv row lacks columns");
    row.id = line.substr(0, pos);
    std::size_t next = line.find(',', pos + 1);
    row.label = std::stoi(line.substr(pos + 1, next - pos - 1));
    while (next != std::string::npos) {
      pos = next;
      next = line.find(',', pos + 1);
      row.values.push_back(std::stod(line.substr(pos + 1, next - pos - 1)));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace dfu

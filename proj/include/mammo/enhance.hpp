// Feature-enhancement transforms producing the model-input variants of an
// image: identity, negative, contrast-limited adaptive histogram equalisation
// and a rendered histogram-of-oriented-gradients image.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "mammo/image.hpp"

namespace mammo {

enum class EnhancementKind : std::uint8_t { Original, Negative, AHE, HOG };

inline constexpr std::array<EnhancementKind, 4> kAllEnhancements{EnhancementKind::Original, EnhancementKind::Negative,
                                                                 EnhancementKind::AHE, EnhancementKind::HOG};

inline std::string_view enhancement_name(EnhancementKind k) {
  switch (k) {
    case EnhancementKind::Original: return "original";
    case EnhancementKind::Negative: return "negative";
    case EnhancementKind::AHE: return "ahe";
    case EnhancementKind::HOG: return "hog";
  }
  return "?";
}

inline EnhancementKind parse_enhancement(std::string_view name) {
  for (auto k : kAllEnhancements) {
    if (enhancement_name(k) == name) return k;
  }
  if (name == "orig") return EnhancementKind::Original;
  if (name == "neg") return EnhancementKind::Negative;
  throw std::invalid_argument("unknown enhancement '" + std::string(name) + "' (expected original|negative|ahe|hog)");
}

struct AheParams {
  std::size_t tile_rows = 8;
  std::size_t tile_cols = 8;
  /// Multiple of the uniform bin height; infinity disables clipping.
  double clip_limit = 2.0;
  std::size_t bins = 256;
};

struct HogParams {
  std::size_t cell = 8;
  std::size_t block = 2;
  std::size_t bins = 9;
  bool signed_orientation = false;
};

struct HogDescriptor {
  std::size_t blocks_y = 0;
  std::size_t blocks_x = 0;
  std::size_t block = 0;
  std::size_t bins = 0;
  std::vector<double> values;  // [blocks_y][blocks_x][block][block][bins]

  std::size_t cells_y() const { return blocks_y + block - 1; }
  std::size_t cells_x() const { return blocks_x + block - 1; }
};

struct EnhanceConfig {
  AheParams ahe;
  HogParams hog;
};

inline ImageGray negative(const ImageGray& img) {
  ImageGray out = img;
  for (auto& p : out.pixels) p = static_cast<std::uint8_t>(255 - p);
  return out;
}

namespace detail {

// Per-tile lookup table (real valued). The tile CDF is stretched so the
// tile's darkest occupied bin maps to 0 and its brightest to 255; a tile with
// a single occupied bin keeps the identity mapping.
inline std::vector<double> ahe_tile_lut(const ImageGray& img, std::size_t x0, std::size_t y0, std::size_t tw, std::size_t th,
                                        const AheParams& p) {
  std::vector<double> hist(p.bins, 0.0);
  auto bin_of = [&](std::uint8_t v) { return static_cast<std::size_t>(v) * p.bins / 256; };
  for (std::size_t y = y0; y < y0 + th; ++y) {
    const std::size_t yy = std::min(y, img.height - 1);
    for (std::size_t x = x0; x < x0 + tw; ++x) hist[bin_of(img.at(std::min(x, img.width - 1), yy))] += 1.0;
  }
  std::size_t lo = 0, hi = p.bins - 1;
  while (hist[lo] == 0.0) ++lo;
  while (hist[hi] == 0.0) --hi;
  std::vector<double> lut(256);
  if (lo == hi) {
    for (std::size_t v = 0; v < 256; ++v) lut[v] = static_cast<double>(v);
    return lut;
  }
  if (std::isfinite(p.clip_limit)) {
    const double limit = p.clip_limit * static_cast<double>(tw * th) / static_cast<double>(p.bins);
    double excess = 0.0;
    for (auto& h : hist) {
      if (h > limit) {
        excess += h - limit;
        h = limit;
      }
    }
    const double share = excess / static_cast<double>(p.bins);
    for (auto& h : hist) h += share;
  }
  std::vector<double> cdf(p.bins);
  double run = 0.0;
  for (std::size_t b = 0; b < p.bins; ++b) cdf[b] = (run += hist[b]);
  const double cmin = cdf[lo], cmax = cdf[hi];
  for (std::size_t v = 0; v < 256; ++v) {
    const double c = std::clamp(cdf[bin_of(static_cast<std::uint8_t>(v))], cmin, cmax);
    lut[v] = 255.0 * (c - cmin) / (cmax - cmin);
  }
  return lut;
}

}  // namespace detail

/// Contrast-limited adaptive histogram equalisation with bilinear blending of
/// the per-tile mappings between tile centres. Partial tiles at the right and
/// bottom edges are padded by edge replication.
inline ImageGray ahe(const ImageGray& img, const AheParams& p = {}) {
  if (p.tile_rows == 0 || p.tile_cols == 0) throw std::invalid_argument("ahe: tile grid must be at least 1x1");
  if (p.bins < 2 || p.bins > 256) throw std::invalid_argument("ahe: bins must lie in [2, 256]");
  if (!(p.clip_limit >= 1.0)) throw std::invalid_argument("ahe: clip_limit must be >= 1");
  if (img.width < p.tile_cols || img.height < p.tile_rows) throw std::invalid_argument("ahe: image smaller than the tile grid");
  const std::size_t tw = (img.width + p.tile_cols - 1) / p.tile_cols;
  const std::size_t th = (img.height + p.tile_rows - 1) / p.tile_rows;
  std::vector<std::vector<double>> luts(p.tile_rows * p.tile_cols);
  for (std::size_t ty = 0; ty < p.tile_rows; ++ty)
    for (std::size_t tx = 0; tx < p.tile_cols; ++tx) luts[ty * p.tile_cols + tx] = detail::ahe_tile_lut(img, tx * tw, ty * th, tw, th, p);

  // Neighbouring tile pair and weight along one axis for pixel coordinate c.
  auto axis = [](std::size_t c, std::size_t tile, std::size_t count) {
    const double pos = (static_cast<double>(c) + 0.5) / static_cast<double>(tile) - 0.5;
    if (pos <= 0.0) return std::tuple<std::size_t, std::size_t, double>{0, 0, 0.0};
    if (pos >= static_cast<double>(count - 1)) return std::tuple<std::size_t, std::size_t, double>{count - 1, count - 1, 0.0};
    const auto i0 = static_cast<std::size_t>(pos);
    return std::tuple<std::size_t, std::size_t, double>{i0, i0 + 1, pos - static_cast<double>(i0)};
  };

  ImageGray out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    const auto [y0, y1, fy] = axis(y, th, p.tile_rows);
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto [x0, x1, fx] = axis(x, tw, p.tile_cols);
      const std::uint8_t v = img.at(x, y);
      const double top = (1.0 - fx) * luts[y0 * p.tile_cols + x0][v] + fx * luts[y0 * p.tile_cols + x1][v];
      const double bot = (1.0 - fx) * luts[y1 * p.tile_cols + x0][v] + fx * luts[y1 * p.tile_cols + x1][v];
      const double val = (1.0 - fy) * top + fy * bot;
      out.at(x, y) = static_cast<std::uint8_t>(std::clamp<long>(std::lround(val), 0, 255));
    }
  }
  return out;
}

/// Unnormalised per-cell orientation histograms, [cells_y][cells_x][bins].
/// Gradients use [-1, 0, 1] with replicated borders; each pixel votes its
/// magnitude into the two nearest orientation bins (bin i centred at i·width).
inline std::vector<double> hog_cell_histograms(const ImageGray& img, const HogParams& p, std::size_t& cells_y,
                                               std::size_t& cells_x) {
  cells_y = img.height / p.cell;
  cells_x = img.width / p.cell;
  const double range = p.signed_orientation ? 360.0 : 180.0;
  const double width = range / static_cast<double>(p.bins);
  std::vector<double> hist(cells_y * cells_x * p.bins, 0.0);
  auto px = [&](long x, long y) {
    x = std::clamp<long>(x, 0, static_cast<long>(img.width) - 1);
    y = std::clamp<long>(y, 0, static_cast<long>(img.height) - 1);
    return static_cast<double>(img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)));
  };
  for (std::size_t y = 0; y < cells_y * p.cell; ++y) {
    for (std::size_t x = 0; x < cells_x * p.cell; ++x) {
      const long xi = static_cast<long>(x), yi = static_cast<long>(y);
      const double gx = px(xi + 1, yi) - px(xi - 1, yi);
      const double gy = px(xi, yi + 1) - px(xi, yi - 1);
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      double angle = std::atan2(gy, gx) * 180.0 / std::numbers::pi;
      angle = std::fmod(angle + 360.0, range);
      if (angle >= range) angle -= range;
      const double pos = angle / width;
      const auto b0 = static_cast<std::size_t>(pos) % p.bins;
      const std::size_t b1 = (b0 + 1) % p.bins;
      const double frac = pos - std::floor(pos);
      double* cell = hist.data() + ((y / p.cell) * cells_x + x / p.cell) * p.bins;
      cell[b0] += mag * (1.0 - frac);
      cell[b1] += mag * frac;
    }
  }
  return hist;
}

/// Block-normalised HOG descriptor (L2-Hys: normalise, clip at 0.2, renormalise).
inline HogDescriptor hog_descriptor(const ImageGray& img, const HogParams& p = {}) {
  if (p.cell < 2 || p.block < 1 || p.bins < 2) throw std::invalid_argument("hog: require cell >= 2, block >= 1, bins >= 2");
  if (img.width < p.cell * p.block || img.height < p.cell * p.block) {
    throw std::invalid_argument("hog: image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                " too small for cell " + std::to_string(p.cell) + " x block " + std::to_string(p.block));
  }
  std::size_t cy = 0, cx = 0;
  const auto cells = hog_cell_histograms(img, p, cy, cx);
  HogDescriptor d;
  d.blocks_y = cy - p.block + 1;
  d.blocks_x = cx - p.block + 1;
  d.block = p.block;
  d.bins = p.bins;
  const std::size_t len = p.block * p.block * p.bins;
  d.values.assign(d.blocks_y * d.blocks_x * len, 0.0);
  constexpr double eps2 = 1e-12;
  std::vector<double> v(len);
  for (std::size_t by = 0; by < d.blocks_y; ++by) {
    for (std::size_t bx = 0; bx < d.blocks_x; ++bx) {
      std::size_t k = 0;
      for (std::size_t i = 0; i < p.block; ++i)
        for (std::size_t j = 0; j < p.block; ++j)
          for (std::size_t b = 0; b < p.bins; ++b) v[k++] = cells[((by + i) * cx + bx + j) * p.bins + b];
      double n2 = 0.0;
      for (double e : v) n2 += e * e;
      double norm = std::sqrt(n2 + eps2);
      for (double& e : v) e = std::min(e / norm, 0.2);
      n2 = 0.0;
      for (double e : v) n2 += e * e;
      norm = std::sqrt(n2 + eps2);
      std::copy(v.begin(), v.end(), d.values.begin() + static_cast<long>((by * d.blocks_x + bx) * len));
      for (std::size_t e = 0; e < len; ++e) d.values[(by * d.blocks_x + bx) * len + e] /= norm;
    }
  }
  return d;
}

/// Orientation-energy glyph image: each cell draws one line segment per bin,
/// perpendicular to the bin's gradient direction (i.e. along the edge), with
/// intensity equal to the cell's mean normalised bin value. The brightest
/// glyph maps to 255.
inline ImageGray hog_render(const HogDescriptor& d, const HogParams& p, std::size_t out_h, std::size_t out_w) {
  if (d.block != p.block || d.bins != p.bins) throw std::invalid_argument("hog_render: descriptor does not match params");
  const std::size_t cy = d.cells_y(), cx = d.cells_x();
  const std::size_t len = d.block * d.block * d.bins;
  std::vector<double> energy(cy * cx * d.bins, 0.0);
  std::vector<double> count(cy * cx, 0.0);
  for (std::size_t by = 0; by < d.blocks_y; ++by)
    for (std::size_t bx = 0; bx < d.blocks_x; ++bx)
      for (std::size_t i = 0; i < d.block; ++i)
        for (std::size_t j = 0; j < d.block; ++j) {
          const std::size_t c = (by + i) * cx + bx + j;
          count[c] += 1.0;
          for (std::size_t b = 0; b < d.bins; ++b)
            energy[c * d.bins + b] += d.values[(by * d.blocks_x + bx) * len + (i * d.block + j) * d.bins + b];
        }
  for (std::size_t c = 0; c < cy * cx; ++c)
    for (std::size_t b = 0; b < d.bins; ++b) energy[c * d.bins + b] /= count[c];

  std::vector<double> canvas(out_h * out_w, 0.0);
  const double range = p.signed_orientation ? 360.0 : 180.0;
  const double sy = static_cast<double>(out_h) / static_cast<double>(cy);
  const double sx = static_cast<double>(out_w) / static_cast<double>(cx);
  for (std::size_t ci = 0; ci < cy; ++ci) {
    for (std::size_t cj = 0; cj < cx; ++cj) {
      const double y_lo = ci * sy, x_lo = cj * sx;
      const double ccy = y_lo + sy / 2.0, ccx = x_lo + sx / 2.0;
      const double half = 0.5 * std::min(sy, sx) - 0.5;
      for (std::size_t b = 0; b < d.bins; ++b) {
        const double e = energy[(ci * cx + cj) * d.bins + b];
        if (e <= 0.0) continue;
        const double theta = (static_cast<double>(b) * range / static_cast<double>(d.bins) + 90.0) * std::numbers::pi / 180.0;
        const double dx = std::cos(theta), dy = std::sin(theta);
        const auto steps = static_cast<int>(std::ceil(4.0 * half)) + 1;
        for (int s = -steps; s <= steps; ++s) {
          const double t = half * static_cast<double>(s) / static_cast<double>(steps);
          const double fy = std::clamp(ccy + t * dy, y_lo, y_lo + sy - 1e-9);
          const double fx = std::clamp(ccx + t * dx, x_lo, x_lo + sx - 1e-9);
          const auto yy = static_cast<std::size_t>(fy), xx = static_cast<std::size_t>(fx);
          if (yy >= out_h || xx >= out_w) continue;
          double& px = canvas[yy * out_w + xx];
          px = std::max(px, e);
        }
      }
    }
  }
  const double mx = *std::max_element(canvas.begin(), canvas.end());
  ImageGray out(out_w, out_h);
  if (mx <= 0.0) return out;
  for (std::size_t i = 0; i < canvas.size(); ++i) out.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * canvas[i] / mx));
  return out;
}

inline ImageGray enhance(const ImageGray& img, EnhancementKind kind, const EnhanceConfig& cfg = {}) {
  switch (kind) {
    case EnhancementKind::Original: return img;
    case EnhancementKind::Negative: return negative(img);
    case EnhancementKind::AHE: return ahe(img, cfg.ahe);
    case EnhancementKind::HOG: return hog_render(hog_descriptor(img, cfg.hog), cfg.hog, img.height, img.width);
  }
  throw std::invalid_argument("enhance: invalid kind");
}

}  // namespace mammo

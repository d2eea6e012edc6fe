#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <vector>

#include "pcpred/data.hpp"

namespace pcpred {

namespace {

struct Pt {
  double x, y;
};
using Stroke = std::vector<Pt>;

Stroke ellipse(double cx, double cy, double rx, double ry) {
  constexpr int kSegments = 32;
  Stroke s;
  for (int i = 0; i <= kSegments; ++i) {
    const double a = 2.0 * std::numbers::pi * i / kSegments;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return s;
}

// Digit outlines on the 28 x 28 grid, y pointing down.
std::vector<Stroke> digit_strokes(int digit) {
  switch (digit) {
    case 0: return {ellipse(14, 14, 5.5, 8.5)};
    case 1: return {{{11, 8}, {15, 4.5}, {15, 23.5}}};
    case 2:
      return {{{8.5, 9}, {10.5, 5.5}, {14, 4.5}, {17.5, 5.5}, {19.5, 9}, {18.5, 12.5},
               {9, 23}, {20, 23}}};
    case 3:
      return {{{8.5, 6.5}, {12, 4.5}, {16.5, 5}, {19, 8}, {18, 11.5}, {13.5, 13.5}},
              {{13.5, 13.5}, {18, 15}, {19.5, 19}, {17, 22.5}, {12.5, 23.5}, {8.5, 21.5}}};
    case 4: return {{{17, 23.5}, {17, 4.5}, {8, 17}, {20.5, 17}}};
    case 5:
      return {{{19, 5}, {10.5, 5}, {9.5, 13}, {14, 12}, {18, 13.5}, {19.5, 17.5}, {18, 21.5},
               {13.5, 23.5}, {9, 21.5}}};
    case 6:
      return {{{18, 6}, {14.5, 4.5}, {11, 7}, {9, 12}, {9, 18}, {11, 22}, {14.5, 23.5},
               {18, 21.5}, {19.5, 17.5}, {17.5, 14}, {14, 13}, {10.5, 14.5}, {9, 17}}};
    case 7: return {{{8, 5}, {20, 5}, {17, 11}, {12.5, 23.5}}};
    case 8: return {ellipse(14, 9.5, 4.5, 4.5), ellipse(14, 18.5, 5.5, 5)};
    default: return {ellipse(14, 10, 5, 5.5), {{19, 10}, {18.5, 17}, {16, 23.5}}};
  }
}

double segment_distance(Pt p, Pt a, Pt b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

Glyph rasterize(int digit, double half_width, double slant) {
  auto strokes = digit_strokes(digit);
  for (auto& s : strokes) {
    for (auto& p : s) p.x += slant * (14.0 - p.y);
  }
  Glyph g;
  for (std::size_t r = 0; r < Glyph::kSide; ++r) {
    for (std::size_t c = 0; c < Glyph::kSide; ++c) {
      const Pt center{c + 0.5, r + 0.5};
      double d = 1e9;
      for (const auto& s : strokes) {
        for (std::size_t i = 0; i + 1 < s.size(); ++i) d = std::min(d, segment_distance(center, s[i], s[i + 1]));
      }
      // One-pixel linear falloff outside the pen radius.
      const double coverage = std::clamp(half_width + 0.5 - d, 0.0, 1.0);
      g.pixels[r * Glyph::kSide + c] = static_cast<std::uint8_t>(std::lround(255.0 * coverage));
    }
  }
  return g;
}

std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw DataError(DataErrc::truncated_payload, "IDX header");
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
         (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

}  // namespace

const std::vector<Glyph>& builtin_glyphs() {
  static const std::vector<Glyph> bank = [] {
    std::vector<Glyph> out;
    for (int d = 0; d < 10; ++d) out.push_back(rasterize(d, 1.6, 0.0));
    for (int d = 0; d < 10; ++d) out.push_back(rasterize(d, 2.1, 0.18));
    return out;
  }();
  return bank;
}

std::vector<Glyph> load_idx_glyphs(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(DataErrc::io_failure, "cannot open '" + path + "'");
  if (read_be32(is) != 0x00000803u) {
    throw DataError(DataErrc::bad_magic, "'" + path + "' is not an IDX3 ubyte file");
  }
  const std::uint32_t count = read_be32(is);
  const std::uint32_t rows = read_be32(is);
  const std::uint32_t cols = read_be32(is);
  if (rows != Glyph::kSide || cols != Glyph::kSide) {
    throw DataError(DataErrc::invalid_value, "IDX rasters must be 28x28");
  }
  std::vector<Glyph> out(count);
  for (auto& g : out) {
    if (!is.read(reinterpret_cast<char*>(g.pixels.data()), g.pixels.size())) {
      throw DataError(DataErrc::truncated_payload, "'" + path + "' ends early");
    }
  }
  if (out.empty()) throw DataError(DataErrc::invalid_value, "'" + path + "' holds no glyphs");
  return out;
}

}  // namespace pcpred

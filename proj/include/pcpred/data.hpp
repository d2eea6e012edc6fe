#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcpred/geometry.hpp"

namespace pcpred {

enum class DataErrc {
  bad_magic,
  truncated_payload,
  inconsistent_point_count,
  invalid_value,
  io_failure,
};

const char* to_string(DataErrc code);

class DataError : public std::runtime_error {
 public:
  DataError(DataErrc code, const std::string& detail);
  DataErrc code() const noexcept { return code_; }

 private:
  DataErrc code_;
};

/// One point cloud: n x 3 coordinates and, optionally, n x 3 colors in [0, 1].
struct Frame {
  std::vector<double> points;
  std::vector<double> colors;  // empty when the frame has no colors

  std::size_t size() const { return points.size() / 3; }
  bool has_colors() const { return !colors.empty(); }
  MatrixView view() const { return {points, size(), 3}; }
  MatrixView color_view() const { return {colors, size(), 3}; }

  /// Throws DataError(invalid_value) on NaN/Inf or out-of-range colors.
  void validate() const;
};

struct Sequence {
  std::vector<Frame> frames;

  std::size_t length() const { return frames.size(); }
  std::size_t point_count() const { return frames.empty() ? 0 : frames.front().size(); }
  bool has_colors() const { return !frames.empty() && frames.front().has_colors(); }

  /// At least two frames, one shared point count, consistent colors.
  void validate() const;
};

/// 28 x 28 grayscale raster, row-major, brightness 0..255.
struct Glyph {
  static constexpr std::size_t kSide = 28;
  std::array<std::uint8_t, kSide * kSide> pixels{};
};

/// Bundled procedurally rasterized digits 0-9 in two stroke styles.
const std::vector<Glyph>& builtin_glyphs();

/// Reads an IDX3 unsigned-byte image file of 28 x 28 rasters.
std::vector<Glyph> load_idx_glyphs(const std::string& path);

struct MnistGenConfig {
  int digits = 1;
  std::size_t frames = 20;
  std::size_t points_per_digit = 128;
  double area = 64.0;
  std::uint64_t seed = 0;
  double speed_min = 3.0;  // pixels per frame
  double speed_max = 4.0;
  std::uint8_t brightness_threshold = 16;
  const std::vector<Glyph>* glyphs = nullptr;  // builtin bank when null

  void validate() const;
};

/// Digits translate at a constant random velocity and reflect off the area
/// boundary. Point order is fixed across frames, z is always 0.
Sequence generate_mnist_sequence(const MnistGenConfig& cfg);

/// p' = scale * p + translation; colors are untouched.
Frame rescale_external(const Frame& frame, double scale, const std::array<double, 3>& translation);

// ".pcsq": "PCSQ1\n", u64 T, u64 n, u8 has_colors, then per frame n x 3
// f32 coordinates followed by n x 3 f32 colors when flagged. Little-endian.
void write_sequence(const Sequence& seq, const std::string& path);
Sequence read_sequence(const std::string& path);

/// Sorted *.pcsq paths in a directory.
std::vector<std::filesystem::path> list_sequences(const std::filesystem::path& dir);

/// ASCII PLY with float x,y,z and uchar red,green,blue (white without colors).
void export_ply(const Frame& frame, const std::string& path);

}  // namespace pcpred

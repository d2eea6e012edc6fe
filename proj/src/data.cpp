#include "pcpred/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "pcpred/rng.hpp"

namespace pcpred {

static_assert(std::endian::native == std::endian::little,
              "sequence I/O assumes a little-endian host");

const char* to_string(DataErrc code) {
  switch (code) {
    case DataErrc::bad_magic: return "bad magic";
    case DataErrc::truncated_payload: return "truncated payload";
    case DataErrc::inconsistent_point_count: return "inconsistent point count";
    case DataErrc::invalid_value: return "invalid value";
    case DataErrc::io_failure: return "I/O failure";
  }
  return "unknown";
}

DataError::DataError(DataErrc code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

void Frame::validate() const {
  if (points.size() % 3 != 0) {
    throw DataError(DataErrc::invalid_value, "coordinate buffer is not n x 3");
  }
  for (double x : points) {
    if (!std::isfinite(x)) throw DataError(DataErrc::invalid_value, "non-finite coordinate");
  }
  if (has_colors()) {
    if (colors.size() != points.size()) {
      throw DataError(DataErrc::inconsistent_point_count, "color count differs from point count");
    }
    for (double c : colors) {
      if (!(c >= 0.0 && c <= 1.0)) throw DataError(DataErrc::invalid_value, "color outside [0,1]");
    }
  }
}

void Sequence::validate() const {
  if (frames.size() < 2) throw DataError(DataErrc::invalid_value, "a sequence needs two frames");
  for (const auto& f : frames) {
    f.validate();
    if (f.size() != point_count()) {
      throw DataError(DataErrc::inconsistent_point_count,
                      "frame with " + std::to_string(f.size()) + " points in a sequence of " +
                          std::to_string(point_count()));
    }
    if (f.has_colors() != has_colors()) {
      throw DataError(DataErrc::inconsistent_point_count, "colors present on some frames only");
    }
  }
}

// ---------------------------------------------------------------------------
// moving digits

void MnistGenConfig::validate() const {
  if (digits != 1 && digits != 2) throw std::invalid_argument("digits must be 1 or 2");
  if (frames < 2) throw std::invalid_argument("at least two frames are required");
  if (points_per_digit == 0) throw std::invalid_argument("points_per_digit must be positive");
  if (!(area > static_cast<double>(Glyph::kSide))) {
    throw std::invalid_argument("area must exceed the glyph size");
  }
  if (speed_min < 0.0 || speed_max < speed_min) throw std::invalid_argument("bad speed range");
  if (glyphs && glyphs->empty()) throw std::invalid_argument("empty glyph bank");
}

namespace {

struct DigitTrack {
  std::vector<double> local_x, local_y;  // pixel centers inside the glyph box
  double x = 0.0, y = 0.0;               // box corner
  double vx = 0.0, vy = 0.0;
};

// Weighted pixel sample: without replacement (Efraimidis-Spirakis keys)
// when there are enough pixels, with replacement otherwise.
std::vector<std::size_t> sample_pixels(const std::vector<std::size_t>& pixel,
                                       const std::vector<double>& weight, std::size_t m,
                                       Rng& rng) {
  std::vector<std::size_t> out;
  if (pixel.size() >= m) {
    std::vector<std::pair<double, std::size_t>> keys;
    for (std::size_t i = 0; i < pixel.size(); ++i) {
      const double u = std::max(rng.uniform(), 0x1.0p-60);
      keys.emplace_back(std::log(u) / weight[i], i);
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(m), keys.end(),
                      [](const auto& a, const auto& b) {
                        return a.first > b.first || (a.first == b.first && a.second < b.second);
                      });
    for (std::size_t s = 0; s < m; ++s) out.push_back(pixel[keys[s].second]);
    std::sort(out.begin(), out.end());
    return out;
  }
  std::vector<double> cumulative(weight.size());
  std::partial_sum(weight.begin(), weight.end(), cumulative.begin());
  for (std::size_t s = 0; s < m; ++s) {
    const double r = rng.uniform() * cumulative.back();
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    if (it == cumulative.end()) --it;
    out.push_back(pixel[static_cast<std::size_t>(it - cumulative.begin())]);
  }
  return out;
}

// Elastic reflection keeping pos inside [0, limit].
void reflect(double& pos, double& vel, double limit) {
  for (int guard = 0; guard < 64 && (pos < 0.0 || pos > limit); ++guard) {
    if (pos < 0.0) {
      pos = -pos;
      vel = -vel;
    } else if (pos > limit) {
      pos = 2.0 * limit - pos;
      vel = -vel;
    }
  }
  pos = std::clamp(pos, 0.0, limit);
}

// Snap to a 2^-16 grid so every emitted coordinate is exact in float32.
double quantize(double v) { return std::round(v * 65536.0) / 65536.0; }

}  // namespace

Sequence generate_mnist_sequence(const MnistGenConfig& cfg) {
  cfg.validate();
  const auto& bank = cfg.glyphs ? *cfg.glyphs : builtin_glyphs();
  Rng rng(cfg.seed);
  const double limit = cfg.area - static_cast<double>(Glyph::kSide);
  constexpr std::size_t side = Glyph::kSide;

  std::vector<DigitTrack> tracks(static_cast<std::size_t>(cfg.digits));
  for (auto& track : tracks) {
    std::vector<std::size_t> pixel;
    std::vector<double> weight;
    // A glyph may be blank after thresholding; draw another one.
    for (std::size_t attempt = 0; pixel.empty(); ++attempt) {
      if (attempt > 4 * bank.size() + 16) {
        throw DataError(DataErrc::invalid_value, "glyph bank has no usable glyph");
      }
      const Glyph& g = bank[rng.below(bank.size())];
      for (std::size_t i = 0; i < g.pixels.size(); ++i) {
        if (g.pixels[i] >= cfg.brightness_threshold) {
          pixel.push_back(i);
          weight.push_back(static_cast<double>(g.pixels[i]));
        }
      }
    }
    for (std::size_t i : sample_pixels(pixel, weight, cfg.points_per_digit, rng)) {
      const std::size_t r = i / side, c = i % side;
      track.local_x.push_back(static_cast<double>(c) + 0.5);
      track.local_y.push_back(static_cast<double>(side - 1 - r) + 0.5);  // y up
    }
    track.x = rng.uniform(0.0, limit);
    track.y = rng.uniform(0.0, limit);
    const double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    track.vx = speed * std::cos(angle);
    track.vy = speed * std::sin(angle);
  }

  Sequence seq;
  seq.frames.resize(cfg.frames);
  for (std::size_t t = 0; t < cfg.frames; ++t) {
    Frame& f = seq.frames[t];
    f.points.reserve(tracks.size() * cfg.points_per_digit * 3);
    for (auto& track : tracks) {
      const double ox = quantize(track.x), oy = quantize(track.y);
      for (std::size_t i = 0; i < track.local_x.size(); ++i) {
        f.points.push_back(ox + track.local_x[i]);
        f.points.push_back(oy + track.local_y[i]);
        f.points.push_back(0.0);
      }
      track.x += track.vx;
      track.y += track.vy;
      reflect(track.x, track.vx, limit);
      reflect(track.y, track.vy, limit);
    }
  }
  return seq;
}

Frame rescale_external(const Frame& frame, double scale, const std::array<double, 3>& translation) {
  Frame out = frame;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t d = 0; d < 3; ++d) {
      out.points[i * 3 + d] = scale * out.points[i * 3 + d] + translation[d];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// sequence files

namespace {

constexpr char kSeqMagic[] = "PCSQ1\n";
constexpr std::size_t kSeqMagicLen = 6;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw DataError(DataErrc::truncated_payload, "'" + path + "' ends inside the header");
  }
  return v;
}

void put_block(std::ostream& os, const std::vector<double>& values) {
  std::vector<float> buf(values.begin(), values.end());
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void get_block(std::istream& is, std::vector<double>& out, std::size_t count,
               const std::string& path) {
  std::vector<float> buf(count);
  if (!is.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(count * sizeof(float)))) {
    throw DataError(DataErrc::truncated_payload, "'" + path + "' ends inside a frame");
  }
  out.assign(buf.begin(), buf.end());
}

}  // namespace

void write_sequence(const Sequence& seq, const std::string& path) {
  const std::size_t n = seq.point_count();
  for (const auto& f : seq.frames) {
    if (f.size() != n || f.has_colors() != seq.has_colors() ||
        (f.has_colors() && f.colors.size() != f.points.size())) {
      throw DataError(DataErrc::inconsistent_point_count,
                      "frame with " + std::to_string(f.size()) + " points in a sequence of " +
                          std::to_string(n));
    }
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(DataErrc::io_failure, "cannot open '" + path + "' for writing");
  os.write(kSeqMagic, kSeqMagicLen);
  put<std::uint64_t>(os, seq.length());
  put<std::uint64_t>(os, n);
  put<std::uint8_t>(os, seq.has_colors() ? 1 : 0);
  for (const auto& f : seq.frames) {
    put_block(os, f.points);
    if (seq.has_colors()) put_block(os, f.colors);
  }
  if (!os) throw DataError(DataErrc::io_failure, "failed writing '" + path + "'");
}

Sequence read_sequence(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(DataErrc::io_failure, "cannot open '" + path + "'");
  char magic[kSeqMagicLen];
  if (!is.read(magic, kSeqMagicLen) || std::memcmp(magic, kSeqMagic, kSeqMagicLen) != 0) {
    throw DataError(DataErrc::bad_magic, "'" + path + "' is not a .pcsq file");
  }
  const auto frames = get<std::uint64_t>(is, path);
  const auto n = get<std::uint64_t>(is, path);
  const auto flag = get<std::uint8_t>(is, path);
  if (flag > 1) throw DataError(DataErrc::invalid_value, "bad color flag in '" + path + "'");

  // Bound the claimed size by the file length before allocating.
  const auto header_end = is.tellg();
  is.seekg(0, std::ios::end);
  const auto remaining = static_cast<std::uint64_t>(is.tellg() - header_end);
  is.seekg(header_end);
  const std::uint64_t per_frame = n * 3 * sizeof(float) * (flag ? 2 : 1);
  if (n != 0 && frames > remaining / per_frame) {
    throw DataError(DataErrc::truncated_payload, "'" + path + "' is shorter than its header claims");
  }

  Sequence seq;
  seq.frames.resize(frames);
  for (auto& f : seq.frames) {
    get_block(is, f.points, n * 3, path);
    if (flag) get_block(is, f.colors, n * 3, path);
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw DataError(DataErrc::inconsistent_point_count,
                    "'" + path + "' holds more point data than its header declares");
  }
  for (const auto& f : seq.frames) f.validate();
  return seq;
}

std::vector<std::filesystem::path> list_sequences(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) {
    throw DataError(DataErrc::io_failure, "'" + dir.string() + "' is not a directory");
  }
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".pcsq") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// PLY

namespace {

void append_number(std::string& line, double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, static_cast<float>(v));
  line.append(buf, end);
}

}  // namespace

void export_ply(const Frame& frame, const std::string& path) {
  frame.validate();
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError(DataErrc::io_failure, "cannot open '" + path + "' for writing");
  os << "ply\nformat ascii 1.0\n"
     << "element vertex " << frame.size() << "\n"
     << "property float x\nproperty float y\nproperty float z\n"
     << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
     << "end_header\n";
  std::string line;
  for (std::size_t i = 0; i < frame.size(); ++i) {
    line.clear();
    for (std::size_t d = 0; d < 3; ++d) {
      append_number(line, frame.points[i * 3 + d]);
      line.push_back(' ');
    }
    for (std::size_t d = 0; d < 3; ++d) {
      const double c = frame.has_colors() ? frame.colors[i * 3 + d] : 1.0;
      line += std::to_string(std::lround(255.0 * c));
      line.push_back(d == 2 ? '\n' : ' ');
    }
    os << line;
  }
  if (!os) throw DataError(DataErrc::io_failure, "failed writing '" + path + "'");
}

}  // namespace pcpred

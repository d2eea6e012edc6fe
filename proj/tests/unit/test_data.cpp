#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pcpred/data.hpp"

using namespace pcpred;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pcpred_data_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

DataErrc read_error(const fs::path& p) {
  try {
    read_sequence(p.string());
  } catch (const DataError& e) {
    return e.code();
  }
  FAIL("expected a DataError");
  return DataErrc::io_failure;
}

}  // namespace

TEST_CASE("generated frames: point counts, plane, area") {
  for (int digits : {1, 2}) {
    MnistGenConfig cfg;
    cfg.digits = digits;
    cfg.seed = 40 + digits;
    const Sequence s = generate_mnist_sequence(cfg);
    CHECK(s.length() == 20);
    CHECK_FALSE(s.has_colors());
    for (const Frame& f : s.frames) {
      REQUIRE(f.size() == 128u * digits);
      for (std::size_t i = 0; i < f.size(); ++i) {
        CHECK(f.points[3 * i + 2] == 0.0);
        CHECK(f.points[3 * i] >= 0.0);
        CHECK(f.points[3 * i] <= 64.0);
        CHECK(f.points[3 * i + 1] >= 0.0);
        CHECK(f.points[3 * i + 1] <= 64.0);
      }
    }
  }
}

TEST_CASE("digits move rigidly and generation is reproducible") {
  MnistGenConfig cfg;
  cfg.digits = 2;
  cfg.seed = 9;
  const Sequence a = generate_mnist_sequence(cfg);
  const Sequence b = generate_mnist_sequence(cfg);
  for (std::size_t t = 0; t < a.length(); ++t) CHECK(a.frames[t].points == b.frames[t].points);

  for (std::size_t d = 0; d < 2; ++d) {
    const std::size_t base = d * 128;
    for (std::size_t t = 1; t < a.length(); ++t) {
      const double* p0 = &a.frames[0].points[3 * base];
      const double* pt = &a.frames[t].points[3 * base];
      const double dx = pt[0] - p0[0], dy = pt[1] - p0[1];
      for (std::size_t i = 1; i < 128; ++i) {
        CHECK(pt[3 * i] - p0[3 * i] == dx);
        CHECK(pt[3 * i + 1] - p0[3 * i + 1] == dy);
      }
    }
  }

  cfg.seed = 10;
  CHECK(generate_mnist_sequence(cfg).frames[0].points != a.frames[0].points);
}

TEST_CASE("zero speed gives identical frames") {
  MnistGenConfig cfg;
  cfg.speed_min = cfg.speed_max = 0.0;
  cfg.seed = 3;
  const Sequence s = generate_mnist_sequence(cfg);
  for (const Frame& f : s.frames) CHECK(f.points == s.frames[0].points);
}

TEST_CASE("digits do move at the configured speed") {
  MnistGenConfig cfg;
  cfg.seed = 4;
  cfg.speed_min = cfg.speed_max = 3.5;
  const Sequence s = generate_mnist_sequence(cfg);
  const double dx = s.frames[1].points[0] - s.frames[0].points[0];
  const double dy = s.frames[1].points[1] - s.frames[0].points[1];
  CHECK(std::hypot(dx, dy) == doctest::Approx(3.5).epsilon(1e-3));
}

TEST_CASE("generator config validation") {
  MnistGenConfig cfg;
  cfg.digits = 3;
  CHECK_THROWS(cfg.validate());
  cfg.digits = 1;
  cfg.frames = 1;
  CHECK_THROWS(cfg.validate());
  cfg.frames = 20;
  cfg.points_per_digit = 0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("glyph bank and blank-glyph redraw") {
  const auto& bank = builtin_glyphs();
  CHECK(bank.size() >= 10);
  for (const Glyph& g : bank) {
    std::size_t lit = 0;
    for (auto px : g.pixels) lit += px >= 16;
    CHECK(lit >= 64);
  }
  std::vector<Glyph> mixed(3);  // two blank rasters and one usable one
  mixed[1] = bank[7];
  MnistGenConfig cfg;
  cfg.glyphs = &mixed;
  cfg.seed = 5;
  CHECK(generate_mnist_sequence(cfg).frames[0].size() == 128);
  std::vector<Glyph> blank(2);
  cfg.glyphs = &blank;
  CHECK_THROWS_AS(generate_mnist_sequence(cfg), DataError);
}

TEST_CASE("IDX glyph files") {
  const fs::path p = scratch("glyphs.idx");
  {
    std::ofstream os(p, std::ios::binary);
    const unsigned char header[16] = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28};
    os.write(reinterpret_cast<const char*>(header), 16);
    for (int g = 0; g < 2; ++g) {
      os.write(reinterpret_cast<const char*>(builtin_glyphs()[g].pixels.data()), 784);
    }
  }
  const auto glyphs = load_idx_glyphs(p.string());
  REQUIRE(glyphs.size() == 2);
  CHECK(glyphs[1].pixels == builtin_glyphs()[1].pixels);
  fs::resize_file(p, 16 + 784 + 10);
  CHECK_THROWS_AS(load_idx_glyphs(p.string()), DataError);
}

TEST_CASE("rescaling external clouds") {
  Frame f;
  f.points = {1, 1, 1};
  f.colors = {0.5, 0.25, 1.0};
  const Frame same = rescale_external(f, 1.0, {0, 0, 0});
  CHECK(same.points == f.points);
  const Frame r = rescale_external(f, 2.0, {1, 0, 0});
  CHECK(r.points == std::vector<double>{3, 2, 2});
  CHECK(r.colors == f.colors);

  Frame voxel;
  voxel.points = {512, 0, 1000};
  const Frame e = rescale_external(voxel, 0.0018, {-0.37426165, -0.03379993, -0.29201281});
  CHECK(e.points[0] == doctest::Approx(0.0018 * 512 - 0.37426165).epsilon(1e-15));
  CHECK(e.points[1] == doctest::Approx(-0.03379993).epsilon(1e-15));
  CHECK(e.points[2] == doctest::Approx(1.8 - 0.29201281).epsilon(1e-15));
}

TEST_CASE("sequence files round trip exactly") {
  MnistGenConfig cfg;
  cfg.seed = 12;
  Sequence s = generate_mnist_sequence(cfg);
  const fs::path p = scratch("roundtrip.pcsq");
  write_sequence(s, p.string());
  const Sequence back = read_sequence(p.string());
  REQUIRE(back.length() == s.length());
  for (std::size_t t = 0; t < s.length(); ++t) CHECK(back.frames[t].points == s.frames[t].points);
  CHECK(fs::file_size(p) == 6 + 8 + 8 + 1 + 20 * 128 * 3 * 4);

  Sequence colored;
  for (int t = 0; t < 2; ++t) {
    Frame f;
    f.points = {0.5, 1.5, -2.0, 3.0, 0.0, 1.0};
    f.colors = {0.0, 0.5, 1.0, 0.25, 0.75, 0.125};
    colored.frames.push_back(f);
  }
  write_sequence(colored, p.string());
  const Sequence cb = read_sequence(p.string());
  CHECK(cb.has_colors());
  CHECK(cb.frames[1].colors == colored.frames[1].colors);
}

TEST_CASE("sequence file errors carry distinct codes") {
  MnistGenConfig cfg;
  cfg.seed = 13;
  const Sequence s = generate_mnist_sequence(cfg);
  const fs::path p = scratch("broken.pcsq");

  write_sequence(s, p.string());
  fs::resize_file(p, fs::file_size(p) - 5);
  CHECK(read_error(p) == DataErrc::truncated_payload);

  write_sequence(s, p.string());
  {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  CHECK(read_error(p) == DataErrc::bad_magic);

  write_sequence(s, p.string());
  {
    std::ofstream f(p, std::ios::app | std::ios::binary);
    f.write("\0\0\0\0\0\0\0\0\0\0\0\0", 12);
  }
  CHECK(read_error(p) == DataErrc::inconsistent_point_count);

  Sequence ragged = s;
  ragged.frames[3].points.resize(127 * 3);
  try {
    write_sequence(ragged, p.string());
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(e.code() == DataErrc::inconsistent_point_count);
    CHECK(std::string(e.what()).starts_with("inconsistent point count"));
  }
  CHECK_THROWS_AS(ragged.validate(), DataError);

  CHECK(read_error(scratch("missing.pcsq")) == DataErrc::io_failure);
}

TEST_CASE("frame validation") {
  Frame f;
  f.points = {0, 0, std::nan("")};
  CHECK_THROWS_AS(f.validate(), DataError);
  f.points = {0, 0, 0};
  f.colors = {0, 1.5, 0};
  CHECK_THROWS_AS(f.validate(), DataError);
  Sequence one;
  one.frames.push_back(Frame{{0, 0, 0}, {}});
  CHECK_THROWS_AS(one.validate(), DataError);
}

TEST_CASE("PLY export") {
  Frame red;
  red.points = {0, 0, 0};
  red.colors = {1, 0, 0};
  const fs::path p = scratch("red.ply");
  export_ply(red, p.string());
  const std::string text = slurp(p);
  CHECK(text.starts_with("ply\nformat ascii 1.0\n"));
  CHECK(text.find("element vertex 1\n") != std::string::npos);
  CHECK(text.find("property uchar red\n") != std::string::npos);
  CHECK(text.ends_with("end_header\n0 0 0 255 0 0\n"));

  Frame plain;
  plain.points = {1.5, -2, 0.25, 3, 4, 5};
  export_ply(plain, p.string());
  const std::string t2 = slurp(p);
  CHECK(t2.find("element vertex 2\n") != std::string::npos);
  CHECK(t2.ends_with("1.5 -2 0.25 255 255 255\n3 4 5 255 255 255\n"));
}

TEST_CASE("dataset listing is sorted and filtered") {
  const fs::path dir = scratch("listing");
  fs::remove_all(dir);
  fs::create_directories(dir);
  MnistGenConfig cfg;
  cfg.frames = 2;
  for (const char* name : {"b.pcsq", "a.pcsq", "c.txt"}) {
    write_sequence(generate_mnist_sequence(cfg), (dir / name).string());
  }
  const auto paths = list_sequences(dir);
  REQUIRE(paths.size() == 2);
  CHECK(paths[0].filename() == "a.pcsq");
  CHECK(paths[1].filename() == "b.pcsq");
  CHECK_THROWS_AS(list_sequences(dir / "nope"), DataError);
}

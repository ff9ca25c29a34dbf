#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "jointad/volume.hpp"

using namespace jointad;
using namespace jointad::volcore;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("phantom body fraction and determinism") {
  Volume3D a = make_phantom(0, 32);
  validate_volume(a);
  std::size_t body = 0;
  for (auto m : a.body_mask) body += m;
  double frac = static_cast<double>(body) / a.count();
  CHECK(frac > 0.20);
  CHECK(frac < 0.60);

  Volume3D b = make_phantom(0, 32);
  CHECK(a.voxels == b.voxels);
  CHECK(a.body_mask == b.body_mask);

  Volume3D c = make_phantom(1, 32);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.count(); ++i) diff += a.voxels[i] != c.voxels[i];
  CHECK(diff >= a.count() / 100);
}

TEST_CASE("phantom rejects tiny sizes") {
  CHECK_THROWS_AS(make_phantom(0, 31), std::invalid_argument);
}

TEST_CASE("phantom invariants over seeds") {
  for (std::uint64_t seed = 10; seed < 16; ++seed) {
    Volume3D v = make_phantom(seed, 32);
    validate_volume(v);
  }
}

TEST_CASE("normalize min-max endpoints") {
  Tensor<float> raw({2, 2, 2});
  // Cubic rank-3: use 2x2x2 with values {0,50,100}; threshold low so all kept.
  raw.v = {0, 50, 100, 50, 50, 50, 50, 50};
  Volume3D v = normalize_volume(raw, 0.0f);
  CHECK(v.voxels[0] == 0.0f);
  CHECK(v.voxels[1] == 0.5f);
  CHECK(v.voxels[2] == 1.0f);
}

TEST_CASE("normalize rejects constant input") {
  Tensor<float> raw({2, 2, 2}, 0.f);
  CHECK_THROWS_AS(normalize_volume(raw, 0.1f), degenerate_input_error);
  Tensor<float> raw2({2, 2, 2}, 3.5f);
  CHECK_THROWS_AS(normalize_volume(raw2, 0.1f), degenerate_input_error);
}

TEST_CASE("normalize drops isolated speck outside main component") {
  // 5^3 toy grid: a 2x2x2 bright block and one isolated bright voxel at a
  // far corner. Oracle: the block is the largest 6-connected component.
  const int s = 5;
  Tensor<float> raw({s, s, s}, 0.f);
  auto at = [&](int x, int y, int z) -> float& {
    return raw.v[static_cast<std::size_t>(x) + s * (y + static_cast<std::size_t>(s) * z)];
  };
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) at(x, y, z) = 80.f;
  at(4, 4, 4) = 100.f;
  Volume3D v = normalize_volume(raw, 0.5f);
  CHECK(v.voxels[v.index(4, 4, 4)] == 0.f);
  CHECK_FALSE(v.body_mask[v.index(4, 4, 4)]);
  CHECK(v.body_mask[v.index(0, 0, 0)]);
  CHECK(v.voxels[v.index(0, 0, 0)] == 0.8f);
}

TEST_CASE("elastic identity cases") {
  Volume3D v = make_phantom(3, 32);
  SECTION("max_disp zero is bit-exact identity") {
    Rng rng(7);
    Volume3D out = elastic_deform(v, rng, 1.0, 4, 0.0);
    CHECK(out.voxels == v.voxels);
    CHECK(out.body_mask == v.body_mask);
  }
  SECTION("probability zero returns input") {
    Rng rng(7);
    Volume3D out = elastic_deform(v, rng, 0.0, 4, 2.0);
    CHECK(out.voxels == v.voxels);
  }
  SECTION("max_disp precondition") {
    Rng rng(7);
    CHECK_THROWS_AS(elastic_deform(v, rng, 1.0, 4, 8.0), std::invalid_argument);
  }
}

TEST_CASE("elastic deformation changes values but stays valid") {
  Volume3D v = make_phantom(4, 32);
  Rng rng(11);
  Volume3D out = elastic_deform(v, rng, 1.0, 4, 2.0);
  double mad = 0;
  for (std::size_t i = 0; i < v.count(); ++i)
    mad += std::abs(static_cast<double>(out.voxels[i]) - v.voxels[i]);
  mad /= static_cast<double>(v.count());
  CHECK(mad > 0.0);
  validate_volume(out);
}

TEST_CASE("volume file round-trip is bit-exact") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Volume3D v = make_phantom(seed, 32);
    v.meta["note"] = "round trip " + std::to_string(seed);
    std::string path = temp_path("jvol_rt_" + std::to_string(seed) + ".jvol");
    write_volume(v, path);
    Volume3D r = read_volume(path);
    CHECK(r.size == v.size);
    CHECK(r.voxels == v.voxels);
    CHECK(r.body_mask == v.body_mask);
    CHECK(r.meta == v.meta);
    std::filesystem::remove(path);
  }
}

TEST_CASE("volume file errors name the offending field") {
  Volume3D v = make_phantom(0, 32);
  std::string path = temp_path("jvol_err.jvol");
  write_volume(v, path);

  SECTION("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_MATCHES(read_volume(path), format_error,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("magic")));
  }
  SECTION("truncated voxel block reports byte counts") {
    auto sz = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, sz / 2);
    try {
      read_volume(path);
      FAIL("expected format_error");
    } catch (const format_error& e) {
      std::string msg = e.what();
      CHECK(msg.find("voxel block") != std::string::npos);
      CHECK(msg.find("expected") != std::string::npos);
      CHECK(msg.find("got") != std::string::npos);
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("label payload round-trip") {
  std::vector<std::uint8_t> label(32 * 32 * 32, 0);
  label[5] = 1;
  label[100] = 1;
  std::string path = temp_path("jvol_label.jvol");
  write_label(label, 32, path);
  int size = 0;
  auto r = read_label(path, &size);
  CHECK(size == 32);
  CHECK(r == label);
  // Scalar files must be rejected by the label reader.
  Volume3D v = make_phantom(0, 32);
  write_volume(v, path);
  CHECK_THROWS_AS(read_label(path), format_error);
  std::filesystem::remove(path);
}

TEST_CASE("split partitions exactly with 8:1:1 within one item") {
  for (int n : {10, 11, 29, 40, 100}) {
    SplitSpec spec;
    spec.seed = 17;
    Split s = split_ids(n, spec);
    CHECK(static_cast<int>(s.train.size() + s.val.size() + s.test.size()) == n);
    std::set<int> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(static_cast<int>(all.size()) == n);
    CHECK(std::abs(static_cast<double>(s.train.size()) - 0.8 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.val.size()) - 0.1 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.test.size()) - 0.1 * n) <= 1.0);
  }
}

TEST_CASE("split is deterministic in the seed") {
  SplitSpec spec;
  spec.seed = 3;
  Split a = split_ids(20, spec);
  Split b = split_ids(20, spec);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
}

TEST_CASE("downsample preserves background-zero invariant") {
  Volume3D v = make_phantom(9, 64);
  Volume3D d = downsample2x(v);
  CHECK(d.size == 32);
  validate_volume(d);
}

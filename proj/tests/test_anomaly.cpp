#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "jointad/anomaly.hpp"
#include "jointad/volume.hpp"

using namespace jointad;
using namespace jointad::anomaly;
using volcore::Volume3D;

namespace {

// Brute-force 3D Sobel oracle: triple-nested correlation with the separable
// kernel written out explicitly, replicate padding, then min-max scaling.
std::vector<double> sobel_oracle(const std::vector<float>& p, int ex, int ey, int ez) {
  auto at = [&](int x, int y, int z) {
    x = std::clamp(x, 0, ex - 1);
    y = std::clamp(y, 0, ey - 1);
    z = std::clamp(z, 0, ez - 1);
    return static_cast<double>(p[static_cast<std::size_t>(x) +
                                 static_cast<std::size_t>(ex) * (y + static_cast<std::size_t>(ey) * z)]);
  };
  auto k1 = [](int i) { return i == 0 ? 1.0 : (i == 1 ? 2.0 : 1.0); };
  auto kd = [](int i) { return i == 0 ? -1.0 : (i == 1 ? 0.0 : 1.0); };
  std::vector<double> out(p.size());
  double lo = 1e300, hi = -1e300;
  for (int z = 0; z < ez; ++z)
    for (int y = 0; y < ey; ++y)
      for (int x = 0; x < ex; ++x) {
        double gx = 0, gy = 0, gz = 0;
        for (int c = 0; c < 3; ++c)
          for (int b = 0; b < 3; ++b)
            for (int a = 0; a < 3; ++a) {
              double v = at(x + a - 1, y + b - 1, z + c - 1);
              gx += v * kd(a) * k1(b) * k1(c);
              gy += v * k1(a) * kd(b) * k1(c);
              gz += v * k1(a) * k1(b) * kd(c);
            }
        double m = std::sqrt(gx * gx + gy * gy + gz * gz);
        out[static_cast<std::size_t>(x) +
            static_cast<std::size_t>(ex) * (y + static_cast<std::size_t>(ey) * z)] = m;
        lo = std::min(lo, m);
        hi = std::max(hi, m);
      }
  for (auto& m : out) m = hi > lo ? (m - lo) / (hi - lo) : 0.0;
  return out;
}

}  // namespace

TEST_CASE("sample_region bounds at paper scale") {
  Rng rng(0);
  for (int i = 0; i < 2000; ++i) {
    PatchRegion r = sample_region(rng, 64, 1.0);
    for (int d = 0; d < 3; ++d) {
      CHECK(r.extent[static_cast<std::size_t>(d)] >= 10);
      CHECK(r.extent[static_cast<std::size_t>(d)] <= 32);
    }
    CHECK(r.inside(64));
  }
}

TEST_CASE("sample_region degenerate range") {
  Rng rng(0);
  // size 20 with s = 1: extents must all be exactly 10.
  for (int i = 0; i < 50; ++i) {
    PatchRegion r = sample_region(rng, 20, 1.0);
    CHECK(r.extent == std::array<int, 3>{10, 10, 10});
  }
  CHECK_THROWS_AS(sample_region(rng, 16, 1.0), std::invalid_argument);
}

TEST_CASE("sample_region extents are uniform (chi-square)") {
  Rng rng(123);
  // 10^4 regions at size 64, pooled over the three dims: 3*10^4 draws over
  // the 23 values in [10,32]. Chi-square critical value at alpha = 0.01,
  // df = 22 is 40.289.
  std::map<int, int> hist;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    PatchRegion r = sample_region(rng, 64, 1.0);
    for (int d = 0; d < 3; ++d) ++hist[r.extent[static_cast<std::size_t>(d)]];
  }
  double expected = 3.0 * n / 23.0;
  double chi2 = 0;
  for (int v = 10; v <= 32; ++v) {
    double diff = hist[v] - expected;
    chi2 += diff * diff / expected;
  }
  CHECK(chi2 < 40.289);
}

TEST_CASE("mask augmentation fills the region with one value") {
  Volume3D v = volcore::make_phantom(1, 32);
  PatchRegion r;
  r.origin = {4, 6, 8};
  r.extent = {6, 5, 7};
  Rng rng(5);
  auto out = apply_augmentation(v, AugKind::mask, r, rng);
  float val = out[v.index(4, 6, 8)];
  CHECK(val >= 0.f);
  CHECK(val <= 1.f);
  for (int z = 0; z < 32; ++z)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        if (r.contains(x, y, z))
          CHECK(out[v.index(x, y, z)] == val);
        else
          CHECK(out[v.index(x, y, z)] == v.at(x, y, z));
      }
}

TEST_CASE("sobel on constant region is all zeros") {
  Volume3D v(32);
  v.voxels.assign(v.count(), 0.5f);
  v.body_mask.assign(v.count(), 1);
  PatchRegion r;
  r.origin = {3, 3, 3};
  r.extent = {8, 8, 8};
  Rng rng(5);
  auto out = apply_augmentation(v, AugKind::sobel, r, rng);
  for (int z = 3; z < 11; ++z)
    for (int y = 3; y < 11; ++y)
      for (int x = 3; x < 11; ++x) CHECK(out[v.index(x, y, z)] == 0.f);
}

TEST_CASE("sobel matches brute-force convolution oracle") {
  Rng rng(99);
  for (int rep = 0; rep < 5; ++rep) {
    Volume3D v = volcore::make_phantom(200 + static_cast<std::uint64_t>(rep), 32);
    PatchRegion r;
    r.origin = {rng.range(0, 23), rng.range(0, 23), rng.range(0, 23)};
    r.extent = {8, 8, 8};
    Rng aug_rng(7);
    auto out = apply_augmentation(v, AugKind::sobel, r, aug_rng);
    auto patch = anomaly::detail::extract(v.voxels, 32, r);
    auto oracle = sobel_oracle(patch, 8, 8, 8);
    std::size_t k = 0;
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x, ++k) {
          double got = out[v.index(r.origin[0] + x, r.origin[1] + y, r.origin[2] + z)];
          double want = oracle[k];
          CHECK(std::abs(got - want) <= 1e-6 * std::max(1.0, std::abs(want)));
        }
  }
}

TEST_CASE("permutation changes content and stays in region") {
  Volume3D v = volcore::make_phantom(2, 32);
  PatchRegion r;
  r.origin = {4, 4, 4};
  r.extent = {8, 8, 8};
  Rng rng(3);
  auto out = apply_augmentation(v, AugKind::permutation, r, rng);
  bool changed = false;
  for (std::size_t i = 0; i < v.count(); ++i)
    if (out[i] != v.voxels[i]) changed = true;
  CHECK(changed);
  for (int z = 0; z < 32; ++z)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (!r.contains(x, y, z)) CHECK(out[v.index(x, y, z)] == v.at(x, y, z));
  CHECK_THROWS_AS(apply_augmentation(v, AugKind::permutation,
                                     PatchRegion{{0, 0, 0}, {7, 8, 8}}, rng),
                  std::invalid_argument);
}

TEST_CASE("rotation augmentation requires a cubic region") {
  Volume3D v = volcore::make_phantom(2, 32);
  Rng rng(3);
  CHECK_THROWS_AS(
      apply_augmentation(v, AugKind::rotation, PatchRegion{{0, 0, 0}, {6, 8, 8}}, rng),
      std::invalid_argument);
}

TEST_CASE("compute_label basics") {
  Volume3D v = volcore::make_phantom(1, 32);
  PatchRegion r;
  r.origin = {2, 2, 2};
  r.extent = {4, 4, 4};
  SECTION("identity gives all-false") {
    auto label = compute_label(v.voxels, v.voxels, 32, r);
    for (auto b : label) CHECK(b == 0);
  }
  SECTION("full fill marks region exactly") {
    auto after = v.voxels;
    for (int z = 2; z < 6; ++z)
      for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x) after[v.index(x, y, z)] = v.at(x, y, z) + 0.001f;
    auto label = compute_label(v.voxels, after, 32, r);
    std::size_t n = 0;
    for (auto b : label) n += b;
    CHECK(n == 64);
  }
  SECTION("controlled partial overlap labels only differing voxels") {
    // Construct: 30% of destination voxels keep their original value.
    auto after = v.voxels;
    int k = 0;
    std::size_t expect = 0;
    for (int z = 2; z < 6; ++z)
      for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x, ++k) {
          if (k % 10 < 3) continue;  // leave ~30% equal
          after[v.index(x, y, z)] = v.at(x, y, z) + 0.01f;
          ++expect;
        }
    auto label = compute_label(v.voxels, after, 32, r);
    std::size_t n = 0;
    for (auto b : label) n += b;
    CHECK(n == expect);
    k = 0;
    for (int z = 2; z < 6; ++z)
      for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x, ++k)
          CHECK(static_cast<bool>(label[v.index(x, y, z)]) == (k % 10 >= 3));
  }
}

TEST_CASE("synth_ood invariants across kinds") {
  Volume3D v = volcore::make_phantom(5, 32);
  double scale = default_scale(32);
  std::size_t floor_vox = static_cast<std::size_t>(min_label_voxels(scale));
  for (AugKind kind : all_kinds) {
    Rng rng(1000 + static_cast<std::uint64_t>(kind));
    AnomalyRecord rec = synth_ood(v, kind, rng, 10);
    CHECK(rec.label_count() >= floor_vox);
    CHECK(rec.attempts >= 1);
    // label subset of region; all labeled voxels differ; others untouched
    for (int z = 0; z < 32; ++z)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          std::size_t i = v.index(x, y, z);
          if (rec.label[i]) {
            CHECK(rec.region.contains(x, y, z));
            CHECK(rec.volume.voxels[i] != v.voxels[i]);
          }
          if (!rec.region.contains(x, y, z)) CHECK(rec.volume.voxels[i] == v.voxels[i]);
        }
  }
}

TEST_CASE("synth_ood determinism") {
  Volume3D v = volcore::make_phantom(6, 32);
  Rng r1(42), r2(42);
  AnomalyRecord a = synth_ood(v, AugKind::copy_paste, r1, 10);
  AnomalyRecord b = synth_ood(v, AugKind::copy_paste, r2, 10);
  CHECK(a.volume.voxels == b.volume.voxels);
  CHECK(a.label == b.label);
  CHECK(a.attempts == b.attempts);
}

TEST_CASE("synth_ood fails on a constant volume with copy_paste") {
  Volume3D v(32);
  v.voxels.assign(v.count(), 0.25f);
  v.body_mask.assign(v.count(), 1);
  Rng rng(7);
  CHECK_THROWS_AS(synth_ood(v, AugKind::copy_paste, rng, 1), synthesis_failure);
  try {
    Rng rng2(7);
    synth_ood(v, AugKind::copy_paste, rng2, 1);
  } catch (const synthesis_failure& e) {
    CHECK(e.last().label_count() == 0);
    CHECK(e.last().attempts == 1);
  }
}

TEST_CASE("mask testset has exactly 648 cases") {
  Volume3D v = volcore::make_phantom(8, 32);
  auto cases = build_mask_testset(v);
  CHECK(cases.size() == 648);
  int degenerate = 0;
  for (const auto& c : cases) {
    if (c.degenerate) ++degenerate;
    CHECK(c.record.region.inside(32));
  }
  // The phantom has nonuniform tissue, so most cases must be non-degenerate.
  CHECK(degenerate < 100);
}

TEST_CASE("mask testset center case geometry") {
  Volume3D v = volcore::make_phantom(8, 32);
  auto cases = build_mask_testset(v);
  // center position (index 13), largest size (size/2), cube
  for (const auto& c : cases) {
    if (c.shape == MaskShape::cube && c.position_index == 13 && c.size_index == 2) {
      CHECK(c.record.region.extent == std::array<int, 3>{16, 16, 16});
      CHECK(c.record.region.origin == std::array<int, 3>{8, 8, 8});
    }
  }
}

TEST_CASE("mask case with matching intensity is degenerate") {
  Volume3D v(32);
  v.voxels.assign(v.count(), 0.f);
  v.body_mask.assign(v.count(), 1);
  // Fill the whole volume with exactly 1/3 so the 1/3-intensity cases cannot
  // change any voxel.
  float third = static_cast<float>(mask_intensities[1]);
  v.voxels.assign(v.count(), third);
  auto cases = build_mask_testset(v);
  for (const auto& c : cases) {
    if (c.intensity_index == 1) {
      CHECK(c.degenerate);
      CHECK(c.record.label_count() == 0);
    } else {
      CHECK_FALSE(c.degenerate);
    }
  }
}

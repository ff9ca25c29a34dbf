#ifndef JOINTAD_PRETASK_HPP
#define JOINTAD_PRETASK_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "jointad/anomaly.hpp"
#include "jointad/common.hpp"
#include "jointad/cubesym.hpp"
#include "jointad/rng.hpp"
#include "jointad/volume.hpp"

namespace jointad::pretask {

using anomaly::PatchRegion;
using cubesym::RotationClass;
using cubesym::enumerate_rotations;
using volcore::Volume3D;

enum class Kind { rotation, jigsaw, index, box, scatter30, scatter50 };

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::rotation: return "rotation";
    case Kind::jigsaw: return "jigsaw";
    case Kind::index: return "index";
    case Kind::box: return "box";
    case Kind::scatter30: return "scatter30";
    case Kind::scatter50: return "scatter50";
  }
  return "?";
}

inline Kind kind_from_name(const std::string& s) {
  for (Kind k : {Kind::rotation, Kind::jigsaw, Kind::index, Kind::box, Kind::scatter30,
                 Kind::scatter50})
    if (s == kind_name(k)) return k;
  throw std::invalid_argument("unknown pretask kind '" + s + "'");
}

inline bool is_classification(Kind k) {
  return k == Kind::rotation || k == Kind::jigsaw || k == Kind::index;
}

// -------- rotation task --------

// Uniformly chosen proper rotation applied as an exact voxel permutation.
inline std::pair<Volume3D, int> rotation_sample(const Volume3D& v, Rng& rng) {
  if (v.voxels.size() != static_cast<std::size_t>(v.size) * v.size * v.size)
    throw std::invalid_argument("rotation_sample: non-cubic volume");
  const auto& rots = enumerate_rotations();
  int cls = rng.range(0, static_cast<int>(rots.size()) - 1);
  Volume3D out = v;
  out.voxels = cubesym::rotate_grid(v.voxels, v.size, rots[static_cast<std::size_t>(cls)]);
  out.body_mask = cubesym::rotate_grid(v.body_mask, v.size, rots[static_cast<std::size_t>(cls)]);
  return {std::move(out), cls};
}

// -------- jigsaw task --------

// Fixed catalog of octant permutations. The full task space is 8! = 40320;
// a classification head that wide is impractical here, so the default
// catalog samples 256 distinct permutations (identity always index 0).
struct JigsawCatalog {
  std::vector<std::array<int, 8>> perms;
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(perms.size()); }
};

inline JigsawCatalog make_jigsaw_catalog(std::uint64_t seed, int count = 256) {
  if (count < 1 || count > 40320)
    throw std::invalid_argument("jigsaw catalog size must be in [1, 40320]");
  JigsawCatalog cat;
  cat.seed = seed;
  std::array<int, 8> identity = {0, 1, 2, 3, 4, 5, 6, 7};
  if (count == 40320) {
    std::array<int, 8> p = identity;
    do {
      cat.perms.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
    return cat;  // lexicographic order puts the identity first
  }
  std::set<std::array<int, 8>> seen;
  cat.perms.push_back(identity);
  seen.insert(identity);
  Rng rng(seed ^ 0x6a696773617721ULL);
  while (static_cast<int>(cat.perms.size()) < count) {
    std::array<int, 8> p = identity;
    rng.shuffle(p.begin(), p.end());
    if (seen.insert(p).second) cat.perms.push_back(p);
  }
  return cat;
}

// Octant index encoding: bit0 = x half, bit1 = y half, bit2 = z half.
// mapping[slot] names the source octant placed at `slot`.
template <typename T>
std::vector<T> permute_octants(const std::vector<T>& grid, int size,
                               const std::array<int, 8>& mapping) {
  if (size % 2) throw std::invalid_argument("permute_octants: odd size");
  int h = size / 2;
  std::vector<T> out(grid.size());
  auto flat = [size](int x, int y, int z) {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(size) * (y + static_cast<std::size_t>(size) * z);
  };
  for (int slot = 0; slot < 8; ++slot) {
    int src = mapping[static_cast<std::size_t>(slot)];
    int dx = (slot & 1) * h, dy = ((slot >> 1) & 1) * h, dz = ((slot >> 2) & 1) * h;
    int sx = (src & 1) * h, sy = ((src >> 1) & 1) * h, sz = ((src >> 2) & 1) * h;
    for (int z = 0; z < h; ++z)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < h; ++x)
          out[flat(dx + x, dy + y, dz + z)] = grid[flat(sx + x, sy + y, sz + z)];
  }
  return out;
}

inline std::pair<Volume3D, int> jigsaw_sample(const Volume3D& v, const JigsawCatalog& catalog,
                                              Rng& rng) {
  if (v.size % 2) throw std::invalid_argument("jigsaw_sample: volume size must be even");
  int id = rng.range(0, catalog.size() - 1);
  Volume3D out = v;
  out.voxels = permute_octants(v.voxels, v.size, catalog.perms[static_cast<std::size_t>(id)]);
  out.body_mask =
      permute_octants(v.body_mask, v.size, catalog.perms[static_cast<std::size_t>(id)]);
  return {std::move(out), id};
}

inline std::array<int, 8> invert_octant_mapping(const std::array<int, 8>& mapping) {
  std::array<int, 8> inv{};
  for (int slot = 0; slot < 8; ++slot) inv[static_cast<std::size_t>(mapping[static_cast<std::size_t>(slot)])] = slot;
  return inv;
}

// -------- index task --------

struct IndexSample {
  std::vector<float> reference_patch;
  std::vector<float> query_patch;
  int patch_extent = 0;
  int class_id = 0;  // lexicographic over (dx,dy,dz) in {-1,0,1}^3 minus 0
};

inline constexpr int index_class_count = 26;

inline int offset_to_class(int dx, int dy, int dz) {
  if (dx == 0 && dy == 0 && dz == 0)
    throw std::invalid_argument("offset_to_class: zero offset has no class");
  int k = (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1);
  int center = 13;  // (0,0,0)
  return k < center ? k : k - 1;
}

inline std::array<int, 3> class_to_offset(int cls) {
  if (cls < 0 || cls >= index_class_count)
    throw std::invalid_argument("class_to_offset: class out of range");
  int k = cls < 13 ? cls : cls + 1;
  return {k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1};
}

// Reference patch plus one of its 26 neighbors on the patch lattice.
inline IndexSample index_sample(const Volume3D& v, int patch_extent, Rng& rng) {
  if (patch_extent < 1 || 3 * patch_extent > v.size)
    throw std::invalid_argument("index_sample: need 3*patch_extent <= size");
  IndexSample s;
  s.patch_extent = patch_extent;
  PatchRegion ref;
  ref.extent = {patch_extent, patch_extent, patch_extent};
  for (int i = 0; i < 3; ++i)
    ref.origin[static_cast<std::size_t>(i)] =
        rng.range(patch_extent, v.size - 2 * patch_extent);
  int cls = rng.range(0, index_class_count - 1);
  std::array<int, 3> off = class_to_offset(cls);
  PatchRegion qry = ref;
  for (int i = 0; i < 3; ++i)
    qry.origin[static_cast<std::size_t>(i)] += off[static_cast<std::size_t>(i)] * patch_extent;
  s.class_id = cls;
  s.reference_patch = anomaly::detail::extract(v.voxels, v.size, ref);
  s.query_patch = anomaly::detail::extract(v.voxels, v.size, qry);
  return s;
}

// -------- reconstruction tasks --------

struct ReconTarget {
  Volume3D corrupted;
  Volume3D original;
  std::vector<std::uint8_t> removal_mask;
  double ratio = 0.0;
};

// Removes exactly round(ratio * N) voxels, chosen without replacement.
inline ReconTarget scatter_corrupt(const Volume3D& v, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw std::invalid_argument("scatter_corrupt: ratio must be in (0,1)");
  std::size_t n = v.count();
  std::size_t k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  std::vector<std::uint32_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(i);
  // Partial Fisher-Yates: the first k entries are a uniform sample.
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.uniform_below(n - i));
    std::swap(idx[i], idx[j]);
  }
  ReconTarget t;
  t.original = v;
  t.corrupted = v;
  t.ratio = ratio;
  t.removal_mask.assign(n, 0);
  for (std::size_t i = 0; i < k; ++i) {
    t.removal_mask[idx[i]] = 1;
    t.corrupted.voxels[idx[i]] = 0.f;
  }
  return t;
}

// Zeroes one box sampled by the shared patch rule.
inline ReconTarget box_corrupt(const Volume3D& v, Rng& rng) {
  PatchRegion region = anomaly::sample_region(rng, v.size, anomaly::default_scale(v.size));
  ReconTarget t;
  t.original = v;
  t.corrupted = v;
  t.removal_mask.assign(v.count(), 0);
  for (int z = 0; z < region.extent[2]; ++z)
    for (int y = 0; y < region.extent[1]; ++y)
      for (int x = 0; x < region.extent[0]; ++x) {
        std::size_t i = t.corrupted.index(region.origin[0] + x, region.origin[1] + y,
                                          region.origin[2] + z);
        t.removal_mask[i] = 1;
        t.corrupted.voxels[i] = 0.f;
      }
  t.ratio = static_cast<double>(region.voxel_count()) / static_cast<double>(v.count());
  return t;
}

// -------- losses --------

inline constexpr double probability_floor = 1e-12;

// Cross entropy from predicted class probabilities.
inline double cross_entropy(const std::vector<double>& probs, int target_class) {
  if (target_class < 0 || target_class >= static_cast<int>(probs.size()))
    throw std::invalid_argument("cross_entropy: target class out of range");
  double p = std::max(probs[static_cast<std::size_t>(target_class)], probability_floor);
  return -std::log(p);
}

inline double mse(const std::vector<float>& prediction, const std::vector<float>& target) {
  if (prediction.size() != target.size())
    throw std::invalid_argument("mse: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    double d = static_cast<double>(prediction[i]) - target[i];
    acc += d * d;
  }
  return acc / static_cast<double>(prediction.size());
}

// Classification kinds score cross entropy over the kind's class count;
// reconstruction kinds score mean squared error over all voxels.
inline double pretask_loss(Kind kind, const std::vector<double>& class_probs, int target_class) {
  if (!is_classification(kind))
    throw std::invalid_argument("pretask_loss: reconstruction kind needs voxel grids");
  return cross_entropy(class_probs, target_class);
}

inline double pretask_loss(Kind kind, const std::vector<float>& prediction,
                           const std::vector<float>& original) {
  if (is_classification(kind))
    throw std::invalid_argument("pretask_loss: classification kind needs class probabilities");
  return mse(prediction, original);
}

inline int class_count(Kind kind, const JigsawCatalog* catalog = nullptr) {
  switch (kind) {
    case Kind::rotation: return 24;
    case Kind::jigsaw: return catalog ? catalog->size() : 256;
    case Kind::index: return index_class_count;
    default: return 0;
  }
}

}  // namespace jointad::pretask

#endif  // JOINTAD_PRETASK_HPP

#ifndef JOINTAD_ANOMALY_HPP
#define JOINTAD_ANOMALY_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "jointad/common.hpp"
#include "jointad/cubesym.hpp"
#include "jointad/rng.hpp"
#include "jointad/volume.hpp"

namespace jointad::anomaly {

using volcore::Volume3D;

struct PatchRegion {
  std::array<int, 3> origin = {0, 0, 0};
  std::array<int, 3> extent = {0, 0, 0};

  bool inside(int size) const {
    for (int i = 0; i < 3; ++i) {
      if (origin[static_cast<std::size_t>(i)] < 0 || extent[static_cast<std::size_t>(i)] <= 0 ||
          origin[static_cast<std::size_t>(i)] + extent[static_cast<std::size_t>(i)] > size)
        return false;
    }
    return true;
  }
  std::size_t voxel_count() const {
    return static_cast<std::size_t>(extent[0]) * extent[1] * extent[2];
  }
  bool contains(int x, int y, int z) const {
    return x >= origin[0] && x < origin[0] + extent[0] && y >= origin[1] &&
           y < origin[1] + extent[1] && z >= origin[2] && z < origin[2] + extent[2];
  }
};

enum class AugKind { mask, sobel, rotation, copy_paste, permutation, scar };

inline const char* kind_name(AugKind k) {
  switch (k) {
    case AugKind::mask: return "mask";
    case AugKind::sobel: return "sobel";
    case AugKind::rotation: return "rotation";
    case AugKind::copy_paste: return "copy_paste";
    case AugKind::permutation: return "permutation";
    case AugKind::scar: return "scar";
  }
  return "?";
}

inline AugKind kind_from_name(const std::string& s) {
  for (AugKind k : {AugKind::mask, AugKind::sobel, AugKind::rotation, AugKind::copy_paste,
                    AugKind::permutation, AugKind::scar})
    if (s == kind_name(k)) return k;
  throw std::invalid_argument("unknown augmentation kind '" + s + "'");
}

constexpr std::array<AugKind, 6> all_kinds = {AugKind::mask,       AugKind::sobel,
                                              AugKind::rotation,   AugKind::copy_paste,
                                              AugKind::permutation, AugKind::scar};

// The input-size rule scaled to desk resolution: the paper states the range
// at edge 64, smaller volumes shrink it proportionally.
inline double default_scale(int size) { return size / 64.0; }

inline int min_extent(double scale) {
  return std::max(1, static_cast<int>(std::lround(10.0 * scale)));
}

inline int min_label_voxels(double scale) {
  return std::max(1, static_cast<int>(std::lround(20.0 * scale * scale * scale)));
}

// Per-dimension extent uniform in [10*scale, size/2]; origin uniform among
// in-bounds placements.
inline PatchRegion sample_region(Rng& rng, int size, double scale) {
  int lo = min_extent(scale);
  int hi = size / 2;
  if (hi < lo)
    throw std::invalid_argument("sample_region: size " + std::to_string(size) +
                                " cannot hold extents in [" + std::to_string(lo) + "," +
                                std::to_string(hi) + "]");
  PatchRegion r;
  for (int i = 0; i < 3; ++i)
    r.extent[static_cast<std::size_t>(i)] = rng.range(lo, hi);
  for (int i = 0; i < 3; ++i)
    r.origin[static_cast<std::size_t>(i)] = rng.range(0, size - r.extent[static_cast<std::size_t>(i)]);
  return r;
}

namespace detail {

inline std::size_t flat(int size, int x, int y, int z) {
  return static_cast<std::size_t>(x) +
         static_cast<std::size_t>(size) * (y + static_cast<std::size_t>(size) * z);
}

// Extracts a region to a compact (ex,ey,ez) buffer, x-fastest.
inline std::vector<float> extract(const std::vector<float>& g, int size, const PatchRegion& r) {
  std::vector<float> out(r.voxel_count());
  std::size_t k = 0;
  for (int z = 0; z < r.extent[2]; ++z)
    for (int y = 0; y < r.extent[1]; ++y)
      for (int x = 0; x < r.extent[0]; ++x)
        out[k++] = g[flat(size, r.origin[0] + x, r.origin[1] + y, r.origin[2] + z)];
  return out;
}

inline void insert(std::vector<float>& g, int size, const PatchRegion& r,
                   const std::vector<float>& patch) {
  std::size_t k = 0;
  for (int z = 0; z < r.extent[2]; ++z)
    for (int y = 0; y < r.extent[1]; ++y)
      for (int x = 0; x < r.extent[0]; ++x)
        g[flat(size, r.origin[0] + x, r.origin[1] + y, r.origin[2] + z)] = patch[k++];
}

// 3D Sobel gradient magnitude of a compact patch, replicate-padded at the
// patch border, min-max normalized into [0,1]. Kernel per axis: [-1,0,1]
// derivative times [1,2,1]x[1,2,1] smoothing on the other two axes.
inline std::vector<float> sobel_magnitude(const std::vector<float>& p, int ex, int ey, int ez) {
  auto at = [&](int x, int y, int z) {
    x = std::clamp(x, 0, ex - 1);
    y = std::clamp(y, 0, ey - 1);
    z = std::clamp(z, 0, ez - 1);
    return static_cast<double>(
        p[static_cast<std::size_t>(x) + static_cast<std::size_t>(ex) * (y + static_cast<std::size_t>(ey) * z)]);
  };
  const int deriv[3] = {-1, 0, 1};
  const int smooth[3] = {1, 2, 1};
  std::vector<float> out(p.size());
  double lo = 1e300, hi = -1e300;
  for (int z = 0; z < ez; ++z)
    for (int y = 0; y < ey; ++y)
      for (int x = 0; x < ex; ++x) {
        double g[3] = {0, 0, 0};
        for (int kz = -1; kz <= 1; ++kz)
          for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx) {
              double val = at(x + kx, y + ky, z + kz);
              g[0] += val * deriv[kx + 1] * smooth[ky + 1] * smooth[kz + 1];
              g[1] += val * smooth[kx + 1] * deriv[ky + 1] * smooth[kz + 1];
              g[2] += val * smooth[kx + 1] * smooth[ky + 1] * deriv[kz + 1];
            }
        double mag = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
        out[static_cast<std::size_t>(x) +
            static_cast<std::size_t>(ex) * (y + static_cast<std::size_t>(ey) * z)] =
            static_cast<float>(mag);
        lo = std::min(lo, mag);
        hi = std::max(hi, mag);
      }
  if (hi > lo) {
    double s = 1.0 / (hi - lo);
    for (float& f : out) f = static_cast<float>((f - lo) * s);
  } else {
    std::fill(out.begin(), out.end(), 0.f);
  }
  return out;
}

inline PatchRegion sample_source(Rng& rng, int size, const PatchRegion& dst) {
  PatchRegion src = dst;
  for (int tries = 0; tries < 64; ++tries) {
    for (int i = 0; i < 3; ++i)
      src.origin[static_cast<std::size_t>(i)] =
          rng.range(0, size - dst.extent[static_cast<std::size_t>(i)]);
    if (src.origin != dst.origin) return src;
  }
  // Volume too small to place a distinct source.
  throw std::invalid_argument("copy_paste: no distinct source placement exists");
}

}  // namespace detail

// Applies one hard augmentation. Only voxels inside `region` change; for
// copy_paste/scar the source is read from the unmodified input.
inline std::vector<float> apply_augmentation(const Volume3D& v, AugKind kind,
                                             const PatchRegion& region, Rng& rng) {
  if (!region.inside(v.size))
    throw std::invalid_argument("apply_augmentation: region out of bounds");
  std::vector<float> out = v.voxels;
  switch (kind) {
    case AugKind::mask: {
      float val = static_cast<float>(rng.uniform());
      for (int z = 0; z < region.extent[2]; ++z)
        for (int y = 0; y < region.extent[1]; ++y)
          for (int x = 0; x < region.extent[0]; ++x)
            out[detail::flat(v.size, region.origin[0] + x, region.origin[1] + y,
                             region.origin[2] + z)] = val;
      break;
    }
    case AugKind::sobel: {
      std::vector<float> patch = detail::extract(v.voxels, v.size, region);
      std::vector<float> mag =
          detail::sobel_magnitude(patch, region.extent[0], region.extent[1], region.extent[2]);
      detail::insert(out, v.size, region, mag);
      break;
    }
    case AugKind::rotation: {
      if (region.extent[0] != region.extent[1] || region.extent[1] != region.extent[2])
        throw std::invalid_argument("rotation augmentation requires a cubic region");
      const auto& rots = cubesym::enumerate_rotations();
      int cls = rng.range(1, static_cast<int>(rots.size()) - 1);  // non-identity
      std::vector<float> patch = detail::extract(v.voxels, v.size, region);
      std::vector<float> rot =
          cubesym::rotate_grid(patch, region.extent[0], rots[static_cast<std::size_t>(cls)]);
      detail::insert(out, v.size, region, rot);
      break;
    }
    case AugKind::copy_paste:
    case AugKind::scar: {
      PatchRegion src = detail::sample_source(rng, v.size, region);
      std::vector<float> patch = detail::extract(v.voxels, v.size, src);
      detail::insert(out, v.size, region, patch);
      break;
    }
    case AugKind::permutation: {
      if (region.extent[0] % 2 || region.extent[1] % 2 || region.extent[2] % 2)
        throw std::invalid_argument("permutation augmentation requires even extents");
      std::array<int, 8> perm;
      for (int i = 0; i < 8; ++i) perm[static_cast<std::size_t>(i)] = i;
      do {
        rng.shuffle(perm.begin(), perm.end());
      } while (perm == std::array<int, 8>{0, 1, 2, 3, 4, 5, 6, 7});
      int hx = region.extent[0] / 2, hy = region.extent[1] / 2, hz = region.extent[2] / 2;
      std::vector<float> patch = detail::extract(v.voxels, v.size, region);
      std::vector<float> shuffled(patch.size());
      auto pat = [&](int x, int y, int z) -> std::size_t {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(region.extent[0]) *
                   (y + static_cast<std::size_t>(region.extent[1]) * z);
      };
      for (int slot = 0; slot < 8; ++slot) {
        int srcoct = perm[static_cast<std::size_t>(slot)];
        int dx = (slot & 1) * hx, dy = ((slot >> 1) & 1) * hy, dz = ((slot >> 2) & 1) * hz;
        int sx = (srcoct & 1) * hx, sy = ((srcoct >> 1) & 1) * hy, sz = ((srcoct >> 2) & 1) * hz;
        for (int z = 0; z < hz; ++z)
          for (int y = 0; y < hy; ++y)
            for (int x = 0; x < hx; ++x)
              shuffled[pat(dx + x, dy + y, dz + z)] = patch[pat(sx + x, sy + y, sz + z)];
      }
      detail::insert(out, v.size, region, shuffled);
      break;
    }
  }
  return out;
}

// OOD label: true exactly where the augmented grid differs from the
// original, restricted to the modified region. A pasted voxel that happens
// to equal the original is excluded.
inline std::vector<std::uint8_t> compute_label(const std::vector<float>& before,
                                               const std::vector<float>& after, int size,
                                               const PatchRegion& region) {
  if (before.size() != after.size())
    throw std::invalid_argument("compute_label: grid sizes differ");
  std::vector<std::uint8_t> label(before.size(), 0);
  for (int z = 0; z < region.extent[2]; ++z)
    for (int y = 0; y < region.extent[1]; ++y)
      for (int x = 0; x < region.extent[0]; ++x) {
        std::size_t i = detail::flat(size, region.origin[0] + x, region.origin[1] + y,
                                     region.origin[2] + z);
        label[i] = before[i] != after[i] ? 1 : 0;
      }
  return label;
}

struct AnomalyRecord {
  Volume3D volume;  // augmented; body_mask carried over from the base image
  std::vector<std::uint8_t> label;
  AugKind kind = AugKind::mask;
  PatchRegion region;
  int attempts = 0;

  std::size_t label_count() const {
    std::size_t n = 0;
    for (auto b : label) n += b;
    return n;
  }
};

// Synthesis that ran out of attempts; carries the last rejected record.
class synthesis_failure : public std::runtime_error {
 public:
  synthesis_failure(const std::string& msg, AnomalyRecord last)
      : std::runtime_error(msg), last_(std::move(last)) {}
  const AnomalyRecord& last() const { return last_; }

 private:
  AnomalyRecord last_;
};

namespace detail {

// Kind-specific region sampling: rotation needs a cube, permutation even
// extents, scar a much smaller range.
inline PatchRegion sample_region_for(AugKind kind, Rng& rng, int size, double scale) {
  switch (kind) {
    case AugKind::rotation: {
      int lo = min_extent(scale), hi = size / 2;
      if (hi < lo) throw std::invalid_argument("sample_region: size too small");
      int e = rng.range(lo, hi);
      PatchRegion r;
      r.extent = {e, e, e};
      for (int i = 0; i < 3; ++i) r.origin[static_cast<std::size_t>(i)] = rng.range(0, size - e);
      return r;
    }
    case AugKind::permutation: {
      int lo = (min_extent(scale) + 1) / 2, hi = size / 4;
      if (hi < lo) throw std::invalid_argument("sample_region: size too small for octants");
      PatchRegion r;
      for (int i = 0; i < 3; ++i) r.extent[static_cast<std::size_t>(i)] = 2 * rng.range(lo, hi);
      for (int i = 0; i < 3; ++i)
        r.origin[static_cast<std::size_t>(i)] =
            rng.range(0, size - r.extent[static_cast<std::size_t>(i)]);
      return r;
    }
    case AugKind::scar: {
      int hi = std::max(2, static_cast<int>(std::lround(5.0 * scale)));
      PatchRegion r;
      for (int i = 0; i < 3; ++i) r.extent[static_cast<std::size_t>(i)] = rng.range(2, hi);
      for (int i = 0; i < 3; ++i)
        r.origin[static_cast<std::size_t>(i)] =
            rng.range(0, size - r.extent[static_cast<std::size_t>(i)]);
      return r;
    }
    default:
      return sample_region(rng, size, scale);
  }
}

}  // namespace detail

// Region sampling, augmentation and labeling, re-run until the label clears
// the scaled 20-voxel floor or attempts run out.
inline AnomalyRecord synth_ood(const Volume3D& v, AugKind kind, Rng& rng, int max_attempts = 10,
                               double scale = -1.0) {
  if (max_attempts < 1) throw std::invalid_argument("synth_ood: max_attempts must be >= 1");
  if (scale <= 0.0) scale = default_scale(v.size);
  std::size_t floor_voxels = static_cast<std::size_t>(min_label_voxels(scale));
  AnomalyRecord rec;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    PatchRegion region = detail::sample_region_for(kind, rng, v.size, scale);
    std::vector<float> after = apply_augmentation(v, kind, region, rng);
    rec.kind = kind;
    rec.region = region;
    rec.attempts = attempt;
    rec.label = compute_label(v.voxels, after, v.size, region);
    rec.volume = v;
    rec.volume.voxels = std::move(after);
    rec.volume.meta["augmentation"] = kind_name(kind);
    if (rec.label_count() >= floor_voxels) return rec;
  }
  throw synthesis_failure(std::string("synth_ood: no label with >= ") +
                              std::to_string(floor_voxels) + " voxels after " +
                              std::to_string(max_attempts) + " attempts (" + kind_name(kind) + ")",
                          std::move(rec));
}

// -------- mask test grid --------

enum class MaskShape { cube, sphere };

struct MaskTestCase {
  MaskShape shape = MaskShape::cube;
  int position_index = 0;   // 0..26, x fastest over the 3x3x3 center lattice
  int size_index = 0;       // extents {size/8, size/4, size/2}
  int intensity_index = 0;  // {0, 1/3, 2/3, 1}
  AnomalyRecord record;
  bool degenerate = false;  // fill value matched the image everywhere
};

inline constexpr std::array<double, 3> mask_position_fractions = {0.25, 0.5, 0.75};
inline constexpr std::array<double, 4> mask_intensities = {0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};

// Two shapes x 27 positions x 3 sizes x 4 intensities = 648 cases.
inline std::vector<MaskTestCase> build_mask_testset(const Volume3D& v) {
  std::vector<MaskTestCase> cases;
  cases.reserve(648);
  const std::array<int, 3> extents = {v.size / 8, v.size / 4, v.size / 2};
  for (MaskShape shape : {MaskShape::cube, MaskShape::sphere})
    for (int ip = 0; ip < 27; ++ip)
      for (int is = 0; is < 3; ++is)
        for (int ii = 0; ii < 4; ++ii) {
          int e = extents[static_cast<std::size_t>(is)];
          int fx = ip % 3, fy = (ip / 3) % 3, fz = ip / 9;
          PatchRegion region;
          region.extent = {e, e, e};
          region.origin = {
              static_cast<int>(std::lround(mask_position_fractions[static_cast<std::size_t>(fx)] * v.size - e / 2.0)),
              static_cast<int>(std::lround(mask_position_fractions[static_cast<std::size_t>(fy)] * v.size - e / 2.0)),
              static_cast<int>(std::lround(mask_position_fractions[static_cast<std::size_t>(fz)] * v.size - e / 2.0))};
          for (int d = 0; d < 3; ++d)
            region.origin[static_cast<std::size_t>(d)] =
                std::clamp(region.origin[static_cast<std::size_t>(d)], 0, v.size - e);
          float val = static_cast<float>(mask_intensities[static_cast<std::size_t>(ii)]);

          std::vector<float> after = v.voxels;
          double half = (e - 1) / 2.0;
          for (int z = 0; z < e; ++z)
            for (int y = 0; y < e; ++y)
              for (int x = 0; x < e; ++x) {
                if (shape == MaskShape::sphere) {
                  double dx = (x - half) / (e / 2.0), dy = (y - half) / (e / 2.0),
                         dz = (z - half) / (e / 2.0);
                  if (dx * dx + dy * dy + dz * dz > 1.0) continue;
                }
                after[detail::flat(v.size, region.origin[0] + x, region.origin[1] + y,
                                   region.origin[2] + z)] = val;
              }

          MaskTestCase c;
          c.shape = shape;
          c.position_index = ip;
          c.size_index = is;
          c.intensity_index = ii;
          c.record.kind = AugKind::mask;
          c.record.region = region;
          c.record.attempts = 1;
          c.record.label = compute_label(v.voxels, after, v.size, region);
          c.record.volume = v;
          c.record.volume.voxels = std::move(after);
          c.degenerate = c.record.label_count() == 0;
          cases.push_back(std::move(c));
        }
  return cases;
}

}  // namespace jointad::anomaly

#endif  // JOINTAD_ANOMALY_HPP

#ifndef JOINTAD_VOLUME_HPP
#define JOINTAD_VOLUME_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "jointad/common.hpp"
#include "jointad/rng.hpp"
#include "jointad/tensor.hpp"

namespace jointad::volcore {

// Cubic scalar field in [0,1]. Voxels are stored x-fastest:
// index = x + size * (y + size * z). Intensity outside body_mask is 0.
struct Volume3D {
  int size = 0;
  std::vector<float> voxels;
  std::vector<std::uint8_t> body_mask;
  std::map<std::string, std::string> meta;

  Volume3D() = default;
  explicit Volume3D(int s)
      : size(s),
        voxels(static_cast<std::size_t>(s) * s * s, 0.f),
        body_mask(static_cast<std::size_t>(s) * s * s, 0) {}

  std::size_t count() const { return voxels.size(); }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(size) * (static_cast<std::size_t>(y) +
                                             static_cast<std::size_t>(size) * z);
  }
  float at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
  float& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
};

// Checks the type invariants; used by tests and by readers of foreign data.
inline void validate_volume(const Volume3D& v) {
  std::size_t n = static_cast<std::size_t>(v.size) * v.size * v.size;
  if (v.voxels.size() != n || v.body_mask.size() != n)
    throw std::invalid_argument("volume: grid sizes do not match size^3");
  for (std::size_t i = 0; i < n; ++i) {
    float x = v.voxels[i];
    if (!(x >= 0.f && x <= 1.f))
      throw std::invalid_argument("volume: intensity outside [0,1]");
    if (!v.body_mask[i] && x != 0.f)
      throw std::invalid_argument("volume: nonzero intensity outside body");
  }
}

namespace detail {

struct Ellipsoid {
  double cx, cy, cz;  // center, fraction of edge
  double ax, ay, az;  // semi-axes, fraction of edge
  // Squared normalized distance; <= 1 means inside.
  double dist2(double x, double y, double z) const {
    double dx = (x - cx) / ax, dy = (y - cy) / ay, dz = (z - cz) / az;
    return dx * dx + dy * dy + dz * dz;
  }
};

// Trilinear sample of a scalar lattice (nodes at integer coords), clamped.
inline double lattice_sample(const std::vector<double>& g, int n, double x, double y,
                             double z) {
  auto clampi = [n](int i) { return std::clamp(i, 0, n - 1); };
  int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y)),
      z0 = static_cast<int>(std::floor(z));
  double fx = x - x0, fy = y - y0, fz = z - z0;
  auto at = [&](int i, int j, int k) {
    return g[static_cast<std::size_t>(clampi(i)) +
             static_cast<std::size_t>(n) * (clampi(j) + static_cast<std::size_t>(n) * clampi(k))];
  };
  double c00 = at(x0, y0, z0) * (1 - fx) + at(x0 + 1, y0, z0) * fx;
  double c10 = at(x0, y0 + 1, z0) * (1 - fx) + at(x0 + 1, y0 + 1, z0) * fx;
  double c01 = at(x0, y0, z0 + 1) * (1 - fx) + at(x0 + 1, y0, z0 + 1) * fx;
  double c11 = at(x0, y0 + 1, z0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1, z0 + 1) * fx;
  double c0 = c00 * (1 - fy) + c10 * fy;
  double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

}  // namespace detail

// Deterministic pseudo-anatomical phantom: one smooth ellipsoidal body with
// nested internal ellipsoids of distinct mean intensity, a mild linear
// gradient and low-amplitude smooth noise. Background is exactly 0.
inline Volume3D make_phantom(std::uint64_t seed, int size) {
  if (size < 32) throw std::invalid_argument("make_phantom: size must be >= 32");
  Rng rng(seed ^ 0x7061686e746f6dULL);

  detail::Ellipsoid body;
  body.cx = rng.uniform(0.48, 0.52);
  body.cy = rng.uniform(0.48, 0.52);
  body.cz = rng.uniform(0.48, 0.52);
  body.ax = rng.uniform(0.38, 0.45);
  body.ay = rng.uniform(0.38, 0.45);
  body.az = rng.uniform(0.38, 0.45);

  double base = rng.uniform(0.35, 0.45);

  int n_struct = rng.range(3, 6);
  std::vector<detail::Ellipsoid> parts(static_cast<std::size_t>(n_struct));
  std::vector<double> part_val(static_cast<std::size_t>(n_struct));
  double phase = rng.uniform();
  for (int i = 0; i < n_struct; ++i) {
    detail::Ellipsoid& e = parts[static_cast<std::size_t>(i)];
    // Center inside the body with margin so structures stay internal.
    double ux, uy, uz;
    do {
      ux = rng.uniform(-1.0, 1.0);
      uy = rng.uniform(-1.0, 1.0);
      uz = rng.uniform(-1.0, 1.0);
    } while (ux * ux + uy * uy + uz * uz > 1.0);
    e.cx = body.cx + 0.55 * ux * body.ax;
    e.cy = body.cy + 0.55 * uy * body.ay;
    e.cz = body.cz + 0.55 * uz * body.az;
    e.ax = rng.uniform(0.05, 0.16);
    e.ay = rng.uniform(0.05, 0.16);
    e.az = rng.uniform(0.05, 0.16);
    // Distinct means spread over [0.15, 0.85].
    part_val[static_cast<std::size_t>(i)] =
        0.15 + 0.7 * std::fmod(phase + static_cast<double>(i) / n_struct, 1.0);
  }

  double gx = rng.uniform(-0.08, 0.08);
  double gy = rng.uniform(-0.08, 0.08);
  double gz = rng.uniform(-0.08, 0.08);

  const int noise_n = 9;
  std::vector<double> noise(static_cast<std::size_t>(noise_n) * noise_n * noise_n);
  for (double& x : noise) x = rng.uniform(-1.0, 1.0);

  Volume3D v(size);
  v.meta["generator"] = "phantom-v1";
  v.meta["seed"] = std::to_string(seed);
  v.meta["size"] = std::to_string(size);

  double inv = 1.0 / size;
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double px = (x + 0.5) * inv, py = (y + 0.5) * inv, pz = (z + 0.5) * inv;
        double d2 = body.dist2(px, py, pz);
        if (d2 > 1.0) continue;
        double val = base;
        for (int i = 0; i < n_struct; ++i) {
          double sd2 = parts[static_cast<std::size_t>(i)].dist2(px, py, pz);
          if (sd2 <= 1.0) {
            // Smooth edge: full weight in the core, fading over the outer 25%.
            double w = std::clamp((1.0 - sd2) / 0.25, 0.0, 1.0);
            val = val * (1.0 - w) + part_val[static_cast<std::size_t>(i)] * w;
          }
        }
        val += gx * (px - 0.5) + gy * (py - 0.5) + gz * (pz - 0.5);
        val += 0.02 * detail::lattice_sample(noise, noise_n, px * (noise_n - 1),
                                             py * (noise_n - 1), pz * (noise_n - 1));
        // Fade the outer body shell toward zero so the surface is smooth.
        double fade = std::clamp((1.0 - d2) / 0.15, 0.0, 1.0);
        val *= fade;
        std::size_t idx = v.index(x, y, z);
        v.voxels[idx] = static_cast<float>(std::clamp(val, 0.0, 1.0));
        v.body_mask[idx] = 1;
      }
  return v;
}

// Min-max rescale to [0,1], then keep only the largest 6-connected component
// of voxels at or above body_threshold; everything else is zeroed.
inline Volume3D normalize_volume(const Tensor<float>& raw, float body_threshold) {
  if (raw.rank() != 3 || raw.dim(0) != raw.dim(1) || raw.dim(1) != raw.dim(2))
    throw std::invalid_argument("normalize_volume: expected a cubic rank-3 grid");
  int size = raw.dim(0);
  std::size_t n = raw.size();
  double lo = raw.v[0], hi = raw.v[0];
  for (float x : raw.v) {
    if (!std::isfinite(x)) throw std::invalid_argument("normalize_volume: non-finite input");
    lo = std::min(lo, static_cast<double>(x));
    hi = std::max(hi, static_cast<double>(x));
  }
  if (hi == lo)
    throw degenerate_input_error("normalize_volume: constant-valued grid");

  Volume3D v(size);
  double scale = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < n; ++i)
    v.voxels[i] = static_cast<float>(std::clamp((raw.v[i] - lo) * scale, 0.0, 1.0));

  // Largest 6-connected foreground component.
  std::vector<std::int32_t> comp(n, -1);
  std::vector<std::size_t> stack, best_voxels, cur;
  std::size_t best = 0;
  std::int32_t ncomp = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] != -1 || v.voxels[s] < body_threshold) continue;
    cur.clear();
    stack.assign(1, s);
    comp[s] = ncomp;
    while (!stack.empty()) {
      std::size_t i = stack.back();
      stack.pop_back();
      cur.push_back(i);
      int x = static_cast<int>(i % size);
      int y = static_cast<int>((i / size) % size);
      int z = static_cast<int>(i / (static_cast<std::size_t>(size) * size));
      const int d[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
      for (auto& dd : d) {
        int nx = x + dd[0], ny = y + dd[1], nz = z + dd[2];
        if (nx < 0 || ny < 0 || nz < 0 || nx >= size || ny >= size || nz >= size) continue;
        std::size_t j = v.index(nx, ny, nz);
        if (comp[j] == -1 && v.voxels[j] >= body_threshold) {
          comp[j] = ncomp;
          stack.push_back(j);
        }
      }
    }
    if (cur.size() > best) {
      best = cur.size();
      best_voxels = cur;
    }
    ++ncomp;
  }
  if (best == 0)
    throw degenerate_input_error("normalize_volume: no voxels reach body_threshold");

  std::vector<std::uint8_t> keep(n, 0);
  for (std::size_t i : best_voxels) keep[i] = 1;
  for (std::size_t i = 0; i < n; ++i) {
    v.body_mask[i] = keep[i];
    if (!keep[i]) v.voxels[i] = 0.f;
  }
  return v;
}

// -------- elastic deformation --------

// Coarse displacement lattice; absent means "leave the volume unchanged".
struct ElasticField {
  int grid_nodes = 0;  // intervals per edge; nodes = grid_nodes + 1
  int size = 0;
  std::vector<double> dx, dy, dz;  // per node, in voxels
};

inline std::optional<ElasticField> sample_elastic_field(Rng& rng, int size, double probability,
                                                        int grid_nodes, double max_disp) {
  if (!(max_disp < size / 4.0))
    throw std::invalid_argument("elastic: max_disp must be below size/4");
  if (grid_nodes < 1) throw std::invalid_argument("elastic: grid_nodes must be >= 1");
  bool apply = rng.uniform() < probability;
  if (!apply) return std::nullopt;
  ElasticField f;
  f.grid_nodes = grid_nodes;
  f.size = size;
  int nn = grid_nodes + 1;
  std::size_t n3 = static_cast<std::size_t>(nn) * nn * nn;
  f.dx.resize(n3);
  f.dy.resize(n3);
  f.dz.resize(n3);
  for (std::size_t i = 0; i < n3; ++i) {
    f.dx[i] = rng.uniform(-max_disp, max_disp);
    f.dy[i] = rng.uniform(-max_disp, max_disp);
    f.dz[i] = rng.uniform(-max_disp, max_disp);
  }
  return f;
}

namespace detail {

inline float grid_trilinear(const std::vector<float>& g, int size, double x, double y, double z) {
  auto cl = [size](int i) { return std::clamp(i, 0, size - 1); };
  int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y)),
      z0 = static_cast<int>(std::floor(z));
  double fx = x - x0, fy = y - y0, fz = z - z0;
  auto at = [&](int i, int j, int k) {
    return static_cast<double>(
        g[static_cast<std::size_t>(cl(i)) +
          static_cast<std::size_t>(size) * (cl(j) + static_cast<std::size_t>(size) * cl(k))]);
  };
  double c00 = at(x0, y0, z0) * (1 - fx) + at(x0 + 1, y0, z0) * fx;
  double c10 = at(x0, y0 + 1, z0) * (1 - fx) + at(x0 + 1, y0 + 1, z0) * fx;
  double c01 = at(x0, y0, z0 + 1) * (1 - fx) + at(x0 + 1, y0, z0 + 1) * fx;
  double c11 = at(x0, y0 + 1, z0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1, z0 + 1) * fx;
  double c0 = c00 * (1 - fy) + c10 * fy;
  double c1 = c01 * (1 - fy) + c11 * fy;
  return static_cast<float>(c0 * (1 - fz) + c1 * fz);
}

inline void field_at(const ElasticField& f, int x, int y, int z, double& ox, double& oy,
                     double& oz) {
  int nn = f.grid_nodes + 1;
  double s = static_cast<double>(f.grid_nodes) / f.size;
  double gx = (x + 0.5) * s, gy = (y + 0.5) * s, gz = (z + 0.5) * s;
  auto tri = [&](const std::vector<double>& g) {
    return lattice_sample(g, nn, gx, gy, gz);
  };
  ox = tri(f.dx);
  oy = tri(f.dy);
  oz = tri(f.dz);
}

}  // namespace detail

// Resamples a scalar grid through the displacement field (clamped trilinear).
inline std::vector<float> apply_elastic(const std::vector<float>& grid, int size,
                                        const ElasticField& f) {
  std::vector<float> out(grid.size());
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double ox, oy, oz;
        detail::field_at(f, x, y, z, ox, oy, oz);
        out[static_cast<std::size_t>(x) +
            static_cast<std::size_t>(size) * (y + static_cast<std::size_t>(size) * z)] =
            detail::grid_trilinear(grid, size, x + ox, y + oy, z + oz);
      }
  return out;
}

inline std::vector<std::uint8_t> apply_elastic_mask(const std::vector<std::uint8_t>& mask,
                                                    int size, const ElasticField& f) {
  std::vector<float> tmp(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) tmp[i] = mask[i] ? 1.f : 0.f;
  std::vector<float> warped = apply_elastic(tmp, size, f);
  std::vector<std::uint8_t> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = warped[i] >= 0.5f ? 1 : 0;
  return out;
}

// With the given probability, warps the volume by a random coarse field.
// The body mask is warped with the same field and the background re-zeroed.
inline Volume3D elastic_deform(const Volume3D& v, Rng& rng, double probability, int grid_nodes,
                               double max_disp) {
  auto f = sample_elastic_field(rng, v.size, probability, grid_nodes, max_disp);
  if (!f) return v;
  Volume3D out = v;
  out.voxels = apply_elastic(v.voxels, v.size, *f);
  out.body_mask = apply_elastic_mask(v.body_mask, v.size, *f);
  for (std::size_t i = 0; i < out.voxels.size(); ++i) {
    if (!out.body_mask[i])
      out.voxels[i] = 0.f;
    else
      out.voxels[i] = std::clamp(out.voxels[i], 0.f, 1.f);
  }
  return out;
}

// 2x average-pool downsample. A coarse voxel is body if any child is body,
// which keeps "background intensity is exactly zero" true after pooling.
inline Volume3D downsample2x(const Volume3D& v) {
  if (v.size % 2 != 0) throw std::invalid_argument("downsample2x: size must be even");
  int h = v.size / 2;
  Volume3D out(h);
  out.meta = v.meta;
  out.meta["downsampled_from"] = std::to_string(v.size);
  for (int z = 0; z < h; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < h; ++x) {
        double acc = 0.0;
        std::uint8_t any = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              std::size_t i = v.index(2 * x + dx, 2 * y + dy, 2 * z + dz);
              acc += v.voxels[i];
              any |= v.body_mask[i];
            }
        out.voxels[out.index(x, y, z)] = static_cast<float>(acc / 8.0);
        out.body_mask[out.index(x, y, z)] = any;
      }
  return out;
}

// Grid-level 2x average pooling (x-fastest layout).
inline std::vector<float> downsample2x_grid(const std::vector<float>& g, int size) {
  if (size % 2 != 0) throw std::invalid_argument("downsample2x: size must be even");
  int h = size / 2;
  std::vector<float> out(static_cast<std::size_t>(h) * h * h);
  for (int z = 0; z < h; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < h; ++x) {
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              acc += g[static_cast<std::size_t>(2 * x + dx) +
                       static_cast<std::size_t>(size) *
                           (2 * y + dy + static_cast<std::size_t>(size) * (2 * z + dz))];
        out[static_cast<std::size_t>(x) +
            static_cast<std::size_t>(h) * (y + static_cast<std::size_t>(h) * z)] =
            static_cast<float>(acc / 8.0);
      }
  return out;
}

// Label pooling: a coarse voxel is positive if any child is positive.
inline std::vector<std::uint8_t> downsample2x_label(const std::vector<std::uint8_t>& label,
                                                    int size) {
  int h = size / 2;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * h * h, 0);
  for (int z = 0; z < h; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < h; ++x) {
        std::uint8_t any = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              any |= label[static_cast<std::size_t>(2 * x + dx) +
                           static_cast<std::size_t>(size) *
                               (2 * y + dy + static_cast<std::size_t>(size) * (2 * z + dz))];
        out[static_cast<std::size_t>(x) +
            static_cast<std::size_t>(h) * (y + static_cast<std::size_t>(h) * z)] = any;
      }
  return out;
}

// -------- file format --------
//
//   magic   "JVOL"            4 bytes
//   version u32 = 1
//   payload u8 (0 scalar volume, 1 boolean mask stored as 0.0/1.0 floats)
//   size    u32
//   voxels  size^3 float32 little-endian, x-fastest
//   mask    packed bits, LSB first, ceil(size^3 / 8) bytes
//   meta    u32 count, then per entry u32 key length, key, u32 value length, value

namespace detail {

inline void put_u32(std::string& b, std::uint32_t x) {
  b.push_back(static_cast<char>(x & 0xff));
  b.push_back(static_cast<char>((x >> 8) & 0xff));
  b.push_back(static_cast<char>((x >> 16) & 0xff));
  b.push_back(static_cast<char>((x >> 24) & 0xff));
}

inline void put_f32(std::string& b, float f) {
  std::uint32_t x;
  std::memcpy(&x, &f, 4);
  put_u32(b, x);
}

struct Cursor {
  const std::uint8_t* p;
  std::size_t n, pos = 0;
  void need(std::size_t k, const char* field) {
    if (pos + k > n)
      throw format_error(std::string(field) + " truncated: expected " + std::to_string(k) +
                         " bytes, got " + std::to_string(n - pos));
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t x = static_cast<std::uint32_t>(p[pos]) |
                      (static_cast<std::uint32_t>(p[pos + 1]) << 8) |
                      (static_cast<std::uint32_t>(p[pos + 2]) << 16) |
                      (static_cast<std::uint32_t>(p[pos + 3]) << 24);
    pos += 4;
    return x;
  }
  std::uint8_t u8(const char* field) {
    need(1, field);
    return p[pos++];
  }
  float f32(const char* field) {
    std::uint32_t x = u32(field);
    float f;
    std::memcpy(&f, &x, 4);
    return f;
  }
  std::string bytes(std::size_t k, const char* field) {
    need(k, field);
    std::string s(reinterpret_cast<const char*>(p + pos), k);
    pos += k;
    return s;
  }
};

}  // namespace detail

enum class Payload : std::uint8_t { scalar = 0, boolean = 1 };

inline void write_volume(const Volume3D& v, const std::string& path,
                         Payload payload = Payload::scalar) {
  std::string b;
  b.reserve(v.count() * 4 + v.count() / 8 + 256);
  b += "JVOL";
  detail::put_u32(b, 1);
  b.push_back(static_cast<char>(payload));
  detail::put_u32(b, static_cast<std::uint32_t>(v.size));
  for (float f : v.voxels) detail::put_f32(b, f);
  std::size_t nbytes = (v.count() + 7) / 8;
  std::string mask(nbytes, '\0');
  for (std::size_t i = 0; i < v.count(); ++i)
    if (v.body_mask[i]) mask[i / 8] = static_cast<char>(mask[i / 8] | (1 << (i % 8)));
  b += mask;
  detail::put_u32(b, static_cast<std::uint32_t>(v.meta.size()));
  for (const auto& [k, val] : v.meta) {
    detail::put_u32(b, static_cast<std::uint32_t>(k.size()));
    b += k;
    detail::put_u32(b, static_cast<std::uint32_t>(val.size()));
    b += val;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_volume: cannot open " + path);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!out) throw std::runtime_error("write_volume: short write to " + path);
}

inline Volume3D read_volume(const std::string& path, Payload* payload_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_volume: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::Cursor c{reinterpret_cast<const std::uint8_t*>(buf.data()), buf.size()};

  std::string magic = c.bytes(4, "magic");
  if (magic != "JVOL") throw format_error("bad magic: expected JVOL, got '" + magic + "'");
  std::uint32_t version = c.u32("version");
  if (version != 1) throw format_error("unsupported version " + std::to_string(version));
  std::uint8_t payload = c.u8("payload flag");
  if (payload > 1) throw format_error("bad payload flag " + std::to_string(payload));
  if (payload_out) *payload_out = static_cast<Payload>(payload);
  std::uint32_t size = c.u32("size");
  if (size == 0 || size > 4096) throw format_error("implausible size " + std::to_string(size));

  Volume3D v(static_cast<int>(size));
  std::size_t n = v.count();
  c.need(4 * n, "voxel block");
  for (std::size_t i = 0; i < n; ++i) v.voxels[i] = c.f32("voxel block");
  std::size_t nbytes = (n + 7) / 8;
  std::string mask = c.bytes(nbytes, "mask block");
  for (std::size_t i = 0; i < n; ++i)
    v.body_mask[i] = (mask[i / 8] >> (i % 8)) & 1;
  std::uint32_t nmeta = c.u32("meta count");
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::uint32_t klen = c.u32("meta key length");
    std::string k = c.bytes(klen, "meta key");
    std::uint32_t vlen = c.u32("meta value length");
    v.meta[k] = c.bytes(vlen, "meta value");
  }
  return v;
}

// Boolean voxel grids (OOD labels) ride the same container, payload = boolean.
inline void write_label(const std::vector<std::uint8_t>& label, int size,
                        const std::string& path) {
  Volume3D v(size);
  for (std::size_t i = 0; i < v.count(); ++i) {
    v.voxels[i] = label[i] ? 1.f : 0.f;
    v.body_mask[i] = label[i];
  }
  write_volume(v, path, Payload::boolean);
}

inline std::vector<std::uint8_t> read_label(const std::string& path, int* size_out = nullptr) {
  Payload p;
  Volume3D v = read_volume(path, &p);
  if (p != Payload::boolean) throw format_error("payload flag: expected boolean payload");
  if (size_out) *size_out = v.size;
  std::vector<std::uint8_t> label(v.count());
  for (std::size_t i = 0; i < v.count(); ++i) label[i] = v.voxels[i] != 0.f ? 1 : 0;
  return label;
}

// -------- dataset split --------

struct SplitSpec {
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<int> train, val, test;
};

// Deterministic partition; counts follow largest-remainder rounding so each
// part is within one item of its exact fraction.
inline Split split_ids(int n_items, const SplitSpec& spec) {
  double fsum = spec.train_fraction + spec.val_fraction + spec.test_fraction;
  if (std::abs(fsum - 1.0) > 1e-9)
    throw std::invalid_argument("split: fractions must sum to 1");
  std::array<double, 3> want = {spec.train_fraction * n_items, spec.val_fraction * n_items,
                                spec.test_fraction * n_items};
  std::array<int, 3> cnt;
  std::array<double, 3> rem;
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    cnt[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(want[static_cast<std::size_t>(i)]));
    rem[static_cast<std::size_t>(i)] = want[static_cast<std::size_t>(i)] - cnt[static_cast<std::size_t>(i)];
    assigned += cnt[static_cast<std::size_t>(i)];
  }
  while (assigned < n_items) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[static_cast<std::size_t>(i)] > rem[static_cast<std::size_t>(best)]) best = i;
    ++cnt[static_cast<std::size_t>(best)];
    rem[static_cast<std::size_t>(best)] = -1.0;
    ++assigned;
  }
  std::vector<int> ids(static_cast<std::size_t>(n_items));
  for (int i = 0; i < n_items; ++i) ids[static_cast<std::size_t>(i)] = i;
  Rng rng(spec.seed ^ 0x73706c6974ULL);
  rng.shuffle(ids.begin(), ids.end());
  Split s;
  s.train.assign(ids.begin(), ids.begin() + cnt[0]);
  s.val.assign(ids.begin() + cnt[0], ids.begin() + cnt[0] + cnt[1]);
  s.test.assign(ids.begin() + cnt[0] + cnt[1], ids.end());
  return s;
}

}  // namespace jointad::volcore

#endif  // JOINTAD_VOLUME_HPP

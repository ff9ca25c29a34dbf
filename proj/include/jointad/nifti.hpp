#ifndef JOINTAD_NIFTI_HPP
#define JOINTAD_NIFTI_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "jointad/common.hpp"
#include "jointad/tensor.hpp"
#include "jointad/volume.hpp"

namespace jointad::nifti {

// Minimal single-file NIfTI-1 (.nii) reader covering the scalar 3D case.
// Non-cubic volumes are center-cropped to the smallest dimension so they fit
// the cubic Volume3D model, then passed through normalize_volume.

class import_error : public std::runtime_error {
 public:
  explicit import_error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

template <typename T>
T rd(const std::uint8_t* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap) {
    std::uint8_t* b = reinterpret_cast<std::uint8_t*>(&v);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  }
  return v;
}

}  // namespace detail

// Reads the raw scalar grid. Supported datatypes: u8, i16, i32, f32, f64, u16.
inline Tensor<float> read_nii_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw import_error("cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 352) throw import_error("file too small for a NIfTI-1 header");
  bool swap = false;
  std::int32_t hdr = detail::rd<std::int32_t>(buf.data(), false);
  if (hdr != 348) {
    swap = true;
    hdr = detail::rd<std::int32_t>(buf.data(), true);
    if (hdr != 348) throw import_error("sizeof_hdr is not 348; not a NIfTI-1 file");
  }
  if (std::memcmp(buf.data() + 344, "n+1", 3) != 0)
    throw import_error("magic is not n+1 (only single-file .nii supported)");

  auto dim = [&](int i) {
    return detail::rd<std::int16_t>(buf.data() + 40 + 2 * i, swap);
  };
  int ndim = dim(0);
  if (ndim < 3) throw import_error("volume must have at least 3 dimensions");
  int nx = dim(1), ny = dim(2), nz = dim(3);
  for (int i = 4; i <= ndim; ++i)
    if (dim(i) > 1) throw import_error("only scalar 3D volumes are supported");
  if (nx < 2 || ny < 2 || nz < 2) throw import_error("degenerate dimensions");

  std::int16_t datatype = detail::rd<std::int16_t>(buf.data() + 70, swap);
  float vox_offset = detail::rd<float>(buf.data() + 108, swap);
  float scl_slope = detail::rd<float>(buf.data() + 112, swap);
  float scl_inter = detail::rd<float>(buf.data() + 116, swap);
  if (scl_slope == 0.f) scl_slope = 1.f;
  std::size_t offset = static_cast<std::size_t>(vox_offset);
  std::size_t n = static_cast<std::size_t>(nx) * ny * nz;

  auto need = [&](std::size_t bytes) {
    if (offset + bytes > buf.size())
      throw import_error("voxel data truncated: expected " + std::to_string(bytes) +
                         " bytes, got " + std::to_string(buf.size() - offset));
  };

  Tensor<float> grid({nz, ny, nx});  // row-major (z,y,x): x fastest as stored
  auto fill = [&](auto fetch, std::size_t bytes_per) {
    need(n * bytes_per);
    for (std::size_t i = 0; i < n; ++i)
      grid.v[i] = scl_slope * fetch(buf.data() + offset + i * bytes_per) + scl_inter;
  };
  switch (datatype) {
    case 2:  // uint8
      fill([&](const std::uint8_t* p) { return static_cast<float>(*p); }, 1);
      break;
    case 4:  // int16
      fill([&](const std::uint8_t* p) { return static_cast<float>(detail::rd<std::int16_t>(p, swap)); }, 2);
      break;
    case 8:  // int32
      fill([&](const std::uint8_t* p) { return static_cast<float>(detail::rd<std::int32_t>(p, swap)); }, 4);
      break;
    case 16:  // float32
      fill([&](const std::uint8_t* p) { return detail::rd<float>(p, swap); }, 4);
      break;
    case 64:  // float64
      fill([&](const std::uint8_t* p) { return static_cast<float>(detail::rd<double>(p, swap)); }, 8);
      break;
    case 512:  // uint16
      fill([&](const std::uint8_t* p) { return static_cast<float>(detail::rd<std::uint16_t>(p, swap)); }, 2);
      break;
    default:
      throw import_error("unsupported NIfTI datatype " + std::to_string(datatype));
  }
  return grid;
}

inline Tensor<float> center_crop_cube(const Tensor<float>& grid) {
  int nz = grid.dim(0), ny = grid.dim(1), nx = grid.dim(2);
  int s = std::min({nx, ny, nz});
  int ox = (nx - s) / 2, oy = (ny - s) / 2, oz = (nz - s) / 2;
  Tensor<float> out({s, s, s});
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        out.v[static_cast<std::size_t>(x) +
              static_cast<std::size_t>(s) * (y + static_cast<std::size_t>(s) * z)] =
            grid.v[static_cast<std::size_t>(x + ox) +
                   static_cast<std::size_t>(nx) *
                       (y + oy + static_cast<std::size_t>(ny) * (z + oz))];
  return out;
}

// Full adapter: read, crop to a cube, normalize.
inline volcore::Volume3D import_volume(const std::string& path, float body_threshold = 0.05f) {
  Tensor<float> grid = read_nii_grid(path);
  Tensor<float> cube = center_crop_cube(grid);
  volcore::Volume3D v = volcore::normalize_volume(cube, body_threshold);
  v.meta["imported_from"] = path;
  return v;
}

}  // namespace jointad::nifti

#endif  // JOINTAD_NIFTI_HPP

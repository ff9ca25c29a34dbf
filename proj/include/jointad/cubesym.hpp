#ifndef JOINTAD_CUBESYM_HPP
#define JOINTAD_CUBESYM_HPP

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace jointad::cubesym {

// One proper rotation of the cube, stored as a signed axis permutation:
// output axis i reads input axis `axis[i]`, reversed when flip[i] is set.
// The 24 classes enumerate the rotation group; class 0 is the identity.
struct RotationClass {
  int class_id = 0;
  std::array<int, 3> axis = {0, 1, 2};
  std::array<bool, 3> flip = {false, false, false};

  std::array<std::array<int, 3>, 3> matrix() const {
    std::array<std::array<int, 3>, 3> m{};
    for (int i = 0; i < 3; ++i)
      m[static_cast<std::size_t>(i)][static_cast<std::size_t>(axis[static_cast<std::size_t>(i)])] =
          flip[static_cast<std::size_t>(i)] ? -1 : 1;
    return m;
  }

  int determinant() const {
    auto m = matrix();
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  }
};

// All 24 proper rotations: the 48 signed axis permutations filtered to
// determinant +1, enumerated in a fixed order with the identity first.
inline const std::vector<RotationClass>& enumerate_rotations() {
  static const std::vector<RotationClass> table = [] {
    std::vector<RotationClass> out;
    const std::array<std::array<int, 3>, 6> perms = {
        {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
    for (const auto& p : perms)
      for (int s = 0; s < 8; ++s) {
        RotationClass r;
        r.axis = p;
        r.flip = {(s & 1) != 0, (s & 2) != 0, (s & 4) != 0};
        if (r.determinant() == 1) {
          r.class_id = static_cast<int>(out.size());
          out.push_back(r);
        }
      }
    return out;
  }();
  return table;
}

// Output coordinate of input voxel (x,y,z) under the rotation, on a cubic
// grid of the given edge. Exact voxel permutation, no interpolation.
inline void map_coord(const RotationClass& r, int size, int x, int y, int z, int& ox, int& oy,
                      int& oz) {
  const int in[3] = {x, y, z};
  int out[3];
  for (int i = 0; i < 3; ++i) {
    int c = in[r.axis[static_cast<std::size_t>(i)]];
    out[i] = r.flip[static_cast<std::size_t>(i)] ? size - 1 - c : c;
  }
  ox = out[0];
  oy = out[1];
  oz = out[2];
}

// Rotates a cubic scalar grid (x-fastest layout).
template <typename T>
std::vector<T> rotate_grid(const std::vector<T>& grid, int size, const RotationClass& r) {
  if (grid.size() != static_cast<std::size_t>(size) * size * size)
    throw std::invalid_argument("rotate_grid: grid is not size^3");
  std::vector<T> out(grid.size());
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        int ox, oy, oz;
        map_coord(r, size, x, y, z, ox, oy, oz);
        out[static_cast<std::size_t>(ox) +
            static_cast<std::size_t>(size) * (oy + static_cast<std::size_t>(size) * oz)] =
            grid[static_cast<std::size_t>(x) +
                 static_cast<std::size_t>(size) * (y + static_cast<std::size_t>(size) * z)];
      }
  return out;
}

inline RotationClass compose(const RotationClass& a, const RotationClass& b) {
  // apply b first, then a
  RotationClass c;
  for (int i = 0; i < 3; ++i) {
    int j = a.axis[static_cast<std::size_t>(i)];
    c.axis[static_cast<std::size_t>(i)] = b.axis[static_cast<std::size_t>(j)];
    c.flip[static_cast<std::size_t>(i)] =
        a.flip[static_cast<std::size_t>(i)] != b.flip[static_cast<std::size_t>(j)];
  }
  c.class_id = -1;
  return c;
}

inline int find_class(const RotationClass& r) {
  for (const auto& t : enumerate_rotations())
    if (t.axis == r.axis && t.flip == r.flip) return t.class_id;
  return -1;
}

inline RotationClass inverse(const RotationClass& r) {
  RotationClass inv;
  for (int i = 0; i < 3; ++i) {
    int j = r.axis[static_cast<std::size_t>(i)];
    inv.axis[static_cast<std::size_t>(j)] = i;
    inv.flip[static_cast<std::size_t>(j)] = r.flip[static_cast<std::size_t>(i)];
  }
  inv.class_id = find_class(inv);
  return inv;
}

}  // namespace jointad::cubesym

#endif  // JOINTAD_CUBESYM_HPP

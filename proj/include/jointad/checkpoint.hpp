#ifndef JOINTAD_CHECKPOINT_HPP
#define JOINTAD_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "jointad/common.hpp"
#include "jointad/tensor.hpp"

namespace jointad::checkpoint {

// Versioned parameter container:
//   magic "JCKP", version u32
//   meta:   u32 count, (u32 klen, key, u32 vlen, value) ...
//   blocks: u32 count, then per block
//           u32 name length, name, u8 dtype (0 = f32), u32 rank, u32 dims[rank],
//           u64 payload bytes, payload
// Readers skip blocks with unknown dtypes via the payload length.

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, Tensor<float>> blocks;
};

namespace detail {

inline void put_u32(std::string& b, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& b, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

struct Cur {
  const std::uint8_t* p;
  std::size_t n, pos = 0;
  void need(std::size_t k, const char* f) {
    if (pos + k > n)
      throw format_error(std::string("checkpoint ") + f + " truncated: expected " +
                         std::to_string(k) + " bytes, got " + std::to_string(n - pos));
  }
  std::uint32_t u32(const char* f) {
    need(4, f);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(p[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 4;
    return x;
  }
  std::uint64_t u64(const char* f) {
    need(8, f);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(p[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 8;
    return x;
  }
  std::uint8_t u8(const char* f) {
    need(1, f);
    return p[pos++];
  }
  std::string str(std::size_t k, const char* f) {
    need(k, f);
    std::string s(reinterpret_cast<const char*>(p + pos), k);
    pos += k;
    return s;
  }
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::string b;
  b += "JCKP";
  detail::put_u32(b, 1);
  detail::put_u32(b, static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    detail::put_u32(b, static_cast<std::uint32_t>(k.size()));
    b += k;
    detail::put_u32(b, static_cast<std::uint32_t>(v.size()));
    b += v;
  }
  detail::put_u32(b, static_cast<std::uint32_t>(c.blocks.size()));
  for (const auto& [name, t] : c.blocks) {
    detail::put_u32(b, static_cast<std::uint32_t>(name.size()));
    b += name;
    b.push_back('\0');  // dtype 0 = f32
    detail::put_u32(b, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::put_u32(b, static_cast<std::uint32_t>(d));
    detail::put_u64(b, static_cast<std::uint64_t>(t.size() * 4));
    for (float f : t.v) {
      std::uint32_t x;
      std::memcpy(&x, &f, 4);
      detail::put_u32(b, x);
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!out) throw std::runtime_error("save_checkpoint: short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::Cur c{reinterpret_cast<const std::uint8_t*>(buf.data()), buf.size()};
  if (c.str(4, "magic") != "JCKP") throw format_error("checkpoint magic: expected JCKP");
  std::uint32_t version = c.u32("version");
  if (version != 1) throw format_error("checkpoint version " + std::to_string(version));
  Checkpoint out;
  std::uint32_t nmeta = c.u32("meta count");
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = c.str(c.u32("meta key length"), "meta key");
    out.meta[k] = c.str(c.u32("meta value length"), "meta value");
  }
  std::uint32_t nblocks = c.u32("block count");
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    std::string name = c.str(c.u32("block name length"), "block name");
    std::uint8_t dtype = c.u8("block dtype");
    std::uint32_t rank = c.u32("block rank");
    std::vector<int> shape;
    for (std::uint32_t d = 0; d < rank; ++d)
      shape.push_back(static_cast<int>(c.u32("block dim")));
    std::uint64_t bytes = c.u64("block payload length");
    if (dtype != 0) {
      c.need(bytes, "block payload");
      c.pos += bytes;  // unknown dtype: skip
      continue;
    }
    Tensor<float> t(shape);
    if (bytes != t.size() * 4)
      throw format_error("block '" + name + "' payload: expected " + std::to_string(t.size() * 4) +
                         " bytes, got " + std::to_string(bytes));
    for (std::size_t j = 0; j < t.size(); ++j) {
      std::uint32_t x = c.u32("block payload");
      std::memcpy(&t.v[j], &x, 4);
    }
    out.blocks.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace jointad::checkpoint

#endif  // JOINTAD_CHECKPOINT_HPP

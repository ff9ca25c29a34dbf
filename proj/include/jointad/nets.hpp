#ifndef JOINTAD_NETS_HPP
#define JOINTAD_NETS_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "jointad/checkpoint.hpp"
#include "jointad/common.hpp"
#include "jointad/cubesym.hpp"
#include "jointad/graph.hpp"
#include "jointad/optim.hpp"
#include "jointad/rng.hpp"
#include "jointad/tensor.hpp"
#include "jointad/volume.hpp"

namespace jointad::nets {

using graph::Graph;
using volcore::Volume3D;

// Fan-in-scaled uniform init, zero biases.
template <typename T>
void init_uniform(Tensor<T>& t, int fan_in, Rng& rng) {
  double limit = std::sqrt(3.0 / std::max(1, fan_in));
  for (auto& x : t.v) x = static_cast<T>(rng.uniform(-limit, limit));
}

// Binding of a parameter tensor to its leaf node in a live graph.
template <typename T>
using Bindings = std::vector<std::pair<Tensor<T>*, int>>;

// Instance-norm affine parameters for one conv output.
template <typename T>
struct Norm {
  Tensor<T> gamma, beta;
  explicit Norm(int channels = 0)
      : gamma({channels}, T(1)), beta({channels}, T(0)) {}
};

// init markers passed to for_each_param: fan_in > 0 uniform, 0 zeros, -1 ones.
inline constexpr int init_zeros = 0;
inline constexpr int init_ones = -1;

// -------- 3D encoder-decoder --------

struct Net3DConfig {
  int input_size = 32;
  int depth = 3;
  int base_channels = 8;
  int bottleneck_channels = 32;
  int head_hidden = 16;

  int bottleneck_extent() const { return input_size >> depth; }
  // Encoder channel at level i; level depth is the bottleneck.
  int channels(int level) const {
    return level >= depth ? bottleneck_channels : base_channels << level;
  }
  void check() const {
    if (input_size % (1 << depth) != 0)
      throw std::invalid_argument("net3d: input_size must be divisible by 2^depth");
    if (bottleneck_extent() < 1) throw std::invalid_argument("net3d: depth too large");
  }
};

template <typename T>
struct Net3DOutputs {
  int seg = -1;         // [1,1,S,S,S] probabilities
  int seg_logits = -1;  // pre-sigmoid, for stable loss evaluation
  int cls = -1;         // [1,1] probability
  int cls_logits = -1;
  int latent = -1;      // [1,F,b,b,b]
  int decoder = -1;     // [1,c0,S,S,S] features feeding the output heads
};

template <typename T>
struct Net3D {
  Net3DConfig cfg;
  Tensor<T> stem_w, stem_b;
  Norm<T> stem_n;
  std::vector<Tensor<T>> down_w, down_b, refine_w, refine_b;
  std::vector<Norm<T>> down_n, refine_n;
  std::vector<Tensor<T>> up_point_w, up_point_b, up_conv_w, up_conv_b;
  std::vector<Norm<T>> up_point_n, up_conv_n;
  Tensor<T> seg_w, seg_b;
  Tensor<T> cls1_w, cls1_b, cls2_w, cls2_b, cls3_w, cls3_b;

  explicit Net3D(Net3DConfig c = {}) : cfg(c) {
    cfg.check();
    int c0 = cfg.channels(0);
    stem_w = Tensor<T>({c0, 1, 3, 3, 3});
    stem_b = Tensor<T>({c0});
    stem_n = Norm<T>(c0);
    for (int i = 0; i < cfg.depth; ++i) {
      int ci = cfg.channels(i), co = cfg.channels(i + 1);
      down_w.push_back(Tensor<T>({co, ci, 3, 3, 3}));
      down_b.push_back(Tensor<T>({co}));
      down_n.push_back(Norm<T>(co));
      refine_w.push_back(Tensor<T>({co, co, 3, 3, 3}));
      refine_b.push_back(Tensor<T>({co}));
      refine_n.push_back(Norm<T>(co));
    }
    for (int i = cfg.depth - 1; i >= 0; --i) {
      int cu = cfg.channels(i + 1), cs = cfg.channels(i);
      up_point_w.push_back(Tensor<T>({cs, cu + cs, 1, 1, 1}));
      up_point_b.push_back(Tensor<T>({cs}));
      up_point_n.push_back(Norm<T>(cs));
      if (i > 0) {
        // No 3x3x3 conv at full resolution; the pointwise mix over the stem
        // skip plus upsampled context feeds the segmentation head directly.
        up_conv_w.push_back(Tensor<T>({cs, cs, 3, 3, 3}));
        up_conv_b.push_back(Tensor<T>({cs}));
        up_conv_n.push_back(Norm<T>(cs));
      }
    }
    seg_w = Tensor<T>({1, c0, 1, 1, 1});
    seg_b = Tensor<T>({1});
    int F = cfg.bottleneck_channels, h = cfg.head_hidden;
    cls1_w = Tensor<T>({h, F});
    cls1_b = Tensor<T>({h});
    cls2_w = Tensor<T>({h, h});
    cls2_b = Tensor<T>({h});
    cls3_w = Tensor<T>({1, h});
    cls3_b = Tensor<T>({1});
  }

  void init(Rng& rng) {
    for_each_param([&rng](const std::string&, Tensor<T>& t, int fan_in) {
      if (fan_in == init_zeros)
        t.fill(T(0));
      else if (fan_in == init_ones)
        t.fill(T(1));
      else
        init_uniform(t, fan_in, rng);
    });
  }

  void for_each_param(const std::function<void(const std::string&, Tensor<T>&, int)>& fn) {
    auto norm = [&fn](const std::string& p, Norm<T>& n) {
      fn(p + ".g", n.gamma, init_ones);
      fn(p + ".beta", n.beta, init_zeros);
    };
    fn("stem.w", stem_w, 27);
    fn("stem.b", stem_b, init_zeros);
    norm("stem", stem_n);
    for (int i = 0; i < cfg.depth; ++i) {
      std::string p = "down" + std::to_string(i);
      fn(p + ".w", down_w[static_cast<std::size_t>(i)], cfg.channels(i) * 27);
      fn(p + ".b", down_b[static_cast<std::size_t>(i)], init_zeros);
      norm(p, down_n[static_cast<std::size_t>(i)]);
      p = "refine" + std::to_string(i);
      fn(p + ".w", refine_w[static_cast<std::size_t>(i)], cfg.channels(i + 1) * 27);
      fn(p + ".b", refine_b[static_cast<std::size_t>(i)], init_zeros);
      norm(p, refine_n[static_cast<std::size_t>(i)]);
    }
    for (std::size_t j = 0; j < up_point_w.size(); ++j) {
      int level = cfg.depth - 1 - static_cast<int>(j);
      std::string p = "up" + std::to_string(level);
      fn(p + ".point.w", up_point_w[j], cfg.channels(level + 1) + cfg.channels(level));
      fn(p + ".point.b", up_point_b[j], init_zeros);
      norm(p + ".point", up_point_n[j]);
      if (level > 0) {
        fn(p + ".conv.w", up_conv_w[j], cfg.channels(level) * 27);
        fn(p + ".conv.b", up_conv_b[j], init_zeros);
        norm(p + ".conv", up_conv_n[j]);
      }
    }
    fn("seg.w", seg_w, cfg.channels(0));
    fn("seg.b", seg_b, init_zeros);
    fn("cls1.w", cls1_w, cfg.bottleneck_channels);
    fn("cls1.b", cls1_b, init_zeros);
    fn("cls2.w", cls2_w, cfg.head_hidden);
    fn("cls2.b", cls2_b, init_zeros);
    fn("cls3.w", cls3_w, cfg.head_hidden);
    fn("cls3.b", cls3_b, init_zeros);
  }

  struct ForwardOptions {
    bool zero_bottleneck = false;  // decoder sees zeros; skips stay live
  };

  Net3DOutputs<T> forward(Graph<T>& g, const Tensor<T>& volume, Bindings<T>& bind,
                          ForwardOptions opt = {}) {
    if (volume.rank() != 5 || volume.dim(2) != cfg.input_size ||
        volume.dim(3) != cfg.input_size || volume.dim(4) != cfg.input_size)
      throw std::invalid_argument("net3d: input shape " + shape_str(volume.shape) +
                                  " does not match input_size " + std::to_string(cfg.input_size));
    auto P = [&](Tensor<T>& t) {
      int id = g.param(t);
      bind.emplace_back(&t, id);
      return id;
    };
    auto IN = [&](int id, Norm<T>& n) {
      return g.instance_norm(id, P(n.gamma), P(n.beta));
    };
    int x = g.leaf(volume);
    int h = g.silu(IN(g.conv3d(x, P(stem_w), P(stem_b), 1), stem_n));
    std::vector<int> enc;
    enc.push_back(h);
    for (int i = 0; i < cfg.depth; ++i) {
      h = g.silu(IN(g.conv3d(h, P(down_w[static_cast<std::size_t>(i)]), P(down_b[static_cast<std::size_t>(i)]), 2),
                    down_n[static_cast<std::size_t>(i)]));
      h = g.silu(IN(g.conv3d(h, P(refine_w[static_cast<std::size_t>(i)]), P(refine_b[static_cast<std::size_t>(i)]), 1),
                    refine_n[static_cast<std::size_t>(i)]));
      if (i < cfg.depth - 1) enc.push_back(h);
    }
    Net3DOutputs<T> out;
    out.latent = h;
    int hd = opt.zero_bottleneck ? g.affine(h, T(0), T(0)) : h;
    for (std::size_t j = 0; j < up_point_w.size(); ++j) {
      int level = cfg.depth - 1 - static_cast<int>(j);
      hd = g.upsample2x3d(hd);
      hd = g.concat_ch(hd, enc[static_cast<std::size_t>(level)]);
      hd = g.silu(IN(g.conv3d(hd, P(up_point_w[j]), P(up_point_b[j]), 1), up_point_n[j]));
      if (level > 0)
        hd = g.silu(IN(g.conv3d(hd, P(up_conv_w[j]), P(up_conv_b[j]), 1), up_conv_n[j]));
    }
    out.decoder = hd;
    out.seg_logits = g.conv3d(hd, P(seg_w), P(seg_b), 1);
    out.seg = g.sigmoid(out.seg_logits);
    int q = g.gap(h);  // activated bottleneck features feed the head
    q = g.silu(g.dense(q, P(cls1_w), P(cls1_b)));
    q = g.silu(g.dense(q, P(cls2_w), P(cls2_b)));
    out.cls_logits = g.dense(q, P(cls3_w), P(cls3_b));
    out.cls = g.sigmoid(out.cls_logits);
    return out;
  }

  // Encoder-only pass for patch inputs (index pretask). Returns the GAP of
  // the bottleneck, shape [N, F]. Patch edge must be divisible by 2^depth.
  int encode_gap(Graph<T>& g, const Tensor<T>& patch, Bindings<T>& bind) {
    auto P = [&](Tensor<T>& t) {
      int id = g.param(t);
      bind.emplace_back(&t, id);
      return id;
    };
    auto IN = [&](int id, Norm<T>& n) {
      return g.instance_norm(id, P(n.gamma), P(n.beta));
    };
    int h = g.silu(IN(g.conv3d(g.leaf(patch), P(stem_w), P(stem_b), 1), stem_n));
    for (int i = 0; i < cfg.depth; ++i) {
      h = g.silu(IN(g.conv3d(h, P(down_w[static_cast<std::size_t>(i)]), P(down_b[static_cast<std::size_t>(i)]), 2),
                    down_n[static_cast<std::size_t>(i)]));
      h = g.silu(IN(g.conv3d(h, P(refine_w[static_cast<std::size_t>(i)]), P(refine_b[static_cast<std::size_t>(i)]), 1),
                    refine_n[static_cast<std::size_t>(i)]));
    }
    return g.gap(h);
  }
};

// -------- 2D residual slice encoder --------

struct Net2DConfig {
  int input_size = 64;
  int stages = 3;
  int base_channels = 8;
  int head_hidden = 16;

  int latent_extent() const { return input_size >> stages; }
  int latent_channels() const { return base_channels << (stages - 1); }
  int channels(int stage) const { return base_channels << stage; }
  void check() const {
    if (input_size % (1 << stages) != 0)
      throw std::invalid_argument("net2d: input_size must be divisible by 2^stages");
    if (latent_extent() < 1) throw std::invalid_argument("net2d: too many stages");
  }
};

template <typename T>
struct Net2DOutputs {
  int scores = -1;        // [N,1] per-slice probabilities
  int score_logits = -1;  // pre-sigmoid
  int stacked = -1;       // [N,F2,p,p] pre-pooling latents in slice order
  int features = -1;      // [N,F2,p,p] activated final features (head input)
};

template <typename T>
struct Net2D {
  Net2DConfig cfg;
  Tensor<T> stem_w, stem_b;
  Norm<T> stem_n;
  std::vector<Tensor<T>> down_w, down_b;            // stages-1 stride-2 convs
  std::vector<Tensor<T>> blk_a_w, blk_a_b, blk_b_w, blk_b_b;  // one residual block per stage
  std::vector<Norm<T>> down_n, blk_a_n, blk_b_n;
  Tensor<T> cls1_w, cls1_b, cls2_w, cls2_b;

  explicit Net2D(Net2DConfig c = {}) : cfg(c) {
    cfg.check();
    int c0 = cfg.channels(0);
    stem_w = Tensor<T>({c0, 1, 3, 3});
    stem_b = Tensor<T>({c0});
    stem_n = Norm<T>(c0);
    // Stage 0 is the stride-2 stem alone; each later stage is a stride-2
    // down conv plus one residual block.
    for (int s = 1; s < cfg.stages; ++s) {
      int cs = cfg.channels(s);
      down_w.push_back(Tensor<T>({cs, cfg.channels(s - 1), 3, 3}));
      down_b.push_back(Tensor<T>({cs}));
      down_n.push_back(Norm<T>(cs));
      blk_a_w.push_back(Tensor<T>({cs, cs, 3, 3}));
      blk_a_b.push_back(Tensor<T>({cs}));
      blk_a_n.push_back(Norm<T>(cs));
      blk_b_w.push_back(Tensor<T>({cs, cs, 3, 3}));
      blk_b_b.push_back(Tensor<T>({cs}));
      blk_b_n.push_back(Norm<T>(cs));
    }
    int F2 = cfg.latent_channels(), h = cfg.head_hidden;
    cls1_w = Tensor<T>({h, F2});
    cls1_b = Tensor<T>({h});
    cls2_w = Tensor<T>({1, h});
    cls2_b = Tensor<T>({1});
  }

  void init(Rng& rng) {
    for_each_param([&rng](const std::string&, Tensor<T>& t, int fan_in) {
      if (fan_in == init_zeros)
        t.fill(T(0));
      else if (fan_in == init_ones)
        t.fill(T(1));
      else
        init_uniform(t, fan_in, rng);
    });
  }

  void for_each_param(const std::function<void(const std::string&, Tensor<T>&, int)>& fn) {
    auto norm = [&fn](const std::string& p, Norm<T>& n) {
      fn(p + ".g", n.gamma, init_ones);
      fn(p + ".beta", n.beta, init_zeros);
    };
    fn("stem.w", stem_w, 9);
    fn("stem.b", stem_b, init_zeros);
    norm("stem", stem_n);
    for (int s = 1; s < cfg.stages; ++s) {
      std::string p = "stage" + std::to_string(s);
      fn(p + ".down.w", down_w[static_cast<std::size_t>(s - 1)], cfg.channels(s - 1) * 9);
      fn(p + ".down.b", down_b[static_cast<std::size_t>(s - 1)], init_zeros);
      norm(p + ".down", down_n[static_cast<std::size_t>(s - 1)]);
      fn(p + ".a.w", blk_a_w[static_cast<std::size_t>(s - 1)], cfg.channels(s) * 9);
      fn(p + ".a.b", blk_a_b[static_cast<std::size_t>(s - 1)], init_zeros);
      norm(p + ".a", blk_a_n[static_cast<std::size_t>(s - 1)]);
      fn(p + ".b.w", blk_b_w[static_cast<std::size_t>(s - 1)], cfg.channels(s) * 9);
      fn(p + ".b.b", blk_b_b[static_cast<std::size_t>(s - 1)], init_zeros);
      norm(p + ".b", blk_b_n[static_cast<std::size_t>(s - 1)]);
    }
    fn("cls1.w", cls1_w, cfg.latent_channels());
    fn("cls1.b", cls1_b, init_zeros);
    fn("cls2.w", cls2_w, cfg.head_hidden);
    fn("cls2.b", cls2_b, init_zeros);
  }

  // Shared-weight encoder over a batch of slices [N,1,S,S].
  Net2DOutputs<T> forward(Graph<T>& g, const Tensor<T>& slices, Bindings<T>& bind) {
    if (slices.rank() != 4 || slices.dim(1) != 1 || slices.dim(2) != cfg.input_size ||
        slices.dim(3) != cfg.input_size)
      throw std::invalid_argument("net2d: slice batch shape " + shape_str(slices.shape) +
                                  " does not match input_size " + std::to_string(cfg.input_size));
    auto P = [&](Tensor<T>& t) {
      int id = g.param(t);
      bind.emplace_back(&t, id);
      return id;
    };
    auto IN = [&](int id, Norm<T>& n) {
      return g.instance_norm(id, P(n.gamma), P(n.beta));
    };
    int h = g.silu(IN(g.conv2d(g.leaf(slices), P(stem_w), P(stem_b), 2), stem_n));
    for (int s = 1; s < cfg.stages; ++s) {
      h = g.silu(IN(g.conv2d(h, P(down_w[static_cast<std::size_t>(s - 1)]), P(down_b[static_cast<std::size_t>(s - 1)]), 2),
                    down_n[static_cast<std::size_t>(s - 1)]));
      int a = g.silu(IN(g.conv2d(h, P(blk_a_w[static_cast<std::size_t>(s - 1)]), P(blk_a_b[static_cast<std::size_t>(s - 1)]), 1),
                        blk_a_n[static_cast<std::size_t>(s - 1)]));
      int b = IN(g.conv2d(a, P(blk_b_w[static_cast<std::size_t>(s - 1)]), P(blk_b_b[static_cast<std::size_t>(s - 1)]), 1),
                 blk_b_n[static_cast<std::size_t>(s - 1)]);
      h = g.silu(g.add(b, h));
    }
    Net2DOutputs<T> out;
    out.stacked = h;  // pre-pooling feature map, in slice order
    out.features = h;
    int q = g.gap(h);
    q = g.silu(g.dense(q, P(cls1_w), P(cls1_b)));
    out.score_logits = g.dense(q, P(cls2_w), P(cls2_b));
    out.scores = g.sigmoid(out.score_logits);
    return out;
  }
};

// -------- checkpoint glue --------

template <typename NetT>
checkpoint::Checkpoint net_to_checkpoint(NetT& net, const std::string& kind) {
  checkpoint::Checkpoint c;
  c.meta["net"] = kind;
  net.for_each_param([&c, &kind](const std::string& name, Tensor<float>& t, int) {
    c.blocks[kind + "." + name] = t;
  });
  return c;
}

// Loads matching blocks; missing blocks are an error, unknown extra blocks
// are ignored (forward compatibility).
template <typename NetT>
void net_from_checkpoint(NetT& net, const checkpoint::Checkpoint& c, const std::string& kind) {
  net.for_each_param([&c, &kind](const std::string& name, Tensor<float>& t, int) {
    auto it = c.blocks.find(kind + "." + name);
    if (it == c.blocks.end())
      throw config_error("checkpoint missing block '" + kind + "." + name + "'");
    if (it->second.shape != t.shape)
      throw config_error("checkpoint block '" + kind + "." + name + "' shape " +
                         shape_str(it->second.shape) + " != expected " + shape_str(t.shape));
    t = it->second;
  });
}

// -------- axis-free slicing --------

struct SliceBatch {
  Tensor<float> slices;  // [N,1,S,S], slice k = z-plane k of the rotated volume
  int axis = 2;          // 0=x, 1=y, 2=z
  int rotation_class = 0;
};

// Proper rotation taking the chosen axis onto z. Slicing the rotated volume
// along z then equals slicing the original along `axis`.
inline const cubesym::RotationClass& axis_to_z_rotation(int axis) {
  static const std::array<cubesym::RotationClass, 3> table = [] {
    std::array<cubesym::RotationClass, 3> t{};
    cubesym::RotationClass rx;  // 90 deg about y: (x,y,z) -> (-z,y,x)
    rx.axis = {2, 1, 0};
    rx.flip = {true, false, false};
    rx.class_id = cubesym::find_class(rx);
    cubesym::RotationClass ry;  // 90 deg about x: (x,y,z) -> (x,-z,y)
    ry.axis = {0, 2, 1};
    ry.flip = {false, true, false};
    ry.class_id = cubesym::find_class(ry);
    t[0] = rx;
    t[1] = ry;
    t[2] = cubesym::enumerate_rotations()[0];
    return t;
  }();
  return table[static_cast<std::size_t>(axis)];
}

inline SliceBatch slice_grid(const std::vector<float>& grid, int size, int axis) {
  if (axis < 0 || axis > 2) throw std::invalid_argument("slice_grid: axis must be 0..2");
  const auto& rot = axis_to_z_rotation(axis);
  std::vector<float> rotated = cubesym::rotate_grid(grid, size, rot);
  SliceBatch b;
  b.axis = axis;
  b.rotation_class = rot.class_id;
  b.slices = Tensor<float>({size, 1, size, size});
  std::copy(rotated.begin(), rotated.end(), b.slices.v.begin());
  return b;
}

// Uniform axis choice via whole-volume rotation.
inline SliceBatch axis_free_slice(const Volume3D& v, Rng& rng) {
  return slice_grid(v.voxels, v.size, rng.range(0, 2));
}

// Inverse of slice_grid: stacks the slices and undoes the rotation.
inline std::vector<float> restack_slices(const SliceBatch& b) {
  int size = b.slices.dim(0);
  std::vector<float> stacked(b.slices.v.begin(), b.slices.v.end());
  const auto& rots = cubesym::enumerate_rotations();
  cubesym::RotationClass inv = cubesym::inverse(rots[static_cast<std::size_t>(b.rotation_class)]);
  return cubesym::rotate_grid(stacked, size, inv);
}

// -------- 2D latent shape reduction --------

enum class ReduceMode { max, mean };

// Graph form used inside training: [N,F2,p,p] -> [F,b,b,b] where the slice
// axis becomes the depth axis. Sections reduce by max (or mean for the
// ablation); spatial axes use the same section rule.
template <typename T>
int reduce_latent_node(Graph<T>& g, int stacked, int b, int F, ReduceMode mode) {
  bool mean = mode == ReduceMode::mean;
  int h = g.section_reduce(stacked, 0, b, mean);
  h = g.section_reduce(h, 1, F, mean);
  h = g.section_reduce(h, 2, b, mean);
  h = g.section_reduce(h, 3, b, mean);
  return g.permute(h, {1, 0, 2, 3});  // [b,F,b,b] -> [F,b,b,b]
}

// Value form for direct use and tests.
inline Tensor<float> reduce_latent(const Tensor<float>& stacked, int b, int F,
                                   ReduceMode mode = ReduceMode::max) {
  if (stacked.rank() != 4) throw std::invalid_argument("reduce_latent: expected [N,F2,p,p]");
  Graph<float> g;
  int x = g.leaf(stacked);
  return g.val(reduce_latent_node(g, x, b, F, mode));
}

// -------- procedural texture pretraining (2D proxy task) --------

inline constexpr int texture_family_count = 8;

// Grayscale 2D texture in [0,1] from one of 8 procedural families.
inline Tensor<float> make_texture(int family, int size, Rng& rng) {
  Tensor<float> img({size, size});
  double inv = 1.0 / size;
  auto idx = [size](int x, int y) { return static_cast<std::size_t>(y) * size + x; };
  const double tau = 6.283185307179586477;
  switch (family) {
    case 0: {  // oriented stripes
      double th = rng.uniform(0.0, tau), f = rng.uniform(3.0, 9.0), ph = rng.uniform(0.0, tau);
      double cx = std::cos(th) * f * tau, cy = std::sin(th) * f * tau;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          img.v[idx(x, y)] = static_cast<float>(0.5 + 0.5 * std::sin(cx * x * inv + cy * y * inv + ph));
      break;
    }
    case 1: {  // checkerboard-like product of waves
      double f1 = rng.uniform(2.0, 7.0), f2 = rng.uniform(2.0, 7.0);
      double p1 = rng.uniform(0.0, tau), p2 = rng.uniform(0.0, tau);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          img.v[idx(x, y)] = static_cast<float>(
              0.5 + 0.5 * std::sin(tau * f1 * x * inv + p1) * std::sin(tau * f2 * y * inv + p2));
      break;
    }
    case 2: {  // soft blobs
      int nb = rng.range(4, 8);
      std::vector<std::array<double, 3>> blobs;
      for (int i = 0; i < nb; ++i)
        blobs.push_back({rng.uniform(), rng.uniform(), rng.uniform(0.05, 0.15)});
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double acc = 0;
          for (auto& bl : blobs) {
            double dx = x * inv - bl[0], dy = y * inv - bl[1];
            acc += std::exp(-(dx * dx + dy * dy) / (2 * bl[2] * bl[2]));
          }
          img.v[idx(x, y)] = static_cast<float>(std::min(1.0, acc));
        }
      break;
    }
    case 3: {  // linear gradient
      double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0), c = rng.uniform();
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double vv = c + gx * (x * inv - 0.5) + gy * (y * inv - 0.5);
          img.v[idx(x, y)] = static_cast<float>(std::clamp(vv, 0.0, 1.0));
        }
      break;
    }
    case 4: {  // concentric rings
      double cx = rng.uniform(0.3, 0.7), cy = rng.uniform(0.3, 0.7);
      double f = rng.uniform(4.0, 12.0), ph = rng.uniform(0.0, tau);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double r = std::hypot(x * inv - cx, y * inv - cy);
          img.v[idx(x, y)] = static_cast<float>(0.5 + 0.5 * std::sin(tau * f * r + ph));
        }
      break;
    }
    case 5: {  // dot lattice
      int cells = rng.range(4, 8);
      double rad = rng.uniform(0.2, 0.35) / cells;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double u = std::fmod(x * inv * cells, 1.0) - 0.5;
          double w = std::fmod(y * inv * cells, 1.0) - 0.5;
          double d = std::hypot(u / (rad * cells), w / (rad * cells));
          img.v[idx(x, y)] = static_cast<float>(std::clamp(1.5 - d, 0.0, 1.0));
        }
      break;
    }
    case 6: {  // sheared waves
      double f1 = rng.uniform(3.0, 8.0), f2 = rng.uniform(1.0, 4.0), a = rng.uniform(0.5, 2.0);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          img.v[idx(x, y)] = static_cast<float>(
              0.5 + 0.5 * std::sin(tau * f1 * x * inv + a * std::sin(tau * f2 * y * inv)));
      break;
    }
    default: {  // smooth value noise
      const int n = 7;
      std::vector<double> lattice(static_cast<std::size_t>(n) * n * n, 0.0);
      for (int i = 0; i < n * n; ++i) lattice[static_cast<std::size_t>(i)] = rng.uniform();
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double gx = x * inv * (n - 1), gy = y * inv * (n - 1);
          int x0 = static_cast<int>(gx), y0 = static_cast<int>(gy);
          double fx = gx - x0, fy = gy - y0;
          auto at = [&](int i, int j) {
            return lattice[static_cast<std::size_t>(std::min(j, n - 1)) * n + std::min(i, n - 1)];
          };
          double v0 = at(x0, y0) * (1 - fx) + at(x0 + 1, y0) * fx;
          double v1 = at(x0, y0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1) * fx;
          img.v[idx(x, y)] = static_cast<float>(v0 * (1 - fy) + v1 * fy);
        }
      break;
    }
  }
  for (auto& x : img.v)
    x = static_cast<float>(std::clamp(x + 0.02 * rng.uniform(-1.0, 1.0), 0.0, 1.0));
  return img;
}

struct ProxyPretrainResult {
  bool converged = false;
  double holdout_accuracy = 0.0;
  int steps_run = 0;
};

namespace detail {

template <typename T>
Tensor<T> texture_batch(int batch, int size, Rng& rng, std::vector<int>& labels) {
  Tensor<T> x({batch, 1, size, size});
  labels.resize(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) {
    int fam = rng.range(0, texture_family_count - 1);
    labels[static_cast<std::size_t>(i)] = fam;
    Tensor<float> img = make_texture(fam, size, rng);
    for (std::size_t j = 0; j < img.size(); ++j)
      x.v[static_cast<std::size_t>(i) * img.size() + j] = static_cast<T>(img.v[j]);
  }
  return x;
}

}  // namespace detail

// Trains the 2D encoder on procedural texture classification until held-out
// accuracy clears `target_accuracy` (checked periodically) or the step
// budget runs out. The softmax head is transient.
inline ProxyPretrainResult pretrain2d_proxy(Net2D<float>& net, std::uint64_t seed, int max_steps,
                                            int batch = 16, double target_accuracy = 0.8,
                                            double lr = 1e-3) {
  Rng data_rng(seed ^ 0x7465787475726573ULL);
  Rng init_rng(seed ^ 0x686561640aULL);
  int F2 = net.cfg.latent_channels();
  Tensor<float> head_w({texture_family_count, F2}), head_b({texture_family_count});
  init_uniform(head_w, F2, init_rng);

  optim::ParamGroup<float> group;
  net.for_each_param([&group](const std::string& name, Tensor<float>& t, int) {
    group.add(name, &t);
  });
  group.add("proxy.head.w", &head_w);
  group.add("proxy.head.b", &head_b);
  optim::Adam<float> adam;

  auto holdout_acc = [&](std::uint64_t eval_seed) {
    Rng erng(eval_seed);
    int correct = 0, total = 0;
    for (int rep = 0; rep < 8; ++rep) {
      std::vector<int> labels;
      Tensor<float> x = detail::texture_batch<float>(32, net.cfg.input_size, erng, labels);
      Graph<float> g;
      Bindings<float> bind;
      auto out = net.forward(g, x, bind);
      int q = g.gap(out.features);
      int logits = g.dense(q, g.leaf(head_w), g.leaf(head_b));
      const Tensor<float>& lv = g.val(logits);
      for (int i = 0; i < 32; ++i) {
        int best = 0;
        for (int k = 1; k < texture_family_count; ++k)
          if (lv.v[static_cast<std::size_t>(i) * texture_family_count + k] >
              lv.v[static_cast<std::size_t>(i) * texture_family_count + best])
            best = k;
        correct += best == labels[static_cast<std::size_t>(i)] ? 1 : 0;
        ++total;
      }
    }
    return static_cast<double>(correct) / total;
  };

  ProxyPretrainResult res;
  const int eval_every = 100;
  for (int step = 1; step <= max_steps; ++step) {
    std::vector<int> labels;
    Tensor<float> x = detail::texture_batch<float>(batch, net.cfg.input_size, data_rng, labels);
    Graph<float> g;
    Bindings<float> bind;
    auto out = net.forward(g, x, bind);
    int q = g.gap(out.features);
    int hid = g.param(head_w);
    int hbd = g.param(head_b);
    bind.emplace_back(&head_w, hid);
    bind.emplace_back(&head_b, hbd);
    int loss = g.softmax_ce(g.dense(q, hid, hbd), labels);
    g.backward(loss);
    group.zero_grads();
    for (auto& [ptr, nid] : bind) {
      for (std::size_t gi = 0; gi < group.size(); ++gi)
        if (group.params[gi] == ptr) {
          const Tensor<float>& gg = g.grad(nid);
          for (std::size_t j = 0; j < gg.size(); ++j) group.grads[gi].v[j] += gg.v[j];
          break;
        }
    }
    adam.step(group, lr);
    res.steps_run = step;
    if (step % eval_every == 0 || step == max_steps) {
      res.holdout_accuracy = holdout_acc(seed ^ 0x6576616cULL);
      if (res.holdout_accuracy > target_accuracy) {
        res.converged = true;
        break;
      }
    }
  }
  return res;
}

}  // namespace jointad::nets

#endif  // JOINTAD_NETS_HPP

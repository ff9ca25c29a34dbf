#ifndef JOINTAD_GRAPH_HPP
#define JOINTAD_GRAPH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <utility>
#include <vector>

#include "jointad/common.hpp"
#include "jointad/parallel.hpp"
#include "jointad/tensor.hpp"

namespace jointad::graph {

// Reverse-mode tape. Nodes are appended by op builders; backward() walks the
// tape once in reverse. Templated on the scalar so the same kernels serve
// float training and double-precision gradient checks.
template <typename T>
class Graph {
 public:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    std::function<void()> back;
    bool needs_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  int leaf(Tensor<T> t, bool needs_grad = false) {
    Node n;
    n.val = std::move(t);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int param(const Tensor<T>& t) { return leaf(t, true); }

  const Tensor<T>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }
  const Tensor<T>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  T scalar(int id) const { return nodes_[static_cast<std::size_t>(id)].val.v[0]; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  void backward(int loss) {
    Node& ln = nodes_[static_cast<std::size_t>(loss)];
    if (ln.val.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    for (auto& n : nodes_)
      if (n.needs_grad && n.grad.size() != n.val.size()) n.grad = Tensor<T>(n.val.shape);
    if (!ln.needs_grad) return;  // nothing depends on parameters
    ln.grad.v[0] = T(1);
    for (int i = loss; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.needs_grad && n.back) n.back();
    }
  }

  // ---- elementwise ----

  int silu(int x) {
    const Tensor<T>& xv = val(x);
    Tensor<T> out(xv.shape);
    std::vector<T> sig(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      T s = sigmoid_s(xv.v[i]);
      sig[i] = s;
      out.v[i] = xv.v[i] * s;
    }
    int id = leaf(std::move(out), needs_grad(x));
    if (needs_grad(x))
      node(id).back = [this, x, id, sig = std::move(sig)] {
        Node& xn = node(x);
        Node& on = node(id);
        for (std::size_t i = 0; i < xn.val.size(); ++i) {
          T s = sig[i];
          xn.grad.v[i] += on.grad.v[i] * (s + xn.val.v[i] * s * (T(1) - s));
        }
      };
    return id;
  }

  int sigmoid(int x) {
    const Tensor<T>& xv = val(x);
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) out.v[i] = sigmoid_s(xv.v[i]);
    int id = leaf(std::move(out), needs_grad(x));
    if (needs_grad(x))
      node(id).back = [this, x, id] {
        Node& xn = node(x);
        Node& on = node(id);
        for (std::size_t i = 0; i < xn.val.size(); ++i) {
          T y = on.val.v[i];
          xn.grad.v[i] += on.grad.v[i] * y * (T(1) - y);
        }
      };
    return id;
  }

  int relu(int x) {
    const Tensor<T>& xv = val(x);
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) out.v[i] = xv.v[i] > T(0) ? xv.v[i] : T(0);
    int id = leaf(std::move(out), needs_grad(x));
    if (needs_grad(x))
      node(id).back = [this, x, id] {
        Node& xn = node(x);
        Node& on = node(id);
        for (std::size_t i = 0; i < xn.val.size(); ++i)
          if (xn.val.v[i] > T(0)) xn.grad.v[i] += on.grad.v[i];
      };
    return id;
  }

  int add(int a, int b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    if (av.shape != bv.shape) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out(av.shape);
    for (std::size_t i = 0; i < av.size(); ++i) out.v[i] = av.v[i] + bv.v[i];
    int id = leaf(std::move(out), needs_grad(a) || needs_grad(b));
    node(id).back = [this, a, b, id] {
      Node& on = node(id);
      if (node(a).needs_grad)
        for (std::size_t i = 0; i < on.val.size(); ++i) node(a).grad.v[i] += on.grad.v[i];
      if (node(b).needs_grad)
        for (std::size_t i = 0; i < on.val.size(); ++i) node(b).grad.v[i] += on.grad.v[i];
    };
    return id;
  }

  int affine(int x, T k, T c) {
    const Tensor<T>& xv = val(x);
    Tensor<T> out(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) out.v[i] = k * xv.v[i] + c;
    int id = leaf(std::move(out), needs_grad(x));
    if (needs_grad(x))
      node(id).back = [this, x, id, k] {
        Node& xn = node(x);
        Node& on = node(id);
        for (std::size_t i = 0; i < xn.val.size(); ++i) xn.grad.v[i] += k * on.grad.v[i];
      };
    return id;
  }

  int stopgrad(int x) {
    return leaf(val(x), false);
  }

  int reshape(int x, std::vector<int> shape) {
    Tensor<T> out = val(x).reshaped(std::move(shape));
    int id = leaf(std::move(out), needs_grad(x));
    if (needs_grad(x))
      node(id).back = [this, x, id] {
        Node& xn = node(x);
        Node& on = node(id);
        for (std::size_t i = 0; i < xn.val.size(); ++i) xn.grad.v[i] += on.grad.v[i];
      };
    return id;
  }

  // Weighted sum of scalar nodes.
  int lincomb(std::vector<std::pair<T, int>> terms) {
    T acc = T(0);
    bool ng = false;
    for (auto& [w, t] : terms) {
      acc += w * scalar(t);
      ng = ng || needs_grad(t);
    }
    Tensor<T> out({1});
    out.v[0] = acc;
    int id = leaf(std::move(out), ng);
    if (ng)
      node(id).back = [this, terms, id] {
        T g = node(id).grad.v[0];
        for (auto& [w, t] : terms)
          if (node(t).needs_grad) node(t).grad.v[0] += w * g;
      };
    return id;
  }

  // ---- structure ----

  int permute(int x, std::vector<int> perm) {
    const Tensor<T>& xv = val(x);
    int r = xv.rank();
    if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("permute: rank mismatch");
    std::vector<int> oshape(perm.size());
    for (int i = 0; i < r; ++i) oshape[static_cast<std::size_t>(i)] = xv.dim(perm[static_cast<std::size_t>(i)]);
    std::vector<std::size_t> xstr = strides(xv.shape), ostr = strides(oshape);
    Tensor<T> out(oshape);
    std::size_t n = xv.size();
    std::vector<std::size_t> map(n);
    for (std::size_t oi = 0; oi < n; ++oi) {
      std::size_t rem = oi, xi = 0;
      for (int d = 0; d < r; ++d) {
        std::size_t c = rem / ostr[static_cast<std::size_t>(d)];
        rem %= ostr[static_cast<std::size_t>(d)];
        xi += c * xstr[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];
      }
      out.v[oi] = xv.v[xi];
      map[oi] = xi;
    }
    int id = leaf(std::move(out), needs_grad(x));
    if (needs_grad(x))
      node(id).back = [this, x, id, map = std::move(map)] {
        Node& xn = node(x);
        Node& on = node(id);
        for (std::size_t oi = 0; oi < map.size(); ++oi) xn.grad.v[map[oi]] += on.grad.v[oi];
      };
    return id;
  }

  int concat_ch(int a, int b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    if (av.rank() != bv.rank() || av.rank() < 2)
      throw std::invalid_argument("concat_ch: rank mismatch");
    for (int d = 0; d < av.rank(); ++d)
      if (d != 1 && av.dim(d) != bv.dim(d))
        throw std::invalid_argument("concat_ch: non-channel dims differ");
    std::vector<int> oshape = av.shape;
    oshape[1] = av.dim(1) + bv.dim(1);
    Tensor<T> out(oshape);
    std::size_t spatial = 1;
    for (int d = 2; d < av.rank(); ++d) spatial *= static_cast<std::size_t>(av.dim(d));
    int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1);
    for (int n = 0; n < N; ++n) {
      std::copy_n(av.data() + static_cast<std::size_t>(n) * Ca * spatial, static_cast<std::size_t>(Ca) * spatial,
                  out.data() + static_cast<std::size_t>(n) * (Ca + Cb) * spatial);
      std::copy_n(bv.data() + static_cast<std::size_t>(n) * Cb * spatial, static_cast<std::size_t>(Cb) * spatial,
                  out.data() + static_cast<std::size_t>(n) * (Ca + Cb) * spatial + static_cast<std::size_t>(Ca) * spatial);
    }
    int id = leaf(std::move(out), needs_grad(a) || needs_grad(b));
    node(id).back = [this, a, b, id, N, Ca, Cb, spatial] {
      Node& on = node(id);
      for (int n = 0; n < N; ++n) {
        const T* g = on.grad.data() + static_cast<std::size_t>(n) * (Ca + Cb) * spatial;
        if (node(a).needs_grad) {
          T* ga = node(a).grad.data() + static_cast<std::size_t>(n) * Ca * spatial;
          for (std::size_t i = 0; i < static_cast<std::size_t>(Ca) * spatial; ++i) ga[i] += g[i];
        }
        if (node(b).needs_grad) {
          T* gb = node(b).grad.data() + static_cast<std::size_t>(n) * Cb * spatial;
          for (std::size_t i = 0; i < static_cast<std::size_t>(Cb) * spatial; ++i)
            gb[i] += g[static_cast<std::size_t>(Ca) * spatial + i];
        }
      }
    };
    return id;
  }

  int upsample2x3d(int x) {
    const Tensor<T>& xv = val(x);
    if (xv.rank() != 5) throw std::invalid_argument("upsample2x3d: expected rank 5");
    int N = xv.dim(0), C = xv.dim(1), D = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
    Tensor<T> out({N, C, 2 * D, 2 * H, 2 * W});
    for (int nc = 0; nc < N * C; ++nc) {
      const T* in = xv.data() + static_cast<std::size_t>(nc) * D * H * W;
      T* o = out.data() + static_cast<std::size_t>(nc) * 8 * D * H * W;
      for (int z = 0; z < 2 * D; ++z)
        for (int y = 0; y < 2 * H; ++y) {
          const T* irow = in + (static_cast<std::size_t>(z / 2) * H + y / 2) * W;
          T* orow = o + (static_cast<std::size_t>(z) * 2 * H + y) * 2 * W;
          for (int xph = 0; xph < W; ++xph) {
            orow[2 * xph] = irow[xph];
            orow[2 * xph + 1] = irow[xph];
          }
        }
    }
    int id = leaf(std::move(out), needs_grad(x));
    if (needs_grad(x))
      node(id).back = [this, x, id, N, C, D, H, W] {
        Node& xn = node(x);
        Node& on = node(id);
        for (int nc = 0; nc < N * C; ++nc) {
          T* gi = xn.grad.data() + static_cast<std::size_t>(nc) * D * H * W;
          const T* go = on.grad.data() + static_cast<std::size_t>(nc) * 8 * D * H * W;
          for (int z = 0; z < 2 * D; ++z)
            for (int y = 0; y < 2 * H; ++y) {
              T* girow = gi + (static_cast<std::size_t>(z / 2) * H + y / 2) * W;
              const T* gorow = go + (static_cast<std::size_t>(z) * 2 * H + y) * 2 * W;
              for (int xph = 0; xph < W; ++xph)
                girow[xph] += gorow[2 * xph] + gorow[2 * xph + 1];
            }
        }
      };
    return id;
  }

  // Mean over all trailing spatial axes: [N, C, ...] -> [N, C].
  int gap(int x) {
    const Tensor<T>& xv = val(x);
    if (xv.rank() < 3) throw std::invalid_argument("gap: expected rank >= 3");
    int N = xv.dim(0), C = xv.dim(1);
    std::size_t spatial = xv.size() / (static_cast<std::size_t>(N) * C);
    Tensor<T> out({N, C});
    for (int nc = 0; nc < N * C; ++nc) {
      const T* in = xv.data() + static_cast<std::size_t>(nc) * spatial;
      T acc = T(0);
      for (std::size_t i = 0; i < spatial; ++i) acc += in[i];
      out.v[static_cast<std::size_t>(nc)] = acc / static_cast<T>(spatial);
    }
    int id = leaf(std::move(out), needs_grad(x));
    if (needs_grad(x))
      node(id).back = [this, x, id, N, C, spatial] {
        Node& xn = node(x);
        Node& on = node(id);
        for (int nc = 0; nc < N * C; ++nc) {
          T g = on.grad.v[static_cast<std::size_t>(nc)] / static_cast<T>(spatial);
          T* gi = xn.grad.data() + static_cast<std::size_t>(nc) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) gi[i] += g;
        }
      };
    return id;
  }

  // Partitions `axis` into out_len contiguous sections and reduces each by
  // max (argmax routed on backward) or mean.
  int section_reduce(int x, int axis, int out_len, bool mean_mode) {
    const Tensor<T>& xv = val(x);
    int r = xv.rank();
    if (axis < 0 || axis >= r) throw std::invalid_argument("section_reduce: bad axis");
    int len = xv.dim(axis);
    if (out_len < 1 || len % out_len != 0)
      throw std::invalid_argument("section_reduce: axis length " + std::to_string(len) +
                                  " not divisible by " + std::to_string(out_len));
    int sec = len / out_len;
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(xv.dim(d));
    for (int d = axis + 1; d < r; ++d) inner *= static_cast<std::size_t>(xv.dim(d));
    std::vector<int> oshape = xv.shape;
    oshape[static_cast<std::size_t>(axis)] = out_len;
    Tensor<T> out(oshape);
    std::vector<std::uint32_t> amax;
    if (!mean_mode) amax.resize(out.size());
    for (std::size_t o = 0; o < outer; ++o)
      for (int s = 0; s < out_len; ++s)
        for (std::size_t i = 0; i < inner; ++i) {
          std::size_t base = (o * static_cast<std::size_t>(len) +
                              static_cast<std::size_t>(s) * sec) * inner + i;
          std::size_t oi = (o * static_cast<std::size_t>(out_len) + static_cast<std::size_t>(s)) * inner + i;
          if (mean_mode) {
            T acc = T(0);
            for (int k = 0; k < sec; ++k) acc += xv.v[base + static_cast<std::size_t>(k) * inner];
            out.v[oi] = acc / static_cast<T>(sec);
          } else {
            T best = xv.v[base];
            int bk = 0;
            for (int k = 1; k < sec; ++k) {
              T cand = xv.v[base + static_cast<std::size_t>(k) * inner];
              if (cand > best) {
                best = cand;
                bk = k;
              }
            }
            out.v[oi] = best;
            amax[oi] = static_cast<std::uint32_t>(bk);
          }
        }
    int id = leaf(std::move(out), needs_grad(x));
    if (needs_grad(x))
      node(id).back = [this, x, id, outer, inner, out_len, sec, len, mean_mode,
                       amax = std::move(amax)] {
        Node& xn = node(x);
        Node& on = node(id);
        for (std::size_t o = 0; o < outer; ++o)
          for (int s = 0; s < out_len; ++s)
            for (std::size_t i = 0; i < inner; ++i) {
              std::size_t base = (o * static_cast<std::size_t>(len) +
                                  static_cast<std::size_t>(s) * sec) * inner + i;
              std::size_t oi = (o * static_cast<std::size_t>(out_len) + static_cast<std::size_t>(s)) * inner + i;
              T g = on.grad.v[oi];
              if (mean_mode) {
                T gs = g / static_cast<T>(sec);
                for (int k = 0; k < sec; ++k)
                  xn.grad.v[base + static_cast<std::size_t>(k) * inner] += gs;
              } else {
                xn.grad.v[base + static_cast<std::size_t>(amax[oi]) * inner] += g;
              }
            }
      };
    return id;
  }

  // Per-sample, per-channel normalization over the spatial axes with an
  // affine map. x: [N,C,spatial...], gamma/beta: [C].
  int instance_norm(int x, int gamma, int beta, T eps = T(1e-5)) {
    const Tensor<T>& xv = val(x);
    if (xv.rank() < 3) throw std::invalid_argument("instance_norm: expected rank >= 3");
    int N = xv.dim(0), C = xv.dim(1);
    if (val(gamma).size() != static_cast<std::size_t>(C) ||
        val(beta).size() != static_cast<std::size_t>(C))
      throw std::invalid_argument("instance_norm: gamma/beta must have C entries");
    std::size_t M = xv.size() / (static_cast<std::size_t>(N) * C);
    const Tensor<T>& gv = val(gamma);
    const Tensor<T>& bv = val(beta);
    if (M == 1) {
      // Nothing to standardize over; keep the affine map so the parameters
      // stay live.
      Tensor<T> out(xv.shape);
      for (int nc = 0; nc < N * C; ++nc)
        out.v[static_cast<std::size_t>(nc)] = gv.v[static_cast<std::size_t>(nc % C)] * xv.v[static_cast<std::size_t>(nc)] +
                                              bv.v[static_cast<std::size_t>(nc % C)];
      int id = leaf(std::move(out), needs_grad(x) || needs_grad(gamma) || needs_grad(beta));
      node(id).back = [this, x, gamma, beta, id, N, C] {
        Node& xn = node(x);
        Node& on = node(id);
        const Tensor<T>& gv2 = node(gamma).val;
        for (int nc = 0; nc < N * C; ++nc) {
          int c = nc % C;
          T dy = on.grad.v[static_cast<std::size_t>(nc)];
          if (node(beta).needs_grad) node(beta).grad.v[static_cast<std::size_t>(c)] += dy;
          if (node(gamma).needs_grad)
            node(gamma).grad.v[static_cast<std::size_t>(c)] += dy * xn.val.v[static_cast<std::size_t>(nc)];
          if (xn.needs_grad)
            xn.grad.v[static_cast<std::size_t>(nc)] += dy * gv2.v[static_cast<std::size_t>(c)];
        }
      };
      return id;
    }
    Tensor<T> out(xv.shape);
    std::vector<T> mu(static_cast<std::size_t>(N) * C), inv_s(static_cast<std::size_t>(N) * C);
    for (int nc = 0; nc < N * C; ++nc) {
      const T* in = xv.data() + static_cast<std::size_t>(nc) * M;
      double m = 0;
      for (std::size_t i = 0; i < M; ++i) m += in[i];
      m /= static_cast<double>(M);
      double var = 0;
      for (std::size_t i = 0; i < M; ++i) {
        double d = in[i] - m;
        var += d * d;
      }
      var /= static_cast<double>(M);
      T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      mu[static_cast<std::size_t>(nc)] = static_cast<T>(m);
      inv_s[static_cast<std::size_t>(nc)] = is;
      T gm = gv.v[static_cast<std::size_t>(nc % C)];
      T bt = bv.v[static_cast<std::size_t>(nc % C)];
      T* o = out.data() + static_cast<std::size_t>(nc) * M;
      for (std::size_t i = 0; i < M; ++i)
        o[i] = gm * (in[i] - static_cast<T>(m)) * is + bt;
    }
    int id = leaf(std::move(out),
                  needs_grad(x) || needs_grad(gamma) || needs_grad(beta));
    node(id).back = [this, x, gamma, beta, id, N, C, M, mu = std::move(mu),
                     inv_s = std::move(inv_s)] {
      Node& xn = node(x);
      Node& on = node(id);
      const Tensor<T>& gv2 = node(gamma).val;
      for (int nc = 0; nc < N * C; ++nc) {
        const T* in = xn.val.data() + static_cast<std::size_t>(nc) * M;
        const T* dy = on.grad.data() + static_cast<std::size_t>(nc) * M;
        T m = mu[static_cast<std::size_t>(nc)];
        T is = inv_s[static_cast<std::size_t>(nc)];
        int c = nc % C;
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t i = 0; i < M; ++i) {
          double xhat = (in[i] - m) * is;
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * xhat;
        }
        if (node(beta).needs_grad) node(beta).grad.v[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
        if (node(gamma).needs_grad)
          node(gamma).grad.v[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
        if (xn.needs_grad) {
          T* dx = xn.grad.data() + static_cast<std::size_t>(nc) * M;
          T gm = gv2.v[static_cast<std::size_t>(c)];
          T mean_dy = static_cast<T>(sum_dy / static_cast<double>(M));
          T mean_dyx = static_cast<T>(sum_dy_xhat / static_cast<double>(M));
          for (std::size_t i = 0; i < M; ++i) {
            T xhat = (in[i] - m) * is;
            dx[i] += gm * is * (dy[i] - mean_dy - xhat * mean_dyx);
          }
        }
      }
    };
    return id;
  }

  // ---- dense / conv ----

  int dense(int x, int w, int b) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    const Tensor<T>& bv = val(b);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1) || bv.dim(0) != wv.dim(0))
      throw std::invalid_argument("dense: shape mismatch");
    int N = xv.dim(0), Ci = xv.dim(1), Co = wv.dim(0);
    Tensor<T> out({N, Co});
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        const T* xr = xv.data() + static_cast<std::size_t>(n) * Ci;
        const T* wr = wv.data() + static_cast<std::size_t>(co) * Ci;
        T acc = bv.v[static_cast<std::size_t>(co)];
        for (int ci = 0; ci < Ci; ++ci) acc += xr[ci] * wr[ci];
        out.v[static_cast<std::size_t>(n) * Co + co] = acc;
      }
    int id = leaf(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b));
    node(id).back = [this, x, w, b, id, N, Ci, Co] {
      Node& on = node(id);
      const Tensor<T>& xv2 = node(x).val;
      const Tensor<T>& wv2 = node(w).val;
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
          T g = on.grad.v[static_cast<std::size_t>(n) * Co + co];
          if (g == T(0)) continue;
          if (node(b).needs_grad) node(b).grad.v[static_cast<std::size_t>(co)] += g;
          const T* xr = xv2.data() + static_cast<std::size_t>(n) * Ci;
          const T* wr = wv2.data() + static_cast<std::size_t>(co) * Ci;
          if (node(w).needs_grad) {
            T* gw = node(w).grad.data() + static_cast<std::size_t>(co) * Ci;
            for (int ci = 0; ci < Ci; ++ci) gw[ci] += g * xr[ci];
          }
          if (node(x).needs_grad) {
            T* gx = node(x).grad.data() + static_cast<std::size_t>(n) * Ci;
            for (int ci = 0; ci < Ci; ++ci) gx[ci] += g * wr[ci];
          }
        }
    };
    return id;
  }

  // 3D convolution, kernel k in {1,3}, same padding for k=3, stride 1 or 2.
  // x [N,Ci,D,H,W], w [Co,Ci,k,k,k], b [Co].
  int conv3d(int x, int w, int b, int stride) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    if (xv.rank() != 5 || wv.rank() != 5) throw std::invalid_argument("conv3d: bad ranks");
    int N = xv.dim(0), Ci = xv.dim(1), D = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
    int Co = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != Ci || (k != 1 && k != 3)) throw std::invalid_argument("conv3d: bad kernel");
    int pad = k / 2;
    int Do = (D + 2 * pad - k) / stride + 1;
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    Tensor<T> out({N, Co, Do, Ho, Wo});

    std::vector<T> padbuf;
    const T* xin = pad_input3d(xv, N, Ci, D, H, W, pad, padbuf);
    int Dp = D + 2 * pad, Hp = H + 2 * pad, Wp = W + 2 * pad;
    const Tensor<T>& bv = val(b);
    for (int n = 0; n < N; ++n) {
      const T* xn_ = xin + static_cast<std::size_t>(n) * Ci * Dp * Hp * Wp;
      T* on_ = out.data() + static_cast<std::size_t>(n) * Co * Do * Ho * Wo;
      parallel_for(Co, [&](std::int64_t co) {
        T* o = on_ + static_cast<std::size_t>(co) * Do * Ho * Wo;
        T bias = bv.v[static_cast<std::size_t>(co)];
        for (std::size_t i = 0; i < static_cast<std::size_t>(Do) * Ho * Wo; ++i) o[i] = bias;
        for (int ci = 0; ci < Ci; ++ci) {
          const T* ip = xn_ + static_cast<std::size_t>(ci) * Dp * Hp * Wp;
          const T* wp = wv.data() + ((static_cast<std::size_t>(co) * Ci + ci) * k * k * k);
          for (int zo = 0; zo < Do; ++zo)
            for (int yo = 0; yo < Ho; ++yo) {
              T* orow = o + (static_cast<std::size_t>(zo) * Ho + yo) * Wo;
              for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky) {
                  const T* irow =
                      ip + (static_cast<std::size_t>(zo * stride + kz) * Hp + (yo * stride + ky)) * Wp;
                  const T* wrow = wp + (static_cast<std::size_t>(kz) * k + ky) * k;
                  if (k == 3) {
                    // fused taps: one pass per row
                    T w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                    if (stride == 1) {
                      for (int xo = 0; xo < Wo; ++xo)
                        orow[xo] += w0 * irow[xo] + w1 * irow[xo + 1] + w2 * irow[xo + 2];
                    } else {
                      for (int xo = 0; xo < Wo; ++xo)
                        orow[xo] +=
                            w0 * irow[2 * xo] + w1 * irow[2 * xo + 1] + w2 * irow[2 * xo + 2];
                    }
                  } else {
                    T w0 = wrow[0];
                    if (stride == 1) {
                      for (int xo = 0; xo < Wo; ++xo) orow[xo] += w0 * irow[xo];
                    } else {
                      for (int xo = 0; xo < Wo; ++xo) orow[xo] += w0 * irow[2 * xo];
                    }
                  }
                }
            }
        }
      });
    }
    int id = leaf(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b));
    node(id).back = [this, x, w, b, id, N, Ci, Co, D, H, W, Do, Ho, Wo, k, pad, stride] {
      conv3d_backward(x, w, b, id, N, Ci, Co, D, H, W, Do, Ho, Wo, k, pad, stride);
    };
    return id;
  }

  // 2D convolution; x [N,Ci,H,W], w [Co,Ci,k,k], b [Co].
  int conv2d(int x, int w, int b, int stride) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    if (xv.rank() != 4 || wv.rank() != 4) throw std::invalid_argument("conv2d: bad ranks");
    int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int Co = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != Ci || (k != 1 && k != 3)) throw std::invalid_argument("conv2d: bad kernel");
    int pad = k / 2;
    int Ho = (H + 2 * pad - k) / stride + 1;
    int Wo = (W + 2 * pad - k) / stride + 1;
    Tensor<T> out({N, Co, Ho, Wo});
    std::vector<T> padbuf;
    const T* xin = pad_input2d(xv, N, Ci, H, W, pad, padbuf);
    int Hp = H + 2 * pad, Wp = W + 2 * pad;
    const Tensor<T>& bv = val(b);
    parallel_for(static_cast<std::int64_t>(N) * Co, [&](std::int64_t nc) {
      int n = static_cast<int>(nc / Co), co = static_cast<int>(nc % Co);
      const T* xn_ = xin + static_cast<std::size_t>(n) * Ci * Hp * Wp;
      T* o = out.data() + (static_cast<std::size_t>(n) * Co + co) * Ho * Wo;
      T bias = bv.v[static_cast<std::size_t>(co)];
      for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) o[i] = bias;
      for (int ci = 0; ci < Ci; ++ci) {
        const T* ip = xn_ + static_cast<std::size_t>(ci) * Hp * Wp;
        const T* wp = val(w).data() + (static_cast<std::size_t>(co) * Ci + ci) * k * k;
        for (int yo = 0; yo < Ho; ++yo) {
          T* orow = o + static_cast<std::size_t>(yo) * Wo;
          for (int ky = 0; ky < k; ++ky) {
            const T* irow = ip + static_cast<std::size_t>(yo * stride + ky) * Wp;
            if (k == 3) {
              T w0 = wp[ky * 3], w1 = wp[ky * 3 + 1], w2 = wp[ky * 3 + 2];
              if (stride == 1) {
                for (int xo = 0; xo < Wo; ++xo)
                  orow[xo] += w0 * irow[xo] + w1 * irow[xo + 1] + w2 * irow[xo + 2];
              } else {
                for (int xo = 0; xo < Wo; ++xo)
                  orow[xo] += w0 * irow[2 * xo] + w1 * irow[2 * xo + 1] + w2 * irow[2 * xo + 2];
              }
            } else {
              T w0 = wp[ky * k];
              if (stride == 1)
                for (int xo = 0; xo < Wo; ++xo) orow[xo] += w0 * irow[xo];
              else
                for (int xo = 0; xo < Wo; ++xo) orow[xo] += w0 * irow[2 * xo];
            }
          }
        }
      }
    });
    int id = leaf(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b));
    node(id).back = [this, x, w, b, id, N, Ci, Co, H, W, Ho, Wo, k, pad, stride] {
      conv2d_backward(x, w, b, id, N, Ci, Co, H, W, Ho, Wo, k, pad, stride);
    };
    return id;
  }

  // ---- losses ----

  // Cosine similarity of two flattened tensors. Scalar output.
  int cosine(int a, int b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    if (av.size() != bv.size())
      throw std::invalid_argument("cosine: latent lengths differ (" +
                                  std::to_string(av.size()) + " vs " + std::to_string(bv.size()) + ")");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < av.size(); ++i) {
      dot += static_cast<double>(av.v[i]) * bv.v[i];
      na += static_cast<double>(av.v[i]) * av.v[i];
      nb += static_cast<double>(bv.v[i]) * bv.v[i];
    }
    if (na == 0.0 || nb == 0.0)
      throw degenerate_latent_error("cosine: zero-norm latent");
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    T c = static_cast<T>(dot / (na * nb));
    Tensor<T> out({1});
    out.v[0] = c;
    int id = leaf(std::move(out), needs_grad(a) || needs_grad(b));
    node(id).back = [this, a, b, id, na, nb, c] {
      T g = node(id).grad.v[0];
      const Tensor<T>& av2 = node(a).val;
      const Tensor<T>& bv2 = node(b).val;
      T inab = static_cast<T>(1.0 / (na * nb));
      T ina2 = static_cast<T>(1.0 / (na * na));
      T inb2 = static_cast<T>(1.0 / (nb * nb));
      if (node(a).needs_grad)
        for (std::size_t i = 0; i < av2.size(); ++i)
          node(a).grad.v[i] += g * (bv2.v[i] * inab - c * av2.v[i] * ina2);
      if (node(b).needs_grad)
        for (std::size_t i = 0; i < bv2.size(); ++i)
          node(b).grad.v[i] += g * (av2.v[i] * inab - c * bv2.v[i] * inb2);
    };
    return id;
  }

  // Mean of -(pos_weight*y*ln p + (1-y)*ln(1-p)) with p clamped away from
  // the endpoints. Targets are data, never differentiated.
  int bce_mean(int probs, Tensor<T> targets, T pos_weight, T eps = T(1e-7)) {
    const Tensor<T>& pv = val(probs);
    if (pv.size() != targets.size()) throw std::invalid_argument("bce: shape mismatch");
    if (pv.size() == 0) throw std::invalid_argument("bce: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      double p = std::clamp(static_cast<double>(pv.v[i]), static_cast<double>(eps),
                            1.0 - static_cast<double>(eps));
      double y = targets.v[i];
      acc -= static_cast<double>(pos_weight) * y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
    Tensor<T> out({1});
    out.v[0] = static_cast<T>(acc / static_cast<double>(pv.size()));
    int id = leaf(std::move(out), needs_grad(probs));
    if (needs_grad(probs))
      node(id).back = [this, probs, id, targets = std::move(targets), pos_weight, eps] {
        T g = node(id).grad.v[0] / static_cast<T>(targets.size());
        Node& pn = node(probs);
        for (std::size_t i = 0; i < targets.size(); ++i) {
          T p = std::clamp(pn.val.v[i], eps, T(1) - eps);
          if (pn.val.v[i] <= eps || pn.val.v[i] >= T(1) - eps) continue;  // clamped flat
          T y = targets.v[i];
          pn.grad.v[i] += g * (-pos_weight * y / p + (T(1) - y) / (T(1) - p));
        }
      };
    return id;
  }

  // Same objective evaluated from logits: softplus form, numerically stable
  // at any saturation and with gradients that never flatten.
  //   loss_i = pos_weight * y * softplus(-l) + (1 - y) * softplus(l)
  int bce_logits(int logits, Tensor<T> targets, T pos_weight) {
    const Tensor<T>& lv = val(logits);
    if (lv.size() != targets.size()) throw std::invalid_argument("bce_logits: shape mismatch");
    if (lv.size() == 0) throw std::invalid_argument("bce_logits: empty input");
    auto softplus = [](double l) { return l > 0 ? l + std::log1p(std::exp(-l)) : std::log1p(std::exp(l)); };
    double acc = 0.0;
    for (std::size_t i = 0; i < lv.size(); ++i) {
      double l = lv.v[i], y = targets.v[i];
      acc += static_cast<double>(pos_weight) * y * softplus(-l) + (1.0 - y) * softplus(l);
    }
    Tensor<T> out({1});
    out.v[0] = static_cast<T>(acc / static_cast<double>(lv.size()));
    int id = leaf(std::move(out), needs_grad(logits));
    if (needs_grad(logits))
      node(id).back = [this, logits, id, targets = std::move(targets), pos_weight] {
        T g = node(id).grad.v[0] / static_cast<T>(targets.size());
        Node& ln = node(logits);
        for (std::size_t i = 0; i < targets.size(); ++i) {
          T s = sigmoid_s(ln.val.v[i]);
          T y = targets.v[i];
          ln.grad.v[i] += g * ((T(1) - y) * s - pos_weight * y * (T(1) - s));
        }
      };
    return id;
  }

  // Smooth false-negative + false-positive rates at threshold 0.5:
  // s = sigmoid(sharpness*(p-0.5)), FN = sum y(1-s)/|y|, FP = sum (1-y)s/|1-y|.
  int fnfp_smooth(int probs, Tensor<T> targets, T sharpness) {
    const Tensor<T>& pv = val(probs);
    if (pv.size() != targets.size()) throw std::invalid_argument("fnfp: shape mismatch");
    double npos = 0, nneg = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      npos += targets.v[i];
      nneg += 1.0 - static_cast<double>(targets.v[i]);
    }
    double fn = 0, fp = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      double s = 1.0 / (1.0 + std::exp(-static_cast<double>(sharpness) * (static_cast<double>(pv.v[i]) - 0.5)));
      fn += targets.v[i] * (1.0 - s);
      fp += (1.0 - static_cast<double>(targets.v[i])) * s;
    }
    double denom_p = std::max(npos, 1.0), denom_n = std::max(nneg, 1.0);
    Tensor<T> out({1});
    out.v[0] = static_cast<T>(fn / denom_p + fp / denom_n);
    int id = leaf(std::move(out), needs_grad(probs));
    if (needs_grad(probs))
      node(id).back = [this, probs, id, targets = std::move(targets), sharpness, denom_p,
                       denom_n] {
        T g = node(id).grad.v[0];
        Node& pn = node(probs);
        for (std::size_t i = 0; i < targets.size(); ++i) {
          T s = sigmoid_s(sharpness * (pn.val.v[i] - T(0.5)));
          T ds = sharpness * s * (T(1) - s);
          T y = targets.v[i];
          pn.grad.v[i] += g * ds * (-y / static_cast<T>(denom_p) + (T(1) - y) / static_cast<T>(denom_n));
        }
      };
    return id;
  }

  // Mean cross entropy from logits [N,K] against integer targets.
  int softmax_ce(int logits, std::vector<int> targets) {
    const Tensor<T>& lv = val(logits);
    if (lv.rank() != 2 || lv.dim(0) != static_cast<int>(targets.size()))
      throw std::invalid_argument("softmax_ce: shape mismatch");
    int N = lv.dim(0), K = lv.dim(1);
    double acc = 0.0;
    for (int n = 0; n < N; ++n) {
      const T* row = lv.data() + static_cast<std::size_t>(n) * K;
      double m = row[0];
      for (int j = 1; j < K; ++j) m = std::max(m, static_cast<double>(row[j]));
      double lse = 0.0;
      for (int j = 0; j < K; ++j) lse += std::exp(static_cast<double>(row[j]) - m);
      lse = m + std::log(lse);
      acc += lse - static_cast<double>(row[targets[static_cast<std::size_t>(n)]]);
    }
    Tensor<T> out({1});
    out.v[0] = static_cast<T>(acc / N);
    int id = leaf(std::move(out), needs_grad(logits));
    if (needs_grad(logits))
      node(id).back = [this, logits, id, targets = std::move(targets), N, K] {
        T g = node(id).grad.v[0] / static_cast<T>(N);
        Node& ln = node(logits);
        for (int n = 0; n < N; ++n) {
          const T* row = ln.val.data() + static_cast<std::size_t>(n) * K;
          T* gr = ln.grad.data() + static_cast<std::size_t>(n) * K;
          double m = row[0];
          for (int j = 1; j < K; ++j) m = std::max(m, static_cast<double>(row[j]));
          double z = 0.0;
          for (int j = 0; j < K; ++j) z += std::exp(static_cast<double>(row[j]) - m);
          for (int j = 0; j < K; ++j) {
            double p = std::exp(static_cast<double>(row[j]) - m) / z;
            gr[j] += g * static_cast<T>(p - (j == targets[static_cast<std::size_t>(n)] ? 1.0 : 0.0));
          }
        }
      };
    return id;
  }

  // Mean squared error against a constant target.
  int mse(int pred, Tensor<T> target) {
    const Tensor<T>& pv = val(pred);
    if (pv.size() != target.size()) throw std::invalid_argument("mse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      double d = static_cast<double>(pv.v[i]) - target.v[i];
      acc += d * d;
    }
    Tensor<T> out({1});
    out.v[0] = static_cast<T>(acc / static_cast<double>(pv.size()));
    int id = leaf(std::move(out), needs_grad(pred));
    if (needs_grad(pred))
      node(id).back = [this, pred, id, target = std::move(target)] {
        T g = node(id).grad.v[0] * T(2) / static_cast<T>(target.size());
        Node& pn = node(pred);
        for (std::size_t i = 0; i < target.size(); ++i)
          pn.grad.v[i] += g * (pn.val.v[i] - target.v[i]);
      };
    return id;
  }

 private:
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }

  static T sigmoid_s(T x) { return T(1) / (T(1) + std::exp(-x)); }

  static std::vector<std::size_t> strides(const std::vector<int>& shape) {
    std::vector<std::size_t> s(shape.size());
    std::size_t acc = 1;
    for (int d = static_cast<int>(shape.size()) - 1; d >= 0; --d) {
      s[static_cast<std::size_t>(d)] = acc;
      acc *= static_cast<std::size_t>(shape[static_cast<std::size_t>(d)]);
    }
    return s;
  }

  const T* pad_input3d(const Tensor<T>& xv, int N, int Ci, int D, int H, int W, int pad,
                       std::vector<T>& buf) {
    if (pad == 0) return xv.data();
    int Dp = D + 2 * pad, Hp = H + 2 * pad, Wp = W + 2 * pad;
    buf.assign(static_cast<std::size_t>(N) * Ci * Dp * Hp * Wp, T(0));
    for (int nc = 0; nc < N * Ci; ++nc) {
      const T* in = xv.data() + static_cast<std::size_t>(nc) * D * H * W;
      T* o = buf.data() + static_cast<std::size_t>(nc) * Dp * Hp * Wp;
      for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
          std::copy_n(in + (static_cast<std::size_t>(z) * H + y) * W, W,
                      o + (static_cast<std::size_t>(z + pad) * Hp + (y + pad)) * Wp + pad);
    }
    return buf.data();
  }

  const T* pad_input2d(const Tensor<T>& xv, int N, int Ci, int H, int W, int pad,
                       std::vector<T>& buf) {
    if (pad == 0) return xv.data();
    int Hp = H + 2 * pad, Wp = W + 2 * pad;
    buf.assign(static_cast<std::size_t>(N) * Ci * Hp * Wp, T(0));
    for (int nc = 0; nc < N * Ci; ++nc) {
      const T* in = xv.data() + static_cast<std::size_t>(nc) * H * W;
      T* o = buf.data() + static_cast<std::size_t>(nc) * Hp * Wp;
      for (int y = 0; y < H; ++y)
        std::copy_n(in + static_cast<std::size_t>(y) * W, W,
                    o + static_cast<std::size_t>(y + pad) * Wp + pad);
    }
    return buf.data();
  }

  void conv3d_backward(int x, int w, int b, int id, int N, int Ci, int Co, int D, int H, int W,
                       int Do, int Ho, int Wo, int k, int pad, int stride) {
    Node& on = node(id);
    Node& xn = node(x);
    Node& wn = node(w);
    Node& bn = node(b);
    int Dp = D + 2 * pad, Hp = H + 2 * pad, Wp = W + 2 * pad;
    std::vector<T> padbuf;
    const T* xin = pad_input3d(xn.val, N, Ci, D, H, W, pad, padbuf);

    if (bn.needs_grad) {
      parallel_for(Co, [&](std::int64_t co) {
        T acc = T(0);
        for (int n = 0; n < N; ++n) {
          const T* g = on.grad.data() + (static_cast<std::size_t>(n) * Co + co) * Do * Ho * Wo;
          for (std::size_t i = 0; i < static_cast<std::size_t>(Do) * Ho * Wo; ++i) acc += g[i];
        }
        bn.grad.v[static_cast<std::size_t>(co)] += acc;
      });
    }
    if (wn.needs_grad) {
      parallel_for(Co, [&](std::int64_t co) {
        for (int ci = 0; ci < Ci; ++ci) {
          T* gw = wn.grad.data() + ((static_cast<std::size_t>(co) * Ci + ci) * k * k * k);
          for (int n = 0; n < N; ++n) {
            const T* gout = on.grad.data() + (static_cast<std::size_t>(n) * Co + co) * Do * Ho * Wo;
            const T* ip = xin + (static_cast<std::size_t>(n) * Ci + ci) * Dp * Hp * Wp;
            for (int kz = 0; kz < k; ++kz)
              for (int ky = 0; ky < k; ++ky) {
                T a0 = T(0), a1 = T(0), a2 = T(0);
                for (int zo = 0; zo < Do; ++zo)
                  for (int yo = 0; yo < Ho; ++yo) {
                    const T* grow = gout + (static_cast<std::size_t>(zo) * Ho + yo) * Wo;
                    const T* irow =
                        ip + (static_cast<std::size_t>(zo * stride + kz) * Hp + (yo * stride + ky)) * Wp;
                    if (k == 3) {
                      if (stride == 1) {
                        for (int xo = 0; xo < Wo; ++xo) {
                          T g = grow[xo];
                          a0 += g * irow[xo];
                          a1 += g * irow[xo + 1];
                          a2 += g * irow[xo + 2];
                        }
                      } else {
                        for (int xo = 0; xo < Wo; ++xo) {
                          T g = grow[xo];
                          a0 += g * irow[2 * xo];
                          a1 += g * irow[2 * xo + 1];
                          a2 += g * irow[2 * xo + 2];
                        }
                      }
                    } else {
                      if (stride == 1)
                        for (int xo = 0; xo < Wo; ++xo) a0 += grow[xo] * irow[xo];
                      else
                        for (int xo = 0; xo < Wo; ++xo) a0 += grow[xo] * irow[2 * xo];
                    }
                  }
                gw[(kz * k + ky) * k] += a0;
                if (k == 3) {
                  gw[(kz * k + ky) * k + 1] += a1;
                  gw[(kz * k + ky) * k + 2] += a2;
                }
              }
          }
        }
      });
    }
    if (xn.needs_grad && stride == 1 && k == 3) {
      // Gather form: dIn is the flipped-kernel correlation of the padded
      // output gradient. Same fused-row pattern as the forward pass.
      int Dg = Do + 2, Hg = Ho + 2, Wg = Wo + 2;
      std::vector<T> gpad(static_cast<std::size_t>(N) * Co * Dg * Hg * Wg, T(0));
      for (int nc = 0; nc < N * Co; ++nc) {
        const T* src = on.grad.data() + static_cast<std::size_t>(nc) * Do * Ho * Wo;
        T* dst = gpad.data() + static_cast<std::size_t>(nc) * Dg * Hg * Wg;
        for (int z = 0; z < Do; ++z)
          for (int y = 0; y < Ho; ++y)
            std::copy_n(src + (static_cast<std::size_t>(z) * Ho + y) * Wo, Wo,
                        dst + (static_cast<std::size_t>(z + 1) * Hg + (y + 1)) * Wg + 1);
      }
      const Tensor<T>& wv = wn.val;
      parallel_for(Ci, [&](std::int64_t ci) {
        for (int n = 0; n < N; ++n) {
          T* gx = xn.grad.data() + (static_cast<std::size_t>(n) * Ci + ci) * D * H * W;
          for (int co = 0; co < Co; ++co) {
            const T* gp = gpad.data() + (static_cast<std::size_t>(n) * Co + co) * Dg * Hg * Wg;
            const T* wp = wv.data() + ((static_cast<std::size_t>(co) * Ci + ci) * 27);
            for (int z = 0; z < D; ++z)
              for (int y = 0; y < H; ++y) {
                T* gr = gx + (static_cast<std::size_t>(z) * H + y) * W;
                for (int kz = 0; kz < 3; ++kz)
                  for (int ky = 0; ky < 3; ++ky) {
                    const T* grow =
                        gp + (static_cast<std::size_t>(z + 2 - kz) * Hg + (y + 2 - ky)) * Wg;
                    const T* wrow = wp + (static_cast<std::size_t>(kz) * 3 + ky) * 3;
                    T w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                    for (int x = 0; x < W; ++x)
                      gr[x] += w0 * grow[x + 2] + w1 * grow[x + 1] + w2 * grow[x];
                  }
              }
          }
        }
      });
    } else if (xn.needs_grad) {
      std::vector<T> gpad(static_cast<std::size_t>(N) * Ci * Dp * Hp * Wp, T(0));
      const Tensor<T>& wv = wn.val;
      parallel_for(Ci, [&](std::int64_t ci) {
        for (int n = 0; n < N; ++n) {
          T* gp = gpad.data() + (static_cast<std::size_t>(n) * Ci + ci) * Dp * Hp * Wp;
          for (int co = 0; co < Co; ++co) {
            const T* gout = on.grad.data() + (static_cast<std::size_t>(n) * Co + co) * Do * Ho * Wo;
            const T* wp = wv.data() + ((static_cast<std::size_t>(co) * Ci + ci) * k * k * k);
            for (int zo = 0; zo < Do; ++zo)
              for (int yo = 0; yo < Ho; ++yo) {
                const T* grow = gout + (static_cast<std::size_t>(zo) * Ho + yo) * Wo;
                for (int kz = 0; kz < k; ++kz)
                  for (int ky = 0; ky < k; ++ky) {
                    T* prow =
                        gp + (static_cast<std::size_t>(zo * stride + kz) * Hp + (yo * stride + ky)) * Wp;
                    const T* wrow = wp + (static_cast<std::size_t>(kz) * k + ky) * k;
                    if (k == 3) {
                      T w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                      for (int xo = 0; xo < Wo; ++xo) {
                        T g = grow[xo];
                        prow[2 * xo] += w0 * g;
                        prow[2 * xo + 1] += w1 * g;
                        prow[2 * xo + 2] += w2 * g;
                      }
                    } else {
                      T w0 = wrow[0];
                      if (stride == 1)
                        for (int xo = 0; xo < Wo; ++xo) prow[xo] += w0 * grow[xo];
                      else
                        for (int xo = 0; xo < Wo; ++xo) prow[2 * xo] += w0 * grow[xo];
                    }
                  }
              }
          }
        }
      });
      parallel_for(static_cast<std::int64_t>(N) * Ci, [&](std::int64_t nc) {
        T* gx = xn.grad.data() + static_cast<std::size_t>(nc) * D * H * W;
        const T* gp = gpad.data() + static_cast<std::size_t>(nc) * Dp * Hp * Wp;
        for (int z = 0; z < D; ++z)
          for (int y = 0; y < H; ++y) {
            T* gr = gx + (static_cast<std::size_t>(z) * H + y) * W;
            const T* pr = gp + (static_cast<std::size_t>(z + pad) * Hp + (y + pad)) * Wp + pad;
            for (int xph = 0; xph < W; ++xph) gr[xph] += pr[xph];
          }
      });
    }
  }

  void conv2d_backward(int x, int w, int b, int id, int N, int Ci, int Co, int H, int W, int Ho,
                       int Wo, int k, int pad, int stride) {
    Node& on = node(id);
    Node& xn = node(x);
    Node& wn = node(w);
    Node& bn = node(b);
    int Hp = H + 2 * pad, Wp = W + 2 * pad;
    std::vector<T> padbuf;
    const T* xin = pad_input2d(xn.val, N, Ci, H, W, pad, padbuf);

    if (bn.needs_grad) {
      parallel_for(Co, [&](std::int64_t co) {
        T acc = T(0);
        for (int n = 0; n < N; ++n) {
          const T* g = on.grad.data() + (static_cast<std::size_t>(n) * Co + co) * Ho * Wo;
          for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) acc += g[i];
        }
        bn.grad.v[static_cast<std::size_t>(co)] += acc;
      });
    }
    if (wn.needs_grad) {
      parallel_for(Co, [&](std::int64_t co) {
        for (int ci = 0; ci < Ci; ++ci) {
          T* gw = wn.grad.data() + (static_cast<std::size_t>(co) * Ci + ci) * k * k;
          for (int n = 0; n < N; ++n) {
            const T* gout = on.grad.data() + (static_cast<std::size_t>(n) * Co + co) * Ho * Wo;
            const T* ip = xin + (static_cast<std::size_t>(n) * Ci + ci) * Hp * Wp;
            for (int ky = 0; ky < k; ++ky) {
              T a0 = T(0), a1 = T(0), a2 = T(0);
              for (int yo = 0; yo < Ho; ++yo) {
                const T* grow = gout + static_cast<std::size_t>(yo) * Wo;
                const T* irow = ip + static_cast<std::size_t>(yo * stride + ky) * Wp;
                if (k == 3) {
                  if (stride == 1) {
                    for (int xo = 0; xo < Wo; ++xo) {
                      T g = grow[xo];
                      a0 += g * irow[xo];
                      a1 += g * irow[xo + 1];
                      a2 += g * irow[xo + 2];
                    }
                  } else {
                    for (int xo = 0; xo < Wo; ++xo) {
                      T g = grow[xo];
                      a0 += g * irow[2 * xo];
                      a1 += g * irow[2 * xo + 1];
                      a2 += g * irow[2 * xo + 2];
                    }
                  }
                } else {
                  if (stride == 1)
                    for (int xo = 0; xo < Wo; ++xo) a0 += grow[xo] * irow[xo];
                  else
                    for (int xo = 0; xo < Wo; ++xo) a0 += grow[xo] * irow[2 * xo];
                }
              }
              gw[ky * k] += a0;
              if (k == 3) {
                gw[ky * k + 1] += a1;
                gw[ky * k + 2] += a2;
              }
            }
          }
        }
      });
    }
    if (xn.needs_grad && stride == 1 && k == 3) {
      int Hg = Ho + 2, Wg = Wo + 2;
      std::vector<T> gpad(static_cast<std::size_t>(N) * Co * Hg * Wg, T(0));
      for (int nc = 0; nc < N * Co; ++nc) {
        const T* src = on.grad.data() + static_cast<std::size_t>(nc) * Ho * Wo;
        T* dst = gpad.data() + static_cast<std::size_t>(nc) * Hg * Wg;
        for (int y = 0; y < Ho; ++y)
          std::copy_n(src + static_cast<std::size_t>(y) * Wo, Wo,
                      dst + static_cast<std::size_t>(y + 1) * Wg + 1);
      }
      const Tensor<T>& wv = wn.val;
      parallel_for(static_cast<std::int64_t>(N) * Ci, [&](std::int64_t nci) {
        int n = static_cast<int>(nci / Ci), ci = static_cast<int>(nci % Ci);
        T* gx = xn.grad.data() + static_cast<std::size_t>(nci) * H * W;
        for (int co = 0; co < Co; ++co) {
          const T* gp = gpad.data() + (static_cast<std::size_t>(n) * Co + co) * Hg * Wg;
          const T* wp = wv.data() + (static_cast<std::size_t>(co) * Ci + ci) * 9;
          for (int y = 0; y < H; ++y) {
            T* gr = gx + static_cast<std::size_t>(y) * W;
            for (int ky = 0; ky < 3; ++ky) {
              const T* grow = gp + static_cast<std::size_t>(y + 2 - ky) * Wg;
              T w0 = wp[ky * 3], w1 = wp[ky * 3 + 1], w2 = wp[ky * 3 + 2];
              for (int x = 0; x < W; ++x)
                gr[x] += w0 * grow[x + 2] + w1 * grow[x + 1] + w2 * grow[x];
            }
          }
        }
      });
    } else if (xn.needs_grad) {
      std::vector<T> gpad(static_cast<std::size_t>(N) * Ci * Hp * Wp, T(0));
      const Tensor<T>& wv = wn.val;
      parallel_for(static_cast<std::int64_t>(N) * Ci, [&](std::int64_t nci) {
        int n = static_cast<int>(nci / Ci), ci = static_cast<int>(nci % Ci);
        T* gp = gpad.data() + (static_cast<std::size_t>(n) * Ci + ci) * Hp * Wp;
        for (int co = 0; co < Co; ++co) {
          const T* gout = on.grad.data() + (static_cast<std::size_t>(n) * Co + co) * Ho * Wo;
          const T* wp = wv.data() + (static_cast<std::size_t>(co) * Ci + ci) * k * k;
          for (int yo = 0; yo < Ho; ++yo) {
            const T* grow = gout + static_cast<std::size_t>(yo) * Wo;
            for (int ky = 0; ky < k; ++ky) {
              T* prow = gp + static_cast<std::size_t>(yo * stride + ky) * Wp;
              if (k == 3) {
                T w0 = wp[ky * 3], w1 = wp[ky * 3 + 1], w2 = wp[ky * 3 + 2];
                for (int xo = 0; xo < Wo; ++xo) {
                  T g = grow[xo];
                  prow[2 * xo] += w0 * g;
                  prow[2 * xo + 1] += w1 * g;
                  prow[2 * xo + 2] += w2 * g;
                }
              } else {
                T w0 = wp[ky * k];
                if (stride == 1)
                  for (int xo = 0; xo < Wo; ++xo) prow[xo] += w0 * grow[xo];
                else
                  for (int xo = 0; xo < Wo; ++xo) prow[2 * xo] += w0 * grow[xo];
              }
            }
          }
        }
        T* gx = xn.grad.data() + static_cast<std::size_t>(nci) * H * W;
        for (int y = 0; y < H; ++y) {
          T* gr = gx + static_cast<std::size_t>(y) * W;
          const T* pr = gp + static_cast<std::size_t>(y + pad) * Wp + pad;
          for (int xph = 0; xph < W; ++xph) gr[xph] += pr[xph];
        }
      });
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace jointad::graph

#endif  // JOINTAD_GRAPH_HPP

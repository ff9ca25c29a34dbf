#ifndef JOINTAD_JOINTTRAIN_HPP
#define JOINTAD_JOINTTRAIN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "jointad/anomaly.hpp"
#include "jointad/checkpoint.hpp"
#include "jointad/common.hpp"
#include "jointad/config.hpp"
#include "jointad/graph.hpp"
#include "jointad/nets.hpp"
#include "jointad/optim.hpp"
#include "jointad/parallel.hpp"
#include "jointad/pretask.hpp"
#include "jointad/rng.hpp"
#include "jointad/volume.hpp"

namespace jointad::jointtrain {

using anomaly::AugKind;
using graph::Graph;
using nets::Net2D;
using nets::Net3D;
using nets::ReduceMode;
using volcore::Volume3D;

// -------- slice label smoothing --------

// Slice label from its abnormal-pixel fraction: below `lo` the slice counts
// as normal, between `lo` and `hi` it is smoothed, above `hi` it stays 1.
inline double smooth_label(double abnormal_fraction, double lo = 0.03, double hi = 0.06,
                           double smoothed = 0.75) {
  if (!(abnormal_fraction >= 0.0 && abnormal_fraction <= 1.0))
    throw std::invalid_argument("smooth_label: fraction must be in [0,1]");
  if (abnormal_fraction < lo) return 0.0;
  if (abnormal_fraction <= hi) return smoothed;
  return 1.0;
}

// -------- weighted binary cross entropy --------

inline constexpr double bce_eps = 1e-7;

// W = (#slices with label 0) / (#slices with label > 0), over one abnormal
// volume's slice set.
inline double wbce_weight(const std::vector<double>& labels) {
  std::size_t normal = 0, abnormal = 0;
  for (double y : labels) (y > 0.0 ? abnormal : normal) += 1;
  if (abnormal == 0)
    throw class_imbalance_error("weighted_bce: no abnormal slices; weight undefined");
  return static_cast<double>(normal) / static_cast<double>(abnormal);
}

inline double weighted_bce(const std::vector<double>& probs, const std::vector<double>& labels,
                           double weight) {
  if (probs.size() != labels.size() || probs.empty())
    throw std::invalid_argument("weighted_bce: size mismatch or empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    double p = std::clamp(probs[i], bce_eps, 1.0 - bce_eps);
    double y = labels[i];
    acc -= weight * y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  return acc / static_cast<double>(probs.size());
}

inline double weighted_bce(const std::vector<double>& probs, const std::vector<double>& labels) {
  return weighted_bce(probs, labels, wbce_weight(labels));
}

// -------- similarity loss --------

struct LatentPair {
  std::vector<double> a, b;
  bool positive = true;
};

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw degenerate_latent_error("cosine: zero-norm latent");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Positive pairs contribute 1 - c, negative pairs max(0, c).
inline double similarity_loss(const std::vector<LatentPair>& pairs) {
  double acc = 0.0;
  for (const auto& p : pairs) {
    double c = cosine_similarity(p.a, p.b);
    acc += p.positive ? 1.0 - c : std::max(0.0, c);
  }
  return acc;
}

// -------- 3D loss --------

// Smooth stand-in for FN + FP rates at threshold 0.5 so the term stays
// differentiable; sharpness 12 keeps the residual at perfect predictions
// below 1e-2.
inline constexpr double fnfp_sharpness = 12.0;

inline double fnfp_surrogate(const std::vector<double>& probs, const std::vector<double>& labels) {
  double npos = 0, nneg = 0, fn = 0, fp = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-fnfp_sharpness * (probs[i] - 0.5)));
    npos += labels[i];
    nneg += 1.0 - labels[i];
    fn += labels[i] * (1.0 - s);
    fp += (1.0 - labels[i]) * s;
  }
  return fn / std::max(npos, 1.0) + fp / std::max(nneg, 1.0);
}

// Voxelwise BCE on the segmentation map plus BCE on the volume score plus
// the weighted FN/FP surrogate.
inline double loss_3d(const std::vector<double>& seg_probs, const std::vector<double>& label_grid,
                      double cls_score, double volume_label, double lambda_fnfp) {
  if (seg_probs.size() != label_grid.size())
    throw std::invalid_argument("loss_3d: seg/label shape mismatch");
  double seg = weighted_bce(seg_probs, label_grid, 1.0);
  double cls = weighted_bce({cls_score}, {volume_label}, 1.0);
  return seg + cls + lambda_fnfp * fnfp_surrogate(seg_probs, label_grid);
}

// -------- one-cycle schedule --------

struct ScheduleSpec {
  double lo = 1e-4;
  double hi = 1e-3;
  std::int64_t total_steps = 0;
};

// Triangular: lo -> hi over the first half, hi -> lo over the second.
inline double one_cycle_lr(std::int64_t step, const ScheduleSpec& spec) {
  if (!(spec.lo < spec.hi)) throw std::invalid_argument("one_cycle_lr: need lo < hi");
  if (spec.total_steps <= 0) throw std::invalid_argument("one_cycle_lr: total_steps must be > 0");
  if (step < 0 || step > spec.total_steps)
    throw std::invalid_argument("one_cycle_lr: step out of range");
  double mid = static_cast<double>(spec.total_steps) / 2.0;
  double s = static_cast<double>(step);
  if (s <= mid) return spec.lo + (spec.hi - spec.lo) * (s / mid);
  return spec.hi - (spec.hi - spec.lo) * ((s - mid) / (static_cast<double>(spec.total_steps) - mid));
}

// -------- training configuration --------

struct TrainConfig {
  std::uint64_t seed = 0;
  int n_volumes = 40;
  int size3d = 32;

  int depth = 3;
  int base_channels = 8;
  int bottleneck_channels = 32;
  int head_hidden = 16;
  int net2d_stages = 3;
  int net2d_base_channels = 8;

  double lambda1 = 1.0;
  double lambda_fnfp = 0.1;
  double smooth_lo = 0.03;
  double smooth_hi = 0.06;
  double smooth_value = 0.75;
  bool use_wbce = true;
  bool use_label_smoothing = true;
  bool use_2d_pretrain = true;
  bool use_3d_pretask = true;
  ReduceMode reduction = ReduceMode::max;
  bool stop_grad_2d = false;
  bool stop_grad_3d = false;

  int epochs = 30;
  int batch_size = 1;
  double lr_lo = 1e-4;
  double lr_hi = 1e-3;

  std::string pretask = "scatter30";
  int pretask_epochs = 10;
  double pretask_lr_lo = 1e-3;
  double pretask_lr_hi = 1e-2;
  int jigsaw_catalog = 256;
  int index_patch_div = 4;

  int pretrain2d_steps = 1500;
  int pretrain2d_batch = 16;
  double pretrain2d_target = 0.8;

  double elastic_prob = 0.5;
  int elastic_grid = 4;
  double elastic_disp = 2.0;

  std::vector<AugKind> train_kinds = {AugKind::copy_paste};
  int max_attempts = 10;
  int pair_attempts = 20;
  int checkpoint_every = 10;
  int threads = 0;

  std::string pretask_checkpoint;
  std::string pretrain2d_checkpoint;

  int size2d() const { return 2 * size3d; }

  nets::Net3DConfig net3d_config() const {
    nets::Net3DConfig c;
    c.input_size = size3d;
    c.depth = depth;
    c.base_channels = base_channels;
    c.bottleneck_channels = bottleneck_channels;
    c.head_hidden = head_hidden;
    return c;
  }
  nets::Net2DConfig net2d_config() const {
    nets::Net2DConfig c;
    c.input_size = size2d();
    c.stages = net2d_stages;
    c.base_channels = net2d_base_channels;
    c.head_hidden = head_hidden;
    return c;
  }

  static TrainConfig from(const config::Config& c) {
    TrainConfig t;
    t.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
    t.n_volumes = static_cast<int>(c.get_int("n_volumes", 40));
    t.size3d = static_cast<int>(c.get_int("size3d", 32));
    t.depth = static_cast<int>(c.get_int("depth", 3));
    t.base_channels = static_cast<int>(c.get_int("base_channels", 8));
    t.bottleneck_channels = static_cast<int>(c.get_int("bottleneck_channels", 32));
    t.head_hidden = static_cast<int>(c.get_int("head_hidden", 16));
    t.net2d_stages = static_cast<int>(c.get_int("net2d_stages", 3));
    t.net2d_base_channels = static_cast<int>(c.get_int("net2d_base_channels", 8));
    t.lambda1 = c.get_double("lambda1", 1.0);
    t.lambda_fnfp = c.get_double("lambda_fnfp", 0.1);
    t.smooth_lo = c.get_double("smooth_low", 0.03);
    t.smooth_hi = c.get_double("smooth_high", 0.06);
    t.smooth_value = c.get_double("smooth_value", 0.75);
    t.use_wbce = c.get_bool("use_wbce", true);
    t.use_label_smoothing = c.get_bool("use_label_smoothing", true);
    t.use_2d_pretrain = c.get_bool("use_2d_pretrain", true);
    t.use_3d_pretask = c.get_bool("use_3d_pretask", true);
    std::string red = c.get_str("reduction", "max");
    if (red == "max")
      t.reduction = ReduceMode::max;
    else if (red == "mean")
      t.reduction = ReduceMode::mean;
    else
      throw config_error("reduction must be max or mean, got '" + red + "'");
    t.stop_grad_2d = c.get_bool("stop_grad_2d", false);
    t.stop_grad_3d = c.get_bool("stop_grad_3d", false);
    t.epochs = static_cast<int>(c.get_int("epochs", 30));
    t.batch_size = static_cast<int>(c.get_int("batch_size", 1));
    t.lr_lo = c.get_double("lr_lo", 1e-4);
    t.lr_hi = c.get_double("lr_hi", 1e-3);
    t.pretask = c.get_str("pretask", "scatter30");
    t.pretask_epochs = static_cast<int>(c.get_int("pretask_epochs", 10));
    t.pretask_lr_lo = c.get_double("pretask_lr_lo", 1e-3);
    t.pretask_lr_hi = c.get_double("pretask_lr_hi", 1e-2);
    t.jigsaw_catalog = static_cast<int>(c.get_int("jigsaw_catalog", 256));
    t.index_patch_div = static_cast<int>(c.get_int("index_patch_div", 4));
    t.pretrain2d_steps = static_cast<int>(c.get_int("pretrain2d_steps", 1500));
    t.pretrain2d_batch = static_cast<int>(c.get_int("pretrain2d_batch", 16));
    t.pretrain2d_target = c.get_double("pretrain2d_target", 0.8);
    t.elastic_prob = c.get_double("elastic_prob", 0.5);
    t.elastic_grid = static_cast<int>(c.get_int("elastic_grid", 4));
    t.elastic_disp = c.get_double("elastic_disp", 2.0);
    t.train_kinds.clear();
    for (const auto& k : c.get_list("train_kinds", "copy_paste"))
      t.train_kinds.push_back(anomaly::kind_from_name(k));
    if (t.train_kinds.empty()) throw config_error("train_kinds must not be empty");
    t.max_attempts = static_cast<int>(c.get_int("max_attempts", 10));
    t.pair_attempts = static_cast<int>(c.get_int("pair_attempts", 20));
    t.checkpoint_every = static_cast<int>(c.get_int("checkpoint_every", 10));
    t.threads = static_cast<int>(c.get_int("threads", 0));
    t.pretask_checkpoint = c.get_str("pretask_checkpoint", "");
    t.pretrain2d_checkpoint = c.get_str("pretrain2d_checkpoint", "");
    t.net3d_config().check();
    t.net2d_config().check();
    return t;
  }

  config::Config resolved() const {
    config::Config c;
    c.set_int("seed", static_cast<std::int64_t>(seed));
    c.set_int("n_volumes", n_volumes);
    c.set_int("size3d", size3d);
    c.set_int("depth", depth);
    c.set_int("base_channels", base_channels);
    c.set_int("bottleneck_channels", bottleneck_channels);
    c.set_int("head_hidden", head_hidden);
    c.set_int("net2d_stages", net2d_stages);
    c.set_int("net2d_base_channels", net2d_base_channels);
    c.set_double("lambda1", lambda1);
    c.set_double("lambda_fnfp", lambda_fnfp);
    c.set_double("smooth_low", smooth_lo);
    c.set_double("smooth_high", smooth_hi);
    c.set_double("smooth_value", smooth_value);
    c.set_bool("use_wbce", use_wbce);
    c.set_bool("use_label_smoothing", use_label_smoothing);
    c.set_bool("use_2d_pretrain", use_2d_pretrain);
    c.set_bool("use_3d_pretask", use_3d_pretask);
    c.set("reduction", reduction == ReduceMode::max ? "max" : "mean");
    c.set_bool("stop_grad_2d", stop_grad_2d);
    c.set_bool("stop_grad_3d", stop_grad_3d);
    c.set_int("epochs", epochs);
    c.set_int("batch_size", batch_size);
    c.set_double("lr_lo", lr_lo);
    c.set_double("lr_hi", lr_hi);
    c.set("pretask", pretask);
    c.set_int("pretask_epochs", pretask_epochs);
    c.set_double("pretask_lr_lo", pretask_lr_lo);
    c.set_double("pretask_lr_hi", pretask_lr_hi);
    c.set_int("jigsaw_catalog", jigsaw_catalog);
    c.set_int("index_patch_div", index_patch_div);
    c.set_int("pretrain2d_steps", pretrain2d_steps);
    c.set_int("pretrain2d_batch", pretrain2d_batch);
    c.set_double("pretrain2d_target", pretrain2d_target);
    c.set_double("elastic_prob", elastic_prob);
    c.set_int("elastic_grid", elastic_grid);
    c.set_double("elastic_disp", elastic_disp);
    std::string kinds;
    for (std::size_t i = 0; i < train_kinds.size(); ++i) {
      if (i) kinds += ",";
      kinds += anomaly::kind_name(train_kinds[i]);
    }
    c.set("train_kinds", kinds);
    c.set_int("max_attempts", max_attempts);
    c.set_int("pair_attempts", pair_attempts);
    c.set_int("checkpoint_every", checkpoint_every);
    c.set_int("threads", threads);
    c.set("pretask_checkpoint", pretask_checkpoint);
    c.set("pretrain2d_checkpoint", pretrain2d_checkpoint);
    return c;
  }
};

// -------- pair construction --------

// One training unit: a normal/abnormal volume pair from the same base image,
// with both branches' inputs under the same augmentation.
struct PairBatch {
  Tensor<float> normal3d, abnormal3d;  // [1,1,S,S,S]
  Tensor<float> label3d;               // [1,1,S,S,S], 0/1
  Tensor<float> normal_slices, abnormal_slices;  // [N,1,S2,S2]
  std::vector<double> slice_fractions;           // abnormal volume, per slice
  std::vector<double> slice_labels;              // smoothed per config
  int axis = 2;
  AugKind kind = AugKind::copy_paste;
};

namespace detail {

inline Tensor<float> grid_to_tensor5(const std::vector<float>& g, int size) {
  Tensor<float> t({1, 1, size, size, size});
  std::copy(g.begin(), g.end(), t.v.begin());
  return t;
}

inline Tensor<float> label_to_tensor5(const std::vector<std::uint8_t>& l, int size) {
  Tensor<float> t({1, 1, size, size, size});
  for (std::size_t i = 0; i < l.size(); ++i) t.v[i] = l[i] ? 1.f : 0.f;
  return t;
}

inline Tensor<float> grid_to_slices(const std::vector<float>& g, int size) {
  Tensor<float> t({size, 1, size, size});
  std::copy(g.begin(), g.end(), t.v.begin());
  return t;
}

}  // namespace detail

// Builds a pair from a base volume at 2D resolution. Anomaly synthesis,
// elastic deformation (same field for both volumes and label), axis-free
// rotation (same rotation for both branches), then downsampling for the 3D
// branch. Re-synthesizes until at least one slice is labeled abnormal.
inline PairBatch build_pair(const Volume3D& base_hi, const TrainConfig& cfg, Rng& rng) {
  int s2 = base_hi.size;
  for (int attempt = 0; attempt < cfg.pair_attempts; ++attempt) {
    AugKind kind = cfg.train_kinds[rng.uniform_below(cfg.train_kinds.size())];
    anomaly::AnomalyRecord rec = anomaly::synth_ood(base_hi, kind, rng, cfg.max_attempts);

    std::vector<float> normal = base_hi.voxels;
    std::vector<float> abnormal = rec.volume.voxels;

    auto field = volcore::sample_elastic_field(rng, s2, cfg.elastic_prob, cfg.elastic_grid,
                                               cfg.elastic_disp);
    if (field) {
      normal = volcore::apply_elastic(normal, s2, *field);
      abnormal = volcore::apply_elastic(abnormal, s2, *field);
    }

    int axis = rng.range(0, 2);
    const auto& rot = nets::axis_to_z_rotation(axis);
    if (rot.class_id != 0) {
      normal = cubesym::rotate_grid(normal, s2, rot);
      abnormal = cubesym::rotate_grid(abnormal, s2, rot);
    }

    // The pair label is the exact voxel difference of the two transformed
    // grids: the equality-exclusion rule survives warping and rotation.
    std::vector<std::uint8_t> label(normal.size());
    for (std::size_t i = 0; i < normal.size(); ++i)
      label[i] = normal[i] != abnormal[i] ? 1 : 0;

    PairBatch pair;
    pair.axis = axis;
    pair.kind = kind;
    pair.slice_fractions.resize(static_cast<std::size_t>(s2));
    pair.slice_labels.resize(static_cast<std::size_t>(s2));
    std::size_t plane = static_cast<std::size_t>(s2) * s2;
    bool any_abnormal = false;
    for (int k = 0; k < s2; ++k) {
      std::size_t on = 0;
      for (std::size_t i = 0; i < plane; ++i) on += label[static_cast<std::size_t>(k) * plane + i];
      double frac = static_cast<double>(on) / static_cast<double>(plane);
      pair.slice_fractions[static_cast<std::size_t>(k)] = frac;
      double y = cfg.use_label_smoothing
                     ? smooth_label(frac, cfg.smooth_lo, cfg.smooth_hi, cfg.smooth_value)
                     : (frac > 0.0 ? 1.0 : 0.0);
      pair.slice_labels[static_cast<std::size_t>(k)] = y;
      any_abnormal = any_abnormal || y > 0.0;
    }
    if (!any_abnormal) continue;  // anomaly too thin for every slice; re-synthesize

    pair.normal_slices = detail::grid_to_slices(normal, s2);
    pair.abnormal_slices = detail::grid_to_slices(abnormal, s2);
    pair.normal3d = detail::grid_to_tensor5(volcore::downsample2x_grid(normal, s2), s2 / 2);
    pair.abnormal3d = detail::grid_to_tensor5(volcore::downsample2x_grid(abnormal, s2), s2 / 2);
    pair.label3d =
        detail::label_to_tensor5(volcore::downsample2x_label(label, s2), s2 / 2);
    return pair;
  }
  throw class_imbalance_error("build_pair: no abnormal slice after " +
                              std::to_string(cfg.pair_attempts) + " attempts");
}

// -------- joint trainer --------

struct StepMetrics {
  double l2d_cls = 0, l_sim = 0, l2d_total = 0;
  double l3d_seg = 0, l3d_cls = 0, l3d_fnfp = 0, l3d = 0, l3d_total = 0;
  double cos_pos = 0, cos_neg = 0;
  double lr = 0;
};

// Pair tensors in the working scalar type.
template <typename T>
struct PairTensors {
  Tensor<T> normal3d, abnormal3d, label3d;
  Tensor<T> normal_slices, abnormal_slices;
  std::vector<double> slice_labels;

  static PairTensors from(const PairBatch& p) {
    PairTensors t;
    t.normal3d = p.normal3d.template cast<T>();
    t.abnormal3d = p.abnormal3d.template cast<T>();
    t.label3d = p.label3d.template cast<T>();
    t.normal_slices = p.normal_slices.template cast<T>();
    t.abnormal_slices = p.abnormal_slices.template cast<T>();
    t.slice_labels = p.slice_labels;
    return t;
  }
};

template <typename T>
struct JointLossNodes {
  int l2d_cls = -1, l_sim = -1, l3d = -1, combined = -1;
  int seg_a = -1, seg_n = -1, cls_a = -1, cls_n = -1, fn_a = -1, fn_n = -1;
  int c_nn = -1, c_aa = -1, c_na = -1, c_an = -1;
};

// The full joint loss graph. combined = L2d_cls + L3d + lambda1*L_sim; its
// gradient splits into dL_2d_total for 2D parameters and dL_3d_total for 3D
// parameters because L2d_cls touches only the 2D net and L3d only the 3D
// net.
template <typename T>
JointLossNodes<T> build_joint_loss(Graph<T>& g, Net2D<T>& net2d, Net3D<T>& net3d,
                                   const PairTensors<T>& pair, const TrainConfig& cfg,
                                   nets::Bindings<T>& bind2, nets::Bindings<T>& bind3) {
  auto f2n = net2d.forward(g, pair.normal_slices, bind2);
  auto f2a = net2d.forward(g, pair.abnormal_slices, bind2);
  auto f3n = net3d.forward(g, pair.normal3d, bind3);
  auto f3a = net3d.forward(g, pair.abnormal3d, bind3);

  int b = net3d.cfg.bottleneck_extent(), F = net3d.cfg.bottleneck_channels;
  int r2n = nets::reduce_latent_node(g, f2n.stacked, b, F, cfg.reduction);
  int r2a = nets::reduce_latent_node(g, f2a.stacked, b, F, cfg.reduction);
  int s2n = cfg.stop_grad_2d ? g.stopgrad(r2n) : r2n;
  int s2a = cfg.stop_grad_2d ? g.stopgrad(r2a) : r2a;
  int s3n = cfg.stop_grad_3d ? g.stopgrad(f3n.latent) : f3n.latent;
  int s3a = cfg.stop_grad_3d ? g.stopgrad(f3a.latent) : f3a.latent;

  JointLossNodes<T> n;
  n.c_nn = g.cosine(s2n, s3n);
  n.c_aa = g.cosine(s2a, s3a);
  n.c_na = g.cosine(s2n, s3a);
  n.c_an = g.cosine(s2a, s3n);
  n.l_sim = g.lincomb({{T(1), g.affine(n.c_nn, T(-1), T(1))},
                       {T(1), g.affine(n.c_aa, T(-1), T(1))},
                       {T(1), g.relu(n.c_na)},
                       {T(1), g.relu(n.c_an)}});

  Tensor<T> labels({static_cast<int>(pair.slice_labels.size()), 1});
  for (std::size_t i = 0; i < pair.slice_labels.size(); ++i)
    labels.v[i] = static_cast<T>(pair.slice_labels[i]);
  double W = cfg.use_wbce ? wbce_weight(pair.slice_labels) : 1.0;
  n.l2d_cls = g.bce_logits(f2a.score_logits, labels, static_cast<T>(W));

  Tensor<T> zeros(pair.label3d.shape, T(0));
  Tensor<T> one({1, 1}, T(1)), zero({1, 1}, T(0));
  n.seg_a = g.bce_logits(f3a.seg_logits, pair.label3d, T(1));
  n.seg_n = g.bce_logits(f3n.seg_logits, zeros, T(1));
  n.cls_a = g.bce_logits(f3a.cls_logits, one, T(1));
  n.cls_n = g.bce_logits(f3n.cls_logits, zero, T(1));
  n.fn_a = g.fnfp_smooth(f3a.seg, pair.label3d, static_cast<T>(fnfp_sharpness));
  n.fn_n = g.fnfp_smooth(f3n.seg, zeros, static_cast<T>(fnfp_sharpness));
  T lf = static_cast<T>(cfg.lambda_fnfp);
  n.l3d = g.lincomb({{T(0.5), n.seg_a},
                     {T(0.5), n.seg_n},
                     {T(0.5), n.cls_a},
                     {T(0.5), n.cls_n},
                     {T(0.5) * lf, n.fn_a},
                     {T(0.5) * lf, n.fn_n}});
  n.combined = g.lincomb(
      {{T(1), n.l2d_cls}, {T(1), n.l3d}, {static_cast<T>(cfg.lambda1), n.l_sim}});
  return n;
}

class JointTrainer {
 public:
  explicit JointTrainer(const TrainConfig& cfg)
      : cfg_(cfg), net2d_(cfg.net2d_config()), net3d_(cfg.net3d_config()) {
    Rng r2(cfg.seed ^ 0x2d2d2d2dULL);
    Rng r3(cfg.seed ^ 0x3d3d3d3dULL);
    net2d_.init(r2);
    net3d_.init(r3);
    net2d_.for_each_param(
        [this](const std::string& n, Tensor<float>& t, int) { group2d_.add(n, &t); });
    net3d_.for_each_param(
        [this](const std::string& n, Tensor<float>& t, int) { group3d_.add(n, &t); });
    for (std::size_t i = 0; i < group2d_.size(); ++i) index2d_[group2d_.params[i]] = i;
    for (std::size_t i = 0; i < group3d_.size(); ++i) index3d_[group3d_.params[i]] = i;
  }

  Net2D<float>& net2d() { return net2d_; }
  Net3D<float>& net3d() { return net3d_; }
  const TrainConfig& cfg() const { return cfg_; }

  void zero_grads() {
    group2d_.zero_grads();
    group3d_.zero_grads();
  }

  // Adds this pair's gradients of L_2d_total (for the 2D net) and
  // L_3d_total (for the 3D net) into the accumulators. One graph serves
  // both: d(L2d_cls + L3d + lambda1*L_sim) splits exactly that way because
  // L2d_cls only touches 2D parameters and L3d only 3D parameters.
  StepMetrics accumulate_gradients(const PairBatch& pair) {
    Graph<float> g;
    nets::Bindings<float> bind2, bind3;
    PairTensors<float> pt = PairTensors<float>::from(pair);
    JointLossNodes<float> n = build_joint_loss(g, net2d_, net3d_, pt, cfg_, bind2, bind3);
    g.backward(n.combined);

    for (auto& [ptr, nid] : bind2) {
      Tensor<float>& acc = group2d_.grads[index2d_.at(ptr)];
      const Tensor<float>& gg = g.grad(nid);
      for (std::size_t j = 0; j < gg.size(); ++j) acc.v[j] += gg.v[j];
    }
    for (auto& [ptr, nid] : bind3) {
      Tensor<float>& acc = group3d_.grads[index3d_.at(ptr)];
      const Tensor<float>& gg = g.grad(nid);
      for (std::size_t j = 0; j < gg.size(); ++j) acc.v[j] += gg.v[j];
    }

    StepMetrics m;
    m.l2d_cls = g.scalar(n.l2d_cls);
    m.l_sim = g.scalar(n.l_sim);
    m.l2d_total = m.l2d_cls + cfg_.lambda1 * m.l_sim;
    m.l3d_seg = 0.5 * (g.scalar(n.seg_a) + g.scalar(n.seg_n));
    m.l3d_cls = 0.5 * (g.scalar(n.cls_a) + g.scalar(n.cls_n));
    m.l3d_fnfp = 0.5 * (g.scalar(n.fn_a) + g.scalar(n.fn_n));
    m.l3d = g.scalar(n.l3d);
    m.l3d_total = m.l3d + cfg_.lambda1 * m.l_sim;
    m.cos_pos = 0.5 * (g.scalar(n.c_nn) + g.scalar(n.c_aa));
    m.cos_neg = 0.5 * (g.scalar(n.c_na) + g.scalar(n.c_an));
    check_finite(m);
    return m;
  }

  void apply_update(double lr) {
    adam2d_.step(group2d_, lr);
    adam3d_.step(group3d_, lr);
  }

  // One optimizer update from one pair.
  StepMetrics train_step(const PairBatch& pair, double lr) {
    zero_grads();
    StepMetrics m = accumulate_gradients(pair);
    m.lr = lr;
    apply_update(lr);
    return m;
  }

  checkpoint::Checkpoint to_checkpoint() {
    checkpoint::Checkpoint c = nets::net_to_checkpoint(net2d_, "net2d");
    checkpoint::Checkpoint c3 = nets::net_to_checkpoint(net3d_, "net3d");
    for (auto& [k, v] : c3.blocks) c.blocks[k] = std::move(v);
    c.meta["net"] = "joint";
    c.meta["config"] = cfg_.resolved().to_string();
    return c;
  }

  void from_checkpoint(const checkpoint::Checkpoint& c) {
    nets::net_from_checkpoint(net2d_, c, "net2d");
    nets::net_from_checkpoint(net3d_, c, "net3d");
  }

 private:
  static void check_finite(const StepMetrics& m) {
    auto chk = [](double v, const char* name) {
      if (!std::isfinite(v)) throw numeric_divergence_error(name, v);
    };
    chk(m.l2d_cls, "l2d_cls");
    chk(m.l_sim, "l_sim");
    chk(m.l3d_seg, "l3d_seg");
    chk(m.l3d_cls, "l3d_cls");
    chk(m.l3d_fnfp, "l3d_fnfp");
  }

  TrainConfig cfg_;
  Net2D<float> net2d_;
  Net3D<float> net3d_;
  optim::ParamGroup<float> group2d_, group3d_;
  optim::Adam<float> adam2d_, adam3d_;
  std::unordered_map<Tensor<float>*, std::size_t> index2d_, index3d_;
};

// -------- pretask training --------

struct PretaskResult {
  std::vector<double> epoch_losses;
  pretask::Kind kind = pretask::Kind::scatter30;
};

// Warms up the 3D network on one self-supervised pretask. Classification
// kinds train the encoder through a transient head; reconstruction kinds
// train encoder and decoder through the existing output head.
inline PretaskResult run_pretask_training(Net3D<float>& net, const TrainConfig& cfg,
                                          const std::vector<Volume3D>& volumes_lo,
                                          pretask::Kind kind) {
  if (volumes_lo.empty()) throw std::invalid_argument("pretask: no training volumes");
  optim::ParamGroup<float> group;
  net.for_each_param([&group](const std::string& n, Tensor<float>& t, int) { group.add(n, &t); });

  Rng head_rng(cfg.seed ^ 0xbead5ULL);
  pretask::JigsawCatalog catalog;
  int K = 0;
  Tensor<float> head_w, head_b, head2_w, head2_b;
  int F = net.cfg.bottleneck_channels, hh = net.cfg.head_hidden;
  if (pretask::is_classification(kind)) {
    if (kind == pretask::Kind::jigsaw)
      catalog = pretask::make_jigsaw_catalog(cfg.seed ^ 0x8f8f8fULL, cfg.jigsaw_catalog);
    K = pretask::class_count(kind, &catalog);
    if (kind == pretask::Kind::index) {
      head_w = Tensor<float>({hh, 2 * F});
      head_b = Tensor<float>({hh});
      head2_w = Tensor<float>({K, hh});
      head2_b = Tensor<float>({K});
      nets::init_uniform(head_w, 2 * F, head_rng);
      nets::init_uniform(head2_w, hh, head_rng);
      group.add("pretask.h1.w", &head_w);
      group.add("pretask.h1.b", &head_b);
      group.add("pretask.h2.w", &head2_w);
      group.add("pretask.h2.b", &head2_b);
    } else {
      head_w = Tensor<float>({K, F});
      head_b = Tensor<float>({K});
      nets::init_uniform(head_w, F, head_rng);
      group.add("pretask.head.w", &head_w);
      group.add("pretask.head.b", &head_b);
    }
  } else {
    // Transient reconstruction head; the anomaly segmentation head stays at
    // its initialization so fine-tuning starts from a task-neutral output.
    int c0 = net.cfg.channels(0);
    head_w = Tensor<float>({1, c0, 1, 1, 1});
    head_b = Tensor<float>({1});
    nets::init_uniform(head_w, c0, head_rng);
    group.add("pretask.recon.w", &head_w);
    group.add("pretask.recon.b", &head_b);
  }

  optim::Adam<float> adam;
  ScheduleSpec sched{cfg.pretask_lr_lo, cfg.pretask_lr_hi,
                     static_cast<std::int64_t>(cfg.pretask_epochs) * static_cast<std::int64_t>(volumes_lo.size())};
  PretaskResult res;
  res.kind = kind;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.pretask_epochs; ++epoch) {
    double epoch_loss = 0;
    for (std::size_t i = 0; i < volumes_lo.size(); ++i) {
      Rng rng(item_seed(cfg.seed ^ 0x9e7a5cULL,
                        static_cast<std::uint64_t>(epoch) * volumes_lo.size() + i));
      const Volume3D& v = volumes_lo[i];
      Graph<float> g;
      nets::Bindings<float> bind;
      int loss = -1;
      switch (kind) {
        case pretask::Kind::rotation: {
          auto [rot, cls] = pretask::rotation_sample(v, rng);
          int q = net.encode_gap(g, detail::grid_to_tensor5(rot.voxels, v.size), bind);
          int hw = g.param(head_w);
          int hb = g.param(head_b);
          bind.emplace_back(&head_w, hw);
          bind.emplace_back(&head_b, hb);
          loss = g.softmax_ce(g.dense(q, hw, hb), {cls});
          break;
        }
        case pretask::Kind::jigsaw: {
          auto [shuf, id] = pretask::jigsaw_sample(v, catalog, rng);
          int q = net.encode_gap(g, detail::grid_to_tensor5(shuf.voxels, v.size), bind);
          int hw = g.param(head_w);
          int hb = g.param(head_b);
          bind.emplace_back(&head_w, hw);
          bind.emplace_back(&head_b, hb);
          loss = g.softmax_ce(g.dense(q, hw, hb), {id});
          break;
        }
        case pretask::Kind::index: {
          int extent = v.size / cfg.index_patch_div;
          pretask::IndexSample s = pretask::index_sample(v, extent, rng);
          Tensor<float> ref({1, 1, extent, extent, extent});
          Tensor<float> qry({1, 1, extent, extent, extent});
          std::copy(s.reference_patch.begin(), s.reference_patch.end(), ref.v.begin());
          std::copy(s.query_patch.begin(), s.query_patch.end(), qry.v.begin());
          int qa = net.encode_gap(g, ref, bind);
          int qb = net.encode_gap(g, qry, bind);
          int cat = g.concat_ch(qa, qb);
          int h1w = g.param(head_w), h1b = g.param(head_b);
          int h2w = g.param(head2_w), h2b = g.param(head2_b);
          bind.emplace_back(&head_w, h1w);
          bind.emplace_back(&head_b, h1b);
          bind.emplace_back(&head2_w, h2w);
          bind.emplace_back(&head2_b, h2b);
          int hmid = g.silu(g.dense(cat, h1w, h1b));
          loss = g.softmax_ce(g.dense(hmid, h2w, h2b), {s.class_id});
          break;
        }
        case pretask::Kind::box:
        case pretask::Kind::scatter30:
        case pretask::Kind::scatter50: {
          pretask::ReconTarget t =
              kind == pretask::Kind::box
                  ? pretask::box_corrupt(v, rng)
                  : pretask::scatter_corrupt(v, kind == pretask::Kind::scatter30 ? 0.3 : 0.5, rng);
          auto out = net.forward(g, detail::grid_to_tensor5(t.corrupted.voxels, v.size), bind);
          int hw = g.param(head_w);
          int hb = g.param(head_b);
          bind.emplace_back(&head_w, hw);
          bind.emplace_back(&head_b, hb);
          int recon = g.sigmoid(g.conv3d(out.decoder, hw, hb, 1));
          loss = g.mse(recon, detail::grid_to_tensor5(t.original.voxels, v.size));
          break;
        }
      }
      g.backward(loss);
      group.zero_grads();
      std::unordered_map<Tensor<float>*, std::size_t> index;
      for (std::size_t pi = 0; pi < group.size(); ++pi) index[group.params[pi]] = pi;
      for (auto& [ptr, nid] : bind) {
        const Tensor<float>& gg = g.grad(nid);
        Tensor<float>& acc = group.grads[index.at(ptr)];
        for (std::size_t j = 0; j < gg.size(); ++j) acc.v[j] += gg.v[j];
      }
      double lv = g.scalar(loss);
      if (!std::isfinite(lv)) throw numeric_divergence_error("pretask_loss", lv);
      epoch_loss += lv;
      adam.step(group, one_cycle_lr(step, sched));
      ++step;
    }
    res.epoch_losses.push_back(epoch_loss / static_cast<double>(volumes_lo.size()));
  }
  return res;
}

// -------- full training run --------

struct RunResult {
  std::vector<StepMetrics> epoch_means;
  std::string final_checkpoint;
  std::string metrics_path;
};

// Dataset at 2D resolution plus index splits.
struct Dataset {
  std::vector<Volume3D> volumes_hi;
  volcore::Split split;

  std::vector<Volume3D> lo_res(const std::vector<int>& ids) const {
    std::vector<Volume3D> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(volcore::downsample2x(volumes_hi[static_cast<std::size_t>(i)]));
    return out;
  }
};

inline Dataset make_synthetic_dataset(int n, int size2d, std::uint64_t seed) {
  Dataset d;
  d.volumes_hi.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    d.volumes_hi.push_back(volcore::make_phantom(item_seed(seed, static_cast<std::uint64_t>(i)), size2d));
  volcore::SplitSpec spec;
  spec.seed = seed;
  d.split = volcore::split_ids(n, spec);
  return d;
}

inline void save_dataset(const Dataset& d, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir + "/volumes");
  char name[64];
  for (std::size_t i = 0; i < d.volumes_hi.size(); ++i) {
    std::snprintf(name, sizeof(name), "vol_%04zu.jvol", i);
    volcore::write_volume(d.volumes_hi[i], dir + "/volumes/" + name);
  }
  std::ofstream out(dir + "/splits.txt", std::ios::trunc);
  if (!out) throw std::runtime_error("save_dataset: cannot write splits in " + dir);
  auto line = [&out](const char* tag, const std::vector<int>& ids) {
    out << tag << ":";
    for (int i : ids) out << " " << i;
    out << "\n";
  };
  line("train", d.split.train);
  line("val", d.split.val);
  line("test", d.split.test);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset d;
  std::vector<std::string> files;
  if (!fs::is_directory(dir + "/volumes"))
    throw std::runtime_error("load_dataset: " + dir + "/volumes is not a directory");
  for (const auto& e : fs::directory_iterator(dir + "/volumes"))
    if (e.path().extension() == ".jvol") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) d.volumes_hi.push_back(volcore::read_volume(f));
  std::ifstream in(dir + "/splits.txt");
  if (!in) throw std::runtime_error("load_dataset: missing " + dir + "/splits.txt");
  std::string line;
  while (std::getline(in, line)) {
    auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::string tag = line.substr(0, colon);
    std::istringstream rest(line.substr(colon + 1));
    std::vector<int>* dst = tag == "train"  ? &d.split.train
                            : tag == "val"  ? &d.split.val
                            : tag == "test" ? &d.split.test
                                            : nullptr;
    if (!dst) continue;
    int id;
    while (rest >> id) dst->push_back(id);
  }
  return d;
}

inline void write_metrics_header(std::ofstream& out) {
  out << "epoch\tlr\tl2d_cls\tl_sim\tl2d_total\tl3d_seg\tl3d_cls\tl3d_fnfp\tl3d\tl3d_total"
      << "\tcos_pos\tcos_neg\n";
}

inline void write_metrics_row(std::ofstream& out, int epoch, const StepMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%d\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\n", epoch,
                m.lr, m.l2d_cls, m.l_sim, m.l2d_total, m.l3d_seg, m.l3d_cls, m.l3d_fnfp, m.l3d,
                m.l3d_total, m.cos_pos, m.cos_neg);
  out << buf;
}

// Two-stage orchestration: optional pretask checkpoint load, optional 2D
// pretraining (from checkpoint, or run inline when no path is configured),
// then the joint loop with per-item seeding and a one-cycle schedule.
inline RunResult run_training(JointTrainer& trainer, const Dataset& data,
                              const std::string& out_dir) {
  const TrainConfig& cfg = trainer.cfg();
  if (cfg.threads > 0) ThreadPool::set_threads(cfg.threads);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/checkpoints");
  trainer.cfg().resolved().save(out_dir + "/config.resolved");

  if (cfg.use_3d_pretask) {
    if (cfg.pretask_checkpoint.empty())
      throw config_error("use_3d_pretask = 1 but no pretask_checkpoint configured");
    checkpoint::Checkpoint c = checkpoint::load_checkpoint(cfg.pretask_checkpoint);
    nets::net_from_checkpoint(trainer.net3d(), c, "net3d");
  }
  if (cfg.use_2d_pretrain) {
    if (!cfg.pretrain2d_checkpoint.empty()) {
      checkpoint::Checkpoint c = checkpoint::load_checkpoint(cfg.pretrain2d_checkpoint);
      nets::net_from_checkpoint(trainer.net2d(), c, "net2d");
    } else {
      nets::pretrain2d_proxy(trainer.net2d(), cfg.seed ^ 0x2d70ULL, cfg.pretrain2d_steps,
                             cfg.pretrain2d_batch, cfg.pretrain2d_target);
    }
  }

  const std::vector<int>& train_ids = data.split.train;
  if (train_ids.empty()) throw config_error("run_training: empty training split");
  std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(train_ids.size()) + cfg.batch_size - 1) / cfg.batch_size;
  ScheduleSpec sched{cfg.lr_lo, cfg.lr_hi, cfg.epochs * steps_per_epoch};

  std::ofstream metrics(out_dir + "/metrics.tsv", std::ios::trunc);
  if (!metrics) throw std::runtime_error("run_training: cannot write metrics in " + out_dir);
  write_metrics_header(metrics);

  RunResult res;
  res.metrics_path = out_dir + "/metrics.tsv";
  std::int64_t opt_step = 0;
  std::uint64_t item_counter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = train_ids;
    Rng shuffle_rng(cfg.seed ^ (0xe70c0000ULL + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());

    StepMetrics mean;
    int in_batch = 0;
    int steps_in_epoch = 0;
    trainer.zero_grads();
    for (std::size_t i = 0; i < order.size(); ++i) {
      Rng pair_rng(item_seed(cfg.seed, item_counter++));
      PairBatch pair =
          build_pair(data.volumes_hi[static_cast<std::size_t>(order[i])], cfg, pair_rng);
      StepMetrics m = trainer.accumulate_gradients(pair);
      ++in_batch;
      bool last = i + 1 == order.size();
      if (in_batch == cfg.batch_size || last) {
        double lr = one_cycle_lr(opt_step, sched);
        trainer.apply_update(lr);
        ++opt_step;
        trainer.zero_grads();
        in_batch = 0;
        m.lr = lr;
        ++steps_in_epoch;
      }
      mean.l2d_cls += m.l2d_cls;
      mean.l_sim += m.l_sim;
      mean.l2d_total += m.l2d_total;
      mean.l3d_seg += m.l3d_seg;
      mean.l3d_cls += m.l3d_cls;
      mean.l3d_fnfp += m.l3d_fnfp;
      mean.l3d += m.l3d;
      mean.l3d_total += m.l3d_total;
      mean.cos_pos += m.cos_pos;
      mean.cos_neg += m.cos_neg;
      if (m.lr > 0) mean.lr = m.lr;
    }
    double n = static_cast<double>(order.size());
    mean.l2d_cls /= n;
    mean.l_sim /= n;
    mean.l2d_total /= n;
    mean.l3d_seg /= n;
    mean.l3d_cls /= n;
    mean.l3d_fnfp /= n;
    mean.l3d /= n;
    mean.l3d_total /= n;
    mean.cos_pos /= n;
    mean.cos_neg /= n;
    res.epoch_means.push_back(mean);
    write_metrics_row(metrics, epoch, mean);
    metrics.flush();

    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        epoch + 1 != cfg.epochs) {
      checkpoint::Checkpoint c = trainer.to_checkpoint();
      c.meta["epoch"] = std::to_string(epoch + 1);
      checkpoint::save_checkpoint(c, out_dir + "/checkpoints/epoch_" + std::to_string(epoch + 1) +
                                         ".jckpt");
    }
  }
  checkpoint::Checkpoint final_c = trainer.to_checkpoint();
  final_c.meta["epoch"] = std::to_string(cfg.epochs);
  res.final_checkpoint = out_dir + "/checkpoints/final.jckpt";
  checkpoint::save_checkpoint(final_c, res.final_checkpoint);
  return res;
}

}  // namespace jointad::jointtrain

#endif  // JOINTAD_JOINTTRAIN_HPP

#ifndef JOINTAD_EVALKIT_HPP
#define JOINTAD_EVALKIT_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "jointad/anomaly.hpp"
#include "jointad/common.hpp"
#include "jointad/jointtrain.hpp"
#include "jointad/nets.hpp"
#include "jointad/plot.hpp"
#include "jointad/volume.hpp"

namespace jointad::evalkit {

using anomaly::AugKind;
using anomaly::MaskTestCase;
using nets::Net2D;
using nets::Net3D;
using volcore::Volume3D;

// -------- average precision --------

// Rank-based AP: sort by score descending (ties broken by original index),
// AP = (1/P) * sum over positive positions of precision@k.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("average_precision: length mismatch");
  std::size_t positives = 0;
  for (int y : labels) positives += y != 0;
  if (positives == 0)
    throw undefined_metric_error("average_precision: no positive labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]]) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  return ap / static_cast<double>(positives);
}

// -------- model scoring --------

struct VolumeScores {
  std::vector<float> seg;  // per-voxel probabilities at 3D resolution
  double cls = 0.0;
};

// Forward-only pass of the 3D network on a grid at 2D resolution (pooled
// down internally).
inline VolumeScores score_volume(Net3D<float>& net, const std::vector<float>& grid_hi,
                                 int size_hi) {
  std::vector<float> lo = volcore::downsample2x_grid(grid_hi, size_hi);
  int s = size_hi / 2;
  Tensor<float> in({1, 1, s, s, s});
  std::copy(lo.begin(), lo.end(), in.v.begin());
  graph::Graph<float> g;
  nets::Bindings<float> bind;
  auto out = net.forward(g, in, bind);
  VolumeScores vs;
  vs.seg = g.val(out.seg).v;
  vs.cls = g.val(out.cls).v[0];
  return vs;
}

// Per-slice scores of the 2D network on the canonical z slicing.
inline std::vector<double> score_slices(Net2D<float>& net, const std::vector<float>& grid_hi,
                                        int size_hi) {
  Tensor<float> slices({size_hi, 1, size_hi, size_hi});
  std::copy(grid_hi.begin(), grid_hi.end(), slices.v.begin());
  graph::Graph<float> g;
  nets::Bindings<float> bind;
  auto out = net.forward(g, slices, bind);
  const Tensor<float>& sc = g.val(out.scores);
  return std::vector<double>(sc.v.begin(), sc.v.end());
}

// -------- hard-augmentation test harness --------

// Table column order.
inline constexpr std::array<AugKind, 6> report_kind_order = {
    AugKind::rotation, AugKind::scar, AugKind::sobel,
    AugKind::copy_paste, AugKind::permutation, AugKind::mask};

struct EvalItem {
  Volume3D base_hi;
  std::vector<anomaly::AnomalyRecord> records;  // one per kind, at 2D resolution
};

// Per base volume: one record per augmentation kind plus the pristine
// volume itself (scored as the negative).
inline std::vector<EvalItem> make_eval_testset(const std::vector<Volume3D>& bases,
                                               std::uint64_t seed, int max_attempts = 10) {
  std::vector<EvalItem> items;
  items.reserve(bases.size());
  for (std::size_t i = 0; i < bases.size(); ++i) {
    EvalItem item;
    item.base_hi = bases[i];
    for (AugKind k : report_kind_order) {
      Rng rng(item_seed(seed ^ (0x7e57ULL + static_cast<std::uint64_t>(k) * 7919), i));
      item.records.push_back(anomaly::synth_ood(bases[i], k, rng, max_attempts));
    }
    items.push_back(std::move(item));
  }
  return items;
}

struct KindResult {
  double seg_ap = 0.0;
  double cls_ap = 0.0;
  double slice_cls_ap_2d = 0.0;  // supplementary, slice-level 2D head
};

struct EvalReport {
  std::vector<std::pair<AugKind, KindResult>> per_kind;  // in table order
  double total_seg_ap = 0.0;
  double total_cls_ap = 0.0;        // mean over augmentation columns
  double total_cls_ap_pooled = 0.0; // all samples jointly (alternative reading)
  int n_volumes = 0;
  std::uint64_t seed = 0;
  std::string config_echo;
};

// Segmentation pools voxels across abnormal volumes within a kind
// (pixel-level AP); classification scores abnormal volumes of the kind as
// positives against every pristine volume (sample-level AP).
inline EvalReport evaluate_model(Net2D<float>& net2d, Net3D<float>& net3d,
                                 const std::vector<EvalItem>& testset, bool with_2d = true) {
  if (testset.empty()) throw std::invalid_argument("evaluate_model: empty testset");
  EvalReport rep;
  rep.n_volumes = static_cast<int>(testset.size());
  int size_hi = testset[0].base_hi.size;

  std::vector<double> pristine_cls;
  std::vector<std::vector<double>> pristine_slice_scores;
  for (const auto& item : testset) {
    pristine_cls.push_back(score_volume(net3d, item.base_hi.voxels, size_hi).cls);
    if (with_2d)
      pristine_slice_scores.push_back(score_slices(net2d, item.base_hi.voxels, size_hi));
  }

  std::vector<double> all_cls_scores;
  std::vector<int> all_cls_labels;
  for (double s : pristine_cls) {
    all_cls_scores.push_back(s);
    all_cls_labels.push_back(0);
  }

  for (std::size_t ki = 0; ki < report_kind_order.size(); ++ki) {
    AugKind kind = report_kind_order[ki];
    std::vector<double> seg_scores, cls_scores, slice_scores;
    std::vector<int> seg_labels, cls_labels, slice_labels;
    for (double s : pristine_cls) {
      cls_scores.push_back(s);
      cls_labels.push_back(0);
    }
    for (const auto& item : testset) {
      const anomaly::AnomalyRecord& rec = item.records[ki];
      VolumeScores vs = score_volume(net3d, rec.volume.voxels, size_hi);
      std::vector<std::uint8_t> label_lo = volcore::downsample2x_label(rec.label, size_hi);
      for (std::size_t i = 0; i < vs.seg.size(); ++i) {
        seg_scores.push_back(vs.seg[i]);
        seg_labels.push_back(label_lo[i]);
      }
      cls_scores.push_back(vs.cls);
      cls_labels.push_back(1);
      all_cls_scores.push_back(vs.cls);
      all_cls_labels.push_back(1);
      if (with_2d) {
        std::vector<double> sc = score_slices(net2d, rec.volume.voxels, size_hi);
        std::size_t plane = static_cast<std::size_t>(size_hi) * size_hi;
        for (int k = 0; k < size_hi; ++k) {
          std::size_t on = 0;
          for (std::size_t i = 0; i < plane; ++i)
            on += rec.label[static_cast<std::size_t>(k) * plane + i];
          slice_scores.push_back(sc[static_cast<std::size_t>(k)]);
          slice_labels.push_back(on > 0 ? 1 : 0);
        }
      }
    }
    if (with_2d)
      for (const auto& ps : pristine_slice_scores)
        for (double s : ps) {
          slice_scores.push_back(s);
          slice_labels.push_back(0);
        }
    KindResult kr;
    kr.seg_ap = average_precision(seg_scores, seg_labels);
    kr.cls_ap = average_precision(cls_scores, cls_labels);
    if (with_2d) kr.slice_cls_ap_2d = average_precision(slice_scores, slice_labels);
    rep.per_kind.emplace_back(kind, kr);
  }
  for (const auto& [k, kr] : rep.per_kind) {
    rep.total_seg_ap += kr.seg_ap;
    rep.total_cls_ap += kr.cls_ap;
  }
  rep.total_seg_ap /= static_cast<double>(rep.per_kind.size());
  rep.total_cls_ap /= static_cast<double>(rep.per_kind.size());
  rep.total_cls_ap_pooled = average_precision(all_cls_scores, all_cls_labels);
  return rep;
}

// -------- mask test grid evaluation --------

struct MaskGridReport {
  int case_count = 0;
  int degenerate_count = 0;
  std::array<double, 2> seg_by_shape{}, cls_by_shape{};
  std::array<double, 27> seg_by_position{}, cls_by_position{};
  std::array<double, 3> seg_by_size{}, cls_by_size{};
  std::array<double, 4> seg_by_intensity{}, cls_by_intensity{};
  // [size][intensity] joint buckets; the acceptance benchmark reads
  // (largest size, chosen intensity).
  std::array<std::array<double, 4>, 3> seg_bucket{}, cls_bucket{};
};

// Marginal AP over each factor; degenerate (empty-label) cases are excluded
// and counted. Negatives: per-case cls uses the supplied pristine volumes.
inline MaskGridReport evaluate_mask_grid(Net3D<float>& net3d,
                                         const std::vector<MaskTestCase>& cases,
                                         const std::vector<Volume3D>& negatives_hi) {
  if (cases.empty()) throw std::invalid_argument("evaluate_mask_grid: no cases");
  int size_hi = cases[0].record.volume.size;

  struct CaseScore {
    const MaskTestCase* c;
    VolumeScores vs;
    std::vector<std::uint8_t> label_lo;
  };
  std::vector<CaseScore> scored;
  int degenerate = 0;
  for (const auto& c : cases) {
    if (c.degenerate) {
      ++degenerate;
      continue;
    }
    CaseScore cs;
    cs.c = &c;
    cs.vs = score_volume(net3d, c.record.volume.voxels, size_hi);
    cs.label_lo = volcore::downsample2x_label(c.record.label, size_hi);
    scored.push_back(std::move(cs));
  }
  if (scored.empty())
    throw undefined_metric_error("evaluate_mask_grid: all cases degenerate");

  std::vector<double> neg_cls;
  for (const auto& v : negatives_hi) neg_cls.push_back(score_volume(net3d, v.voxels, size_hi).cls);

  auto marginal = [&](auto pred, double& seg_out, double& cls_out) {
    std::vector<double> seg_scores, cls_scores;
    std::vector<int> seg_labels, cls_labels;
    for (const auto& cs : scored) {
      if (!pred(*cs.c)) continue;
      for (std::size_t i = 0; i < cs.vs.seg.size(); ++i) {
        seg_scores.push_back(cs.vs.seg[i]);
        seg_labels.push_back(cs.label_lo[i]);
      }
      cls_scores.push_back(cs.vs.cls);
      cls_labels.push_back(1);
    }
    if (cls_scores.empty()) {
      seg_out = std::nan("");
      cls_out = std::nan("");
      return;
    }
    // Balance negatives against bucket positives by cycling the pristine pool.
    std::size_t n_pos = cls_scores.size();
    for (std::size_t i = 0; i < n_pos && !neg_cls.empty(); ++i) {
      cls_scores.push_back(neg_cls[i % neg_cls.size()]);
      cls_labels.push_back(0);
    }
    seg_out = average_precision(seg_scores, seg_labels);
    cls_out = neg_cls.empty() ? std::nan("") : average_precision(cls_scores, cls_labels);
  };

  MaskGridReport rep;
  rep.case_count = static_cast<int>(cases.size());
  rep.degenerate_count = degenerate;
  for (int s = 0; s < 2; ++s)
    marginal([s](const MaskTestCase& c) { return static_cast<int>(c.shape) == s; },
             rep.seg_by_shape[static_cast<std::size_t>(s)], rep.cls_by_shape[static_cast<std::size_t>(s)]);
  for (int p = 0; p < 27; ++p)
    marginal([p](const MaskTestCase& c) { return c.position_index == p; },
             rep.seg_by_position[static_cast<std::size_t>(p)], rep.cls_by_position[static_cast<std::size_t>(p)]);
  for (int s = 0; s < 3; ++s)
    marginal([s](const MaskTestCase& c) { return c.size_index == s; },
             rep.seg_by_size[static_cast<std::size_t>(s)], rep.cls_by_size[static_cast<std::size_t>(s)]);
  for (int i = 0; i < 4; ++i)
    marginal([i](const MaskTestCase& c) { return c.intensity_index == i; },
             rep.seg_by_intensity[static_cast<std::size_t>(i)], rep.cls_by_intensity[static_cast<std::size_t>(i)]);
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < 4; ++i)
      marginal([s, i](const MaskTestCase& c) { return c.size_index == s && c.intensity_index == i; },
               rep.seg_bucket[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)],
               rep.cls_bucket[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]);
  return rep;
}

// -------- ablation harness --------

struct AblationRow {
  bool use_2d_pretrain = true;
  bool use_3d_pretask = true;
  bool use_wbce = true;
  bool use_label_smoothing = true;
  double seg_ap = 0.0;
  double cls_ap = 0.0;
};

// The five-row grid: each single toggle off, plus all-on. Seeds and data are
// shared across rows; the pretask and 2D pretraining checkpoints are trained
// once and reused by every row that enables them.
inline std::vector<AblationRow> run_ablation(const jointtrain::TrainConfig& base,
                                             const jointtrain::Dataset& data,
                                             const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  jointtrain::TrainConfig shared = base;
  std::string pretask_path;
  if (shared.pretask != "none") {
    Net3D<float> pre_net(shared.net3d_config());
    Rng r3(shared.seed ^ 0x3d3d3d3dULL);
    pre_net.init(r3);
    auto volumes_lo = data.lo_res(data.split.train);
    jointtrain::run_pretask_training(pre_net, shared, volumes_lo,
                                     pretask::kind_from_name(shared.pretask));
    checkpoint::Checkpoint c = nets::net_to_checkpoint(pre_net, "net3d");
    c.meta["pretask"] = shared.pretask;
    pretask_path = out_dir + "/pretask.jckpt";
    checkpoint::save_checkpoint(c, pretask_path);
  }
  std::string pretrain2d_path;
  {
    Net2D<float> pre2d(shared.net2d_config());
    Rng r2(shared.seed ^ 0x2d2d2d2dULL);
    pre2d.init(r2);
    nets::pretrain2d_proxy(pre2d, shared.seed ^ 0x2d70ULL, shared.pretrain2d_steps,
                           shared.pretrain2d_batch, shared.pretrain2d_target);
    checkpoint::Checkpoint c = nets::net_to_checkpoint(pre2d, "net2d");
    pretrain2d_path = out_dir + "/pretrain2d.jckpt";
    checkpoint::save_checkpoint(c, pretrain2d_path);
  }

  std::vector<Volume3D> test_bases;
  for (int id : data.split.test) test_bases.push_back(data.volumes_hi[static_cast<std::size_t>(id)]);
  auto testset = make_eval_testset(test_bases, base.seed ^ 0xab1a7eULL, base.max_attempts);

  // Table rows: each single toggle off, then all-on.
  std::vector<std::array<bool, 4>> rows = {{false, true, true, true},
                                           {true, false, true, true},
                                           {true, true, false, true},
                                           {true, true, true, false},
                                           {true, true, true, true}};
  std::vector<AblationRow> out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    jointtrain::TrainConfig cfg = base;
    cfg.use_2d_pretrain = rows[r][0];
    cfg.use_3d_pretask = rows[r][1];
    cfg.use_wbce = rows[r][2];
    cfg.use_label_smoothing = rows[r][3];
    cfg.pretask_checkpoint = cfg.use_3d_pretask ? pretask_path : "";
    cfg.pretrain2d_checkpoint = cfg.use_2d_pretrain ? pretrain2d_path : "";
    jointtrain::JointTrainer trainer(cfg);
    jointtrain::run_training(trainer, data, out_dir + "/row" + std::to_string(r));
    EvalReport rep = evaluate_model(trainer.net2d(), trainer.net3d(), testset, false);
    AblationRow row;
    row.use_2d_pretrain = rows[r][0];
    row.use_3d_pretask = rows[r][1];
    row.use_wbce = rows[r][2];
    row.use_label_smoothing = rows[r][3];
    row.seg_ap = rep.total_seg_ap;
    row.cls_ap = rep.total_cls_ap;
    out.push_back(row);
  }
  return out;
}

// -------- report rendering --------

inline const char* kind_column_name(AugKind k) {
  switch (k) {
    case AugKind::rotation: return "Rotation";
    case AugKind::scar: return "Scar";
    case AugKind::sobel: return "Sobel";
    case AugKind::copy_paste: return "Copy-Paste";
    case AugKind::permutation: return "Permutation";
    case AugKind::mask: return "Mask";
  }
  return "?";
}

// Plain-text table in the column order of the hard-augmentation tables,
// 4 decimals per cell. Byte-deterministic for a given report.
inline std::string format_report_table(const EvalReport& rep) {
  if (rep.per_kind.empty())
    throw std::invalid_argument("format_report_table: empty per-kind results");
  std::ostringstream os;
  os << "Task";
  for (const auto& [k, kr] : rep.per_kind) os << "\t" << kind_column_name(k);
  os << "\tTotal AP\n";
  char buf[32];
  os << "Seg";
  for (const auto& [k, kr] : rep.per_kind) {
    std::snprintf(buf, sizeof(buf), "\t%.4f", kr.seg_ap);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "\t%.4f", rep.total_seg_ap);
  os << buf << "\n";
  os << "Cls";
  for (const auto& [k, kr] : rep.per_kind) {
    std::snprintf(buf, sizeof(buf), "\t%.4f", kr.cls_ap);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "\t%.4f", rep.total_cls_ap);
  os << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.4f", rep.total_cls_ap_pooled);
  os << "Cls (all samples pooled)\t" << buf << "\n";
  os << "volumes\t" << rep.n_volumes << "\n";
  return os.str();
}

// Writes the table and, when metrics rows are given, a loss-curve plot.
inline void render_report(const EvalReport& rep, const std::string& out_path,
                          const std::vector<jointtrain::StepMetrics>& metrics = {}) {
  namespace fs = std::filesystem;
  fs::path base(out_path);
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  std::string table = format_report_table(rep);
  std::ofstream out(out_path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("render_report: cannot open " + out_path);
  out.write(table.data(), static_cast<std::streamsize>(table.size()));
  if (!out) throw std::runtime_error("render_report: short write to " + out_path);
  if (!metrics.empty()) {
    plot::Series l2d{"l2d_total", {}, 200, 40, 40};
    plot::Series l3d{"l3d_total", {}, 40, 80, 200};
    plot::Series lsim{"l_sim", {}, 30, 150, 60};
    for (const auto& m : metrics) {
      l2d.values.push_back(m.l2d_total);
      l3d.values.push_back(m.l3d_total);
      lsim.values.push_back(m.l_sim);
    }
    fs::path plot_path = base;
    plot_path.replace_extension(".bmp");
    plot::save_curves({l2d, l3d, lsim}, plot_path.string());
  }
}

inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "2D Pretraining\t3D Pretask\tWBCE\tLabel Smoothing\tSeg AP\tCls AP\n";
  char buf[64];
  for (const auto& r : rows) {
    os << (r.use_2d_pretrain ? "on" : "off") << "\t" << (r.use_3d_pretask ? "on" : "off") << "\t"
       << (r.use_wbce ? "on" : "off") << "\t" << (r.use_label_smoothing ? "on" : "off");
    std::snprintf(buf, sizeof(buf), "\t%.4f\t%.4f\n", r.seg_ap, r.cls_ap);
    os << buf;
  }
  return os.str();
}

}  // namespace jointad::evalkit

#endif  // JOINTAD_EVALKIT_HPP

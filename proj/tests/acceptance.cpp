// Acceptance suite: one criterion per invocation (argv = criterion numbers),
// all ten when run without arguments. Prints one PASS/FAIL line per
// criterion; exit 0 iff every requested criterion passed.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "jointad/anomaly.hpp"
#include "jointad/cubesym.hpp"
#include "jointad/evalkit.hpp"
#include "jointad/jointtrain.hpp"
#include "jointad/nets.hpp"
#include "jointad/parallel.hpp"
#include "jointad/pretask.hpp"
#include "jointad/volume.hpp"

using namespace jointad;
using volcore::Volume3D;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail = what;
    }
  }
};

// ---------- criterion 1: smooth_label + weighted BCE exactness ----------

Outcome criterion1() {
  Outcome o;
  using jointtrain::smooth_label;
  using jointtrain::wbce_weight;
  using jointtrain::weighted_bce;
  o.require(smooth_label(0.0) == 0.0, "smooth_label(0.0) != 0");
  o.require(smooth_label(0.029) == 0.0, "smooth_label(0.029) != 0");
  o.require(smooth_label(0.03) == 0.75, "smooth_label(0.03) != 0.75");
  o.require(smooth_label(0.06) == 0.75, "smooth_label(0.06) != 0.75");
  o.require(smooth_label(0.061) == 1.0, "smooth_label(0.061) != 1");

  Rng rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    int n = rng.range(1, 40);
    std::vector<double> p, y;
    bool any = false;
    for (int i = 0; i < n; ++i) {
      p.push_back(rng.uniform(1e-6, 1.0 - 1e-6));
      double lab = rng.range(0, 2) == 0 ? 0.0 : (rng.range(0, 1) ? 0.75 : 1.0);
      y.push_back(lab);
      any = any || lab > 0;
    }
    if (!any) y[static_cast<std::size_t>(rng.range(0, n - 1))] = 1.0;
    double W = wbce_weight(y);
    double want = 0;
    for (int i = 0; i < n; ++i) {
      double pc = std::clamp(p[static_cast<std::size_t>(i)], 1e-7, 1.0 - 1e-7);
      want -= W * y[static_cast<std::size_t>(i)] * std::log(pc) +
              (1.0 - y[static_cast<std::size_t>(i)]) * std::log(1.0 - pc);
    }
    want /= n;
    double got = weighted_bce(p, y, W);
    o.require(std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want)),
              "weighted_bce deviates from hand oracle by " + std::to_string(got - want));
    double plain = 0;
    for (int i = 0; i < n; ++i) {
      double pc = std::clamp(p[static_cast<std::size_t>(i)], 1e-7, 1.0 - 1e-7);
      plain -= y[static_cast<std::size_t>(i)] * std::log(pc) +
               (1.0 - y[static_cast<std::size_t>(i)]) * std::log(1.0 - pc);
    }
    plain /= n;
    o.require(std::abs(weighted_bce(p, y, 1.0) - plain) <= 1e-12, "W=1 is not plain BCE");
  }
  return o;
}

// ---------- criterion 2: similarity loss ----------

Outcome criterion2() {
  Outcome o;
  using jointtrain::LatentPair;
  using jointtrain::similarity_loss;
  auto mk = [](std::vector<double> a, std::vector<double> b, bool pos) {
    return LatentPair{std::move(a), std::move(b), pos};
  };
  double aligned = similarity_loss({mk({1, 0}, {1, 0}, true), mk({0, 1}, {0, 1}, true),
                                    mk({1, 0}, {0, 1}, false), mk({0, 1}, {1, 0}, false)});
  o.require(std::abs(aligned) <= 1e-12, "aligned/orthogonal case != 0");
  double swapped = similarity_loss({mk({1, 0}, {0, 1}, true), mk({0, 1}, {1, 0}, true),
                                    mk({1, 0}, {1, 0}, false), mk({0, 1}, {0, 1}, false)});
  o.require(std::abs(swapped - 4.0) <= 1e-12, "swapped case != 4");

  Rng rng(7);
  std::vector<double> a, b, c, d;
  for (int i = 0; i < 32; ++i) {
    a.push_back(rng.uniform(-1, 1));
    b.push_back(rng.uniform(-1, 1));
    c.push_back(rng.uniform(-1, 1));
    d.push_back(rng.uniform(-1, 1));
  }
  auto loss_of = [&](const std::vector<double>& aa) {
    return similarity_loss({mk(aa, b, true), mk(c, d, true), mk(aa, d, false), mk(c, b, false)});
  };
  double base = loss_of(a);
  for (int rep = 0; rep < 20; ++rep) {
    double s = std::exp(rng.uniform(-3, 3));
    std::vector<double> scaled = a;
    for (auto& x : scaled) x *= s;
    o.require(std::abs(loss_of(scaled) - base) <= 1e-12 * std::max(1.0, base),
              "similarity loss not scale-invariant");
  }
  double hinge = similarity_loss({mk({1, 0}, {1, 0}, true), mk({0, 1}, {0, 1}, true),
                                  mk({1, 0}, {-1, 0}, false), mk({0, 1}, {0, -1}, false)});
  o.require(std::abs(hinge) <= 1e-12, "hinge active for c <= 0");
  return o;
}

// ---------- criterion 3: rotation group ----------

Outcome criterion3() {
  Outcome o;
  const auto& rots = cubesym::enumerate_rotations();
  o.require(rots.size() == 24, "rotation count != 24");

  std::set<std::array<int, 9>> brute, got;
  const std::array<std::array<int, 3>, 6> perms = {
      {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
  for (const auto& p : perms)
    for (int s = 0; s < 8; ++s) {
      cubesym::RotationClass r;
      r.axis = p;
      r.flip = {(s & 1) != 0, (s & 2) != 0, (s & 4) != 0};
      if (r.determinant() != 1) continue;
      auto m = r.matrix();
      std::array<int, 9> f{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          f[static_cast<std::size_t>(3 * i + j)] =
              m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
      brute.insert(f);
    }
  for (const auto& r : rots) {
    auto m = r.matrix();
    std::array<int, 9> f{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        f[static_cast<std::size_t>(3 * i + j)] =
            m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    got.insert(f);
    o.require(cubesym::find_class(cubesym::inverse(r)) >= 0, "inverse not in the set");
  }
  o.require(got == brute, "enumeration differs from brute force over 48 signed permutations");

  Volume3D v = volcore::make_phantom(3, 32);
  std::vector<float> sorted = v.voxels;
  std::sort(sorted.begin(), sorted.end());
  for (const auto& r : rots) {
    auto rot = cubesym::rotate_grid(v.voxels, v.size, r);
    std::sort(rot.begin(), rot.end());
    o.require(rot == sorted, "voxel multiset not preserved by class " + std::to_string(r.class_id));
  }
  return o;
}

// ---------- criterion 4: AP vs exhaustive oracle ----------

double ap_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double positives = 0;
  for (int y : labels) positives += y;
  double ap = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!labels[order[k]]) continue;
    double hits = 0;
    for (std::size_t j = 0; j <= k; ++j) hits += labels[order[j]];
    ap += hits / static_cast<double>(k + 1);
  }
  return ap / positives;
}

Outcome criterion4() {
  Outcome o;
  Rng rng(4);
  for (int rep = 0; rep < 1000; ++rep) {
    int n = rng.range(1, 12);
    std::vector<double> scores;
    std::vector<int> labels;
    bool any = false;
    for (int i = 0; i < n; ++i) {
      scores.push_back(rng.range(0, 5) / 5.0);  // coarse grid forces ties
      int y = rng.range(0, 1);
      labels.push_back(y);
      any = any || y;
    }
    if (!any) labels[static_cast<std::size_t>(rng.range(0, n - 1))] = 1;
    double got = evalkit::average_precision(scores, labels);
    double want = ap_oracle(scores, labels);
    o.require(got == want, "AP mismatch at instance " + std::to_string(rep));
  }
  return o;
}

// ---------- criterion 5: anomaly invariants ----------

Outcome criterion5() {
  Outcome o;
  double scale = anomaly::default_scale(32);
  std::size_t floor_vox = static_cast<std::size_t>(anomaly::min_label_voxels(scale));
  std::vector<Volume3D> bases;
  for (int i = 0; i < 5; ++i)
    bases.push_back(volcore::make_phantom(static_cast<std::uint64_t>(50 + i), 32));

  int calls = 0;
  for (int rep = 0; calls < 500; ++rep) {
    for (anomaly::AugKind kind : anomaly::all_kinds) {
      if (calls >= 500) break;
      const Volume3D& v = bases[static_cast<std::size_t>(rep % bases.size())];
      Rng rng(item_seed(9000, static_cast<std::uint64_t>(calls)));
      anomaly::AnomalyRecord rec = anomaly::synth_ood(v, kind, rng, 10);
      ++calls;
      o.require(rec.label_count() >= floor_vox, "label below scaled floor");
      bool ok = true;
      for (int z = 0; z < 32 && ok; ++z)
        for (int y = 0; y < 32 && ok; ++y)
          for (int x = 0; x < 32 && ok; ++x) {
            std::size_t i = v.index(x, y, z);
            if (rec.label[i]) {
              if (!rec.region.contains(x, y, z)) ok = false;
              if (rec.volume.voxels[i] == v.voxels[i]) ok = false;
            }
            if (!rec.region.contains(x, y, z) && rec.volume.voxels[i] != v.voxels[i]) ok = false;
          }
      o.require(ok, std::string("voxel invariant violated for ") + anomaly::kind_name(kind));
    }
  }

  // Sobel patches against brute-force triple-nested convolution.
  auto k1 = [](int i) { return i == 1 ? 2.0 : 1.0; };
  auto kd = [](int i) { return i == 0 ? -1.0 : (i == 1 ? 0.0 : 1.0); };
  Rng rng(5);
  for (int rep = 0; rep < 8; ++rep) {
    const Volume3D& v = bases[static_cast<std::size_t>(rep % bases.size())];
    anomaly::PatchRegion r;
    r.extent = {8, 8, 8};
    for (int i = 0; i < 3; ++i) r.origin[static_cast<std::size_t>(i)] = rng.range(0, 24);
    Rng aug(77);
    auto out = anomaly::apply_augmentation(v, anomaly::AugKind::sobel, r, aug);
    auto patch = anomaly::detail::extract(v.voxels, 32, r);
    auto at = [&](int x, int y, int z) {
      x = std::clamp(x, 0, 7);
      y = std::clamp(y, 0, 7);
      z = std::clamp(z, 0, 7);
      return static_cast<double>(patch[static_cast<std::size_t>(x) + 8u * (static_cast<std::size_t>(y) + 8u * z)]);
    };
    std::vector<double> mag(512);
    double lo = 1e300, hi = -1e300;
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          double g[3] = {0, 0, 0};
          for (int cc = 0; cc < 3; ++cc)
            for (int bb = 0; bb < 3; ++bb)
              for (int aa = 0; aa < 3; ++aa) {
                double val = at(x + aa - 1, y + bb - 1, z + cc - 1);
                g[0] += val * kd(aa) * k1(bb) * k1(cc);
                g[1] += val * k1(aa) * kd(bb) * k1(cc);
                g[2] += val * k1(aa) * k1(bb) * kd(cc);
              }
          double m = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
          mag[static_cast<std::size_t>(x) + 8u * (static_cast<std::size_t>(y) + 8u * z)] = m;
          lo = std::min(lo, m);
          hi = std::max(hi, m);
        }
    std::size_t k = 0;
    for (int z = 0; z < 8; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x, ++k) {
          double want = hi > lo ? (mag[k] - lo) / (hi - lo) : 0.0;
          double got = out[v.index(r.origin[0] + x, r.origin[1] + y, r.origin[2] + z)];
          o.require(std::abs(got - want) <= 1e-6 * std::max(1.0, std::abs(want)),
                    "sobel deviates from brute-force convolution");
        }
  }
  return o;
}

// ---------- criterion 6: gradient checks ----------

jointtrain::TrainConfig gradcheck_config() {
  jointtrain::TrainConfig cfg;
  cfg.seed = 13;
  cfg.size3d = 8;
  cfg.depth = 2;
  cfg.base_channels = 2;
  cfg.bottleneck_channels = 4;
  cfg.head_hidden = 4;
  cfg.net2d_stages = 2;
  cfg.net2d_base_channels = 2;
  cfg.lambda1 = 0.3;
  cfg.lambda_fnfp = 0.2;
  cfg.use_2d_pretrain = false;
  cfg.use_3d_pretask = false;
  return cfg;
}

Volume3D random_smooth_volume(int size, std::uint64_t seed) {
  Volume3D v(size);
  Rng rng(seed);
  const int n = 5;
  std::vector<double> lattice(static_cast<std::size_t>(n) * n * n);
  for (auto& x : lattice) x = rng.uniform(0.1, 0.9);
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double gx = static_cast<double>(x) / size * (n - 1);
        double gy = static_cast<double>(y) / size * (n - 1);
        double gz = static_cast<double>(z) / size * (n - 1);
        v.voxels[v.index(x, y, z)] =
            static_cast<float>(volcore::detail::lattice_sample(lattice, n, gx, gy, gz));
        v.body_mask[v.index(x, y, z)] = 1;
      }
  return v;
}

Outcome criterion6() {
  Outcome o;
  jointtrain::TrainConfig cfg = gradcheck_config();
  Volume3D base = random_smooth_volume(cfg.size2d(), 2024);
  Rng prng(31);
  jointtrain::PairBatch pair = jointtrain::build_pair(base, cfg, prng);
  jointtrain::PairTensors<double> pt = jointtrain::PairTensors<double>::from(pair);

  nets::Net2D<double> net2d(cfg.net2d_config());
  nets::Net3D<double> net3d(cfg.net3d_config());
  Rng r2(cfg.seed ^ 0x2d2d2d2dULL), r3(cfg.seed ^ 0x3d3d3d3dULL);
  net2d.init(r2);
  net3d.init(r3);

  auto eval_loss = [&]() {
    graph::Graph<double> g;
    nets::Bindings<double> b2, b3;
    auto n = jointtrain::build_joint_loss(g, net2d, net3d, pt, cfg, b2, b3);
    return g.scalar(n.combined);
  };

  graph::Graph<double> g;
  nets::Bindings<double> b2, b3;
  auto nodes = jointtrain::build_joint_loss(g, net2d, net3d, pt, cfg, b2, b3);
  g.backward(nodes.combined);
  std::vector<std::pair<Tensor<double>*, Tensor<double>>> grads;
  auto harvest = [&](nets::Bindings<double>& bs) {
    for (auto& [ptr, nid] : bs) {
      bool found = false;
      for (auto& [p, acc] : grads)
        if (p == ptr) {
          const auto& gg = g.grad(nid);
          for (std::size_t j = 0; j < gg.size(); ++j) acc.v[j] += gg.v[j];
          found = true;
        }
      if (!found) grads.emplace_back(ptr, g.grad(nid));
    }
  };
  harvest(b2);
  harvest(b3);

  Rng sel(99);
  const double h = 1e-6;
  int checked = 0, failed = 0;
  double worst = 0;
  while (checked < 200) {
    std::size_t ti = sel.uniform_below(grads.size());
    Tensor<double>* p = grads[ti].first;
    if (p->size() == 0) continue;
    std::size_t j = sel.uniform_below(p->size());
    double keep = p->v[j];
    p->v[j] = keep + h;
    double up = eval_loss();
    p->v[j] = keep - h;
    double dn = eval_loss();
    p->v[j] = keep;
    double num = (up - dn) / (2 * h);
    double ana = grads[ti].second.v[j];
    double err = std::abs(num - ana) / std::max({1.0, std::abs(num), std::abs(ana)});
    worst = std::max(worst, err);
    if (err >= 1e-3) ++failed;
    ++checked;
  }
  o.require(failed == 0, std::to_string(failed) + " of " + std::to_string(checked) +
                             " parameters exceed 1e-3 relative error (worst " +
                             std::to_string(worst) + ")");
  if (o.pass) o.detail = "200 params, worst rel err " + std::to_string(worst);
  return o;
}

// ---------- criterion 7: shape contracts ----------

Outcome criterion7() {
  Outcome o;
  {
    graph::Graph<float> g;
    Tensor<float> x({8});
    x.v = {1, 5, 3, 2, 7, 0, 0, 1};
    int y = g.section_reduce(g.leaf(x), 0, 2, false);
    o.require(g.val(y).v == std::vector<float>({5, 7}), "1D example [5,7] mismatch");
  }
  Rng rng(17);
  for (int rep = 0; rep < 200; ++rep) {
    int b = 1 << rng.range(0, 2);
    int N = b * rng.range(1, 6);
    int F = rng.range(1, 6);
    int F2 = F * rng.range(1, 4);
    int p = b * rng.range(1, 3);
    Tensor<float> stacked({N, F2, p, p});
    for (auto& x : stacked.v) x = static_cast<float>(rng.uniform(-1, 1));
    for (nets::ReduceMode mode : {nets::ReduceMode::max, nets::ReduceMode::mean}) {
      Tensor<float> out = nets::reduce_latent(stacked, b, F, mode);
      o.require(out.shape == std::vector<int>({F, b, b, b}),
                "reduced shape != bottleneck shape " + shape_str(out.shape));
    }
  }
  return o;
}

// ---------- criterion 8: directional training behavior ----------

jointtrain::TrainConfig small_train_config(std::uint64_t seed) {
  jointtrain::TrainConfig cfg;
  cfg.seed = seed;
  cfg.size3d = 16;
  cfg.use_2d_pretrain = false;
  cfg.use_3d_pretask = false;
  cfg.pretask_epochs = 10;
  return cfg;
}

bool criterion8a_one_seed(std::uint64_t seed, std::string& note) {
  jointtrain::TrainConfig cfg = small_train_config(seed);
  jointtrain::JointTrainer trainer(cfg);
  std::vector<Volume3D> bases;
  for (int i = 0; i < 8; ++i)
    bases.push_back(volcore::make_phantom(
        item_seed(seed ^ 0x8a5e5ULL, static_cast<std::uint64_t>(i)), cfg.size2d()));

  // Two-stage warm-up as in the full pipeline, then 300 joint steps over 8
  // fixed pairs; the cosines are measured on those same pairs.
  nets::pretrain2d_proxy(trainer.net2d(), seed ^ 0x2d70ULL, cfg.pretrain2d_steps,
                         cfg.pretrain2d_batch, cfg.pretrain2d_target);
  std::vector<Volume3D> lows;
  for (auto& v : bases) lows.push_back(volcore::downsample2x(v));
  jointtrain::run_pretask_training(trainer.net3d(), cfg, lows, pretask::Kind::scatter30);

  std::vector<jointtrain::PairBatch> pairs;
  for (int i = 0; i < 8; ++i) {
    Rng r(item_seed(seed ^ 0xcafeULL, static_cast<std::uint64_t>(i)));
    pairs.push_back(jointtrain::build_pair(bases[static_cast<std::size_t>(i)], cfg, r));
  }
  auto mean_cosines = [&](double& pos, double& neg) {
    pos = neg = 0;
    for (auto& p : pairs) {
      trainer.zero_grads();
      auto m = trainer.accumulate_gradients(p);
      pos += m.cos_pos / 8;
      neg += m.cos_neg / 8;
    }
    trainer.zero_grads();
  };
  double pos0, neg0, pos1, neg1;
  mean_cosines(pos0, neg0);

  jointtrain::ScheduleSpec sched{cfg.lr_lo, cfg.lr_hi, 300};
  for (int step = 0; step < 300; ++step)
    trainer.train_step(pairs[static_cast<std::size_t>(step % 8)],
                       jointtrain::one_cycle_lr(step, sched));
  mean_cosines(pos1, neg1);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "seed %llu: pos %.4f->%.4f neg %.4f->%.4f",
                static_cast<unsigned long long>(seed), pos0, pos1, neg0, neg1);
  note += std::string(buf) + "; ";
  return pos1 > pos0 && neg1 < neg0;
}

bool criterion8b_one_seed(std::uint64_t seed, std::string& note) {
  jointtrain::TrainConfig cfg = small_train_config(seed);
  cfg.epochs = 50;
  cfg.checkpoint_every = 0;
  jointtrain::Dataset data;
  for (int i = 0; i < 8; ++i)
    data.volumes_hi.push_back(volcore::make_phantom(
        item_seed(seed ^ 0x8bULL, static_cast<std::uint64_t>(i)), cfg.size2d()));
  data.split.train = {0, 1, 2, 3, 4, 5, 6, 7};

  namespace fs = std::filesystem;
  std::string base_dir =
      (fs::temp_directory_path() / ("jointad_acc8b_" + std::to_string(seed))).string();
  fs::remove_all(base_dir);
  fs::create_directories(base_dir);

  auto lows = data.lo_res(data.split.train);
  nets::Net3D<float> pre(cfg.net3d_config());
  Rng r3(cfg.seed ^ 0x3d3d3d3dULL);
  pre.init(r3);
  jointtrain::run_pretask_training(pre, cfg, lows, pretask::Kind::scatter30);
  checkpoint::Checkpoint ck = nets::net_to_checkpoint(pre, "net3d");
  std::string ck_path = base_dir + "/pretask.jckpt";
  checkpoint::save_checkpoint(ck, ck_path);

  jointtrain::JointTrainer scratch(cfg);
  auto scratch_res = jointtrain::run_training(scratch, data, base_dir + "/scratch");

  jointtrain::TrainConfig warm_cfg = cfg;
  warm_cfg.use_3d_pretask = true;
  warm_cfg.pretask_checkpoint = ck_path;
  jointtrain::JointTrainer warm(warm_cfg);
  auto warm_res = jointtrain::run_training(warm, data, base_dir + "/warm");

  double target = scratch_res.epoch_means.back().l3d;
  int reach = -1;
  for (std::size_t e = 0; e < warm_res.epoch_means.size(); ++e) {
    if (warm_res.epoch_means[e].l3d <= target) {
      reach = static_cast<int>(e) + 1;
      break;
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "seed %llu: scratch final l3d %.4f, warm reaches at epoch %d/50",
                static_cast<unsigned long long>(seed), target, reach);
  note += std::string(buf) + "; ";
  fs::remove_all(base_dir);
  return reach > 0 && reach <= 30;  // 60% of the 50 epochs
}

Outcome criterion8() {
  Outcome o;
  std::string note;
  int pass_a = 0, pass_b = 0;
  for (std::uint64_t seed : {101ULL, 102ULL, 103ULL})
    if (criterion8a_one_seed(seed, note)) ++pass_a;
  for (std::uint64_t seed : {201ULL, 202ULL, 203ULL})
    if (criterion8b_one_seed(seed, note)) ++pass_b;
  o.require(pass_a >= 2, "joint-cosine direction held on " + std::to_string(pass_a) + "/3 seeds");
  o.require(pass_b >= 2, "pretask speedup held on " + std::to_string(pass_b) + "/3 seeds");
  o.detail = (o.pass ? "a " + std::to_string(pass_a) + "/3, b " + std::to_string(pass_b) + "/3 | "
                     : o.detail + " | ") +
             note;
  return o;
}

// ---------- criterion 9: end-to-end desk benchmark ----------

struct BenchResult {
  double cls_ap = 0, seg_ap = 0;
};

BenchResult run_desk_benchmark(std::uint64_t seed) {
  jointtrain::TrainConfig cfg;
  cfg.seed = seed;
  cfg.size3d = 32;
  cfg.n_volumes = 40;
  cfg.epochs = 30;
  cfg.checkpoint_every = 0;
  jointtrain::Dataset data = jointtrain::make_synthetic_dataset(40, cfg.size2d(), seed);

  namespace fs = std::filesystem;
  std::string dir =
      (fs::temp_directory_path() / ("jointad_acc9_" + std::to_string(seed))).string();
  fs::remove_all(dir);
  fs::create_directories(dir);

  auto lows = data.lo_res(data.split.train);
  nets::Net3D<float> pre(cfg.net3d_config());
  Rng r3(cfg.seed ^ 0x3d3d3d3dULL);
  pre.init(r3);
  jointtrain::run_pretask_training(pre, cfg, lows, pretask::Kind::scatter30);
  checkpoint::Checkpoint ck = nets::net_to_checkpoint(pre, "net3d");
  std::string ck_path = dir + "/pretask.jckpt";
  checkpoint::save_checkpoint(ck, ck_path);

  cfg.use_3d_pretask = true;
  cfg.pretask_checkpoint = ck_path;
  cfg.use_2d_pretrain = true;  // seeded proxy runs inline
  jointtrain::JointTrainer trainer(cfg);
  jointtrain::run_training(trainer, data, dir + "/run");

  // Held-out mask test bucket: largest size, maximal contrast (intensity 1).
  std::vector<anomaly::MaskTestCase> bucket;
  for (int id : data.split.test) {
    auto cases = anomaly::build_mask_testset(data.volumes_hi[static_cast<std::size_t>(id)]);
    for (auto& c : cases)
      if (c.size_index == 2 && c.intensity_index == 3 && !c.degenerate)
        bucket.push_back(std::move(c));
  }
  std::vector<Volume3D> negatives;
  for (int i = 0; i < 54; ++i)
    negatives.push_back(volcore::make_phantom(
        item_seed(seed + 5000000, static_cast<std::uint64_t>(i)), cfg.size2d()));
  evalkit::MaskGridReport rep = evalkit::evaluate_mask_grid(trainer.net3d(), bucket, negatives);
  fs::remove_all(dir);
  BenchResult r;
  r.seg_ap = rep.seg_bucket[2][3];
  r.cls_ap = rep.cls_bucket[2][3];
  return r;
}

Outcome criterion9() {
  Outcome o;
  int passed = 0;
  std::string note;
  for (std::uint64_t seed : {301ULL, 302ULL, 303ULL}) {
    BenchResult r = run_desk_benchmark(seed);
    bool ok = r.cls_ap >= 0.85 && r.seg_ap >= 0.70;
    passed += ok ? 1 : 0;
    char buf[120];
    std::snprintf(buf, sizeof(buf), "seed %llu: cls %.4f seg %.4f %s",
                  static_cast<unsigned long long>(seed), r.cls_ap, r.seg_ap, ok ? "ok" : "MISS");
    note += std::string(buf) + "; ";
  }
  o.require(passed >= 2, "desk benchmark passed on " + std::to_string(passed) + "/3 seeds");
  o.detail = (o.pass ? std::to_string(passed) + "/3 | " : o.detail + " | ") + note;
  return o;
}

// ---------- criterion 10: ablation harness ----------

Outcome criterion10() {
  Outcome o;
  jointtrain::TrainConfig cfg;
  cfg.seed = 404;
  cfg.size3d = 32;
  cfg.n_volumes = 14;
  cfg.epochs = 10;
  cfg.pretask_epochs = 8;
  cfg.pretrain2d_steps = 800;
  cfg.checkpoint_every = 0;
  jointtrain::Dataset data =
      jointtrain::make_synthetic_dataset(cfg.n_volumes, cfg.size2d(), cfg.seed);

  namespace fs = std::filesystem;
  std::string dir = (fs::temp_directory_path() / "jointad_acc10").string();
  fs::remove_all(dir);
  std::vector<evalkit::AblationRow> rows = evalkit::run_ablation(cfg, data, dir);
  fs::remove_all(dir);

  o.require(rows.size() == 5, "ablation grid must have 5 rows");
  int all_on = -1, wbce_off = -1;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    int offs =
        (!r.use_2d_pretrain) + (!r.use_3d_pretask) + (!r.use_wbce) + (!r.use_label_smoothing);
    o.require(offs <= 1, "a row differs from all-on in more than one toggle");
    if (offs == 0) all_on = static_cast<int>(i);
    if (!r.use_wbce) wbce_off = static_cast<int>(i);
  }
  o.require(all_on >= 0, "missing all-on row");
  o.require(wbce_off >= 0, "missing WBCE-off row");
  if (all_on >= 0 && wbce_off >= 0) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "cls AP: wbce-off %.4f vs all-on %.4f; seg all-on %.4f",
                  rows[static_cast<std::size_t>(wbce_off)].cls_ap,
                  rows[static_cast<std::size_t>(all_on)].cls_ap,
                  rows[static_cast<std::size_t>(all_on)].seg_ap);
    o.require(rows[static_cast<std::size_t>(wbce_off)].cls_ap <=
                  rows[static_cast<std::size_t>(all_on)].cls_ap,
              std::string("WBCE-off cls AP exceeds all-on: ") + buf);
    if (o.detail.empty()) o.detail = buf;
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  ThreadPool::set_threads(0);
  std::vector<int> which;
  if (argc > 1) {
    for (int i = 1; i < argc; ++i) which.push_back(std::atoi(argv[i]));
  } else {
    for (int i = 1; i <= 10; ++i) which.push_back(i);
  }
  using CriterionFn = Outcome (*)();
  const CriterionFn fns[10] = {criterion1, criterion2, criterion3, criterion4, criterion5,
                               criterion6, criterion7, criterion8, criterion9, criterion10};
  const char* names[10] = {"paper formula exactness (smooth_label, weighted BCE)",
                           "similarity loss closed forms and invariances",
                           "rotation group vs brute force",
                           "average precision vs exhaustive oracle",
                           "anomaly synthesis invariants and Sobel oracle",
                           "analytic gradients vs central differences",
                           "latent reduction shape contracts",
                           "directional training behavior (3-seed majority)",
                           "end-to-end desk benchmark (3-seed majority)",
                           "ablation harness and WBCE direction"};
  bool all_pass = true;
  for (int c : which) {
    if (c < 1 || c > 10) {
      std::fprintf(stderr, "unknown criterion %d\n", c);
      return 2;
    }
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fns[c - 1]();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("CRITERION %2d [%s]: %s (%.1f s)%s%s\n", c, names[c - 1], o.pass ? "PASS" : "FAIL",
                sec, o.detail.empty() ? "" : " - ", o.detail.c_str());
    std::fflush(stdout);
    all_pass = all_pass && o.pass;
  }
  return all_pass ? 0 : 1;
}

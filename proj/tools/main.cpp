#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "jointad/anomaly.hpp"
#include "jointad/checkpoint.hpp"
#include "jointad/config.hpp"
#include "jointad/evalkit.hpp"
#include "jointad/jointtrain.hpp"
#include "jointad/nets.hpp"
#include "jointad/nifti.hpp"
#include "jointad/parallel.hpp"
#include "jointad/volume.hpp"

namespace fs = std::filesystem;
using namespace jointad;

namespace {

std::string default_out(const std::string& leaf) {
  const char* root = std::getenv("JOINTAD_OUT_ROOT");
  return (root ? std::string(root) : std::string("runs")) + "/" + leaf;
}

config::Config load_config_with_overrides(const std::string& path,
                                          const std::vector<std::string>& overrides,
                                          std::int64_t seed_flag) {
  config::Config c = path.empty() ? config::Config() : config::Config::load(path);
  c.apply_overrides(overrides);
  if (seed_flag >= 0) c.set_int("seed", seed_flag);
  return c;
}

void freeze_config(const config::Config& c, const std::string& out_dir) {
  fs::create_directories(out_dir);
  c.save(out_dir + "/config.resolved");
}

jointtrain::TrainConfig config_from_checkpoint(const checkpoint::Checkpoint& c) {
  auto it = c.meta.find("config");
  if (it == c.meta.end())
    throw config_error("checkpoint carries no config echo; cannot rebuild networks");
  return jointtrain::TrainConfig::from(config::Config::from_string(it->second));
}

std::vector<volcore::Volume3D> pick(const std::vector<volcore::Volume3D>& all,
                                    const std::vector<int>& ids) {
  std::vector<volcore::Volume3D> out;
  for (int i : ids) out.push_back(all[static_cast<std::size_t>(i)]);
  return out;
}

int cmd_synth_data(int n, int size3d, std::int64_t seed, const std::string& out) {
  int size2d = 2 * size3d;
  jointtrain::Dataset d =
      jointtrain::make_synthetic_dataset(n, size2d, static_cast<std::uint64_t>(seed));
  fs::create_directories(out);
  jointtrain::save_dataset(d, out);
  config::Config echo;
  echo.set_int("n", n);
  echo.set_int("size3d", size3d);
  echo.set_int("size2d", size2d);
  echo.set_int("seed", seed);
  freeze_config(echo, out);
  std::printf("synth-data: %d phantoms at %d^3 (train %zu / val %zu / test %zu) -> %s\n", n,
              size2d, d.split.train.size(), d.split.val.size(), d.split.test.size(), out.c_str());
  return 0;
}

int cmd_gen_anomalies(const std::string& data_dir, const std::string& kinds_arg,
                      std::int64_t seed, int max_attempts, const std::string& out) {
  jointtrain::Dataset d = jointtrain::load_dataset(data_dir);
  std::vector<anomaly::AugKind> kinds;
  if (kinds_arg == "all")
    kinds.assign(anomaly::all_kinds.begin(), anomaly::all_kinds.end());
  else
    for (const auto& k : config::Config::from_string("k = " + kinds_arg).get_list("k", ""))
      kinds.push_back(anomaly::kind_from_name(k));
  fs::create_directories(out);
  config::Config echo;
  echo.set("data", data_dir);
  echo.set("kinds", kinds_arg);
  echo.set_int("seed", seed);
  freeze_config(echo, out);
  char name[128];
  int written = 0;
  for (std::size_t i = 0; i < d.volumes_hi.size(); ++i) {
    for (anomaly::AugKind k : kinds) {
      Rng rng(item_seed(static_cast<std::uint64_t>(seed) ^
                            (0xa0a0ULL + static_cast<std::uint64_t>(k) * 131), i));
      anomaly::AnomalyRecord rec = anomaly::synth_ood(d.volumes_hi[i], k, rng, max_attempts);
      std::snprintf(name, sizeof(name), "vol_%04zu_%s", i, anomaly::kind_name(k));
      volcore::write_volume(rec.volume, out + "/" + name + ".jvol");
      volcore::write_label(rec.label, rec.volume.size, out + "/" + name + "_label.jvol");
      ++written;
    }
  }
  std::printf("gen-anomalies: %d records -> %s\n", written, out.c_str());
  return 0;
}

int cmd_pretask_train(const config::Config& c, const std::string& kind_name,
                      const std::string& data_dir, const std::string& out) {
  jointtrain::TrainConfig cfg = jointtrain::TrainConfig::from(c);
  if (cfg.threads > 0) ThreadPool::set_threads(cfg.threads);
  pretask::Kind kind = pretask::kind_from_name(kind_name);
  jointtrain::Dataset d = jointtrain::load_dataset(data_dir);
  auto volumes_lo = d.lo_res(d.split.train);
  nets::Net3D<float> net(cfg.net3d_config());
  Rng rng(cfg.seed ^ 0x3d3d3d3dULL);
  net.init(rng);
  jointtrain::PretaskResult res = jointtrain::run_pretask_training(net, cfg, volumes_lo, kind);
  fs::create_directories(out);
  freeze_config(cfg.resolved(), out);
  checkpoint::Checkpoint ck = nets::net_to_checkpoint(net, "net3d");
  ck.meta["pretask"] = kind_name;
  ck.meta["config"] = cfg.resolved().to_string();
  std::string path = out + "/pretask_" + kind_name + ".jckpt";
  checkpoint::save_checkpoint(ck, path);
  std::ofstream metrics(out + "/pretask_metrics.tsv", std::ios::trunc);
  metrics << "epoch\tloss\n";
  for (std::size_t e = 0; e < res.epoch_losses.size(); ++e)
    metrics << e << "\t" << res.epoch_losses[e] << "\n";
  std::printf("pretask-train %s: %zu epochs, first %.4f last %.4f -> %s\n", kind_name.c_str(),
              res.epoch_losses.size(), res.epoch_losses.front(), res.epoch_losses.back(),
              path.c_str());
  return 0;
}

int cmd_pretrain_2d(const config::Config& c, const std::string& out) {
  jointtrain::TrainConfig cfg = jointtrain::TrainConfig::from(c);
  if (cfg.threads > 0) ThreadPool::set_threads(cfg.threads);
  nets::Net2D<float> net(cfg.net2d_config());
  Rng rng(cfg.seed ^ 0x2d2d2d2dULL);
  net.init(rng);
  nets::ProxyPretrainResult res = nets::pretrain2d_proxy(
      net, cfg.seed ^ 0x2d70ULL, cfg.pretrain2d_steps, cfg.pretrain2d_batch, cfg.pretrain2d_target);
  fs::create_directories(out);
  freeze_config(cfg.resolved(), out);
  checkpoint::Checkpoint ck = nets::net_to_checkpoint(net, "net2d");
  ck.meta["config"] = cfg.resolved().to_string();
  ck.meta["proxy_accuracy"] = std::to_string(res.holdout_accuracy);
  ck.meta["proxy_steps"] = std::to_string(res.steps_run);
  if (!res.converged)
    ck.meta["warning"] = "proxy accuracy below target after step budget";
  std::string path = out + "/pretrain2d.jckpt";
  checkpoint::save_checkpoint(ck, path);
  std::printf("pretrain-2d: accuracy %.3f after %d steps%s -> %s\n", res.holdout_accuracy,
              res.steps_run, res.converged ? "" : " (warning: below target)", path.c_str());
  return 0;
}

int cmd_train(const config::Config& c, const std::string& data_dir, const std::string& out) {
  jointtrain::TrainConfig cfg = jointtrain::TrainConfig::from(c);
  jointtrain::Dataset d = jointtrain::load_dataset(data_dir);
  jointtrain::JointTrainer trainer(cfg);
  jointtrain::RunResult res = jointtrain::run_training(trainer, d, out);
  std::printf("train: %d epochs, final l2d %.4f l3d %.4f sim %.4f -> %s\n", cfg.epochs,
              res.epoch_means.back().l2d_total, res.epoch_means.back().l3d_total,
              res.epoch_means.back().l_sim, res.final_checkpoint.c_str());
  return 0;
}

std::vector<jointtrain::StepMetrics> load_metrics(const std::string& path) {
  std::vector<jointtrain::StepMetrics> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::istringstream is(line);
    jointtrain::StepMetrics m;
    int epoch;
    is >> epoch >> m.lr >> m.l2d_cls >> m.l_sim >> m.l2d_total >> m.l3d_seg >> m.l3d_cls >>
        m.l3d_fnfp >> m.l3d >> m.l3d_total >> m.cos_pos >> m.cos_neg;
    out.push_back(m);
  }
  return out;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, std::int64_t seed,
             const std::string& out, const std::string& metrics_path) {
  checkpoint::Checkpoint ck = checkpoint::load_checkpoint(ckpt);
  jointtrain::TrainConfig cfg = config_from_checkpoint(ck);
  if (cfg.threads > 0) ThreadPool::set_threads(cfg.threads);
  jointtrain::JointTrainer trainer(cfg);
  trainer.from_checkpoint(ck);
  jointtrain::Dataset d = jointtrain::load_dataset(data_dir);
  std::uint64_t eseed = seed >= 0 ? static_cast<std::uint64_t>(seed) : cfg.seed;
  auto testset =
      evalkit::make_eval_testset(pick(d.volumes_hi, d.split.test), eseed ^ 0x7e57e7ULL,
                                 cfg.max_attempts);
  evalkit::EvalReport rep = evalkit::evaluate_model(trainer.net2d(), trainer.net3d(), testset);
  rep.seed = eseed;
  fs::create_directories(out);
  config::Config echo;
  echo.set("checkpoint", ckpt);
  echo.set("data", data_dir);
  echo.set_int("seed", static_cast<std::int64_t>(eseed));
  freeze_config(echo, out);
  std::vector<jointtrain::StepMetrics> metrics;
  if (!metrics_path.empty()) metrics = load_metrics(metrics_path);
  evalkit::render_report(rep, out + "/report.txt", metrics);
  std::string table = evalkit::format_report_table(rep);
  std::fputs(table.c_str(), stdout);
  return 0;
}

int cmd_mask_test(const std::string& ckpt, const std::string& data_dir, std::int64_t seed,
                  const std::string& out) {
  checkpoint::Checkpoint ck = checkpoint::load_checkpoint(ckpt);
  jointtrain::TrainConfig cfg = config_from_checkpoint(ck);
  if (cfg.threads > 0) ThreadPool::set_threads(cfg.threads);
  jointtrain::JointTrainer trainer(cfg);
  trainer.from_checkpoint(ck);
  jointtrain::Dataset d = jointtrain::load_dataset(data_dir);
  std::vector<anomaly::MaskTestCase> cases;
  for (int id : d.split.test) {
    auto c = anomaly::build_mask_testset(d.volumes_hi[static_cast<std::size_t>(id)]);
    for (auto& mc : c) cases.push_back(std::move(mc));
  }
  // Negatives: fresh phantoms from seeds disjoint from the dataset.
  std::uint64_t nseed = (seed >= 0 ? static_cast<std::uint64_t>(seed) : cfg.seed) + 1000000;
  std::vector<volcore::Volume3D> negatives;
  int size2d = d.volumes_hi.empty() ? cfg.size2d() : d.volumes_hi[0].size;
  for (int i = 0; i < 32; ++i)
    negatives.push_back(volcore::make_phantom(item_seed(nseed, static_cast<std::uint64_t>(i)), size2d));
  evalkit::MaskGridReport rep = evalkit::evaluate_mask_grid(trainer.net3d(), cases, negatives);
  fs::create_directories(out);
  std::ofstream f(out + "/mask_report.txt", std::ios::trunc);
  f << "cases\t" << rep.case_count << "\ndegenerate\t" << rep.degenerate_count << "\n";
  auto dump = [&f](const char* tag, const double* seg, const double* cls, int n) {
    for (int i = 0; i < n; ++i) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%s[%d]\tseg %.4f\tcls %.4f\n", tag, i, seg[i], cls[i]);
      f << buf;
    }
  };
  dump("shape", rep.seg_by_shape.data(), rep.cls_by_shape.data(), 2);
  dump("position", rep.seg_by_position.data(), rep.cls_by_position.data(), 27);
  dump("size", rep.seg_by_size.data(), rep.cls_by_size.data(), 3);
  dump("intensity", rep.seg_by_intensity.data(), rep.cls_by_intensity.data(), 4);
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < 4; ++i) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "bucket[size=%d,intensity=%d]\tseg %.4f\tcls %.4f\n", s, i,
                    rep.seg_bucket[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)],
                    rep.cls_bucket[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]);
      f << buf;
    }
  std::printf("mask-test: %d cases (%d degenerate) -> %s/mask_report.txt\n", rep.case_count,
              rep.degenerate_count, out.c_str());
  return 0;
}

int cmd_ablate(const config::Config& c, const std::string& data_dir, const std::string& out) {
  jointtrain::TrainConfig cfg = jointtrain::TrainConfig::from(c);
  if (cfg.threads > 0) ThreadPool::set_threads(cfg.threads);
  jointtrain::Dataset d = jointtrain::load_dataset(data_dir);
  std::vector<evalkit::AblationRow> rows = evalkit::run_ablation(cfg, d, out);
  std::string table = evalkit::format_ablation_table(rows);
  std::ofstream f(out + "/ablation.txt", std::ios::trunc);
  f << table;
  std::fputs(table.c_str(), stdout);
  return 0;
}

int cmd_report(const std::string& run_dir, const std::string& out) {
  auto metrics = load_metrics(run_dir + "/metrics.tsv");
  if (metrics.empty())
    throw std::runtime_error("report: no metrics found at " + run_dir + "/metrics.tsv");
  fs::create_directories(out);
  plot::Series l2d{"l2d_total", {}, 200, 40, 40};
  plot::Series l3d{"l3d_total", {}, 40, 80, 200};
  plot::Series lsim{"l_sim", {}, 30, 150, 60};
  plot::Series cpos{"cos_pos", {}, 150, 120, 0};
  for (const auto& m : metrics) {
    l2d.values.push_back(m.l2d_total);
    l3d.values.push_back(m.l3d_total);
    lsim.values.push_back(m.l_sim);
    cpos.values.push_back(m.cos_pos);
  }
  plot::save_curves({l2d, l3d, lsim, cpos}, out + "/loss_curves.bmp");
  std::printf("report: %zu epochs plotted -> %s/loss_curves.bmp\n", metrics.size(), out.c_str());
  return 0;
}

int cmd_import(const std::vector<std::string>& paths, const std::string& out, double threshold) {
  fs::create_directories(out);
  int ok = 0, failed = 0;
  for (const auto& p : paths) {
    try {
      volcore::Volume3D v = nifti::import_volume(p, static_cast<float>(threshold));
      std::string name = fs::path(p).stem().string() + ".jvol";
      volcore::write_volume(v, out + "/" + name);
      std::printf("import: %s -> %s (size %d)\n", p.c_str(), name.c_str(), v.size);
      ++ok;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "import: %s failed: %s\n", p.c_str(), e.what());
      ++failed;
    }
  }
  std::printf("import: %d ok, %d failed\n", ok, failed);
  return ok > 0 || paths.empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint 2D/3D self-supervised volumetric anomaly detection"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (0 = auto)");

  std::string cfg_path, data_dir, out_dir, kind, ckpt, metrics_path, run_dir, kinds = "all";
  std::vector<std::string> overrides, import_paths;
  std::int64_t seed = -1;
  int n_volumes = 40, size3d = 32, max_attempts = 10;
  double threshold = 0.05;

  auto add_common = [&](CLI::App* sub, bool with_config) {
    sub->add_option("--seed", seed, "seed override");
    if (with_config) {
      sub->add_option("--config", cfg_path, "config file (key = value lines)");
      sub->add_option("--set", overrides, "config overrides key=value")->take_all();
    }
  };

  CLI::App* synth = app.add_subcommand("synth-data", "generate phantom volumes and splits");
  synth->add_option("--n", n_volumes, "number of volumes");
  synth->add_option("--size", size3d, "3D input size (volumes stored at twice this)");
  synth->add_option("--out", out_dir, "output directory");
  add_common(synth, false);

  CLI::App* gen = app.add_subcommand("gen-anomalies", "write augmented volumes plus labels");
  gen->add_option("--data", data_dir, "dataset directory")->required();
  gen->add_option("--kinds", kinds, "comma list or 'all'");
  gen->add_option("--max-attempts", max_attempts, "synthesis attempts per record");
  gen->add_option("--out", out_dir, "output directory");
  add_common(gen, false);

  CLI::App* pre3 = app.add_subcommand("pretask-train", "self-supervised 3D warm-up");
  pre3->add_option("--kind", kind, "rotation|jigsaw|index|box|scatter30|scatter50")->required();
  pre3->add_option("--data", data_dir, "dataset directory")->required();
  pre3->add_option("--out", out_dir, "output directory");
  add_common(pre3, true);

  CLI::App* pre2 = app.add_subcommand("pretrain-2d", "procedural texture pretraining (2D)");
  pre2->add_option("--out", out_dir, "output directory");
  add_common(pre2, true);

  CLI::App* train = app.add_subcommand("train", "joint fine-tuning");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "run directory");
  std::string pretask_ckpt, pretrain2d_ckpt;
  train->add_option("--pretask-ckpt", pretask_ckpt, "3D pretask checkpoint");
  train->add_option("--pretrain2d-ckpt", pretrain2d_ckpt, "2D pretraining checkpoint");
  add_common(train, true);

  CLI::App* ev = app.add_subcommand("eval", "hard-augmentation test harness");
  ev->add_option("--ckpt", ckpt, "joint checkpoint")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--metrics", metrics_path, "metrics.tsv for the loss plot");
  ev->add_option("--out", out_dir, "output directory");
  add_common(ev, false);

  CLI::App* mask = app.add_subcommand("mask-test", "mask robustness grid evaluation");
  mask->add_option("--ckpt", ckpt, "joint checkpoint")->required();
  mask->add_option("--data", data_dir, "dataset directory")->required();
  mask->add_option("--out", out_dir, "output directory");
  add_common(mask, false);

  CLI::App* abl = app.add_subcommand("ablate", "five-row ablation grid");
  abl->add_option("--data", data_dir, "dataset directory")->required();
  abl->add_option("--out", out_dir, "output directory");
  add_common(abl, true);

  CLI::App* rep = app.add_subcommand("report", "re-render plots from a run directory");
  rep->add_option("--run", run_dir, "run directory with metrics.tsv")->required();
  rep->add_option("--out", out_dir, "output directory");

  CLI::App* imp = app.add_subcommand("import-volume", "import NIfTI volumes (non-fatal per file)");
  imp->add_option("files", import_paths, "input .nii files")->required();
  imp->add_option("--out", out_dir, "output directory");
  imp->add_option("--threshold", threshold, "body threshold after rescale");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors exit 2; --help exits 0
  }

  if (threads > 0) ThreadPool::set_threads(threads);
  try {
    if (synth->parsed()) {
      if (out_dir.empty()) out_dir = default_out("data");
      return cmd_synth_data(n_volumes, size3d, seed < 0 ? 0 : seed, out_dir);
    }
    if (gen->parsed()) {
      if (out_dir.empty()) out_dir = default_out("anomalies");
      return cmd_gen_anomalies(data_dir, kinds, seed < 0 ? 0 : seed, max_attempts, out_dir);
    }
    if (pre3->parsed()) {
      if (out_dir.empty()) out_dir = default_out("pretask");
      return cmd_pretask_train(load_config_with_overrides(cfg_path, overrides, seed), kind,
                               data_dir, out_dir);
    }
    if (pre2->parsed()) {
      if (out_dir.empty()) out_dir = default_out("pretrain2d");
      return cmd_pretrain_2d(load_config_with_overrides(cfg_path, overrides, seed), out_dir);
    }
    if (train->parsed()) {
      if (out_dir.empty()) out_dir = default_out("train");
      config::Config c = load_config_with_overrides(cfg_path, overrides, seed);
      if (!pretask_ckpt.empty()) c.set("pretask_checkpoint", pretask_ckpt);
      if (!pretrain2d_ckpt.empty()) c.set("pretrain2d_checkpoint", pretrain2d_ckpt);
      return cmd_train(c, data_dir, out_dir);
    }
    if (ev->parsed()) {
      if (out_dir.empty()) out_dir = default_out("eval");
      return cmd_eval(ckpt, data_dir, seed, out_dir, metrics_path);
    }
    if (mask->parsed()) {
      if (out_dir.empty()) out_dir = default_out("mask-test");
      return cmd_mask_test(ckpt, data_dir, seed, out_dir);
    }
    if (abl->parsed()) {
      if (out_dir.empty()) out_dir = default_out("ablation");
      return cmd_ablate(load_config_with_overrides(cfg_path, overrides, seed), data_dir, out_dir);
    }
    if (rep->parsed()) {
      if (out_dir.empty()) out_dir = run_dir;
      return cmd_report(run_dir, out_dir);
    }
    if (imp->parsed()) {
      if (out_dir.empty()) out_dir = default_out("imported");
      return cmd_import(import_paths, out_dir, threshold);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "jointad: %s\n", e.what());
    return 1;
  }
  return 2;
}

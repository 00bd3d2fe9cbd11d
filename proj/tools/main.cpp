// Command-line front end. One binary, five subcommands:
//
//   dataset   render the procedural labeled dataset to a directory
//   pretrain  train the auxiliary classifier on a dataset
//   train     fit the conditional radiance field (adversarial or reconstruction)
//   render    render images / sweeps from a field checkpoint
//   eval      compare two image sets (feature metrics + paired PSNR/SSIM)
//
// Exit codes: 0 success, 2 usage or precondition error, 3 file error
// (missing/corrupt inputs, malformed manifests), 4 numeric abort (the
// message names the replay file written by the trainer).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "ctrlnerf/checkpoint.hpp"
#include "ctrlnerf/dataset.hpp"
#include "ctrlnerf/discriminator.hpp"
#include "ctrlnerf/errors.hpp"
#include "ctrlnerf/field.hpp"
#include "ctrlnerf/metrics.hpp"
#include "ctrlnerf/renderer.hpp"
#include "ctrlnerf/trainer.hpp"

namespace fs = std::filesystem;
using namespace ctrlnerf;

namespace {

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string frame_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03d.ppm", index);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

// ---------------------------------------------------------------------------
// dataset

struct DatasetArgs {
  DatasetConfig cfg;
  std::string out;
};

int run_dataset(const DatasetArgs& a) {
  auto set = generate_dataset(a.cfg, a.out);
  std::cout << "wrote " << set.items.size() << " images (" << set.m << " classes x " << set.n
            << " styles) under " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  std::string data;
  std::string out;
  PretrainConfig cfg;
  std::string log_path;
  std::uint64_t seed = 0;
};

int run_pretrain(const PretrainArgs& a) {
  auto data = load_dataset(a.data);
  if (data.images.empty()) throw ContractViolation("pretrain: dataset is empty");

  ClassifierConfig ccfg;
  ccfg.resolution = data.images[0].width;
  ccfg.m = data.m;
  ccfg.n = data.n;

  Rng rng(a.seed);
  std::vector<PretrainLogEntry> log;
  auto clf = pretrain_classifier(data, ccfg, a.cfg, rng, &log);

  if (!a.log_path.empty()) {
    auto out = open_out(a.log_path);
    for (const auto& e : log)
      out << e.step << '\t' << fmt_g(e.loss) << '\t' << fmt_g(e.class_acc) << '\t'
          << fmt_g(e.style_acc) << '\n';
  }

  save_checkpoint(checkpoint_from_classifier(clf, a.seed, a.cfg.steps), a.out);

  // The final step always carries a held-out evaluation.
  std::cout << "class_accuracy\t" << fmt_g(log.back().class_acc) << '\n'
            << "style_accuracy\t" << fmt_g(log.back().style_acc) << '\n'
            << "saved " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string out;
  std::string mode = "adversarial";
  std::string ablation = "none";
  std::string classifier;
  std::string resume;
  TrainConfig cfg;
  bool no_hierarchical = false;
  // Field architecture.
  int dim_s = 128, dim_a = 128;
  int trunk_width = 128, trunk_depth = 4;
  int l_x = 10, l_d = 4;
  double bound = 2.0;
  double fov = 40.0;
  bool lambda1_set = false, lambda2_set = false;
};

int run_train(TrainArgs& a) {
  auto data = load_dataset(a.data);
  if (data.images.empty()) throw ContractViolation("train: dataset is empty");

  TrainConfig tcfg = a.cfg;
  tcfg.mode = a.mode == "reconstruction" ? TrainMode::reconstruction : TrainMode::adversarial;
  tcfg.m = data.m;
  tcfg.n = data.n;
  tcfg.render.hierarchical = !a.no_hierarchical;
  // Reconstruction without a classifier is a plain photometric fit.
  if (tcfg.mode == TrainMode::reconstruction && a.classifier.empty()) {
    if (!a.lambda1_set) tcfg.lambda1 = 0.0;
    if (!a.lambda2_set) tcfg.lambda2 = 0.0;
  }
  if (a.ablation != "none") tcfg = ablation_config(a.ablation, tcfg);

  // Camera and pose distribution implied by the data.
  const Image& first = data.images[0];
  Intrinsics K = Intrinsics::from_fov(first.width, first.height, a.fov);
  PoseRanges pr;
  pr.phi_min = data.items[0].pose.phi_deg;
  pr.phi_max = data.items[0].pose.phi_deg;
  pr.shift_min = data.items[0].pose.shift;
  pr.shift_max = data.items[0].pose.shift;
  double radius_sum = 0.0;
  for (const auto& it : data.items) {
    pr.phi_min = std::min(pr.phi_min, it.pose.phi_deg);
    pr.phi_max = std::max(pr.phi_max, it.pose.phi_deg);
    pr.shift_min = std::min(pr.shift_min, it.pose.shift);
    pr.shift_max = std::max(pr.shift_max, it.pose.shift);
    radius_sum += it.pose.radius;
  }
  pr.radius = radius_sum / static_cast<double>(data.items.size());
  tcfg.poses = pr;

  FieldConfig base;
  base.dim_s = a.dim_s;
  base.dim_a = a.dim_a;
  base.trunk_width = a.trunk_width;
  base.trunk_depth = a.trunk_depth;
  base.enc.l_x = a.l_x;
  base.enc.l_d = a.l_d;
  base.bound = a.bound;
  FieldConfig fcfg = make_field_config(tcfg, base);

  std::optional<ConditionalField> field;
  long start_iteration = 0;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint(a.resume);
    auto [resumed_cfg, resumed_field] = field_from_checkpoint(ck);
    fcfg = resumed_cfg;
    field.emplace(std::move(resumed_field));
    start_iteration = ck.meta_int("iteration");
  } else {
    Rng frng = Rng::stream(tcfg.seed, 1);
    field.emplace(ConditionalField::create(fcfg, frng));
  }

  std::optional<PatchDiscriminator> disc;
  if (tcfg.mode == TrainMode::adversarial) {
    DiscriminatorConfig dcfg;
    dcfg.k_patch = tcfg.k_patch;
    Rng drng = Rng::stream(tcfg.seed, 2);
    disc.emplace(PatchDiscriminator::create(dcfg, drng));
  }

  std::optional<AuxClassifier> clf;
  if (!a.classifier.empty()) clf.emplace(classifier_from_checkpoint(load_checkpoint(a.classifier)));

  auto st = TrainState::create(tcfg, *field, disc ? &*disc : nullptr, clf ? &*clf : nullptr, K);
  st.iteration = static_cast<int>(start_iteration);

  fs::create_directories(a.out);
  st.run_dir = a.out;
  auto mlog = open_out(fs::path(a.out) / "metrics.tsv");
  mlog << "# iteration\tl_adv\tl_cls\tl_sty\tr1\ttotal\tseconds\n";

  auto reports = run_training(st, data, &mlog);

  const fs::path field_path = fs::path(a.out) / "field.ckpt";
  save_checkpoint(checkpoint_from_field(*field, fcfg, tcfg.seed, st.iteration), field_path);
  std::cout << "trained " << reports.size() << " iterations (at " << st.iteration << ")\n";
  if (!reports.empty()) std::cout << "final total loss\t" << fmt_g(reports.back().total) << '\n';
  std::cout << "saved " << field_path.string() << '\n';
  if (disc) {
    const fs::path disc_path = fs::path(a.out) / "discriminator.ckpt";
    save_checkpoint(checkpoint_from_discriminator(*disc, tcfg.seed, st.iteration), disc_path);
    std::cout << "saved " << disc_path.string() << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// render

struct RenderArgs {
  std::string checkpoint;
  std::string out;
  int class_id = 0;
  int style_id = 0;
  std::string sweep;  // empty: single frame
  std::vector<double> values;
  int from = 0, to = 0;
  bool from_set = false, to_set = false;
  std::vector<double> lambdas;
  int resolution = 64;
  double fov = 40.0;
  double theta = 0.0, phi = 30.0, radius = 4.0, shift = 0.0;
  RenderConfig rc;
  bool no_hierarchical = false;
  std::string latent = "zero";
  std::uint64_t seed = 0;
};

struct Frame {
  LabelMix mix;
  Pose pose;
  double value = 0.0;
};

int run_render(const RenderArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  auto [fcfg, field] = field_from_checkpoint(ck);

  auto check_class = [&](int id, const char* what) {
    if (id < 0 || id >= fcfg.m)
      throw ContractViolation(std::string("render: ") + what + " " + std::to_string(id) +
                              " outside [0, " + std::to_string(fcfg.m) + ")");
  };
  auto check_style = [&](int id, const char* what) {
    if (id < 0 || id >= fcfg.n)
      throw ContractViolation(std::string("render: ") + what + " " + std::to_string(id) +
                              " outside [0, " + std::to_string(fcfg.n) + ")");
  };
  check_class(a.class_id, "--class");
  check_style(a.style_id, "--style");

  const bool interp_sweep = a.sweep == "color-interp" || a.sweep == "density-interp";
  const bool value_sweep = a.sweep == "yaw-turntable" || a.sweep == "pitch-sweep" ||
                           a.sweep == "depth" || a.sweep == "shift";
  if (!a.sweep.empty() && !interp_sweep && !value_sweep)
    throw ContractViolation("render: unknown sweep kind " + a.sweep);
  if (value_sweep && a.values.empty())
    throw ContractViolation("render: sweep " + a.sweep + " needs a nonempty --values list");
  if (interp_sweep) {
    if (!a.from_set || !a.to_set)
      throw ContractViolation("render: sweep " + a.sweep + " needs --from and --to");
    if (a.lambdas.empty())
      throw ContractViolation("render: sweep " + a.sweep + " needs a nonempty --lambdas list");
    for (double l : a.lambdas)
      if (!(l >= 0.0 && l <= 1.0))
        throw ContractViolation("render: lambda " + fmt_g(l) + " outside [0,1]");
    if (a.sweep == "density-interp") {
      check_class(a.from, "--from");
      check_class(a.to, "--to");
    } else {
      check_style(a.from, "--from");
      check_style(a.to, "--to");
    }
  }

  // Latent codes, then label-conditioned embeddings. Interpolation sweeps
  // embed with the --from labels; only the selected head row is blended.
  ad::Tensor<float> z_s, z_a;
  if (a.latent == "normal") {
    Rng lrng(a.seed);
    std::vector<float> vs(static_cast<size_t>(fcfg.dim_s));
    for (auto& v : vs) v = static_cast<float>(lrng.normal());
    std::vector<float> va(static_cast<size_t>(fcfg.dim_a));
    for (auto& v : va) v = static_cast<float>(lrng.normal());
    z_s = ad::Tensor<float>::from({1, fcfg.dim_s}, std::move(vs));
    z_a = ad::Tensor<float>::from({1, fcfg.dim_a}, std::move(va));
  } else {
    z_s = ad::Tensor<float>::zeros({1, fcfg.dim_s});
    z_a = ad::Tensor<float>::zeros({1, fcfg.dim_a});
  }
  const int embed_class = a.sweep == "density-interp" ? a.from : a.class_id;
  const int embed_style = a.sweep == "color-interp" ? a.from : a.style_id;
  auto [zs_emb, za_emb] = field.embed_labels(z_s, z_a, embed_class, embed_style);

  Pose base;
  base.radius = a.radius;
  base.theta_deg = a.theta;
  base.phi_deg = a.phi;
  base.shift = a.shift;

  // Yaw is periodic: wrap into the canonical (-180, 180] so a turntable can
  // be specified as 0..360.
  auto wrap_yaw = [](double deg) {
    double w = std::fmod(deg + 180.0, 360.0);
    if (w < 0.0) w += 360.0;
    return w == 0.0 ? 180.0 : w - 180.0;
  };

  std::vector<Frame> frames;
  const LabelMix pure = LabelMix::pure(a.class_id, a.style_id);
  if (a.sweep.empty()) {
    frames.push_back({pure, base, 0.0});
  } else if (value_sweep) {
    for (double v : a.values) {
      Frame f{pure, base, v};
      if (a.sweep == "yaw-turntable") f.pose.theta_deg = wrap_yaw(v);
      else if (a.sweep == "pitch-sweep") f.pose.phi_deg = v;
      else if (a.sweep == "depth") f.pose.radius = v;
      else f.pose.shift = v;
      frames.push_back(f);
    }
  } else {
    for (double l : a.lambdas) {
      Frame f{pure, base, l};
      if (a.sweep == "density-interp") {
        f.mix.class_from = a.from;
        f.mix.class_to = a.to;
        f.mix.class_lambda = l;
      } else {
        f.mix.style_from = a.from;
        f.mix.style_to = a.to;
        f.mix.style_lambda = l;
      }
      frames.push_back(f);
    }
  }

  RenderConfig rc = a.rc;
  rc.hierarchical = !a.no_hierarchical;
  Intrinsics K = Intrinsics::from_fov(a.resolution, a.resolution, a.fov);

  fs::create_directories(a.out);
  auto index = open_out(fs::path(a.out) / "index.tsv");
  const std::string kind = a.sweep.empty() ? "single" : a.sweep;
  for (size_t i = 0; i < frames.size(); ++i) {
    const Frame& f = frames[i];
    Image img = render_image(field, f.mix, zs_emb, za_emb, K, f.pose, rc, a.seed);
    const std::string name = frame_name(static_cast<int>(i));
    write_ppm(img, fs::path(a.out) / name);
    index << name << '\t' << kind << '\t' << fmt_g(f.value) << '\n';
  }
  std::cout << "wrote " << frames.size() << " frames under " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string real;
  std::string gen;
  std::string classifier;
};

FeatureMatrix features_of(const LabeledImageSet& set, const std::vector<int>& idx,
                          const AuxClassifier& clf) {
  std::vector<Image> resized;
  resized.reserve(idx.size());
  for (int i : idx) {
    const Image& img = set.images[i];
    resized.push_back(img.width == clf.cfg.resolution && img.height == clf.cfg.resolution
                          ? img
                          : resize_bilinear(img, clf.cfg.resolution, clf.cfg.resolution));
  }
  std::vector<const Image*> ptrs;
  ptrs.reserve(resized.size());
  for (const auto& img : resized) ptrs.push_back(&img);
  return extract_features(ptrs, clf);
}

int run_eval(const EvalArgs& a) {
  auto real = load_dataset(a.real);
  auto gen = load_dataset(a.gen);
  std::vector<std::pair<std::string, double>> rows;

  if (!a.classifier.empty()) {
    auto clf = classifier_from_checkpoint(load_checkpoint(a.classifier));

    auto group_metrics = [&](const std::string& name, const std::vector<int>& ridx,
                             const std::vector<int>& gidx, bool counts) {
      if (ridx.size() >= 2 && gidx.size() >= 2) {
        auto fr = features_of(real, ridx, clf);
        auto fg = features_of(gen, gidx, clf);
        rows.emplace_back("fid" + name, frechet_distance(compute_stats(fr), compute_stats(fg)));
        rows.emplace_back("kid" + name, kid(fr, fg));
      }
      if (counts) {
        rows.emplace_back("n_real" + name, static_cast<double>(ridx.size()));
        rows.emplace_back("n_gen" + name, static_cast<double>(gidx.size()));
      }
    };

    std::vector<int> all_r(real.items.size()), all_g(gen.items.size());
    for (size_t i = 0; i < all_r.size(); ++i) all_r[i] = static_cast<int>(i);
    for (size_t i = 0; i < all_g.size(); ++i) all_g[i] = static_cast<int>(i);
    group_metrics("", all_r, all_g, false);

    auto by_label = [](const LabeledImageSet& set, bool use_class) {
      std::vector<std::vector<int>> groups;
      for (size_t i = 0; i < set.items.size(); ++i) {
        const int id = use_class ? set.items[i].class_id : set.items[i].style_id;
        if (id >= static_cast<int>(groups.size())) groups.resize(id + 1);
        groups[id].push_back(static_cast<int>(i));
      }
      return groups;
    };
    for (int axis = 0; axis < 2; ++axis) {
      const bool use_class = axis == 0;
      auto rg = by_label(real, use_class);
      auto gg = by_label(gen, use_class);
      const size_t count = std::max(rg.size(), gg.size());
      rg.resize(count);
      gg.resize(count);
      for (size_t id = 0; id < count; ++id) {
        if (rg[id].empty() && gg[id].empty()) continue;
        const std::string name =
            (use_class ? ".class" : ".style") + std::to_string(id);
        group_metrics(name, rg[id], gg[id], true);
      }
    }
  }

  // Paired full-reference metrics, meaningful only for aligned sets.
  bool paired = real.items.size() == gen.items.size() && !real.items.empty();
  for (size_t i = 0; paired && i < real.images.size(); ++i)
    paired = real.images[i].width == gen.images[i].width &&
             real.images[i].height == gen.images[i].height;
  if (paired) {
    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (size_t i = 0; i < real.images.size(); ++i) {
      psnr_sum += psnr(real.images[i], gen.images[i], 1.0);
      ssim_sum += ssim(real.images[i], gen.images[i], 1.0);
    }
    rows.emplace_back("psnr", psnr_sum / static_cast<double>(real.images.size()));
    rows.emplace_back("ssim", ssim_sum / static_cast<double>(real.images.size()));
  }

  for (const auto& [name, value] : rows) std::cout << name << '\t' << fmt_g(value) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label-controllable neural radiance field toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "key=value configuration file with one [subcommand] section per command; "
                 "explicit flags win");

  DatasetArgs da;
  auto* sd = app.add_subcommand("dataset", "Generate the procedural labeled dataset");
  sd->fallthrough();
  sd->add_option("--out", da.out, "output directory")->required();
  sd->add_option("--classes", da.cfg.m, "shape class count");
  sd->add_option("--styles", da.cfg.n, "color style count");
  sd->add_option("--poses-per-cell", da.cfg.poses_per_cell, "images per (class, style) cell");
  sd->add_option("--image-size", da.cfg.image_size, "square image side in pixels");
  sd->add_option("--radius", da.cfg.radius, "camera orbit radius");
  sd->add_option("--fov", da.cfg.fov_deg, "horizontal field of view (degrees)");
  sd->add_option("--phi-min", da.cfg.phi_min, "minimum elevation (degrees)");
  sd->add_option("--phi-max", da.cfg.phi_max, "maximum elevation (degrees)");
  sd->add_option("--shift-min", da.cfg.shift_min, "minimum vertical object shift");
  sd->add_option("--shift-max", da.cfg.shift_max, "maximum vertical object shift");
  sd->add_option("--scale", da.cfg.scale, "object scale");
  sd->add_option("--seed", da.cfg.seed, "pose sampling seed");

  PretrainArgs pa;
  auto* sp = app.add_subcommand("pretrain", "Pretrain the auxiliary classifier");
  sp->fallthrough();
  sp->add_option("--data", pa.data, "dataset directory (with manifest.tsv)")->required();
  sp->add_option("--out", pa.out, "classifier checkpoint to write")->required();
  sp->add_option("--steps", pa.cfg.steps, "training steps");
  sp->add_option("--batch", pa.cfg.batch, "batch size");
  sp->add_option("--lr", pa.cfg.lr, "learning rate");
  sp->add_option("--eval-every", pa.cfg.eval_every, "held-out evaluation cadence");
  sp->add_option("--log", pa.log_path, "optional per-step loss/accuracy TSV");
  sp->add_option("--seed", pa.seed, "initialization and batch sampling seed");

  TrainArgs ta;
  auto* st = app.add_subcommand("train", "Train the conditional radiance field");
  st->fallthrough();
  st->add_option("--data", ta.data, "dataset directory (with manifest.tsv)")->required();
  st->add_option("--out", ta.out, "run directory (checkpoints, metrics.tsv, lock)")->required();
  st->add_option("--mode", ta.mode, "adversarial | reconstruction")
      ->check(CLI::IsMember({"adversarial", "reconstruction"}));
  st->add_option("--iterations", ta.cfg.iterations, "training iterations");
  st->add_option("--batch", ta.cfg.batch_size, "patches per iteration");
  st->add_option("--lr-g", ta.cfg.lr_g, "generator learning rate");
  st->add_option("--lr-d", ta.cfg.lr_d, "discriminator learning rate");
  auto* l1 = st->add_option("--lambda1", ta.cfg.lambda1, "class consistency weight");
  auto* l2 = st->add_option("--lambda2", ta.cfg.lambda2, "style consistency weight");
  st->add_option("--lambda-r1", ta.cfg.lambda_r1, "gradient penalty weight");
  st->add_option("--k-patch", ta.cfg.k_patch, "discriminator patch side");
  st->add_option("--patch-scale-min", ta.cfg.patch_scale_min, "min patch footprint fraction");
  st->add_option("--patch-scale-max", ta.cfg.patch_scale_max, "max patch footprint fraction");
  st->add_option("--classifier", ta.classifier,
                 "pretrained classifier checkpoint (required when lambda1 or lambda2 > 0)");
  st->add_option("--resume", ta.resume, "field checkpoint to continue from");
  st->add_option("--ablation", ta.ablation, "generator ablation variant")
      ->check(CLI::IsMember({"none", "no_label_input", "no_array_output", "no_classifier"}));
  st->add_option("--n-coarse", ta.cfg.render.n_coarse, "coarse samples per ray");
  st->add_option("--n-fine", ta.cfg.render.n_fine, "fine samples per ray");
  st->add_flag("--no-hierarchical", ta.no_hierarchical, "disable hierarchical sampling");
  st->add_option("--t-near", ta.cfg.render.t_near, "near integration bound");
  st->add_option("--t-far", ta.cfg.render.t_far, "far integration bound");
  st->add_option("--dim-s", ta.dim_s, "shape code dimension");
  st->add_option("--dim-a", ta.dim_a, "appearance code dimension");
  st->add_option("--trunk-width", ta.trunk_width, "field trunk width");
  st->add_option("--trunk-depth", ta.trunk_depth, "field trunk depth");
  st->add_option("--l-x", ta.l_x, "position encoding frequencies");
  st->add_option("--l-d", ta.l_d, "direction encoding frequencies");
  st->add_option("--bound", ta.bound, "scene half-extent");
  st->add_option("--fov", ta.fov, "camera field of view of the dataset (degrees)");
  st->add_option("--seed", ta.cfg.seed, "training seed");

  RenderArgs ra;
  auto* sr = app.add_subcommand("render", "Render frames from a field checkpoint");
  sr->fallthrough();
  sr->add_option("--checkpoint", ra.checkpoint, "field checkpoint")->required();
  sr->add_option("--out", ra.out, "output directory (frame_NNN.ppm + index.tsv)")->required();
  sr->add_option("--class", ra.class_id, "shape class id");
  sr->add_option("--style", ra.style_id, "color style id");
  sr->add_option("--sweep", ra.sweep,
                 "yaw-turntable | pitch-sweep | depth | shift | color-interp | density-interp")
      ->check(CLI::IsMember({"yaw-turntable", "pitch-sweep", "depth", "shift", "color-interp",
                             "density-interp"}));
  sr->add_option("--values", ra.values, "swept pose values (pose sweeps)")->delimiter(',');
  auto* fo = sr->add_option("--from", ra.from, "interpolation start label");
  auto* to = sr->add_option("--to", ra.to, "interpolation end label");
  sr->add_option("--lambdas", ra.lambdas, "blend weights in [0,1] (interpolation sweeps)")
      ->delimiter(',');
  sr->add_option("--resolution", ra.resolution, "square image side in pixels");
  sr->add_option("--fov", ra.fov, "horizontal field of view (degrees)");
  sr->add_option("--theta", ra.theta, "camera yaw (degrees)");
  sr->add_option("--phi", ra.phi, "camera elevation (degrees)");
  sr->add_option("--radius", ra.radius, "camera orbit radius");
  sr->add_option("--shift", ra.shift, "vertical object shift");
  sr->add_option("--n-coarse", ra.rc.n_coarse, "coarse samples per ray");
  sr->add_option("--n-fine", ra.rc.n_fine, "fine samples per ray");
  sr->add_flag("--no-hierarchical", ra.no_hierarchical, "disable hierarchical sampling");
  sr->add_option("--t-near", ra.rc.t_near, "near integration bound");
  sr->add_option("--t-far", ra.rc.t_far, "far integration bound");
  sr->add_option("--latent", ra.latent, "latent code draw: zero | normal")
      ->check(CLI::IsMember({"zero", "normal"}));
  sr->add_option("--seed", ra.seed, "sampling seed (bitwise reproducible)");

  EvalArgs ea;
  std::uint64_t eval_seed = 0;
  auto* se = app.add_subcommand("eval", "Compare two labeled image sets");
  se->fallthrough();
  se->add_option("--real", ea.real, "reference dataset directory")->required();
  se->add_option("--gen", ea.gen, "generated dataset directory")->required();
  se->add_option("--classifier", ea.classifier,
                 "classifier checkpoint enabling the feature metrics");
  se->add_option("--seed", eval_seed, "accepted for uniformity; evaluation is deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  ta.lambda1_set = l1->count() > 0;
  ta.lambda2_set = l2->count() > 0;
  ra.from_set = fo->count() > 0;
  ra.to_set = to->count() > 0;

  try {
    if (sd->parsed()) return run_dataset(da);
    if (sp->parsed()) return run_pretrain(pa);
    if (st->parsed()) return run_train(ta);
    if (sr->parsed()) return run_render(ra);
    if (se->parsed()) return run_eval(ea);
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

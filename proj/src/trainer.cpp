#include "ctrlnerf/trainer.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <fstream>

#include "ctrlnerf/errors.hpp"

namespace ctrlnerf {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda_r1 < 0)
    throw ContractViolation("TrainConfig: loss weights must be nonnegative");
  if (batch_size < 1) throw ContractViolation("TrainConfig: batch_size must be >= 1");
  if (!(lr_g > 0) || !(lr_d > 0)) throw ContractViolation("TrainConfig: learning rates must be positive");
  if (iterations < 0) throw ContractViolation("TrainConfig: negative iteration budget");
  if (m < 1 || n < 1) throw ContractViolation("TrainConfig: label counts must be >= 1");
  if (k_patch < 1) throw ContractViolation("TrainConfig: k_patch must be >= 1");
  if (!(patch_scale_min > 0) || patch_scale_min > patch_scale_max || patch_scale_max > 1.0)
    throw ContractViolation("TrainConfig: need 0 < patch_scale_min <= patch_scale_max <= 1");
  render.validate();
}

FieldConfig make_field_config(const TrainConfig& t, FieldConfig base) {
  base.m = t.array_outputs ? t.m : 1;
  base.n = t.array_outputs ? t.n : 1;
  base.use_label_embedding = t.use_label_embedding;
  return base;
}

TrainConfig ablation_config(const std::string& which, TrainConfig base) {
  if (which == "no_label_input") {
    base.use_label_embedding = false;
  } else if (which == "no_array_output") {
    base.array_outputs = false;
  } else if (which == "no_classifier") {
    base.lambda1 = 0;
    base.lambda2 = 0;
  } else {
    throw ContractViolation("ablation_config: unknown variant '" + which + "'");
  }
  return base;
}

std::string format_report(const StepReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.3f", r.iteration, r.l_adv,
                r.l_cls, r.l_sty, r.r1, r.total, r.seconds);
  return buf;
}

template <typename S>
GanLosses<S> gan_losses(const ad::Tensor<S>& d_real, const ad::Tensor<S>& d_fake,
                        const ad::Tensor<S>& grad_norm2, double lambda_r1) {
  auto check_finite = [](const ad::Tensor<S>& t, const char* what) {
    for (S v : t.values())
      if (!std::isfinite(v)) throw NumericError(std::string("gan_losses: non-finite ") + what);
  };
  check_finite(d_real, "real logit");
  check_finite(d_fake, "fake logit");
  check_finite(grad_norm2, "grad_norm2");
  if (d_real.numel() == 0 || d_fake.numel() == 0)
    throw ContractViolation("gan_losses: empty logits");
  if (grad_norm2.numel() != 1) throw ContractViolation("gan_losses: grad_norm2 must be a scalar");
  if (grad_norm2.value_at(0) < S(0))
    throw ContractViolation("gan_losses: grad_norm2 must be nonnegative");
  if (lambda_r1 < 0) throw ContractViolation("gan_losses: lambda_r1 must be nonnegative");

  GanLosses<S> out;
  out.loss_g = ad::mean(ad::softplus(ad::scale(d_fake, S(-1))));
  out.loss_d = ad::add(ad::mean(ad::softplus(d_fake)),
                       ad::mean(ad::softplus(ad::scale(d_real, S(-1)))));
  if (lambda_r1 > 0)
    out.loss_d = ad::add(out.loss_d, ad::scale(grad_norm2, static_cast<S>(lambda_r1)));
  return out;
}

template GanLosses<float> gan_losses(const ad::Tensor<float>&, const ad::Tensor<float>&,
                                     const ad::Tensor<float>&, double);
template GanLosses<double> gan_losses(const ad::Tensor<double>&, const ad::Tensor<double>&,
                                      const ad::Tensor<double>&, double);

namespace {

ad::Tensor<float> normal_row(int dim, Rng& rng) {
  std::vector<float> v(static_cast<size_t>(dim));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return ad::Tensor<float>::from({1, dim}, std::move(v));
}

// Image (row-major RGB triplets) -> constant [1,3,H,W] tensor.
ad::Tensor<float> image_to_nchw(const Image& img) {
  const int h = img.height, w = img.width;
  std::vector<float> v(static_cast<size_t>(3) * h * w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        v[(static_cast<size_t>(c) * h + y) * w + x] = img.rgb[(static_cast<size_t>(y) * w + x) * 3 + c];
  return ad::Tensor<float>::from({1, 3, h, w}, std::move(v));
}

fs::path write_replay(const TrainState& st, const std::string& rng_state, const char* reason) {
  std::error_code ec;
  fs::create_directories(st.run_dir, ec);
  const fs::path p = st.run_dir / ("replay_iter" + std::to_string(st.iteration) + ".txt");
  std::ofstream f(p, std::ios::trunc);
  f << "iteration=" << st.iteration << '\n'
    << "seed=" << st.cfg.seed << '\n'
    << "error=" << reason << '\n'
    << "rng_state=" << rng_state << '\n';
  return p;
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

TrainState TrainState::create(const TrainConfig& cfg, ConditionalField& field,
                              PatchDiscriminator* disc, const AuxClassifier* classifier,
                              const Intrinsics& intrinsics) {
  cfg.validate();
  intrinsics.validate();

  TrainState st;
  st.cfg = cfg;
  st.field = &field;
  st.disc = disc;
  st.classifier = classifier;
  st.intrinsics = intrinsics;

  const int want_m = cfg.array_outputs ? cfg.m : 1;
  const int want_n = cfg.array_outputs ? cfg.n : 1;
  if (field.cfg.m != want_m || field.cfg.n != want_n)
    throw ContractViolation("TrainState: field heads [" + std::to_string(field.cfg.m) + "," +
                            std::to_string(field.cfg.n) + "] do not match the config [" +
                            std::to_string(want_m) + "," + std::to_string(want_n) + "]");
  if (field.cfg.use_label_embedding != cfg.use_label_embedding)
    throw ContractViolation("TrainState: field and config disagree on label embedding");

  if (cfg.mode == TrainMode::adversarial) {
    if (!disc) throw ContractViolation("TrainState: adversarial mode needs a discriminator");
    if (disc->cfg.k_patch != cfg.k_patch)
      throw ContractViolation("TrainState: discriminator expects k_patch " +
                              std::to_string(disc->cfg.k_patch) + ", config says " +
                              std::to_string(cfg.k_patch));
  }

  if (cfg.lambda1 > 0 || cfg.lambda2 > 0) {
    if (!classifier)
      throw ContractViolation("TrainState: classifier losses enabled but no classifier given");
    if (!classifier->pretrained)
      throw ContractViolation("TrainState: classifier must be pretrained");
    if (classifier->cfg.m != cfg.m || classifier->cfg.n != cfg.n)
      throw ContractViolation("TrainState: classifier label counts do not match the config");
    // Frozen: gradients still flow through to the rendered patch, but the
    // classifier itself never updates during the game.
    for (auto t : classifier->parameters()) t.set_requires_grad(false);
  }

  auto gparams = field.parameters();
  if (!cfg.use_label_embedding) {
    // parameters() lists the label tables first; with identity embeddings
    // they never receive gradients, so they must not sit in the optimizer.
    gparams.erase(gparams.begin(), gparams.begin() + 2);
  }
  st.opt_g.emplace(std::move(gparams), cfg.lr_g);
  if (cfg.mode == TrainMode::adversarial) st.opt_d.emplace(disc->parameters(), cfg.lr_d);
  return st;
}

StepReport train_step_adversarial(TrainState& st, const LabeledImageSet& data,
                                  const std::vector<int>& batch, Rng& rng) {
  if (st.cfg.mode != TrainMode::adversarial)
    throw ContractViolation("train_step_adversarial: state is configured for reconstruction");
  if (!st.field || !st.disc || !st.opt_g || !st.opt_d)
    throw ContractViolation("train_step_adversarial: state is not initialized");
  if (batch.empty()) throw ContractViolation("train_step_adversarial: empty batch");
  for (int idx : batch)
    if (idx < 0 || idx >= static_cast<int>(data.items.size()))
      throw ContractViolation("train_step_adversarial: batch index " + std::to_string(idx) +
                              " outside the dataset");

  const std::string entry_state = rng.state();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const int b_count = static_cast<int>(batch.size());
    const int k = st.cfg.k_patch;
    ad::Tape<float> tape;

    std::vector<int> cls_labels(b_count), sty_labels(b_count);
    std::vector<ad::Tensor<float>> fake_list, real_list;
    fake_list.reserve(b_count);
    real_list.reserve(b_count);
    for (int b = 0; b < b_count; ++b) {
      const int i = static_cast<int>(rng.uniform_index(st.cfg.m));
      const int j = static_cast<int>(rng.uniform_index(st.cfg.n));
      cls_labels[b] = i;
      sty_labels[b] = j;
      auto z_s = normal_row(st.field->cfg.dim_s, rng);
      auto z_a = normal_row(st.field->cfg.dim_a, rng);
      const Pose pose = sample_pose(st.cfg.poses, rng);
      const PatchPattern pattern =
          sample_pattern(st.intrinsics.width, st.intrinsics.height, st.cfg.patch_scale_min,
                         st.cfg.patch_scale_max, k, rng);
      // Scalar-head fields collapse every label onto their single entry.
      const int ri = st.field->cfg.m == 1 ? 0 : i;
      const int rj = st.field->cfg.n == 1 ? 0 : j;
      auto [zse, zae] = st.field->embed_labels(z_s, z_a, ri, rj);
      auto rgb = render_patch(*st.field, ri, rj, zse, zae, st.intrinsics, pose, pattern,
                              st.cfg.render, rng);
      fake_list.push_back(rays_to_nchw(rgb, k, k));
      real_list.push_back(image_to_nchw(extract_patch(data.images[batch[b]], pattern)));
    }
    auto fakes = b_count == 1 ? fake_list[0] : ad::concat(fake_list, 0);
    auto reals = b_count == 1 ? real_list[0] : ad::concat(real_list, 0);

    // --- discriminator update (fakes detached) ---
    auto d_real = st.disc->forward(reals, /*update_sn=*/true);
    auto d_fake_det = st.disc->forward(fakes.detach(), false);
    auto gn2 = ad::Tensor<float>::scalar(0.0f);
    if (st.cfg.lambda_r1 > 0) {
      auto surrogate = r1_surrogate(
          [&](const ad::Tensor<float>& x) { return st.disc->forward(x, false); }, reals,
          ad::sum(d_real), 1e-3, 2, rng);
      gn2 = ad::scale(surrogate, 1.0f / static_cast<float>(b_count));  // per-patch mean
    }
    auto d_losses = gan_losses(d_real, d_fake_det, gn2, st.cfg.lambda_r1);
    const double loss_d_value = d_losses.loss_d.value_at(0);
    const double r1_value = gn2.value_at(0);
    tape.backward(d_losses.loss_d);
    st.opt_d->step();
    tape.clear_grads();

    // --- generator update (fakes live, discriminator and classifier fixed) ---
    auto d_fake_live = st.disc->forward(fakes, false);
    auto l_adv =
        gan_losses(d_real.detach(), d_fake_live, ad::Tensor<float>::scalar(0.0f), 0.0).loss_g;
    auto total = l_adv;
    double cls_value = 0, sty_value = 0;
    if (st.cfg.lambda1 > 0 || st.cfg.lambda2 > 0) {
      const int res = st.classifier->cfg.resolution;
      auto scored = k == res ? fakes : ad::upsample_bilinear(fakes, res, res);
      auto [logit_c, logit_s] = st.classifier->forward(scored);
      auto l_cls = ad::softmax_cross_entropy(logit_c, cls_labels);
      auto l_sty = ad::softmax_cross_entropy(logit_s, sty_labels);
      cls_value = l_cls.value_at(0);
      sty_value = l_sty.value_at(0);
      total = ad::add(total, ad::add(ad::scale(l_cls, static_cast<float>(st.cfg.lambda1)),
                                     ad::scale(l_sty, static_cast<float>(st.cfg.lambda2))));
    }
    tape.backward(total);
    st.opt_g->step();
    st.opt_d->zero_grads();  // deposited through the discriminator in the generator pass

    StepReport rep;
    rep.iteration = st.iteration++;
    rep.l_adv = l_adv.value_at(0);
    rep.l_cls = cls_value;
    rep.l_sty = sty_value;
    rep.r1 = r1_value;
    rep.total = rep.l_adv + st.cfg.lambda1 * rep.l_cls + st.cfg.lambda2 * rep.l_sty;
    rep.loss_d = loss_d_value;
    rep.seconds = seconds_since(t0);
    return rep;
  } catch (const NumericError& e) {
    const fs::path p = write_replay(st, entry_state, e.what());
    throw NumericError("train_step_adversarial: aborted at iteration " +
                       std::to_string(st.iteration) + " (" + e.what() +
                       "); rng state saved to " + p.string());
  }
}

StepReport train_step_reconstruction(TrainState& st, const PosedImage& item, Rng& rng) {
  if (st.cfg.mode != TrainMode::reconstruction)
    throw ContractViolation("train_step_reconstruction: state is configured for adversarial play");
  if (!st.field || !st.opt_g)
    throw ContractViolation("train_step_reconstruction: state is not initialized");
  if (!item.image) throw ContractViolation("train_step_reconstruction: null image");
  if (!item.pose) throw ContractViolation("train_step_reconstruction: image carries no pose");
  if (item.class_id < 0 || item.class_id >= st.cfg.m || item.style_id < 0 ||
      item.style_id >= st.cfg.n)
    throw ContractViolation("train_step_reconstruction: labels outside the configured counts");
  const Image& img = *item.image;
  if (img.width != st.intrinsics.width || img.height != st.intrinsics.height)
    throw ContractViolation("train_step_reconstruction: image size does not match the camera");

  const std::string entry_state = rng.state();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    ad::Tape<float> tape;
    // Deterministic latents: reconstruction fits the field itself, the prior
    // only matters for the adversarial game.
    auto z_s = ad::Tensor<float>::zeros({1, st.field->cfg.dim_s});
    auto z_a = ad::Tensor<float>::zeros({1, st.field->cfg.dim_a});
    const int ri = st.field->cfg.m == 1 ? 0 : item.class_id;
    const int rj = st.field->cfg.n == 1 ? 0 : item.style_id;
    auto [zse, zae] = st.field->embed_labels(z_s, z_a, ri, rj);
    const auto pattern = PatchPattern::full_image(img.width, img.height);
    auto rgb = render_patch(*st.field, ri, rj, zse, zae, st.intrinsics, *item.pose, pattern,
                            st.cfg.render, rng);  // [H*W,3], row-major like Image
    auto target = ad::Tensor<float>::from({img.height * img.width, 3}, img.rgb);
    auto diff = ad::sub(rgb, target);
    auto mse = ad::mean(ad::mul(diff, diff));

    auto total = mse;
    double cls_value = 0, sty_value = 0;
    if (st.cfg.lambda1 > 0 || st.cfg.lambda2 > 0) {
      const int res = st.classifier->cfg.resolution;
      auto nchw = rays_to_nchw(rgb, img.height, img.width);
      auto scored = (img.width == res && img.height == res)
                        ? nchw
                        : ad::upsample_bilinear(nchw, res, res);
      auto [logit_c, logit_s] = st.classifier->forward(scored);
      auto l_cls = ad::softmax_cross_entropy(logit_c, {item.class_id});
      auto l_sty = ad::softmax_cross_entropy(logit_s, {item.style_id});
      cls_value = l_cls.value_at(0);
      sty_value = l_sty.value_at(0);
      total = ad::add(total, ad::add(ad::scale(l_cls, static_cast<float>(st.cfg.lambda1)),
                                     ad::scale(l_sty, static_cast<float>(st.cfg.lambda2))));
    }
    tape.backward(total);
    st.opt_g->step();

    StepReport rep;
    rep.iteration = st.iteration++;
    rep.l_adv = mse.value_at(0);
    rep.l_cls = cls_value;
    rep.l_sty = sty_value;
    rep.total = rep.l_adv + st.cfg.lambda1 * rep.l_cls + st.cfg.lambda2 * rep.l_sty;
    rep.seconds = seconds_since(t0);
    return rep;
  } catch (const NumericError& e) {
    const fs::path p = write_replay(st, entry_state, e.what());
    throw NumericError("train_step_reconstruction: aborted at iteration " +
                       std::to_string(st.iteration) + " (" + e.what() +
                       "); rng state saved to " + p.string());
  }
}

TrainLock::TrainLock(const std::filesystem::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  path_ = dir / ".train.lock";
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0)
    throw IoError("TrainLock: another trainer holds " + path_.string());
  char buf[32];
  const int len = std::snprintf(buf, sizeof buf, "%d\n", static_cast<int>(::getpid()));
  if (len > 0) {
    const ssize_t written = ::write(fd, buf, static_cast<size_t>(len));
    (void)written;
  }
  ::close(fd);
}

TrainLock::~TrainLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::vector<StepReport> run_training(TrainState& st, const LabeledImageSet& data,
                                     std::ostream* metrics_log) {
  if (data.items.empty()) throw ContractViolation("run_training: empty dataset");
  TrainLock lock(st.run_dir);
  Rng rng(st.cfg.seed);
  std::vector<StepReport> reports;
  reports.reserve(static_cast<size_t>(st.cfg.iterations));
  for (int it = 0; it < st.cfg.iterations; ++it) {
    StepReport rep;
    if (st.cfg.mode == TrainMode::adversarial) {
      const auto batch = sample_batch(data, st.cfg.batch_size, rng);
      rep = train_step_adversarial(st, data, batch, rng);
    } else {
      const int idx = static_cast<int>(rng.uniform_index(data.items.size()));
      const auto& di = data.items[idx];
      PosedImage pi{&data.images[idx], di.class_id, di.style_id, di.pose};
      rep = train_step_reconstruction(st, pi, rng);
    }
    if (metrics_log) {
      *metrics_log << format_report(rep) << '\n';
      metrics_log->flush();
    }
    reports.push_back(rep);
  }
  return reports;
}

}  // namespace ctrlnerf

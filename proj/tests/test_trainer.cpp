#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ctrlnerf/trainer.hpp"
#include "doctest.h"
#include "fd_check.hpp"

using namespace ctrlnerf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  auto p = fs::temp_directory_path() / (std::string("ctrlnerf_trainer_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double softplus_ref(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

template <typename S>
ad::Tensor<S> random_tensor(ad::Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::vector<S> v(ad::shape_numel(shape));
  for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  return ad::Tensor<S>::from(std::move(shape), std::move(v));
}

double mean_over(const std::vector<double>& v, size_t begin, size_t end) {
  return std::accumulate(v.begin() + begin, v.begin() + end, 0.0) / static_cast<double>(end - begin);
}

// Everything one adversarial smoke step needs, at a few-millisecond scale.
struct TinyRig {
  LabeledImageSet data;
  FieldConfig fcfg;
  ConditionalField field;
  DiscriminatorConfig dcfg;
  PatchDiscriminator disc;
  ClassifierConfig ccfg;
  AuxClassifier clf;
  TrainConfig tcfg;
  Intrinsics intr;
};

TinyRig make_rig(const fs::path& dir, TrainConfig tcfg = {}, bool with_classifier = true) {
  TinyRig r;
  DatasetConfig dc;
  dc.m = 2;
  dc.n = 2;
  dc.poses_per_cell = 2;
  dc.image_size = 16;
  dc.seed = 70;
  r.data = generate_dataset(dc, dir / "data");

  tcfg.m = 2;
  tcfg.n = 2;
  tcfg.k_patch = 16;
  tcfg.batch_size = 2;
  tcfg.render.n_coarse = 4;
  tcfg.render.n_fine = 2;
  r.tcfg = tcfg;

  r.fcfg.m = 2;
  r.fcfg.n = 2;
  r.fcfg.dim_s = 4;
  r.fcfg.dim_a = 4;
  r.fcfg.trunk_width = 8;
  r.fcfg.trunk_depth = 1;
  r.fcfg.enc.l_x = 2;
  r.fcfg.enc.l_d = 1;
  r.fcfg = make_field_config(tcfg, r.fcfg);
  Rng frng(1);
  r.field = ConditionalField::create(r.fcfg, frng);

  r.dcfg.k_patch = 16;
  r.dcfg.widths = {4, 4, 8, 8};
  Rng drng(2);
  r.disc = PatchDiscriminator::create(r.dcfg, drng);

  if (with_classifier) {
    r.ccfg.resolution = 16;
    r.ccfg.m = 2;
    r.ccfg.n = 2;
    r.ccfg.widths = {2, 3, 4, 5};
    Rng crng(3);
    r.clf = AuxClassifier::create(r.ccfg, crng);
    r.clf.pretrained = true;
  }

  r.intr = Intrinsics::from_fov(16, 16, 40.0);
  return r;
}

}  // namespace

TEST_CASE("gan losses match the analytic oracle") {
  auto scalar = [](double v) { return ad::Tensor<double>::scalar(v); };
  const auto zero = scalar(0.0);

  auto at_zero = gan_losses(zero, zero, zero, 0.0);
  CHECK(at_zero.loss_g.value_at(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(at_zero.loss_d.value_at(0) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  // batched logits average
  auto d_r = ad::Tensor<double>::from({2, 1}, {1.0, -2.0});
  auto d_f = ad::Tensor<double>::from({2, 1}, {0.5, 3.0});
  auto batched = gan_losses(d_r, d_f, zero, 0.0);
  const double want_g = 0.5 * (softplus_ref(-0.5) + softplus_ref(-3.0));
  const double want_d = 0.5 * (softplus_ref(0.5) + softplus_ref(3.0)) +
                        0.5 * (softplus_ref(-1.0) + softplus_ref(2.0));
  CHECK(batched.loss_g.value_at(0) == doctest::Approx(want_g).epsilon(1e-12));
  CHECK(batched.loss_d.value_at(0) == doctest::Approx(want_d).epsilon(1e-12));

  // generator loss vanishes once the discriminator is fooled
  CHECK(gan_losses(zero, scalar(50.0), zero, 0.0).loss_g.value_at(0) < 1e-20);

  // lambda_r1 = 0 removes the penalty exactly; otherwise it adds lambda*gn2
  const double base = gan_losses(d_r, d_f, zero, 10.0).loss_d.value_at(0);
  CHECK(gan_losses(d_r, d_f, scalar(7.0), 0.0).loss_d.value_at(0) == base);
  CHECK(gan_losses(d_r, d_f, scalar(0.25), 10.0).loss_d.value_at(0) ==
        doctest::Approx(base + 2.5).epsilon(1e-12));

  const auto nan = scalar(std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(gan_losses(nan, zero, zero, 0.0), NumericError);
  CHECK_THROWS_AS(gan_losses(zero, nan, zero, 0.0), NumericError);
  CHECK_THROWS_AS(gan_losses(zero, zero, nan, 0.0), NumericError);
  CHECK_THROWS_AS(gan_losses(zero, zero, scalar(-1.0), 1.0), ContractViolation);
  CHECK_THROWS_AS(gan_losses(zero, zero, ad::Tensor<double>::zeros({2}), 1.0), ContractViolation);
  CHECK_THROWS_AS(gan_losses(zero, zero, zero, -1.0), ContractViolation);

  // differentiable everywhere the trainer needs it
  auto leaves_r = ad::Tensor<double>::param({2, 1}, {0.3, -1.2});
  auto leaves_f = ad::Tensor<double>::param({2, 1}, {-0.4, 0.9});
  auto leaf_gn = ad::Tensor<double>::param({1}, {0.6});
  testutil::check_gradients(
      [&] { return gan_losses(leaves_r, leaves_f, leaf_gn, 3.0).loss_d; },
      {leaves_r, leaves_f, leaf_gn});
  testutil::check_gradients([&] { return gan_losses(leaves_r, leaves_f, leaf_gn, 3.0).loss_g; },
                            {leaves_f});
}

TEST_CASE("exact r1 penalty on analytic discriminators") {
  Rng rng(5);
  auto x = random_tensor<double>({1, 5}, rng, -1.0, 1.0);
  auto w = ad::Tensor<double>::param({5, 1}, {0.5, -1.5, 2.0, 0.0, 0.25});
  double w2 = 0;
  for (double v : w.values()) w2 += v * v;

  auto linear = [&](const ad::Tensor<double>& in) { return ad::matmul(in, w); };
  CHECK(r1_penalty(linear, x) == doctest::Approx(w2).epsilon(1e-12));

  // bias shifts the output but not the input gradient
  auto affine = [&](const ad::Tensor<double>& in) {
    return ad::add(ad::matmul(in, w), ad::Tensor<double>::scalar(3.0));
  };
  CHECK(r1_penalty(affine, x) == doctest::Approx(w2).epsilon(1e-12));

  auto constant = [](const ad::Tensor<double>&) { return ad::Tensor<double>::scalar(4.0); };
  CHECK(r1_penalty(constant, x) == 0.0);

  auto wz = ad::Tensor<double>::param({5, 1}, std::vector<double>(5, 0.0));
  auto zero_linear = [&](const ad::Tensor<double>& in) { return ad::matmul(in, wz); };
  CHECK(r1_penalty(zero_linear, x) == 0.0);

  // runs on a private tape: the caller's recording is untouched
  ad::Tape<double> outer;
  auto a = ad::Tensor<double>::param({1}, {2.0});
  auto doubled = ad::add(a, a);
  CHECK(outer.size() == 1);
  (void)r1_penalty(linear, x);
  CHECK(outer.size() == 1);
  outer.backward(doubled);
  CHECK(a.grad()[0] == 2.0);
}

TEST_CASE("exact r1 penalty matches finite differences through the conv stack") {
  Rng rng(11);
  DiscriminatorConfig cfg;
  cfg.k_patch = 16;
  cfg.widths = {2, 3, 4, 5};
  auto d = PatchDiscriminatorT<double>::create(cfg, rng);
  auto patch = random_tensor<double>({1, 3, 16, 16}, rng);
  {
    ad::NoGradGuard<double> guard;
    for (int i = 0; i < 3; ++i) (void)d.forward(patch, true);
  }

  const double exact = r1_penalty(d, patch);
  CHECK(exact > 0);

  ad::NoGradGuard<double> guard;
  const double h = 1e-4;
  auto vals = patch.values_mut();
  double fd_norm2 = 0;
  for (size_t i = 0; i < vals.size(); ++i) {
    const double saved = vals[i];
    vals[i] = saved + h;
    const double fp = d.forward(patch, false).value_at(0);
    vals[i] = saved - h;
    const double fm = d.forward(patch, false).value_at(0);
    vals[i] = saved;
    const double g = (fp - fm) / (2.0 * h);
    fd_norm2 += g * g;
  }
  CHECK(exact == doctest::Approx(fd_norm2).epsilon(1e-3));
}

TEST_CASE("r1 surrogate estimates the penalty and carries parameter gradients") {
  Rng rng(21);
  const int dim = 8;
  auto x = random_tensor<double>({1, dim}, rng, -1.0, 1.0);
  std::vector<double> wv(dim);
  for (auto& v : wv) v = rng.uniform(-1.0, 1.0);
  auto w = ad::Tensor<double>::param({dim, 1}, wv);
  double w2 = 0;
  for (double v : wv) w2 += v * v;
  auto linear = [&](const ad::Tensor<double>& in) { return ad::matmul(in, w); };

  // estimator mean: many directions land near the exact value
  {
    ad::Tape<double> tape;
    auto base = ad::sum(linear(x));
    auto est = r1_surrogate(linear, x, base, 1e-4, 400, rng);
    CHECK(est.value_at(0) == doctest::Approx(w2).epsilon(0.25));
    CHECK(est.value_at(0) >= 0.0);
  }

  // with one direction u the value is dim*(u.w)^2 and the gradient
  // 2*dim*(u.w)*u, so |grad| must equal 2*sqrt(dim*value)
  {
    ad::Tape<double> tape;
    auto base = ad::sum(linear(x));
    auto est = r1_surrogate(linear, x, base, 1e-3, 1, rng);
    tape.backward(est);
    REQUIRE(w.has_grad());
    double gnorm = 0;
    for (double g : w.grad()) gnorm += g * g;
    gnorm = std::sqrt(gnorm);
    CHECK(gnorm == doctest::Approx(2.0 * std::sqrt(dim * est.value_at(0))).epsilon(1e-6));
  }

  CHECK_THROWS_AS(r1_surrogate(linear, x, ad::Tensor<double>::scalar(0.0), 0.0, 2, rng),
                  ContractViolation);
  CHECK_THROWS_AS(r1_surrogate(linear, x, ad::Tensor<double>::scalar(0.0), 1e-3, 0, rng),
                  ContractViolation);
  CHECK_THROWS_AS(r1_surrogate(linear, x, ad::Tensor<double>::zeros({2}), 1e-3, 2, rng),
                  ContractViolation);
}

TEST_CASE("a heavy penalty weight shrinks a linear discriminator's input gradient") {
  Rng rng(31);
  const int dim = 16;
  std::vector<float> wv(dim);
  for (auto& v : wv) v = static_cast<float>(rng.normal());
  auto w = ad::Tensor<float>::param({dim, 1}, wv);
  auto linear = [&](const ad::Tensor<float>& in) { return ad::matmul(in, w); };
  auto grad_norm = [&] {
    double acc = 0;
    for (float v : w.values()) acc += static_cast<double>(v) * v;
    return std::sqrt(acc);
  };

  const double init_norm = grad_norm();
  RmsProp<float> opt({w}, 1e-2f);
  for (int step = 0; step < 200; ++step) {
    ad::Tape<float> tape;
    auto x_r = random_tensor<float>({1, dim}, rng, -1.0, 1.0);
    auto x_f = random_tensor<float>({1, dim}, rng, -1.0, 1.0);
    auto d_r = linear(x_r);
    auto d_f = linear(x_f);
    auto gn2 = r1_surrogate(linear, x_r, ad::sum(d_r), 1e-3, 2, rng);
    auto losses = gan_losses(d_r, d_f, gn2, 100.0);
    tape.backward(losses.loss_d);
    opt.step();
  }
  CHECK(grad_norm() < init_norm);
}

TEST_CASE("discriminator-only training drives its loss down on a fixed pair") {
  Rng rng(41);
  DiscriminatorConfig cfg;
  cfg.k_patch = 16;
  cfg.widths = {4, 6, 8, 10};
  auto d = PatchDiscriminator::create(cfg, rng);
  auto real = random_tensor<float>({1, 3, 16, 16}, rng, 0.0, 0.4);
  auto fake = random_tensor<float>({1, 3, 16, 16}, rng, 0.6, 1.0);

  RmsProp<float> opt(d.parameters(), 1e-3f);
  std::vector<double> losses, adv_parts;
  for (int step = 0; step < 100; ++step) {
    ad::Tape<float> tape;
    auto d_r = d.forward(real, true);
    auto d_f = d.forward(fake, false);
    auto gn2 = r1_surrogate([&](const ad::Tensor<float>& x) { return d.forward(x, false); },
                            real, ad::sum(d_r), 1e-3, 2, rng);
    auto l = gan_losses(d_r, d_f, gn2, 10.0);
    losses.push_back(l.loss_d.value_at(0));
    adv_parts.push_back(l.loss_d.value_at(0) - 10.0 * gn2.value_at(0));
    tape.backward(l.loss_d);
    opt.step();
  }
  const double head = mean_over(losses, 0, 20);
  const double tail = mean_over(losses, 80, 100);
  CHECK(tail < head);
  // smoothed curve is monotone at a coarse grain
  CHECK(mean_over(losses, 40, 60) < head);
  CHECK(tail < mean_over(losses, 40, 60));
  // separating a fixed pair is easy: the softplus terms sink below the
  // chance-level 2 ln 2 even while the gradient penalty holds its floor
  CHECK(mean_over(adv_parts, 80, 100) < 1.0);
}

TEST_CASE("adversarial step bookkeeping, parameter hygiene, and reproducibility") {
  auto dir = temp_dir("adv");

  auto run_steps = [&](int steps) {
    auto rig = make_rig(dir);
    auto st = TrainState::create(rig.tcfg, rig.field, &rig.disc, &rig.clf, rig.intr);
    st.run_dir = dir / "run";
    Rng rng(9);
    std::vector<StepReport> reps;
    for (int s = 0; s < steps; ++s) {
      auto batch = sample_batch(rig.data, rig.tcfg.batch_size, rng);
      reps.push_back(train_step_adversarial(st, rig.data, batch, rng));
    }
    std::vector<float> params;
    for (const auto& t : rig.field.parameters())
      params.insert(params.end(), t.values().begin(), t.values().end());
    for (const auto& t : rig.disc.parameters())
      params.insert(params.end(), t.values().begin(), t.values().end());
    for (const auto& t : rig.field.parameters()) CHECK(!t.has_grad());
    for (const auto& t : rig.disc.parameters()) CHECK(!t.has_grad());
    for (const auto& t : rig.clf.parameters()) CHECK(!t.has_grad());
    return std::make_pair(reps, params);
  };

  auto [reps, params] = run_steps(3);
  REQUIRE(reps.size() == 3);
  for (int s = 0; s < 3; ++s) {
    const auto& r = reps[s];
    CHECK(r.iteration == s);
    for (double v : {r.l_adv, r.l_cls, r.l_sty, r.r1, r.total, r.loss_d, r.seconds})
      CHECK(std::isfinite(v));
    CHECK(r.l_cls > 0);
    CHECK(r.l_sty > 0);
    CHECK(r.r1 >= 0);
    CHECK(std::abs(r.total - (r.l_adv + 2.0 * r.l_cls + 3.0 * r.l_sty)) <= 1e-6);
    CHECK(r.seconds >= 0);
  }

  // bitwise reproducibility of reports and trained parameters
  auto [reps2, params2] = run_steps(3);
  for (int s = 0; s < 3; ++s) {
    CHECK(reps[s].l_adv == reps2[s].l_adv);
    CHECK(reps[s].l_cls == reps2[s].l_cls);
    CHECK(reps[s].l_sty == reps2[s].l_sty);
    CHECK(reps[s].r1 == reps2[s].r1);
    CHECK(reps[s].loss_d == reps2[s].loss_d);
  }
  REQUIRE(params.size() == params2.size());
  size_t diff = 0;
  for (size_t i = 0; i < params.size(); ++i) diff += params[i] != params2[i];
  CHECK(diff == 0);

  // lambda1 = lambda2 = 0 plays the plain GRAF-style game without a classifier
  TrainConfig graf;
  graf.lambda1 = 0;
  graf.lambda2 = 0;
  auto rig = make_rig(dir, graf, /*with_classifier=*/false);
  auto st = TrainState::create(rig.tcfg, rig.field, &rig.disc, nullptr, rig.intr);
  st.run_dir = dir / "run_graf";
  Rng rng(9);
  auto rep = train_step_adversarial(st, rig.data, sample_batch(rig.data, 2, rng), rng);
  CHECK(rep.l_cls == 0);
  CHECK(rep.l_sty == 0);
  CHECK(rep.total == rep.l_adv);
}

TEST_CASE("trainer wiring contracts") {
  auto dir = temp_dir("contracts");
  auto rig = make_rig(dir);

  CHECK_THROWS_AS(TrainState::create(rig.tcfg, rig.field, nullptr, &rig.clf, rig.intr),
                  ContractViolation);

  auto cold = rig.clf;
  cold.pretrained = false;
  CHECK_THROWS_AS(TrainState::create(rig.tcfg, rig.field, &rig.disc, &cold, rig.intr),
                  ContractViolation);

  auto wrong_counts = rig.tcfg;
  wrong_counts.m = 3;
  CHECK_THROWS_AS(TrainState::create(wrong_counts, rig.field, &rig.disc, &rig.clf, rig.intr),
                  ContractViolation);

  auto wrong_patch = rig.tcfg;
  wrong_patch.k_patch = 32;
  CHECK_THROWS_AS(TrainState::create(wrong_patch, rig.field, &rig.disc, &rig.clf, rig.intr),
                  ContractViolation);

  auto no_embed = rig.tcfg;
  no_embed.use_label_embedding = false;
  CHECK_THROWS_AS(TrainState::create(no_embed, rig.field, &rig.disc, &rig.clf, rig.intr),
                  ContractViolation);

  TrainConfig bad;
  bad.lambda1 = -1;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = {};
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = {};
  bad.patch_scale_min = 0;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = {};
  bad.patch_scale_max = 1.5;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = {};
  bad.k_patch = 0;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);

  auto st = TrainState::create(rig.tcfg, rig.field, &rig.disc, &rig.clf, rig.intr);
  Rng rng(1);
  CHECK_THROWS_AS(train_step_adversarial(st, rig.data, {}, rng), ContractViolation);
  CHECK_THROWS_AS(train_step_adversarial(st, rig.data, {999}, rng), ContractViolation);
  PosedImage pi{&rig.data.images[0], 0, 0, rig.data.items[0].pose};
  CHECK_THROWS_AS(train_step_reconstruction(st, pi, rng), ContractViolation);
}

TEST_CASE("a numeric abort serializes the rng state for replay") {
  auto dir = temp_dir("abort");
  auto rig = make_rig(dir);
  auto st = TrainState::create(rig.tcfg, rig.field, &rig.disc, &rig.clf, rig.intr);
  st.run_dir = dir / "run";

  rig.field.trunk.layers[0].w.values_mut()[0] = std::numeric_limits<float>::quiet_NaN();
  Rng rng(9);
  auto batch = sample_batch(rig.data, 2, rng);
  std::string message;
  try {
    (void)train_step_adversarial(st, rig.data, batch, rng);
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    message = e.what();
  }
  CHECK(message.find("replay_iter0") != std::string::npos);
  const fs::path replay = st.run_dir / "replay_iter0.txt";
  REQUIRE(fs::exists(replay));
  std::ifstream f(replay);
  std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CHECK(content.find("rng_state=") != std::string::npos);
  CHECK(content.find("iteration=0") != std::string::npos);
}

TEST_CASE("reconstruction step contracts and the exact-background case") {
  auto dir = temp_dir("recon");
  FieldConfig fcfg;
  fcfg.m = 1;
  fcfg.n = 1;
  fcfg.dim_s = 4;
  fcfg.dim_a = 4;
  fcfg.trunk_width = 8;
  fcfg.trunk_depth = 1;
  fcfg.enc.l_x = 2;
  fcfg.enc.l_d = 1;
  Rng frng(7);
  auto field = ConditionalField::create(fcfg, frng);
  // Push the density to ~0 everywhere: renders become pure white background.
  for (auto& v : field.density_head.b.values_mut()) v = -100.0f;

  TrainConfig tcfg;
  tcfg.mode = TrainMode::reconstruction;
  tcfg.m = 1;
  tcfg.n = 1;
  tcfg.lambda1 = 0;
  tcfg.lambda2 = 0;
  tcfg.render.n_coarse = 4;
  tcfg.render.n_fine = 2;
  auto intr = Intrinsics::from_fov(8, 8, 40.0);
  auto st = TrainState::create(tcfg, field, nullptr, nullptr, intr);
  st.run_dir = dir;

  Image white(8, 8, 1.0f);
  Pose pose{4.0, 25.0, 30.0, 0.0};
  PosedImage item{&white, 0, 0, pose};
  Rng rng(3);
  auto rep = train_step_reconstruction(st, item, rng);
  CHECK(rep.l_adv == 0.0);
  CHECK(rep.total == 0.0);
  CHECK(rep.iteration == 0);

  PosedImage no_pose{&white, 0, 0, std::nullopt};
  CHECK_THROWS_AS(train_step_reconstruction(st, no_pose, rng), ContractViolation);
  PosedImage no_image{nullptr, 0, 0, pose};
  CHECK_THROWS_AS(train_step_reconstruction(st, no_image, rng), ContractViolation);
  Image wrong(12, 12, 1.0f);
  PosedImage bad_size{&wrong, 0, 0, pose};
  CHECK_THROWS_AS(train_step_reconstruction(st, bad_size, rng), ContractViolation);
  PosedImage bad_label{&white, 5, 0, pose};
  CHECK_THROWS_AS(train_step_reconstruction(st, bad_label, rng), ContractViolation);
}

TEST_CASE("reconstruction training reduces the loss across seeds") {
  auto dir = temp_dir("recon_trend");
  DatasetConfig dc;
  dc.m = 1;
  dc.n = 1;
  dc.poses_per_cell = 6;
  dc.image_size = 12;
  dc.seed = 80;
  auto data = generate_dataset(dc, dir / "data");
  const auto intr = Intrinsics::from_fov(12, 12, dc.fov_deg);

  int improved = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    FieldConfig fcfg;
    fcfg.m = 1;
    fcfg.n = 1;
    fcfg.dim_s = 4;
    fcfg.dim_a = 4;
    fcfg.trunk_width = 16;
    fcfg.trunk_depth = 2;
    fcfg.enc.l_x = 4;
    fcfg.enc.l_d = 1;
    Rng frng(seed + 10);
    auto field = ConditionalField::create(fcfg, frng);

    TrainConfig tcfg;
    tcfg.mode = TrainMode::reconstruction;
    tcfg.m = 1;
    tcfg.n = 1;
    tcfg.lambda1 = 0;
    tcfg.lambda2 = 0;
    tcfg.lr_g = 2e-3f;
    tcfg.iterations = 200;
    tcfg.seed = seed;
    tcfg.render.n_coarse = 8;
    tcfg.render.hierarchical = false;

    auto st = TrainState::create(tcfg, field, nullptr, nullptr, intr);
    st.run_dir = dir / ("run" + std::to_string(seed));
    auto reports = run_training(st, data, nullptr);
    REQUIRE(reports.size() == 200);
    std::vector<double> losses;
    for (const auto& r : reports) losses.push_back(r.total);
    if (mean_over(losses, 160, 200) < mean_over(losses, 0, 40)) ++improved;
  }
  CHECK(improved >= 4);
}

TEST_CASE("run_training emits metrics lines and honors the run lock") {
  auto dir = temp_dir("driver");
  DatasetConfig dc;
  dc.m = 1;
  dc.n = 1;
  dc.poses_per_cell = 2;
  dc.image_size = 8;
  dc.seed = 81;
  auto data = generate_dataset(dc, dir / "data");

  FieldConfig fcfg;
  fcfg.m = 1;
  fcfg.n = 1;
  fcfg.dim_s = 4;
  fcfg.dim_a = 4;
  fcfg.trunk_width = 8;
  fcfg.trunk_depth = 1;
  fcfg.enc.l_x = 2;
  fcfg.enc.l_d = 1;
  Rng frng(7);
  auto field = ConditionalField::create(fcfg, frng);

  TrainConfig tcfg;
  tcfg.mode = TrainMode::reconstruction;
  tcfg.m = 1;
  tcfg.n = 1;
  tcfg.lambda1 = 0;
  tcfg.lambda2 = 0;
  tcfg.iterations = 3;
  tcfg.render.n_coarse = 4;
  tcfg.render.hierarchical = false;

  auto st = TrainState::create(tcfg, field, nullptr, nullptr, Intrinsics::from_fov(8, 8, dc.fov_deg));
  st.run_dir = dir / "run";

  {
    TrainLock held(st.run_dir);
    CHECK_THROWS_AS(run_training(st, data, nullptr), IoError);
  }

  std::ostringstream log;
  auto reports = run_training(st, data, &log);
  REQUIRE(reports.size() == 3);
  CHECK(!fs::exists(st.run_dir / ".train.lock"));

  std::istringstream lines(log.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    CHECK(std::count(line.begin(), line.end(), '\t') == 6);
    CHECK(line.substr(0, line.find('\t')) == std::to_string(count));
    ++count;
  }
  CHECK(count == 3);

  LabeledImageSet empty;
  CHECK_THROWS_AS(run_training(st, empty, nullptr), ContractViolation);
}

TEST_CASE("ablation variants disable one mechanism each") {
  CHECK(ablation_config("no_label_input").use_label_embedding == false);
  CHECK(ablation_config("no_label_input").array_outputs == true);
  CHECK(ablation_config("no_array_output").array_outputs == false);
  CHECK(ablation_config("no_classifier").lambda1 == 0);
  CHECK(ablation_config("no_classifier").lambda2 == 0);
  CHECK_THROWS_AS(ablation_config("no_such_thing"), ContractViolation);

  FieldConfig base;
  base.m = 4;
  base.n = 4;
  auto scalar_heads = make_field_config(ablation_config("no_array_output"), base);
  CHECK(scalar_heads.m == 1);
  CHECK(scalar_heads.n == 1);
  auto identity = make_field_config(ablation_config("no_label_input"), base);
  CHECK(identity.use_label_embedding == false);
  CHECK(identity.m == 4);

  // each variant can run a real adversarial step
  auto dir = temp_dir("ablation");
  for (const char* variant : {"no_label_input", "no_array_output", "no_classifier"}) {
    auto rig = make_rig(dir, ablation_config(variant, TrainConfig{}),
                        std::string(variant) != "no_classifier");
    const AuxClassifier* clf = std::string(variant) == "no_classifier" ? nullptr : &rig.clf;
    auto st = TrainState::create(rig.tcfg, rig.field, &rig.disc, clf, rig.intr);
    st.run_dir = dir / variant;
    Rng rng(5);
    auto rep = train_step_adversarial(st, rig.data, sample_batch(rig.data, 2, rng), rng);
    CHECK(std::isfinite(rep.total));
    if (std::string(variant) == "no_classifier") CHECK(rep.total == rep.l_adv);
  }
}

TEST_CASE("report formatting is the tab-separated log schema") {
  StepReport r;
  r.iteration = 12;
  r.l_adv = 0.5;
  r.l_cls = 1.25;
  r.l_sty = 0.75;
  r.r1 = 0.03125;
  r.total = 0.5 + 2.0 * 1.25 + 3.0 * 0.75;
  r.seconds = 0.125;
  CHECK(format_report(r) == "12\t0.5\t1.25\t0.75\t0.03125\t5.25\t0.125");
}

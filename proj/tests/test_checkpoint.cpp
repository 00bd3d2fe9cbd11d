#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ctrlnerf/checkpoint.hpp"
#include "ctrlnerf/errors.hpp"
#include "doctest.h"

using namespace ctrlnerf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  auto p = fs::temp_directory_path() / (std::string("ctrlnerf_ckpt_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.meta.emplace_back("schema", "1");
  c.meta.emplace_back("kind", "test");
  c.meta.emplace_back("note", "value with spaces and = signs");
  c.tensors.push_back({"alpha", {2, 3}, {1.0f, -2.5f, 0.0f, 3.25f, 1e-7f, -0.0f}});
  c.tensors.push_back({"beta", {4}, {9.0f, 8.0f, 7.0f, 6.0f}});
  return c;
}

}  // namespace

TEST_CASE("checkpoint container round-trips byte-identically") {
  auto dir = temp_dir("generic");
  auto c = sample_checkpoint();
  const auto p1 = dir / "a.ckpt";
  const auto p2 = dir / "b.ckpt";
  save_checkpoint(c, p1);

  auto loaded = load_checkpoint(p1);
  REQUIRE(loaded.meta.size() == 3);
  CHECK(loaded.meta_str("kind") == "test");
  CHECK(loaded.meta_str("note") == "value with spaces and = signs");
  REQUIRE(loaded.tensors.size() == 2);
  CHECK(loaded.tensors[0].name == "alpha");
  CHECK(loaded.tensors[0].shape == std::vector<int>{2, 3});
  CHECK(loaded.tensors[0].data == c.tensors[0].data);
  CHECK(loaded.tensors[1].data == c.tensors[1].data);

  save_checkpoint(loaded, p2);
  CHECK(slurp(p1) == slurp(p2));

  // fixed little-endian layout: first payload float 1.0f -> 00 00 80 3f
  auto bytes = slurp(p1);
  const std::string header(bytes.begin(), bytes.end());
  const size_t blank = header.find("\n\n");
  REQUIRE(blank != std::string::npos);
  const size_t payload = blank + 2;
  CHECK(static_cast<unsigned char>(bytes[payload + 0]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[payload + 1]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[payload + 2]) == 0x80);
  CHECK(static_cast<unsigned char>(bytes[payload + 3]) == 0x3f);
  CHECK(bytes.size() == payload + 4 * (6 + 4));
}

TEST_CASE("checkpoint loader rejects malformed files") {
  auto dir = temp_dir("bad");
  auto c = sample_checkpoint();
  const auto good = dir / "good.ckpt";
  save_checkpoint(c, good);
  auto bytes = slurp(good);

  // wrong magic
  auto wrong = bytes;
  wrong[0] = 'X';
  spit(dir / "magic.ckpt", wrong);
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), IoError);

  // truncated payload
  auto trunc = bytes;
  trunc.resize(bytes.size() - 5);
  spit(dir / "trunc.ckpt", trunc);
  CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), IoError);

  // trailing bytes beyond the declared payload
  auto extra = bytes;
  extra.push_back('\0');
  spit(dir / "extra.ckpt", extra);
  CHECK_THROWS_AS(load_checkpoint(dir / "extra.ckpt"), IoError);

  // header never terminated
  const std::string h(bytes.begin(), bytes.end());
  auto cut = std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(h.find("\n\n") + 1));
  spit(dir / "noblank.ckpt", cut);
  CHECK_THROWS_AS(load_checkpoint(dir / "noblank.ckpt"), IoError);

  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);

  // malformed tensor declarations
  for (const char* decl : {"tensor=alpha", "tensor=alpha:2xx3", "tensor=alpha:0x3", "tensor=:4"}) {
    std::ofstream f(dir / "decl.ckpt", std::ios::binary | std::ios::trunc);
    f << kCheckpointMagic << '\n' << decl << '\n' << '\n';
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir / "decl.ckpt"), IoError);
  }

  // duplicate tensor names
  {
    std::ofstream f(dir / "dup.ckpt", std::ios::binary | std::ios::trunc);
    f << kCheckpointMagic << '\n' << "tensor=a:1\ntensor=a:1\n\n";
    f.write("\0\0\0\0\0\0\0\0", 8);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir / "dup.ckpt"), IoError);
  }

  // header line without '='
  {
    std::ofstream f(dir / "line.ckpt", std::ios::binary | std::ios::trunc);
    f << kCheckpointMagic << '\n' << "not a key value line\n\n";
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir / "line.ckpt"), IoError);
  }
}

TEST_CASE("field checkpoints restore configuration and forward pass bitwise") {
  auto dir = temp_dir("field");
  FieldConfig cfg;
  cfg.m = 2;
  cfg.n = 3;
  cfg.dim_s = 8;
  cfg.dim_a = 6;
  cfg.trunk_width = 16;
  cfg.trunk_depth = 2;
  cfg.enc.l_x = 4;
  cfg.enc.l_d = 2;
  cfg.bound = 1.5;
  Rng rng(17);
  auto field = ConditionalField::create(cfg, rng);

  auto ckpt = checkpoint_from_field(field, cfg, 99, 1234);
  CHECK(ckpt.meta_int("seed") == 99);
  CHECK(ckpt.meta_int("iteration") == 1234);
  save_checkpoint(ckpt, dir / "field.ckpt");
  auto [cfg2, field2] = field_from_checkpoint(load_checkpoint(dir / "field.ckpt"));

  CHECK(cfg2.m == cfg.m);
  CHECK(cfg2.n == cfg.n);
  CHECK(cfg2.dim_a == cfg.dim_a);
  CHECK(cfg2.bound == cfg.bound);
  CHECK(cfg2.enc.l_x == cfg.enc.l_x);

  auto p1 = field.parameters();
  auto p2 = field2.parameters();
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    auto a = p1[i].values();
    auto b = p2[i].values();
    REQUIRE(a.size() == b.size());
    for (size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }

  // identical forward on identical inputs
  std::vector<float> pos(9), dc(6), zs(8, 0.3f), za(6, -0.2f);
  Rng in(5);
  for (auto& v : pos) v = static_cast<float>(in.uniform(-1.0, 1.0));
  for (auto& v : dc) v = static_cast<float>(in.uniform(-1.0, 1.0));
  auto positions = ad::Tensor<float>::from({3, 3}, std::move(pos));
  auto dirs = ad::Tensor<float>::from({3, 2}, std::move(dc));
  auto [zse, zae] = field.embed_labels(ad::Tensor<float>::from({1, 8}, std::move(zs)),
                                       ad::Tensor<float>::from({1, 6}, std::move(za)), 1, 2);
  std::vector<float> zs2(8, 0.3f), za2(6, -0.2f);
  auto [zse2, zae2] = field2.embed_labels(ad::Tensor<float>::from({1, 8}, std::move(zs2)),
                                          ad::Tensor<float>::from({1, 6}, std::move(za2)), 1, 2);
  auto o1 = field.forward(positions, dirs, zse, zae);
  auto o2 = field2.forward(positions, dirs, zse2, zae2);
  auto s1 = o1.sigma_all.values(), s2 = o2.sigma_all.values();
  for (size_t i = 0; i < s1.size(); ++i) CHECK(s1[i] == s2[i]);
  auto c1 = o1.color_all.values(), c2 = o2.color_all.values();
  for (size_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == c2[i]);

  // a classifier checkpoint is not a field checkpoint
  ClassifierConfig ccfg;
  ccfg.resolution = 16;
  ccfg.widths = {2, 3, 4, 5};
  auto clf = AuxClassifier::create(ccfg, rng);
  save_checkpoint(checkpoint_from_classifier(clf, 0, 0), dir / "clf.ckpt");
  CHECK_THROWS_AS(field_from_checkpoint(load_checkpoint(dir / "clf.ckpt")), IoError);
}

TEST_CASE("classifier checkpoints keep the pretrained flag and predictions") {
  auto dir = temp_dir("clf");
  Rng rng(31);
  ClassifierConfig cfg;
  cfg.resolution = 16;
  cfg.widths = {3, 4, 5, 6};
  cfg.m = 2;
  cfg.n = 2;
  auto clf = AuxClassifier::create(cfg, rng);
  {
    auto wv = clf.class_head.w.values_mut();
    for (auto& v : wv) v = static_cast<float>(rng.normal());
  }
  clf.pretrained = true;

  save_checkpoint(checkpoint_from_classifier(clf, 7, 2000), dir / "clf.ckpt");
  auto clf2 = classifier_from_checkpoint(load_checkpoint(dir / "clf.ckpt"));
  CHECK(clf2.pretrained);
  CHECK(clf2.cfg.resolution == 16);
  CHECK(clf2.cfg.widths[3] == 6);

  std::vector<float> xv(1 * 3 * 16 * 16);
  for (auto& v : xv) v = static_cast<float>(rng.uniform());
  auto x = ad::Tensor<float>::from({1, 3, 16, 16}, xv);
  auto y1 = clf.forward(x).first.values();
  auto y2 = clf2.forward(x).first.values();
  for (size_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == y2[i]);
}

TEST_CASE("discriminator checkpoints restore spectral norm state bitwise") {
  auto dir = temp_dir("disc");
  Rng rng(41);
  DiscriminatorConfig cfg;
  cfg.k_patch = 16;
  cfg.widths = {4, 6, 8, 10};
  auto d = PatchDiscriminator::create(cfg, rng);

  std::vector<float> pv(1 * 3 * 16 * 16);
  for (auto& v : pv) v = static_cast<float>(rng.uniform());
  auto patch = ad::Tensor<float>::from({1, 3, 16, 16}, pv);
  {
    ad::NoGradGuard<float> guard;
    for (int i = 0; i < 3; ++i) (void)d.forward(patch, true);  // advance power iteration
  }

  save_checkpoint(checkpoint_from_discriminator(d, 3, 500), dir / "d.ckpt");
  auto d2 = discriminator_from_checkpoint(load_checkpoint(dir / "d.ckpt"));
  CHECK(d2.cfg.k_patch == 16);
  CHECK(d2.convs[0].sn.u == d.convs[0].sn.u);
  CHECK(d2.convs[2].sn.v == d.convs[2].sn.v);

  ad::NoGradGuard<float> guard;
  CHECK(d.forward(patch, false).value_at(0) == d2.forward(patch, false).value_at(0));
}

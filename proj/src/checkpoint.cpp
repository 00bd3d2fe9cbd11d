#include "ctrlnerf/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "ctrlnerf/errors.hpp"

namespace ctrlnerf {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string shape_token(const std::vector<int>& shape) {
  std::string s;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

size_t shape_count(const std::vector<int>& shape, const std::string& name) {
  if (shape.empty()) throw IoError("checkpoint: tensor " + name + " has empty shape");
  size_t n = 1;
  for (int d : shape) {
    if (d < 1) throw IoError("checkpoint: tensor " + name + " has nonpositive dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

Checkpoint::TensorEntry entry_from(const std::string& name, const ad::Tensor<float>& t) {
  Checkpoint::TensorEntry e;
  e.name = name;
  e.shape = t.shape();
  auto v = t.values();
  e.data.assign(v.begin(), v.end());
  return e;
}

Checkpoint::TensorEntry entry_from_raw(const std::string& name, const std::vector<float>& v) {
  Checkpoint::TensorEntry e;
  e.name = name;
  e.shape = {static_cast<int>(v.size())};
  e.data = v;
  return e;
}

// Copies checkpoint data into an existing parameter tensor, shape-checked.
void load_into(const Checkpoint& ckpt, const std::string& name, ad::Tensor<float>& t) {
  const auto* e = ckpt.find_tensor(name);
  if (e == nullptr) throw IoError("checkpoint: missing tensor " + name);
  if (e->shape != t.shape())
    throw IoError("checkpoint: tensor " + name + " has shape " + shape_token(e->shape) +
                  ", expected " + shape_token(t.shape()));
  auto dst = t.values_mut();
  std::copy(e->data.begin(), e->data.end(), dst.begin());
}

std::vector<float> load_raw(const Checkpoint& ckpt, const std::string& name, size_t count) {
  const auto* e = ckpt.find_tensor(name);
  if (e == nullptr) throw IoError("checkpoint: missing tensor " + name);
  if (e->data.size() != count)
    throw IoError("checkpoint: tensor " + name + " has " + std::to_string(e->data.size()) +
                  " values, expected " + std::to_string(count));
  return e->data;
}

// Stable (name, tensor) listing shared by save and load for each model kind.

template <typename Fn>
void for_each_field_param(ConditionalField& f, Fn&& fn) {
  fn("class_table", f.class_table);
  fn("style_table", f.style_table);
  for (size_t i = 0; i < f.trunk.layers.size(); ++i) {
    fn("trunk." + std::to_string(i) + ".w", f.trunk.layers[i].w);
    fn("trunk." + std::to_string(i) + ".b", f.trunk.layers[i].b);
  }
  fn("density_head.w", f.density_head.w);
  fn("density_head.b", f.density_head.b);
  fn("color_hidden.w", f.color_hidden.w);
  fn("color_hidden.b", f.color_hidden.b);
  fn("color_head.w", f.color_head.w);
  fn("color_head.b", f.color_head.b);
}

template <typename Fn>
void for_each_classifier_param(AuxClassifier& c, Fn&& fn) {
  for (size_t i = 0; i < c.convs.size(); ++i) {
    fn("conv." + std::to_string(i) + ".w", c.convs[i].w);
    fn("conv." + std::to_string(i) + ".b", c.convs[i].b);
  }
  fn("class_head.w", c.class_head.w);
  fn("class_head.b", c.class_head.b);
  fn("style_head.w", c.style_head.w);
  fn("style_head.b", c.style_head.b);
}

template <typename Fn>
void for_each_discriminator_param(PatchDiscriminator& d, Fn&& fn) {
  for (size_t i = 0; i < d.convs.size(); ++i) {
    const std::string base = "conv." + std::to_string(i);
    fn(base + ".w", d.convs[i].w);
    fn(base + ".b", d.convs[i].b);
    if (d.convs[i].normalized) {
      fn(base + ".gamma", d.convs[i].gamma);
      fn(base + ".beta", d.convs[i].beta);
    }
  }
  fn("head.w", d.head.w);
  fn("head.b", d.head.b);
}

void append_common_meta(Checkpoint& ckpt, const char* kind, std::uint64_t seed, long iteration) {
  ckpt.meta.emplace_back("schema", "1");
  ckpt.meta.emplace_back("kind", kind);
  ckpt.meta.emplace_back("seed", std::to_string(seed));
  ckpt.meta.emplace_back("iteration", std::to_string(iteration));
}

void require_kind(const Checkpoint& ckpt, const char* kind) {
  if (ckpt.meta_str("kind") != kind)
    throw IoError("checkpoint: kind is '" + ckpt.meta_str("kind") + "', expected '" + kind + "'");
}

}  // namespace

const std::string* Checkpoint::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

const Checkpoint::TensorEntry* Checkpoint::find_tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string Checkpoint::meta_str(const std::string& key) const {
  const auto* v = find_meta(key);
  if (v == nullptr) throw IoError("checkpoint: missing header key " + key);
  return *v;
}

long Checkpoint::meta_int(const std::string& key) const {
  const std::string v = meta_str(key);
  long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw IoError("checkpoint: header key " + key + " is not an integer: " + v);
  return out;
}

double Checkpoint::meta_double(const std::string& key) const {
  const std::string v = meta_str(key);
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty())
    throw IoError("checkpoint: header key " + key + " is not a number: " + v);
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f.good()) throw IoError("checkpoint: cannot open for writing: " + path.string());
  f << kCheckpointMagic << '\n';
  for (const auto& [k, v] : ckpt.meta) {
    if (k.empty() || k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
        v.find('\n') != std::string::npos)
      throw ContractViolation("checkpoint: malformed header entry '" + k + "'");
    if (k == "tensor") throw ContractViolation("checkpoint: reserved header key 'tensor'");
    f << k << '=' << v << '\n';
  }
  for (const auto& t : ckpt.tensors) {
    if (t.data.size() != shape_count(t.shape, t.name))
      throw ContractViolation("checkpoint: tensor " + t.name + " data/shape mismatch");
    f << "tensor=" << t.name << ':' << shape_token(t.shape) << '\n';
  }
  f << '\n';
  // payload: fixed little-endian byte order regardless of host
  std::vector<unsigned char> buf;
  for (const auto& t : ckpt.tensors) {
    buf.resize(t.data.size() * 4);
    for (size_t i = 0; i < t.data.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(t.data[i]);
      buf[i * 4 + 0] = static_cast<unsigned char>(bits & 0xff);
      buf[i * 4 + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
      buf[i * 4 + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
      buf[i * 4 + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  f.flush();
  if (!f.good()) throw IoError("checkpoint: write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw IoError("checkpoint: cannot open: " + path.string());

  std::string line;
  if (!std::getline(f, line) || line != kCheckpointMagic)
    throw IoError("checkpoint: bad magic in " + path.string());

  Checkpoint ckpt;
  bool saw_blank = false;
  while (std::getline(f, line)) {
    if (line.empty()) {
      saw_blank = true;
      break;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw IoError("checkpoint: malformed header line '" + line + "'");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    if (key == "tensor") {
      const size_t colon = value.rfind(':');
      if (colon == std::string::npos || colon == 0 || colon + 1 >= value.size())
        throw IoError("checkpoint: malformed tensor declaration '" + value + "'");
      Checkpoint::TensorEntry e;
      e.name = value.substr(0, colon);
      if (ckpt.find_tensor(e.name) != nullptr)
        throw IoError("checkpoint: duplicate tensor " + e.name);
      const std::string dims = value.substr(colon + 1);
      size_t pos = 0;
      while (pos < dims.size()) {
        size_t next = dims.find('x', pos);
        if (next == std::string::npos) next = dims.size();
        int d = 0;
        auto [ptr, ec] = std::from_chars(dims.data() + pos, dims.data() + next, d);
        if (ec != std::errc() || ptr != dims.data() + next || d < 1)
          throw IoError("checkpoint: bad dimension in tensor " + e.name);
        e.shape.push_back(d);
        pos = next + 1;
      }
      ckpt.tensors.push_back(std::move(e));
    } else {
      ckpt.meta.emplace_back(std::move(key), std::move(value));
    }
  }
  if (!saw_blank) throw IoError("checkpoint: missing header terminator in " + path.string());

  size_t total = 0;
  for (const auto& t : ckpt.tensors) total += shape_count(t.shape, t.name);

  std::vector<unsigned char> payload(total * 4);
  f.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (static_cast<size_t>(f.gcount()) != payload.size())
    throw IoError("checkpoint: truncated payload in " + path.string());
  f.peek();
  if (!f.eof()) throw IoError("checkpoint: trailing bytes after payload in " + path.string());

  size_t off = 0;
  for (auto& t : ckpt.tensors) {
    const size_t n = shape_count(t.shape, t.name);
    t.data.resize(n);
    for (size_t i = 0; i < n; ++i) {
      const std::uint32_t bits = static_cast<std::uint32_t>(payload[off]) |
                                 (static_cast<std::uint32_t>(payload[off + 1]) << 8) |
                                 (static_cast<std::uint32_t>(payload[off + 2]) << 16) |
                                 (static_cast<std::uint32_t>(payload[off + 3]) << 24);
      t.data[i] = std::bit_cast<float>(bits);
      off += 4;
    }
  }
  return ckpt;
}

// --- field adapter -------------------------------------------------------

Checkpoint checkpoint_from_field(const ConditionalField& field, const FieldConfig& cfg,
                                 std::uint64_t seed, long iteration) {
  Checkpoint ckpt;
  append_common_meta(ckpt, "field", seed, iteration);
  ckpt.meta.emplace_back("m", std::to_string(cfg.m));
  ckpt.meta.emplace_back("n", std::to_string(cfg.n));
  ckpt.meta.emplace_back("dim_s", std::to_string(cfg.dim_s));
  ckpt.meta.emplace_back("dim_a", std::to_string(cfg.dim_a));
  ckpt.meta.emplace_back("trunk_width", std::to_string(cfg.trunk_width));
  ckpt.meta.emplace_back("trunk_depth", std::to_string(cfg.trunk_depth));
  ckpt.meta.emplace_back("l_x", std::to_string(cfg.enc.l_x));
  ckpt.meta.emplace_back("l_d", std::to_string(cfg.enc.l_d));
  ckpt.meta.emplace_back("bound", format_double(cfg.bound));
  ckpt.meta.emplace_back("use_label_embedding", cfg.use_label_embedding ? "1" : "0");
  auto& f = const_cast<ConditionalField&>(field);
  for_each_field_param(f, [&](const std::string& name, ad::Tensor<float>& t) {
    ckpt.tensors.push_back(entry_from(name, t));
  });
  return ckpt;
}

std::pair<FieldConfig, ConditionalField> field_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "field");
  FieldConfig cfg;
  cfg.m = static_cast<int>(ckpt.meta_int("m"));
  cfg.n = static_cast<int>(ckpt.meta_int("n"));
  cfg.dim_s = static_cast<int>(ckpt.meta_int("dim_s"));
  cfg.dim_a = static_cast<int>(ckpt.meta_int("dim_a"));
  cfg.trunk_width = static_cast<int>(ckpt.meta_int("trunk_width"));
  cfg.trunk_depth = static_cast<int>(ckpt.meta_int("trunk_depth"));
  cfg.enc.l_x = static_cast<int>(ckpt.meta_int("l_x"));
  cfg.enc.l_d = static_cast<int>(ckpt.meta_int("l_d"));
  cfg.bound = ckpt.meta_double("bound");
  cfg.use_label_embedding = ckpt.meta_int("use_label_embedding") != 0;
  cfg.validate();
  Rng rng(0);
  auto field = ConditionalField::create(cfg, rng);
  for_each_field_param(field, [&](const std::string& name, ad::Tensor<float>& t) {
    load_into(ckpt, name, t);
  });
  return {cfg, std::move(field)};
}

// --- classifier adapter --------------------------------------------------

Checkpoint checkpoint_from_classifier(const AuxClassifier& clf, std::uint64_t seed,
                                      long iteration) {
  Checkpoint ckpt;
  append_common_meta(ckpt, "classifier", seed, iteration);
  ckpt.meta.emplace_back("resolution", std::to_string(clf.cfg.resolution));
  ckpt.meta.emplace_back("in_channels", std::to_string(clf.cfg.in_channels));
  ckpt.meta.emplace_back("m", std::to_string(clf.cfg.m));
  ckpt.meta.emplace_back("n", std::to_string(clf.cfg.n));
  for (int i = 0; i < 4; ++i)
    ckpt.meta.emplace_back("width" + std::to_string(i), std::to_string(clf.cfg.widths[static_cast<size_t>(i)]));
  ckpt.meta.emplace_back("pretrained", clf.pretrained ? "1" : "0");
  auto& c = const_cast<AuxClassifier&>(clf);
  for_each_classifier_param(c, [&](const std::string& name, ad::Tensor<float>& t) {
    ckpt.tensors.push_back(entry_from(name, t));
  });
  return ckpt;
}

AuxClassifier classifier_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "classifier");
  ClassifierConfig cfg;
  cfg.resolution = static_cast<int>(ckpt.meta_int("resolution"));
  cfg.in_channels = static_cast<int>(ckpt.meta_int("in_channels"));
  cfg.m = static_cast<int>(ckpt.meta_int("m"));
  cfg.n = static_cast<int>(ckpt.meta_int("n"));
  for (int i = 0; i < 4; ++i)
    cfg.widths[static_cast<size_t>(i)] =
        static_cast<int>(ckpt.meta_int("width" + std::to_string(i)));
  cfg.validate();
  Rng rng(0);
  auto clf = AuxClassifier::create(cfg, rng);
  for_each_classifier_param(clf, [&](const std::string& name, ad::Tensor<float>& t) {
    load_into(ckpt, name, t);
  });
  clf.pretrained = ckpt.meta_int("pretrained") != 0;
  return clf;
}

// --- discriminator adapter -------------------------------------------------

Checkpoint checkpoint_from_discriminator(const PatchDiscriminator& d, std::uint64_t seed,
                                         long iteration) {
  Checkpoint ckpt;
  append_common_meta(ckpt, "discriminator", seed, iteration);
  ckpt.meta.emplace_back("k_patch", std::to_string(d.cfg.k_patch));
  ckpt.meta.emplace_back("in_channels", std::to_string(d.cfg.in_channels));
  for (int i = 0; i < 4; ++i)
    ckpt.meta.emplace_back("width" + std::to_string(i), std::to_string(d.cfg.widths[static_cast<size_t>(i)]));
  auto& dm = const_cast<PatchDiscriminator&>(d);
  for_each_discriminator_param(dm, [&](const std::string& name, ad::Tensor<float>& t) {
    ckpt.tensors.push_back(entry_from(name, t));
  });
  // persistent power-iteration vectors keep the normalization deterministic
  for (size_t i = 0; i < d.convs.size(); ++i) {
    ckpt.tensors.push_back(entry_from_raw("conv." + std::to_string(i) + ".sn.u", d.convs[i].sn.u));
    ckpt.tensors.push_back(entry_from_raw("conv." + std::to_string(i) + ".sn.v", d.convs[i].sn.v));
  }
  return ckpt;
}

PatchDiscriminator discriminator_from_checkpoint(const Checkpoint& ckpt) {
  require_kind(ckpt, "discriminator");
  DiscriminatorConfig cfg;
  cfg.k_patch = static_cast<int>(ckpt.meta_int("k_patch"));
  cfg.in_channels = static_cast<int>(ckpt.meta_int("in_channels"));
  for (int i = 0; i < 4; ++i)
    cfg.widths[static_cast<size_t>(i)] =
        static_cast<int>(ckpt.meta_int("width" + std::to_string(i)));
  cfg.validate();
  Rng rng(0);
  auto d = PatchDiscriminator::create(cfg, rng);
  for_each_discriminator_param(d, [&](const std::string& name, ad::Tensor<float>& t) {
    load_into(ckpt, name, t);
  });
  for (size_t i = 0; i < d.convs.size(); ++i) {
    d.convs[i].sn.u = load_raw(ckpt, "conv." + std::to_string(i) + ".sn.u", d.convs[i].sn.u.size());
    d.convs[i].sn.v = load_raw(ckpt, "conv." + std::to_string(i) + ".sn.v", d.convs[i].sn.v.size());
  }
  return d;
}

}  // namespace ctrlnerf

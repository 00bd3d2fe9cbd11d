#include "ctrlnerf/discriminator.hpp"

#include <algorithm>
#include <cmath>

#include "ctrlnerf/errors.hpp"
#include "ctrlnerf/optimizer.hpp"

namespace ctrlnerf {

namespace {

template <typename S>
ad::Tensor<S> he_conv_weight(int oc, int c, int k, Rng& rng) {
  std::vector<S> w(static_cast<size_t>(oc) * c * k * k);
  const double std = std::sqrt(2.0 / (static_cast<double>(c) * k * k));
  for (auto& v : w) v = static_cast<S>(rng.normal() * std);
  return ad::Tensor<S>::param({oc, c, k, k}, std::move(w));
}

}  // namespace

// --- patch discriminator -----------------------------------------------------

void DiscriminatorConfig::validate() const {
  if (in_channels < 1) throw ContractViolation("DiscriminatorConfig: in_channels < 1");
  if (k_patch < 16 || k_patch % 16 != 0)
    throw ContractViolation("DiscriminatorConfig: k_patch must be a positive multiple of 16");
  for (int w : widths)
    if (w < 1) throw ContractViolation("DiscriminatorConfig: width < 1");
}

template <typename S>
PatchDiscriminatorT<S> PatchDiscriminatorT<S>::create(const DiscriminatorConfig& cfg, Rng& rng) {
  cfg.validate();
  PatchDiscriminatorT d;
  d.cfg = cfg;
  int prev = cfg.in_channels;
  for (int i = 0; i < 4; ++i) {
    const int oc = cfg.widths[static_cast<size_t>(i)];
    ConvLayer layer;
    layer.w = he_conv_weight<S>(oc, prev, 3, rng);
    layer.b = ad::Tensor<S>::param({oc}, std::vector<S>(oc, S(0)));
    layer.sn.init(oc, prev * 9, rng);
    layer.normalized = i < 3;
    if (layer.normalized) {
      layer.gamma = ad::Tensor<S>::param({oc}, std::vector<S>(oc, S(1)));
      layer.beta = ad::Tensor<S>::param({oc}, std::vector<S>(oc, S(0)));
    }
    d.convs.push_back(std::move(layer));
    prev = oc;
  }
  const int feat = cfg.widths[3] * cfg.feature_side() * cfg.feature_side();
  d.head = Linear<S>::create(feat, 1, rng);
  return d;
}

template <typename S>
ad::Tensor<S> PatchDiscriminatorT<S>::forward(const ad::Tensor<S>& x, bool update_sn) {
  const auto& sh = x.shape();
  if (sh.size() != 4 || sh[1] != cfg.in_channels || sh[2] != cfg.k_patch || sh[3] != cfg.k_patch)
    throw ContractViolation("PatchDiscriminator: expected [B, " +
                            std::to_string(cfg.in_channels) + ", " + std::to_string(cfg.k_patch) +
                            ", " + std::to_string(cfg.k_patch) + "], got " +
                            ad::shape_str(sh));
  ad::Tensor<S> h = x;
  for (auto& layer : convs) {
    const auto& wsh = layer.w.shape();
    auto w2d = ad::reshape(layer.w, {wsh[0], wsh[1] * wsh[2] * wsh[3]});
    auto wbar = ad::reshape(layer.sn.apply(w2d, update_sn), wsh);
    h = ad::conv2d(h, wbar, layer.b, 2, 1);
    if (layer.normalized) h = ad::instance_norm(h, layer.gamma, layer.beta);
    h = ad::relu(h);
  }
  const int feat = cfg.widths[3] * cfg.feature_side() * cfg.feature_side();
  h = ad::reshape(h, {sh[0], feat});
  return head.forward(h);
}

template <typename S>
std::vector<ad::Tensor<S>> PatchDiscriminatorT<S>::parameters() const {
  std::vector<ad::Tensor<S>> out;
  for (const auto& layer : convs) {
    out.push_back(layer.w);
    out.push_back(layer.b);
    if (layer.normalized) {
      out.push_back(layer.gamma);
      out.push_back(layer.beta);
    }
  }
  head.collect(out);
  return out;
}

template struct PatchDiscriminatorT<float>;
template struct PatchDiscriminatorT<double>;

// --- auxiliary classifier ----------------------------------------------------

void ClassifierConfig::validate() const {
  if (in_channels < 1) throw ContractViolation("ClassifierConfig: in_channels < 1");
  if (resolution < 16 || resolution % 16 != 0)
    throw ContractViolation("ClassifierConfig: resolution must be a positive multiple of 16");
  if (m < 1 || n < 1) throw ContractViolation("ClassifierConfig: m and n must be >= 1");
  for (int w : widths)
    if (w < 1) throw ContractViolation("ClassifierConfig: width < 1");
}

template <typename S>
AuxClassifierT<S> AuxClassifierT<S>::create(const ClassifierConfig& cfg, Rng& rng) {
  cfg.validate();
  AuxClassifierT c;
  c.cfg = cfg;
  int prev = cfg.in_channels;
  for (int b = 0; b < 4; ++b) {
    const int oc = cfg.widths[static_cast<size_t>(b)];
    c.convs.push_back({he_conv_weight<S>(oc, prev, 3, rng),
                       ad::Tensor<S>::param({oc}, std::vector<S>(oc, S(0)))});
    c.convs.push_back({he_conv_weight<S>(oc, oc, 3, rng),
                       ad::Tensor<S>::param({oc}, std::vector<S>(oc, S(0)))});
    prev = oc;
  }
  // Heads read the pooled penultimate feature. Zero initialization makes the
  // initial prediction exactly uniform, so the starting cross-entropy is
  // ln M + ln N regardless of the input.
  auto zero_linear = [&](int out) {
    Linear<S> l;
    l.w = ad::Tensor<S>::param({cfg.widths[3], out},
                               std::vector<S>(static_cast<size_t>(cfg.widths[3]) * out, S(0)));
    l.b = ad::Tensor<S>::param({out}, std::vector<S>(out, S(0)));
    return l;
  };
  c.class_head = zero_linear(cfg.m);
  c.style_head = zero_linear(cfg.n);
  return c;
}

template <typename S>
ad::Tensor<S> AuxClassifierT<S>::features(const ad::Tensor<S>& x) const {
  const auto& sh = x.shape();
  if (sh.size() != 4 || sh[1] != cfg.in_channels || sh[2] != cfg.resolution ||
      sh[3] != cfg.resolution)
    throw ContractViolation("AuxClassifier: expected [B, " + std::to_string(cfg.in_channels) +
                            ", " + std::to_string(cfg.resolution) + ", " +
                            std::to_string(cfg.resolution) + "], got " + ad::shape_str(sh));
  ad::Tensor<S> h = x;
  for (int b = 0; b < 4; ++b) {
    h = ad::relu(ad::conv2d(h, convs[static_cast<size_t>(2 * b)].w,
                            convs[static_cast<size_t>(2 * b)].b, 1, 1));
    h = ad::relu(ad::conv2d(h, convs[static_cast<size_t>(2 * b + 1)].w,
                            convs[static_cast<size_t>(2 * b + 1)].b, 1, 1));
    h = ad::maxpool2d(h, 2);
  }
  const int side = cfg.feature_side();
  const int hw = side * side;
  // global average pool as a matmul so the pass stays on the tape
  auto pool = ad::Tensor<S>::from({hw, 1}, std::vector<S>(hw, S(1) / static_cast<S>(hw)));
  h = ad::reshape(h, {sh[0] * cfg.widths[3], hw});
  return ad::reshape(ad::matmul(h, pool), {sh[0], cfg.widths[3]});
}

template <typename S>
std::pair<ad::Tensor<S>, ad::Tensor<S>> AuxClassifierT<S>::forward(const ad::Tensor<S>& x) const {
  auto h = features(x);
  return {class_head.forward(h), style_head.forward(h)};
}

template <typename S>
std::vector<ad::Tensor<S>> AuxClassifierT<S>::parameters() const {
  std::vector<ad::Tensor<S>> out;
  for (const auto& cp : convs) {
    out.push_back(cp.w);
    out.push_back(cp.b);
  }
  class_head.collect(out);
  style_head.collect(out);
  return out;
}

template struct AuxClassifierT<float>;
template struct AuxClassifierT<double>;

// --- packing -----------------------------------------------------------------

ad::Tensor<float> pack_images(const std::vector<const Image*>& images, int resolution) {
  if (images.empty()) throw ContractViolation("pack_images: empty batch");
  const int b = static_cast<int>(images.size());
  std::vector<float> data(static_cast<size_t>(b) * 3 * resolution * resolution);
  for (int i = 0; i < b; ++i) {
    const Image* src = images[static_cast<size_t>(i)];
    if (src == nullptr || src->empty()) throw ContractViolation("pack_images: empty image");
    Image resized;
    if (src->width != resolution || src->height != resolution) {
      resized = resize_bilinear(*src, resolution, resolution);
      src = &resized;
    }
    float* base = data.data() + static_cast<size_t>(i) * 3 * resolution * resolution;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x)
          base[(static_cast<size_t>(c) * resolution + y) * resolution + x] =
              src->pixel(x, y)[c];
  }
  return ad::Tensor<float>::from({b, 3, resolution, resolution}, std::move(data));
}

// --- pretraining ---------------------------------------------------------

namespace {

std::pair<double, double> accuracy_over(const AuxClassifier& clf,
                                        const std::vector<const Image*>& imgs,
                                        const std::vector<int>& class_ids,
                                        const std::vector<int>& style_ids) {
  ad::NoGradGuard<float> guard;
  const int total = static_cast<int>(imgs.size());
  int class_hits = 0, style_hits = 0;
  constexpr int kChunk = 16;
  for (int start = 0; start < total; start += kChunk) {
    const int stop = std::min(total, start + kChunk);
    std::vector<const Image*> chunk(imgs.begin() + start, imgs.begin() + stop);
    auto [cl, sl] = clf.forward(pack_images(chunk, clf.cfg.resolution));
    const auto cv = cl.values();
    const auto sv = sl.values();
    for (int i = 0; i < stop - start; ++i) {
      const auto cb = cv.begin() + static_cast<size_t>(i) * clf.cfg.m;
      const auto sb = sv.begin() + static_cast<size_t>(i) * clf.cfg.n;
      const int cpred = static_cast<int>(std::max_element(cb, cb + clf.cfg.m) - cb);
      const int spred = static_cast<int>(std::max_element(sb, sb + clf.cfg.n) - sb);
      class_hits += cpred == class_ids[static_cast<size_t>(start + i)];
      style_hits += spred == style_ids[static_cast<size_t>(start + i)];
    }
  }
  return {static_cast<double>(class_hits) / total, static_cast<double>(style_hits) / total};
}

}  // namespace

std::pair<double, double> classifier_accuracy(AuxClassifier& clf, const LabeledImageSet& data,
                                              const std::vector<int>& indices) {
  if (indices.empty()) throw ContractViolation("classifier_accuracy: no indices");
  std::vector<const Image*> imgs;
  std::vector<int> cls, sty;
  for (int i : indices) {
    if (i < 0 || static_cast<size_t>(i) >= data.items.size())
      throw ContractViolation("classifier_accuracy: index out of range");
    imgs.push_back(&data.images[static_cast<size_t>(i)]);
    cls.push_back(data.items[static_cast<size_t>(i)].class_id);
    sty.push_back(data.items[static_cast<size_t>(i)].style_id);
  }
  return accuracy_over(clf, imgs, cls, sty);
}

AuxClassifier pretrain_classifier(const LabeledImageSet& data, const ClassifierConfig& ccfg,
                                  const PretrainConfig& pcfg, Rng& rng,
                                  std::vector<PretrainLogEntry>* log) {
  ccfg.validate();
  if (pcfg.steps < 1 || pcfg.batch < 1 || pcfg.lr <= 0 || pcfg.eval_every < 1)
    throw ContractViolation("pretrain_classifier: bad schedule");
  if (data.m != ccfg.m || data.n != ccfg.n)
    throw ContractViolation("pretrain_classifier: dataset labels do not match classifier config");

  // Cell census; one held-out example per cell that can spare one.
  std::vector<std::vector<int>> cells(static_cast<size_t>(ccfg.m) * ccfg.n);
  for (size_t i = 0; i < data.items.size(); ++i)
    cells[static_cast<size_t>(data.items[i].class_id) * ccfg.n + data.items[i].style_id]
        .push_back(static_cast<int>(i));
  std::vector<int> train, heldout;
  for (int ci = 0; ci < ccfg.m; ++ci)
    for (int si = 0; si < ccfg.n; ++si) {
      auto& cell = cells[static_cast<size_t>(ci) * ccfg.n + si];
      if (cell.empty())
        throw ContractViolation("pretrain_classifier: empty cell class " + std::to_string(ci) +
                                " style " + std::to_string(si));
      if (cell.size() >= 2) {
        heldout.push_back(cell.back());
        cell.pop_back();
      }
      train.insert(train.end(), cell.begin(), cell.end());
    }
  const std::vector<int>& eval_set = heldout.empty() ? train : heldout;

  // Resize once up front; training batches reuse the cached copies.
  std::vector<Image> resized(data.images.size());
  for (size_t i = 0; i < data.images.size(); ++i)
    resized[i] = (data.images[i].width == ccfg.resolution &&
                  data.images[i].height == ccfg.resolution)
                     ? data.images[i]
                     : resize_bilinear(data.images[i], ccfg.resolution, ccfg.resolution);

  auto clf = AuxClassifier::create(ccfg, rng);
  auto params = clf.parameters();
  RmsProp<float> opt(params, static_cast<float>(pcfg.lr));

  for (int step = 0; step < pcfg.steps; ++step) {
    std::vector<const Image*> batch_imgs;
    std::vector<int> batch_class, batch_style;
    for (int b = 0; b < pcfg.batch; ++b) {
      const int idx = train[rng.uniform_index(train.size())];
      batch_imgs.push_back(&resized[static_cast<size_t>(idx)]);
      batch_class.push_back(data.items[static_cast<size_t>(idx)].class_id);
      batch_style.push_back(data.items[static_cast<size_t>(idx)].style_id);
    }

    ad::Tape<float> tape;
    auto [class_logits, style_logits] = clf.forward(pack_images(batch_imgs, ccfg.resolution));
    auto loss = ad::add(ad::softmax_cross_entropy(class_logits, batch_class),
                        ad::softmax_cross_entropy(style_logits, batch_style));
    const double loss_value = loss.scalar_value();
    tape.backward(loss);
    opt.step();

    if (log != nullptr) {
      PretrainLogEntry entry;
      entry.step = step;
      entry.loss = loss_value;
      if (step % pcfg.eval_every == 0 || step == pcfg.steps - 1) {
        auto [ca, sa] = classifier_accuracy(clf, data, eval_set);
        entry.class_acc = ca;
        entry.style_acc = sa;
      }
      log->push_back(entry);
    }
  }
  clf.pretrained = true;
  return clf;
}

}  // namespace ctrlnerf

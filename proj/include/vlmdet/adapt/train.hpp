#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <vector>

#include "vlmdet/adapt/adapted_model.hpp"
#include "vlmdet/data/perturb.hpp"
#include "vlmdet/data/splits.hpp"

namespace vlmdet {

// Backbone encodings of a key list, row-aligned with the keys.
template <class T>
struct FeatureBank {
  Tensor<T> penultimate;  // [N x d_model]
  Tensor<T> embedding;    // [N x d_embed]

  std::size_t size() const { return penultimate.numel() == 0 ? 0 : penultimate.rows(); }

  ImageEncoding<T> rows(std::span<const std::size_t> idx) const {
    return {ops::gather_rows(penultimate, idx), ops::gather_rows(embedding, idx)};
  }

  FeatureBank prefix(std::size_t n) const {
    if (n > size()) throw PreconditionError("feature bank prefix " + std::to_string(n) + " exceeds " + std::to_string(size()));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    auto e = rows(idx);
    return {e.penultimate, e.embedding};
  }

  ImageEncoding<T> all() const { return {penultimate, embedding}; }
};

inline constexpr std::size_t kEncodeChunk = 64;

// Encodes materialized keys in chunks, optionally after a perturbation.
// `perturb_for(i)` picks the perturbation of the i-th key.
template <class T>
FeatureBank<T> compute_features(const DualEncoder<T>& model, std::span<const SampleKey> keys,
                                const synth::SynthConfig& cfg,
                                const std::function<Perturbation(std::size_t)>& perturb_for = {}) {
  if (keys.empty()) throw PreconditionError("compute_features on an empty key list");
  std::vector<T> pen, emb;
  pen.reserve(keys.size() * model.config().d_model);
  emb.reserve(keys.size() * model.config().d_embed);
  for (std::size_t start = 0; start < keys.size(); start += kEncodeChunk) {
    const std::size_t end = std::min(keys.size(), start + kEncodeChunk);
    std::vector<Image> imgs;
    imgs.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) {
      Image img = materialize(keys[i], cfg).image;
      if (perturb_for) img = perturb_for(i).apply(img);
      imgs.push_back(std::move(img));
    }
    std::vector<const Image*> ptrs;
    for (const auto& im : imgs) ptrs.push_back(&im);
    const auto enc = model.encode_images(ptrs);
    pen.insert(pen.end(), enc.penultimate.data().begin(), enc.penultimate.data().end());
    emb.insert(emb.end(), enc.embedding.data().begin(), enc.embedding.data().end());
  }
  return {Tensor<T>::from({keys.size(), model.config().d_model}, std::move(pen)),
          Tensor<T>::from({keys.size(), model.config().d_embed}, std::move(emb))};
}

template <class T>
FeatureBank<T> compute_features(const DualEncoder<T>& model, std::span<const SampleKey> keys,
                                const synth::SynthConfig& cfg, const Perturbation& p) {
  return compute_features(model, keys, cfg, [p](std::size_t) { return p; });
}

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
  std::optional<double> lr;  // overrides StrategySpec::learning_rate()
  bool augment = false;      // train-time JPEG/blur augmentation
};

template <class T>
struct TrainResult {
  AdaptedModel<T> model;
  std::vector<double> loss_curve;  // mean batch loss per epoch
};

namespace detail {

// Random train-time perturbation: identity half the time, otherwise a
// random JPEG quality in [50, 95] or blur sigma in [0.5, 2].
inline Perturbation augmentation(std::uint64_t seed, std::size_t epoch, std::size_t i) {
  SeededRng r = SeededRng(seed).split(0xA06).split(epoch).split(i);
  const double u = r.uniform();
  if (u < 0.5) return Perturbation::identity();
  if (u < 0.75) return Perturbation::jpeg(50 + static_cast<int>(r.below(46)));
  return Perturbation::blur(r.uniform(0.5, 2.0));
}

// Fine-tuning loss over the two class texts: image->text CE with the label
// as target plus text->image CE whose positives are all same-class images.
template <class T>
Tensor<T> finetune_loss(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  const std::size_t b = logits.rows();
  const Tensor<T> i2t = ops::cross_entropy_with_logits(logits, labels);
  std::vector<T> target(2 * b, T(0));
  std::size_t count[2] = {0, 0};
  for (std::size_t lab : labels) ++count[lab];
  for (std::size_t i = 0; i < b; ++i) target[labels[i] * b + i] = T(1) / static_cast<T>(count[labels[i]]);
  const Tensor<T> t2i = ops::soft_cross_entropy(ops::transpose(logits), std::span<const T>(target));
  return ops::scale(ops::add(i2t, t2i), T(0.5));
}

}  // namespace detail

// Trains the strategy's partition on `keys`. Frozen strategies encode the
// training images once (or reuse `bank`, which must be row-aligned with
// `keys` and produced by `backbone`); FineTune re-encodes every batch.
template <class T>
TrainResult<T> train_adaptation(const DualEncoder<T>& backbone, const StrategySpec& spec,
                                std::span<const SampleKey> keys, const synth::SynthConfig& cfg,
                                const TrainOptions& opt, const FeatureBank<T>* bank = nullptr) {
  if (keys.empty()) throw PreconditionError("adaptation train set is empty");
  bool seen[2] = {false, false};
  for (const auto& k : keys) seen[k.label == 1] = true;
  if (!seen[0] || !seen[1]) throw PreconditionError("adaptation train set must contain both real and fake samples");
  if (opt.batch == 0) throw PreconditionError("batch size must be positive");

  TrainResult<T> result{AdaptedModel<T>(backbone, spec, opt.seed), {}};
  AdaptedModel<T>& model = result.model;
  if (opt.epochs == 0) return result;

  const double lr = opt.lr ? *opt.lr : spec.learning_rate();
  if (!(lr > 0.0)) throw PreconditionError("learning rate must be positive");
  const bool finetune = spec.kind == StrategyKind::FineTune;

  std::optional<FeatureBank<T>> own_bank;
  const FeatureBank<T>* features = nullptr;
  if (!finetune && !opt.augment) {
    if (bank) {
      if (bank->size() != keys.size()) throw PreconditionError("feature bank is not aligned with the train set");
      features = bank;
    } else {
      own_bank = compute_features(model.backbone(), keys, cfg);
      features = &*own_bank;
    }
  }

  std::vector<std::size_t> labels_all(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) labels_all[i] = static_cast<std::size_t>(keys[i].label);

  Adam<T> adam(AdamHyper{lr});
  SeededRng order_rng = SeededRng(opt.seed).split(0x7A1);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto order = order_rng.split(epoch).permutation(keys.size());
    std::optional<FeatureBank<T>> epoch_bank;
    if (!finetune && opt.augment) {
      epoch_bank =
          compute_features(model.backbone(), keys, cfg, [&](std::size_t i) { return detail::augmentation(opt.seed, epoch, i); });
    }
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch) {
      const std::size_t end = std::min(order.size(), start + opt.batch);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(labels_all[i]);

      auto diagnose = [&](const std::string& what) {
        std::ostringstream os;
        os << "adaptation loss is not finite at step " << step << " (epoch " << epoch << ", lr " << lr << ")";
        if (!what.empty()) os << ": " << what;
        return NumericError(os.str());
      };
      Tape<T> tape;
      Tensor<T> loss;
      try {
      if (finetune) {
        std::vector<Image> imgs;
        for (std::size_t i : idx) {
          Image img = materialize(keys[i], cfg).image;
          if (opt.augment) img = detail::augmentation(opt.seed, epoch, i).apply(img);
          imgs.push_back(std::move(img));
        }
        std::vector<const Image*> ptrs;
        for (const auto& im : imgs) ptrs.push_back(&im);
        loss = detail::finetune_loss(model.class_logits(model.backbone().encode_images(ptrs)), labels);
      } else {
        const FeatureBank<T>& fb = epoch_bank ? *epoch_bank : *features;
        const ImageEncoding<T> enc = fb.rows(idx);
        if (spec.kind == StrategyKind::LinearProbe) {
          std::vector<T> y(labels.begin(), labels.end());
          loss = ops::binary_cross_entropy_with_logit(model.probe_logits(enc.penultimate), std::span<const T>(y));
        } else {
          loss = ops::cross_entropy_with_logits(model.class_logits(enc), labels);
        }
      }
      } catch (const NumericError& e) {
        throw diagnose(e.what());
      }
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) throw diagnose("");
      backward(loss);
      adam.step(model.trainable_params());
      if (finetune) model.backbone().clamp_logit_scale();
      model.trainable_params().zero_grad();
      total += lv;
      ++batches;
      ++step;
    }
    result.loss_curve.push_back(total / double(batches));
  }
  return result;
}

}  // namespace vlmdet

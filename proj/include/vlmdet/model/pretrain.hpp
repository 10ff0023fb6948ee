#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "vlmdet/core/optim.hpp"
#include "vlmdet/model/dual_encoder.hpp"

namespace vlmdet {

struct PretrainOptions {
  std::size_t epochs = 10;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t group = 1;  // consecutive samples shuffled as one unit
};

// Contrastive image/caption training of every backbone parameter. Returns
// the mean batch loss of each epoch. Batches are a seeded permutation of the
// dataset (of `group`-sized blocks); a trailing batch smaller than 2 is dropped.
template <class T>
std::vector<double> pretrain_toy(DualEncoder<T>& model, std::span<const SampleRecord> dataset,
                                 const PretrainOptions& opt) {
  if (dataset.empty()) throw PreconditionError("pre-training dataset is empty");
  if (opt.batch < 2) throw PreconditionError("pre-training batch must hold at least 2 pairs");
  if (opt.group == 0) throw PreconditionError("pre-training group size must be positive");
  for (const auto& s : dataset) (void)model.vocab().tokenize(s.caption, model.config().context_len);

  std::vector<double> curve;
  if (opt.epochs == 0) return curve;
  model.params().set_trainable(true);
  Adam<T> adam(AdamHyper{opt.lr});
  SeededRng rng = SeededRng(opt.seed).split(0x9E7);
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const std::size_t groups = (dataset.size() + opt.group - 1) / opt.group;
    std::vector<std::size_t> order;
    order.reserve(dataset.size());
    for (std::size_t g : rng.split(epoch).permutation(groups))
      for (std::size_t i = g * opt.group; i < std::min(dataset.size(), (g + 1) * opt.group); ++i) order.push_back(i);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += opt.batch) {
      const std::size_t end = std::min(order.size(), start + opt.batch);
      std::vector<const Image*> imgs;
      std::vector<std::string> caps;
      for (std::size_t i = start; i < end; ++i) {
        imgs.push_back(&dataset[order[i]].image);
        caps.push_back(dataset[order[i]].caption);
      }
      Tape<T> tape;
      const auto enc = model.encode_images(imgs);
      const auto txt = model.encode_captions(caps);
      Tensor<T> loss = clip_contrastive_loss(enc.embedding, txt, model.scale());
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericError("pre-training loss is not finite at epoch " + std::to_string(epoch));
      backward(loss);
      adam.step(model.params());
      model.clamp_logit_scale();
      model.params().zero_grad();
      total += lv;
      ++batches;
    }
    curve.push_back(batches ? total / double(batches) : 0.0);
  }
  return curve;
}

}  // namespace vlmdet

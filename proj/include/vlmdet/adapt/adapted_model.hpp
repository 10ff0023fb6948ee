#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "vlmdet/adapt/strategy.hpp"
#include "vlmdet/core/digest.hpp"
#include "vlmdet/model/dual_encoder.hpp"

namespace vlmdet {

struct FrozenCheck {
  enum class Status { Intact, Modified, NotApplicable };
  Status status = Status::Intact;
  std::string first_diff;  // name of the first differing parameter

  bool intact() const { return status == Status::Intact; }
};

// Content hash of a parameter: name, shape, raw value bytes.
template <class T>
std::string parameter_digest(const Parameter<T>& p) {
  Sha256 h;
  h.update(p.name);
  for (std::size_t d : p.tensor.shape()) h.update(std::to_string(d) + ",");
  h.update_values(p.tensor.data());
  return h.finish();
}

// Embedded prompt [SOS] V_1..V_M [CLASS] [EOS] [PAD]... of context length,
// with the class word looked up in the (frozen) token table.
template <class T>
struct AssembledPrompt {
  Tensor<T> sequence;  // [L x d_model]
  std::size_t eos_pos = 0;
};

template <class T>
AssembledPrompt<T> assemble_prompt(const Tensor<T>& ctx, const std::string& class_word, const DualEncoder<T>& model) {
  const std::size_t m = ctx.rows(), L = model.config().context_len;
  if (ctx.ndim() != 2 || m < 1) throw PreconditionError("prompt context needs at least one vector (M >= 1)");
  if (ctx.cols() != model.config().d_model)
    throw ShapeError("prompt context width " + std::to_string(ctx.cols()) + " != d_model");
  if (m + 3 > L)
    throw PreconditionError("prompt capacity: " + std::to_string(m) + " context tokens do not fit context length " +
                            std::to_string(L));
  const auto& vocab = model.vocab();
  const std::size_t sos = Vocabulary::kSos;
  std::vector<std::size_t> tail{vocab.id(class_word), Vocabulary::kEos};
  tail.resize(L - m - 1, Vocabulary::kPad);
  const Tensor<T> parts[3] = {model.embed_tokens(std::span<const std::size_t>(&sos, 1)), ctx,
                              model.embed_tokens(tail)};
  return {ops::concat_rows(std::span<const Tensor<T>>(parts)), m + 2};
}

// A backbone plus the trainable pieces of one adaptation strategy.
template <class T>
class AdaptedModel {
 public:
  static constexpr const char* kClassWords[2] = {"real", "fake"};

  AdaptedModel() = default;

  AdaptedModel(DualEncoder<T> backbone, StrategySpec spec, std::uint64_t seed)
      : backbone_(std::move(backbone)), spec_(spec) {
    spec_.validate(backbone_.config());
    init_strategy(seed);
    apply_partition();
    record_frozen_digest();
  }

  // Deep copy: strategy tensors are cloned like the backbone's.
  AdaptedModel(const AdaptedModel& o)
      : backbone_(o.backbone_), spec_(o.spec_), frozen_digests_(o.frozen_digests_) {
    for (const auto& p : o.strategy_) strategy_.add(p.name, p.tensor.clone(), p.trainable);
  }
  AdaptedModel& operator=(const AdaptedModel& o) {
    if (this != &o) {
      AdaptedModel tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  AdaptedModel(AdaptedModel&&) noexcept = default;
  AdaptedModel& operator=(AdaptedModel&&) noexcept = default;

  // Rebuilds a model from stored parameters (checkpoint loading).
  static AdaptedModel restore(DualEncoder<T> backbone, StrategySpec spec, ParameterSet<T> strategy) {
    AdaptedModel m;
    m.backbone_ = std::move(backbone);
    m.spec_ = spec;
    m.spec_.validate(m.backbone_.config());
    AdaptedModel shape_ref(m.backbone_, spec, 0);
    for (const auto& p : shape_ref.strategy_) {
      if (!strategy.contains(p.name)) throw ContractError("missing strategy parameter " + p.name);
      const auto& got = strategy.at(p.name).tensor;
      if (got.shape() != p.tensor.shape())
        throw ShapeError("strategy parameter " + p.name + " has shape " + shape_str(got.shape()) + ", expected " +
                         shape_str(p.tensor.shape()));
      m.strategy_.add(p.name, got.clone(), true);
    }
    if (strategy.size() != shape_ref.strategy_.size()) throw ContractError("unexpected strategy parameters in checkpoint");
    m.apply_partition();
    m.record_frozen_digest();
    return m;
  }

  const DualEncoder<T>& backbone() const { return backbone_; }
  DualEncoder<T>& backbone() { return backbone_; }
  const StrategySpec& spec() const { return spec_; }
  ParameterSet<T>& strategy_params() { return strategy_; }
  const ParameterSet<T>& strategy_params() const { return strategy_; }

  // Parameters the optimizer updates for this strategy.
  ParameterSet<T>& trainable_params() {
    return spec_.kind == StrategyKind::FineTune ? backbone_.params() : strategy_;
  }
  const ParameterSet<T>& trainable_params() const {
    return spec_.kind == StrategyKind::FineTune ? backbone_.params() : strategy_;
  }

  std::size_t trainable_count() const {
    return backbone_.params().numel(true) + strategy_.numel(true);
  }

  // Re-applies the freeze partition: backbone frozen except under FineTune.
  void apply_partition() {
    backbone_.params().set_trainable(spec_.kind == StrategyKind::FineTune);
    strategy_.set_trainable(true);
  }

  void record_frozen_digest() {
    frozen_digests_.clear();
    if (spec_.kind == StrategyKind::FineTune) return;
    for (const auto& p : backbone_.params()) frozen_digests_.emplace_back(p.name, parameter_digest(p));
  }

  const std::vector<std::pair<std::string, std::string>>& frozen_digests() const { return frozen_digests_; }

  std::string frozen_digest() const {
    Sha256 h;
    for (const auto& [name, d] : frozen_digests_) h.update(name).update(d);
    return h.finish();
  }

  FrozenCheck verify_frozen() const {
    FrozenCheck r;
    if (spec_.kind == StrategyKind::FineTune) {
      r.status = FrozenCheck::Status::NotApplicable;
      return r;
    }
    const auto& params = backbone_.params();
    for (const auto& [name, digest] : frozen_digests_) {
      if (!params.contains(name) || parameter_digest(params.at(name)) != digest) {
        r.status = FrozenCheck::Status::Modified;
        r.first_diff = name;
        return r;
      }
    }
    if (params.size() != frozen_digests_.size()) {
      r.status = FrozenCheck::Status::Modified;
      r.first_diff = "(parameter set changed)";
    }
    return r;
  }

  // ---- differentiable pieces ---------------------------------------------

  // [2 x d_embed] text embeddings for ("real", "fake").
  Tensor<T> class_text_embeddings() const {
    if (spec_.kind == StrategyKind::PromptTune) {
      const Tensor<T>& ctx = strategy_.at("prompt.ctx").tensor;
      const auto real = assemble_prompt(ctx, kClassWords[0], backbone_);
      const auto fake = assemble_prompt(ctx, kClassWords[1], backbone_);
      const Tensor<T> both[2] = {real.sequence, fake.sequence};
      const std::size_t eos[2] = {real.eos_pos, fake.eos_pos};
      return backbone_.encode_embedded(ops::concat_rows(std::span<const Tensor<T>>(both)),
                                       std::span<const std::size_t>(eos));
    }
    const std::size_t L = backbone_.config().context_len;
    const TokenSeq seqs[2] = {backbone_.vocab().tokenize(kClassWords[0], L),
                              backbone_.vocab().tokenize(kClassWords[1], L)};
    return backbone_.encode_texts(std::span<const TokenSeq>(seqs));
  }

  // LinearProbe: [B x 1] logits from penultimate features.
  Tensor<T> probe_logits(const Tensor<T>& penultimate) const {
    return ops::linear(penultimate, strategy_.at("probe.w").tensor, strategy_.at("probe.b").tensor);
  }

  // Adapter: normalize(alpha * A(f) + (1 - alpha) * f) on unit image embeddings.
  Tensor<T> adapt_embedding(const Tensor<T>& emb) const {
    const T a = static_cast<T>(spec_.alpha);
    Tensor<T> h = ops::relu(ops::linear(emb, strategy_.at("adapter.w1").tensor, strategy_.at("adapter.b1").tensor));
    Tensor<T> up = ops::linear(h, strategy_.at("adapter.w2").tensor, strategy_.at("adapter.b2").tensor);
    return ops::l2_normalize(ops::add(ops::scale(up, a), ops::scale(emb, T(1) - a)));
  }

  // [B x 2] (real, fake) logits for the softmax-based strategies.
  Tensor<T> class_logits(const ImageEncoding<T>& enc) const {
    const Tensor<T> img = spec_.kind == StrategyKind::Adapter ? adapt_embedding(enc.embedding) : enc.embedding;
    return cosine_logits(img, class_text_embeddings(), backbone_.scale());
  }

  // ---- inference ------------------------------------------------------------

  // Fake probability for each encoded image.
  std::vector<double> fake_probabilities(const ImageEncoding<T>& enc) const {
    std::vector<double> out;
    if (spec_.kind == StrategyKind::LinearProbe) {
      const Tensor<T> z = probe_logits(enc.penultimate);
      for (std::size_t i = 0; i < z.numel(); ++i) out.push_back(double(ops::sigmoid(z[i])));
      return out;
    }
    const Tensor<T> p = ops::softmax(class_logits(enc));
    for (std::size_t i = 0; i < p.rows(); ++i) out.push_back(double(p[i * 2 + 1]));
    return out;
  }

  std::vector<double> classify(std::span<const Image* const> images) const {
    return fake_probabilities(backbone_.encode_images(images));
  }

  double classify(const Image& img) const {
    const Image* p = &img;
    return classify(std::span<const Image* const>(&p, 1))[0];
  }

 private:
  void init_strategy(std::uint64_t seed) {
    const auto& cfg = backbone_.config();
    SeededRng rng = SeededRng(seed).split(0xADA9);
    auto normal = [&rng](Shape s, double sd) {
      std::vector<T> v(shape_numel(s));
      for (auto& x : v) x = static_cast<T>(rng.normal(0.0, sd));
      return Tensor<T>::from(std::move(s), std::move(v), true);
    };
    switch (spec_.kind) {
      case StrategyKind::LinearProbe:
        strategy_.add("probe.w", Tensor<T>::zeros({cfg.d_model, 1}, true));
        strategy_.add("probe.b", Tensor<T>::zeros({1}, true));
        break;
      case StrategyKind::PromptTune:
        strategy_.add("prompt.ctx", normal({spec_.m, cfg.d_model}, 0.02));
        break;
      case StrategyKind::Adapter: {
        const std::size_t d = cfg.d_embed, hid = d / spec_.reduction;
        strategy_.add("adapter.w1", normal({d, hid}, 1.0 / std::sqrt(double(d))));
        strategy_.add("adapter.b1", Tensor<T>::zeros({hid}, true));
        strategy_.add("adapter.w2", normal({hid, d}, 1.0 / std::sqrt(double(hid))));
        strategy_.add("adapter.b2", Tensor<T>::zeros({d}, true));
        break;
      }
      case StrategyKind::FineTune:
        break;
    }
  }

  DualEncoder<T> backbone_;
  StrategySpec spec_;
  ParameterSet<T> strategy_;
  std::vector<std::pair<std::string, std::string>> frozen_digests_;
};

}  // namespace vlmdet

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "vlmdet/core/ops.hpp"
#include "vlmdet/core/optim.hpp"
#include "vlmdet/core/rng.hpp"
#include "vlmdet/data/image.hpp"
#include "vlmdet/model/config.hpp"
#include "vlmdet/model/vocab.hpp"

namespace vlmdet {

template <class T>
struct ImageEncoding {
  Tensor<T> penultimate;  // [B x d_model], pre-projection [CLS] activation
  Tensor<T> embedding;    // [B x d_embed], unit rows
};

// Upper bound of exp(logit_scale).
inline constexpr double kMaxLogitScale = 100.0;

// Text and image transformers projecting into one normalized space. Copies
// are deep: every parameter tensor is cloned.
template <class T>
class DualEncoder {
 public:
  DualEncoder() = default;

  DualEncoder(const EncoderConfig& cfg, Vocabulary vocab, std::uint64_t seed)
      : cfg_(cfg), vocab_(std::move(vocab)) {
    cfg_.validate();
    SeededRng rng(seed);
    build(rng);
  }

  DualEncoder(const DualEncoder& o) : cfg_(o.cfg_), vocab_(o.vocab_) {
    for (const auto& p : o.params_) params_.add(p.name, p.tensor.clone(), p.trainable);
  }
  DualEncoder& operator=(const DualEncoder& o) {
    if (this != &o) {
      DualEncoder tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  DualEncoder(DualEncoder&&) noexcept = default;
  DualEncoder& operator=(DualEncoder&&) noexcept = default;

  const EncoderConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  const Tensor<T>& param(const std::string& name) const { return params_.at(name).tensor; }

  // Current exp(logit_scale).
  T scale_value() const { return std::exp(param("logit_scale")[0]); }
  Tensor<T> scale() const { return ops::exp(param("logit_scale")); }

  // Keeps exp(logit_scale) within [1, 100].
  void clamp_logit_scale() {
    auto v = params_.at("logit_scale").tensor.mutable_data();
    const T hi = static_cast<T>(std::log(kMaxLogitScale));
    v[0] = std::clamp(v[0], T(0), hi);
  }

  // ---- image branch -------------------------------------------------------

  // [B * num_patches x patch_dim]; patch vectors are channel-major.
  Tensor<T> patchify(std::span<const Image* const> images) const {
    const std::size_t side = cfg_.image_side, ps = cfg_.patch_size, pps = cfg_.patches_per_side();
    const std::size_t pd = cfg_.patch_dim(), np = cfg_.num_patches();
    std::vector<T> out(images.size() * np * pd);
    for (std::size_t b = 0; b < images.size(); ++b) {
      const Image& img = *images[b];
      if (img.width != side || img.height != side) {
        throw ShapeError("encode_image: expected " + std::to_string(side) + "x" +
                         std::to_string(side) + " image, got " + std::to_string(img.width) + "x" +
                         std::to_string(img.height));
      }
      for (std::size_t py = 0; py < pps; ++py)
        for (std::size_t px = 0; px < pps; ++px) {
          T* dst = out.data() + ((b * np) + py * pps + px) * pd;
          for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < ps; ++y)
              for (std::size_t x = 0; x < ps; ++x)
                *dst++ = static_cast<T>(img.at(c, py * ps + y, px * ps + x));
        }
    }
    return Tensor<T>::from({images.size() * np, pd}, std::move(out));
  }

  ImageEncoding<T> encode_images(std::span<const Image* const> images) const {
    const std::size_t batch = images.size();
    if (batch == 0) throw PreconditionError("encode_images on an empty batch");
    const std::size_t seq = cfg_.image_seq_len();
    Tensor<T> x = ops::linear(patchify(images), param("visual.patch_proj"));
    x = ops::prepend_row(x, param("visual.cls"), batch);
    x = ops::add_tiled(x, param("visual.pos"));
    x = ops::layer_norm(x, param("visual.ln_pre.gamma"), param("visual.ln_pre.beta"));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l)
      x = block(x, "visual.blocks." + std::to_string(l), batch, seq, false);
    std::vector<std::size_t> cls_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * seq;
    Tensor<T> cls = ops::gather_rows(x, std::span<const std::size_t>(cls_rows));
    ImageEncoding<T> enc;
    enc.penultimate = ops::layer_norm(cls, param("visual.ln_post.gamma"), param("visual.ln_post.beta"));
    enc.embedding = ops::l2_normalize(ops::linear(enc.penultimate, param("visual.proj")));
    return enc;
  }

  ImageEncoding<T> encode_image(const Image& img) const {
    const Image* p = &img;
    return encode_images(std::span<const Image* const>(&p, 1));
  }

  // ---- text branch --------------------------------------------------------

  // Token embeddings of a sequence, before positional embeddings: [L x d].
  Tensor<T> embed_tokens(std::span<const std::size_t> ids) const {
    for (std::size_t id : ids)
      if (id >= vocab_.size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    return ops::gather_rows(param("text.token_emb"), ids);
  }

  Tensor<T> encode_texts(std::span<const TokenSeq> seqs) const {
    std::vector<std::size_t> ids;
    std::vector<std::size_t> eos;
    for (const auto& s : seqs) {
      check_len(s.ids.size());
      ids.insert(ids.end(), s.ids.begin(), s.ids.end());
      eos.push_back(s.eos_pos);
    }
    return encode_embedded(embed_tokens(ids), eos);
  }

  Tensor<T> encode_text(const TokenSeq& seq) const {
    return encode_texts(std::span<const TokenSeq>(&seq, 1));
  }

  Tensor<T> encode_captions(std::span<const std::string> captions) const {
    std::vector<TokenSeq> seqs;
    seqs.reserve(captions.size());
    for (const auto& c : captions) seqs.push_back(vocab_.tokenize(c, cfg_.context_len));
    return encode_texts(seqs);
  }

  // Pre-embedded sequences, [B*L x d_model] stacked, each pooled at its
  // [EOS] position. This is the entry point prompt tuning uses.
  Tensor<T> encode_embedded(const Tensor<T>& embedded, std::span<const std::size_t> eos_positions) const {
    const std::size_t L = cfg_.context_len, batch = eos_positions.size();
    if (batch == 0) throw PreconditionError("encode_text on an empty batch");
    if (embedded.cols() != cfg_.d_model || embedded.rows() != batch * L) {
      throw ShapeError("encode_text: sequence must be " + std::to_string(L) + " x " +
                       std::to_string(cfg_.d_model) + " per item, got " + shape_str(embedded.shape()));
    }
    std::size_t used = 0;
    for (std::size_t e : eos_positions) {
      if (e >= L) throw IndexError("eos position outside context");
      used = std::max(used, e + 1);
    }
    // Causal masking makes positions past the last [EOS] irrelevant to the
    // pooled rows, so they are dropped before the transformer.
    Tensor<T> x = embedded;
    Tensor<T> pos = param("text.pos");
    if (used < L) {
      std::vector<std::size_t> keep, head(used);
      keep.reserve(batch * used);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < used; ++t) keep.push_back(b * L + t);
      for (std::size_t t = 0; t < used; ++t) head[t] = t;
      x = ops::gather_rows(x, std::span<const std::size_t>(keep));
      pos = ops::gather_rows(pos, std::span<const std::size_t>(head));
    }
    x = ops::add_tiled(x, pos);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l)
      x = block(x, "text.blocks." + std::to_string(l), batch, used, true);
    std::vector<std::size_t> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) rows[b] = b * used + eos_positions[b];
    Tensor<T> pooled = ops::gather_rows(x, std::span<const std::size_t>(rows));
    pooled = ops::layer_norm(pooled, param("text.ln_final.gamma"), param("text.ln_final.beta"));
    return ops::l2_normalize(ops::linear(pooled, param("text.proj")));
  }

 private:
  void check_len(std::size_t n) const {
    if (n != cfg_.context_len) {
      throw ShapeError("encode_text: token sequence length " + std::to_string(n) + " != context length " +
                       std::to_string(cfg_.context_len));
    }
  }

  Tensor<T> block(const Tensor<T>& x, const std::string& p, std::size_t batch, std::size_t seq,
                  bool causal) const {
    Tensor<T> h = ops::layer_norm(x, param(p + ".ln1.gamma"), param(p + ".ln1.beta"));
    Tensor<T> qkv = ops::linear(h, param(p + ".attn.qkv.w"), param(p + ".attn.qkv.b"));
    Tensor<T> a = ops::attention(qkv, batch, seq, cfg_.n_heads, causal);
    Tensor<T> y = ops::add(x, ops::linear(a, param(p + ".attn.out.w"), param(p + ".attn.out.b")));
    Tensor<T> h2 = ops::layer_norm(y, param(p + ".ln2.gamma"), param(p + ".ln2.beta"));
    Tensor<T> m = ops::gelu(ops::linear(h2, param(p + ".mlp.fc.w"), param(p + ".mlp.fc.b")));
    m = ops::linear(m, param(p + ".mlp.proj.w"), param(p + ".mlp.proj.b"));
    return ops::add(y, m);
  }

  Tensor<T> normal(SeededRng& rng, Shape shape, double stddev) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
  }

  void add_ln(const std::string& p) {
    params_.add(p + ".gamma", Tensor<T>::full({cfg_.d_model}, T(1), true));
    params_.add(p + ".beta", Tensor<T>::zeros({cfg_.d_model}, true));
  }

  void add_block(SeededRng& rng, const std::string& p) {
    const std::size_t d = cfg_.d_model, hid = cfg_.mlp_hidden();
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
    add_ln(p + ".ln1");
    params_.add(p + ".attn.qkv.w", normal(rng, {d, 3 * d}, 1.0 / std::sqrt(double(d))));
    params_.add(p + ".attn.qkv.b", Tensor<T>::zeros({3 * d}, true));
    params_.add(p + ".attn.out.w", normal(rng, {d, d}, resid / std::sqrt(double(d))));
    params_.add(p + ".attn.out.b", Tensor<T>::zeros({d}, true));
    add_ln(p + ".ln2");
    params_.add(p + ".mlp.fc.w", normal(rng, {d, hid}, 1.0 / std::sqrt(double(d))));
    params_.add(p + ".mlp.fc.b", Tensor<T>::zeros({hid}, true));
    params_.add(p + ".mlp.proj.w", normal(rng, {hid, d}, resid / std::sqrt(double(hid))));
    params_.add(p + ".mlp.proj.b", Tensor<T>::zeros({d}, true));
  }

  void build(SeededRng& root) {
    const std::size_t d = cfg_.d_model;
    SeededRng vis = root.split(1), txt = root.split(2);
    params_.add("visual.patch_proj", normal(vis, {cfg_.patch_dim(), d}, 1.0 / std::sqrt(double(cfg_.patch_dim()))));
    params_.add("visual.cls", normal(vis, {d}, 1.0 / std::sqrt(double(d))));
    params_.add("visual.pos", normal(vis, {cfg_.image_seq_len(), d}, 0.02));
    add_ln("visual.ln_pre");
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) add_block(vis, "visual.blocks." + std::to_string(l));
    add_ln("visual.ln_post");
    params_.add("visual.proj", normal(vis, {d, cfg_.d_embed}, 1.0 / std::sqrt(double(d))));

    params_.add("text.token_emb", normal(txt, {vocab_.size(), d}, 0.02));
    params_.add("text.pos", normal(txt, {cfg_.context_len, d}, 0.01));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) add_block(txt, "text.blocks." + std::to_string(l));
    add_ln("text.ln_final");
    params_.add("text.proj", normal(txt, {d, cfg_.d_embed}, 1.0 / std::sqrt(double(d))));

    params_.add("logit_scale", Tensor<T>::full({1}, static_cast<T>(std::log(1.0 / 0.07)), true));
  }

  EncoderConfig cfg_;
  Vocabulary vocab_;
  ParameterSet<T> params_;
};

// scale * <image_emb, class_emb_i> for every image row and class row.
// Both inputs are matrices of unit rows.
template <class T>
Tensor<T> cosine_logits(const Tensor<T>& image_embs, const Tensor<T>& class_embs, const Tensor<T>& scale) {
  auto check_unit = [](const Tensor<T>& t, const char* what) {
    const std::size_t d = t.cols();
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double ss = 0;
      for (std::size_t j = 0; j < d; ++j) ss += double(t[r * d + j]) * double(t[r * d + j]);
      if (std::abs(std::sqrt(ss) - 1.0) > 1e-3)
        throw ContractError(std::string("cosine_logits: ") + what + " row " + std::to_string(r) +
                            " is not unit-norm (norm " + std::to_string(std::sqrt(ss)) + ")");
    }
  };
  check_unit(image_embs, "image embedding");
  check_unit(class_embs, "class embedding");
  return ops::mul_scalar(ops::matmul(image_embs, ops::transpose(class_embs)), scale);
}

// Symmetric InfoNCE over a batch of matched (image, text) pairs.
template <class T>
Tensor<T> clip_contrastive_loss(const Tensor<T>& image_embs, const Tensor<T>& text_embs, const Tensor<T>& scale) {
  if (image_embs.rows() < 2)
    throw PreconditionError("contrastive loss needs a batch of at least 2 pairs");
  if (image_embs.shape() != text_embs.shape())
    throw ShapeError("contrastive loss: image " + shape_str(image_embs.shape()) + " vs text " +
                     shape_str(text_embs.shape()));
  const std::size_t b = image_embs.rows();
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i;
  Tensor<T> logits = cosine_logits(image_embs, text_embs, scale);
  Tensor<T> i2t = ops::cross_entropy_with_logits(logits, std::span<const std::size_t>(diag));
  Tensor<T> t2i = ops::cross_entropy_with_logits(ops::transpose(logits), std::span<const std::size_t>(diag));
  return ops::scale(ops::add(i2t, t2i), T(0.5));
}

}  // namespace vlmdet

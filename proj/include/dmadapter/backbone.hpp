#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dmadapter/ops.hpp"
#include "dmadapter/tensor.hpp"

namespace dmadapter {

enum class Branch { vision, text };

inline const char* branch_name(Branch b) { return b == Branch::vision ? "vision" : "text"; }

struct BackboneConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t mlp_ratio = 4;
  std::size_t image_h = 32;
  std::size_t image_w = 16;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t vocab_size = 64;
  std::size_t text_len = 16;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  std::size_t num_patches() const { return (image_h / patch) * (image_w / patch); }
  std::size_t vision_tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch * patch * channels; }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || n_layers == 0 || mlp_ratio == 0 || patch == 0 || channels == 0)
      throw ConfigError("backbone: sizes must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("backbone: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
    if (image_h == 0 || image_w == 0 || image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("backbone: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " not divisible by patch " + std::to_string(patch));
    if (vocab_size == 0 || text_len < 2) throw ConfigError("backbone: vocab_size must be > 0 and text_len >= 2");
    if (!(init_std >= 0.0) || !(ln_eps >= 0.0)) throw ConfigError("backbone: init_std and ln_eps must be >= 0");
  }
};

// Token embeddings of one sequence plus the positions of its special tokens:
// [CLS] at 0 for vision; [BOS] at 0 and [EOS] last for text.
struct TokenSequence {
  Tensor embeddings;  // [tokens, d_model]
  IndexList special_positions;
  std::size_t tokens() const { return embeddings.dim(0); }
};

// Replaces the plain MLP sublayer output. Arguments: the block's residual
// stream x, LN(x), and h_o = x + MLP(LN(x)).
using MlpHook = std::function<Tensor(const Tensor& residual, const Tensor& normed, const Tensor& mlp_out)>;
using HookProvider = std::function<const MlpHook*(std::size_t layer)>;

struct BlockParams {
  Parameter *ln1_g, *ln1_b;
  Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  Parameter *ln2_g, *ln2_b;
  Parameter *w1, *b1, *w2, *b2;
};

// One pre-LN transformer encoder stack (vision or text).
class EncoderBranch {
 public:
  EncoderBranch(Branch branch, const BackboneConfig& cfg, ParameterStore& store, std::mt19937_64& rng)
      : branch_(branch), cfg_(cfg) {
    const std::size_t d = cfg.d_model;
    const std::string prefix = std::string("backbone.") + branch_name(branch) + ".";
    std::normal_distribution<double> normal(0.0, cfg.init_std);
    auto gaussian = [&](const std::string& name, Shape shape) -> Parameter* {
      std::vector<double> v(numel(shape));
      for (auto& x : v) x = normal(rng);
      return &store.add(prefix + name, Tensor(std::move(shape), std::move(v)), true);
    };
    auto constant = [&](const std::string& name, Shape shape, double value) -> Parameter* {
      return &store.add(prefix + name, Tensor::full(std::move(shape), value), true);
    };

    if (branch == Branch::vision) {
      patch_w_ = gaussian("patch_embed.weight", {cfg.patch_dim(), d});
      patch_b_ = constant("patch_embed.bias", {d}, 0.0);
      cls_ = gaussian("cls_token", {1, d});
      pos_ = gaussian("pos_embed", {cfg.vision_tokens(), d});
    } else {
      // rows vocab_size and vocab_size + 1 hold [BOS] and [EOS]
      tok_ = gaussian("token_embed", {cfg.vocab_size + 2, d});
      pos_ = gaussian("pos_embed", {cfg.text_len, d});
    }
    const std::size_t hidden = d * cfg.mlp_ratio;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string b = "block" + std::to_string(l) + ".";
      BlockParams p{};
      p.ln1_g = constant(b + "ln1.gamma", {d}, 1.0);
      p.ln1_b = constant(b + "ln1.beta", {d}, 0.0);
      p.wq = gaussian(b + "attn.wq", {d, d});
      p.bq = constant(b + "attn.bq", {d}, 0.0);
      p.wk = gaussian(b + "attn.wk", {d, d});
      p.bk = constant(b + "attn.bk", {d}, 0.0);
      p.wv = gaussian(b + "attn.wv", {d, d});
      p.bv = constant(b + "attn.bv", {d}, 0.0);
      p.wo = gaussian(b + "attn.wo", {d, d});
      p.bo = constant(b + "attn.bo", {d}, 0.0);
      p.ln2_g = constant(b + "ln2.gamma", {d}, 1.0);
      p.ln2_b = constant(b + "ln2.beta", {d}, 0.0);
      p.w1 = gaussian(b + "mlp.w1", {d, hidden});
      p.b1 = constant(b + "mlp.b1", {hidden}, 0.0);
      p.w2 = gaussian(b + "mlp.w2", {hidden, d});
      p.b2 = constant(b + "mlp.b2", {d}, 0.0);
      blocks_.push_back(p);
    }
    ln_final_g_ = constant("ln_final.gamma", {d}, 1.0);
    ln_final_b_ = constant("ln_final.beta", {d}, 0.0);
  }

  Branch branch() const { return branch_; }
  const BlockParams& block_params(std::size_t layer) const { return blocks_.at(layer); }

  TokenSequence embed_image(const Tensor& pixels) const {
    const auto& c = cfg_;
    if (pixels.rank() != 3 || pixels.dim(2) != c.channels) {
      throw ConfigError("embed_image: expected H x W x " + std::to_string(c.channels) + " pixels, got " +
                        shape_str(pixels.shape()));
    }
    const std::size_t h = pixels.dim(0), w = pixels.dim(1);
    if (h % c.patch != 0 || w % c.patch != 0) {
      throw ConfigError("embed_image: image " + std::to_string(h) + "x" + std::to_string(w) +
                        " not divisible by patch " + std::to_string(c.patch));
    }
    if (h != c.image_h || w != c.image_w) {
      throw ConfigError("embed_image: image " + std::to_string(h) + "x" + std::to_string(w) +
                        " does not match configured " + std::to_string(c.image_h) + "x" + std::to_string(c.image_w));
    }
    const std::size_t gh = h / c.patch, gw = w / c.patch, pd = c.patch_dim();
    std::vector<double> flat(gh * gw * pd);
    for (std::size_t pr = 0; pr < gh; ++pr)
      for (std::size_t pc = 0; pc < gw; ++pc)
        for (std::size_t y = 0; y < c.patch; ++y)
          for (std::size_t x = 0; x < c.patch; ++x)
            for (std::size_t ch = 0; ch < c.channels; ++ch)
              flat[(pr * gw + pc) * pd + (y * c.patch + x) * c.channels + ch] =
                  pixels[((pr * c.patch + y) * w + pc * c.patch + x) * c.channels + ch];
    Tensor patches(Shape{gh * gw, pd}, std::move(flat));
    Tensor tokens = concat_rows({cls_->tensor, linear(patches, patch_w_->tensor, patch_b_->tensor)});
    return {add(tokens, pos_->tensor), {0}};
  }

  TokenSequence embed_text(const std::vector<int>& ids) const {
    const auto& c = cfg_;
    if (ids.size() + 2 > c.text_len) {
      throw DataError("embed_text: " + std::to_string(ids.size()) + " tokens exceed text_len - 2 = " +
                      std::to_string(c.text_len - 2));
    }
    IndexList rows{c.vocab_size};
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
        throw DataError("embed_text: token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(c.vocab_size));
      }
      rows.push_back(static_cast<Index>(id));
    }
    rows.push_back(c.vocab_size + 1);
    IndexList positions(rows.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    Tensor emb = add(gather_rows(tok_->tensor, rows), gather_rows(pos_->tensor, positions));
    return {emb, {0, rows.size() - 1}};
  }

  // Multi-head self-attention over `normed` ([batch*tokens, d]); returns the
  // output projection.
  Tensor attention(const Tensor& normed, std::size_t batch, std::size_t tokens, std::size_t layer,
                   Tensor* weights_out = nullptr) const {
    const auto& p = blocks_.at(layer);
    const std::size_t h = cfg_.n_heads, dh = cfg_.d_model / h;
    Tensor q = split_heads(linear(normed, p.wq->tensor, p.bq->tensor), batch, tokens, h);
    Tensor k = split_heads(linear(normed, p.wk->tensor, p.bk->tensor), batch, tokens, h);
    Tensor v = split_heads(linear(normed, p.wv->tensor, p.bv->tensor), batch, tokens, h);
    Tensor scores = scale(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax(scores, 2);
    if (weights_out) *weights_out = attn;
    Tensor ctx = merge_heads(bmm(attn, v), batch, h);
    return linear(ctx, p.wo->tensor, p.bo->tensor);
  }

  // x <- x + MHA(LN(x)); h_o = x + MLP(LN(x)); output hook(x, LN(x), h_o) or h_o.
  Tensor block(const Tensor& x, std::size_t batch, std::size_t tokens, std::size_t layer,
               const MlpHook* hook = nullptr) const {
    if (layer >= blocks_.size()) throw ArgumentError("block: layer " + std::to_string(layer) + " out of range");
    const auto& p = blocks_[layer];
    const double eps = cfg_.ln_eps;
    Tensor a = add(x, attention(layer_norm(x, p.ln1_g->tensor, p.ln1_b->tensor, eps), batch, tokens, layer));
    Tensor normed = layer_norm(a, p.ln2_g->tensor, p.ln2_b->tensor, eps);
    Tensor mlp = linear(relu(linear(normed, p.w1->tensor, p.b1->tensor)), p.w2->tensor, p.b2->tensor);
    Tensor h_o = add(a, mlp);
    return hook ? (*hook)(a, normed, h_o) : h_o;
  }

  Tensor run_blocks(Tensor x, std::size_t batch, std::size_t tokens, const HookProvider& hooks = {}) const {
    for (std::size_t l = 0; l < blocks_.size(); ++l) x = block(x, batch, tokens, l, hooks ? hooks(l) : nullptr);
    return x;
  }

  // Final LN on the pooled rows, then unit L2 norm.
  Tensor head(const Tensor& pooled) const {
    return normalize_rows(layer_norm(pooled, ln_final_g_->tensor, ln_final_b_->tensor, cfg_.ln_eps));
  }

 private:
  Branch branch_;
  BackboneConfig cfg_;
  Parameter* patch_w_ = nullptr;
  Parameter* patch_b_ = nullptr;
  Parameter* cls_ = nullptr;
  Parameter* tok_ = nullptr;
  Parameter* pos_ = nullptr;
  Parameter* ln_final_g_ = nullptr;
  Parameter* ln_final_b_ = nullptr;
  std::vector<BlockParams> blocks_;
};

// Vision and text encoders with seeded Gaussian weights.
class DualEncoder {
 public:
  DualEncoder(const BackboneConfig& cfg, ParameterStore& store) : cfg_(cfg), store_(&store) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    vision_ = std::make_unique<EncoderBranch>(Branch::vision, cfg, store, rng);
    text_ = std::make_unique<EncoderBranch>(Branch::text, cfg, store, rng);
  }

  const BackboneConfig& config() const { return cfg_; }
  const EncoderBranch& branch(Branch b) const { return b == Branch::vision ? *vision_ : *text_; }
  const EncoderBranch& vision() const { return *vision_; }
  const EncoderBranch& text() const { return *text_; }

  // Batched image encoding: [B, d] unit rows.
  Tensor encode_images(const std::vector<Tensor>& images, const HookProvider& hooks = {}) const {
    if (images.empty()) throw ArgumentError("encode_images: empty batch");
    std::vector<Tensor> seqs;
    for (const auto& img : images) seqs.push_back(vision_->embed_image(img).embeddings);
    const std::size_t b = images.size(), t = cfg_.vision_tokens();
    Tensor x = reshape(stack(seqs), {b * t, cfg_.d_model});
    x = vision_->run_blocks(x, b, t, hooks);
    IndexList cls(b);
    for (std::size_t i = 0; i < b; ++i) cls[i] = i * t;
    return vision_->head(gather_rows(x, cls));
  }

  // Batched caption encoding; all captions must share one length.
  Tensor encode_texts(const std::vector<std::vector<int>>& captions, const HookProvider& hooks = {}) const {
    if (captions.empty()) throw ArgumentError("encode_texts: empty batch");
    std::vector<Tensor> seqs;
    for (const auto& ids : captions) {
      if (ids.size() != captions.front().size())
        throw DataError("encode_texts: captions in one batch must share a length");
      seqs.push_back(text_->embed_text(ids).embeddings);
    }
    const std::size_t b = captions.size(), t = captions.front().size() + 2;
    Tensor x = reshape(stack(seqs), {b * t, cfg_.d_model});
    x = text_->run_blocks(x, b, t, hooks);
    IndexList eos(b);
    for (std::size_t i = 0; i < b; ++i) eos[i] = i * t + t - 1;
    return text_->head(gather_rows(x, eos));
  }

  Tensor encode_image(const Tensor& pixels, const HookProvider& hooks = {}) const {
    return encode_images({pixels}, hooks);
  }
  Tensor encode_text(const std::vector<int>& ids, const HookProvider& hooks = {}) const {
    return encode_texts({ids}, hooks);
  }

  // Marks every backbone parameter frozen.
  void freeze() {
    for (auto* p : store_->all())
      if (p->name.rfind("backbone.", 0) == 0) p->set_trainable(false);
  }

 private:
  BackboneConfig cfg_;
  ParameterStore* store_;
  std::unique_ptr<EncoderBranch> vision_;
  std::unique_ptr<EncoderBranch> text_;
};

}  // namespace dmadapter

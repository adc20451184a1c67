#pragma once

// Shared trunk: patch-token visual encoder, text embedder and the decoder
// used by both pretraining (PLM/MIM) and the causal generation stage.

#include <optional>
#include <string>
#include <vector>

#include "htsc/config.hpp"
#include "htsc/data.hpp"
#include "htsc/nn.hpp"

namespace htsc {

struct ModelConfig {
  std::size_t d = 64, heads = 4, ffn = 128;
  std::size_t enc_layers = 2, dec_layers = 2;
  std::size_t patch = 4, image_size = 32, channels = 1;
  std::size_t vocab = 128, n_max = 40;
  std::size_t entities = 12, positions = 16, negatives = 7;
  bool cls_literal = false, loc_literal = false;
  double mask_rate = 0.85, no_vision_prob = 0.1;
  std::size_t vdm_k = 0;  // 0: ceil(N / 8)
  bool vdm_product = false;
  bool vdm_token_concat = false;
  bool use_vdm = true, use_ldm = true;
  std::size_t pool_queries = 4;

  static ModelConfig from(const Config& c, const data::DataConfig& d);
  void validate() const;

  std::size_t grid() const { return image_size / patch; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t topk() const { return vdm_k ? vdm_k : (tokens() + 7) / 8; }
};

/// Splits an [H x W x C] image into row-major patches, each flattened as
/// (y, x, c). Throws ShapeError when H is not a multiple of the patch size.
template <typename T>
Tensor<T> patchify(const std::vector<float>& image, std::size_t image_size, std::size_t channels,
                   std::size_t patch);

/// Per-layer attention probabilities, each [heads x N x N].
template <typename T>
using AttentionMaps = std::vector<std::vector<T>>;

template <typename T>
struct EncoderBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  FeedForward<T> ffn;

  EncoderBlock() = default;
  EncoderBlock(ParamStore<T>& s, const std::string& name, const ModelConfig& c, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x, std::vector<T>* probs) const;
};

template <typename T>
class VisualEncoder {
 public:
  VisualEncoder() = default;
  VisualEncoder(ParamStore<T>& s, const ModelConfig& c, Rng& rng);

  /// Patch projection before positional addition, [N x d].
  Tensor<T> embed_patches(const Tensor<T>& patches) const { return stem_(patches); }

  /// F_v for all patches, or only for `subset` (sorted patch ids) when given.
  Tensor<T> encode(const Tensor<T>& patches, const std::vector<std::size_t>* subset = nullptr,
                   AttentionMaps<T>* maps = nullptr) const;

  const Tensor<T>& positions() const { return pos_; }

 private:
  Linear<T> stem_;
  Tensor<T> pos_;  // [grid*grid x d]
  std::vector<EncoderBlock<T>> blocks_;
  LayerNorm<T> ln_f_;
};

template <typename T>
class TextEmbedder {
 public:
  TextEmbedder() = default;
  TextEmbedder(ParamStore<T>& s, const ModelConfig& c, Rng& rng);

  Tensor<T> embed(const std::vector<std::size_t>& ids) const;
  const Tensor<T>& table() const { return tok_; }
  const Tensor<T>& positions() const { return pos_; }

 private:
  Tensor<T> tok_, pos_;
};

template <typename T>
struct DecoderBlock {
  LayerNorm<T> ln_self, ln_cross, ln_med, ln_ffn;
  MultiHeadAttention<T> self_attn, cross_attn, med_attn;
  FeedForward<T> ffn;

  DecoderBlock() = default;
  DecoderBlock(ParamStore<T>& s, std::size_t layer, const ModelConfig& c, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>* memory, const AttnMask& mask,
                       const Tensor<T>* mediators) const;
};

/// Pre-LN decoder trunk (`dec.*`) with an optional mediator cross-attention
/// sublayer per block (`med.*`, output projection zero-initialized).
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore<T>& s, const ModelConfig& c, Rng& rng);

  /// Final hidden states [n x d]. `memory` and `mediators` may be null.
  Tensor<T> hidden(const Tensor<T>& x, const Tensor<T>* memory, const AttnMask& mask,
                   const Tensor<T>* mediators = nullptr) const;
  Tensor<T> logits(const Tensor<T>& hidden) const { return head_(hidden); }

 private:
  std::vector<DecoderBlock<T>> blocks_;
  LayerNorm<T> ln_f_;
  Linear<T> head_;
};

}  // namespace htsc

#pragma once

// Task heads and losses for the three training levels.
//   low:  entity existence (BCE) and entity location (contrastive)
//   mid:  prefix language modeling and masked image modeling
//   high: visual / language mediators and the mediated generation loss

#include <optional>
#include <vector>

#include "htsc/encoders.hpp"

namespace htsc {

// ---------------------------------------------------------------------------
// Low level

template <typename T>
struct EntityPrediction {
  Tensor<T> s_hat;  // [Q] existence probabilities
  Tensor<T> p_hat;  // [Q x d] predicted position embeddings
};

template <typename T>
class LowTask {
 public:
  LowTask() = default;
  LowTask(ParamStore<T>& s, const ModelConfig& c, Rng& rng);

  EntityPrediction<T> predict(const Tensor<T>& f_v) const;
  const Tensor<T>& position_table() const { return pos_table_; }

 private:
  Tensor<T> queries_, pos_table_;
  LayerNorm<T> ln_q_, ln_out_;
  MultiHeadAttention<T> attn_;
  Linear<T> exist_, loc_;
};

/// Full form: -sum[y log s + (1-y) log(1-s)]; literal form: -sum y log s.
/// s is clamped to [1e-7, 1 - 1e-7].
template <typename T>
Tensor<T> entity_existence_loss(const Tensor<T>& s_hat, const std::vector<std::uint8_t>& y, bool literal = false);

/// `M` position ids drawn uniformly without replacement from [0, P) minus
/// `true_pos`. ConfigError when M >= P.
std::vector<std::size_t> sample_negatives(Rng& rng, std::size_t positions, std::size_t true_pos, std::size_t m);

/// Contrastive location loss over the entities present. `negatives[i]` are
/// the negative position ids for `present[i]`. InfoNCE form (default) or the
/// log-free literal form -mean softmax[0]. Returns 0 when nothing is present.
template <typename T>
Tensor<T> entity_location_loss(const Tensor<T>& p_hat, const std::vector<data::Entity>& present,
                               const Tensor<T>& pos_table, const std::vector<std::vector<std::size_t>>& negatives,
                               bool literal = false);

// ---------------------------------------------------------------------------
// Mid level

/// ceil(r * N) distinct patch ids, sorted. The epsilon keeps exact products
/// such as 0.5 * 64 from rounding up through floating-point noise.
std::vector<std::size_t> make_mask_plan(std::size_t n, double rate, Rng& rng);
std::size_t mask_count(std::size_t n, double rate);

/// Uniform in [1, n-1].
std::size_t draw_prefix_split(Rng& rng, std::size_t n);

template <typename T>
class MimHead {
 public:
  MimHead() = default;
  MimHead(ParamStore<T>& s, const ModelConfig& c, Rng& rng);

  /// Decoder queries for the masked ids: mask token plus their 2D positions.
  Tensor<T> queries(const Tensor<T>& vis_positions, const std::vector<std::size_t>& masked) const;
  /// Report embedding for the decoder memory: token embeddings passed
  /// through one bidirectional block, so each row carries its sentence
  /// context (an entity token alone says nothing about where it sits).
  Tensor<T> report(const Tensor<T>& embedded) const { return text_(embedded, nullptr); }
  /// One pre-LN cross-attention block of its own over the decoder memory,
  /// then a zero-initialized readout, so an untrained head predicts 0 for
  /// every pixel.
  Tensor<T> predict(const Tensor<T>& hidden, const Tensor<T>* memory) const;

 private:
  Tensor<T> mask_token_;
  EncoderBlock<T> text_;
  LayerNorm<T> ln_cross_, ln_ffn_;
  MultiHeadAttention<T> cross_;
  FeedForward<T> ffn_;
  Linear<T> head_;
};

/// Teacher-forced next-token loss, summed over targets tokens[from..n-1].
/// Decoder position i sees inputs tokens[0..n-2] under `mask`.
template <typename T>
Tensor<T> sequence_nll(const Decoder<T>& dec, const TextEmbedder<T>& txt, const std::vector<std::size_t>& tokens,
                       std::size_t from, const Tensor<T>* memory, const AttnMask& mask,
                       const Tensor<T>* mediators = nullptr);

/// PLM loss: prefix tokens[0..n_p-1] visible bidirectionally, suffix
/// tokens[n_p..n-1] predicted. `f_v` null is the no-vision mode.
template <typename T>
Tensor<T> plm_loss(const Decoder<T>& dec, const TextEmbedder<T>& txt, const Tensor<T>* f_v,
                   const std::vector<std::size_t>& tokens, std::size_t n_p);

/// Masked-patch reconstruction MSE. `with_text` false drops the report
/// embedding from the decoder memory.
/// `targets` defaults to `patches`.
template <typename T>
Tensor<T> mim_loss(const VisualEncoder<T>& enc, const TextEmbedder<T>& txt, const Decoder<T>& dec,
                   const MimHead<T>& head, const Tensor<T>& patches, const std::vector<std::size_t>& tokens,
                   const std::vector<std::size_t>& masked, bool with_text = true,
                   const Tensor<T>* targets = nullptr);

// ---------------------------------------------------------------------------
// High level

/// Attention received per token, accumulated over heads within a layer and
/// then summed (or multiplied) over layers.
template <typename T>
std::vector<double> attention_scores(const AttentionMaps<T>& maps, std::size_t heads, std::size_t n, bool product);

/// Top-k ids by score, ties to the lower id, returned in increasing id order.
std::vector<std::size_t> select_topk(const std::vector<double>& scores, std::size_t k);

template <typename T>
struct Mediators {
  Tensor<T> f_vl, f_vg, m_v, f_vl_prime, m_l;
  Tensor<T> pooled;  // [M^_v ; M^_l] as decoder mediator memory (undefined if both disabled)
};

template <typename T>
class HighTask {
 public:
  HighTask() = default;
  HighTask(ParamStore<T>& s, const ModelConfig& c, Rng& rng);

  /// F_vg = L[MP(F_v) + Attn(MP(LN(F_v)))], F_v viewed as [g x g x d].
  Tensor<T> global_feature(const Tensor<T>& f_v) const;
  /// M_v = FFN([MHA(F_vl, F_vl, F_vl), MHA(F_vl, F_vg, F_vg)]).
  Tensor<T> visual_mediator(const Tensor<T>& f_vl, const Tensor<T>& f_vg) const;
  /// The self- and cross-attention branches fed to the M_v FFN.
  std::pair<Tensor<T>, Tensor<T>> visual_branches(const Tensor<T>& f_vl, const Tensor<T>& f_vg) const;
  /// F'_vl = FFN(MHA(F_vl, W, W)).
  Tensor<T> vocab_reconstruct(const Tensor<T>& f_vl, const Tensor<T>& vocab_table,
                              std::vector<T>* probs = nullptr) const;
  /// M_l = FFN(MHA(F'_vl, F_vl, F_vl)).
  Tensor<T> language_mediator(const Tensor<T>& f_vl_prime, const Tensor<T>& f_vl) const;

  Tensor<T> pool_visual(const Tensor<T>& m_v) const;
  Tensor<T> pool_language(const Tensor<T>& m_l) const;

  Mediators<T> mediators(const Tensor<T>& f_v, const AttentionMaps<T>& maps, const Tensor<T>& vocab_table) const;

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  LayerNorm<T> g_ln_;
  MultiHeadAttention<T> g_attn_;
  Linear<T> g_lin_;
  MultiHeadAttention<T> v_self_, v_cross_;
  FeedForward<T> v_ffn_;
  MultiHeadAttention<T> l_vocab_, l_attn_;
  FeedForward<T> l_ffn1_, l_ffn2_;
  Tensor<T> v_pool_q_, l_pool_q_;
  MultiHeadAttention<T> v_pool_, l_pool_;
};

}  // namespace htsc

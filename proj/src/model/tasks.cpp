#include "htsc/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "htsc/errors.hpp"

namespace htsc {

// ---------------------------------------------------------------------------
// Low level

template <typename T>
LowTask<T>::LowTask(ParamStore<T>& s, const ModelConfig& c, Rng& rng)
    : queries_(s.create("low.query", {c.entities, c.d}, Init::Normal, rng, 1.0)),
      pos_table_(s.create("low.pos_table", {c.positions, c.d}, Init::Normal, rng, 1.0 / std::sqrt(double(c.d)))),
      ln_q_(s, "low.ln_q", c.d, rng),
      ln_out_(s, "low.ln_out", c.d, rng),
      attn_(s, "low.attn", c.d, c.heads, rng),
      exist_(s, "low.exist", c.d, 1, rng),
      loc_(s, "low.loc", c.d, c.d, rng) {}

template <typename T>
EntityPrediction<T> LowTask<T>::predict(const Tensor<T>& f_v) const {
  const auto h = add(queries_, attn_(ln_q_(queries_), f_v, f_v));
  const auto z = ln_out_(h);
  const auto q = queries_.dim(0);
  return {reshape(sigmoid(exist_(z)), {q}), loc_(z)};
}

template <typename T>
Tensor<T> entity_existence_loss(const Tensor<T>& s_hat, const std::vector<std::uint8_t>& y, bool literal) {
  if (s_hat.numel() != y.size()) throw ShapeError("entity_existence_loss: label count differs from predictions");
  constexpr T lo = T(1e-7), hi = T(1) - T(1e-7);
  const auto s = s_hat.data();
  T total = T(0);
  for (std::size_t k = 0; k < y.size(); ++k) {
    const T v = std::clamp(s[k], lo, hi);
    total -= y[k] ? std::log(v) : (literal ? T(0) : std::log(T(1) - v));
  }
  return make_result<T>("bce", {1}, {total}, {s_hat}, [y, literal, lo, hi](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& s = self.parents[0]->data;
    for (std::size_t k = 0; k < y.size(); ++k) {
      if (s[k] < lo || s[k] > hi) continue;  // clamped: flat
      const T d = y[k] ? -T(1) / s[k] : (literal ? T(0) : T(1) / (T(1) - s[k]));
      g[k] += self.grad[0] * d;
    }
  });
}

std::vector<std::size_t> sample_negatives(Rng& rng, std::size_t positions, std::size_t true_pos, std::size_t m) {
  if (m >= positions)
    throw ConfigError("cannot draw " + std::to_string(m) + " negatives from " + std::to_string(positions) +
                      " positions");
  if (true_pos >= positions) throw IndexError("sample_negatives: true position out of range");
  auto ids = rng.sample_without_replacement(positions - 1, m);
  for (auto& j : ids)
    if (j >= true_pos) ++j;
  return ids;
}

template <typename T>
Tensor<T> entity_location_loss(const Tensor<T>& p_hat, const std::vector<data::Entity>& present,
                               const Tensor<T>& pos_table, const std::vector<std::vector<std::size_t>>& negatives,
                               bool literal) {
  if (negatives.size() != present.size()) throw ShapeError("entity_location_loss: one negative set per entity");
  if (present.empty()) return Tensor<T>::scalar(T(0));
  std::vector<Tensor<T>> rows;
  for (std::size_t i = 0; i < present.size(); ++i) {
    std::vector<std::size_t> ids{present[i].position};
    ids.insert(ids.end(), negatives[i].begin(), negatives[i].end());
    const auto cand = embedding(pos_table, ids);                      // [(M+1) x d]
    const auto pred = slice_rows(p_hat, present[i].entity, 1);        // [1 x d]
    rows.push_back(matmul_nt(pred, cand));                            // [1 x (M+1)]
  }
  const auto logits = concat_rows(rows);
  const T inv = T(1) / static_cast<T>(present.size());
  if (!literal) return softmax_cross_entropy(logits, std::vector<std::size_t>(present.size(), 0), Reduction::Mean);
  std::vector<T> pick(logits.numel(), T(0));
  for (std::size_t i = 0; i < present.size(); ++i) pick[i * logits.dim(1)] = -inv;
  return sum(mul(softmax_rows(logits), Tensor<T>::from(logits.shape(), std::move(pick))));
}

// ---------------------------------------------------------------------------
// Mid level

std::size_t mask_count(std::size_t n, double rate) {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("mask rate must be in (0, 1)");
  const auto k = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

std::vector<std::size_t> make_mask_plan(std::size_t n, double rate, Rng& rng) {
  auto ids = rng.sample_without_replacement(n, mask_count(n, rate));
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::size_t draw_prefix_split(Rng& rng, std::size_t n) {
  if (n < 2) throw ShapeError("prefix split needs at least two tokens");
  return 1 + static_cast<std::size_t>(rng.below(n - 1));
}

template <typename T>
MimHead<T>::MimHead(ParamStore<T>& s, const ModelConfig& c, Rng& rng)
    : mask_token_(s.create("mim.mask_token", {c.d}, Init::Normal, rng)),
      text_(s, "mim.text", c, rng),
      ln_cross_(s, "mim.ln_cross", c.d, rng),
      ln_ffn_(s, "mim.ln_ffn", c.d, rng),
      cross_(s, "mim.cross", c.d, c.heads, rng),
      ffn_(s, "mim.ffn", c.d, c.ffn, c.d, rng),
      head_(s, "mim.patch_head", c.d, c.patch_dim(), rng, /*zero_init=*/true) {}

template <typename T>
Tensor<T> MimHead<T>::predict(const Tensor<T>& hidden, const Tensor<T>* memory) const {
  auto y = hidden;
  if (memory) y = add(y, cross_(ln_cross_(y), *memory, *memory));
  return head_(add(y, ffn_(ln_ffn_(y))));
}

template <typename T>
Tensor<T> MimHead<T>::queries(const Tensor<T>& vis_positions, const std::vector<std::size_t>& masked) const {
  return add_row(embedding(vis_positions, masked), mask_token_);
}

template <typename T>
Tensor<T> sequence_nll(const Decoder<T>& dec, const TextEmbedder<T>& txt, const std::vector<std::size_t>& tokens,
                       std::size_t from, const Tensor<T>* memory, const AttnMask& mask, const Tensor<T>* mediators) {
  const std::size_t n = tokens.size();
  if (n < 2 || from < 1 || from > n - 1) throw IndexError("sequence_nll: target start out of range");
  const std::vector<std::size_t> inputs(tokens.begin(), tokens.end() - 1);
  const std::vector<std::size_t> targets(tokens.begin() + static_cast<std::ptrdiff_t>(from), tokens.end());
  const auto h = dec.hidden(txt.embed(inputs), memory, mask, mediators);
  const auto logits = dec.logits(from == 1 ? h : slice_rows(h, from - 1, n - from));
  return softmax_cross_entropy(logits, targets, Reduction::Sum);
}

template <typename T>
Tensor<T> plm_loss(const Decoder<T>& dec, const TextEmbedder<T>& txt, const Tensor<T>* f_v,
                   const std::vector<std::size_t>& tokens, std::size_t n_p) {
  if (n_p < 1 || n_p + 1 > tokens.size())
    throw IndexError("plm_loss: n_p = " + std::to_string(n_p) + " outside [1, " +
                     std::to_string(tokens.size() > 0 ? tokens.size() - 1 : 0) + "]");
  return sequence_nll(dec, txt, tokens, n_p, f_v, AttnMask::prefix(n_p));
}

template <typename T>
Tensor<T> mim_loss(const VisualEncoder<T>& enc, const TextEmbedder<T>& txt, const Decoder<T>& dec,
                   const MimHead<T>& head, const Tensor<T>& patches, const std::vector<std::size_t>& tokens,
                   const std::vector<std::size_t>& masked, bool with_text, const Tensor<T>* targets) {
  const std::size_t n = patches.dim(0);
  std::vector<bool> is_masked(n, false);
  for (auto i : masked) {
    if (i >= n) throw IndexError("mim_loss: masked id out of range");
    is_masked[i] = true;
  }
  std::vector<std::size_t> visible;
  for (std::size_t i = 0; i < n; ++i)
    if (!is_masked[i]) visible.push_back(i);

  std::vector<Tensor<T>> mem;
  if (!visible.empty()) mem.push_back(enc.encode(patches, &visible));
  if (with_text) mem.push_back(head.report(txt.embed(tokens)));
  const auto q = head.queries(enc.positions(), masked);
  Tensor<T> memory;
  if (!mem.empty()) memory = mem.size() == 1 ? mem[0] : concat_rows(mem);
  const auto h = dec.hidden(q, mem.empty() ? nullptr : &memory, AttnMask::none());
  return mse_loss(head.predict(h, mem.empty() ? nullptr : &memory), embedding(targets ? *targets : patches, masked).detach());
}

// ---------------------------------------------------------------------------
// High level

template <typename T>
std::vector<double> attention_scores(const AttentionMaps<T>& maps, std::size_t heads, std::size_t n, bool product) {
  if (maps.empty()) throw ShapeError("attention_scores: no attention maps");
  std::vector<double> out(n, product ? 1.0 : 0.0);
  for (const auto& layer : maps) {
    if (layer.size() != heads * n * n) throw ShapeError("attention_scores: map size mismatch");
    std::vector<double> recv(n, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < n; ++q)
        for (std::size_t k = 0; k < n; ++k) recv[k] += static_cast<double>(layer[(h * n + q) * n + k]);
    for (std::size_t k = 0; k < n; ++k) out[k] = product ? out[k] * recv[k] : out[k] + recv[k];
  }
  return out;
}

std::vector<std::size_t> select_topk(const std::vector<double>& scores, std::size_t k) {
  if (k == 0 || k > scores.size())
    throw ConfigError("top-k: k = " + std::to_string(k) + " not in [1, " + std::to_string(scores.size()) + "]");
  std::vector<std::size_t> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

template <typename T>
HighTask<T>::HighTask(ParamStore<T>& s, const ModelConfig& c, Rng& rng)
    : cfg_(c),
      g_ln_(s, "vdm.global.ln", c.d, rng),
      g_attn_(s, "vdm.global.attn", c.d, c.heads, rng),
      g_lin_(s, "vdm.global.lin", c.d, c.d, rng),
      v_self_(s, "vdm.self", c.d, c.heads, rng),
      v_cross_(s, "vdm.cross", c.d, c.heads, rng),
      v_ffn_(s, "vdm.ffn", c.vdm_token_concat ? c.d : 2 * c.d, c.ffn, c.d, rng),
      l_vocab_(s, "ldm.vocab_attn", c.d, c.heads, rng),
      l_attn_(s, "ldm.attn", c.d, c.heads, rng),
      l_ffn1_(s, "ldm.ffn1", c.d, c.ffn, c.d, rng),
      l_ffn2_(s, "ldm.ffn2", c.d, c.ffn, c.d, rng),
      v_pool_q_(s.create("vdm.pool.q", {c.pool_queries, c.d}, Init::Normal, rng, 1.0)),
      l_pool_q_(s.create("ldm.pool.q", {c.pool_queries, c.d}, Init::Normal, rng, 1.0)),
      v_pool_(s, "vdm.pool.attn", c.d, c.heads, rng),
      l_pool_(s, "ldm.pool.attn", c.d, c.heads, rng) {}

template <typename T>
Tensor<T> HighTask<T>::global_feature(const Tensor<T>& f_v) const {
  const std::size_t n = f_v.dim(0), d = f_v.dim(1);
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (g * g != n) throw ShapeError("global_feature: token count is not a square grid");
  if (g % 2 != 0) throw ShapeError("global_feature: grid side " + std::to_string(g) + " is odd");
  const std::size_t m = (g / 2) * (g / 2);
  const auto plain = reshape(maxpool2d(reshape(f_v, {g, g, d})), {m, d});
  const auto normed = reshape(maxpool2d(reshape(g_ln_(f_v), {g, g, d})), {m, d});
  return g_lin_(add(plain, g_attn_(normed, normed, normed)));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> HighTask<T>::visual_branches(const Tensor<T>& f_vl, const Tensor<T>& f_vg) const {
  return {v_self_(f_vl, f_vl, f_vl), v_cross_(f_vl, f_vg, f_vg)};
}

template <typename T>
Tensor<T> HighTask<T>::visual_mediator(const Tensor<T>& f_vl, const Tensor<T>& f_vg) const {
  const auto [self_branch, cross_branch] = visual_branches(f_vl, f_vg);
  if (cfg_.vdm_token_concat) return v_ffn_(concat_rows<T>({self_branch, cross_branch}));
  return v_ffn_(concat_cols<T>({self_branch, cross_branch}));
}

template <typename T>
Tensor<T> HighTask<T>::vocab_reconstruct(const Tensor<T>& f_vl, const Tensor<T>& vocab_table,
                                         std::vector<T>* probs) const {
  return l_ffn1_(l_vocab_(f_vl, vocab_table, vocab_table, AttnMask::none(), probs));
}

template <typename T>
Tensor<T> HighTask<T>::language_mediator(const Tensor<T>& f_vl_prime, const Tensor<T>& f_vl) const {
  return l_ffn2_(l_attn_(f_vl_prime, f_vl, f_vl));
}

template <typename T>
Tensor<T> HighTask<T>::pool_visual(const Tensor<T>& m_v) const {
  return v_pool_(v_pool_q_, m_v, m_v);
}

template <typename T>
Tensor<T> HighTask<T>::pool_language(const Tensor<T>& m_l) const {
  return l_pool_(l_pool_q_, m_l, m_l);
}

template <typename T>
Mediators<T> HighTask<T>::mediators(const Tensor<T>& f_v, const AttentionMaps<T>& maps,
                                    const Tensor<T>& vocab_table) const {
  Mediators<T> m;
  if (!cfg_.use_vdm && !cfg_.use_ldm) return m;
  const auto scores = attention_scores(maps, cfg_.heads, f_v.dim(0), cfg_.vdm_product);
  m.f_vl = embedding(f_v, select_topk(scores, cfg_.topk()));
  std::vector<Tensor<T>> pooled;
  if (cfg_.use_vdm) {
    m.f_vg = global_feature(f_v);
    m.m_v = visual_mediator(m.f_vl, m.f_vg);
    pooled.push_back(pool_visual(m.m_v));
  }
  if (cfg_.use_ldm) {
    m.f_vl_prime = vocab_reconstruct(m.f_vl, vocab_table);
    m.m_l = language_mediator(m.f_vl_prime, m.f_vl);
    pooled.push_back(pool_language(m.m_l));
  }
  m.pooled = pooled.size() == 1 ? pooled[0] : concat_rows(pooled);
  return m;
}

#define HTSC_INSTANTIATE(T)                                                                                       \
  template class LowTask<T>;                                                                                      \
  template Tensor<T> entity_existence_loss<T>(const Tensor<T>&, const std::vector<std::uint8_t>&, bool);          \
  template Tensor<T> entity_location_loss<T>(const Tensor<T>&, const std::vector<data::Entity>&, const Tensor<T>&, \
                                             const std::vector<std::vector<std::size_t>>&, bool);                 \
  template class MimHead<T>;                                                                                      \
  template Tensor<T> sequence_nll<T>(const Decoder<T>&, const TextEmbedder<T>&, const std::vector<std::size_t>&,  \
                                     std::size_t, const Tensor<T>*, const AttnMask&, const Tensor<T>*);            \
  template Tensor<T> plm_loss<T>(const Decoder<T>&, const TextEmbedder<T>&, const Tensor<T>*,                     \
                                 const std::vector<std::size_t>&, std::size_t);                                   \
  template Tensor<T> mim_loss<T>(const VisualEncoder<T>&, const TextEmbedder<T>&, const Decoder<T>&,              \
                                 const MimHead<T>&, const Tensor<T>&, const std::vector<std::size_t>&,            \
                                 const std::vector<std::size_t>&, bool, const Tensor<T>*);                        \
  template std::vector<double> attention_scores<T>(const AttentionMaps<T>&, std::size_t, std::size_t, bool);      \
  template class HighTask<T>;

HTSC_INSTANTIATE(float)
HTSC_INSTANTIATE(double)

}  // namespace htsc

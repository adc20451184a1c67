#include "htsc/encoders.hpp"

#include <numeric>

#include "htsc/errors.hpp"

namespace htsc {

ModelConfig ModelConfig::from(const Config& c, const data::DataConfig& d) {
  ModelConfig m;
  m.d = c.count("model.d");
  m.heads = c.count("model.heads");
  m.ffn = c.count("model.ffn");
  m.enc_layers = c.count("model.enc_layers");
  m.dec_layers = c.count("model.dec_layers");
  m.patch = c.count("model.patch");
  m.pool_queries = c.count("model.pool_queries");
  m.image_size = d.image_size;
  m.channels = d.channels;
  m.vocab = d.vocab_size;
  m.n_max = d.n_max;
  m.entities = d.entities;
  m.positions = d.positions;
  m.negatives = c.count("eclo.M");
  m.cls_literal = c.str("eclo.cls_form") == "literal";
  m.loc_literal = c.str("eclo.loc_form") == "literal";
  m.mask_rate = c.num("mim.rate");
  m.no_vision_prob = c.num("plm.no_vision_prob");
  m.vdm_k = c.count("vdm.k");
  m.vdm_product = c.str("vdm.accum") == "product";
  m.vdm_token_concat = c.str("vdm.concat") == "token";
  m.use_vdm = c.flag("high.vdm");
  m.use_ldm = c.flag("high.ldm");
  m.validate();
  return m;
}

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0) throw ConfigError("model: d must be a positive multiple of heads");
  if (ffn == 0 || enc_layers == 0 || dec_layers == 0) throw ConfigError("model: ffn and layer counts must be positive");
  if (patch == 0 || image_size % patch != 0) throw ConfigError("model: image size must be a multiple of the patch size");
  if (negatives >= positions)
    throw ConfigError("eclo.M = " + std::to_string(negatives) + " negatives need more than that many positions");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("mim.rate must be in (0, 1)");
  if (!(no_vision_prob >= 0.0 && no_vision_prob <= 1.0)) throw ConfigError("plm.no_vision_prob must be in [0, 1]");
  if (topk() > tokens()) throw ConfigError("vdm.k exceeds the number of patch tokens");
  if (use_vdm && grid() % 2 != 0) throw ConfigError("vdm needs an even token grid for 2x2 pooling");
  if (pool_queries == 0) throw ConfigError("model.pool_queries must be positive");
}

template <typename T>
Tensor<T> patchify(const std::vector<float>& image, std::size_t image_size, std::size_t channels,
                   std::size_t patch) {
  if (image.size() != image_size * image_size * channels) throw ShapeError("patchify: image size mismatch");
  if (patch == 0 || image_size % patch != 0)
    throw ShapeError("patchify: " + std::to_string(image_size) + " is not divisible by patch " + std::to_string(patch));
  const std::size_t g = image_size / patch, pd = patch * patch * channels;
  std::vector<T> out(g * g * pd);
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      T* dst = &out[(pr * g + pc) * pd];
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < channels; ++ch)
            *dst++ = static_cast<T>(image[((pr * patch + y) * image_size + pc * patch + x) * channels + ch]);
    }
  return Tensor<T>::from({g * g, pd}, std::move(out));
}

template <typename T>
EncoderBlock<T>::EncoderBlock(ParamStore<T>& s, const std::string& name, const ModelConfig& c, Rng& rng)
    : ln1(s, name + ".ln1", c.d, rng),
      ln2(s, name + ".ln2", c.d, rng),
      attn(s, name + ".attn", c.d, c.heads, rng),
      ffn(s, name + ".ffn", c.d, c.ffn, c.d, rng) {}

template <typename T>
Tensor<T> EncoderBlock<T>::operator()(const Tensor<T>& x, std::vector<T>* probs) const {
  const auto h = ln1(x);
  const auto y = add(x, attn(h, h, h, AttnMask::none(), probs));
  return add(y, ffn(ln2(y)));
}

template <typename T>
VisualEncoder<T>::VisualEncoder(ParamStore<T>& s, const ModelConfig& c, Rng& rng)
    : stem_(s, "enc.vis.patch", c.patch_dim(), c.d, rng),
      pos_(s.create("enc.vis.pos", {c.tokens(), c.d}, Init::Normal, rng, 0.2)),
      ln_f_(s, "enc.vis.ln_f", c.d, rng) {
  for (std::size_t l = 0; l < c.enc_layers; ++l)
    blocks_.emplace_back(s, "enc.vis.block" + std::to_string(l), c, rng);
}

template <typename T>
Tensor<T> VisualEncoder<T>::encode(const Tensor<T>& patches, const std::vector<std::size_t>* subset,
                                   AttentionMaps<T>* maps) const {
  if (patches.dim(0) != pos_.dim(0)) throw ShapeError("encoder: patch count does not match the position table");
  Tensor<T> x;
  if (subset) {
    x = add(embed_patches(embedding(patches, *subset)), embedding(pos_, *subset));
  } else {
    x = add(embed_patches(patches), pos_);
  }
  if (maps) maps->assign(blocks_.size(), {});
  for (std::size_t l = 0; l < blocks_.size(); ++l) x = blocks_[l](x, maps ? &(*maps)[l] : nullptr);
  return ln_f_(x);
}

template <typename T>
TextEmbedder<T>::TextEmbedder(ParamStore<T>& s, const ModelConfig& c, Rng& rng)
    : tok_(s.create("enc.txt.tok", {c.vocab, c.d}, Init::Normal, rng)),
      pos_(s.create("enc.txt.pos", {c.n_max, c.d}, Init::Normal, rng)) {}

template <typename T>
Tensor<T> TextEmbedder<T>::embed(const std::vector<std::size_t>& ids) const {
  if (ids.size() > pos_.dim(0))
    throw ShapeError("text: sequence of " + std::to_string(ids.size()) + " exceeds n_max " +
                     std::to_string(pos_.dim(0)));
  std::vector<std::size_t> at(ids.size());
  std::iota(at.begin(), at.end(), 0);
  return add(embedding(tok_, ids), embedding(pos_, at));
}

template <typename T>
DecoderBlock<T>::DecoderBlock(ParamStore<T>& s, std::size_t layer, const ModelConfig& c, Rng& rng) {
  const auto name = "dec.block" + std::to_string(layer);
  const auto med = "med.block" + std::to_string(layer);
  ln_self = LayerNorm<T>(s, name + ".ln_self", c.d, rng);
  self_attn = MultiHeadAttention<T>(s, name + ".self", c.d, c.heads, rng);
  ln_cross = LayerNorm<T>(s, name + ".ln_cross", c.d, rng);
  cross_attn = MultiHeadAttention<T>(s, name + ".cross", c.d, c.heads, rng);
  ln_ffn = LayerNorm<T>(s, name + ".ln_ffn", c.d, rng);
  ffn = FeedForward<T>(s, name + ".ffn", c.d, c.ffn, c.d, rng);
  ln_med = LayerNorm<T>(s, med + ".ln", c.d, rng);
  med_attn = MultiHeadAttention<T>(s, med + ".xattn", c.d, c.heads, rng, /*zero_output=*/true);
}

template <typename T>
Tensor<T> DecoderBlock<T>::operator()(const Tensor<T>& x, const Tensor<T>* memory, const AttnMask& mask,
                                      const Tensor<T>* mediators) const {
  auto h = ln_self(x);
  auto y = add(x, self_attn(h, h, h, mask));
  if (memory) y = add(y, cross_attn(ln_cross(y), *memory, *memory));
  if (mediators) y = add(y, med_attn(ln_med(y), *mediators, *mediators));
  return add(y, ffn(ln_ffn(y)));
}

template <typename T>
Decoder<T>::Decoder(ParamStore<T>& s, const ModelConfig& c, Rng& rng) {
  for (std::size_t l = 0; l < c.dec_layers; ++l) blocks_.emplace_back(s, l, c, rng);
  ln_f_ = LayerNorm<T>(s, "dec.ln_f", c.d, rng);
  head_ = Linear<T>(s, "dec.head", c.d, c.vocab, rng);
}

template <typename T>
Tensor<T> Decoder<T>::hidden(const Tensor<T>& x, const Tensor<T>* memory, const AttnMask& mask,
                             const Tensor<T>* mediators) const {
  auto y = x;
  for (const auto& b : blocks_) y = b(y, memory, mask, mediators);
  return ln_f_(y);
}

#define HTSC_INSTANTIATE(T)                                                                           \
  template Tensor<T> patchify<T>(const std::vector<float>&, std::size_t, std::size_t, std::size_t); \
  template struct EncoderBlock<T>;                                                                   \
  template class VisualEncoder<T>;                                                                   \
  template class TextEmbedder<T>;                                                                    \
  template struct DecoderBlock<T>;                                                                   \
  template class Decoder<T>;

HTSC_INSTANTIATE(float)
HTSC_INSTANTIATE(double)

}  // namespace htsc

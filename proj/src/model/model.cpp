#include "htsc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "htsc/errors.hpp"
#include "json.hpp"

namespace htsc {

namespace {

// Construction consumes one sub-stream per module so that adding a module
// never shifts the initial values of another.
Rng module_rng(std::uint64_t seed, const char* name) { return Rng(derive_seed(seed, name)); }

bool has_prefix(const std::string& name, const std::vector<std::string>& prefixes) {
  if (prefixes.empty()) return true;
  for (const auto& p : prefixes)
    if (name.compare(0, p.size(), p) == 0) return true;
  return false;
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : cfg_(config) {
  cfg_.validate();
  auto r_enc = module_rng(seed, "enc.vis");
  enc_ = VisualEncoder<T>(params_, cfg_, r_enc);
  auto r_txt = module_rng(seed, "enc.txt");
  txt_ = TextEmbedder<T>(params_, cfg_, r_txt);
  auto r_dec = module_rng(seed, "dec");
  dec_ = Decoder<T>(params_, cfg_, r_dec);
  auto r_low = module_rng(seed, "low");
  low_ = LowTask<T>(params_, cfg_, r_low);
  auto r_mim = module_rng(seed, "mim");
  mim_ = MimHead<T>(params_, cfg_, r_mim);
  auto r_high = module_rng(seed, "high");
  high_ = HighTask<T>(params_, cfg_, r_high);
}

template <typename T>
typename Model<T>::Encoded Model<T>::encode(const std::vector<float>& image) const {
  Encoded e;
  e.patches = patchify<T>(image, cfg_.image_size, cfg_.channels, cfg_.patch);
  e.f_v = enc_.encode(e.patches, nullptr, &e.maps);
  return e;
}

template <typename T>
Stage1Draw Model<T>::draw_stage1(const data::Sample& s, Rng& rng) const {
  Stage1Draw d;
  d.masked = make_mask_plan(cfg_.tokens(), cfg_.mask_rate, rng);
  d.n_p = draw_prefix_split(rng, s.tokens.size());
  d.no_vision = rng.uniform() < cfg_.no_vision_prob;
  for (const auto& e : s.entities) d.negatives.push_back(sample_negatives(rng, cfg_.positions, e.position, cfg_.negatives));
  return d;
}

template <typename T>
typename Model<T>::Stage1Loss Model<T>::stage1_loss(const data::Sample& s, const Stage1Draw& draw, double lambda,
                                                    bool use_low, bool use_mid) const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("train.lambda must be in [0, 1]");
  if (!use_low && !use_mid) throw ConfigError("stage 1 needs at least one of train.low, train.mid");
  double w_low = 1.0, w_mid = 1.0;
  if (use_low && use_mid) {
    w_low = lambda;
    w_mid = 1.0 - lambda;
  } else if (!use_low) {
    w_low = 0.0;
  } else {
    w_mid = 0.0;
  }

  Stage1Loss out;
  const auto patches = patchify<T>(s.image, cfg_.image_size, cfg_.channels, cfg_.patch);
  Tensor<T> f_v;
  if (w_low > 0.0 || (w_mid > 0.0 && !draw.no_vision)) f_v = enc_.encode(patches);

  std::vector<Tensor<T>> terms;
  if (w_low > 0.0) {
    const auto pred = low_.predict(f_v);
    std::vector<std::uint8_t> y(cfg_.entities, 0);
    for (const auto& e : s.entities) y.at(e.entity) = 1;
    out.cls = entity_existence_loss(pred.s_hat, y, cfg_.cls_literal);
    out.loc = entity_location_loss(pred.p_hat, s.entities, low_.position_table(), draw.negatives, cfg_.loc_literal);
    terms.push_back(scale(add(out.cls, out.loc), static_cast<T>(w_low)));
  }
  if (w_mid > 0.0) {
    out.plm = plm_loss(dec_, txt_, draw.no_vision ? nullptr : &f_v, s.tokens, draw.n_p);
    out.mim = mim_loss(enc_, txt_, dec_, mim_, patches, s.tokens, draw.masked);
    terms.push_back(scale(add(out.plm, out.mim), static_cast<T>(w_mid)));
  }
  out.total = terms.size() == 1 ? terms[0] : add(terms[0], terms[1]);
  return out;
}

template <typename T>
Tensor<T> Model<T>::mediator_memory(const Encoded& e, bool mediated) const {
  if (!mediated || (!cfg_.use_vdm && !cfg_.use_ldm)) return {};
  return high_.mediators(e.f_v, e.maps, txt_.table()).pooled;
}

template <typename T>
Tensor<T> Model<T>::high_loss(const Encoded& e, const std::vector<std::size_t>& tokens, bool mediated) const {
  const auto med = mediator_memory(e, mediated);
  return sequence_nll(dec_, txt_, tokens, 1, &e.f_v, AttnMask::causal(), med.defined() ? &med : nullptr);
}

template <typename T>
Tensor<T> Model<T>::high_logits(const Encoded& e, const std::vector<std::size_t>& tokens, bool mediated) const {
  const auto med = mediator_memory(e, mediated);
  const std::vector<std::size_t> inputs(tokens.begin(), tokens.end() - 1);
  const auto h = dec_.hidden(txt_.embed(inputs), &e.f_v, AttnMask::causal(), med.defined() ? &med : nullptr);
  return dec_.logits(h);
}

template <typename T>
std::vector<std::size_t> Model<T>::generate(const std::vector<float>& image, const DecodeOptions& opts,
                                            bool mediated) const {
  NoGradGuard no_grad;
  const auto e = encode(image);
  const auto med = mediator_memory(e, mediated);
  const Tensor<T>* medp = med.defined() ? &med : nullptr;
  const std::size_t max_len = std::min(opts.max_len, cfg_.n_max);

  auto next_logprobs = [&](const std::vector<std::size_t>& seq) {
    const auto h = dec_.hidden(txt_.embed(seq), &e.f_v, AttnMask::causal(), medp);
    const auto logits = dec_.logits(slice_rows(h, seq.size() - 1, 1));
    const auto x = logits.data();
    double mx = -std::numeric_limits<double>::infinity();
    for (auto v : x) mx = std::max(mx, static_cast<double>(v));
    double s = 0.0;
    for (auto v : x) s += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(s);
    std::vector<double> lp(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) lp[i] = static_cast<double>(x[i]) - lse;
    return lp;
  };

  if (!opts.beam) {
    std::vector<std::size_t> seq{data::kBos};
    while (seq.size() < max_len) {
      const auto lp = next_logprobs(seq);
      const auto best = static_cast<std::size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
      seq.push_back(best);
      if (best == data::kEos) break;
    }
    return seq;
  }

  if (opts.beam_size == 0) throw ConfigError("decode.beam_size must be positive");
  struct Hyp {
    std::vector<std::size_t> seq;
    double score = 0.0;
    bool done = false;
  };
  std::vector<Hyp> beams{{{data::kBos}, 0.0, false}};
  for (;;) {
    bool open = false;
    for (const auto& b : beams) open |= !b.done && b.seq.size() < max_len;
    if (!open) break;
    struct Cand {
      double score;
      std::size_t from, token;  // token == npos keeps a finished hypothesis
    };
    constexpr auto npos = std::numeric_limits<std::size_t>::max();
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < beams.size(); ++i) {
      if (beams[i].done || beams[i].seq.size() >= max_len) {
        cands.push_back({beams[i].score, i, npos});
        continue;
      }
      const auto lp = next_logprobs(beams[i].seq);
      for (std::size_t t = 0; t < lp.size(); ++t) cands.push_back({beams[i].score + lp[t], i, t});
    }
    const auto keep = std::min(opts.beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.from != b.from) return a.from < b.from;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& c = cands[i];
      Hyp h = beams[c.from];
      if (c.token != npos) {
        h.seq.push_back(c.token);
        h.score = c.score;
        h.done = c.token == data::kEos;
      } else {
        h.done = true;
      }
      next.push_back(std::move(h));
    }
    beams = std::move(next);
  }
  // Beams are kept sorted by score, best first.
  return beams.front().seq;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::parameters(const std::vector<std::string>& prefixes) const {
  std::vector<Tensor<T>> out;
  for (const auto& [name, t] : params_.all())
    if (has_prefix(name, prefixes)) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kMagic[] = "HTSC1\n";
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (t.data.size() != shape_numel(t.shape)) throw ShapeError("checkpoint: size mismatch for " + name);
    entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.data.size() * sizeof(float);
  }
  const nlohmann::json header{
      {"config_hash", ckpt.config_hash}, {"config", ckpt.config}, {"stage", ckpt.stage}, {"entries", entries}};
  const auto text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("checkpoint: cannot write " + path);
  out.write(kMagic, sizeof(kMagic) - 1);
  unsigned char len[8];
  std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>(n >> (8 * i));
  out.write(reinterpret_cast<const char*>(len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!out) throw FormatError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  char magic[sizeof(kMagic) - 1];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw FormatError("checkpoint: bad magic in " + path);
  unsigned char len[8];
  in.read(reinterpret_cast<char*>(len), 8);
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(len[i]) << (8 * i);
  if (!in || n > (1u << 30)) throw FormatError("checkpoint: bad header length in " + path);
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("checkpoint: truncated header in " + path);
  const auto header = nlohmann::json::parse(text);
  Checkpoint c;
  c.stage = header.at("stage");
  c.config_hash = header.at("config_hash");
  c.config = header.value("config", std::string{});
  const auto payload = static_cast<std::streamoff>(sizeof(kMagic) - 1 + 8 + n);
  for (const auto& e : header.at("entries")) {
    CheckpointTensor t;
    t.shape = e.at("shape").get<Shape>();
    t.data.resize(shape_numel(t.shape));
    in.seekg(payload + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) throw FormatError("checkpoint: truncated payload in " + path);
    const std::string name = e.at("name");
    if (!c.tensors.emplace(name, std::move(t)).second) throw FormatError("checkpoint: duplicate entry " + name);
  }
  return c;
}

template <typename T>
Checkpoint snapshot(const ParamStore<T>& params, int stage, const std::string& config_hash,
                    const std::string& config) {
  Checkpoint c;
  c.stage = stage;
  c.config_hash = config_hash;
  c.config = config;
  for (const auto& [name, t] : params.all()) {
    CheckpointTensor ct;
    ct.shape = t.shape();
    ct.data.assign(t.data().begin(), t.data().end());
    c.tensors.emplace(name, std::move(ct));
  }
  return c;
}

template <typename T>
void restore(ParamStore<T>& params, const Checkpoint& ckpt, const std::vector<std::string>& prefixes) {
  std::vector<std::string> missing;
  for (const auto& [name, t] : params.all())
    if (has_prefix(name, prefixes) && !ckpt.tensors.count(name)) missing.push_back(name);
  if (!missing.empty()) {
    std::string msg = "checkpoint lacks " + std::to_string(missing.size()) + " parameter(s):";
    for (const auto& m : missing) msg += " " + m;
    throw TransferError(msg);
  }
  for (const auto& [name, t] : params.all()) {
    if (!has_prefix(name, prefixes)) continue;
    const auto& src = ckpt.tensors.at(name);
    if (src.shape != t.shape())
      throw ShapeError("checkpoint: " + name + " has shape " + shape_str(src.shape) + ", model expects " +
                       shape_str(t.shape()));
    auto dst = t;
    auto out = dst.mutable_data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(src.data[i]);
  }
}

template class Model<float>;
template class Model<double>;
template Checkpoint snapshot<float>(const ParamStore<float>&, int, const std::string&, const std::string&);
template Checkpoint snapshot<double>(const ParamStore<double>&, int, const std::string&, const std::string&);
template void restore<float>(ParamStore<float>&, const Checkpoint&, const std::vector<std::string>&);
template void restore<double>(ParamStore<double>&, const Checkpoint&, const std::vector<std::string>&);

}  // namespace htsc

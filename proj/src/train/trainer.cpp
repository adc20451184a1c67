#include "htsc/trainer.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "htsc/errors.hpp"
#include "htsc/optim.hpp"
#include "json.hpp"

namespace htsc::train {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

ModelConfig model_config(const Config& cfg, const data::DataConfig& corpus) {
  const auto dc = data::DataConfig::from(cfg);
  auto check = [](const char* key, std::size_t want, std::size_t got) {
    if (want != got)
      throw ConfigError(std::string(key) + " = " + std::to_string(want) + " but the corpus was generated with " +
                        std::to_string(got));
  };
  check("data.image_size", dc.image_size, corpus.image_size);
  check("data.channels", dc.channels, corpus.channels);
  check("eclo.Q", dc.entities, corpus.entities);
  check("eclo.P", dc.positions, corpus.positions);
  check("data.vocab_size", dc.vocab_size, corpus.vocab_size);
  check("data.n_max", dc.n_max, corpus.n_max);
  return ModelConfig::from(cfg, corpus);
}

std::uint64_t init_seed(const Config& cfg) {
  return derive_seed(static_cast<std::uint64_t>(cfg.integer("train.seed")), "init");
}

namespace {

std::uint64_t root_seed(const Config& cfg) { return static_cast<std::uint64_t>(cfg.integer("train.seed")); }

std::vector<std::string> stage1_prefixes(bool low, bool mid) {
  std::vector<std::string> p{"enc.vis."};
  if (low) p.push_back("low.");
  if (mid) {
    p.push_back("enc.txt.");
    p.push_back("dec.");
    p.push_back("mim.");
  }
  return p;
}

std::vector<std::string> stage2_prefixes(const ModelConfig& mc, bool freeze_shared) {
  std::vector<std::string> p;
  if (!freeze_shared) p = kSharedPrefixes;
  if (mc.use_vdm || mc.use_ldm) p.push_back("med.");
  if (mc.use_vdm) p.push_back("vdm.");
  if (mc.use_ldm) p.push_back("ldm.");
  return p;
}

struct Accum {
  double total = 0.0;
  std::map<std::string, double> parts;
  std::size_t n = 0;

  void add(double loss, const std::map<std::string, double>& p = {}) {
    total += loss;
    for (const auto& [k, v] : p) parts[k] += v;
    ++n;
  }
  double mean() const { return n ? total / static_cast<double>(n) : 0.0; }
  std::map<std::string, double> part_means() const {
    auto out = parts;
    for (auto& [k, v] : out) v /= static_cast<double>(n ? n : 1);
    return out;
  }
};

template <typename T>
std::map<std::string, double> stage1_parts(const typename Model<T>::Stage1Loss& l) {
  std::map<std::string, double> p;
  if (l.cls.defined()) p["cls"] = l.cls.item();
  if (l.loc.defined()) p["loc"] = l.loc.item();
  if (l.plm.defined()) p["plm"] = l.plm.item();
  if (l.mim.defined()) p["mim"] = l.mim.item();
  return p;
}

void check_finite(double loss, int stage, std::size_t epoch, std::size_t batch, const std::string& sample) {
  if (!std::isfinite(loss))
    throw NumericError("non-finite loss in stage " + std::to_string(stage) + ", epoch " + std::to_string(epoch) +
                       ", batch " + std::to_string(batch) + " (sample " + sample + ")");
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "order", epoch));
  rng.shuffle(order.begin(), order.end());
  return order;
}

class FiniteScope {
 public:
  explicit FiniteScope(bool on) : previous_(finite_checks_enabled()) { set_finite_checks(on); }
  ~FiniteScope() { set_finite_checks(previous_); }

 private:
  bool previous_;
};

}  // namespace

StageResult train_stage1(const Config& cfg, const data::Corpus& corpus, const Progress& progress) {
  const auto mc = model_config(cfg, corpus.config);
  Model<float> model(mc, init_seed(cfg));
  const double lambda = cfg.num("train.lambda");
  const bool low = cfg.flag("train.low"), mid = cfg.flag("train.mid");
  if (!low && !mid) throw ConfigError("stage 1 needs train.low or train.mid");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("train.lambda must be in [0, 1]");
  if (corpus.train.empty() || corpus.val.empty()) throw ConfigError("stage 1 needs train and val samples");
  const FiniteScope finite(cfg.flag("train.finite_checks"));

  AdamConfig ac;
  ac.lr = cfg.num("stage1.lr");
  ac.weight_decay = cfg.num("stage1.wd");
  ac.decoupled = true;
  ac.warmup_steps = cfg.count("train.warmup_steps");
  // A level whose weight is zero is neither evaluated nor decayed.
  const bool low_on = low && (!mid || lambda > 0.0), mid_on = mid && (!low || lambda < 1.0);
  Adam<float> opt(model.parameters(stage1_prefixes(low_on, mid_on)), ac);

  const auto seed = root_seed(cfg);
  const std::size_t batch = std::max<std::size_t>(1, cfg.count("train.batch"));
  const std::size_t epochs = cfg.count("stage1.epochs");
  const auto config_text = cfg.canonical();
  const auto hash = cfg.hash_hex();

  // Held-out draws are fixed across epochs so validation losses compare.
  auto evaluate = [&](const std::vector<data::Sample>& samples, const char* tag) {
    NoGradGuard no_grad;
    Accum acc;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      Rng rng(derive_seed(seed, tag, 0, i));
      const auto draw = model.draw_stage1(samples[i], rng);
      const auto l = model.stage1_loss(samples[i], draw, lambda, low, mid);
      acc.add(l.total.item(), stage1_parts<float>(l));
    }
    return acc;
  };

  StageResult result;
  {
    const auto tr = evaluate(corpus.train, "train-eval");
    const auto va = evaluate(corpus.val, "val");
    result.log.push_back({1, 0, tr.mean(), va.mean(), tr.part_means()});
    if (progress)
      progress("stage 1 epoch 0/" + std::to_string(epochs) + " train " + fmt(tr.mean()) + " val " + fmt(va.mean()));
  }
  double best_val = std::numeric_limits<double>::infinity();
  result.best = snapshot(model.params(), 1, hash, config_text);

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto order = epoch_order(seed, epoch, corpus.train.size());
    Accum acc;
    for (std::size_t start = 0, b = 0; start < order.size(); start += batch, ++b) {
      const std::size_t end = std::min(order.size(), start + batch);
      const float inv = 1.0f / static_cast<float>(end - start);
      model.params().zero_grad();
      for (std::size_t j = start; j < end; ++j) {
        const auto& s = corpus.train[order[j]];
        Rng rng(derive_seed(seed, "draw", epoch, order[j]));
        const auto draw = model.draw_stage1(s, rng);
        const auto l = model.stage1_loss(s, draw, lambda, low, mid);
        const double v = l.total.item();
        check_finite(v, 1, epoch, b, s.id);
        acc.add(v, stage1_parts<float>(l));
        scale(l.total, inv).backward();
      }
      opt.step();
    }
    const auto va = evaluate(corpus.val, "val");
    result.log.push_back({1, epoch, acc.mean(), va.mean(), acc.part_means()});
    if (va.mean() < best_val) {
      best_val = va.mean();
      result.best_epoch = epoch;
      result.best = snapshot(model.params(), 1, hash, config_text);
    }
    if (progress)
      progress("stage 1 epoch " + std::to_string(epoch) + "/" + std::to_string(epochs) + " train " + fmt(acc.mean()) +
               " val " + fmt(va.mean()));
  }
  return result;
}

StageResult train_stage2(const Config& cfg, const data::Corpus& corpus, const Checkpoint* init,
                         const Progress& progress) {
  const auto mc = model_config(cfg, corpus.config);
  Model<float> model(mc, init_seed(cfg));
  if (init) restore(model.params(), *init, kSharedPrefixes);
  if (corpus.train.empty() || corpus.val.empty()) throw ConfigError("stage 2 needs train and val samples");
  const bool mediated = mc.use_vdm || mc.use_ldm;
  const FiniteScope finite(cfg.flag("train.finite_checks"));

  AdamConfig ac;
  ac.lr = cfg.num("stage2.lr");
  ac.weight_decay = cfg.num("stage2.wd");
  ac.decoupled = false;
  ac.warmup_steps = cfg.count("train.warmup_steps");
  Adam<float> opt(model.parameters(stage2_prefixes(mc, cfg.flag("stage2.freeze_shared"))), ac);

  const auto seed = root_seed(cfg);
  const std::size_t batch = std::max<std::size_t>(1, cfg.count("train.batch"));
  const std::size_t epochs = cfg.count("stage2.epochs");
  const auto config_text = cfg.canonical();
  const auto hash = cfg.hash_hex();

  auto evaluate = [&](const std::vector<data::Sample>& samples) {
    NoGradGuard no_grad;
    Accum acc;
    for (const auto& s : samples) acc.add(model.high_loss(model.encode(s.image), s.tokens, mediated).item());
    return acc;
  };

  StageResult result;
  {
    const auto tr = evaluate(corpus.train);
    const auto va = evaluate(corpus.val);
    result.log.push_back({2, 0, tr.mean(), va.mean(), {}});
    if (progress)
      progress("stage 2 epoch 0/" + std::to_string(epochs) + " train " + fmt(tr.mean()) + " val " + fmt(va.mean()));
  }
  double best_val = std::numeric_limits<double>::infinity();
  result.best = snapshot(model.params(), 2, hash, config_text);

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto order = epoch_order(derive_seed(seed, "stage2"), epoch, corpus.train.size());
    Accum acc;
    for (std::size_t start = 0, b = 0; start < order.size(); start += batch, ++b) {
      const std::size_t end = std::min(order.size(), start + batch);
      const float inv = 1.0f / static_cast<float>(end - start);
      model.params().zero_grad();
      for (std::size_t j = start; j < end; ++j) {
        const auto& s = corpus.train[order[j]];
        const auto l = model.high_loss(model.encode(s.image), s.tokens, mediated);
        const double v = l.item();
        check_finite(v, 2, epoch, b, s.id);
        acc.add(v);
        scale(l, inv).backward();
      }
      opt.step();
    }
    const auto va = evaluate(corpus.val);
    result.log.push_back({2, epoch, acc.mean(), va.mean(), {}});
    if (va.mean() < best_val) {
      best_val = va.mean();
      result.best_epoch = epoch;
      result.best = snapshot(model.params(), 2, hash, config_text);
    }
    if (progress)
      progress("stage 2 epoch " + std::to_string(epoch) + "/" + std::to_string(epochs) + " train " + fmt(acc.mean()) +
               " val " + fmt(va.mean()));
  }
  return result;
}

Model<float> load_model(const Checkpoint& ckpt) {
  if (ckpt.config.empty()) throw FormatError("checkpoint carries no config");
  const auto cfg = Config::parse(ckpt.config);
  const auto dc = data::DataConfig::from(cfg);
  Model<float> model(ModelConfig::from(cfg, dc), init_seed(cfg));
  restore(model.params(), ckpt);
  return model;
}

DecodeOptions decode_options(const Config& cfg) {
  DecodeOptions o;
  const auto& mode = cfg.str("decode.mode");
  if (mode != "greedy" && mode != "beam") throw ConfigError("decode.mode must be greedy or beam");
  o.beam = mode == "beam";
  o.beam_size = cfg.count("decode.beam_size");
  o.max_len = cfg.count("data.n_max");
  return o;
}

std::vector<Hypothesis> generate(const Checkpoint& ckpt, const std::vector<data::Sample>& samples,
                                 const DecodeOptions& opts) {
  const auto model = load_model(ckpt);
  const bool mediated = ckpt.stage == 2 && (model.config().use_vdm || model.config().use_ldm);
  std::vector<Hypothesis> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.id, model.generate(s.image, opts, mediated)});
  return out;
}

metrics::Tokens words(const std::vector<std::size_t>& tokens, const data::Vocab& vocab) {
  metrics::Tokens w;
  for (auto t : tokens) {
    if (t == data::kEos) break;
    if (t == data::kBos || t == data::kPad) continue;
    w.push_back(vocab.word(t));
  }
  return w;
}

void write_records(const std::string& path, const std::vector<TextRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  for (const auto& r : records) out << json{{"id", r.id}, {"tokens", r.tokens}}.dump() << '\n';
  if (!out) throw FormatError("write failed for " + path);
}

std::vector<TextRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<TextRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      TextRecord r;
      r.id = j.at("id").get<std::string>();
      const auto& t = j.at("tokens");
      if (t.is_string()) {
        r.tokens = metrics::tokenize(t.get<std::string>());
      } else {
        for (const auto& w : t) r.tokens.push_back(w.get<std::string>());
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

Report evaluate(const std::vector<TextRecord>& hyps, const std::vector<TextRecord>& refs,
                const std::vector<std::string>& metric_names, bool cider_d) {
  std::map<std::string, std::vector<metrics::Tokens>> by_id;
  for (const auto& r : refs) by_id[r.id].push_back(r.tokens);
  metrics::Corpus corpus;
  std::size_t exact = 0;
  for (const auto& h : hyps) {
    const auto it = by_id.find(h.id);
    if (it == by_id.end()) throw FormatError("no reference for id " + h.id);
    for (const auto& r : it->second)
      if (r == h.tokens) {
        ++exact;
        break;
      }
    corpus.push_back({h.tokens, it->second});
  }
  Report rep;
  rep.pairs = corpus.size();
  if (corpus.empty()) throw FormatError("evaluation corpus is empty");
  for (const auto& m : metric_names) {
    if (m == "bleu") {
      for (int n = 1; n <= 4; ++n) rep.scores["bleu" + std::to_string(n)] = metrics::bleu(corpus, n, &rep.warnings);
    } else if (m == "rouge") {
      rep.scores["rouge_l"] = metrics::rouge_l(corpus);
    } else if (m == "meteor") {
      rep.scores["meteor_lite"] = metrics::meteor_lite(corpus);
    } else if (m == "cider") {
      metrics::CiderOptions o;
      o.d_variant = cider_d;
      rep.scores[cider_d ? "cider_d" : "cider"] = metrics::cider(corpus, o, &rep.warnings);
    } else {
      throw ConfigError("unknown metric '" + m + "' (expected bleu, rouge, meteor, cider)");
    }
  }
  rep.scores["exact"] = static_cast<double>(exact) / static_cast<double>(corpus.size());
  std::sort(rep.warnings.begin(), rep.warnings.end());
  rep.warnings.erase(std::unique(rep.warnings.begin(), rep.warnings.end()), rep.warnings.end());
  return rep;
}

std::string report_json(const Report& r) {
  return json{{"pairs", r.pairs}, {"scores", r.scores}, {"warnings", r.warnings}}.dump(2) + "\n";
}

void write_log(const std::string& path, const std::vector<EpochRecord>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  for (const auto& r : log)
    out << json{{"stage", r.stage}, {"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
                {"parts", r.parts}}
               .dump()
        << '\n';
}

// ---------------------------------------------------------------------------
// Cache

namespace {

json log_to_json(const std::vector<EpochRecord>& log) {
  json a = json::array();
  for (const auto& r : log)
    a.push_back({{"stage", r.stage}, {"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
                 {"parts", r.parts}});
  return a;
}

std::vector<EpochRecord> log_from_json(const json& a) {
  std::vector<EpochRecord> log;
  for (const auto& j : a)
    log.push_back({j.at("stage").get<int>(), j.at("epoch").get<std::size_t>(), j.at("train_loss").get<double>(),
                   j.at("val_loss").get<double>(), j.at("parts").get<std::map<std::string, double>>()});
  return log;
}

std::string key_of(const std::string& text) { return hex64(fnv1a(text)); }

}  // namespace

RunCache::RunCache(std::string dir, Progress progress) : dir_(std::move(dir)), progress_(std::move(progress)) {
  fs::create_directories(dir_);
}

std::string RunCache::stage1_key(const Config& cfg, const data::Corpus& corpus) {
  // Keys that cannot influence stage 1 are reset so that stage-2 variants
  // share one pretraining run.
  const Config defaults;
  Config c = cfg;
  for (const auto& [k, v] : defaults.values())
    for (const char* p : {"stage2.", "high.", "decode.", "eval.", "vdm."})
      if (k.rfind(p, 0) == 0) c.set(k, v);
  c.set("train.high", defaults.str("train.high"));
  return key_of("stage1\n" + c.canonical() + corpus.hash);
}

std::string RunCache::stage2_key(const Config& cfg, const data::Corpus& corpus, bool pretrain) {
  return key_of("stage2\n" + cfg.canonical() + corpus.hash + (pretrain ? stage1_key(cfg, corpus) : "scratch"));
}

std::optional<StageResult> RunCache::load(const std::string& key) const {
  const auto meta = fs::path(dir_) / (key + ".json");
  const auto ckpt = fs::path(dir_) / (key + ".ckpt");
  if (!fs::exists(meta) || !fs::exists(ckpt)) return std::nullopt;
  std::ifstream in(meta);
  const auto j = json::parse(in);
  StageResult r;
  r.best_epoch = j.at("best_epoch");
  r.log = log_from_json(j.at("log"));
  r.best = load_checkpoint(ckpt.string());
  return r;
}

void RunCache::store(const std::string& key, const StageResult& r) const {
  save_checkpoint((fs::path(dir_) / (key + ".ckpt")).string(), r.best);
  std::ofstream out(fs::path(dir_) / (key + ".json"), std::ios::binary);
  out << json{{"best_epoch", r.best_epoch}, {"log", log_to_json(r.log)}}.dump() << '\n';
}

StageResult RunCache::stage1(const Config& cfg, const data::Corpus& corpus) {
  const auto key = stage1_key(cfg, corpus);
  if (auto hit = load(key)) {
    if (progress_) progress_("stage 1 cached (" + key + ")");
    return *hit;
  }
  auto r = train_stage1(cfg, corpus, progress_);
  store(key, r);
  return r;
}

StageResult RunCache::stage2(const Config& cfg, const data::Corpus& corpus, bool pretrain) {
  const auto key = stage2_key(cfg, corpus, pretrain);
  if (auto hit = load(key)) {
    if (progress_) progress_("stage 2 cached (" + key + ")");
    return *hit;
  }
  std::optional<StageResult> s1;
  if (pretrain) s1 = stage1(cfg, corpus);
  auto r = train_stage2(cfg, corpus, s1 ? &s1->best : nullptr, progress_);
  store(key, r);
  return r;
}

// ---------------------------------------------------------------------------
// Harnesses

std::vector<AblationRow> ablation_rows() {
  return {
      {"baseline", false, false, false, false, false}, {"high-only", false, false, false, true, true},
      {"mid+high", true, false, true, true, true},     {"low+high", true, true, false, true, true},
      {"low+mid", true, true, true, false, false},     {"ldm-only", true, true, true, false, true},
      {"vdm-only", true, true, true, true, false},     {"full", true, true, true, true, true},
  };
}

std::map<std::string, double> score_checkpoint(const Checkpoint& ckpt, const data::Corpus& corpus,
                                               const std::string& split) {
  const auto cfg = Config::parse(ckpt.config);
  const data::Vocab vocab(corpus.config);
  const auto& samples = corpus.split(split);
  const auto hyps = generate(ckpt, samples, decode_options(cfg));
  std::vector<TextRecord> h, r;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    h.push_back({hyps[i].id, words(hyps[i].tokens, vocab)});
    r.push_back({samples[i].id, words(samples[i].tokens, vocab)});
  }
  return evaluate(h, r, {"bleu", "rouge", "meteor", "cider"}, cfg.flag("eval.cider_d")).scores;
}

namespace {

GridResult summarize(std::string name, std::vector<std::map<std::string, double>> per_seed) {
  GridResult g{std::move(name), std::move(per_seed), {}};
  for (const auto& s : g.per_seed)
    for (const auto& [k, v] : s) g.mean[k] += v / static_cast<double>(g.per_seed.size());
  return g;
}

}  // namespace

std::vector<GridResult> run_ablation(const Config& base, const data::Corpus& corpus,
                                     const std::vector<std::uint64_t>& seeds, RunCache& cache,
                                     const Progress& progress) {
  std::vector<GridResult> out;
  for (const auto& row : ablation_rows()) {
    std::vector<std::map<std::string, double>> per_seed;
    for (auto seed : seeds) {
      Config c = base;
      c.set("train.seed", std::to_string(seed));
      c.set("train.low", row.low ? "true" : "false");
      c.set("train.mid", row.mid ? "true" : "false");
      c.set("high.vdm", row.vdm ? "true" : "false");
      c.set("high.ldm", row.ldm ? "true" : "false");
      if (progress) progress("ablation row " + row.name + " seed " + std::to_string(seed));
      const auto s2 = cache.stage2(c, corpus, row.stage1);
      per_seed.push_back(score_checkpoint(s2.best, corpus, "test"));
    }
    out.push_back(summarize(row.name, std::move(per_seed)));
  }
  return out;
}

std::vector<GridResult> run_lambda_sweep(const Config& base, const data::Corpus& corpus,
                                         const std::vector<std::uint64_t>& seeds, RunCache& cache,
                                         const Progress& progress) {
  std::vector<GridResult> out;
  for (double lambda : kLambdaGrid) {
    std::vector<std::map<std::string, double>> per_seed;
    for (auto seed : seeds) {
      Config c = base;
      c.set("train.seed", std::to_string(seed));
      c.set("train.lambda", fmt(lambda));
      if (progress) progress("lambda " + fmt(lambda) + " seed " + std::to_string(seed));
      const auto s2 = cache.stage2(c, corpus, true);
      per_seed.push_back(score_checkpoint(s2.best, corpus, "test"));
    }
    out.push_back(summarize("lambda=" + fmt(lambda), std::move(per_seed)));
  }
  return out;
}

std::string grid_csv(const std::vector<GridResult>& rows, const std::string& flag_row) {
  std::ostringstream out;
  std::vector<std::string> keys;
  if (!rows.empty())
    for (const auto& [k, v] : rows.front().mean) keys.push_back(k);
  out << "variant,seeds";
  for (const auto& k : keys) out << ',' << k;
  if (!flag_row.empty()) out << ",note";
  out << '\n';
  for (const auto& r : rows) {
    out << r.name << ',' << r.per_seed.size();
    for (const auto& k : keys) out << ',' << fmt(r.mean.at(k));
    if (!flag_row.empty()) out << ',' << (r.name == flag_row ? "shipped default" : "");
    out << '\n';
  }
  return out.str();
}

}  // namespace htsc::train

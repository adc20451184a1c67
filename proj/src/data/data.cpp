#include "htsc/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "htsc/errors.hpp"
#include "json.hpp"

namespace htsc::data {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "images.f32 is written in host order");

namespace {

const char* kEntityWords[] = {"opacity",      "nodule", "effusion",      "atelectasis",
                              "cardiomegaly", "edema",  "consolidation", "pneumothorax",
                              "mass",         "fracture", "emphysema",   "fibrosis"};
const char* kRowWords[] = {"apical", "upper", "lower", "basal"};
const char* kColWords[] = {"far_right", "right", "left", "far_left"};
const char* kFixedWords[] = {"no", "findings", "seen", "in", "and", "also", "."};

std::size_t hadamard_size(std::size_t cell_pixels) {
  std::size_t h = 1;
  while (h * 2 <= cell_pixels) h *= 2;
  return h;
}

std::size_t split_index(Split s) { return static_cast<std::size_t>(s); }

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Config

DataConfig DataConfig::from(const Config& c) {
  DataConfig d;
  d.image_size = c.count("data.image_size");
  d.channels = c.count("data.channels");
  d.entities = c.count("eclo.Q");
  d.positions = c.count("eclo.P");
  d.max_entities = c.count("data.max_entities");
  d.noise_std = c.num("data.noise_std");
  d.background = c.num("data.background");
  d.vocab_size = c.count("data.vocab_size");
  d.n_max = c.count("data.n_max");
  d.train = c.count("data.train");
  d.val = c.count("data.val");
  d.test = c.count("data.test");
  d.confound_fraction = c.num("data.confound_fraction");
  d.bias_a = c.count("data.bias_a");
  d.bias_b = c.count("data.bias_b");
  d.unique_scenes = c.flag("data.unique_scenes");
  d.validate();
  return d;
}

std::size_t DataConfig::grid() const {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(positions))));
  return g;
}

std::size_t DataConfig::cell_size() const { return image_size / grid(); }

void DataConfig::validate() const {
  const auto g = grid();
  if (positions == 0 || g * g != positions) throw ConfigError("data: eclo.P must be a square number (one position per grid cell)");
  if (image_size == 0 || image_size % g != 0) throw ConfigError("data: image_size must be divisible by the grid side");
  if (channels == 0) throw ConfigError("data: channels must be positive");
  if (entities == 0) throw ConfigError("data: eclo.Q must be positive");
  const auto cs = cell_size();
  if (entities + 1 > hadamard_size(cs * cs))
    throw ConfigError("data: cells of " + std::to_string(cs) + "x" + std::to_string(cs) +
                      " pixels hold at most " + std::to_string(hadamard_size(cs * cs) - 1) + " distinct glyphs");
  if (max_entities == 0 || max_entities > std::min(entities, positions))
    throw ConfigError("data: max_entities must be in 1..min(Q, P)");
  const std::size_t words = 3 + std::size(kFixedWords) + entities + positions;
  if (words > vocab_size)
    throw ConfigError("data: vocab_size " + std::to_string(vocab_size) + " is below the " + std::to_string(words) +
                      " words the grammar needs");
  if (n_max < std::max<std::size_t>(5, 6 * max_entities + 1))
    throw ConfigError("data: n_max too small for max_entities clauses");
  if (!(noise_std >= 0.0)) throw ConfigError("data: noise_std must be non-negative");
  if (!(background >= 0.0 && background < 0.5)) throw ConfigError("data: background must be in [0, 0.5)");
  if (!(confound_fraction >= 0.0 && confound_fraction <= 1.0))
    throw ConfigError("data: confound_fraction must be in [0, 1]");
  if (confound_fraction > 0.0) {
    if (bias_a == bias_b || bias_a >= entities || bias_b >= entities)
      throw ConfigError("data: bias pair must be two distinct entity ids");
    if (max_entities < 2) throw ConfigError("data: bias injection needs max_entities >= 2");
    if (confound_fraction < 1.0 && entities < 3)
      throw ConfigError("data: bias injection needs at least one entity outside the pair");
  }
  if (unique_scenes) {
    const double total = static_cast<double>(train + val + test);
    if (total > scene_capacity(*this))
      throw ConfigError("data: " + std::to_string(train + val + test) + " unique scenes requested but only " +
                        std::to_string(scene_capacity(*this)) + " exist");
  }
}

double scene_capacity(const DataConfig& cfg) {
  double total = 0.0;
  for (std::size_t k = 1; k <= cfg.max_entities; ++k) {
    double choose = 1.0, arrange = 1.0;
    for (std::size_t i = 0; i < k; ++i) {
      choose *= static_cast<double>(cfg.entities - i) / static_cast<double>(i + 1);
      arrange *= static_cast<double>(cfg.positions - i);
    }
    total += choose * arrange;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Vocabulary and words

std::string entity_word(std::size_t e) {
  if (e < std::size(kEntityWords)) return kEntityWords[e];
  return "entity_" + std::to_string(e);
}

std::string position_word(std::size_t p, std::size_t grid) {
  if (grid == 4) return std::string(kRowWords[p / 4]) + "_" + kColWords[p % 4];
  return "row" + std::to_string(p / grid) + "_col" + std::to_string(p % grid);
}

Vocab::Vocab(const DataConfig& cfg) {
  words_ = {"<pad>", "<bos>", "<eos>"};
  for (auto w : kFixedWords) words_.emplace_back(w);
  entity_base_ = words_.size();
  for (std::size_t e = 0; e < cfg.entities; ++e) words_.push_back(entity_word(e));
  position_base_ = words_.size();
  for (std::size_t p = 0; p < cfg.positions; ++p) words_.push_back(position_word(p, cfg.grid()));
  for (std::size_t i = 0; words_.size() < cfg.vocab_size; ++i) words_.push_back("<unused" + std::to_string(i) + ">");
}

const std::string& Vocab::word(std::size_t id) const {
  if (id >= words_.size()) throw IndexError("vocab: id " + std::to_string(id) + " out of range");
  return words_[id];
}

std::optional<std::size_t> Vocab::find(const std::string& word) const {
  auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - words_.begin());
}

std::size_t Vocab::id(const std::string& word) const {
  auto r = find(word);
  if (!r) throw IndexError("vocab: unknown word '" + word + "'");
  return *r;
}

// ---------------------------------------------------------------------------
// Scenes and rendering

std::vector<std::uint8_t> glyph(std::size_t entity, const DataConfig& cfg) {
  const auto cs = cfg.cell_size();
  const auto h = hadamard_size(cs * cs);
  std::vector<std::uint8_t> bits(cs * cs, 0);
  const auto row = entity + 1;
  for (std::size_t j = 0; j < h; ++j) bits[j] = std::popcount(row & j) % 2 == 0 ? 1 : 0;
  return bits;
}

double glyph_intensity(std::size_t entity, const DataConfig& cfg) {
  const double span = cfg.entities > 1 ? static_cast<double>(entity) / static_cast<double>(cfg.entities - 1) : 0.0;
  return 0.55 + 0.4 * span;
}

SceneSpec sample_scene(Rng& rng, const DataConfig& cfg, Split split) {
  SceneSpec s;
  const bool biased = cfg.confound_fraction > 0.0;
  std::vector<std::size_t> ents;
  auto draw_k = [&](std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(rng.below(hi - lo + 1)); };
  auto others = [&] {
    std::vector<std::size_t> pool;
    for (std::size_t e = 0; e < cfg.entities; ++e)
      if (e != cfg.bias_a && e != cfg.bias_b) pool.push_back(e);
    return pool;
  };

  if (biased && split != Split::Test) {
    s.confound_flag = rng.uniform() < cfg.confound_fraction;
    const auto pool = others();
    if (s.confound_flag) {
      const auto k = draw_k(2, std::min(cfg.max_entities, pool.size() + 2));
      ents = {cfg.bias_a, cfg.bias_b};
      for (auto i : rng.sample_without_replacement(pool.size(), k - 2)) ents.push_back(pool[i]);
    } else {
      const auto k = draw_k(1, std::min(cfg.max_entities, pool.size()));
      for (auto i : rng.sample_without_replacement(pool.size(), k)) ents.push_back(pool[i]);
    }
  } else {
    const auto k = draw_k(1, cfg.max_entities);
    ents = rng.sample_without_replacement(cfg.entities, k);
    if (biased) {
      const bool has_a = std::find(ents.begin(), ents.end(), cfg.bias_a) != ents.end();
      auto b = std::find(ents.begin(), ents.end(), cfg.bias_b);
      if (has_a && b != ents.end()) ents.erase(b);
    }
  }
  const auto pos = rng.sample_without_replacement(cfg.positions, ents.size());
  for (std::size_t i = 0; i < ents.size(); ++i) s.entities.push_back({ents[i], pos[i]});
  std::sort(s.entities.begin(), s.entities.end(),
            [](const Entity& a, const Entity& b) { return a.position < b.position; });
  return s;
}

std::vector<float> render_image(const SceneSpec& scene, const DataConfig& cfg) {
  const auto n = cfg.image_size, c = cfg.channels, g = cfg.grid(), cs = cfg.cell_size();
  std::vector<float> img(cfg.pixels());
  Rng noise(derive_seed(scene.seed, "noise"));
  for (auto& v : img) {
    const double x = cfg.background + (cfg.noise_std > 0.0 ? cfg.noise_std * noise.normal() : 0.0);
    v = static_cast<float>(std::clamp(x, 0.0, 1.0));
  }
  for (const auto& e : scene.entities) {
    if (e.entity >= cfg.entities || e.position >= cfg.positions) throw IndexError("render_image: entity out of range");
    const auto bits = glyph(e.entity, cfg);
    const auto level = static_cast<float>(glyph_intensity(e.entity, cfg));
    const auto r0 = (e.position / g) * cs, c0 = (e.position % g) * cs;
    for (std::size_t y = 0; y < cs; ++y)
      for (std::size_t x = 0; x < cs; ++x) {
        if (!bits[y * cs + x]) continue;
        float* px = &img[((r0 + y) * n + (c0 + x)) * c];
        for (std::size_t ch = 0; ch < c; ++ch) px[ch] = std::max(px[ch], level);
      }
  }
  return img;
}

std::vector<std::size_t> realize_report(const SceneSpec& scene, const Vocab& vocab, const DataConfig& cfg) {
  std::vector<std::size_t> t{kBos};
  if (scene.entities.empty()) {
    for (auto w : {"no", "findings", "."}) t.push_back(vocab.id(w));
  } else {
    auto sorted = scene.entities;
    std::sort(sorted.begin(), sorted.end(), [](const Entity& a, const Entity& b) { return a.position < b.position; });
    const auto g = cfg.grid();
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (i > 0) t.push_back(vocab.id(sorted[i].position / g == sorted[i - 1].position / g ? "and" : "also"));
      t.push_back(vocab.entity_token(sorted[i].entity));
      t.push_back(vocab.id("seen"));
      t.push_back(vocab.id("in"));
      t.push_back(vocab.position_token(sorted[i].position));
      t.push_back(vocab.id("."));
    }
  }
  t.push_back(kEos);
  return t;
}

std::optional<std::vector<Entity>> parse_report(const std::vector<std::size_t>& tokens, const Vocab& vocab,
                                                const DataConfig& cfg) {
  std::size_t b = 0, e = tokens.size();
  if (b < e && tokens[b] == kBos) ++b;
  if (e > b && tokens[e - 1] == kEos) --e;
  const std::vector<std::size_t> t(tokens.begin() + static_cast<std::ptrdiff_t>(b),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(e));
  const auto no = vocab.id("no"), findings = vocab.id("findings"), seen = vocab.id("seen"), in = vocab.id("in"),
             dot = vocab.id("."), and_ = vocab.id("and"), also = vocab.id("also");
  if (t == std::vector<std::size_t>{no, findings, dot}) return std::vector<Entity>{};

  const auto eb = vocab.entity_token(0), pb = vocab.position_token(0);
  std::vector<Entity> out;
  std::set<std::size_t> seen_entities;
  std::size_t i = 0;
  while (i < t.size()) {
    if (!out.empty()) {
      if (i >= t.size() || (t[i] != and_ && t[i] != also)) return std::nullopt;
      ++i;
    }
    if (i + 5 > t.size()) return std::nullopt;
    const auto ent = t[i], pos = t[i + 3];
    if (ent < eb || ent >= eb + cfg.entities) return std::nullopt;
    if (t[i + 1] != seen || t[i + 2] != in || t[i + 4] != dot) return std::nullopt;
    if (pos < pb || pos >= pb + cfg.positions) return std::nullopt;
    const Entity x{ent - eb, pos - pb};
    if (!out.empty()) {
      if (x.position <= out.back().position) return std::nullopt;
      const bool same_row = x.position / cfg.grid() == out.back().position / cfg.grid();
      if (t[i - 1] != (same_row ? and_ : also)) return std::nullopt;
    }
    if (!seen_entities.insert(x.entity).second) return std::nullopt;
    out.push_back(x);
    i += 5;
  }
  if (out.empty()) return std::nullopt;
  return out;
}

std::vector<Entity> detect_glyphs(const std::vector<float>& image, const DataConfig& cfg) {
  if (image.size() != cfg.pixels()) throw ShapeError("detect_glyphs: image size does not match config");
  const auto n = cfg.image_size, c = cfg.channels, g = cfg.grid(), cs = cfg.cell_size();
  const double threshold = 0.5 * (glyph_intensity(0, cfg) - cfg.background);
  std::vector<std::vector<std::uint8_t>> glyphs;
  for (std::size_t e = 0; e < cfg.entities; ++e) glyphs.push_back(glyph(e, cfg));
  const auto h = hadamard_size(cs * cs);

  std::vector<Entity> out;
  std::vector<double> cell(cs * cs);
  for (std::size_t p = 0; p < cfg.positions; ++p) {
    const auto r0 = (p / g) * cs, c0 = (p % g) * cs;
    for (std::size_t y = 0; y < cs; ++y)
      for (std::size_t x = 0; x < cs; ++x) {
        double s = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) s += image[((r0 + y) * n + (c0 + x)) * c + ch];
        cell[y * cs + x] = s / static_cast<double>(c);
      }
    double best = threshold;
    std::optional<std::size_t> best_e;
    for (std::size_t e = 0; e < cfg.entities; ++e) {
      double on = 0.0, off = 0.0;
      std::size_t non = 0, noff = 0;
      for (std::size_t j = 0; j < h; ++j) {
        if (glyphs[e][j]) {
          on += cell[j];
          ++non;
        } else {
          off += cell[j];
          ++noff;
        }
      }
      const double score = on / static_cast<double>(non) - off / static_cast<double>(noff);
      if (score > best) {
        best = score;
        best_e = e;
      }
    }
    if (best_e) out.push_back({*best_e, p});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus generation

namespace {

std::vector<Sample> generate_split_impl(const DataConfig& cfg, std::uint64_t seed, Split split,
                                        std::set<std::vector<Entity>>* unique) {
  const std::size_t count = split == Split::Train ? cfg.train : split == Split::Val ? cfg.val : cfg.test;
  const Vocab vocab(cfg);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec scene;
    for (std::size_t attempt = 0;; ++attempt) {
      const auto scene_seed = derive_seed(seed, "scene", split_index(split) * 1000003 + i, attempt);
      Rng rng(derive_seed(scene_seed, "draw"));
      scene = sample_scene(rng, cfg, split);
      scene.seed = scene_seed;
      if (!unique || unique->insert(scene.entities).second) break;
      if (attempt >= 1000)
        throw ConfigError("data: could not draw a new unique scene for " + std::string(split_name(split)) +
                          " sample " + std::to_string(i) + "; reduce split sizes");
    }
    Sample s;
    char id[32];
    std::snprintf(id, sizeof id, "%s-%06zu", split_name(split), i);
    s.id = id;
    s.split = split_name(split);
    s.image = render_image(scene, cfg);
    s.tokens = realize_report(scene, vocab, cfg);
    s.entities = scene.entities;
    out.push_back(std::move(s));
  }
  return out;
}

json data_config_json(const DataConfig& d) {
  return json{{"image_size", d.image_size},
              {"channels", d.channels},
              {"entities", d.entities},
              {"positions", d.positions},
              {"max_entities", d.max_entities},
              {"noise_std", d.noise_std},
              {"background", d.background},
              {"vocab_size", d.vocab_size},
              {"n_max", d.n_max},
              {"train", d.train},
              {"val", d.val},
              {"test", d.test},
              {"confound_fraction", d.confound_fraction},
              {"bias_a", d.bias_a},
              {"bias_b", d.bias_b},
              {"unique_scenes", d.unique_scenes}};
}

DataConfig data_config_from_json(const json& j) {
  DataConfig d;
  d.image_size = j.at("image_size");
  d.channels = j.at("channels");
  d.entities = j.at("entities");
  d.positions = j.at("positions");
  d.max_entities = j.at("max_entities");
  d.noise_std = j.at("noise_std");
  d.background = j.at("background");
  d.vocab_size = j.at("vocab_size");
  d.n_max = j.at("n_max");
  d.train = j.at("train");
  d.val = j.at("val");
  d.test = j.at("test");
  d.confound_fraction = j.at("confound_fraction");
  d.bias_a = j.at("bias_a");
  d.bias_b = j.at("bias_b");
  d.unique_scenes = j.at("unique_scenes");
  return d;
}

std::uint64_t hash_file(const std::string& path, std::uint64_t h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())), h);
  }
  return h;
}

}  // namespace

std::vector<Sample> generate_split(const DataConfig& cfg, std::uint64_t seed, Split split) {
  cfg.validate();
  return generate_split_impl(cfg, seed, split, nullptr);
}

CorpusSummary generate_corpus(const Config& config, std::uint64_t seed, const std::string& dir) {
  const auto cfg = DataConfig::from(config);
  std::filesystem::create_directories(dir);
  const Vocab vocab(cfg);
  std::set<std::vector<Entity>> unique;
  auto* uniq = cfg.unique_scenes ? &unique : nullptr;

  std::ofstream manifest(dir + "/manifest.jsonl", std::ios::binary);
  std::ofstream images(dir + "/images.f32", std::ios::binary);
  if (!manifest || !images) throw FormatError("cannot write corpus files in " + dir);
  std::uint64_t offset = 0;
  CorpusSummary summary;
  for (auto split : {Split::Train, Split::Val, Split::Test}) {
    const auto samples = generate_split_impl(cfg, seed, split, uniq);
    for (const auto& s : samples) {
      json ents = json::array();
      for (const auto& e : s.entities) ents.push_back({e.entity, e.position});
      json line{{"id", s.id},
                {"split", s.split},
                {"shape", {cfg.image_size, cfg.image_size, cfg.channels}},
                {"tokens", s.tokens},
                {"entities", ents},
                {"image_file", "images.f32"},
                {"byte_offset", offset}};
      manifest << line.dump() << "\n";
      images.write(reinterpret_cast<const char*>(s.image.data()),
                   static_cast<std::streamsize>(s.image.size() * sizeof(float)));
      offset += s.image.size() * sizeof(float);
    }
    (split == Split::Train ? summary.train : split == Split::Val ? summary.val : summary.test) = samples.size();
  }
  manifest.close();
  images.close();

  const json dcfg = data_config_json(cfg);
  summary.config_hash = hex64(fnv1a(dcfg.dump()));
  std::ofstream(dir + "/vocab.json") << json(vocab.words()).dump(1) << "\n";
  json meta{{"counts", {{"train", summary.train}, {"val", summary.val}, {"test", summary.test}}},
            {"grammar_version", kGrammarVersion},
            {"generator_seed", seed},
            {"config_hash", summary.config_hash},
            {"data_config", dcfg},
            {"vocab_size", vocab.size()}};
  std::ofstream(dir + "/corpus_meta.json") << meta.dump(2) << "\n";
  return summary;
}

const std::vector<Sample>& Corpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

std::string file_hash(const std::string& path) { return hex64(hash_file(path, fnv1a(""))); }

Corpus load_corpus(const std::string& dir) {
  std::ifstream meta_in(dir + "/corpus_meta.json");
  if (!meta_in) throw FormatError("corpus: missing " + dir + "/corpus_meta.json");
  const auto meta = json::parse(meta_in);
  if (meta.at("grammar_version") != kGrammarVersion) throw FormatError("corpus: unsupported grammar version");
  Corpus c;
  c.config = data_config_from_json(meta.at("data_config"));
  c.config.validate();

  std::ifstream images(dir + "/images.f32", std::ios::binary);
  std::ifstream manifest(dir + "/manifest.jsonl");
  if (!images || !manifest) throw FormatError("corpus: missing manifest or image file in " + dir);
  std::string line;
  std::set<std::string> ids;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    Sample s;
    s.id = j.at("id");
    s.split = j.at("split");
    if (!ids.insert(s.id).second) throw FormatError("corpus: duplicate id " + s.id);
    s.tokens = j.at("tokens").get<std::vector<std::size_t>>();
    for (const auto& e : j.at("entities")) s.entities.push_back({e.at(0), e.at(1)});
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape != std::vector<std::size_t>{c.config.image_size, c.config.image_size, c.config.channels})
      throw FormatError("corpus: image shape of " + s.id + " does not match the config");
    s.image.resize(c.config.pixels());
    images.seekg(static_cast<std::streamoff>(j.at("byte_offset").get<std::uint64_t>()));
    images.read(reinterpret_cast<char*>(s.image.data()), static_cast<std::streamsize>(s.image.size() * sizeof(float)));
    if (!images) throw FormatError("corpus: truncated image data for " + s.id);
    for (auto t : s.tokens)
      if (t >= c.config.vocab_size) throw FormatError("corpus: token id out of range in " + s.id);
    if (s.split == "train") c.train.push_back(std::move(s));
    else if (s.split == "val") c.val.push_back(std::move(s));
    else if (s.split == "test") c.test.push_back(std::move(s));
    else throw FormatError("corpus: unknown split " + s.split);
  }
  c.hash = hex64(hash_file(dir + "/images.f32", hash_file(dir + "/manifest.jsonl", fnv1a(""))));
  return c;
}

}  // namespace htsc::data

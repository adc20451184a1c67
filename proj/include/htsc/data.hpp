#pragma once

// Synthetic image/report corpus: entities drawn as orthogonal binary glyphs in
// grid cells, reports realized from a small fixed grammar.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "htsc/config.hpp"
#include "htsc/rng.hpp"

namespace htsc::data {

inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kBos = 1;
inline constexpr std::size_t kEos = 2;
inline constexpr const char* kGrammarVersion = "g1";

struct DataConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t entities = 12;   // Q
  std::size_t positions = 16;  // P, a square number: one position per grid cell
  std::size_t max_entities = 3;
  double noise_std = 0.05;
  double background = 0.1;
  std::size_t vocab_size = 128;
  std::size_t n_max = 40;
  std::size_t train = 512, val = 64, test = 64;
  double confound_fraction = 0.25;
  std::size_t bias_a = 0, bias_b = 1;
  bool unique_scenes = false;

  static DataConfig from(const Config& c);
  /// Throws ConfigError on inconsistent settings.
  void validate() const;

  std::size_t grid() const;       // cells per side
  std::size_t cell_size() const;  // pixels per cell side
  std::size_t pixels() const { return image_size * image_size * channels; }
};

struct Entity {
  std::size_t entity;
  std::size_t position;
  auto operator<=>(const Entity&) const = default;
};

struct SceneSpec {
  std::vector<Entity> entities;  // sorted by position
  bool confound_flag = false;
  std::uint64_t seed = 0;
};

struct Sample {
  std::string id;
  std::string split;
  std::vector<float> image;  // [H x W x C] row-major
  std::vector<std::size_t> tokens;
  std::vector<Entity> entities;
};

enum class Split { Train, Val, Test };
const char* split_name(Split s);

class Vocab {
 public:
  explicit Vocab(const DataConfig& cfg);
  std::size_t size() const { return words_.size(); }
  const std::string& word(std::size_t id) const;
  std::size_t id(const std::string& word) const;  // IndexError if absent
  std::optional<std::size_t> find(const std::string& word) const;
  const std::vector<std::string>& words() const { return words_; }

  std::size_t entity_token(std::size_t e) const { return entity_base_ + e; }
  std::size_t position_token(std::size_t p) const { return position_base_ + p; }

 private:
  std::vector<std::string> words_;
  std::size_t entity_base_ = 0, position_base_ = 0;
};

std::string entity_word(std::size_t e);
std::string position_word(std::size_t p, std::size_t grid);

/// Sylvester-Hadamard row `e + 1` over the cell's pixels, as 0/1.
std::vector<std::uint8_t> glyph(std::size_t entity, const DataConfig& cfg);
double glyph_intensity(std::size_t entity, const DataConfig& cfg);

/// Scene draw for one sample. The bias pair is forced together (train/val,
/// with the confound flag) or split apart (test).
SceneSpec sample_scene(Rng& rng, const DataConfig& cfg, Split split);

std::vector<float> render_image(const SceneSpec& scene, const DataConfig& cfg);

/// Full token sequence BOS ... EOS.
std::vector<std::size_t> realize_report(const SceneSpec& scene, const Vocab& vocab, const DataConfig& cfg);

/// Inverse grammar. Accepts the sequence with or without BOS/EOS; returns
/// nullopt if the tokens are not a sentence of the grammar.
std::optional<std::vector<Entity>> parse_report(const std::vector<std::size_t>& tokens, const Vocab& vocab,
                                                const DataConfig& cfg);

/// Entities recovered from pixels by correlating each cell with every glyph.
std::vector<Entity> detect_glyphs(const std::vector<float>& image, const DataConfig& cfg);

/// Number of distinct scenes the sampler can produce (ignoring the bias
/// constraint), as a double to avoid overflow.
double scene_capacity(const DataConfig& cfg);

struct CorpusSummary {
  std::size_t train = 0, val = 0, test = 0;
  std::string config_hash;
};

/// Generates all splits and writes manifest.jsonl, images.f32, vocab.json and
/// corpus_meta.json into `dir`.
CorpusSummary generate_corpus(const Config& config, std::uint64_t seed, const std::string& dir);

/// In-memory generation of one split (used by tests and by generate_corpus).
std::vector<Sample> generate_split(const DataConfig& cfg, std::uint64_t seed, Split split);

struct Corpus {
  DataConfig config;
  std::vector<Sample> train, val, test;
  std::string hash;  // FNV-1a over the manifest and image bytes

  const std::vector<Sample>& split(const std::string& name) const;
};

Corpus load_corpus(const std::string& dir);

/// FNV-1a of a file's bytes, hex encoded.
std::string file_hash(const std::string& path);

}  // namespace htsc::data

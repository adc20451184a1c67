#pragma once

// Two-stage training, generation, evaluation and the ablation harnesses.
// Every random choice is drawn from a named sub-stream of train.seed, so a
// run is a pure function of (config, corpus).

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "htsc/config.hpp"
#include "htsc/data.hpp"
#include "htsc/metrics.hpp"
#include "htsc/model.hpp"

namespace htsc::train {

using Progress = std::function<void(const std::string&)>;

struct EpochRecord {
  int stage = 1;
  std::size_t epoch = 0;  // 0: before the first update
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::map<std::string, double> parts;  // per-sample means of the loss components (train)
};

struct StageResult {
  Checkpoint best;  // weights at the best validation epoch
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> log;
};

/// Model dimensions from the run config and the corpus it trains on.
/// ConfigError when the config's data.* keys disagree with the corpus.
ModelConfig model_config(const Config& cfg, const data::DataConfig& corpus);

std::uint64_t init_seed(const Config& cfg);

/// Stage 1: lambda * L_low + (1 - lambda) * L_mid with AdamW.
/// NumericError names the epoch, batch and sample ids on a non-finite loss.
StageResult train_stage1(const Config& cfg, const data::Corpus& corpus, const Progress& progress = {});

/// Stage 2: L_high with Adam (L2 decay). `init` carries the shared weights
/// (enc.*, dec.*); null starts from the initializer, as in the ablation rows
/// without pretraining.
StageResult train_stage2(const Config& cfg, const data::Corpus& corpus, const Checkpoint* init,
                         const Progress& progress = {});

/// Rebuilds a model from a checkpoint and the config stored in it.
Model<float> load_model(const Checkpoint& ckpt);

struct Hypothesis {
  std::string id;
  std::vector<std::size_t> tokens;  // BOS ... EOS as decoded
};

DecodeOptions decode_options(const Config& cfg);

/// Decodes every sample. Stage-2 checkpoints use the mediators enabled in
/// their config; stage-1 checkpoints decode with the plain decoder.
std::vector<Hypothesis> generate(const Checkpoint& ckpt, const std::vector<data::Sample>& samples,
                                 const DecodeOptions& opts);

/// Words of a token sequence, without BOS/EOS/PAD.
metrics::Tokens words(const std::vector<std::size_t>& tokens, const data::Vocab& vocab);

struct TextRecord {
  std::string id;
  metrics::Tokens tokens;
};

void write_records(const std::string& path, const std::vector<TextRecord>& records);
std::vector<TextRecord> read_records(const std::string& path);

struct Report {
  std::map<std::string, double> scores;
  std::size_t pairs = 0;
  std::vector<std::string> warnings;
};

/// Pairs hypotheses with references by id. Metric names: bleu, rouge,
/// meteor, cider; "exact" (whole-sequence match rate) is always included.
Report evaluate(const std::vector<TextRecord>& hyps, const std::vector<TextRecord>& refs,
                const std::vector<std::string>& metric_names, bool cider_d = false);
std::string report_json(const Report& r);

void write_log(const std::string& path, const std::vector<EpochRecord>& log);

/// Stage results cached under `dir`, keyed by the config entries that can
/// affect the stage and by the corpus hash. A cache hit skips training.
class RunCache {
 public:
  explicit RunCache(std::string dir, Progress progress = {});

  StageResult stage1(const Config& cfg, const data::Corpus& corpus);
  /// `pretrain` false starts stage 2 from the initializer.
  StageResult stage2(const Config& cfg, const data::Corpus& corpus, bool pretrain);

  static std::string stage1_key(const Config& cfg, const data::Corpus& corpus);
  static std::string stage2_key(const Config& cfg, const data::Corpus& corpus, bool pretrain);

 private:
  std::optional<StageResult> load(const std::string& key) const;
  void store(const std::string& key, const StageResult& r) const;

  std::string dir_;
  Progress progress_;
};

struct AblationRow {
  std::string name;
  bool stage1 = true, low = true, mid = true, vdm = true, ldm = true;
};

/// baseline, high-only, mid+high, low+high, low+mid, LDM-only, VDM-only, full.
std::vector<AblationRow> ablation_rows();

struct GridResult {
  std::string name;
  std::vector<std::map<std::string, double>> per_seed;
  std::map<std::string, double> mean;
};

/// Trains and scores every row for each seed in `seeds` on the test split.
std::vector<GridResult> run_ablation(const Config& base, const data::Corpus& corpus,
                                     const std::vector<std::uint64_t>& seeds, RunCache& cache,
                                     const Progress& progress = {});

inline const std::vector<double> kLambdaGrid = {0.0, 0.1, 0.25, 0.5, 0.9};

/// Full two-stage runs for each lambda; rows are named "lambda=<v>".
std::vector<GridResult> run_lambda_sweep(const Config& base, const data::Corpus& corpus,
                                         const std::vector<std::uint64_t>& seeds, RunCache& cache,
                                         const Progress& progress = {});

/// Scores for a trained checkpoint on one split (greedy or per config).
std::map<std::string, double> score_checkpoint(const Checkpoint& ckpt, const data::Corpus& corpus,
                                               const std::string& split);

std::string grid_csv(const std::vector<GridResult>& rows, const std::string& flag_row = {});

/// Shortest decimal that round-trips a double; used by every text artifact.
std::string fmt(double v);

}  // namespace htsc::train

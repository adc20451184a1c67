#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "htsc/tasks.hpp"

namespace htsc {

/// Per-sample random choices for one stage-1 step.
struct Stage1Draw {
  std::vector<std::size_t> masked;                   // MIM plan
  std::size_t n_p = 1;                               // PLM prefix split
  bool no_vision = false;                            // PLM without F_v
  std::vector<std::vector<std::size_t>> negatives;   // one set per present entity
};

struct DecodeOptions {
  bool beam = false;
  std::size_t beam_size = 3;
  std::size_t max_len = 40;  // including BOS and EOS
};

/// Every parameter of every level. Which ones train depends on the stage.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  struct Encoded {
    Tensor<T> patches;
    Tensor<T> f_v;
    AttentionMaps<T> maps;
  };

  Encoded encode(const std::vector<float>& image) const;

  Stage1Draw draw_stage1(const data::Sample& s, Rng& rng) const;

  struct Stage1Loss {
    Tensor<T> cls, loc, plm, mim;  // undefined when the level is skipped
    Tensor<T> total;
  };

  /// lambda * L_low + (1 - lambda) * L_mid. A disabled level, or one whose
  /// weight is zero, is not evaluated; a single enabled level gets weight 1.
  Stage1Loss stage1_loss(const data::Sample& s, const Stage1Draw& draw, double lambda, bool use_low,
                         bool use_mid) const;

  /// Stage-2 loss: causal NLL over the full report with mediator memory.
  /// `mediated` false gives the plain decoder (identical to PLM with n_p = 1).
  Tensor<T> high_loss(const Encoded& e, const std::vector<std::size_t>& tokens, bool mediated) const;

  /// Logits [n-1 x V] for teacher-forced inputs tokens[0..n-2].
  Tensor<T> high_logits(const Encoded& e, const std::vector<std::size_t>& tokens, bool mediated) const;

  /// Token sequence starting with BOS, ending with EOS or at max_len.
  std::vector<std::size_t> generate(const std::vector<float>& image, const DecodeOptions& opts, bool mediated) const;

  /// Parameters whose names start with any of `prefixes`.
  std::vector<Tensor<T>> parameters(const std::vector<std::string>& prefixes) const;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  const VisualEncoder<T>& encoder() const { return enc_; }
  const TextEmbedder<T>& text() const { return txt_; }
  const Decoder<T>& decoder() const { return dec_; }
  const LowTask<T>& low() const { return low_; }
  const MimHead<T>& mim() const { return mim_; }
  const HighTask<T>& high() const { return high_; }

 private:
  Tensor<T> mediator_memory(const Encoded& e, bool mediated) const;

  ModelConfig cfg_;
  ParamStore<T> params_;
  VisualEncoder<T> enc_;
  TextEmbedder<T> txt_;
  Decoder<T> dec_;
  LowTask<T> low_;
  MimHead<T> mim_;
  HighTask<T> high_;
};

/// Parameter prefixes carried from stage 1 into stage 2.
inline const std::vector<std::string> kSharedPrefixes = {"enc.", "dec."};

struct CheckpointTensor {
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  int stage = 1;
  std::string config_hash;
  std::string config;  // canonical config text the model was built from
  std::map<std::string, CheckpointTensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
Checkpoint snapshot(const ParamStore<T>& params, int stage, const std::string& config_hash,
                    const std::string& config = {});

/// Copies checkpoint values into every parameter matching `prefixes` (all
/// parameters when empty). Throws TransferError naming any parameter the
/// checkpoint lacks, ShapeError on shape mismatch.
template <typename T>
void restore(ParamStore<T>& params, const Checkpoint& ckpt, const std::vector<std::string>& prefixes = {});

}  // namespace htsc

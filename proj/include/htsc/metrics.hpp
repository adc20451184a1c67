#pragma once

// Corpus-level caption metrics: BLEU-1..4, ROUGE-L, a resource-free METEOR
// and CIDEr. Inputs are pre-tokenized; `tokenize` is the shared rule.

#include <string>
#include <string_view>
#include <vector>

namespace htsc::metrics {

using Tokens = std::vector<std::string>;

struct TokenizedPair {
  Tokens candidate;
  std::vector<Tokens> references;
};

using Corpus = std::vector<TokenizedPair>;

/// Lowercases, splits on whitespace and makes every ASCII punctuation
/// character except '_' its own token.
Tokens tokenize(std::string_view text);
std::string detokenize(const Tokens& tokens);

/// Optional sink for non-fatal diagnostics (degenerate corpora).
using Warnings = std::vector<std::string>;

inline constexpr double kBleuEpsilon = 1e-9;

/// Corpus BLEU with uniform weights over orders 1..n.
double bleu(const Corpus& corpus, int n, Warnings* warnings = nullptr);

/// Modified precision p_n before the geometric mean (for inspection).
double bleu_precision(const Corpus& corpus, int n);
double brevity_penalty(const Corpus& corpus);

double rouge_l(const Corpus& corpus, double beta = 1.2);

struct MeteorDetail {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double precision = 0.0;
  double recall = 0.0;
  double score = 0.0;
};

MeteorDetail meteor_pair(const Tokens& candidate, const Tokens& reference, double alpha = 0.9,
                         double gamma = 0.5);
double meteor_lite(const Corpus& corpus, double alpha = 0.9, double gamma = 0.5);

struct CiderOptions {
  bool d_variant = false;  // gaussian length penalty and clipping
  double sigma = 6.0;
};

double cider(const Corpus& corpus, const CiderOptions& options = {}, Warnings* warnings = nullptr);

}  // namespace htsc::metrics

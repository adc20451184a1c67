#include "htsc/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

#include "htsc/errors.hpp"

namespace htsc::metrics {

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c) && c != '_') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::string detokenize(const Tokens& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s.push_back(' ');
    s += t;
  }
  return s;
}

namespace {

using NgramCounts = std::map<Tokens, double>;

NgramCounts ngrams(const Tokens& t, std::size_t n) {
  NgramCounts out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) out[Tokens(t.begin() + i, t.begin() + i + n)] += 1.0;
  return out;
}

void check_pairs(const Corpus& corpus) {
  for (const auto& p : corpus)
    if (p.references.empty()) throw ShapeError("metrics: every pair needs at least one reference");
}

struct NgramTotals {
  double matched = 0.0;
  double total = 0.0;
};

NgramTotals bleu_totals(const Corpus& corpus, std::size_t n) {
  NgramTotals t;
  for (const auto& p : corpus) {
    const auto cand = ngrams(p.candidate, n);
    NgramCounts max_ref;
    for (const auto& r : p.references)
      for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : cand) {
      auto it = max_ref.find(g);
      t.matched += std::min(c, it == max_ref.end() ? 0.0 : it->second);
      t.total += c;
    }
  }
  return t;
}

}  // namespace

double bleu_precision(const Corpus& corpus, int n) {
  check_pairs(corpus);
  const auto t = bleu_totals(corpus, static_cast<std::size_t>(n));
  if (t.total == 0.0) return kBleuEpsilon;
  if (t.matched == 0.0) return kBleuEpsilon / t.total;
  return t.matched / t.total;
}

double brevity_penalty(const Corpus& corpus) {
  check_pairs(corpus);
  double c = 0.0, r = 0.0;
  for (const auto& p : corpus) {
    const double len = static_cast<double>(p.candidate.size());
    c += len;
    double best = std::numeric_limits<double>::infinity();
    double best_diff = best;
    for (const auto& ref : p.references) {
      const double rl = static_cast<double>(ref.size());
      const double diff = std::abs(rl - len);
      if (diff < best_diff || (diff == best_diff && rl < best)) {
        best_diff = diff;
        best = rl;
      }
    }
    r += best;
  }
  if (c == 0.0) return 0.0;
  return c > r ? 1.0 : std::exp(1.0 - r / c);
}

double bleu(const Corpus& corpus, int n, Warnings* warnings) {
  if (n < 1 || n > 4) throw ConfigError("bleu: order must be in 1..4");
  check_pairs(corpus);
  std::size_t cand_tokens = 0;
  for (const auto& p : corpus) cand_tokens += p.candidate.size();
  if (cand_tokens == 0) {
    if (warnings) warnings->push_back("bleu: corpus has no candidate tokens; score is 0");
    return 0.0;
  }
  double log_sum = 0.0;
  for (int k = 1; k <= n; ++k) log_sum += std::log(bleu_precision(corpus, k));
  return brevity_penalty(corpus) * std::exp(log_sum / n);
}

namespace {

std::size_t lcs(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double rouge_l(const Corpus& corpus, double beta) {
  check_pairs(corpus);
  if (corpus.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : corpus) {
    double prec = 0.0, rec = 0.0;
    for (const auto& r : p.references) {
      const double l = static_cast<double>(lcs(p.candidate, r));
      if (!p.candidate.empty()) prec = std::max(prec, l / static_cast<double>(p.candidate.size()));
      if (!r.empty()) rec = std::max(rec, l / static_cast<double>(r.size()));
    }
    if (prec > 0.0 && rec > 0.0) total += (1 + beta * beta) * prec * rec / (rec + beta * beta * prec);
  }
  return total / static_cast<double>(corpus.size());
}

MeteorDetail meteor_pair(const Tokens& candidate, const Tokens& reference, double alpha, double gamma) {
  MeteorDetail d;
  std::vector<bool> used(reference.size(), false);
  // Left-to-right over the candidate; a token that can continue the current
  // chunk takes the adjacent reference slot, otherwise the leftmost free one.
  std::size_t last = std::numeric_limits<std::size_t>::max();
  bool in_chunk = false;
  for (const auto& tok : candidate) {
    std::size_t pick = std::numeric_limits<std::size_t>::max();
    if (in_chunk && last + 1 < reference.size() && !used[last + 1] && reference[last + 1] == tok) {
      pick = last + 1;
    } else {
      for (std::size_t j = 0; j < reference.size(); ++j)
        if (!used[j] && reference[j] == tok) {
          pick = j;
          break;
        }
    }
    if (pick == std::numeric_limits<std::size_t>::max()) {
      in_chunk = false;
      continue;
    }
    used[pick] = true;
    ++d.matches;
    if (!(in_chunk && pick == last + 1)) ++d.chunks;
    last = pick;
    in_chunk = true;
  }
  if (d.matches == 0) return d;
  const double m = static_cast<double>(d.matches);
  d.precision = m / static_cast<double>(candidate.size());
  d.recall = m / static_cast<double>(reference.size());
  const double fmean = d.precision * d.recall / (alpha * d.precision + (1 - alpha) * d.recall);
  const double frag = static_cast<double>(d.chunks) / m;
  d.score = fmean * (1.0 - gamma * frag * frag * frag);
  return d;
}

double meteor_lite(const Corpus& corpus, double alpha, double gamma) {
  check_pairs(corpus);
  if (corpus.empty()) return 0.0;
  double total = 0.0;
  for (const auto& p : corpus) {
    double best = 0.0;
    for (const auto& r : p.references) best = std::max(best, meteor_pair(p.candidate, r, alpha, gamma).score);
    total += best;
  }
  return total / static_cast<double>(corpus.size());
}

double cider(const Corpus& corpus, const CiderOptions& options, Warnings* warnings) {
  check_pairs(corpus);
  if (corpus.empty()) return 0.0;
  if (corpus.size() < 2 && warnings)
    warnings->push_back("cider: single-document corpus; idf is degenerate and the score is 0");

  constexpr std::size_t kMaxN = 4;
  // Document frequency: each pair's reference set is one document.
  std::map<Tokens, double> df;
  for (const auto& p : corpus) {
    std::set<Tokens> seen;
    for (const auto& r : p.references)
      for (std::size_t n = 1; n <= kMaxN; ++n)
        for (const auto& [g, c] : ngrams(r, n)) seen.insert(g);
    for (const auto& g : seen) df[g] += 1.0;
  }
  const double log_docs = std::log(static_cast<double>(corpus.size()));

  struct Vec {
    std::map<Tokens, double> w;
    double norm = 0.0;
  };
  auto vectorize = [&](const Tokens& t, std::size_t n) {
    Vec v;
    for (const auto& [g, c] : ngrams(t, n)) {
      auto it = df.find(g);
      const double idf = log_docs - std::log(std::max(1.0, it == df.end() ? 0.0 : it->second));
      v.w[g] = c * idf;
      v.norm += v.w[g] * v.w[g];
    }
    v.norm = std::sqrt(v.norm);
    return v;
  };

  double total = 0.0;
  for (const auto& p : corpus) {
    double score = 0.0;
    for (std::size_t n = 1; n <= kMaxN; ++n) {
      const auto cv = vectorize(p.candidate, n);
      double per_n = 0.0;
      for (const auto& r : p.references) {
        const auto rv = vectorize(r, n);
        double dot = 0.0;
        for (const auto& [g, w] : cv.w) {
          auto it = rv.w.find(g);
          if (it == rv.w.end()) continue;
          dot += options.d_variant ? std::min(w, it->second) * it->second : w * it->second;
        }
        double val = (cv.norm > 0.0 && rv.norm > 0.0) ? dot / (cv.norm * rv.norm) : 0.0;
        if (options.d_variant) {
          const double delta = static_cast<double>(p.candidate.size()) - static_cast<double>(r.size());
          val *= std::exp(-delta * delta / (2.0 * options.sigma * options.sigma));
        }
        per_n += val;
      }
      score += per_n / static_cast<double>(p.references.size());
    }
    total += 10.0 * score / static_cast<double>(kMaxN);
  }
  return total / static_cast<double>(corpus.size());
}

}  // namespace htsc::metrics

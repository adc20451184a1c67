#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "htsc/errors.hpp"
#include "htsc/metrics.hpp"
#include "htsc/rng.hpp"

using namespace htsc::metrics;

namespace {

TokenizedPair pair(const char* cand, std::vector<const char*> refs) {
  TokenizedPair p{tokenize(cand), {}};
  for (auto r : refs) p.references.push_back(tokenize(r));
  return p;
}

Corpus random_corpus(htsc::Rng& rng, std::size_t pairs) {
  const char* vocab[] = {"a", "b", "c", "d", "e", "f", "g"};
  auto sentence = [&](std::size_t len) {
    Tokens t;
    for (std::size_t i = 0; i < len; ++i) t.push_back(vocab[rng.below(7)]);
    return t;
  };
  Corpus c;
  for (std::size_t i = 0; i < pairs; ++i) {
    TokenizedPair p;
    p.candidate = sentence(3 + rng.below(6));
    const auto nref = 1 + rng.below(3);
    for (std::size_t r = 0; r < nref; ++r) p.references.push_back(sentence(3 + rng.below(6)));
    c.push_back(p);
  }
  return c;
}

}  // namespace

TEST_CASE("tokenizer") {
  CHECK(tokenize("Opacity seen in Apical_Right.") == Tokens{"opacity", "seen", "in", "apical_right", "."});
  CHECK(tokenize("  a,b  ") == Tokens{"a", ",", "b"});
  CHECK(tokenize("").empty());
  CHECK(detokenize({"no", "findings", "."}) == "no findings .");
}

TEST_CASE("bleu: identity corpus scores 1") {
  Corpus c{pair("a b c d e", {"a b c d e"}), pair("x y z w", {"x y z w", "q"})};
  CHECK(bleu(c, 4) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bleu: hand unigram count") {
  Corpus c{pair("a b c", {"a b d"})};
  CHECK(brevity_penalty(c) == 1.0);
  CHECK(bleu(c, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("bleu: clipping and brevity") {
  Corpus c{pair("the the the", {"the cat"})};
  CHECK(bleu_precision(c, 1) == doctest::Approx(1.0 / 3.0));
  Corpus short_c{pair("a b", {"a b c d"})};
  CHECK(brevity_penalty(short_c) == doctest::Approx(std::exp(1.0 - 2.0)));
  // Closest reference length, ties to the shorter one.
  Corpus tie{pair("a b c", {"a b", "a b c d"})};
  CHECK(brevity_penalty(tie) == 1.0);
}

TEST_CASE("bleu: no overlap sits at the epsilon floor") {
  Corpus c{pair("a b c", {"x y z"})};
  CHECK(bleu(c, 1) <= kBleuEpsilon);
  CHECK(bleu(c, 1) > 0.0);
}

TEST_CASE("bleu: empty candidates give 0 with a warning") {
  Corpus c{pair("", {"a b"})};
  Warnings w;
  CHECK(bleu(c, 4, &w) == 0.0);
  CHECK(w.size() == 1);
  Warnings w2;
  CHECK(bleu({}, 2, &w2) == 0.0);
  CHECK(w2.size() == 1);
  CHECK_THROWS_AS(bleu(c, 5), htsc::ConfigError);
  CHECK_THROWS_AS(bleu({TokenizedPair{{"a"}, {}}}, 1), htsc::ShapeError);
}

TEST_CASE("bleu: non-increasing in n when BP = 1") {
  htsc::Rng rng(11);
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const auto c = random_corpus(rng, 1 + rng.below(5));
    if (brevity_penalty(c) != 1.0) continue;
    ++checked;
    for (int n = 2; n <= 4; ++n) CHECK(bleu(c, n) <= bleu(c, n - 1) * (1 + 1e-12));
  }
  CHECK(checked > 50);
}

TEST_CASE("rouge-l") {
  CHECK(rouge_l({pair("a b c", {"a b c"})}) == doctest::Approx(1.0));
  const double expect = (1 + 1.44) * 0.75 * 1.0 / (1.0 + 1.44 * 0.75);
  CHECK(rouge_l({pair("a b c d", {"a c d"})}) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(expect == doctest::Approx(1.83 / 2.08).epsilon(1e-12));
  CHECK(rouge_l({pair("a b", {"c d"})}) == 0.0);
}

TEST_CASE("meteor-lite") {
  const auto id = meteor_pair(tokenize("a b c d"), tokenize("a b c d"));
  CHECK(id.matches == 4);
  CHECK(id.chunks == 1);
  CHECK(id.score == doctest::Approx(1.0 - 0.5 / 64.0).epsilon(1e-12));
  CHECK(id.score == doctest::Approx(0.9922).epsilon(1e-4));

  CHECK(meteor_pair(tokenize("a b"), tokenize("c d")).score == 0.0);

  const auto rev = meteor_pair(tokenize("d c b a"), tokenize("a b c d"));
  CHECK(rev.matches == 4);
  CHECK(rev.chunks == 4);
  CHECK(rev.score == doctest::Approx(0.5).epsilon(1e-12));

  // Repeated token: extending the open chunk beats the leftmost slot.
  const auto rep = meteor_pair(tokenize("x a"), tokenize("a x a"));
  CHECK(rep.chunks == 1);

  // F_mean with alpha = 0.9: P = 1, R = 0.5.
  const auto part = meteor_pair(tokenize("a b"), tokenize("a b c d"));
  const double fmean = 0.5 / (0.9 * 1.0 + 0.1 * 0.5);
  CHECK(part.score == doctest::Approx(fmean * (1 - 0.5 / 8.0)).epsilon(1e-12));

  CHECK(meteor_lite({pair("a b", {"x y", "a b"})}) == doctest::Approx(1.0 - 0.5 / 8.0));
}

TEST_CASE("cider: identity and orthogonal corpora") {
  Corpus id{pair("opacity seen in apex .", {"opacity seen in apex ."}),
            pair("nodule seen in base on the left", {"nodule seen in base on the left"}),
            pair("no findings at all here", {"no findings at all here"})};
  CHECK(cider(id) == doctest::Approx(10.0).epsilon(1e-12));
  Corpus none{pair("p q r s", {"a b c d"}), pair("t u v w", {"e f g h"})};
  CHECK(cider(none) == 0.0);
}

TEST_CASE("cider: three-pair fixture against hand tf-idf") {
  Corpus c{pair("a b c", {"a b d"}), pair("e f", {"e g h"}), pair("x y", {"z w"})};
  // Every n-gram has df <= 1, so every weight is ln 3 and the cosines are
  // pure overlap ratios: pair 1 gives 2/3 (unigrams) and 1/2 (bigrams),
  // pair 2 gives 1/sqrt(6) for unigrams, pair 3 nothing.
  const double p1 = 10.0 * (2.0 / 3.0 + 0.5) / 4.0;
  const double p2 = 10.0 * (1.0 / std::sqrt(6.0)) / 4.0;
  CHECK(std::abs(cider(c) - (p1 + p2) / 3.0) <= 1e-9);
}

TEST_CASE("cider: shared n-grams lose weight") {
  // "seen" occurs in every document, so its idf is 0.
  Corpus c{pair("seen", {"a seen"}), pair("b seen", {"b seen"})};
  Warnings w;
  const double v = cider(c, {}, &w);
  CHECK(w.empty());
  // Pair 1 candidate vector is all zero; pair 2: unigram cosine 1, bigram 1.
  CHECK(v == doctest::Approx((0.0 + 10.0 * 2.0 / 4.0) / 2.0));
}

TEST_CASE("cider: single document warns; D variant penalizes length") {
  Warnings w;
  CHECK(cider({pair("a b", {"a b"})}, {}, &w) == 0.0);
  CHECK(w.size() == 1);
  Corpus c{pair("a b c", {"a b c d e f g h i"}), pair("x y", {"x y"})};
  CHECK(cider(c, {true, 6.0}) < cider(c));
  Corpus id{pair("a b c d", {"a b c d"}), pair("w x y z", {"w x y z"})};
  CHECK(cider(id, {true, 6.0}) == doctest::Approx(10.0));
}

TEST_CASE("metrics are invariant to pair order and within range") {
  htsc::Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    auto c = random_corpus(rng, 6);
    const double b = bleu(c, 4), r = rouge_l(c), m = meteor_lite(c), ci = cider(c);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
    CHECK(ci >= 0.0);
    rng.shuffle(c.begin(), c.end());
    CHECK(bleu(c, 4) == doctest::Approx(b).epsilon(1e-12));
    CHECK(rouge_l(c) == doctest::Approx(r).epsilon(1e-12));
    CHECK(meteor_lite(c) == doctest::Approx(m).epsilon(1e-12));
    CHECK(cider(c) == doctest::Approx(ci).epsilon(1e-12));
  }
}

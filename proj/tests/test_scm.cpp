#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "htsc/errors.hpp"
#include "htsc/scm.hpp"

using namespace htsc;
using namespace htsc::scm;

namespace {

using Table = std::vector<std::vector<double>>;

std::vector<double> random_row(Rng& rng, std::size_t card) {
  std::vector<double> row(card);
  double s = 0.0;
  for (auto& v : row) s += (v = 0.05 + rng.uniform());
  double r = 0.0;
  for (std::size_t i = 0; i + 1 < card; ++i) r += (row[i] /= s);
  row[card - 1] = 1.0 - r;
  return row;
}

Table random_table(Rng& rng, std::size_t rows, std::size_t card) {
  Table t;
  for (std::size_t i = 0; i < rows; ++i) t.push_back(random_row(rng, card));
  return t;
}

void check_normalized(const Dist& d) {
  CHECK(std::abs(d.total() - 1.0) <= 1e-9);
  for (double p : d.probs) CHECK(p >= 0.0);
}

// Canonical binary front-door model with its raw tables kept for the oracle.
struct Canonical {
  Table pz, px, pm, py;  // P(z), P(x|z), P(m|x), P(y|m,z)
  DiscreteScm scm;

  explicit Canonical(std::uint64_t seed) {
    Rng rng(seed);
    pz = random_table(rng, 1, 2);
    px = random_table(rng, 2, 2);
    pm = random_table(rng, 2, 2);
    py = random_table(rng, 4, 2);
    scm.add_node("Z", 2, {}, pz);
    scm.add_node("X", 2, {"Z"}, px);
    scm.add_node("M", 2, {"X"}, pm);
    scm.add_node("Y", 2, {"M", "Z"}, py);
  }

  // P(Y=y | do(X=x)) = sum_z P(z) sum_m P(m|x) P(y|m,z).
  double truth(std::size_t x, std::size_t y) const {
    double s = 0.0;
    for (std::size_t z = 0; z < 2; ++z)
      for (std::size_t m = 0; m < 2; ++m) s += pz[0][z] * pm[x][m] * py[m * 2 + z][y];
    return s;
  }
};

}  // namespace

TEST_CASE("observational: independent Y reads its table") {
  DiscreteScm s;
  s.add_node("X", 2, {}, {{0.4, 0.6}});
  s.add_node("Y", 2, {"X"}, {{0.3, 0.7}, {0.3, 0.7}});
  const auto d = observational(s, "Y", {{"X", 0}});
  CHECK(d.probs[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(d.probs[1] == doctest::Approx(0.7).epsilon(1e-12));
  check_normalized(d);
}

TEST_CASE("observational: deterministic chain gives a point mass") {
  DiscreteScm s;
  s.add_node("X", 2, {}, {{0.5, 0.5}});
  s.add_node("M", 2, {"X"}, {{1, 0}, {0, 1}});
  s.add_node("Y", 2, {"M"}, {{1, 0}, {0, 1}});
  const auto d = observational(s, "Y", {{"X", 1}});
  CHECK(d.probs[0] == 0.0);
  CHECK(d.probs[1] == 1.0);
}

TEST_CASE("observational: random 4-node model matches direct joint summation") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    // A -> B, A -> C, {B, C} -> D with cards 2, 3, 2, 3.
    const auto ta = random_table(rng, 1, 2), tb = random_table(rng, 2, 3), tc = random_table(rng, 2, 2),
               td = random_table(rng, 6, 3);
    DiscreteScm s;
    s.add_node("A", 2, {}, ta);
    s.add_node("B", 3, {"A"}, tb);
    s.add_node("C", 2, {"A"}, tc);
    s.add_node("D", 3, {"B", "C"}, td);
    for (std::size_t b = 0; b < 3; ++b) {
      std::vector<double> num(3, 0.0);
      double den = 0.0;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t d = 0; d < 3; ++d) {
            const double p = ta[0][a] * tb[a][b] * tc[a][c] * td[b * 2 + c][d];
            num[d] += p;
            den += p;
          }
      const auto got = observational(s, "D", {{"B", b}});
      for (std::size_t d = 0; d < 3; ++d) CHECK(std::abs(got.probs[d] - num[d] / den) <= 1e-12);
      check_normalized(got);
    }
  }
}

TEST_CASE("observational: zero-probability conditioning throws") {
  DiscreteScm s;
  s.add_node("X", 2, {}, {{1.0, 0.0}});
  s.add_node("Y", 2, {"X"}, {{0.5, 0.5}, {0.5, 0.5}});
  CHECK_THROWS_AS(observational(s, "Y", {{"X", 1}}), UndefinedConditional);
}

TEST_CASE("model construction validates tables") {
  DiscreteScm s;
  s.add_node("X", 2, {}, {{0.5, 0.5}});
  CHECK_THROWS_AS(s.add_node("Y", 2, {"X"}, {{0.5, 0.5}}), ShapeError);
  CHECK_THROWS_AS(s.add_node("Y", 2, {"X"}, {{0.5, 0.6}, {0.5, 0.5}}), ConfigError);
  CHECK_THROWS_AS(s.add_node("Y", 2, {"Q"}, {{0.5, 0.5}}), IndexError);
  CHECK_THROWS_AS(s.add_node("X", 2, {}, {{0.5, 0.5}}), ConfigError);
  CHECK_THROWS_AS(s.add_node("Y", 9, {}, {std::vector<double>(9, 1.0 / 9)}), ConfigError);
}

TEST_CASE("surgery: exogenous X equals conditioning") {
  Rng rng(3);
  DiscreteScm s;
  s.add_node("X", 3, {}, random_table(rng, 1, 3));
  s.add_node("Y", 2, {"X"}, random_table(rng, 3, 2));
  for (std::size_t x = 0; x < 3; ++x) {
    const auto a = surgery_intervene(s, {{"X", x}}, "Y");
    const auto b = observational(s, "Y", {{"X", x}});
    CHECK(a.max_abs_diff(b) <= 1e-15);
  }
}

TEST_CASE("surgery: intervening on a causally irrelevant node leaves the marginal") {
  Rng rng(4);
  DiscreteScm s;
  s.add_node("Z", 2, {}, random_table(rng, 1, 2));
  s.add_node("X", 2, {"Z"}, random_table(rng, 2, 2));
  s.add_node("Y", 2, {"Z"}, random_table(rng, 2, 2));
  const auto marginal = observational(s, "Y", {});
  for (std::size_t x = 0; x < 2; ++x) CHECK(surgery_intervene(s, {{"X", x}}, "Y").max_abs_diff(marginal) <= 1e-15);
  // Conditioning, by contrast, does move Y here.
  CHECK(observational(s, "Y", {{"X", 0}}).max_abs_diff(marginal) > 1e-6);
}

TEST_CASE("surgery: random model matches hand enumeration of the mutilated graph") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Canonical c(seed);
    for (std::size_t x = 0; x < 2; ++x) {
      const auto d = surgery_intervene(c.scm, {{"X", x}}, "Y");
      for (std::size_t y = 0; y < 2; ++y) CHECK(std::abs(d.probs[y] - c.truth(x, y)) <= 1e-12);
      check_normalized(d);
    }
  }
}

TEST_CASE("backdoor: vacuous and empty adjustment sets") {
  Rng rng(5);
  DiscreteScm s;
  s.add_node("Z", 2, {}, random_table(rng, 1, 2));
  s.add_node("X", 2, {}, random_table(rng, 1, 2));
  s.add_node("Y", 3, {"X"}, random_table(rng, 2, 3));
  for (std::size_t x = 0; x < 2; ++x) {
    const auto obs = observational(s, "Y", {{"X", x}});
    CHECK(backdoor_adjust(s, "X", x, "Y", {"Z"}).max_abs_diff(obs) <= 1e-12);
    CHECK(backdoor_adjust(s, "X", x, "Y", {}).max_abs_diff(obs) <= 1e-12);
  }
}

TEST_CASE("backdoor: confounded model equals surgery") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed + 1000);
    DiscreteScm s;
    const auto pz = random_table(rng, 1, 2), px = random_table(rng, 2, 2), py = random_table(rng, 4, 2);
    s.add_node("Z", 2, {}, pz);
    s.add_node("X", 2, {"Z"}, px);
    s.add_node("Y", 2, {"X", "Z"}, py);
    for (std::size_t x = 0; x < 2; ++x) {
      const auto bd = backdoor_adjust(s, "X", x, "Y", {"Z"});
      CHECK(bd.max_abs_diff(surgery_intervene(s, {{"X", x}}, "Y")) <= 1e-10);
      // Independent oracle: sum_z P(z) P(y | x, z) straight from the tables.
      for (std::size_t y = 0; y < 2; ++y) {
        const double t = pz[0][0] * py[x * 2 + 0][y] + pz[0][1] * py[x * 2 + 1][y];
        CHECK(std::abs(bd.probs[y] - t) <= 1e-12);
      }
      check_normalized(bd);
    }
  }
}

TEST_CASE("backdoor: empty stratum is reported") {
  DiscreteScm s;
  s.add_node("Z", 2, {}, {{0.5, 0.5}});
  s.add_node("X", 2, {"Z"}, {{1.0, 0.0}, {0.5, 0.5}});
  s.add_node("Y", 2, {"X", "Z"}, {{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}});
  CHECK_THROWS_AS(backdoor_adjust(s, "X", 1, "Y", {"Z"}), NonIdentifiable);
}

TEST_CASE("criterion: textbook graph and its breaches") {
  auto base = [](bool z_to_m, bool x_to_y) {
    DiscreteScm s;
    s.add_node("Z", 2, {}, {{0.5, 0.5}});
    s.add_node("X", 2, {"Z"}, {{0.5, 0.5}, {0.5, 0.5}});
    std::vector<std::string> mp{"X"};
    if (z_to_m) mp.push_back("Z");
    s.add_node("M", 2, mp, Table(z_to_m ? 4 : 2, {0.5, 0.5}));
    std::vector<std::string> yp{"M", "Z"};
    if (x_to_y) yp.push_back("X");
    s.add_node("Y", 2, yp, Table(x_to_y ? 8 : 4, {0.5, 0.5}));
    return s;
  };
  const auto ok = verify_frontdoor_criterion(base(false, false), "X", "M", "Y");
  CHECK(ok.satisfied);
  CHECK(ok.violations.empty());

  const auto zm = verify_frontdoor_criterion(base(true, false), "X", "M", "Y");
  CHECK_FALSE(zm.satisfied);
  bool has2 = false;
  for (const auto& v : zm.violations)
    if (v.clause == 2) {
      has2 = true;
      CHECK(v.path == "X <- Z -> M");
    }
  CHECK(has2);

  const auto xy = verify_frontdoor_criterion(base(false, true), "X", "M", "Y");
  CHECK_FALSE(xy.satisfied);
  bool has1 = false;
  for (const auto& v : xy.violations)
    if (v.clause == 1) {
      has1 = true;
      CHECK(v.path == "X -> Y");
    }
  CHECK(has1);
  CHECK_THROWS_AS(frontdoor_adjust(base(false, true), "X", 0, "M", "Y"), CriterionViolation);
  CHECK(xy.summary().find("X -> Y") != std::string::npos);
}

TEST_CASE("criterion: collider on the mediator back-door stays blocked") {
  // M <- U -> C <- Y: C is a collider, so the M-Y back-door through U is closed.
  DiscreteScm s;
  s.add_node("Z", 2, {}, {{0.5, 0.5}});
  s.add_node("X", 2, {"Z"}, Table(2, {0.5, 0.5}));
  s.add_node("U", 2, {}, {{0.5, 0.5}});
  s.add_node("M", 2, {"X", "U"}, Table(4, {0.5, 0.5}));
  s.add_node("Y", 2, {"M", "Z"}, Table(4, {0.5, 0.5}));
  s.add_node("C", 2, {"U", "Y"}, Table(4, {0.5, 0.5}));
  CHECK(verify_frontdoor_criterion(s, "X", "M", "Y").satisfied);
}

TEST_CASE("frontdoor: constant confounder collapses to conditioning") {
  Rng rng(8);
  DiscreteScm s;
  s.add_node("Z", 1, {}, {{1.0}});
  s.add_node("X", 2, {"Z"}, random_table(rng, 1, 2));
  s.add_node("M", 3, {"X"}, random_table(rng, 2, 3));
  s.add_node("Y", 2, {"M", "Z"}, random_table(rng, 3, 2));
  for (std::size_t x = 0; x < 2; ++x)
    CHECK(frontdoor_adjust(s, "X", x, "M", "Y").max_abs_diff(observational(s, "Y", {{"X", x}})) <= 1e-12);
}

TEST_CASE("frontdoor: canonical model equals surgery across 200 seeds") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Canonical c(seed + 50000);
    CptAccessCounter counter;
    const auto data = ObservedJoint::observe(c.scm, {"X", "M", "Y"});
    c.scm.attach_counter(&counter);
    for (std::size_t x = 0; x < 2; ++x) {
      const auto fd = frontdoor_adjust(c.scm, data, "X", x, "M", "Y");
      for (std::size_t y = 0; y < 2; ++y) worst = std::max(worst, std::abs(fd.probs[y] - c.truth(x, y)));
      check_normalized(fd);
    }
    CHECK(counter.reads[c.scm.index("Z")] == 0);
    c.scm.attach_counter(nullptr);
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("frontdoor: mediator copy of X reduces to P(Y | M = x)") {
  Rng rng(9);
  DiscreteScm s;
  s.add_node("Z", 2, {}, random_table(rng, 1, 2));
  s.add_node("X", 2, {"Z"}, random_table(rng, 2, 2));
  s.add_node("M", 2, {"X"}, {{1, 0}, {0, 1}});
  const auto py = random_table(rng, 2, 2);
  s.add_node("Y", 2, {"M"}, py);
  for (std::size_t x = 0; x < 2; ++x) {
    const auto fd = frontdoor_adjust(s, "X", x, "M", "Y");
    for (std::size_t y = 0; y < 2; ++y) CHECK(std::abs(fd.probs[y] - py[x][y]) <= 1e-12);
  }
}

TEST_CASE("frontdoor: random generator models and the access counter") {
  const auto s = verify_random_models(300, 17);
  CHECK(s.trials == 300);
  CHECK(s.failures == 0);
  CHECK(s.max_abs_error <= 1e-10);
  CHECK(s.max_backdoor_abs_error <= 1e-10);
  CHECK(s.confounder_reads == 0);
}

TEST_CASE("frontdoor: generated models satisfy the criterion") {
  Rng rng(21);
  for (int i = 0; i < 100; ++i) {
    const auto s = random_frontdoor_scm(rng);
    const auto r = verify_frontdoor_criterion(s, "X", "M", "Y");
    INFO(r.summary());
    CHECK(r.satisfied);
  }
}

TEST_CASE("observed joint: marginals and errors") {
  Canonical c(1);
  const auto j = ObservedJoint::observe(c.scm, {"X", "Y"});
  CHECK(std::abs(j.prob({}) - 1.0) <= 1e-12);
  CHECK(std::abs(j.prob({{"X", 0}}) + j.prob({{"X", 1}}) - 1.0) <= 1e-12);
  CHECK_THROWS_AS(j.prob({{"Z", 0}}), IndexError);
  CHECK_THROWS_AS(ObservedJoint({"A"}, {2}, {0.5}), ShapeError);
}

TEST_CASE("dirichlet tables and random models are well formed") {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto t = dirichlet_cpt(rng, 4, 5);
    for (const auto& row : t) {
      double sum = 0.0;
      for (double v : row) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
    const auto s = random_scm(rng, 6, 4, 0.5);
    CHECK(s.size() == 6);
    check_normalized(observational(s, "V5", {}));
  }
}

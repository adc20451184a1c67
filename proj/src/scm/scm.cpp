#include "htsc/scm.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>

#include "htsc/errors.hpp"

namespace htsc::scm {

double Dist::total() const { return std::accumulate(probs.begin(), probs.end(), 0.0); }

double Dist::max_abs_diff(const Dist& other) const {
  if (probs.size() != other.probs.size()) throw ShapeError("Dist: support sizes differ");
  double m = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) m = std::max(m, std::abs(probs[i] - other.probs[i]));
  return m;
}

// ---------------------------------------------------------------------------
// DiscreteScm

std::size_t DiscreteScm::add_node(const std::string& name, std::size_t card,
                                  const std::vector<std::string>& parents,
                                  std::vector<std::vector<double>> cpt) {
  if (names_.size() >= kMaxNodes) throw ConfigError("scm: at most 8 nodes supported");
  if (card == 0 || card > kMaxCard) throw ConfigError("scm: cardinality of " + name + " must be in 1..8");
  if (std::find(names_.begin(), names_.end(), name) != names_.end())
    throw ConfigError("scm: duplicate node " + name);
  std::vector<std::size_t> pidx;
  std::size_t rows = 1;
  for (const auto& p : parents) {
    pidx.push_back(index(p));
    rows *= cards_[pidx.back()];
  }
  if (cpt.size() != rows)
    throw ShapeError("scm: " + name + " needs " + std::to_string(rows) + " CPT rows, got " +
                     std::to_string(cpt.size()));
  std::vector<double> flat;
  flat.reserve(rows * card);
  for (const auto& row : cpt) {
    if (row.size() != card) throw ShapeError("scm: CPT row length must equal cardinality for " + name);
    double s = 0.0;
    for (double v : row) {
      if (!(v >= 0.0)) throw ConfigError("scm: negative CPT entry in " + name);
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw ConfigError("scm: CPT row of " + name + " does not sum to 1");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  names_.push_back(name);
  cards_.push_back(card);
  parents_.push_back(std::move(pidx));
  cpts_.push_back(std::move(flat));
  if (counter_) counter_->reads.resize(names_.size(), 0);
  return names_.size() - 1;
}

std::size_t DiscreteScm::index(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw IndexError("scm: unknown variable " + name);
  return static_cast<std::size_t>(it - names_.begin());
}

std::vector<std::size_t> DiscreteScm::children(std::size_t node) const {
  std::vector<std::size_t> out;
  for (std::size_t n = 0; n < size(); ++n)
    if (std::find(parents_[n].begin(), parents_[n].end(), node) != parents_[n].end()) out.push_back(n);
  return out;
}

bool DiscreteScm::has_edge(std::size_t from, std::size_t to) const {
  const auto& p = parents_.at(to);
  return std::find(p.begin(), p.end(), from) != p.end();
}

std::size_t DiscreteScm::parent_configs(std::size_t node) const {
  std::size_t rows = 1;
  for (auto p : parents_.at(node)) rows *= cards_[p];
  return rows;
}

std::span<const double> DiscreteScm::cpt_row(std::size_t node, std::span<const std::size_t> values) const {
  std::size_t row = 0;
  for (auto p : parents_[node]) row = row * cards_[p] + values[p];
  if (counter_) ++counter_->reads[node];
  return std::span<const double>(cpts_[node]).subspan(row * cards_[node], cards_[node]);
}

void DiscreteScm::attach_counter(CptAccessCounter* counter) const {
  counter_ = counter;
  if (counter_) counter_->reads.assign(size(), 0);
}

DiscreteScm DiscreteScm::mutilated(const Assignment& interventions) const {
  DiscreteScm out = *this;
  for (const auto& [var, value] : interventions) {
    const auto n = index(var);
    if (value >= cards_[n]) throw IndexError("scm: intervention value out of range for " + var);
    out.parents_[n].clear();
    out.cpts_[n].assign(cards_[n], 0.0);
    out.cpts_[n][value] = 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// ObservedJoint

ObservedJoint::ObservedJoint(std::vector<std::string> vars, std::vector<std::size_t> cards,
                             std::vector<double> probs)
    : vars_(std::move(vars)), cards_(std::move(cards)), probs_(std::move(probs)) {
  std::size_t n = 1;
  for (auto c : cards_) n *= c;
  if (vars_.size() != cards_.size() || probs_.size() != n)
    throw ShapeError("ObservedJoint: table size does not match variable cardinalities");
}

ObservedJoint ObservedJoint::observe(const DiscreteScm& scm, const std::vector<std::string>& vars) {
  std::vector<std::size_t> idx, cards;
  std::size_t n = 1;
  for (const auto& v : vars) {
    idx.push_back(scm.index(v));
    cards.push_back(scm.card(idx.back()));
    n *= cards.back();
  }
  std::vector<double> probs(n, 0.0);
  scm.for_each_assignment([&](std::span<const std::size_t> values, double p) {
    std::size_t cell = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) cell = cell * cards[i] + values[idx[i]];
    probs[cell] += p;
  });
  return ObservedJoint(vars, std::move(cards), std::move(probs));
}

std::size_t ObservedJoint::position(const std::string& var) const {
  auto it = std::find(vars_.begin(), vars_.end(), var);
  if (it == vars_.end()) throw IndexError("ObservedJoint: variable not observed: " + var);
  return static_cast<std::size_t>(it - vars_.begin());
}

std::size_t ObservedJoint::card(const std::string& var) const { return cards_[position(var)]; }

double ObservedJoint::prob(const Assignment& event) const {
  std::vector<int> fixed(vars_.size(), -1);
  for (const auto& [var, value] : event) fixed[position(var)] = static_cast<int>(value);
  double total = 0.0;
  std::vector<std::size_t> values(vars_.size(), 0);
  for (std::size_t cell = 0; cell < probs_.size(); ++cell) {
    std::size_t rem = cell;
    bool match = true;
    for (std::size_t i = vars_.size(); i-- > 0;) {
      values[i] = rem % cards_[i];
      rem /= cards_[i];
      if (fixed[i] >= 0 && values[i] != static_cast<std::size_t>(fixed[i])) match = false;
    }
    if (match) total += probs_[cell];
  }
  return total;
}

// ---------------------------------------------------------------------------
// Queries

namespace {

std::vector<std::pair<std::size_t, std::size_t>> resolve(const DiscreteScm& scm, const Assignment& a) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& [var, value] : a) {
    const auto n = scm.index(var);
    if (value >= scm.card(n)) throw IndexError("scm: value out of range for " + var);
    out.emplace_back(n, value);
  }
  return out;
}

std::string describe(const Assignment& a) {
  std::ostringstream os;
  bool first = true;
  for (const auto& [var, value] : a) {
    os << (first ? "" : ", ") << var << "=" << value;
    first = false;
  }
  return os.str();
}

}  // namespace

Dist observational(const DiscreteScm& scm, const std::string& target, const Assignment& given) {
  const auto t = scm.index(target);
  const auto cond = resolve(scm, given);
  Dist out{target, std::vector<double>(scm.card(t), 0.0)};
  double z = 0.0;
  scm.for_each_assignment([&](std::span<const std::size_t> values, double p) {
    for (const auto& [n, v] : cond)
      if (values[n] != v) return;
    out.probs[values[t]] += p;
    z += p;
  });
  if (!(z > 0.0)) throw UndefinedConditional("P(" + describe(given) + ") = 0");
  for (auto& p : out.probs) p /= z;
  return out;
}

Dist surgery_intervene(const DiscreteScm& scm, const Assignment& interventions, const std::string& target) {
  resolve(scm, interventions);
  return observational(scm.mutilated(interventions), target, {});
}

Dist backdoor_adjust(const DiscreteScm& scm, const std::string& treatment, std::size_t x,
                     const std::string& target, const std::vector<std::string>& adjust_set) {
  const auto xi = scm.index(treatment);
  const auto yi = scm.index(target);
  if (x >= scm.card(xi)) throw IndexError("backdoor_adjust: treatment value out of range");
  std::vector<std::size_t> zi;
  std::size_t strata = 1;
  for (const auto& z : adjust_set) {
    zi.push_back(scm.index(z));
    strata *= scm.card(zi.back());
  }
  const std::size_t ycard = scm.card(yi);
  // Tables indexed by z-stratum: P(z), P(x, z), P(x, z, y).
  std::vector<double> pz(strata, 0.0), pxz(strata, 0.0), pxzy(strata * ycard, 0.0);
  scm.for_each_assignment([&](std::span<const std::size_t> values, double p) {
    std::size_t s = 0;
    for (auto n : zi) s = s * scm.card(n) + values[n];
    pz[s] += p;
    if (values[xi] == x) {
      pxz[s] += p;
      pxzy[s * ycard + values[yi]] += p;
    }
  });
  Dist out{target, std::vector<double>(ycard, 0.0)};
  for (std::size_t s = 0; s < strata; ++s) {
    if (!(pz[s] > 0.0)) continue;
    if (!(pxz[s] > 0.0)) {
      std::ostringstream os;
      os << "backdoor_adjust: P(" << treatment << "=" << x << ", stratum " << s << " of {";
      for (std::size_t i = 0; i < adjust_set.size(); ++i) os << (i ? "," : "") << adjust_set[i];
      os << "}) = 0 while the stratum has positive probability";
      throw NonIdentifiable(os.str());
    }
    for (std::size_t y = 0; y < ycard; ++y) out.probs[y] += pxzy[s * ycard + y] / pxz[s] * pz[s];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Front-door criterion

std::string CriterionReport::summary() const {
  if (satisfied) return "front-door criterion satisfied";
  std::ostringstream os;
  os << "front-door criterion violated:";
  for (const auto& v : violations) os << " [" << v.clause << "] " << v.path << ";";
  return os.str();
}

namespace {

struct PathStep {
  std::size_t node;
  bool forward;  // edge from previous node into this node
};

// All simple paths in the skeleton from `from` to `to`.
void simple_paths(const DiscreteScm& scm, std::size_t from, std::size_t to,
                  std::vector<std::vector<PathStep>>& out) {
  std::vector<PathStep> path{{from, true}};
  std::vector<bool> on_path(scm.size(), false);
  on_path[from] = true;
  std::function<void(std::size_t)> walk = [&](std::size_t cur) {
    if (cur == to) {
      out.push_back(path);
      return;
    }
    for (std::size_t n = 0; n < scm.size(); ++n) {
      if (on_path[n]) continue;
      bool fwd = scm.has_edge(cur, n);
      bool back = scm.has_edge(n, cur);
      if (!fwd && !back) continue;
      on_path[n] = true;
      path.push_back({n, fwd});
      walk(n);
      path.pop_back();
      on_path[n] = false;
    }
  };
  walk(from);
}

std::vector<std::set<std::size_t>> descendants(const DiscreteScm& scm) {
  std::vector<std::set<std::size_t>> out(scm.size());
  for (std::size_t n = scm.size(); n-- > 0;) {
    for (auto c : scm.children(n)) {
      out[n].insert(c);
      out[n].insert(out[c].begin(), out[c].end());
    }
  }
  return out;
}

bool blocked(const std::vector<PathStep>& path, const std::set<std::size_t>& cond,
             const std::vector<std::set<std::size_t>>& desc) {
  for (std::size_t i = 1; i + 1 < path.size(); ++i) {
    const bool into_from_left = path[i].forward;        // prev -> node
    const bool into_from_right = !path[i + 1].forward;  // node <- next
    const std::size_t n = path[i].node;
    if (into_from_left && into_from_right) {
      bool opened = cond.count(n) > 0;
      for (auto d : desc[n]) opened |= cond.count(d) > 0;
      if (!opened) return true;
    } else if (cond.count(n)) {
      return true;
    }
  }
  return false;
}

std::string render(const DiscreteScm& scm, const std::vector<PathStep>& path) {
  std::string s = scm.name(path[0].node);
  for (std::size_t i = 1; i < path.size(); ++i)
    s += (path[i].forward ? " -> " : " <- ") + scm.name(path[i].node);
  return s;
}

}  // namespace

CriterionReport verify_frontdoor_criterion(const DiscreteScm& scm, const std::string& treatment,
                                           const std::string& mediator, const std::string& target) {
  const auto x = scm.index(treatment), m = scm.index(mediator), y = scm.index(target);
  const auto desc = descendants(scm);
  CriterionReport report;
  auto flag = [&](int clause, const std::vector<PathStep>& p) {
    report.satisfied = false;
    report.violations.push_back({clause, render(scm, p)});
  };

  std::vector<std::vector<PathStep>> xy;
  simple_paths(scm, x, y, xy);
  for (const auto& p : xy) {
    const bool directed = std::all_of(p.begin() + 1, p.end(), [](const PathStep& s) { return s.forward; });
    if (!directed) continue;
    const bool via_m = std::any_of(p.begin(), p.end(), [m](const PathStep& s) { return s.node == m; });
    if (!via_m) flag(1, p);
  }

  std::vector<std::vector<PathStep>> xm;
  simple_paths(scm, x, m, xm);
  for (const auto& p : xm)
    if (p.size() > 1 && !p[1].forward && !blocked(p, {}, desc)) flag(2, p);

  std::vector<std::vector<PathStep>> my;
  simple_paths(scm, m, y, my);
  for (const auto& p : my)
    if (p.size() > 1 && !p[1].forward && !blocked(p, {x}, desc)) flag(3, p);

  return report;
}

Dist frontdoor_adjust(const DiscreteScm& structure, const ObservedJoint& data, const std::string& treatment,
                      std::size_t x, const std::string& mediator, const std::string& target) {
  const auto report = verify_frontdoor_criterion(structure, treatment, mediator, target);
  if (!report.satisfied) throw CriterionViolation(report.summary());
  const std::size_t xcard = data.card(treatment), mcard = data.card(mediator), ycard = data.card(target);
  if (x >= xcard) throw IndexError("frontdoor_adjust: treatment value out of range");
  const double px = data.prob({{treatment, x}});
  if (!(px > 0.0)) throw UndefinedConditional("frontdoor_adjust: P(" + treatment + "=" + std::to_string(x) + ") = 0");

  Dist out{target, std::vector<double>(ycard, 0.0)};
  for (std::size_t mv = 0; mv < mcard; ++mv) {
    const double pm_given_x = data.prob({{treatment, x}, {mediator, mv}}) / px;
    if (pm_given_x == 0.0) continue;
    for (std::size_t xh = 0; xh < xcard; ++xh) {
      const double pxh = data.prob({{treatment, xh}});
      if (pxh == 0.0) continue;
      // An empty (x', m) cell leaves P(y | x', m) undefined; it is replaced by
      // the pooled P(y | m), which is exact whenever Y depends on X only via M.
      Assignment cell{{treatment, xh}, {mediator, mv}};
      double pxm = data.prob(cell);
      if (!(pxm > 0.0)) {
        cell.erase(treatment);
        pxm = data.prob(cell);
      }
      for (std::size_t yv = 0; yv < ycard; ++yv) {
        cell[target] = yv;
        out.probs[yv] += pm_given_x * pxh * data.prob(cell) / pxm;
      }
    }
  }
  return out;
}

Dist frontdoor_adjust(const DiscreteScm& scm, const std::string& treatment, std::size_t x,
                      const std::string& mediator, const std::string& target) {
  return frontdoor_adjust(scm, ObservedJoint::observe(scm, {treatment, mediator, target}), treatment, x,
                          mediator, target);
}

// ---------------------------------------------------------------------------
// Random models

std::vector<std::vector<double>> dirichlet_cpt(Rng& rng, std::size_t rows, std::size_t card, double alpha) {
  std::vector<std::vector<double>> out(rows, std::vector<double>(card));
  for (auto& row : out) {
    double s = 0.0;
    for (auto& v : row) s += (v = rng.gamma(alpha));
    for (auto& v : row) v /= s;
    // Absorb rounding so the row sums to 1 within the table tolerance.
    double r = 0.0;
    for (std::size_t i = 0; i + 1 < card; ++i) r += row[i];
    row[card - 1] = std::max(0.0, 1.0 - r);
  }
  return out;
}

namespace {
void add_random_node(DiscreteScm& scm, Rng& rng, const std::string& name, std::size_t card,
                     const std::vector<std::string>& parents) {
  std::size_t rows = 1;
  for (const auto& p : parents) rows *= scm.card(scm.index(p));
  scm.add_node(name, card, parents, dirichlet_cpt(rng, rows, card));
}
}  // namespace

DiscreteScm random_scm(Rng& rng, std::size_t nodes, std::size_t max_card, double edge_prob) {
  DiscreteScm scm;
  for (std::size_t n = 0; n < nodes; ++n) {
    std::vector<std::string> parents;
    for (std::size_t p = 0; p < n && parents.size() < 3; ++p)
      if (rng.uniform() < edge_prob) parents.push_back("V" + std::to_string(p));
    add_random_node(scm, rng, "V" + std::to_string(n), 2 + rng.below(max_card - 1), parents);
  }
  return scm;
}

DiscreteScm random_frontdoor_scm(Rng& rng) {
  auto card = [&] { return static_cast<std::size_t>(2 + rng.below(3)); };
  const bool instrument = rng.uniform() < 0.5;
  const bool instrument_confounded = instrument && rng.uniform() < 0.5;
  const bool mediator_cause = rng.uniform() < 0.5;
  const bool outcome_cause = rng.uniform() < 0.5;
  const bool descendant = rng.uniform() < 0.5;

  DiscreteScm scm;
  add_random_node(scm, rng, "Z", card(), {});
  std::vector<std::string> xp{"Z"};
  if (instrument) {
    add_random_node(scm, rng, "W", card(), instrument_confounded ? std::vector<std::string>{"Z"}
                                                                : std::vector<std::string>{});
    xp.push_back("W");
  }
  add_random_node(scm, rng, "X", card(), xp);
  std::vector<std::string> mp{"X"};
  if (mediator_cause) {
    add_random_node(scm, rng, "U", card(), {});
    mp.push_back("U");
  }
  add_random_node(scm, rng, "M", card(), mp);
  std::vector<std::string> yp{"M", "Z"};
  if (outcome_cause) {
    add_random_node(scm, rng, "V", card(), {});
    yp.push_back("V");
  }
  add_random_node(scm, rng, "Y", card(), yp);
  if (descendant) add_random_node(scm, rng, "D", card(), {"Y"});
  return scm;
}

VerifySummary verify_random_models(std::size_t trials, std::uint64_t seed, double tolerance) {
  VerifySummary s;
  s.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, "scm-trial", t));
    const auto scm = random_frontdoor_scm(rng);
    const auto data = ObservedJoint::observe(scm, {"X", "M", "Y"});
    CptAccessCounter counter;
    scm.attach_counter(&counter);
    const auto z = scm.index("Z");
    bool failed = false;
    for (std::size_t x = 0; x < scm.card(scm.index("X")); ++x) {
      counter.reset();
      const auto fd = frontdoor_adjust(scm, data, "X", x, "M", "Y");
      s.confounder_reads += counter.reads[z];
      const auto truth = surgery_intervene(scm, {{"X", x}}, "Y");
      const auto bd = backdoor_adjust(scm, "X", x, "Y", {"Z"});
      const double e_fd = fd.max_abs_diff(truth);
      const double e_bd = bd.max_abs_diff(truth);
      s.max_abs_error = std::max(s.max_abs_error, e_fd);
      s.max_backdoor_abs_error = std::max(s.max_backdoor_abs_error, e_bd);
      if (e_fd > tolerance || e_bd > tolerance) failed = true;
    }
    scm.attach_counter(nullptr);
    if (failed) ++s.failures;
  }
  return s;
}

}  // namespace htsc::scm

#pragma once

// Exact discrete structural causal models: observational queries, graph
// surgery, and the back-door / front-door adjustment formulas. Everything is
// computed by enumerating the joint table, so models are capped at 8 nodes
// of cardinality at most 8.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "htsc/rng.hpp"

namespace htsc::scm {

inline constexpr std::size_t kMaxNodes = 8;
inline constexpr std::size_t kMaxCard = 8;

/// Conditioning event with zero probability.
class UndefinedConditional : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A stratum P(X=x, Z=z) = 0 with P(Z=z) > 0 in back-door adjustment.
class NonIdentifiable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CriterionViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Assignment = std::map<std::string, std::size_t>;

/// Distribution over the values of one variable.
struct Dist {
  std::string var;
  std::vector<double> probs;

  double total() const;
  double max_abs_diff(const Dist& other) const;
};

/// Counts reads of each node's conditional probability table.
struct CptAccessCounter {
  std::vector<std::uint64_t> reads;
  void reset() { reads.assign(reads.size(), 0); }
};

class DiscreteScm {
 public:
  /// Adds a node. Parents must already exist, so insertion order is a
  /// topological order and the graph is acyclic by construction. `cpt` has
  /// one row per parent configuration (first parent most significant), each
  /// row of length `card`.
  std::size_t add_node(const std::string& name, std::size_t card,
                       const std::vector<std::string>& parents,
                       std::vector<std::vector<double>> cpt);

  std::size_t size() const { return names_.size(); }
  std::size_t index(const std::string& name) const;
  const std::string& name(std::size_t node) const { return names_.at(node); }
  std::size_t card(std::size_t node) const { return cards_.at(node); }
  const std::vector<std::size_t>& parents(std::size_t node) const { return parents_.at(node); }
  std::vector<std::size_t> children(std::size_t node) const;
  bool has_edge(std::size_t from, std::size_t to) const;
  std::size_t parent_configs(std::size_t node) const;

  /// Row of P(node | parents) for the parent values found in `values`
  /// (indexed by node). Every call is reported to the attached counter.
  std::span<const double> cpt_row(std::size_t node, std::span<const std::size_t> values) const;

  void attach_counter(CptAccessCounter* counter) const;

  /// Copy with each intervened node's incoming edges removed and its table
  /// replaced by a point mass. The counter attachment is carried over.
  DiscreteScm mutilated(const Assignment& interventions) const;

  /// Visits every full assignment with its joint probability.
  template <typename F>
  void for_each_assignment(F&& visit) const {
    std::vector<std::size_t> values(size(), 0);
    for (;;) {
      double p = 1.0;
      for (std::size_t n = 0; n < size() && p > 0.0; ++n) p *= cpt_row(n, values)[values[n]];
      visit(std::span<const std::size_t>(values), p);
      std::size_t n = size();
      while (n > 0) {
        --n;
        if (++values[n] < cards_[n]) break;
        values[n] = 0;
        if (n == 0) return;
      }
      if (size() == 0) return;
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<std::size_t> cards_;
  std::vector<std::vector<std::size_t>> parents_;
  std::vector<std::vector<double>> cpts_;  // flattened rows
  mutable CptAccessCounter* counter_ = nullptr;
};

/// Joint table over a subset of variables, as it would be estimated from
/// unlimited observational data. Adjustment formulas that must not see the
/// latent confounder read only from this table.
class ObservedJoint {
 public:
  ObservedJoint(std::vector<std::string> vars, std::vector<std::size_t> cards,
                std::vector<double> probs);

  /// Marginalizes the model's joint onto `vars`. This is the data-generating
  /// step and reads every table of the model.
  static ObservedJoint observe(const DiscreteScm& scm, const std::vector<std::string>& vars);

  const std::vector<std::string>& vars() const { return vars_; }
  std::size_t card(const std::string& var) const;

  /// P(event) for a partial assignment over this table's variables.
  double prob(const Assignment& event) const;

 private:
  std::size_t position(const std::string& var) const;

  std::vector<std::string> vars_;
  std::vector<std::size_t> cards_;
  std::vector<double> probs_;  // row-major, first var most significant
};

/// P(target | given) by full joint enumeration.
Dist observational(const DiscreteScm& scm, const std::string& target, const Assignment& given);

/// P(target | do(interventions)) on the mutilated graph. This is the oracle
/// every adjustment formula is checked against.
Dist surgery_intervene(const DiscreteScm& scm, const Assignment& interventions,
                       const std::string& target);

/// sum_z P(Y | X=x, Z=z) P(Z=z) over the joint values of `adjust_set`.
Dist backdoor_adjust(const DiscreteScm& scm, const std::string& treatment, std::size_t x,
                     const std::string& target, const std::vector<std::string>& adjust_set);

struct CriterionReport {
  struct Violation {
    int clause;        // 1: unintercepted directed path, 2: open X-M back-door, 3: open M-Y back-door
    std::string path;  // e.g. "X <- Z -> M"
  };
  bool satisfied = true;
  std::vector<Violation> violations;

  std::string summary() const;
};

/// Structural front-door check relative to (treatment, mediator, target).
CriterionReport verify_frontdoor_criterion(const DiscreteScm& scm, const std::string& treatment,
                                           const std::string& mediator, const std::string& target);

/// sum_m P(m | x) sum_x' P(x') P(Y | x', m), evaluated on observational data
/// only. The model is consulted for its graph (criterion check), never for
/// its tables. Throws CriterionViolation when the criterion fails.
Dist frontdoor_adjust(const DiscreteScm& structure, const ObservedJoint& data,
                      const std::string& treatment, std::size_t x, const std::string& mediator,
                      const std::string& target);

/// Convenience form that first observes {treatment, mediator, target}.
Dist frontdoor_adjust(const DiscreteScm& scm, const std::string& treatment, std::size_t x,
                      const std::string& mediator, const std::string& target);

/// Table of `rows` CPT rows of length `card`, each drawn from a symmetric
/// Dirichlet(alpha).
std::vector<std::vector<double>> dirichlet_cpt(Rng& rng, std::size_t rows, std::size_t card,
                                               double alpha = 1.0);

/// Random model on `nodes` variables: node i may take any earlier node as a
/// parent with probability `edge_prob` (at most 3 parents).
DiscreteScm random_scm(Rng& rng, std::size_t nodes, std::size_t max_card, double edge_prob);

/// Random model containing the front-door pattern Z -> X -> M -> Y, Z -> Y
/// (Z latent) plus optional extra nodes. Always satisfies the criterion for
/// (X, M, Y).
DiscreteScm random_frontdoor_scm(Rng& rng);

struct VerifySummary {
  std::size_t trials = 0;
  double max_abs_error = 0.0;           // front-door vs surgery
  double max_backdoor_abs_error = 0.0;  // back-door over Z vs surgery
  std::size_t failures = 0;
  std::uint64_t confounder_reads = 0;   // during front-door adjustment
};

/// Property run used by the CLI and the acceptance suite.
VerifySummary verify_random_models(std::size_t trials, std::uint64_t seed, double tolerance = 1e-10);

}  // namespace htsc::scm

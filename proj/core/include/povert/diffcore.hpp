#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "povert/tape.hpp"

namespace povert::diff {

/// Named, ordered parameter groups. Group contents and sizes are fixed for
/// the lifetime of one optimization run; every differentiable leaf of a loss
/// belongs to exactly one group.
template <class T>
struct ParamSet {
  struct Group {
    std::string name;
    std::vector<ad::Tensor<T>> tensors;
    std::size_t size() const {
      std::size_t n = 0;
      for (const auto& t : tensors) n += t.count();
      return n;
    }
  };
  std::vector<Group> groups;

  Group& add(std::string name) {
    groups.push_back({std::move(name), {}});
    return groups.back();
  }
  const Group* find(const std::string& name) const {
    for (const auto& g : groups)
      if (g.name == name) return &g;
    return nullptr;
  }
  Group* find(const std::string& name) {
    return const_cast<Group*>(const_cast<const ParamSet*>(this)->find(name));
  }
};

/// Per-group flat gradients plus the scalar loss value. All entries are
/// finite by construction (NonFiniteGradient otherwise).
template <class T>
struct GradReport {
  double loss = 0;
  std::vector<std::pair<std::string, ad::Tensor<T>>> grads;  // rank-1, group order

  const ad::Tensor<T>& group(const std::string& name) const {
    for (const auto& [n, g] : grads)
      if (n == name) return g;
    throw Error("no gradient group '" + name + "'");
  }
};

/// Tape handles mirroring a ParamSet (vars[g][t] corresponds to
/// groups[g].tensors[t]).
template <class T>
struct Leaves {
  std::vector<std::vector<ad::Var<T>>> vars;
};

/// A recordable loss: builds the scalar objective from the leaf handles.
/// The same callable serves the analytic backward pass and the forward-only
/// finite-difference evaluations.
template <class T>
using LossProgram = std::function<ad::Var<T>(ad::Tape<T>&, const Leaves<T>&)>;

/// Record the program, run the reverse sweep, and collect per-group flat
/// gradients (deterministic: fixed recording and reduction order).
template <class T>
GradReport<T> backward(const LossProgram<T>& program, const ParamSet<T>& params);

/// Forward-only evaluation at the given parameter values.
template <class T>
double evaluate(const LossProgram<T>& program, const ParamSet<T>& params);

template <class T>
struct FdReport {
  std::vector<std::pair<std::string, double>> max_rel_err;  // per group
  double overall = 0;
};

/// Central-difference check of the analytic gradient on a random subsample of
/// at least `coords_per_group` coordinates per group (all of them for small
/// groups). eps must lie in [1e-5, 1e-2]. Errors are
/// |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
template <class T>
FdReport<T> finite_diff_check(const LossProgram<T>& program, const ParamSet<T>& params,
                              double eps, int coords_per_group = 32,
                              std::uint64_t seed = 0x4D5E);

// ---------------------------------------------------------------------------
// Gradient-based parameter updates
// ---------------------------------------------------------------------------

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;  // SGD only
};

/// Adam / SGD-with-momentum over a ParamSet, one state slot per group tensor.
/// Groups with zero learning rate are skipped exactly.
template <class T>
class GroupOptimizer {
 public:
  GroupOptimizer(OptimizerConfig cfg, const ParamSet<T>& shape);

  void step(ParamSet<T>& params, const GradReport<T>& grads,
            const std::map<std::string, double>& lr_by_group);

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<ad::Tensor<T>>> m_, v_;
  long t_ = 0;
};

extern template class GroupOptimizer<float>;
extern template class GroupOptimizer<double>;

}  // namespace povert::diff

#include "povert/diffcore.hpp"

#include <algorithm>
#include <cmath>

#include "povert/rng.hpp"

namespace povert::diff {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

template <class T>
Leaves<T> make_leaves(Tape<T>& tape, const ParamSet<T>& params, bool differentiable) {
  Leaves<T> lv;
  lv.vars.resize(params.groups.size());
  for (std::size_t g = 0; g < params.groups.size(); ++g)
    for (const auto& t : params.groups[g].tensors)
      lv.vars[g].push_back(differentiable ? tape.leaf(t, params.groups[g].name)
                                          : tape.constant(t));
  return lv;
}

}  // namespace

template <class T>
GradReport<T> backward(const LossProgram<T>& program, const ParamSet<T>& params) {
  Tape<T> tape;
  Leaves<T> lv = make_leaves(tape, params, true);
  Var<T> loss = program(tape, lv);
  tape.backward(loss);

  GradReport<T> out;
  out.loss = static_cast<double>(tape.val(loss).value());
  for (std::size_t g = 0; g < params.groups.size(); ++g) {
    const auto& group = params.groups[g];
    Tensor<T> flat = Tensor<T>::zeros({static_cast<int>(group.size())});
    std::size_t off = 0;
    for (std::size_t i = 0; i < group.tensors.size(); ++i) {
      Tensor<T> gt = tape.grad(lv.vars[g][i]);
      std::copy(gt.data.begin(), gt.data.end(), flat.data.begin() + off);
      off += gt.count();
    }
    if (!flat.all_finite()) throw NonFiniteGradient(group.name);
    out.grads.emplace_back(group.name, std::move(flat));
  }
  if (!std::isfinite(out.loss)) throw NonFiniteGradient("loss");
  return out;
}

template <class T>
double evaluate(const LossProgram<T>& program, const ParamSet<T>& params) {
  Tape<T> tape;
  Leaves<T> lv = make_leaves(tape, params, false);
  Var<T> loss = program(tape, lv);
  return static_cast<double>(tape.val(loss).value());
}

template <class T>
FdReport<T> finite_diff_check(const LossProgram<T>& program, const ParamSet<T>& params,
                              double eps, int coords_per_group, std::uint64_t seed) {
  if (eps < 1e-5 || eps > 1e-2) throw Error("finite_diff_check eps out of [1e-5, 1e-2]");
  GradReport<T> analytic = backward(program, params);

  FdReport<T> rep;
  Rng rng(derive_seed(seed, 0xFD));
  for (std::size_t g = 0; g < params.groups.size(); ++g) {
    const auto& group = params.groups[g];
    const std::size_t n = group.size();
    std::vector<std::size_t> coords;
    if (n <= static_cast<std::size_t>(coords_per_group)) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::vector<std::size_t> all(n);
      for (std::size_t i = 0; i < n; ++i) all[i] = i;
      rng.shuffle(all);
      coords.assign(all.begin(), all.begin() + coords_per_group);
      std::sort(coords.begin(), coords.end());
    }

    double worst = 0;
    for (std::size_t c : coords) {
      // Locate the tensor holding flat coordinate c.
      std::size_t off = c, ti = 0;
      while (off >= group.tensors[ti].count()) {
        off -= group.tensors[ti].count();
        ++ti;
      }
      ParamSet<T> shifted = params;
      T& slot = shifted.groups[g].tensors[ti].data[off];
      const T orig = slot;
      slot = orig + static_cast<T>(eps);
      const double f_plus = evaluate(program, shifted);
      slot = orig - static_cast<T>(eps);
      const double f_minus = evaluate(program, shifted);
      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double ga = static_cast<double>(analytic.grads[g].second.data[c]);
      const double rel = std::abs(ga - fd) / std::max(1e-8, std::abs(ga) + std::abs(fd));
      worst = std::max(worst, rel);
    }
    rep.max_rel_err.emplace_back(group.name, worst);
    rep.overall = std::max(rep.overall, worst);
  }
  return rep;
}

// ---------------------------------------------------------------------------

template <class T>
GroupOptimizer<T>::GroupOptimizer(OptimizerConfig cfg, const ParamSet<T>& shape)
    : cfg_(cfg) {
  m_.resize(shape.groups.size());
  v_.resize(shape.groups.size());
  for (std::size_t g = 0; g < shape.groups.size(); ++g)
    for (const auto& t : shape.groups[g].tensors) {
      m_[g].push_back(Tensor<T>::zeros(t.shape));
      if (cfg_.kind == OptimizerKind::kAdam) v_[g].push_back(Tensor<T>::zeros(t.shape));
    }
}

template <class T>
void GroupOptimizer<T>::step(ParamSet<T>& params, const GradReport<T>& grads,
                             const std::map<std::string, double>& lr_by_group) {
  ++t_;
  for (std::size_t g = 0; g < params.groups.size(); ++g) {
    auto& group = params.groups[g];
    auto it = lr_by_group.find(group.name);
    const double lr = it == lr_by_group.end() ? 0.0 : it->second;
    if (lr == 0.0) continue;
    const Tensor<T>& flat = grads.grads[g].second;
    std::size_t off = 0;
    for (std::size_t ti = 0; ti < group.tensors.size(); ++ti) {
      Tensor<T>& x = group.tensors[ti];
      Tensor<T>& m = m_[g][ti];
      if (cfg_.kind == OptimizerKind::kAdam) {
        Tensor<T>& v = v_[g][ti];
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
          const double gi = static_cast<double>(flat.data[off + i]);
          m.data[i] = static_cast<T>(cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi);
          v.data[i] = static_cast<T>(cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi);
          const double mhat = m.data[i] / bc1;
          const double vhat = v.data[i] / bc2;
          x.data[i] = static_cast<T>(x.data[i] - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
      } else {
        for (std::size_t i = 0; i < x.data.size(); ++i) {
          const double gi = static_cast<double>(flat.data[off + i]);
          m.data[i] = static_cast<T>(cfg_.momentum * m.data[i] + gi);
          x.data[i] = static_cast<T>(x.data[i] - lr * m.data[i]);
        }
      }
      off += x.data.size();
    }
  }
}

// ---------------------------------------------------------------------------

template class GroupOptimizer<float>;
template class GroupOptimizer<double>;

#define POVERT_INSTANTIATE(T)                                                      \
  template GradReport<T> backward(const LossProgram<T>&, const ParamSet<T>&);      \
  template double evaluate(const LossProgram<T>&, const ParamSet<T>&);             \
  template FdReport<T> finite_diff_check(const LossProgram<T>&, const ParamSet<T>&, \
                                         double, int, std::uint64_t);

POVERT_INSTANTIATE(float)
POVERT_INSTANTIATE(double)
#undef POVERT_INSTANTIATE

}  // namespace povert::diff

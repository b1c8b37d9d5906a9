#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "povert/errors.hpp"
#include "povert/tensor.hpp"

namespace povert::ad {

template <class T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid for the tape that
/// created it.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode tape over Tensor<T> values.
///
/// Recording is sequential, backward walks nodes in reverse creation order
/// and accumulates adjoints with a fixed summation order, so gradients are
/// bit-identical across runs for identical inputs. One tape per optimization
/// step; tapes are independent and may live on different threads.
template <class T>
class Tape {
 public:
  using Vec = std::vector<T>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- node creation -------------------------------------------------

  Var<T> constant(Tensor<T> v) { return push(std::move(v), {}, "const", nullptr, false); }

  Var<T> scalar_const(T c) { return constant(Tensor<T>::scalar(c)); }

  /// Differentiable leaf. Gradients are collected for leaves after backward().
  Var<T> leaf(Tensor<T> v, std::string name = "") {
    Var<T> out = push(std::move(v), {}, "leaf", nullptr, true);
    nodes_[out.id].is_leaf = true;
    nodes_[out.id].leaf_name = std::move(name);
    return out;
  }

  /// Copy of `a`'s value with gradient flow cut.
  Var<T> detach(Var<T> a) { return constant(val(a)); }

  /// Escape hatch for ops recorded without an adjoint. Backward through such
  /// a node is a hard error, never a silent zero. (Feeding it only constants
  /// is fine; no adjoint is needed then.)
  Var<T> forward_only(const char* name, const std::vector<Var<T>>& inputs, Tensor<T> value) {
    std::vector<int> ps;
    for (auto v : inputs) ps.push_back(check(v));
    Var<T> out = push(std::move(value), std::move(ps), name, nullptr);
    nodes_[out.id].has_adjoint = false;
    return out;
  }

  const Tensor<T>& val(Var<T> v) const { return nodes_[check(v)].value; }

  /// Gradient of the last backward()'d scalar w.r.t. `v`. Zeros if the loss
  /// does not depend on it.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.data.empty()) return Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise binary ops (with limited broadcasting) --------------
  //
  // Supported operand combinations: identical shapes; rank-0 scalar against
  // anything; row vector (1,n) or column (m,1) against a rank-2 (m,n).

  Var<T> add(Var<T> a, Var<T> b) {
    return binary(a, b, "add", [](T x, T y) { return x + y; },
                  [](T, T, T g) { return std::pair<T, T>{g, g}; });
  }
  Var<T> sub(Var<T> a, Var<T> b) {
    return binary(a, b, "sub", [](T x, T y) { return x - y; },
                  [](T, T, T g) { return std::pair<T, T>{g, -g}; });
  }
  Var<T> mul(Var<T> a, Var<T> b) {
    return binary(a, b, "mul", [](T x, T y) { return x * y; },
                  [](T x, T y, T g) { return std::pair<T, T>{g * y, g * x}; });
  }
  Var<T> div(Var<T> a, Var<T> b) {
    return binary(a, b, "div", [](T x, T y) { return x / y; },
                  [](T x, T y, T g) {
                    return std::pair<T, T>{g / y, -g * x / (y * y)};
                  });
  }

  Var<T> add_const(Var<T> a, T c) {
    return unary(a, "add_const", [c](T x) { return x + c; }, [](T, T g) { return g; });
  }
  Var<T> scale(Var<T> a, T c) {
    return unary(a, "scale", [c](T x) { return x * c; }, [c](T, T g) { return g * c; });
  }
  Var<T> neg(Var<T> a) { return scale(a, T(-1)); }

  // ---- elementwise unary ----------------------------------------------
  //
  // The transcendental ops dominate render time, so their loops go through
  // Eigen array expressions (SIMD exp/sin/cos) instead of per-element
  // lambdas.

  Var<T> sin_(Var<T> a) {
    return unary_vec(a, "sin", [](auto x) { return x.sin(); },
                     [](auto x, auto g) { return g * x.cos(); });
  }
  Var<T> cos_(Var<T> a) {
    return unary_vec(a, "cos", [](auto x) { return x.cos(); },
                     [](auto x, auto g) { return -g * x.sin(); });
  }
  Var<T> exp_(Var<T> a) {
    return unary_vec(a, "exp", [](auto x) { return x.exp(); },
                     [](auto x, auto g) { return g * x.exp(); });
  }
  Var<T> log_(Var<T> a) {
    return unary(a, "log", [](T x) { return std::log(x); },
                 [](T x, T g) { return g / x; });
  }
  /// Forward sqrt is exact (sqrt(0) = 0); the adjoint clamps the
  /// denominator so norm-style losses keep finite gradients near zero.
  Var<T> sqrt_(Var<T> a) {
    return unary(a, "sqrt", [](T x) { return std::sqrt(x); },
                 [](T x, T g) {
                   const T r = std::sqrt(x);
                   return g / (T(2) * std::max(r, T(1e-12)));
                 });
  }
  Var<T> sigmoid(Var<T> a) {
    return unary_vec(a, "sigmoid", [](auto x) { return T(1) / (T(1) + (-x).exp()); },
                     [](auto x, auto g) {
                       auto s = T(1) / (T(1) + (-x).exp());
                       return g * s * (T(1) - s);
                     });
  }
  /// softplus with sharpness k: log(1 + exp(k x)) / k, numerically stable.
  Var<T> softplus(Var<T> a, T k = T(1)) {
    return unary_vec(a, "softplus",
                     [k](auto x) {
                       auto kx = x * k;
                       return (kx > T(30)).select(x, ((kx.exp() + T(1)).log()) / k);
                     },
                     [k](auto x, auto g) { return g / (T(1) + (-(x * k)).exp()); });
  }
  /// x * sigmoid(x) — smooth activation, finite-difference friendly.
  Var<T> silu(Var<T> a) {
    return unary_vec(a, "silu",
                     [](auto x) { return x / (T(1) + (-x).exp()); },
                     [](auto x, auto g) {
                       auto s = T(1) / (T(1) + (-x).exp());
                       return g * (s + x * s * (T(1) - s));
                     });
  }
  Var<T> clamp_min(Var<T> a, T c) {
    return unary(a, "clamp_min", [c](T x) { return std::max(x, c); },
                 [c](T x, T g) { return x > c ? g : T(0); });
  }

  /// Smooth clamp onto [0, 1]. Identity up to ~1e-3 in the interior at k=8.
  Var<T> softclamp01(Var<T> a, T k = T(8)) {
    Var<T> lo = softplus(a, k);
    Var<T> one_minus = add_const(neg(lo), T(1));
    return add_const(neg(softplus(one_minus, k)), T(1));
  }

  // ---- linear algebra ---------------------------------------------------

  Var<T> matmul(Var<T> a, Var<T> b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
      throw ShapeMismatch("matmul " + shape_str(A.shape) + " x " + shape_str(B.shape));
    const int m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    emap(out).noalias() = cmap(A) * cmap(B);
    int ia = check(a), ib = check(b);
    return push(std::move(out), {ia, ib}, "matmul",
                [this, ia, ib, m, k, n](const Tensor<T>& g) {
                  auto G = cmap_raw(g.data.data(), m, n);
                  if (nodes_[ia].wants_grad()) {
                    Tensor<T>& ga = grad_buf(ia);
                    emap(ga).noalias() += G * cmap(nodes_[ib].value).transpose();
                  }
                  if (nodes_[ib].wants_grad()) {
                    Tensor<T>& gb = grad_buf(ib);
                    emap(gb).noalias() += cmap(nodes_[ia].value).transpose() * G;
                  }
                  (void)k;
                });
  }

  Var<T> transpose(Var<T> a) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2) throw ShapeMismatch("transpose needs rank-2");
    const int m = A.shape[0], n = A.shape[1];
    Tensor<T> out = Tensor<T>::zeros({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
    int ia = check(a);
    return push(std::move(out), {ia}, "transpose",
                [this, ia, m, n](const Tensor<T>& g) {
                  if (!nodes_[ia].wants_grad()) return;
                  Tensor<T>& ga = grad_buf(ia);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
                });
  }

  // ---- reductions ---------------------------------------------------------

  Var<T> sum(Var<T> a) {
    const Tensor<T>& A = val(a);
    T s = T(0);
    for (const T& x : A.data) s += x;
    int ia = check(a);
    return push(Tensor<T>::scalar(s), {ia}, "sum", [this, ia](const Tensor<T>& g) {
      if (!nodes_[ia].wants_grad()) return;
      Tensor<T>& ga = grad_buf(ia);
      const T gv = g.data[0];
      for (T& x : ga.data) x += gv;
    });
  }

  Var<T> mean(Var<T> a) {
    const std::size_t n = val(a).count();
    return scale(sum(a), T(1) / static_cast<T>(n));
  }

  /// Sum of a rank-2 tensor along `axis` (0 -> (1,n), 1 -> (m,1)).
  Var<T> sum_axis(Var<T> a, int axis) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2) throw ShapeMismatch("sum_axis needs rank-2");
    const int m = A.shape[0], n = A.shape[1];
    Tensor<T> out = Tensor<T>::zeros(axis == 0 ? std::vector<int>{1, n}
                                               : std::vector<int>{m, 1});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        out.data[axis == 0 ? j : i] += A.at(i, j);
    int ia = check(a);
    return push(std::move(out), {ia}, "sum_axis",
                [this, ia, m, n, axis](const Tensor<T>& g) {
                  if (!nodes_[ia].wants_grad()) return;
                  Tensor<T>& ga = grad_buf(ia);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                      ga.at(i, j) += g.data[axis == 0 ? j : i];
                });
  }

  /// out(i,j) = sum_{j' < j} a(i,j'), along axis 1 of a rank-2 tensor.
  Var<T> cumsum_exclusive(Var<T> a) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2) throw ShapeMismatch("cumsum_exclusive needs rank-2");
    const int m = A.shape[0], n = A.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    for (int i = 0; i < m; ++i) {
      T acc = T(0);
      for (int j = 0; j < n; ++j) {
        out.at(i, j) = acc;
        acc += A.at(i, j);
      }
    }
    int ia = check(a);
    return push(std::move(out), {ia}, "cumsum_exclusive",
                [this, ia, m, n](const Tensor<T>& g) {
                  if (!nodes_[ia].wants_grad()) return;
                  Tensor<T>& ga = grad_buf(ia);
                  for (int i = 0; i < m; ++i) {
                    T acc = T(0);
                    for (int j = n - 1; j >= 0; --j) {
                      ga.at(i, j) += acc;  // d out(i,j')/d a(i,j) = 1 for j' > j
                      acc += g.at(i, j);
                    }
                  }
                });
  }

  // ---- shape ops ------------------------------------------------------------

  Var<T> reshape(Var<T> a, std::vector<int> shape) {
    Tensor<T> out = val(a).reshaped(shape);
    int ia = check(a);
    return push(std::move(out), {ia}, "reshape", [this, ia](const Tensor<T>& g) {
      if (!nodes_[ia].wants_grad()) return;
      Tensor<T>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    });
  }

  Var<T> slice_cols(Var<T> a, int c0, int c1) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2 || c0 < 0 || c1 > A.shape[1] || c0 >= c1)
      throw ShapeMismatch("slice_cols out of range");
    const int m = A.shape[0], w = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros({m, w});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) out.at(i, j) = A.at(i, c0 + j);
    int ia = check(a);
    return push(std::move(out), {ia}, "slice_cols",
                [this, ia, m, w, c0](const Tensor<T>& g) {
                  if (!nodes_[ia].wants_grad()) return;
                  Tensor<T>& ga = grad_buf(ia);
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j) ga.at(i, c0 + j) += g.at(i, j);
                });
  }

  Var<T> slice_rows(Var<T> a, int r0, int r1) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2 || r0 < 0 || r1 > A.shape[0] || r0 >= r1)
      throw ShapeMismatch("slice_rows out of range");
    const int n = A.shape[1], h = r1 - r0;
    Tensor<T> out = Tensor<T>::zeros({h, n});
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < n; ++j) out.at(i, j) = A.at(r0 + i, j);
    int ia = check(a);
    return push(std::move(out), {ia}, "slice_rows",
                [this, ia, h, n, r0](const Tensor<T>& g) {
                  if (!nodes_[ia].wants_grad()) return;
                  Tensor<T>& ga = grad_buf(ia);
                  for (int i = 0; i < h; ++i)
                    for (int j = 0; j < n; ++j) ga.at(r0 + i, j) += g.at(i, j);
                });
  }

  Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_cols of nothing");
    int m = val(parts[0]).shape[0], total = 0;
    std::vector<int> ids, widths;
    for (auto p : parts) {
      const Tensor<T>& P = val(p);
      if (P.rank() != 2 || P.shape[0] != m) throw ShapeMismatch("concat_cols rows differ");
      ids.push_back(check(p));
      widths.push_back(P.shape[1]);
      total += P.shape[1];
    }
    Tensor<T> out = Tensor<T>::zeros({m, total});
    int off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const Tensor<T>& P = nodes_[ids[k]].value;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < widths[k]; ++j) out.at(i, off + j) = P.at(i, j);
      off += widths[k];
    }
    return push(std::move(out), ids, "concat_cols",
                [this, ids, widths, m](const Tensor<T>& g) {
                  int off2 = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (nodes_[ids[k]].wants_grad()) {
                      Tensor<T>& ga = grad_buf(ids[k]);
                      for (int i = 0; i < m; ++i)
                        for (int j = 0; j < widths[k]; ++j)
                          ga.at(i, j) += g.at(i, off2 + j);
                    }
                    off2 += widths[k];
                  }
                });
  }

  /// Single element of a rank-1/rank-2 tensor as a rank-0 scalar.
  Var<T> index(Var<T> a, int i) {
    const Tensor<T>& A = val(a);
    if (i < 0 || static_cast<std::size_t>(i) >= A.count())
      throw ShapeMismatch("index out of range");
    int ia = check(a);
    return push(Tensor<T>::scalar(A.data[i]), {ia}, "index",
                [this, ia, i](const Tensor<T>& g) {
                  if (!nodes_[ia].wants_grad()) return;
                  grad_buf(ia).data[i] += g.data[0];
                });
  }

  /// Assemble rank-0 scalars into a small tensor of the given shape.
  Var<T> stack_scalars(std::vector<int> shape, const std::vector<Var<T>>& xs) {
    Tensor<T> out = Tensor<T>::zeros(shape);
    if (out.count() != xs.size()) throw ShapeMismatch("stack_scalars count mismatch");
    std::vector<int> ids;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      ids.push_back(check(xs[i]));
      out.data[i] = val(xs[i]).data[0];
    }
    return push(std::move(out), ids, "stack_scalars",
                [this, ids](const Tensor<T>& g) {
                  for (std::size_t i = 0; i < ids.size(); ++i)
                    if (nodes_[ids[i]].wants_grad())
                      grad_buf(ids[i]).data[0] += g.data[i];
                });
  }

  /// (m,n) -> (m*times, n), each row repeated `times` consecutively.
  Var<T> repeat_rows(Var<T> a, int times) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2) throw ShapeMismatch("repeat_rows needs rank-2");
    const int m = A.shape[0], n = A.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m * times, n});
    for (int i = 0; i < m; ++i)
      for (int r = 0; r < times; ++r)
        std::memcpy(&out.at(i * times + r, 0), &A.at(i, 0), sizeof(T) * n);
    int ia = check(a);
    return push(std::move(out), {ia}, "repeat_rows",
                [this, ia, m, n, times](const Tensor<T>& g) {
                  if (!nodes_[ia].wants_grad()) return;
                  Tensor<T>& ga = grad_buf(ia);
                  for (int i = 0; i < m; ++i)
                    for (int r = 0; r < times; ++r)
                      for (int j = 0; j < n; ++j)
                        ga.at(i, j) += g.at(i * times + r, j);
                });
  }

  /// Circular shift of a rank-2 map by (dy, dx).
  Var<T> roll2(Var<T> a, int dy, int dx) {
    const Tensor<T>& A = val(a);
    if (A.rank() != 2) throw ShapeMismatch("roll2 needs rank-2");
    const int h = A.shape[0], w = A.shape[1];
    auto wrap = [](int x, int n) { return ((x % n) + n) % n; };
    Tensor<T> out = Tensor<T>::zeros({h, w});
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out.at(i, j) = A.at(wrap(i - dy, h), wrap(j - dx, w));
    int ia = check(a);
    return push(std::move(out), {ia}, "roll2",
                [this, ia, h, w, dy, dx, wrap](const Tensor<T>& g) {
                  if (!nodes_[ia].wants_grad()) return;
                  Tensor<T>& ga = grad_buf(ia);
                  for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j)
                      ga.at(wrap(i - dy, h), wrap(j - dx, w)) += g.at(i, j);
                });
  }

  /// 2x2 average pooling (floor sizes) on rank-2 (H,W) or rank-3 (C,H,W).
  Var<T> avgpool2(Var<T> a) {
    const Tensor<T>& A = val(a);
    int C, H, W;
    if (A.rank() == 2) {
      C = 1; H = A.shape[0]; W = A.shape[1];
    } else if (A.rank() == 3) {
      C = A.shape[0]; H = A.shape[1]; W = A.shape[2];
    } else {
      throw ShapeMismatch("avgpool2 needs rank-2/3");
    }
    const int oh = H / 2, ow = W / 2;
    if (oh < 1 || ow < 1) throw ShapeMismatch("avgpool2 input too small");
    Tensor<T> out = Tensor<T>::zeros(A.rank() == 2 ? std::vector<int>{oh, ow}
                                                   : std::vector<int>{C, oh, ow});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          const T* base = A.data.data() + (static_cast<std::size_t>(c) * H + 2 * y) * W + 2 * x;
          out.data[(static_cast<std::size_t>(c) * oh + y) * ow + x] =
              (base[0] + base[1] + base[W] + base[W + 1]) * T(0.25);
        }
    int ia = check(a);
    return push(std::move(out), {ia}, "avgpool2",
                [this, ia, C, H, W, oh, ow](const Tensor<T>& g) {
                  if (!nodes_[ia].wants_grad()) return;
                  Tensor<T>& ga = grad_buf(ia);
                  for (int c = 0; c < C; ++c)
                    for (int y = 0; y < oh; ++y)
                      for (int x = 0; x < ow; ++x) {
                        const T gv = g.data[(static_cast<std::size_t>(c) * oh + y) * ow + x] * T(0.25);
                        T* base = ga.data.data() +
                                  (static_cast<std::size_t>(c) * H + 2 * y) * W + 2 * x;
                        base[0] += gv;
                        base[1] += gv;
                        base[W] += gv;
                        base[W + 1] += gv;
                      }
                });
  }

  /// 2D convolution. img (Cin,H,W); kernels flattened (Cout, Cin*kh*kw);
  /// zero padding `pad`, square stride. Gradients flow to both operands.
  Var<T> conv2d(Var<T> img, Var<T> ker, int kh, int kw, int stride, int pad) {
    const Tensor<T>& I = val(img);
    const Tensor<T>& K = val(ker);
    if (I.rank() != 3 || K.rank() != 2) throw ShapeMismatch("conv2d ranks");
    const int Cin = I.shape[0], H = I.shape[1], W = I.shape[2];
    if (K.shape[1] != Cin * kh * kw) throw ShapeMismatch("conv2d kernel size");
    const int Cout = K.shape[0];
    const int oh = (H + 2 * pad - kh) / stride + 1;
    const int ow = (W + 2 * pad - kw) / stride + 1;
    Tensor<T> out = Tensor<T>::zeros({Cout, oh, ow});
    for (int co = 0; co < Cout; ++co)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          T acc = T(0);
          const T* kr = &K.at(co, 0);
          for (int ci = 0; ci < Cin; ++ci)
            for (int dy = 0; dy < kh; ++dy) {
              const int iy = y * stride - pad + dy;
              if (iy < 0 || iy >= H) continue;
              for (int dx = 0; dx < kw; ++dx) {
                const int ix = x * stride - pad + dx;
                if (ix < 0 || ix >= W) continue;
                acc += I.at(ci, iy, ix) * kr[(ci * kh + dy) * kw + dx];
              }
            }
          out.at(co, y, x) = acc;
        }
    int ii = check(img), ik = check(ker);
    return push(std::move(out), {ii, ik}, "conv2d",
                [this, ii, ik, Cin, H, W, Cout, oh, ow, kh, kw, stride, pad](const Tensor<T>& g) {
                  const Tensor<T>& I2 = nodes_[ii].value;
                  const Tensor<T>& K2 = nodes_[ik].value;
                  const bool gi = nodes_[ii].wants_grad();
                  const bool gk = nodes_[ik].wants_grad();
                  Tensor<T>* GI = gi ? &grad_buf(ii) : nullptr;
                  Tensor<T>* GK = gk ? &grad_buf(ik) : nullptr;
                  for (int co = 0; co < Cout; ++co)
                    for (int y = 0; y < oh; ++y)
                      for (int x = 0; x < ow; ++x) {
                        const T gv = g.at(co, y, x);
                        if (gv == T(0)) continue;
                        for (int ci = 0; ci < Cin; ++ci)
                          for (int dy = 0; dy < kh; ++dy) {
                            const int iy = y * stride - pad + dy;
                            if (iy < 0 || iy >= H) continue;
                            for (int dx = 0; dx < kw; ++dx) {
                              const int ix = x * stride - pad + dx;
                              if (ix < 0 || ix >= W) continue;
                              const int kidx = (ci * kh + dy) * kw + dx;
                              if (gi) GI->at(ci, iy, ix) += gv * K2.at(co, kidx);
                              if (gk) GK->at(co, kidx) += gv * I2.at(ci, iy, ix);
                            }
                          }
                      }
                });
  }

  /// Differentiable bilinear lookup with zero padding.
  ///
  /// img (C,Hs,Ws); u,v rank-1 of length oh*ow in pixel-index coordinates of
  /// the source; `mask` marks which output pixels sample at all (others are
  /// exactly 0, with zero gradient). Output (C,oh,ow). Gradients flow to the
  /// image values and to the sampling coordinates.
  Var<T> bilinear_sample(Var<T> img, Var<T> u, Var<T> v, const std::vector<unsigned char>& mask,
                         int oh, int ow) {
    const Tensor<T>& I = val(img);
    const Tensor<T>& U = val(u);
    const Tensor<T>& V = val(v);
    if (I.rank() != 3) throw ShapeMismatch("bilinear_sample image rank");
    const int C = I.shape[0], Hs = I.shape[1], Ws = I.shape[2];
    const std::size_t n = static_cast<std::size_t>(oh) * ow;
    if (U.count() != n || V.count() != n || mask.size() != n)
      throw ShapeMismatch("bilinear_sample grid size");
    Tensor<T> out = Tensor<T>::zeros({C, oh, ow});
    auto sample_at = [&](const Tensor<T>& im, int c, int yy, int xx) -> T {
      if (yy < 0 || yy >= Hs || xx < 0 || xx >= Ws) return T(0);
      return im.at(c, yy, xx);
    };
    for (std::size_t p = 0; p < n; ++p) {
      if (!mask[p]) continue;
      const T x = U.data[p], y = V.data[p];
      const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
      const T dx = x - static_cast<T>(x0), dy = y - static_cast<T>(y0);
      for (int c = 0; c < C; ++c) {
        const T v00 = sample_at(I, c, y0, x0), v01 = sample_at(I, c, y0, x0 + 1);
        const T v10 = sample_at(I, c, y0 + 1, x0), v11 = sample_at(I, c, y0 + 1, x0 + 1);
        out.data[c * n + p] = (T(1) - dy) * ((T(1) - dx) * v00 + dx * v01) +
                              dy * ((T(1) - dx) * v10 + dx * v11);
      }
    }
    int ii = check(img), iu = check(u), iv = check(v);
    std::vector<unsigned char> m = mask;
    return push(std::move(out), {ii, iu, iv}, "bilinear_sample",
                [this, ii, iu, iv, m, C, Hs, Ws, n](const Tensor<T>& g) {
                  const Tensor<T>& I2 = nodes_[ii].value;
                  const Tensor<T>& U2 = nodes_[iu].value;
                  const Tensor<T>& V2 = nodes_[iv].value;
                  const bool gi = nodes_[ii].wants_grad();
                  const bool gu = nodes_[iu].wants_grad();
                  const bool gv = nodes_[iv].wants_grad();
                  Tensor<T>* GI = gi ? &grad_buf(ii) : nullptr;
                  Tensor<T>* GU = gu ? &grad_buf(iu) : nullptr;
                  Tensor<T>* GV = gv ? &grad_buf(iv) : nullptr;
                  auto in_img = [&](int yy, int xx) { return yy >= 0 && yy < Hs && xx >= 0 && xx < Ws; };
                  auto pix = [&](int c, int yy, int xx) -> T {
                    return in_img(yy, xx) ? I2.at(c, yy, xx) : T(0);
                  };
                  for (std::size_t p = 0; p < n; ++p) {
                    if (!m[p]) continue;
                    const T x = U2.data[p], y = V2.data[p];
                    const int x0 = static_cast<int>(std::floor(x)),
                              y0 = static_cast<int>(std::floor(y));
                    const T dx = x - static_cast<T>(x0), dy = y - static_cast<T>(y0);
                    T du_acc = T(0), dv_acc = T(0);
                    for (int c = 0; c < C; ++c) {
                      const T go = g.data[c * n + p];
                      if (go == T(0)) continue;
                      const T v00 = pix(c, y0, x0), v01 = pix(c, y0, x0 + 1);
                      const T v10 = pix(c, y0 + 1, x0), v11 = pix(c, y0 + 1, x0 + 1);
                      if (gi) {
                        if (in_img(y0, x0)) GI->at(c, y0, x0) += go * (T(1) - dy) * (T(1) - dx);
                        if (in_img(y0, x0 + 1)) GI->at(c, y0, x0 + 1) += go * (T(1) - dy) * dx;
                        if (in_img(y0 + 1, x0)) GI->at(c, y0 + 1, x0) += go * dy * (T(1) - dx);
                        if (in_img(y0 + 1, x0 + 1)) GI->at(c, y0 + 1, x0 + 1) += go * dy * dx;
                      }
                      du_acc += go * ((T(1) - dy) * (v01 - v00) + dy * (v11 - v10));
                      dv_acc += go * ((T(1) - dx) * (v10 - v00) + dx * (v11 - v01));
                    }
                    if (gu) GU->data[p] += du_acc;
                    if (gv) GV->data[p] += dv_acc;
                  }
                });
  }

  // ---- backward -----------------------------------------------------------

  /// Reverse sweep from a scalar loss. May be called once per recorded graph;
  /// repeated calls re-run the sweep on fresh gradient buffers.
  void backward(Var<T> loss) {
    const int li = check(loss);
    if (nodes_[li].value.count() != 1)
      throw ShapeMismatch("backward needs a scalar loss");
    for (Node& n : nodes_) n.grad = Tensor<T>();
    nodes_[li].grad = Tensor<T>::full(nodes_[li].value.shape, T(1));
    for (int i = li; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.data.empty() || !n.needs_grad) continue;
      if (n.parents.empty()) continue;  // leaf or constant
      if (!n.has_adjoint)
        throw UnregisteredAdjoint(std::string("op '") + n.op +
                                  "' was recorded without an adjoint but lies on the "
                                  "differentiation path");
      n.backward_fn(n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<int> parents;
    std::function<void(const Tensor<T>&)> backward_fn;
    const char* op = "";
    bool needs_grad = false;
    bool has_adjoint = true;
    bool is_leaf = false;
    std::string leaf_name;
    bool wants_grad() const { return needs_grad; }
  };

  std::vector<Node> nodes_;

  static T sigmoid_fwd(T x) {
    if (x >= T(0)) {
      const T e = std::exp(-x);
      return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
  }

  static T softplus_fwd(T x, T k) {
    const T kx = k * x;
    if (kx > T(30)) return x;  // log1p(exp(-kx)) underflows anyway
    if (kx < T(-30)) return std::exp(kx) / k;
    return std::log1p(std::exp(kx)) / k;
  }

  int check(Var<T> v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw Error("Var does not belong to this tape");
    return v.id;
  }

  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
  }

  Var<T> push(Tensor<T> value, std::vector<int> parents, const char* op,
              std::function<void(const Tensor<T>&)> bwd, bool needs_grad_override) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.op = op;
    n.backward_fn = std::move(bwd);
    n.needs_grad = needs_grad_override;
    for (int p : n.parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
  }

  Var<T> push(Tensor<T> value, std::vector<int> parents, const char* op,
              std::function<void(const Tensor<T>&)> bwd) {
    return push(std::move(value), std::move(parents), op, std::move(bwd), false);
  }

  // Eigen views over row-major flat storage.
  using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  static Eigen::Map<const EMat> cmap(const Tensor<T>& t) {
    return Eigen::Map<const EMat>(t.data.data(), t.rows(), t.cols());
  }
  static Eigen::Map<const EMat> cmap_raw(const T* p, int r, int c) {
    return Eigen::Map<const EMat>(p, r, c);
  }
  static Eigen::Map<EMat> emap(Tensor<T>& t) {
    return Eigen::Map<EMat>(t.data.data(), t.rows(), t.cols());
  }

  template <class FwdFn, class BwdFn>
  Var<T> unary(Var<T> a, const char* op, FwdFn f, BwdFn df) {
    const Tensor<T>& A = val(a);
    Tensor<T> out = Tensor<T>::zeros(A.shape);
    for (std::size_t i = 0; i < A.data.size(); ++i) out.data[i] = f(A.data[i]);
    int ia = check(a);
    return push(std::move(out), {ia}, op, [this, ia, df](const Tensor<T>& g) {
      if (!nodes_[ia].wants_grad()) return;
      const Tensor<T>& A2 = nodes_[ia].value;
      Tensor<T>& ga = grad_buf(ia);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        ga.data[i] += df(A2.data[i], g.data[i]);
    });
  }

  using EArr = Eigen::Array<T, Eigen::Dynamic, 1>;
  static Eigen::Map<const EArr> amap(const Tensor<T>& t) {
    return Eigen::Map<const EArr>(t.data.data(), static_cast<long>(t.data.size()));
  }
  static Eigen::Map<EArr> amap_mut(Tensor<T>& t) {
    return Eigen::Map<EArr>(t.data.data(), static_cast<long>(t.data.size()));
  }

  // Unary op whose forward/backward are Eigen array expressions over the
  // whole buffer.
  template <class FwdFn, class BwdFn>
  Var<T> unary_vec(Var<T> a, const char* op, FwdFn f, BwdFn df) {
    const Tensor<T>& A = val(a);
    Tensor<T> out = Tensor<T>::zeros(A.shape);
    amap_mut(out) = f(amap(A));
    int ia = check(a);
    return push(std::move(out), {ia}, op, [this, ia, df](const Tensor<T>& g) {
      if (!nodes_[ia].wants_grad()) return;
      Tensor<T>& ga = grad_buf(ia);
      amap_mut(ga) += df(amap(nodes_[ia].value), amap(g));
    });
  }

  enum class Bcast { Same, ScalarA, ScalarB, RowA, RowB, ColA, ColB };

  static Bcast classify(const Tensor<T>& A, const Tensor<T>& B, const char* op) {
    if (A.shape == B.shape) return Bcast::Same;
    if (A.count() == 1) return Bcast::ScalarA;
    if (B.count() == 1) return Bcast::ScalarB;
    if (A.rank() == 2 && B.rank() == 2) {
      if (A.shape[0] == 1 && B.shape[1] == A.shape[1]) return Bcast::RowA;
      if (B.shape[0] == 1 && A.shape[1] == B.shape[1]) return Bcast::RowB;
      if (A.shape[1] == 1 && B.shape[0] == A.shape[0]) return Bcast::ColA;
      if (B.shape[1] == 1 && A.shape[0] == B.shape[0]) return Bcast::ColB;
    }
    throw ShapeMismatch(std::string(op) + " shapes " + shape_str(A.shape) + " vs " +
                        shape_str(B.shape));
  }

  // Per-kind loop bodies keep the hot Same/Row/Col paths branch-free and
  // vectorizable (no per-element div/mod).
  template <class Fn>
  static void for_each_pair(Bcast kind, std::size_t n, int cols, Fn&& fn) {
    const std::size_t c = static_cast<std::size_t>(cols);
    switch (kind) {
      case Bcast::Same:
        for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
        break;
      case Bcast::ScalarA:
        for (std::size_t i = 0; i < n; ++i) fn(i, 0, i);
        break;
      case Bcast::ScalarB:
        for (std::size_t i = 0; i < n; ++i) fn(i, i, 0);
        break;
      case Bcast::RowA:
        for (std::size_t base = 0; base < n; base += c)
          for (std::size_t j = 0; j < c; ++j) fn(base + j, j, base + j);
        break;
      case Bcast::RowB:
        for (std::size_t base = 0; base < n; base += c)
          for (std::size_t j = 0; j < c; ++j) fn(base + j, base + j, j);
        break;
      case Bcast::ColA:
        for (std::size_t r = 0, base = 0; base < n; ++r, base += c)
          for (std::size_t j = 0; j < c; ++j) fn(base + j, r, base + j);
        break;
      case Bcast::ColB:
        for (std::size_t r = 0, base = 0; base < n; ++r, base += c)
          for (std::size_t j = 0; j < c; ++j) fn(base + j, base + j, r);
        break;
    }
  }

  template <class FwdFn, class BwdFn>
  Var<T> binary(Var<T> a, Var<T> b, const char* op, FwdFn f, BwdFn df) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    const Bcast kind = classify(A, B, op);
    const bool a_small = (kind == Bcast::ScalarA || kind == Bcast::RowA || kind == Bcast::ColA);
    const Tensor<T>& big = a_small ? B : A;
    Tensor<T> out = Tensor<T>::zeros(big.shape);
    const int cols = big.cols();
    const std::size_t n = out.data.size();
    {
      const T* pa = A.data.data();
      const T* pb = B.data.data();
      T* po = out.data.data();
      for_each_pair(kind, n, cols,
                    [&](std::size_t i, std::size_t ai, std::size_t bi) {
                      po[i] = f(pa[ai], pb[bi]);
                    });
    }
    int ia = check(a), ib = check(b);
    return push(std::move(out), {ia, ib}, op,
                [this, ia, ib, df, kind, cols, n](const Tensor<T>& g) {
                  const bool ga = nodes_[ia].wants_grad();
                  const bool gb = nodes_[ib].wants_grad();
                  if (!ga && !gb) return;
                  const T* pa = nodes_[ia].value.data.data();
                  const T* pb = nodes_[ib].value.data.data();
                  const T* pg = g.data.data();
                  T* pga = ga ? grad_buf(ia).data.data() : nullptr;
                  T* pgb = gb ? grad_buf(ib).data.data() : nullptr;
                  for_each_pair(kind, n, cols,
                                [&](std::size_t i, std::size_t ai, std::size_t bi) {
                                  auto [dx, dy] = df(pa[ai], pb[bi], pg[i]);
                                  if (pga) pga[ai] += dx;
                                  if (pgb) pgb[bi] += dy;
                                });
                });
  }
};

// ---- operator sugar ---------------------------------------------------------

template <class T> Var<T> operator+(Var<T> a, Var<T> b) { return a.tape->add(a, b); }
template <class T> Var<T> operator-(Var<T> a, Var<T> b) { return a.tape->sub(a, b); }
template <class T> Var<T> operator*(Var<T> a, Var<T> b) { return a.tape->mul(a, b); }
template <class T> Var<T> operator/(Var<T> a, Var<T> b) { return a.tape->div(a, b); }
template <class T> Var<T> operator-(Var<T> a) { return a.tape->neg(a); }
template <class T> Var<T> operator+(Var<T> a, double c) { return a.tape->add_const(a, T(c)); }
template <class T> Var<T> operator+(double c, Var<T> a) { return a.tape->add_const(a, T(c)); }
template <class T> Var<T> operator-(Var<T> a, double c) { return a.tape->add_const(a, T(-c)); }
template <class T> Var<T> operator-(double c, Var<T> a) {
  return a.tape->add_const(a.tape->neg(a), T(c));
}
template <class T> Var<T> operator*(Var<T> a, double c) { return a.tape->scale(a, T(c)); }
template <class T> Var<T> operator*(double c, Var<T> a) { return a.tape->scale(a, T(c)); }
template <class T> Var<T> operator/(Var<T> a, double c) { return a.tape->scale(a, T(1.0 / c)); }
template <class T> Var<T> operator/(double c, Var<T> a) {
  return a.tape->div(a.tape->scalar_const(T(c)), a);
}

template <class T> Var<T> sin(Var<T> a) { return a.tape->sin_(a); }
template <class T> Var<T> cos(Var<T> a) { return a.tape->cos_(a); }
template <class T> Var<T> exp(Var<T> a) { return a.tape->exp_(a); }
template <class T> Var<T> log(Var<T> a) { return a.tape->log_(a); }
template <class T> Var<T> sqrt(Var<T> a) { return a.tape->sqrt_(a); }

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace povert::ad

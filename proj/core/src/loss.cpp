#include "povert/loss.hpp"

#include <cmath>

namespace povert::loss {

using ad::Tape;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// PerceptualProxy
// ---------------------------------------------------------------------------

template <class T>
PerceptualProxy<T>::PerceptualProxy(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x9C0DE));
  const int taps = kKernel * kKernel;
  for (int s = 0; s < kStages; ++s) {
    const int cin = s == 0 ? 3 : kFilters;
    kernels_[s] = Tensor<T>::gaussian({kFilters, cin * taps}, rng);
    for (int f = 0; f < kFilters; ++f) {
      double norm = 0;
      for (int j = 0; j < cin * taps; ++j) {
        const double v = kernels_[s].at(f, j);
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (int j = 0; j < cin * taps; ++j)
        kernels_[s].at(f, j) = static_cast<T>(kernels_[s].at(f, j) / norm);
    }
  }
}

template <class T>
std::vector<Var<T>> PerceptualProxy<T>::features(Tape<T>& tape, Var<T> img) const {
  std::vector<Var<T>> out;
  Var<T> h = img;
  for (int s = 0; s < kStages; ++s) {
    if (s > 0) h = tape.avgpool2(h);
    h = tape.conv2d(h, tape.constant(kernels_[s]), kKernel, kKernel, 1, kKernel / 2);
    out.push_back(h);
  }
  return out;
}

template <class T>
Var<T> PerceptualProxy<T>::operator()(Tape<T>& tape, Var<T> a, Var<T> b) const {
  if (tape.val(a).shape != tape.val(b).shape)
    throw ShapeMismatch("perceptual loss on differently shaped images");
  std::vector<Var<T>> fa = features(tape, a);
  std::vector<Var<T>> fb = features(tape, b);
  Var<T> acc;
  for (int s = 0; s < kStages; ++s) {
    Var<T> d = fa[s] - fb[s];
    Var<T> m = tape.mean(d * d);
    acc = s == 0 ? m : acc + m;
  }
  return tape.scale(acc, T(1) / T(kStages));
}

namespace {

// All-valid-in-5x5-window erosion with zero padding (border turns invalid).
std::vector<unsigned char> erode5(const std::vector<unsigned char>& m, int h, int w) {
  std::vector<unsigned char> out(m.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool ok = true;
      for (int dy = -2; dy <= 2 && ok; ++dy)
        for (int dx = -2; dx <= 2 && ok; ++dx) {
          const int yy = y + dy, xx = x + dx;
          ok = yy >= 0 && yy < h && xx >= 0 && xx < w && m[yy * w + xx];
        }
      out[y * w + x] = ok ? 1 : 0;
    }
  return out;
}

std::vector<unsigned char> minpool2(const std::vector<unsigned char>& m, int h, int w) {
  const int oh = h / 2, ow = w / 2;
  std::vector<unsigned char> out(static_cast<std::size_t>(oh) * ow, 0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      out[y * ow + x] = m[2 * y * w + 2 * x] && m[2 * y * w + 2 * x + 1] &&
                        m[(2 * y + 1) * w + 2 * x] && m[(2 * y + 1) * w + 2 * x + 1];
  return out;
}

template <class T>
Tensor<T> mask_image(const std::vector<unsigned char>& m, int c, int h, int w) {
  Tensor<T> t = Tensor<T>::zeros({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < m.size(); ++i)
      t.data[ch * m.size() + i] = m[i] ? T(1) : T(0);
  return t;
}

}  // namespace

template <class T>
typename PerceptualProxy<T>::MaskedResult PerceptualProxy<T>::masked(
    Tape<T>& tape, Var<T> a, Var<T> b, const std::vector<unsigned char>& mask) const {
  const Tensor<T>& A = tape.val(a);
  if (A.shape != tape.val(b).shape)
    throw ShapeMismatch("masked perceptual loss on differently shaped images");
  if (A.rank() != 3) throw ShapeMismatch("masked perceptual loss needs (C,H,W)");
  int h = A.shape[1], w = A.shape[2];
  if (mask.size() != static_cast<std::size_t>(h) * w)
    throw ShapeMismatch("mask size mismatch");

  Var<T> mimg = tape.constant(mask_image<T>(mask, A.shape[0], h, w));
  std::vector<Var<T>> fa = features(tape, a * mimg);
  std::vector<Var<T>> fb = features(tape, b * mimg);

  MaskedResult out;
  std::vector<unsigned char> m = mask;
  Var<T> acc;
  bool any_stage = false;
  for (int s = 0; s < kStages; ++s) {
    if (s > 0) {
      m = minpool2(m, h, w);
      h /= 2;
      w /= 2;
    }
    std::vector<unsigned char> ms = erode5(m, h, w);
    std::size_t count = 0;
    for (auto v : ms) count += v;
    if (count == 0) continue;
    Var<T> site_mask = tape.constant(mask_image<T>(ms, kFilters, h, w));
    Var<T> d = fa[s] - fb[s];
    Var<T> stage = tape.scale(tape.sum(d * d * site_mask),
                              T(1) / static_cast<T>(count * kFilters));
    acc = any_stage ? acc + stage : stage;
    any_stage = true;
  }
  if (!any_stage) {
    out.value = tape.scalar_const(T(0));
    out.mask_empty = true;
    return out;
  }
  out.value = tape.scale(acc, T(1) / T(kStages));
  return out;
}

// ---------------------------------------------------------------------------
// Elementary losses
// ---------------------------------------------------------------------------

template <class T>
Var<T> l2_loss(Tape<T>& tape, Var<T> a, Var<T> b) {
  if (tape.val(a).shape != tape.val(b).shape)
    throw ShapeMismatch("l2_loss on differently shaped inputs");
  Var<T> d = a - b;
  return tape.mean(d * d);
}

template <class T>
Var<T> depth_smoothness(Tape<T>& tape, Var<T> depth) {
  const Tensor<T>& D = tape.val(depth);
  if (D.rank() != 2 || D.shape[0] < 2 || D.shape[1] < 2)
    throw ShapeMismatch("depth_smoothness needs at least 2x2");
  const int h = D.shape[0], w = D.shape[1];
  Var<T> nw = tape.slice_cols(tape.slice_rows(depth, 0, h - 1), 0, w - 1);
  Var<T> south = tape.slice_cols(tape.slice_rows(depth, 1, h), 0, w - 1);
  Var<T> east = tape.slice_cols(tape.slice_rows(depth, 0, h - 1), 1, w);
  Var<T> dv = nw - south;
  Var<T> dh = nw - east;
  return tape.sum(dv * dv) + tape.sum(dh * dh);
}

template <class T>
Var<T> noise_reg(Tape<T>& tape, Var<T> noise) {
  const Tensor<T>& N = tape.val(noise);
  if (N.rank() != 2 || N.shape[0] < 8 || N.shape[1] < 8)
    throw Error("noise_reg needs a map of at least 8x8");
  // Constant-map guard: contribute nothing rather than divide by ~0.
  {
    double mu = 0;
    for (const T& v : N.data) mu += static_cast<double>(v);
    mu /= static_cast<double>(N.count());
    double var = 0;
    for (const T& v : N.data) var += (v - mu) * (v - mu);
    var /= static_cast<double>(N.count());
    if (var < 1e-12) return tape.scalar_const(T(0));
  }
  Var<T> centered = noise - tape.mean(noise);
  Var<T> unit = centered / ad::sqrt(tape.mean(centered * centered));

  int h = N.shape[0], w = N.shape[1];
  Var<T> cur = unit;
  Var<T> acc;
  bool first = true;
  while (true) {
    Var<T> px = tape.mean(cur * tape.roll2(cur, 0, 1));
    Var<T> py = tape.mean(cur * tape.roll2(cur, 1, 0));
    Var<T> level = px * px + py * py;
    acc = first ? level : acc + level;
    first = false;
    if (std::min(h, w) <= 8) break;
    cur = tape.avgpool2(cur);
    h /= 2;
    w /= 2;
  }
  return acc;
}

template <class T>
Var<T> delta_reg(Tape<T>& tape, Var<T> dw) {
  return tape.sum(dw * dw);
}

template <class T>
Var<T> rotation_loss(Tape<T>& tape, Var<T> r_pred, const Eigen::Matrix3d& r_gt) {
  Tensor<T> inv = Tensor<T>::zeros({3, 3});
  const Eigen::Matrix3d gi = r_gt.transpose();  // inverse of a rotation
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) inv.at(i, j) = static_cast<T>(gi(i, j));
  Var<T> rel = tape.matmul(tape.constant(std::move(inv)), r_pred);
  Tensor<T> eye = Tensor<T>::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = T(1);
  Var<T> d = rel - tape.constant(std::move(eye));
  return ad::sqrt(tape.sum(d * d));
}

template <class T>
Var<T> translation_loss(Tape<T>& tape, Var<T> t_pred, const Eigen::Vector3d& t_gt) {
  Tensor<T> g = Tensor<T>::zeros(tape.val(t_pred).shape);
  if (g.count() != 3) throw ShapeMismatch("translation_loss needs 3 entries");
  for (int i = 0; i < 3; ++i) g.data[i] = static_cast<T>(t_gt[i]);
  Var<T> d = t_pred - tape.constant(std::move(g));
  return ad::sqrt(tape.sum(d * d));
}

double rotation_loss_value(const camera::RotationMatrix& r_pred,
                           const camera::RotationMatrix& r_gt) {
  return (r_gt.m.transpose() * r_pred.m - Eigen::Matrix3d::Identity()).norm();
}

double translation_loss_value(const Eigen::Vector3d& t_pred, const Eigen::Vector3d& t_gt) {
  return (t_gt - t_pred).norm();
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

template <class T>
CompositeLoss<T> opt_loss(Tape<T>& tape, const PerceptualProxy<T>& proxy, Var<T> target,
                          Var<T> image, Var<T> warp_term, Var<T> noise,
                          const LossWeights& w) {
  CompositeLoss<T> out;
  Var<T> rec = proxy(tape, target, image);
  out.terms.emplace_back("lpips", rec);
  out.total = rec;
  if (warp_term.valid()) {
    out.terms.emplace_back("warp", warp_term);
    out.total = out.total + tape.scale(warp_term, static_cast<T>(w.warp));
  }
  if (noise.valid()) {
    Var<T> nr = noise_reg(tape, noise);
    out.terms.emplace_back("noise", nr);
    out.total = out.total + tape.scale(nr, static_cast<T>(w.noise));
  }
  return out;
}

template <class T>
CompositeLoss<T> pt_loss(Tape<T>& tape, const PerceptualProxy<T>& proxy, Var<T> target,
                         Var<T> image, Var<T> depth, const LossWeights& w) {
  CompositeLoss<T> out;
  Var<T> rec = proxy(tape, target, image);
  out.terms.emplace_back("lpips", rec);
  Var<T> l2 = l2_loss(tape, target, image);
  out.terms.emplace_back("l2", l2);
  out.total = rec + tape.scale(l2, static_cast<T>(w.l2));
  if (depth.valid()) {
    Var<T> dr = depth_smoothness(tape, depth);
    out.terms.emplace_back("depth_reg", dr);
    out.total = out.total + tape.scale(dr, static_cast<T>(w.depth_reg));
  }
  return out;
}

template <class T>
CompositeLoss<T> encoder_loss(Tape<T>& tape, const PerceptualProxy<T>& proxy,
                              Var<T> target, Var<T> recon, Var<T> dw,
                              const LossWeights& w) {
  CompositeLoss<T> out;
  Var<T> rec = proxy(tape, target, recon);
  out.terms.emplace_back("lpips", rec);
  Var<T> dr = delta_reg(tape, dw);
  out.terms.emplace_back("delta_reg", dr);
  out.total = rec + tape.scale(dr, static_cast<T>(w.delta_reg));
  return out;
}

template <class T>
CompositeLoss<T> pose_loss(Tape<T>& tape, Var<T> r_pred, Var<T> t_pred,
                           const camera::CameraPose& gt, const LossWeights& w) {
  CompositeLoss<T> out;
  const auto [rot_gt, center] = camera::pose_to_extrinsics(gt);
  (void)center;
  Var<T> rl = rotation_loss(tape, r_pred, rot_gt.m);
  out.terms.emplace_back("rot", rl);
  Var<T> tl = translation_loss(tape, t_pred, gt.t);
  out.terms.emplace_back("trans", tl);
  out.total = rl + tape.scale(tl, static_cast<T>(w.trans));
  return out;
}

double pose_loss_value(const camera::CameraPose& pred, const camera::CameraPose& gt,
                       const LossWeights& w) {
  const auto rp = camera::pose_to_extrinsics(pred).first;
  const auto rg = camera::pose_to_extrinsics(gt).first;
  return rotation_loss_value(rp, rg) + w.trans * translation_loss_value(pred.t, gt.t);
}

// ---------------------------------------------------------------------------

template class PerceptualProxy<float>;
template class PerceptualProxy<double>;

#define POVERT_INSTANTIATE(T)                                                            \
  template Var<T> l2_loss(Tape<T>&, Var<T>, Var<T>);                                     \
  template Var<T> depth_smoothness(Tape<T>&, Var<T>);                                    \
  template Var<T> noise_reg(Tape<T>&, Var<T>);                                           \
  template Var<T> delta_reg(Tape<T>&, Var<T>);                                           \
  template Var<T> rotation_loss(Tape<T>&, Var<T>, const Eigen::Matrix3d&);               \
  template Var<T> translation_loss(Tape<T>&, Var<T>, const Eigen::Vector3d&);            \
  template CompositeLoss<T> opt_loss(Tape<T>&, const PerceptualProxy<T>&, Var<T>,        \
                                     Var<T>, Var<T>, Var<T>, const LossWeights&);        \
  template CompositeLoss<T> pt_loss(Tape<T>&, const PerceptualProxy<T>&, Var<T>,         \
                                    Var<T>, Var<T>, const LossWeights&);                 \
  template CompositeLoss<T> encoder_loss(Tape<T>&, const PerceptualProxy<T>&, Var<T>,    \
                                         Var<T>, Var<T>, const LossWeights&);            \
  template CompositeLoss<T> pose_loss(Tape<T>&, Var<T>, Var<T>,                          \
                                      const camera::CameraPose&, const LossWeights&);

POVERT_INSTANTIATE(float)
POVERT_INSTANTIATE(double)
#undef POVERT_INSTANTIATE

}  // namespace povert::loss

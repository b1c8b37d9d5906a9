#include "povert/warp.hpp"

#include <cmath>

namespace povert::warp {

using ad::Tape;
using ad::Tensor;
using ad::Var;

CoordGrid project(const Tensor<double>& depth, const camera::RigidTransform& rel,
                  const camera::Intrinsics& k) {
  if (depth.rank() != 2) throw ShapeMismatch("project needs an (H,W) depth map");
  const int h = depth.shape[0], w = depth.shape[1];
  CoordGrid g;
  g.height = h;
  g.width = w;
  g.u.resize(static_cast<std::size_t>(h) * w);
  g.v.resize(g.u.size());
  g.mask.resize(g.u.size());
  const Eigen::Matrix3d& R = rel.R;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      const double d = depth.data[p];
      const double a = (x + 0.5 - k.cx) / k.fx;
      const double b = (y + 0.5 - k.cy) / k.fy;
      const double inv_d = 1.0 / std::max(d, 1e-6);
      const double A = R(0, 0) * a + R(0, 1) * b + R(0, 2) + rel.t[0] * inv_d;
      const double B = R(1, 0) * a + R(1, 1) * b + R(1, 2) + rel.t[1] * inv_d;
      const double C = R(2, 0) * a + R(2, 1) * b + R(2, 2) + rel.t[2] * inv_d;
      const double z_cam = d * C;
      if (d <= 1e-6 || z_cam <= 1e-6) {
        g.u[p] = -1.0;  // parked out of bounds; keeps mask <=> in-bounds
        g.v[p] = -1.0;
        g.mask[p] = 0;
        continue;
      }
      // Offset form: exactly the pixel grid when rel is the identity.
      const double uu = x + k.fx * (A - a * C) / C;
      const double vv = y + k.fy * (B - b * C) / C;
      g.u[p] = uu;
      g.v[p] = vv;
      g.mask[p] = uu >= 0.0 && uu <= w - 1.0 && vv >= 0.0 && vv <= h - 1.0;
    }
  }
  return g;
}

template <class T>
Tensor<T> bilinear_sample(const Tensor<T>& img, const CoordGrid& grid) {
  if (img.rank() != 3) throw ShapeMismatch("bilinear_sample needs (C,H,W)");
  Tape<T> tape;
  Var<T> iv = tape.constant(img);
  Tensor<T> u = Tensor<T>::zeros({static_cast<int>(grid.count())});
  Tensor<T> v = Tensor<T>::zeros({static_cast<int>(grid.count())});
  for (std::size_t i = 0; i < grid.count(); ++i) {
    u.data[i] = static_cast<T>(grid.u[i]);
    v.data[i] = static_cast<T>(grid.v[i]);
  }
  Var<T> out = tape.bilinear_sample(iv, tape.constant(std::move(u)),
                                    tape.constant(std::move(v)), grid.mask,
                                    grid.height, grid.width);
  return tape.val(out);
}

template Tensor<float> bilinear_sample(const Tensor<float>&, const CoordGrid&);
template Tensor<double> bilinear_sample(const Tensor<double>&, const CoordGrid&);

// ---------------------------------------------------------------------------

template <class T>
RelativeTransform<T> relative_from_canonical(Tape<T>& tape,
                                             const field::PoseGraph<T>& pose,
                                             const camera::CameraPose& canonical) {
  (void)tape;
  const camera::RigidTransform e_can = camera::camera_to_world(canonical);
  RelativeTransform<T> out;
  // rel maps canonical-camera coordinates into the pose's camera frame:
  // rel.R = R_x^T * R_can; rel.t = R_x^T * (C_can - C_x). Row i of R_x^T is
  // column i of R_x, i.e. entries rot[i], rot[3+i], rot[6+i].
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      out.rot[i * 3 + j] = pose.rot[i] * e_can.R(0, j) + pose.rot[3 + i] * e_can.R(1, j) +
                           pose.rot[6 + i] * e_can.R(2, j);
    }
    Var<T> cx = e_can.t[0] - pose.center[0];
    Var<T> cy = e_can.t[1] - pose.center[1];
    Var<T> cz = e_can.t[2] - pose.center[2];
    out.t[i] = pose.rot[i] * cx + pose.rot[3 + i] * cy + pose.rot[6 + i] * cz;
  }
  return out;
}

template <class T>
ProjectedGrid<T> project_graph(Tape<T>& tape, Var<T> depth, const RelativeTransform<T>& rel,
                               const camera::Intrinsics& k) {
  const Tensor<T>& D = tape.val(depth);
  if (D.rank() != 2) throw ShapeMismatch("project_graph needs an (H,W) depth map");
  const int h = D.shape[0], w = D.shape[1];
  const int n = h * w;

  Tensor<T> a_t = Tensor<T>::zeros({n, 1});
  Tensor<T> b_t = Tensor<T>::zeros({n, 1});
  Tensor<T> ug = Tensor<T>::zeros({n, 1});
  Tensor<T> vg = Tensor<T>::zeros({n, 1});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      a_t.data[p] = static_cast<T>((x + 0.5 - k.cx) / k.fx);
      b_t.data[p] = static_cast<T>((y + 0.5 - k.cy) / k.fy);
      ug.data[p] = static_cast<T>(x);
      vg.data[p] = static_cast<T>(y);
    }
  Var<T> a = tape.constant(std::move(a_t));
  Var<T> b = tape.constant(std::move(b_t));

  Var<T> inv_d = 1.0 / tape.clamp_min(tape.reshape(depth, {n, 1}), T(1e-6));
  Var<T> A = a * rel.rot[0] + b * rel.rot[1] + rel.rot[2] * 1.0 + rel.t[0] * inv_d;
  Var<T> B = a * rel.rot[3] + b * rel.rot[4] + rel.rot[5] * 1.0 + rel.t[1] * inv_d;
  Var<T> C = a * rel.rot[6] + b * rel.rot[7] + rel.rot[8] * 1.0 + rel.t[2] * inv_d;
  Var<T> c_safe = tape.clamp_min(C, T(1e-8));

  Var<T> uu = tape.constant(std::move(ug)) + k.fx * ((A - a * C) / c_safe);
  Var<T> vv = tape.constant(std::move(vg)) + k.fy * ((B - b * C) / c_safe);

  ProjectedGrid<T> out;
  out.u = tape.reshape(uu, {n});
  out.v = tape.reshape(vv, {n});
  out.mask.resize(n);
  const Tensor<T>& Du = tape.val(out.u);
  const Tensor<T>& Dv = tape.val(out.v);
  const Tensor<T>& Dd = tape.val(depth);
  const Tensor<T>& Dc = tape.val(C);
  for (int p = 0; p < n; ++p) {
    const double d = static_cast<double>(Dd.data[p]);
    const double z_cam = d * static_cast<double>(Dc.data[p]);
    const double cu = Du.data[p], cv = Dv.data[p];
    out.mask[p] = d > 1e-6 && z_cam > 1e-6 && cu >= 0.0 && cu <= w - 1.0 && cv >= 0.0 &&
                  cv <= h - 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
WarpLossResult<T> warp_loss_graph(Tape<T>& tape, const loss::PerceptualProxy<T>& proxy,
                                  Var<T> target, Var<T> w,
                                  const field::PoseGraph<T>& pose,
                                  const field::GeneratorLeaves<T>& theta,
                                  const field::GeneratorConfig& cfg,
                                  const WarpOptions& opts) {
  // Canonical render. Detached by default so the warp term moves only the
  // pose (the latent absorbs pose error otherwise).
  Var<T> w_can = opts.detach_canonical ? tape.detach(w) : w;
  field::GeneratorLeaves<T> theta_can = theta;
  if (opts.detach_canonical) {
    for (auto& v : theta_can.vars) v = tape.detach(v);
  }
  Tensor<double> can_params = field::pose_to_params(opts.canonical, field::PoseMode::kEuler);
  field::PoseGraph<T> can_graph = field::build_pose_graph(
      tape, tape.constant(can_params.template cast<T>()), field::PoseMode::kEuler,
      opts.canonical.radius);
  field::RenderGraph<T> can = field::render_graph(tape, w_can, can_graph, Var<T>{},
                                                  theta_can, cfg, true);

  // Each canonical pixel is pushed through its own depth into the pose's
  // view; the comparison image is sampled there and held against the
  // canonical render. Exact geometry — no cross-view depth approximation.
  RelativeTransform<T> rel = relative_from_canonical(tape, pose, opts.canonical);
  Var<T> depth_can = opts.detach_canonical ? tape.detach(can.depth) : can.depth;
  ProjectedGrid<T> grid = project_graph(tape, depth_can, rel, cfg.intrinsics());

  Var<T> sampled_src = target;
  if (opts.variant == WarpVariant::kAgainstRender) {
    field::GeneratorLeaves<T> theta_c = theta;
    for (auto& v : theta_c.vars) v = tape.detach(v);
    field::PoseGraph<T> pose_c;
    for (int i = 0; i < 9; ++i) pose_c.rot[i] = tape.detach(pose.rot[i]);
    for (int i = 0; i < 3; ++i) pose_c.center[i] = tape.detach(pose.center[i]);
    field::RenderGraph<T> cur = field::render_graph(tape, tape.detach(w), pose_c, Var<T>{},
                                                    theta_c, cfg, true);
    sampled_src = cur.image;
  }

  Var<T> warped = tape.bilinear_sample(sampled_src, grid.u, grid.v, grid.mask,
                                       cfg.image_size, cfg.image_size);

  Var<T> can_img = opts.detach_canonical ? tape.detach(can.image) : can.image;
  typename loss::PerceptualProxy<T>::MaskedResult m =
      proxy.masked(tape, can_img, warped, grid.mask);

  WarpLossResult<T> out;
  out.value = m.value;
  out.mask_empty = m.mask_empty;
  std::size_t nvalid = 0;
  for (auto v : grid.mask) nvalid += v;
  out.valid_fraction = grid.mask.empty() ? 0.0
                                         : static_cast<double>(nvalid) / grid.mask.size();
  return out;
}

#define POVERT_INSTANTIATE(T)                                                              \
  template RelativeTransform<T> relative_from_canonical(Tape<T>&, const field::PoseGraph<T>&, \
                                                        const camera::CameraPose&);        \
  template ProjectedGrid<T> project_graph(Tape<T>&, Var<T>, const RelativeTransform<T>&,   \
                                          const camera::Intrinsics&);                      \
  template WarpLossResult<T> warp_loss_graph(Tape<T>&, const loss::PerceptualProxy<T>&,    \
                                             Var<T>, Var<T>, const field::PoseGraph<T>&,   \
                                             const field::GeneratorLeaves<T>&,             \
                                             const field::GeneratorConfig&,                \
                                             const WarpOptions&);

POVERT_INSTANTIATE(float)
POVERT_INSTANTIATE(double)
#undef POVERT_INSTANTIATE

}  // namespace povert::warp

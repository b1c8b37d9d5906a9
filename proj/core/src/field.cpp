#include "povert/field.hpp"

#include <cmath>

namespace povert::field {

using ad::Tape;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// FieldParams
// ---------------------------------------------------------------------------

template <class T>
std::vector<const Tensor<T>*> FieldParams<T>::tensors() const {
  std::vector<const Tensor<T>*> v{&map_w1, &map_b1, &map_w2, &map_b2};
  for (int l = 0; l < 3; ++l) {
    v.push_back(&mod_scale_w[l]);
    v.push_back(&mod_scale_b[l]);
    v.push_back(&mod_shift_w[l]);
    v.push_back(&mod_shift_b[l]);
    v.push_back(&lin_w[l]);
    v.push_back(&lin_b[l]);
  }
  v.push_back(&sigma_w);
  v.push_back(&sigma_b);
  v.push_back(&color_w);
  v.push_back(&color_b);
  return v;
}

template <class T>
std::vector<Tensor<T>*> FieldParams<T>::tensors() {
  std::vector<Tensor<T>*> out;
  for (auto* p : const_cast<const FieldParams*>(this)->tensors())
    out.push_back(const_cast<Tensor<T>*>(p));
  return out;
}

template <class T>
std::size_t FieldParams<T>::param_count() const {
  std::size_t n = 0;
  for (auto* t : tensors()) n += t->count();
  return n;
}

template <class T>
Tensor<T> FieldParams<T>::flat() const {
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(param_count())});
  std::size_t off = 0;
  for (auto* t : tensors()) {
    std::copy(t->data.begin(), t->data.end(), out.data.begin() + off);
    off += t->count();
  }
  return out;
}

template <class T>
void FieldParams<T>::set_flat(const Tensor<T>& v) {
  if (v.count() != param_count()) throw ShapeMismatch("set_flat size mismatch");
  std::size_t off = 0;
  for (auto* t : tensors()) {
    std::copy(v.data.begin() + off, v.data.begin() + off + t->count(), t->data.begin());
    off += t->count();
  }
}

template <class T>
FieldParams<T> FieldParams<T>::random_init(const GeneratorConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xF1E1D));
  auto dense = [&](int in, int out, double gain) {
    return Tensor<T>::gaussian({in, out}, rng, static_cast<T>(gain / std::sqrt(in)));
  };
  auto bias = [&](int out) { return Tensor<T>::zeros({1, out}); };

  FieldParams p;
  p.map_w1 = dense(cfg.z_dim, cfg.map_hidden, 1.0);
  p.map_b1 = bias(cfg.map_hidden);
  p.map_w2 = dense(cfg.map_hidden, cfg.w_dim, 1.0);
  p.map_b2 = bias(cfg.w_dim);
  const int wd = cfg.field_width;
  for (int l = 0; l < 3; ++l) {
    p.mod_scale_w[l] = dense(cfg.w_dim, wd, 1.0);
    p.mod_scale_b[l] = bias(wd);
    p.mod_shift_w[l] = dense(cfg.w_dim, wd, 1.0);
    p.mod_shift_b[l] = bias(wd);
    p.lin_w[l] = dense(l == 0 ? cfg.posenc_dim() : wd, wd, std::sqrt(2.0));
    p.lin_b[l] = bias(wd);
  }
  p.sigma_w = dense(wd, 1, 1.0);
  p.sigma_b = bias(1);
  p.color_w = dense(wd, 3, 1.0);
  p.color_b = bias(3);
  return p;
}

template <class T>
FieldParams<T> perturb_params(const FieldParams<T>& p, double magnitude, std::uint64_t seed) {
  if (magnitude < 0) throw Error("perturb_params magnitude must be >= 0");
  FieldParams<T> out = p;
  if (magnitude == 0) return out;
  Rng rng(derive_seed(seed, 0x9E27B));
  Tensor<T> flat = p.flat();
  Tensor<T> dir = Tensor<T>::gaussian(flat.shape, rng);
  const double n = dir.norm();
  for (std::size_t i = 0; i < flat.data.size(); ++i)
    flat.data[i] += static_cast<T>(magnitude * static_cast<double>(dir.data[i]) / n);
  out.set_flat(flat);
  return out;
}

// ---------------------------------------------------------------------------
// Latent sampling
// ---------------------------------------------------------------------------

namespace {

template <class T>
void affine_row(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Tensor<T>& out) {
  const int in = w.shape[0], on = w.shape[1];
  out = Tensor<T>::zeros({1, on});
  for (int j = 0; j < on; ++j) {
    T acc = b.data[j];
    for (int i = 0; i < in; ++i) acc += x.data[i] * w.at(i, j);
    out.data[j] = acc;
  }
}

template <class T>
T silu_scalar(T x) {
  const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  return x * s;
}

}  // namespace

template <class T>
Tensor<T> sample_latent(const FieldParams<T>& p, const GeneratorConfig& cfg,
                        std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5A17));
  Tensor<T> z = Tensor<T>::zeros({1, cfg.z_dim});
  for (auto& x : z.data) x = static_cast<T>(rng.gaussian());
  Tensor<T> h;
  affine_row(z, p.map_w1, p.map_b1, h);
  if (!cfg.mapping_linear)
    for (auto& x : h.data) x = silu_scalar(x);
  Tensor<T> w;
  affine_row(h, p.map_w2, p.map_b2, w);
  return w;
}

template <class T>
Tensor<T> average_latent(const FieldParams<T>& p, const GeneratorConfig& cfg,
                         int n_samples, std::uint64_t seed_base) {
  if (n_samples < 1000) throw Error("average_latent needs n_samples >= 1000");
  std::vector<double> acc(cfg.w_dim, 0.0);
  for (int i = 0; i < n_samples; ++i) {
    Tensor<T> w = sample_latent(p, cfg, derive_seed(seed_base, static_cast<std::uint64_t>(i)));
    for (int j = 0; j < cfg.w_dim; ++j) acc[j] += static_cast<double>(w.data[j]);
  }
  Tensor<T> out = Tensor<T>::zeros({1, cfg.w_dim});
  for (int j = 0; j < cfg.w_dim; ++j) out.data[j] = static_cast<T>(acc[j] / n_samples);
  return out;
}

// ---------------------------------------------------------------------------
// Pose parameterization
// ---------------------------------------------------------------------------

Tensor<double> pose_to_params(const camera::CameraPose& p, PoseMode mode) {
  if (mode == PoseMode::kEuler) {
    return Tensor<double>::from({5}, {p.yaw, p.pitch, p.t[0], p.t[1], p.t[2]});
  }
  auto [rot, center] = camera::pose_to_extrinsics(p);
  (void)center;
  const camera::SixDRotation sd = camera::rotation_to_sixd(rot);
  return Tensor<double>::from({9}, {sd.a1[0], sd.a1[1], sd.a1[2],  //
                                    sd.a2[0], sd.a2[1], sd.a2[2],  //
                                    p.t[0], p.t[1], p.t[2]});
}

camera::CameraPose pose_from_params(const Tensor<double>& v, PoseMode mode, double radius) {
  camera::CameraPose p;
  p.radius = radius;
  if (mode == PoseMode::kEuler) {
    if (v.count() != 5) throw ShapeMismatch("euler pose params need 5 entries");
    p.yaw = v.data[0];
    p.pitch = v.data[1];
    p.t = {v.data[2], v.data[3], v.data[4]};
    return p;
  }
  if (v.count() != 9) throw ShapeMismatch("6D pose params need 9 entries");
  camera::SixDRotation sd;
  sd.a1 = {v.data[0], v.data[1], v.data[2]};
  sd.a2 = {v.data[3], v.data[4], v.data[5]};
  const camera::RotationMatrix r = camera::sixd_to_rotation(sd);
  return camera::pose_from_rotation(r, {v.data[6], v.data[7], v.data[8]}, radius);
}

template <class T>
PoseGraph<T> build_pose_graph(Tape<T>& tape, Var<T> pose_params, PoseMode mode,
                              double radius) {
  PoseGraph<T> g;
  camera::Mat3Entries<Var<T>> rot;
  Var<T> tx, ty, tz;
  if (mode == PoseMode::kEuler) {
    Var<T> yaw = tape.index(pose_params, 0);
    Var<T> pitch = tape.index(pose_params, 1);
    rot = camera::rotation_entries_from_euler(yaw, pitch);
    tx = tape.index(pose_params, 2);
    ty = tape.index(pose_params, 3);
    tz = tape.index(pose_params, 4);
  } else {
    std::array<Var<T>, 3> a1{tape.index(pose_params, 0), tape.index(pose_params, 1),
                             tape.index(pose_params, 2)};
    std::array<Var<T>, 3> a2{tape.index(pose_params, 3), tape.index(pose_params, 4),
                             tape.index(pose_params, 5)};
    rot = camera::rotation_entries_from_sixd(a1, a2);
    tx = tape.index(pose_params, 6);
    ty = tape.index(pose_params, 7);
    tz = tape.index(pose_params, 8);
  }
  g.rot = rot;
  g.center = {rot[2] * -radius + tx, rot[5] * -radius + ty, rot[8] * -radius + tz};
  return g;
}

// ---------------------------------------------------------------------------
// Neural field
// ---------------------------------------------------------------------------

template <class T>
std::pair<Var<T>, Var<T>> NeuralFieldProgram<T>::emit(Tape<T>& tape,
                                                      Var<T> positions) const {
  const GeneratorConfig& cfg = *cfg_;
  const auto& th = theta_->vars;
  // tensors() order: 4 mapping tensors, then 6 per layer, then 4 head tensors.
  auto layer = [&](int l, int piece) { return th[4 + l * 6 + piece]; };

  std::vector<Var<T>> parts{positions};
  for (int l = 0; l < cfg.posenc_freqs; ++l) {
    const double f = std::pow(2.0, l);
    Var<T> scaled = tape.scale(positions, static_cast<T>(f));
    parts.push_back(tape.sin_(scaled));
    parts.push_back(tape.cos_(scaled));
  }
  Var<T> h = tape.concat_cols(parts);

  for (int l = 0; l < 3; ++l) {
    Var<T> pre = tape.matmul(h, layer(l, 4)) + layer(l, 5);
    Var<T> s = 1.0 + cfg.modulation_scale * (tape.matmul(w_, layer(l, 0)) + layer(l, 1));
    Var<T> sh = cfg.modulation_scale * (tape.matmul(w_, layer(l, 2)) + layer(l, 3));
    h = tape.silu(pre * s + sh);
  }
  Var<T> sigma_pre = tape.matmul(h, th[22]) + th[23];
  Var<T> sigma = tape.scale(
      tape.softplus(tape.add_const(sigma_pre, static_cast<T>(cfg.density_bias))),
      static_cast<T>(cfg.density_scale));
  Var<T> rgb = tape.sigmoid(tape.matmul(h, th[24]) + th[25]);
  return {sigma, rgb};
}

template <class T>
GeneratorLeaves<T> make_theta_vars(Tape<T>& tape, const FieldParams<T>& p,
                                   bool differentiable) {
  GeneratorLeaves<T> out;
  int i = 0;
  for (auto* t : p.tensors()) {
    out.vars.push_back(differentiable ? tape.leaf(*t, "theta:" + std::to_string(i))
                                      : tape.constant(*t));
    ++i;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Volume rendering
// ---------------------------------------------------------------------------

template <class T>
RenderGraph<T> render_graph(Tape<T>& tape, const FieldProgram<T>& field,
                            const PoseGraph<T>& pose, Var<T> noise,
                            const GeneratorConfig& cfg, bool want_color) {
  const int M = cfg.samples_per_ray;
  if (M < 2) throw InvalidSampleCount("samples_per_ray must be >= 2");
  const int H = cfg.image_size, W = cfg.image_size;
  const int rays = H * W;
  const camera::Intrinsics k = cfg.intrinsics();

  // Camera-frame ray grid (constant).
  Tensor<T> dirs_cam = Tensor<T>::zeros({rays, 3});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const int r = i * W + j;
      dirs_cam.at(r, 0) = static_cast<T>((j + 0.5 - k.cx) / k.fx);
      dirs_cam.at(r, 1) = static_cast<T>((i + 0.5 - k.cy) / k.fy);
      dirs_cam.at(r, 2) = T(1);
    }

  Var<T> rot = tape.stack_scalars({3, 3}, std::vector<Var<T>>(pose.rot.begin(), pose.rot.end()));
  Var<T> dirs_w = tape.matmul(tape.constant(std::move(dirs_cam)), tape.transpose(rot));
  Var<T> nrm = tape.sqrt_(tape.sum_axis(dirs_w * dirs_w, 1));
  Var<T> dirs = dirs_w / nrm;

  // Stratified sample depths and spacings (constants; jitter fixed per run).
  const double near = cfg.near(), far = cfg.far();
  const double bin = (far - near) / M;
  Tensor<T> tvals = Tensor<T>::zeros({rays, M});
  Tensor<T> deltas = Tensor<T>::zeros({rays, M});
  {
    Rng jrng(derive_seed(cfg.jitter_seed, 0x7177E8));
    std::vector<double> row(M);
    for (int r = 0; r < rays; ++r) {
      for (int i = 0; i < M; ++i) {
        const double u = cfg.jitter ? jrng.uniform() : 0.5;
        row[i] = near + (i + u) * bin;
        tvals.at(r, i) = static_cast<T>(row[i]);
      }
      for (int i = 0; i < M; ++i)
        deltas.at(r, i) = static_cast<T>((i + 1 < M ? row[i + 1] : far) - row[i]);
    }
  }
  Var<T> tvals_c = tape.constant(tvals);
  Var<T> deltas_c = tape.constant(std::move(deltas));

  Var<T> center = tape.stack_scalars(
      {1, 3}, {pose.center[0], pose.center[1], pose.center[2]});
  Var<T> tflat = tape.reshape(tvals_c, {rays * M, 1});
  Var<T> positions = tape.repeat_rows(dirs, M) * tflat + center;

  auto [sigma, rgb] = field.emit(tape, positions);

  RenderGraph<T> g;
  Var<T> sig_rm = tape.reshape(sigma, {rays, M});
  Var<T> sd = sig_rm * deltas_c;
  Var<T> trans = ad::exp(-tape.cumsum_exclusive(sd));
  Var<T> alpha = 1.0 - ad::exp(-sd);
  Var<T> wts = trans * alpha;
  Var<T> t_res = ad::exp(-tape.sum_axis(sd, 1));  // (rays,1)
  Var<T> opacity = 1.0 - t_res;

  // Depth is zeroed on near-empty rays; the mask is a constant built from
  // forward opacity (held fixed in backward).
  Var<T> d_flat = tape.sum_axis(wts * tvals_c, 1);
  Tensor<T> opaque = Tensor<T>::zeros({rays, 1});
  for (int r = 0; r < rays; ++r)
    opaque.data[r] = tape.val(opacity).data[r] >= T(1e-3) ? T(1) : T(0);
  g.depth = tape.reshape(d_flat * tape.constant(std::move(opaque)), {H, W});
  g.opacity = tape.reshape(opacity, {H, W});
  g.trans = trans;
  g.weights = wts;

  if (want_color) {
    std::vector<Var<T>> chans;
    for (int c = 0; c < 3; ++c) {
      Var<T> cch = tape.reshape(tape.slice_cols(rgb, c, c + 1), {rays, M});
      chans.push_back(tape.sum_axis(wts * cch, 1) + t_res);  // white background
    }
    Var<T> img = tape.concat_cols(chans);  // (rays, 3)
    if (noise.valid()) img = img + tape.reshape(noise, {rays, 1});
    img = tape.softclamp01(img);
    g.image = tape.reshape(tape.transpose(img), {3, H, W});
  }
  return g;
}

template <class T>
RenderGraph<T> render_graph(Tape<T>& tape, Var<T> w, const PoseGraph<T>& pose,
                            Var<T> noise, const GeneratorLeaves<T>& theta,
                            const GeneratorConfig& cfg, bool want_color) {
  NeuralFieldProgram<T> prog(w, theta, cfg);
  return render_graph(tape, prog, pose, noise, cfg, want_color);
}

// ---------------------------------------------------------------------------
// Plain wrappers
// ---------------------------------------------------------------------------

namespace {

template <class T>
PoseGraph<T> const_pose_graph(Tape<T>& tape, const camera::CameraPose& pose) {
  const PoseMode mode = pose.roll != 0.0 ? PoseMode::kSixD : PoseMode::kEuler;
  Tensor<double> pd = pose_to_params(pose, mode);
  return build_pose_graph(tape, tape.constant(pd.template cast<T>()), mode, pose.radius);
}

}  // namespace

template <class T>
RenderOutput<T> render(const Tensor<T>& w, const camera::CameraPose& pose,
                       const Tensor<T>* noise, const FieldParams<T>& params,
                       const GeneratorConfig& cfg) {
  Tape<T> tape;
  Var<T> wv = tape.constant(w);
  PoseGraph<T> pg = const_pose_graph(tape, pose);
  GeneratorLeaves<T> th = make_theta_vars(tape, params, false);
  Var<T> nv;
  if (noise != nullptr) nv = tape.constant(*noise);
  RenderGraph<T> g = render_graph(tape, wv, pg, nv, th, cfg, true);
  return {tape.val(g.image), tape.val(g.depth)};
}

template <class T>
Tensor<T> render_depth_only(const Tensor<T>& w, const camera::CameraPose& pose,
                            const FieldParams<T>& params, const GeneratorConfig& cfg) {
  Tape<T> tape;
  Var<T> wv = tape.constant(w);
  PoseGraph<T> pg = const_pose_graph(tape, pose);
  GeneratorLeaves<T> th = make_theta_vars(tape, params, false);
  RenderGraph<T> g = render_graph(tape, wv, pg, ad::Var<T>{}, th, cfg, false);
  return tape.val(g.depth);
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

template struct FieldParams<float>;
template struct FieldParams<double>;
template class NeuralFieldProgram<float>;
template class NeuralFieldProgram<double>;

template FieldParams<float> perturb_params(const FieldParams<float>&, double, std::uint64_t);
template FieldParams<double> perturb_params(const FieldParams<double>&, double, std::uint64_t);
template Tensor<float> sample_latent(const FieldParams<float>&, const GeneratorConfig&, std::uint64_t);
template Tensor<double> sample_latent(const FieldParams<double>&, const GeneratorConfig&, std::uint64_t);
template Tensor<float> average_latent(const FieldParams<float>&, const GeneratorConfig&, int, std::uint64_t);
template Tensor<double> average_latent(const FieldParams<double>&, const GeneratorConfig&, int, std::uint64_t);
template PoseGraph<float> build_pose_graph(Tape<float>&, Var<float>, PoseMode, double);
template PoseGraph<double> build_pose_graph(Tape<double>&, Var<double>, PoseMode, double);
template GeneratorLeaves<float> make_theta_vars(Tape<float>&, const FieldParams<float>&, bool);
template GeneratorLeaves<double> make_theta_vars(Tape<double>&, const FieldParams<double>&, bool);
template RenderGraph<float> render_graph(Tape<float>&, const FieldProgram<float>&,
                                         const PoseGraph<float>&, Var<float>,
                                         const GeneratorConfig&, bool);
template RenderGraph<double> render_graph(Tape<double>&, const FieldProgram<double>&,
                                          const PoseGraph<double>&, Var<double>,
                                          const GeneratorConfig&, bool);
template RenderGraph<float> render_graph(Tape<float>&, Var<float>, const PoseGraph<float>&,
                                         Var<float>, const GeneratorLeaves<float>&,
                                         const GeneratorConfig&, bool);
template RenderGraph<double> render_graph(Tape<double>&, Var<double>, const PoseGraph<double>&,
                                          Var<double>, const GeneratorLeaves<double>&,
                                          const GeneratorConfig&, bool);
template RenderOutput<float> render(const Tensor<float>&, const camera::CameraPose&,
                                    const Tensor<float>*, const FieldParams<float>&,
                                    const GeneratorConfig&);
template RenderOutput<double> render(const Tensor<double>&, const camera::CameraPose&,
                                     const Tensor<double>*, const FieldParams<double>&,
                                     const GeneratorConfig&);
template Tensor<float> render_depth_only(const Tensor<float>&, const camera::CameraPose&,
                                         const FieldParams<float>&, const GeneratorConfig&);
template Tensor<double> render_depth_only(const Tensor<double>&, const camera::CameraPose&,
                                          const FieldParams<double>&, const GeneratorConfig&);

}  // namespace povert::field

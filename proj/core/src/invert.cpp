#include "povert/invert.hpp"

#include <cmath>

namespace povert::invert {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

template <class T>
diff::ParamSet<T> pivot_params(const Tensor<T>& w, const camera::CameraPose& pose,
                               const Tensor<T>& noise, field::PoseMode mode) {
  diff::ParamSet<T> ps;
  ps.add("latent").tensors.push_back(w);
  ps.add("pose").tensors.push_back(
      field::pose_to_params(pose, mode).template cast<T>());
  ps.add("noise").tensors.push_back(noise);
  return ps;
}

template <class T>
camera::CameraPose clamp_pose_params(diff::ParamSet<T>& ps, field::PoseMode mode,
                                     double radius, const camera::PoseBox& box) {
  Tensor<T>& raw = ps.find("pose")->tensors[0];
  camera::CameraPose pose =
      field::pose_from_params(raw.template cast<double>(), mode, radius);
  pose = box.clamp_extended(pose);
  raw = field::pose_to_params(pose, mode).template cast<T>();
  return pose;
}

// Patience-based convergence tracking on the total loss.
class ConvergenceWatch {
 public:
  ConvergenceWatch(double tol, int patience) : tol_(tol), patience_(patience) {}
  // Returns true when it is time to stop.
  bool update(double total) {
    if (total < best_ - tol_) {
      best_ = total;
      since_ = 0;
    } else {
      ++since_;
    }
    return since_ >= patience_;
  }

 private:
  double tol_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int since_ = 0;
};

}  // namespace

template <class T>
PivotResult<T> optimize_pivot(const Tensor<T>& target, const Tensor<T>& w_init,
                              const camera::CameraPose& pose_init,
                              const field::FieldParams<T>& theta,
                              const field::GeneratorConfig& gen_cfg,
                              const InversionConfig& cfg) {
  cfg.validate();
  const int hw = gen_cfg.image_size;
  loss::PerceptualProxy<T> proxy;
  diff::ParamSet<T> ps =
      pivot_params(w_init, pose_init, Tensor<T>::zeros({hw, hw}), cfg.pose_mode);
  diff::GroupOptimizer<T> opt(cfg.optimizer, ps);

  PivotResult<T> out;
  out.pose = pose_init;
  ConvergenceWatch watch(cfg.convergence_tol, cfg.patience);

  for (int iter = 0; iter < cfg.max_iters_opt; ++iter) {
    double lpips_v = 0, noise_v = 0, warp_v = 0;

    if (cfg.simultaneous_updates) {
      // Ablation path: one combined objective, one step over all groups.
      diff::LossProgram<T> program = [&](Tape<T>& tape, const diff::Leaves<T>& lv) {
        Var<T> wv = lv.vars[0][0];
        Var<T> pv = lv.vars[1][0];
        Var<T> nv = lv.vars[2][0];
        field::PoseGraph<T> pg =
            field::build_pose_graph(tape, pv, cfg.pose_mode, gen_cfg.radius);
        field::GeneratorLeaves<T> th = field::make_theta_vars(tape, theta, false);
        field::RenderGraph<T> rg = field::render_graph(tape, wv, pg, nv, th, gen_cfg, true);
        Var<T> xv = tape.constant(target);
        warp::WarpOptions wo;
        wo.canonical = cfg.canonical;
        wo.variant = cfg.warp_variant;
        wo.detach_canonical = cfg.detach_canonical;
        warp::WarpLossResult<T> wl =
            warp_loss_graph(tape, proxy, xv, wv, pg, th, gen_cfg, wo);
        if (wl.mask_empty) out.mask_empty_seen = true;
        loss::CompositeLoss<T> l =
            loss::opt_loss(tape, proxy, xv, rg.image, wl.value, nv, cfg.weights);
        lpips_v = tape.val(l.terms[0].second).value();
        warp_v = tape.val(wl.value).value();
        noise_v = tape.val(l.terms.back().second).value();
        return l.total;
      };
      diff::GradReport<T> g = diff::backward(program, ps);
      opt.step(ps, g,
               {{"latent", cfg.lr_w}, {"pose", cfg.lr_pose}, {"noise", cfg.lr_noise}});
    } else {
      // Alternation: latent/noise on the reconstruction objective...
      diff::LossProgram<T> w_program = [&](Tape<T>& tape, const diff::Leaves<T>& lv) {
        Var<T> wv = lv.vars[0][0];
        Var<T> nv = lv.vars[2][0];
        field::PoseGraph<T> pg =
            field::build_pose_graph(tape, lv.vars[1][0], cfg.pose_mode, gen_cfg.radius);
        field::GeneratorLeaves<T> th = field::make_theta_vars(tape, theta, false);
        field::RenderGraph<T> rg = field::render_graph(tape, wv, pg, nv, th, gen_cfg, true);
        loss::CompositeLoss<T> l = loss::opt_loss(tape, proxy, tape.constant(target),
                                                  rg.image, Var<T>{}, nv, cfg.weights);
        lpips_v = tape.val(l.terms[0].second).value();
        noise_v = tape.val(l.terms.back().second).value();
        return l.total;
      };
      diff::GradReport<T> gw = diff::backward(w_program, ps);
      opt.step(ps, gw, {{"latent", cfg.lr_w}, {"noise", cfg.lr_noise}});

      // ...then pose on the warping objective.
      diff::LossProgram<T> pose_program = [&](Tape<T>& tape, const diff::Leaves<T>& lv) {
        Var<T> wv = lv.vars[0][0];
        field::PoseGraph<T> pg =
            field::build_pose_graph(tape, lv.vars[1][0], cfg.pose_mode, gen_cfg.radius);
        field::GeneratorLeaves<T> th = field::make_theta_vars(tape, theta, false);
        warp::WarpOptions wo;
        wo.canonical = cfg.canonical;
        wo.variant = cfg.warp_variant;
        wo.detach_canonical = cfg.detach_canonical;
        warp::WarpLossResult<T> wl = warp_loss_graph(tape, proxy, tape.constant(target),
                                                     wv, pg, th, gen_cfg, wo);
        if (wl.mask_empty) out.mask_empty_seen = true;
        warp_v = tape.val(wl.value).value();
        return tape.scale(wl.value, static_cast<T>(cfg.weights.warp));
      };
      diff::GradReport<T> gp = diff::backward(pose_program, ps);
      opt.step(ps, gp, {{"pose", cfg.lr_pose}});
    }

    out.pose = clamp_pose_params(ps, cfg.pose_mode, gen_cfg.radius, cfg.box);
    const double total = lpips_v + cfg.weights.warp * warp_v + cfg.weights.noise * noise_v;
    out.trace.push_back({iter, "lpips", lpips_v});
    out.trace.push_back({iter, "warp", warp_v});
    out.trace.push_back({iter, "noise", noise_v});
    out.trace.push_back({iter, "yaw_rad", out.pose.yaw});
    out.trace.push_back({iter, "pitch_rad", out.pose.pitch});
    out.trace.push_back({iter, "total", total});
    out.iterations = iter + 1;
    if (watch.update(total)) {
      out.converged_at = iter + 1;
      break;
    }
  }

  out.w = ps.find("latent")->tensors[0];
  out.noise = ps.find("noise")->tensors[0];
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <class T>
struct LocalitySample {
  Tensor<T> w_int;  // interpolated latent
  camera::CameraPose pose;
};

template <class T>
LocalitySample<T> locality_sample(const Tensor<T>& w_star,
                                  const field::FieldParams<T>& theta_orig,
                                  const field::GeneratorConfig& gen_cfg,
                                  const InversionConfig& cfg, std::uint64_t index) {
  LocalitySample<T> s;
  Tensor<T> w_r = field::sample_latent(theta_orig, gen_cfg,
                                       derive_seed(cfg.seed, 0x10CA1 + index));
  Tensor<T> dir = w_r;
  double norm2 = 0;
  for (std::size_t i = 0; i < dir.data.size(); ++i) {
    dir.data[i] = w_r.data[i] - w_star.data[i];
    norm2 += static_cast<double>(dir.data[i]) * dir.data[i];
  }
  const double inv = cfg.locality_alpha / std::max(std::sqrt(norm2), 1e-12);
  s.w_int = w_star;
  for (std::size_t i = 0; i < dir.data.size(); ++i)
    s.w_int.data[i] = static_cast<T>(w_star.data[i] + inv * dir.data[i]);

  // One fixed random pose per run.
  Rng prng(derive_seed(cfg.seed, 0x10CA1));
  auto [yaw, pitch] = cfg.box.sample_angles(prng);
  s.pose.yaw = yaw;
  s.pose.pitch = pitch;
  s.pose.radius = gen_cfg.radius;
  return s;
}

}  // namespace

template <class T>
TuneResult<T> pivotal_tune(const Tensor<T>& target, const Tensor<T>& w_star,
                           const camera::CameraPose& pose_star, const Tensor<T>& noise_star,
                           const field::FieldParams<T>& theta,
                           const field::GeneratorConfig& gen_cfg, const InversionConfig& cfg) {
  cfg.validate();
  loss::PerceptualProxy<T> proxy;
  diff::ParamSet<T> ps;
  auto& g = ps.add("field");
  for (auto* t : theta.tensors()) g.tensors.push_back(*t);
  diff::GroupOptimizer<T> opt(cfg.optimizer, ps);

  TuneResult<T> out;
  double lr_scale = 1.0;

  const Tensor<T> pose_params =
      field::pose_to_params(pose_star, field::PoseMode::kEuler).template cast<T>();

  for (int iter = 0; iter < cfg.max_iters_pt; ++iter) {
    double lpips_v = 0, l2_v = 0, dr_v = 0, loc_v = 0;
    LocalitySample<T> loc;
    Tensor<T> loc_ref_img;
    if (cfg.locality_enabled) {
      loc = locality_sample(w_star, theta, gen_cfg, cfg, static_cast<std::uint64_t>(iter));
      loc_ref_img = field::render(loc.w_int, loc.pose, theta, gen_cfg).image;
    }

    diff::LossProgram<T> program = [&](Tape<T>& tape, const diff::Leaves<T>& lv) {
      field::GeneratorLeaves<T> th;
      th.vars = lv.vars[0];
      field::PoseGraph<T> pg = field::build_pose_graph(
          tape, tape.constant(pose_params), field::PoseMode::kEuler, gen_cfg.radius);
      field::RenderGraph<T> rg = field::render_graph(
          tape, tape.constant(w_star), pg, tape.constant(noise_star), th, gen_cfg, true);
      loss::CompositeLoss<T> l =
          loss::pt_loss(tape, proxy, tape.constant(target), rg.image, rg.depth, cfg.weights);
      lpips_v = tape.val(l.terms[0].second).value();
      l2_v = tape.val(l.terms[1].second).value();
      dr_v = tape.val(l.terms[2].second).value();
      Var<T> total = l.total;
      if (cfg.locality_enabled) {
        Tensor<double> lp = field::pose_to_params(loc.pose, field::PoseMode::kEuler);
        field::PoseGraph<T> lpg = field::build_pose_graph(
            tape, tape.constant(lp.template cast<T>()), field::PoseMode::kEuler,
            gen_cfg.radius);
        field::RenderGraph<T> lr =
            field::render_graph(tape, tape.constant(loc.w_int), lpg, Var<T>{}, th, gen_cfg, true);
        Var<T> ref = tape.constant(loc_ref_img);
        Var<T> term = proxy(tape, ref, lr.image) +
                      tape.scale(loss::l2_loss(tape, ref, lr.image),
                                 static_cast<T>(cfg.weights.l2));
        loc_v = tape.val(term).value();
        total = total + tape.scale(term, static_cast<T>(cfg.weights.locality));
      }
      return total;
    };

    std::vector<Tensor<T>> backup;
    if (cfg.backtracking_guard) backup = ps.groups[0].tensors;

    diff::GradReport<T> grads = diff::backward(program, ps);
    opt.step(ps, grads, {{"field", cfg.lr_theta * lr_scale}});

    double total_v = grads.loss;
    if (cfg.backtracking_guard) {
      // Accept the step only if the objective did not get worse at the new
      // parameters; otherwise revert and permanently shrink the step size.
      // The recorded trace is then non-increasing (for a stationary
      // objective, i.e. locality disabled).
      const double after = diff::evaluate(program, ps);
      if (after <= grads.loss) {
        total_v = after;
      } else {
        ps.groups[0].tensors = backup;
        lr_scale *= 0.5;
        total_v = grads.loss;
      }
    }
    out.trace.push_back({iter, "lpips", lpips_v});
    out.trace.push_back({iter, "l2", l2_v});
    out.trace.push_back({iter, "depth_reg", dr_v});
    if (cfg.locality_enabled) out.trace.push_back({iter, "locality", loc_v});
    out.trace.push_back({iter, "total", total_v});
    out.iterations = iter + 1;
  }

  out.theta = theta;
  {
    auto dst = out.theta.tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = ps.groups[0].tensors[i];
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
double locality_reg(const field::FieldParams<T>& theta_tuned,
                    const field::FieldParams<T>& theta_orig, const Tensor<T>& w_star,
                    const field::GeneratorConfig& gen_cfg, const InversionConfig& cfg,
                    std::uint64_t sample_index) {
  LocalitySample<T> s = locality_sample(w_star, theta_orig, gen_cfg, cfg, sample_index);
  field::RenderOutput<T> a = field::render(s.w_int, s.pose, theta_orig, gen_cfg);
  field::RenderOutput<T> b = field::render(s.w_int, s.pose, theta_tuned, gen_cfg);
  loss::PerceptualProxy<T> proxy;
  Tape<T> tape;
  Var<T> av = tape.constant(a.image);
  Var<T> bv = tape.constant(b.image);
  Var<T> v = proxy(tape, av, bv) +
             tape.scale(loss::l2_loss(tape, av, bv), static_cast<T>(cfg.weights.l2));
  return static_cast<double>(tape.val(v).value());
}

// ---------------------------------------------------------------------------

template <class T>
InversionResult<T> invert_gt_pose(const Tensor<T>& target, const camera::CameraPose& pose_gt,
                                  const Tensor<T>& w_init, const field::FieldParams<T>& theta,
                                  const field::GeneratorConfig& gen_cfg,
                                  const InversionConfig& cfg, bool tune) {
  cfg.validate();
  loss::PerceptualProxy<T> proxy;
  diff::ParamSet<T> ps;
  ps.add("latent").tensors.push_back(w_init);
  diff::GroupOptimizer<T> opt(cfg.optimizer, ps);
  const Tensor<T> pose_params =
      field::pose_to_params(pose_gt, field::PoseMode::kEuler).template cast<T>();

  InversionResult<T> out;
  out.pose = pose_gt;
  out.noise = Tensor<T>::zeros({gen_cfg.image_size, gen_cfg.image_size});
  ConvergenceWatch watch(cfg.convergence_tol, cfg.patience);

  for (int iter = 0; iter < cfg.max_iters_opt; ++iter) {
    diff::LossProgram<T> program = [&](Tape<T>& tape, const diff::Leaves<T>& lv) {
      field::PoseGraph<T> pg = field::build_pose_graph(
          tape, tape.constant(pose_params), field::PoseMode::kEuler, gen_cfg.radius);
      field::GeneratorLeaves<T> th = field::make_theta_vars(tape, theta, false);
      field::RenderGraph<T> rg =
          field::render_graph(tape, lv.vars[0][0], pg, Var<T>{}, th, gen_cfg, true);
      return proxy(tape, tape.constant(target), rg.image);
    };
    diff::GradReport<T> g = diff::backward(program, ps);
    opt.step(ps, g, {{"latent", cfg.lr_w}});
    out.trace.push_back({iter, "lpips", g.loss});
    out.trace.push_back({iter, "total", g.loss});
    out.pivot_iterations = iter + 1;
    if (watch.update(g.loss)) {
      out.pivot_converged_at = iter + 1;
      break;
    }
  }
  out.w = ps.find("latent")->tensors[0];
  out.theta = theta;
  if (tune) {
    TuneResult<T> t = pivotal_tune(target, out.w, pose_gt, out.noise, theta, gen_cfg, cfg);
    out.theta = std::move(t.theta);
    out.theta_tuned = true;
    for (auto& row : t.trace) out.trace.push_back({row.iter, "pt_" + row.term, row.value});
  }
  return out;
}

template <class T>
InversionResult<T> invert_joint_gradient(const Tensor<T>& target, const Tensor<T>& w_init,
                                         const camera::CameraPose& pose_init,
                                         const field::FieldParams<T>& theta,
                                         const field::GeneratorConfig& gen_cfg,
                                         const InversionConfig& cfg, bool tune) {
  cfg.validate();
  const int hw = gen_cfg.image_size;
  loss::PerceptualProxy<T> proxy;
  diff::ParamSet<T> ps =
      pivot_params(w_init, pose_init, Tensor<T>::zeros({hw, hw}), cfg.pose_mode);
  diff::GroupOptimizer<T> opt(cfg.optimizer, ps);

  InversionResult<T> out;
  out.pose = pose_init;
  out.noise = Tensor<T>::zeros({hw, hw});
  ConvergenceWatch watch(cfg.convergence_tol, cfg.patience);

  for (int iter = 0; iter < cfg.max_iters_opt; ++iter) {
    double lpips_v = 0, noise_v = 0;
    diff::LossProgram<T> program = [&](Tape<T>& tape, const diff::Leaves<T>& lv) {
      field::PoseGraph<T> pg =
          field::build_pose_graph(tape, lv.vars[1][0], cfg.pose_mode, gen_cfg.radius);
      field::GeneratorLeaves<T> th = field::make_theta_vars(tape, theta, false);
      field::RenderGraph<T> rg =
          field::render_graph(tape, lv.vars[0][0], pg, lv.vars[2][0], th, gen_cfg, true);
      loss::CompositeLoss<T> l = loss::opt_loss(tape, proxy, tape.constant(target), rg.image,
                                                Var<T>{}, lv.vars[2][0], cfg.weights);
      lpips_v = tape.val(l.terms[0].second).value();
      noise_v = tape.val(l.terms.back().second).value();
      return l.total;
    };
    diff::GradReport<T> g = diff::backward(program, ps);
    opt.step(ps, g,
             {{"latent", cfg.lr_w}, {"pose", cfg.lr_pose}, {"noise", cfg.lr_noise}});
    out.pose = clamp_pose_params(ps, cfg.pose_mode, gen_cfg.radius, cfg.box);
    out.trace.push_back({iter, "lpips", lpips_v});
    out.trace.push_back({iter, "noise", noise_v});
    out.trace.push_back({iter, "yaw_rad", out.pose.yaw});
    out.trace.push_back({iter, "pitch_rad", out.pose.pitch});
    out.trace.push_back({iter, "total", g.loss});
    out.pivot_iterations = iter + 1;
    if (watch.update(g.loss)) {
      out.pivot_converged_at = iter + 1;
      break;
    }
  }
  out.w = ps.find("latent")->tensors[0];
  out.noise = ps.find("noise")->tensors[0];
  out.theta = theta;
  if (tune) {
    TuneResult<T> t =
        pivotal_tune(target, out.w, out.pose, out.noise, theta, gen_cfg, cfg);
    out.theta = std::move(t.theta);
    out.theta_tuned = true;
    for (auto& row : t.trace) out.trace.push_back({row.iter, "pt_" + row.term, row.value});
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
std::vector<Tensor<T>> render_novel_views(const Tensor<T>& w,
                                          const field::FieldParams<T>& theta,
                                          const Tensor<T>& noise,
                                          const std::vector<camera::CameraPose>& poses,
                                          const field::GeneratorConfig& gen_cfg) {
  std::vector<Tensor<T>> out;
  out.reserve(poses.size());
  for (const auto& p : poses)
    out.push_back(field::render(w, p, &noise, theta, gen_cfg).image);
  return out;
}

template <class T>
std::vector<Tensor<T>> edit_directions(const Tensor<T>& latents, int count) {
  if (latents.rank() != 2 || latents.shape[0] < 2)
    throw ShapeMismatch("edit_directions needs an (N,D) latent sample, N >= 2");
  const int n = latents.shape[0], d = latents.shape[1];
  if (count < 1 || count > d) throw Error("edit_directions count out of range");

  Eigen::MatrixXd X(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = static_cast<double>(latents.at(i, j));
  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  const Eigen::MatrixXd cov = X.transpose() * X / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw Error("eigendecomposition failed");

  std::vector<Tensor<T>> out;
  for (int k = 0; k < count; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - k);  // descending variance
    int arg = 0;
    for (int j = 1; j < d; ++j)
      if (std::abs(v[j]) > std::abs(v[arg])) arg = j;
    if (v[arg] < 0) v = -v;
    Tensor<T> t = Tensor<T>::zeros({d});
    for (int j = 0; j < d; ++j) t.data[j] = static_cast<T>(v[j]);
    out.push_back(std::move(t));
  }
  return out;
}

template <class T>
Tensor<T> apply_edit(const Tensor<T>& w, const Tensor<T>& direction, double gamma) {
  if (w.count() != direction.count()) throw ShapeMismatch("apply_edit dimension mismatch");
  Tensor<T> out = w;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<T>(out.data[i] + gamma * direction.data[i]);
  return out;
}

// ---------------------------------------------------------------------------

#define POVERT_INSTANTIATE(T)                                                               \
  template PivotResult<T> optimize_pivot(const Tensor<T>&, const Tensor<T>&,                \
                                         const camera::CameraPose&,                         \
                                         const field::FieldParams<T>&,                      \
                                         const field::GeneratorConfig&,                     \
                                         const InversionConfig&);                           \
  template TuneResult<T> pivotal_tune(const Tensor<T>&, const Tensor<T>&,                   \
                                      const camera::CameraPose&, const Tensor<T>&,          \
                                      const field::FieldParams<T>&,                         \
                                      const field::GeneratorConfig&, const InversionConfig&); \
  template double locality_reg(const field::FieldParams<T>&, const field::FieldParams<T>&,  \
                               const Tensor<T>&, const field::GeneratorConfig&,             \
                               const InversionConfig&, std::uint64_t);                      \
  template InversionResult<T> invert_gt_pose(const Tensor<T>&, const camera::CameraPose&,   \
                                             const Tensor<T>&, const field::FieldParams<T>&, \
                                             const field::GeneratorConfig&,                 \
                                             const InversionConfig&, bool);                 \
  template InversionResult<T> invert_joint_gradient(                                        \
      const Tensor<T>&, const Tensor<T>&, const camera::CameraPose&,                        \
      const field::FieldParams<T>&, const field::GeneratorConfig&, const InversionConfig&,  \
      bool);                                                                                \
  template std::vector<Tensor<T>> render_novel_views(                                       \
      const Tensor<T>&, const field::FieldParams<T>&, const Tensor<T>&,                     \
      const std::vector<camera::CameraPose>&, const field::GeneratorConfig&);               \
  template std::vector<Tensor<T>> edit_directions(const Tensor<T>&, int);                   \
  template Tensor<T> apply_edit(const Tensor<T>&, const Tensor<T>&, double);

POVERT_INSTANTIATE(float)
POVERT_INSTANTIATE(double)
#undef POVERT_INSTANTIATE

}  // namespace povert::invert

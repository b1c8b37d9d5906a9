#include "povert/pretrain.hpp"

#include <cmath>

namespace povert::pretrain {

using ad::Tape;
using ad::Tensor;
using ad::Var;

template <class T>
std::vector<PseudoPair<T>> gen_pseudo_dataset(const field::FieldParams<T>& theta,
                                              const field::GeneratorConfig& cfg,
                                              const camera::PoseBox& box, int n,
                                              std::uint64_t seed, double roll_max) {
  if (n < 1) throw Error("gen_pseudo_dataset needs n >= 1");
  std::vector<PseudoPair<T>> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    PseudoPair<T> p;
    p.seed = derive_seed(seed, 2 * static_cast<std::uint64_t>(i));
    p.w = field::sample_latent(theta, cfg, p.seed);
    Rng prng(derive_seed(seed, 2 * static_cast<std::uint64_t>(i) + 1));
    auto [yaw, pitch] = box.sample_angles(prng);
    p.pose.yaw = yaw;
    p.pose.pitch = pitch;
    p.pose.radius = cfg.radius;
    if (roll_max > 0.0) p.pose.roll = prng.uniform(-roll_max, roll_max);
    p.image = field::render(p.w, p.pose, theta, cfg).image;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// EstimatorParams
// ---------------------------------------------------------------------------

template <class T>
EstimatorParams<T> EstimatorParams<T>::random_init(const EstimatorConfig& arch,
                                                   int image_size, int w_dim,
                                                   std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xE57));
  EstimatorParams p;
  p.arch = arch;
  p.image_size = image_size;
  p.w_dim = w_dim;
  const int k2 = arch.kernel * arch.kernel;
  auto dense = [&](int in, int out) {
    return Tensor<T>::gaussian({in, out}, rng, static_cast<T>(1.0 / std::sqrt(in)));
  };
  p.conv1_w = Tensor<T>::gaussian({arch.conv1_channels, 3 * k2}, rng,
                                  static_cast<T>(1.0 / std::sqrt(3.0 * k2)));
  p.conv1_b = Tensor<T>::zeros({1, arch.conv1_channels});
  p.conv2_w = Tensor<T>::gaussian({arch.conv2_channels, arch.conv1_channels * k2}, rng,
                                  static_cast<T>(1.0 / std::sqrt(1.0 * arch.conv1_channels * k2)));
  p.conv2_b = Tensor<T>::zeros({1, arch.conv2_channels});
  const int side = image_size / 4;  // two stride-2 convs
  const int flat = arch.conv2_channels * side * side;
  p.fc_w = dense(flat, arch.fc_width);
  p.fc_b = Tensor<T>::zeros({1, arch.fc_width});
  p.latent_w = Tensor<T>::gaussian({arch.fc_width, w_dim}, rng,
                                   static_cast<T>(0.1 / std::sqrt(arch.fc_width)));
  p.latent_b = Tensor<T>::zeros({1, w_dim});
  p.pose_w = Tensor<T>::gaussian({arch.fc_width, arch.sixd ? 9 : 5}, rng,
                                 static_cast<T>(0.1 / std::sqrt(arch.fc_width)));
  p.pose_b = Tensor<T>::zeros({1, arch.sixd ? 9 : 5});
  if (arch.sixd) {
    p.pose_b.at(0, 0) = T(1);  // a1 = (1,0,0)
    p.pose_b.at(0, 4) = T(1);  // a2 = (0,1,0)
  }
  return p;
}

template <class T>
std::vector<const Tensor<T>*> EstimatorParams<T>::tensors() const {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc_w,
          &fc_b,    &latent_w, &latent_b, &pose_w, &pose_b};
}

template <class T>
std::vector<Tensor<T>*> EstimatorParams<T>::tensors() {
  std::vector<Tensor<T>*> out;
  for (auto* p : const_cast<const EstimatorParams*>(this)->tensors())
    out.push_back(const_cast<Tensor<T>*>(p));
  return out;
}

template <class T>
EstimatorLeaves<T> make_estimator_vars(Tape<T>& tape, const EstimatorParams<T>& p,
                                       bool differentiable) {
  EstimatorLeaves<T> out;
  for (auto* t : p.tensors())
    out.vars.push_back(differentiable ? tape.leaf(*t, "estimator") : tape.constant(*t));
  return out;
}

template <class T>
Var<T> trunk_graph(Tape<T>& tape, const EstimatorLeaves<T>& lv, const EstimatorConfig& arch,
                   Var<T> image) {
  const int k = arch.kernel;
  Var<T> h = tape.conv2d(image, lv.vars[0], k, k, 2, k / 2);
  // conv bias: (C,H,W) + per-channel — reshape to (C, H*W) and column-add.
  auto add_channel_bias = [&](Var<T> x, Var<T> bias_row, int channels) {
    const auto& s = tape.val(x).shape;
    Var<T> flat = tape.reshape(x, {channels, s[1] * s[2]});
    Var<T> biased = flat + tape.transpose(bias_row);  // (C,1) column broadcast
    return tape.reshape(biased, {channels, s[1], s[2]});
  };
  h = tape.silu(add_channel_bias(h, lv.vars[1], arch.conv1_channels));
  h = tape.conv2d(h, lv.vars[2], k, k, 2, k / 2);
  h = tape.silu(add_channel_bias(h, lv.vars[3], arch.conv2_channels));
  const auto& s = tape.val(h).shape;
  Var<T> flat = tape.reshape(h, {1, s[0] * s[1] * s[2]});
  return tape.silu(tape.matmul(flat, lv.vars[4]) + lv.vars[5]);
}

template <class T>
Var<T> latent_head_graph(Tape<T>& tape, const EstimatorLeaves<T>& lv, Var<T> features) {
  return tape.matmul(features, lv.vars[6]) + lv.vars[7];
}

template <class T>
Var<T> pose_head_graph(Tape<T>& tape, const EstimatorLeaves<T>& lv, Var<T> features) {
  return tape.matmul(features, lv.vars[8]) + lv.vars[9];
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

template <class T>
diff::ParamSet<T> estimator_param_set(const EstimatorParams<T>& p, bool pose_head,
                                      bool latent_head) {
  diff::ParamSet<T> ps;
  auto& g = ps.add("estimator");
  auto ts = p.tensors();
  for (int i = 0; i < 6; ++i) g.tensors.push_back(*ts[i]);  // trunk
  if (latent_head) {
    g.tensors.push_back(*ts[6]);
    g.tensors.push_back(*ts[7]);
  }
  if (pose_head) {
    g.tensors.push_back(*ts[8]);
    g.tensors.push_back(*ts[9]);
  }
  return ps;
}

template <class T>
void write_back(EstimatorParams<T>& p, const diff::ParamSet<T>& ps, bool pose_head,
                bool latent_head) {
  auto ts = p.tensors();
  const auto& g = ps.groups[0];
  std::size_t i = 0;
  for (int t = 0; t < 6; ++t) *ts[t] = g.tensors[i++];
  if (latent_head) {
    *ts[6] = g.tensors[i++];
    *ts[7] = g.tensors[i++];
  }
  if (pose_head) {
    *ts[8] = g.tensors[i++];
    *ts[9] = g.tensors[i++];
  }
}

// Rebuild an EstimatorParams view from ParamSet leaves (same layout as
// estimator_param_set).
template <class T>
EstimatorLeaves<T> leaves_view(const diff::Leaves<T>& lv, Tape<T>& tape,
                               const EstimatorParams<T>& shape, bool pose_head,
                               bool latent_head) {
  EstimatorLeaves<T> out;
  std::size_t i = 0;
  for (int t = 0; t < 6; ++t) out.vars.push_back(lv.vars[0][i++]);
  auto ts = const_cast<EstimatorParams<T>&>(shape).tensors();
  if (latent_head) {
    out.vars.push_back(lv.vars[0][i++]);
    out.vars.push_back(lv.vars[0][i++]);
  } else {
    out.vars.push_back(tape.constant(*ts[6]));
    out.vars.push_back(tape.constant(*ts[7]));
  }
  if (pose_head) {
    out.vars.push_back(lv.vars[0][i++]);
    out.vars.push_back(lv.vars[0][i++]);
  } else {
    out.vars.push_back(tape.constant(*ts[8]));
    out.vars.push_back(tape.constant(*ts[9]));
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size,
                                                   std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0xBA7C4 + static_cast<std::uint64_t>(epoch)));
  rng.shuffle(idx);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size)
    batches.emplace_back(idx.begin() + i, idx.begin() + std::min(n, i + batch_size));
  return batches;
}

}  // namespace

template <class T>
TrainResult<T> train_pose_estimator(const std::vector<PseudoPair<T>>& dataset,
                                    const field::GeneratorConfig& gen_cfg,
                                    EstimatorParams<T> init, const TrainConfig& cfg) {
  (void)gen_cfg;
  if (dataset.size() < 256) throw Error("train_pose_estimator needs >= 256 pairs");
  diff::ParamSet<T> ps = estimator_param_set(init, true, false);
  diff::OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.momentum = cfg.momentum;
  diff::GroupOptimizer<T> opt(oc, ps);

  TrainResult<T> out;
  double last = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0;
    std::size_t nb = 0;
    for (const auto& batch : make_batches(dataset.size(), cfg.batch_size, cfg.seed, epoch)) {
      diff::LossProgram<T> program = [&](Tape<T>& tape, const diff::Leaves<T>& lv) {
        EstimatorLeaves<T> est = leaves_view(lv, tape, init, true, false);
        Var<T> acc;
        for (std::size_t bi = 0; bi < batch.size(); ++bi) {
          const PseudoPair<T>& pair = dataset[batch[bi]];
          Var<T> img = tape.constant(pair.image);
          Var<T> feats = trunk_graph(tape, est, init.arch, img);
          Var<T> raw = pose_head_graph(tape, est, feats);
          Var<T> rot_v, t_v;
          if (init.arch.sixd) {
            std::array<Var<T>, 3> a1{tape.index(raw, 0), tape.index(raw, 1),
                                     tape.index(raw, 2)};
            std::array<Var<T>, 3> a2{tape.index(raw, 3), tape.index(raw, 4),
                                     tape.index(raw, 5)};
            auto entries = camera::rotation_entries_from_sixd(a1, a2);
            rot_v = tape.stack_scalars({3, 3},
                                       std::vector<Var<T>>(entries.begin(), entries.end()));
            t_v = tape.stack_scalars({1, 3}, {tape.index(raw, 6), tape.index(raw, 7),
                                              tape.index(raw, 8)});
          } else {
            auto entries = camera::rotation_entries_from_euler(tape.index(raw, 0),
                                                               tape.index(raw, 1));
            rot_v = tape.stack_scalars({3, 3},
                                       std::vector<Var<T>>(entries.begin(), entries.end()));
            t_v = tape.stack_scalars({1, 3}, {tape.index(raw, 2), tape.index(raw, 3),
                                              tape.index(raw, 4)});
          }
          Var<T> li = loss::pose_loss(tape, rot_v, t_v, pair.pose, cfg.weights).total;
          acc = bi == 0 ? li : acc + li;
        }
        return tape.scale(acc, T(1.0 / batch.size()));
      };
      diff::GradReport<T> g;
      try {
        g = diff::backward(program, ps);
      } catch (const NonFiniteGradient& e) {
        throw DivergedTraining(std::string("pose estimator diverged: ") + e.what());
      }
      if (!std::isfinite(g.loss)) throw DivergedTraining("pose estimator loss non-finite");
      opt.step(ps, g, {{"estimator", cfg.lr}});
      epoch_loss += g.loss;
      ++nb;
    }
    last = epoch_loss / static_cast<double>(nb);
    out.epoch_losses.push_back(last);
  }
  write_back(init, ps, true, false);
  out.params = std::move(init);
  out.final_loss = last;
  return out;
}

template <class T>
TrainResult<T> train_latent_encoder(const std::vector<PseudoPair<T>>& dataset,
                                    const field::FieldParams<T>& theta,
                                    const Tensor<T>& w_bar,
                                    const field::GeneratorConfig& gen_cfg,
                                    EstimatorParams<T> init, const TrainConfig& cfg) {
  if (dataset.empty()) throw Error("train_latent_encoder needs a non-empty dataset");
  diff::ParamSet<T> ps = estimator_param_set(init, false, true);
  diff::OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.momentum = cfg.momentum;
  diff::GroupOptimizer<T> opt(oc, ps);
  loss::PerceptualProxy<T> proxy;

  TrainResult<T> out;
  double last = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0;
    std::size_t nb = 0;
    for (const auto& batch : make_batches(dataset.size(), cfg.batch_size, cfg.seed, epoch)) {
      diff::LossProgram<T> program = [&](Tape<T>& tape, const diff::Leaves<T>& lv) {
        EstimatorLeaves<T> est = leaves_view(lv, tape, init, false, true);
        field::GeneratorLeaves<T> th = field::make_theta_vars(tape, theta, false);
        Var<T> wb = tape.constant(w_bar);
        Var<T> acc;
        for (std::size_t bi = 0; bi < batch.size(); ++bi) {
          const PseudoPair<T>& pair = dataset[batch[bi]];
          Var<T> img = tape.constant(pair.image);
          Var<T> dw = latent_head_graph(tape, est, trunk_graph(tape, est, init.arch, img));
          Var<T> w_hat = wb + dw;
          Tensor<double> pp = field::pose_to_params(pair.pose, field::PoseMode::kEuler);
          field::PoseGraph<T> pg = field::build_pose_graph(
              tape, tape.constant(pp.template cast<T>()), field::PoseMode::kEuler,
              pair.pose.radius);
          field::RenderGraph<T> rg =
              field::render_graph(tape, w_hat, pg, Var<T>{}, th, gen_cfg, true);
          Var<T> li = loss::encoder_loss(tape, proxy, img, rg.image, dw, cfg.weights).total;
          acc = bi == 0 ? li : acc + li;
        }
        return tape.scale(acc, T(1.0 / batch.size()));
      };
      diff::GradReport<T> g;
      try {
        g = diff::backward(program, ps);
      } catch (const NonFiniteGradient& e) {
        throw DivergedTraining(std::string("latent encoder diverged: ") + e.what());
      }
      if (!std::isfinite(g.loss)) throw DivergedTraining("latent encoder loss non-finite");
      opt.step(ps, g, {{"estimator", cfg.lr}});
      epoch_loss += g.loss;
      ++nb;
    }
    last = epoch_loss / static_cast<double>(nb);
    out.epoch_losses.push_back(last);
  }
  write_back(init, ps, false, true);
  out.params = std::move(init);
  out.final_loss = last;
  return out;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

template <class T>
camera::CameraPose estimate_pose(const EstimatorParams<T>& p, const Tensor<T>& image,
                                 const camera::PoseBox& box, double radius) {
  Tape<T> tape;
  EstimatorLeaves<T> est = make_estimator_vars(tape, p, false);
  Var<T> raw = pose_head_graph(tape, est, trunk_graph(tape, est, p.arch, tape.constant(image)));
  Tensor<double> rawd = tape.val(raw).template cast<double>();
  rawd.shape = {static_cast<int>(rawd.count())};
  camera::CameraPose pose = field::pose_from_params(
      rawd, p.arch.sixd ? field::PoseMode::kSixD : field::PoseMode::kEuler, radius);
  return box.clamp_extended(pose);
}

template <class T>
Tensor<T> encode_latent(const EstimatorParams<T>& p, const Tensor<T>& image,
                        const Tensor<T>& w_bar) {
  Tape<T> tape;
  EstimatorLeaves<T> est = make_estimator_vars(tape, p, false);
  Var<T> dw = latent_head_graph(tape, est, trunk_graph(tape, est, p.arch, tape.constant(image)));
  Var<T> w = tape.constant(w_bar) + dw;
  return tape.val(w);
}

template <class T>
camera::CameraPose grid_init_pose(const Tensor<T>& image, const Tensor<T>& w_bar,
                                  const field::FieldParams<T>& theta,
                                  const field::GeneratorConfig& cfg,
                                  const loss::PerceptualProxy<T>& proxy,
                                  const camera::PoseBox& box, int grid_yaw, int grid_pitch) {
  if (grid_yaw < 3 || grid_pitch < 3) throw Error("grid_init_pose needs at least a 3x3 grid");
  camera::CameraPose best;
  double best_loss = std::numeric_limits<double>::infinity();
  bool have = false;
  for (int iy = 0; iy < grid_yaw; ++iy) {
    for (int ip = 0; ip < grid_pitch; ++ip) {
      camera::CameraPose pose;
      pose.yaw = -box.yaw_max + 2.0 * box.yaw_max * iy / (grid_yaw - 1);
      pose.pitch = -box.pitch_max + 2.0 * box.pitch_max * ip / (grid_pitch - 1);
      pose.radius = cfg.radius;
      field::RenderOutput<T> r = field::render(w_bar, pose, theta, cfg);
      Tape<T> tape;
      const double l = static_cast<double>(
          tape.val(proxy(tape, tape.constant(image), tape.constant(r.image))).value());
      const bool better =
          !have || l < best_loss ||
          (l == best_loss &&
           std::make_pair(std::abs(pose.yaw), std::abs(pose.pitch)) <
               std::make_pair(std::abs(best.yaw), std::abs(best.pitch)));
      if (better) {
        best = pose;
        best_loss = l;
        have = true;
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------

#define POVERT_INSTANTIATE(T)                                                               \
  template std::vector<PseudoPair<T>> gen_pseudo_dataset(                                   \
      const field::FieldParams<T>&, const field::GeneratorConfig&, const camera::PoseBox&,  \
      int, std::uint64_t, double);                                                          \
  template struct EstimatorParams<T>;                                                       \
  template EstimatorLeaves<T> make_estimator_vars(Tape<T>&, const EstimatorParams<T>&, bool); \
  template Var<T> trunk_graph(Tape<T>&, const EstimatorLeaves<T>&, const EstimatorConfig&,  \
                              Var<T>);                                                      \
  template Var<T> latent_head_graph(Tape<T>&, const EstimatorLeaves<T>&, Var<T>);           \
  template Var<T> pose_head_graph(Tape<T>&, const EstimatorLeaves<T>&, Var<T>);             \
  template TrainResult<T> train_pose_estimator(const std::vector<PseudoPair<T>>&,           \
                                               const field::GeneratorConfig&,               \
                                               EstimatorParams<T>, const TrainConfig&);     \
  template TrainResult<T> train_latent_encoder(                                             \
      const std::vector<PseudoPair<T>>&, const field::FieldParams<T>&, const Tensor<T>&,    \
      const field::GeneratorConfig&, EstimatorParams<T>, const TrainConfig&);               \
  template camera::CameraPose estimate_pose(const EstimatorParams<T>&, const Tensor<T>&,    \
                                            const camera::PoseBox&, double);                \
  template Tensor<T> encode_latent(const EstimatorParams<T>&, const Tensor<T>&,             \
                                   const Tensor<T>&);                                       \
  template camera::CameraPose grid_init_pose(const Tensor<T>&, const Tensor<T>&,            \
                                             const field::FieldParams<T>&,                  \
                                             const field::GeneratorConfig&,                 \
                                             const loss::PerceptualProxy<T>&,               \
                                             const camera::PoseBox&, int, int);

POVERT_INSTANTIATE(float)
POVERT_INSTANTIATE(double)
#undef POVERT_INSTANTIATE

}  // namespace povert::pretrain

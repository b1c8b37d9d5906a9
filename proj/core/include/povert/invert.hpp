#pragma once

#include <vector>

#include "povert/camera.hpp"
#include "povert/diffcore.hpp"
#include "povert/field.hpp"
#include "povert/io.hpp"
#include "povert/loss.hpp"
#include "povert/warp.hpp"

namespace povert::invert {

struct InversionConfig {
  int max_iters_opt = 500;
  int max_iters_pt = 350;
  double lr_w = 5e-3;
  double lr_pose = 2e-3;
  double lr_noise = 5e-3;
  double lr_theta = 1e-3;
  loss::LossWeights weights;
  warp::WarpVariant warp_variant = warp::WarpVariant::kAgainstTarget;
  field::PoseMode pose_mode = field::PoseMode::kEuler;
  double convergence_tol = 1e-9;
  int patience = 30;
  std::uint64_t seed = 0;
  diff::OptimizerConfig optimizer;        // Adam by default; SGD via config
  bool detach_canonical = true;           // full flow-through when false
  bool simultaneous_updates = false;      // ablation: no w/pose alternation
  bool backtracking_guard = false;        // enforce non-increasing tuning trace
  bool locality_enabled = false;
  double locality_alpha = 30.0;
  camera::PoseBox box;
  camera::CameraPose canonical;  // frontal

  void validate() const {
    if (max_iters_opt < 0 || max_iters_pt < 0) throw Error("negative iteration budget");
    if (lr_w < 0 || lr_pose < 0 || lr_noise < 0 || lr_theta < 0)
      throw Error("negative learning rate");
  }
};

template <class T>
struct PivotResult {
  ad::Tensor<T> w;       // (1, w_dim)
  camera::CameraPose pose;
  ad::Tensor<T> noise;   // (H, W)
  std::vector<io::TraceRow> trace;
  int iterations = 0;
  int converged_at = -1;  // patience stop, or -1 if the budget ran out
  bool mask_empty_seen = false;
};

template <class T>
struct TuneResult {
  field::FieldParams<T> theta;
  std::vector<io::TraceRow> trace;
  int iterations = 0;
};

template <class T>
struct InversionResult {
  ad::Tensor<T> w;
  camera::CameraPose pose;
  ad::Tensor<T> noise;
  field::FieldParams<T> theta;
  bool theta_tuned = false;
  std::vector<io::TraceRow> trace;
  int pivot_iterations = 0;
  int pivot_converged_at = -1;
};

/// Pivot search: alternating updates — latent (and noise) on the
/// reconstruction objective, then pose on the warping objective — with the
/// generator frozen. Stops on the iteration budget or when the total loss
/// stops improving by convergence_tol for `patience` iterations.
template <class T>
PivotResult<T> optimize_pivot(const ad::Tensor<T>& target, const ad::Tensor<T>& w_init,
                              const camera::CameraPose& pose_init,
                              const field::FieldParams<T>& theta,
                              const field::GeneratorConfig& gen_cfg,
                              const InversionConfig& cfg);

/// Generator fine-tuning around a fixed pivot (w*, pose*, n* all constant).
template <class T>
TuneResult<T> pivotal_tune(const ad::Tensor<T>& target, const ad::Tensor<T>& w_star,
                           const camera::CameraPose& pose_star, const ad::Tensor<T>& noise_star,
                           const field::FieldParams<T>& theta,
                           const field::GeneratorConfig& gen_cfg, const InversionConfig& cfg);

/// Locality penalty between the original and tuned generator at an
/// interpolated latent (alpha-normalized step toward a seeded random w_r)
/// rendered from a seeded random pose.
template <class T>
double locality_reg(const field::FieldParams<T>& theta_tuned,
                    const field::FieldParams<T>& theta_orig, const ad::Tensor<T>& w_star,
                    const field::GeneratorConfig& gen_cfg, const InversionConfig& cfg,
                    std::uint64_t sample_index = 0);

/// Ground-truth-pose baseline: latent-only optimization at the given pose,
/// then optional tuning.
template <class T>
InversionResult<T> invert_gt_pose(const ad::Tensor<T>& target, const camera::CameraPose& pose_gt,
                                  const ad::Tensor<T>& w_init,
                                  const field::FieldParams<T>& theta,
                                  const field::GeneratorConfig& gen_cfg,
                                  const InversionConfig& cfg, bool tune);

/// Joint-gradient baseline: one photometric objective, simultaneous
/// (w, pose, n) steps, no warping term.
template <class T>
InversionResult<T> invert_joint_gradient(const ad::Tensor<T>& target,
                                         const ad::Tensor<T>& w_init,
                                         const camera::CameraPose& pose_init,
                                         const field::FieldParams<T>& theta,
                                         const field::GeneratorConfig& gen_cfg,
                                         const InversionConfig& cfg, bool tune);

template <class T>
std::vector<ad::Tensor<T>> render_novel_views(const ad::Tensor<T>& w,
                                              const field::FieldParams<T>& theta,
                                              const ad::Tensor<T>& noise,
                                              const std::vector<camera::CameraPose>& poses,
                                              const field::GeneratorConfig& gen_cfg);

/// Principal directions of a latent sample (rows of `latents`), orthonormal,
/// sorted by decreasing variance. Signs are fixed so the largest-magnitude
/// entry of each direction is positive.
template <class T>
std::vector<ad::Tensor<T>> edit_directions(const ad::Tensor<T>& latents, int count);

template <class T>
ad::Tensor<T> apply_edit(const ad::Tensor<T>& w, const ad::Tensor<T>& direction, double gamma);

}  // namespace povert::invert

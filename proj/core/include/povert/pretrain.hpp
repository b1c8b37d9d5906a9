#pragma once

#include <vector>

#include "povert/camera.hpp"
#include "povert/diffcore.hpp"
#include "povert/field.hpp"
#include "povert/loss.hpp"

namespace povert::pretrain {

/// One generated annotation pair: the image is exactly
/// render(w, pose, n=0, theta) for the recorded seed.
template <class T>
struct PseudoPair {
  std::uint64_t seed = 0;
  ad::Tensor<T> w;  // (1, w_dim)
  camera::CameraPose pose;
  ad::Tensor<T> image;  // (3,H,W)
};

/// N pairs with latents from the mapping network and poses uniform in the
/// sampling box (t = 0; roll sampled only when roll_max > 0). Bit-exactly
/// reproducible from (theta, seed).
template <class T>
std::vector<PseudoPair<T>> gen_pseudo_dataset(const field::FieldParams<T>& theta,
                                              const field::GeneratorConfig& cfg,
                                              const camera::PoseBox& box, int n,
                                              std::uint64_t seed, double roll_max = 0.0);

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

struct EstimatorConfig {
  int conv1_channels = 8;
  int conv2_channels = 16;
  int kernel = 3;
  int fc_width = 64;
  bool sixd = false;  // 6D+translation pose head instead of yaw/pitch+translation
};

/// Shared conv trunk with a latent head (dw) and a pose head.
template <class T>
struct EstimatorParams {
  EstimatorConfig arch;
  int image_size = 0;
  int w_dim = 0;
  ad::Tensor<T> conv1_w, conv1_b;    // (c1, 3*k*k), (1,c1)
  ad::Tensor<T> conv2_w, conv2_b;    // (c2, c1*k*k), (1,c2)
  ad::Tensor<T> fc_w, fc_b;          // (flat, fc), (1,fc)
  ad::Tensor<T> latent_w, latent_b;  // (fc, w_dim), (1,w_dim)
  ad::Tensor<T> pose_w, pose_b;      // (fc, 5|9), (1, 5|9)

  static EstimatorParams random_init(const EstimatorConfig& arch, int image_size,
                                     int w_dim, std::uint64_t seed);

  std::vector<const ad::Tensor<T>*> tensors() const;
  std::vector<ad::Tensor<T>*> tensors();
  int pose_head_dim() const { return arch.sixd ? 9 : 5; }
};

/// Trunk + head graphs on a tape. `leaves` mirrors EstimatorParams::tensors().
template <class T>
struct EstimatorLeaves {
  std::vector<ad::Var<T>> vars;
};

template <class T>
EstimatorLeaves<T> make_estimator_vars(ad::Tape<T>& tape, const EstimatorParams<T>& p,
                                       bool differentiable);

template <class T>
ad::Var<T> trunk_graph(ad::Tape<T>& tape, const EstimatorLeaves<T>& leaves,
                       const EstimatorConfig& arch, ad::Var<T> image);

template <class T>
ad::Var<T> latent_head_graph(ad::Tape<T>& tape, const EstimatorLeaves<T>& leaves,
                             ad::Var<T> features);

template <class T>
ad::Var<T> pose_head_graph(ad::Tape<T>& tape, const EstimatorLeaves<T>& leaves,
                           ad::Var<T> features);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  double lr = 1e-2;
  double momentum = 0.9;
  diff::OptimizerKind optimizer = diff::OptimizerKind::kSgd;
  std::uint64_t seed = 7;
  loss::LossWeights weights;
};

template <class T>
struct TrainResult {
  EstimatorParams<T> params;
  double final_loss = 0;
  std::vector<double> epoch_losses;
};

/// Pose-estimator pretraining (rotation + translation objective on the pose
/// head and trunk). Needs at least 256 pairs. DivergedTraining on non-finite
/// loss.
template <class T>
TrainResult<T> train_pose_estimator(const std::vector<PseudoPair<T>>& dataset,
                                    const field::GeneratorConfig& gen_cfg,
                                    EstimatorParams<T> init, const TrainConfig& cfg);

/// Latent-encoder pretraining: perceptual reconstruction of each pair through
/// the frozen generator at the pair's pose, plus delta regularization.
template <class T>
TrainResult<T> train_latent_encoder(const std::vector<PseudoPair<T>>& dataset,
                                    const field::FieldParams<T>& theta,
                                    const ad::Tensor<T>& w_bar,
                                    const field::GeneratorConfig& gen_cfg,
                                    EstimatorParams<T> init, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Inference and fallback initialization
// ---------------------------------------------------------------------------

/// Pose head forward pass, clamped into the extended pose box.
template <class T>
camera::CameraPose estimate_pose(const EstimatorParams<T>& p, const ad::Tensor<T>& image,
                                 const camera::PoseBox& box, double radius);

/// w_bar + dw.
template <class T>
ad::Tensor<T> encode_latent(const EstimatorParams<T>& p, const ad::Tensor<T>& image,
                            const ad::Tensor<T>& w_bar);

/// Brute-force initializer: perceptual argmin of render(w_bar, pose) over a
/// yaw x pitch grid (>= 3x3). Ties break to the smallest (|yaw|, |pitch|)
/// lexicographically.
template <class T>
camera::CameraPose grid_init_pose(const ad::Tensor<T>& image, const ad::Tensor<T>& w_bar,
                                  const field::FieldParams<T>& theta,
                                  const field::GeneratorConfig& cfg,
                                  const loss::PerceptualProxy<T>& proxy,
                                  const camera::PoseBox& box, int grid_yaw, int grid_pitch);

}  // namespace povert::pretrain

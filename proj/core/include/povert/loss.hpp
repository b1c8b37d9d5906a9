#pragma once

#include <string>
#include <utility>
#include <vector>

#include "povert/camera.hpp"
#include "povert/tape.hpp"

namespace povert::loss {

/// Weights of all composite objectives. Only depth_reg carries a grounded
/// recommended value; the rest are documented defaults.
struct LossWeights {
  double warp = 1.0;        // on the depth-warping term
  double noise = 1e-5;      // on noise regularization
  double l2 = 1.0;          // on pixel MSE during tuning
  double depth_reg = 1.0;   // on depth smoothness during tuning
  double adv = 0.0;         // reserved; adversarial term is out of scope
  double delta_reg = 1e-3;  // on ||dw||^2 in encoder pretraining
  double trans = 1.0;       // on translation error in pose pretraining
  double locality = 0.1;    // on locality regularization during tuning
};

/// Frozen random multi-scale filter bank standing in for a pretrained
/// perceptual network: 3 stages of 8 5x5 filters with stride-2 average
/// pooling between stages. Filters are drawn once from the seed and
/// L2-normalized per filter (the per-stage feature normalization); they are
/// never updated.
template <class T>
class PerceptualProxy {
 public:
  explicit PerceptualProxy(std::uint64_t seed = 0x9E0C);

  /// Stage feature maps of an image (3,H,W).
  std::vector<ad::Var<T>> features(ad::Tape<T>& tape, ad::Var<T> img) const;

  /// Mean over stages of the mean squared feature difference. ShapeMismatch
  /// if shapes differ.
  ad::Var<T> operator()(ad::Tape<T>& tape, ad::Var<T> a, ad::Var<T> b) const;

  struct MaskedResult {
    ad::Var<T> value;
    bool mask_empty = false;  // no stage had any fully-valid site
  };

  /// Masked variant: both images are zeroed outside `mask` and each stage is
  /// averaged only over sites whose full receptive cone is valid, so the
  /// loss is independent of how many pixels the mask keeps.
  MaskedResult masked(ad::Tape<T>& tape, ad::Var<T> a, ad::Var<T> b,
                      const std::vector<unsigned char>& mask) const;

  static constexpr int kStages = 3;
  static constexpr int kFilters = 8;
  static constexpr int kKernel = 5;

 private:
  ad::Tensor<T> kernels_[kStages];  // (8, Cin*25)
};

// ---------------------------------------------------------------------------
// Elementary losses (recorded on the tape)
// ---------------------------------------------------------------------------

/// Mean squared pixel difference.
template <class T>
ad::Var<T> l2_loss(ad::Tape<T>& tape, ad::Var<T> a, ad::Var<T> b);

/// Sum over the (H-1)x(W-1) grid of squared forward differences in both
/// directions. Translation-invariant, quadratic under scaling.
template <class T>
ad::Var<T> depth_smoothness(ad::Tape<T>& tape, ad::Var<T> depth);

/// Multi-scale shift-correlation penalty on a noise map (H,W >= 8): the map
/// is normalized to zero mean / unit variance, then squared means of products
/// with one-pixel circular shifts are summed over an average-pool pyramid
/// down to min side 8. A constant map (variance < 1e-12) contributes 0.
template <class T>
ad::Var<T> noise_reg(ad::Tape<T>& tape, ad::Var<T> noise);

/// ||dw||_2^2.
template <class T>
ad::Var<T> delta_reg(ad::Tape<T>& tape, ad::Var<T> dw);

/// || R_gt^-1 * R_pred - I ||_F  (rotation as a (3,3) tape value).
template <class T>
ad::Var<T> rotation_loss(ad::Tape<T>& tape, ad::Var<T> r_pred,
                         const Eigen::Matrix3d& r_gt);

/// || t_gt - t_pred ||_2  (translation as a 3-element tape value).
template <class T>
ad::Var<T> translation_loss(ad::Tape<T>& tape, ad::Var<T> t_pred,
                            const Eigen::Vector3d& t_gt);

// Plain-value conveniences for metrics and tests.
double rotation_loss_value(const camera::RotationMatrix& r_pred,
                           const camera::RotationMatrix& r_gt);
double translation_loss_value(const Eigen::Vector3d& t_pred, const Eigen::Vector3d& t_gt);

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

template <class T>
struct CompositeLoss {
  ad::Var<T> total;
  // Unweighted term values by name, for the per-iteration trace.
  std::vector<std::pair<std::string, ad::Var<T>>> terms;
};

/// L_opt = perceptual(x, y) + w.warp * warp_term + w.noise * noise_reg(n).
/// Invalid warp/noise handles drop their terms.
template <class T>
CompositeLoss<T> opt_loss(ad::Tape<T>& tape, const PerceptualProxy<T>& proxy,
                          ad::Var<T> target, ad::Var<T> image, ad::Var<T> warp_term,
                          ad::Var<T> noise, const LossWeights& w);

/// L_pt = perceptual(x, y) + w.l2 * MSE + w.depth_reg * depth_smoothness(D).
template <class T>
CompositeLoss<T> pt_loss(ad::Tape<T>& tape, const PerceptualProxy<T>& proxy,
                         ad::Var<T> target, ad::Var<T> image, ad::Var<T> depth,
                         const LossWeights& w);

/// Encoder pretraining objective: perceptual reconstruction + delta
/// regularization (the adversarial term is fixed at zero).
template <class T>
CompositeLoss<T> encoder_loss(ad::Tape<T>& tape, const PerceptualProxy<T>& proxy,
                              ad::Var<T> target, ad::Var<T> recon, ad::Var<T> dw,
                              const LossWeights& w);

/// Pose pretraining objective: rotation_loss + w.trans * translation_loss.
template <class T>
CompositeLoss<T> pose_loss(ad::Tape<T>& tape, ad::Var<T> r_pred, ad::Var<T> t_pred,
                           const camera::CameraPose& gt, const LossWeights& w);

double pose_loss_value(const camera::CameraPose& pred, const camera::CameraPose& gt,
                       const LossWeights& w);

extern template class PerceptualProxy<float>;
extern template class PerceptualProxy<double>;

}  // namespace povert::loss

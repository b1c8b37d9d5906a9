#pragma once

#include <vector>

#include "povert/camera.hpp"
#include "povert/field.hpp"
#include "povert/loss.hpp"
#include "povert/tape.hpp"

namespace povert::warp {

/// Continuous sampling coordinates into a source image, in pixel-index space
/// (0..W-1 / 0..H-1), plus validity. mask is true exactly when the
/// coordinates are in bounds (points behind the camera are parked out of
/// bounds and therefore invalid).
struct CoordGrid {
  int height = 0, width = 0;
  std::vector<double> u, v;
  std::vector<unsigned char> mask;

  std::size_t count() const { return u.size(); }
  double valid_fraction() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return mask.empty() ? 0.0 : static_cast<double>(n) / mask.size();
  }
};

/// Reproject each pixel of the shared raster through its depth: back-project
/// with depth(p), apply `rel` (source-camera frame to target-camera frame),
/// perspective-divide, project. Computed as an offset from the identity grid,
/// so rel = identity yields the pixel grid bit-exactly.
CoordGrid project(const ad::Tensor<double>& depth, const camera::RigidTransform& rel,
                  const camera::Intrinsics& k);

/// Plain 4-neighbor bilinear lookup with zero padding; invalid pixels are 0.
template <class T>
ad::Tensor<T> bilinear_sample(const ad::Tensor<T>& img, const CoordGrid& grid);

// ---------------------------------------------------------------------------
// Tape-level warping
// ---------------------------------------------------------------------------

/// Relative transform entries (rank-0 tape scalars) mapping the pose's
/// camera frame into the canonical camera frame — the direction needed to
/// sample the canonical render from the pose's raster.
template <class T>
struct RelativeTransform {
  std::array<ad::Var<T>, 9> rot;
  std::array<ad::Var<T>, 3> t;
};

template <class T>
RelativeTransform<T> relative_from_canonical(ad::Tape<T>& tape,
                                             const field::PoseGraph<T>& pose,
                                             const camera::CameraPose& canonical);

template <class T>
struct ProjectedGrid {
  ad::Var<T> u, v;                  // rank-1 (H*W)
  std::vector<unsigned char> mask;  // from forward values
};

template <class T>
ProjectedGrid<T> project_graph(ad::Tape<T>& tape, ad::Var<T> depth,
                               const RelativeTransform<T>& rel,
                               const camera::Intrinsics& k);

// ---------------------------------------------------------------------------
// Warping loss
// ---------------------------------------------------------------------------

enum class WarpVariant {
  kAgainstTarget,  // compare warped canonical render against the target image
  kAgainstRender,  // compare against the current render (algorithmic variant)
};

struct WarpOptions {
  camera::CameraPose canonical;      // yaw 0, pitch 0, t 0 by default
  WarpVariant variant = WarpVariant::kAgainstTarget;
  bool detach_canonical = true;      // cut gradients into y_can / D_can
};

template <class T>
struct WarpLossResult {
  ad::Var<T> value;
  bool mask_empty = false;
  double valid_fraction = 0.0;
};

/// L_warp: render {y_can, D_can} at the canonical pose with the current
/// latent, reproject through the relative pose, bilinear-sample, and compare
/// under the masked perceptual proxy. With detach_canonical (default) the
/// gradient reaches only the pose parameters.
template <class T>
WarpLossResult<T> warp_loss_graph(ad::Tape<T>& tape, const loss::PerceptualProxy<T>& proxy,
                                  ad::Var<T> target, ad::Var<T> w,
                                  const field::PoseGraph<T>& pose,
                                  const field::GeneratorLeaves<T>& theta,
                                  const field::GeneratorConfig& cfg,
                                  const WarpOptions& opts);

}  // namespace povert::warp

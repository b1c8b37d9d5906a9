#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "povert/camera.hpp"
#include "povert/tape.hpp"
#include "povert/tensor.hpp"

namespace povert::field {

/// Everything that fixes the generator's architecture and render geometry.
/// Two configs are interchangeable only if all fields match.
struct GeneratorConfig {
  int z_dim = 64;
  int map_hidden = 128;
  int w_dim = 512;
  int field_width = 32;
  int posenc_freqs = 4;
  int image_size = 32;  // square renders
  int samples_per_ray = 32;
  double radius = 2.7;
  double fov_deg = 30.0;
  double density_bias = -1.0;
  double density_scale = 4.0;
  double modulation_scale = 0.1;
  bool mapping_linear = false;  // drop the mapping nonlinearity (used by tests)
  bool jitter = true;           // stratified sampling; false = bin midpoints
  std::uint64_t jitter_seed = 1;

  double near() const { return radius - 1.0; }
  double far() const { return radius + 1.0; }
  int posenc_dim() const { return 3 + 6 * posenc_freqs; }
  camera::Intrinsics intrinsics() const {
    return camera::Intrinsics::for_image(image_size, image_size, fov_deg);
  }
};

/// Generator weights theta. Mapping network (z -> w), three modulated field
/// layers, density and color heads. Weight matrices are stored (in, out) so a
/// row vector of activations multiplies from the left.
template <class T>
struct FieldParams {
  ad::Tensor<T> map_w1, map_b1, map_w2, map_b2;
  std::array<ad::Tensor<T>, 3> mod_scale_w, mod_scale_b;
  std::array<ad::Tensor<T>, 3> mod_shift_w, mod_shift_b;
  std::array<ad::Tensor<T>, 3> lin_w, lin_b;
  ad::Tensor<T> sigma_w, sigma_b, color_w, color_b;

  static FieldParams random_init(const GeneratorConfig& cfg, std::uint64_t seed);

  /// Canonical tensor order used by flattening, checkpoints and gradients.
  std::vector<const ad::Tensor<T>*> tensors() const;
  std::vector<ad::Tensor<T>*> tensors();

  std::size_t param_count() const;
  ad::Tensor<T> flat() const;  // rank-1
  void set_flat(const ad::Tensor<T>& v);

  template <class U>
  FieldParams<U> cast() const {
    FieldParams<U> o;
    auto src = tensors();
    auto dst = o.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<U>();
    return o;
  }
};

/// theta' = theta + magnitude * g with g a unit-norm Gaussian direction.
template <class T>
FieldParams<T> perturb_params(const FieldParams<T>& p, double magnitude, std::uint64_t seed);

/// w = mapping(z), z ~ N(0, I_{z_dim}); deterministic per seed. Returns (1, w_dim).
template <class T>
ad::Tensor<T> sample_latent(const FieldParams<T>& p, const GeneratorConfig& cfg,
                            std::uint64_t seed);

/// Empirical mean of sample_latent over n_samples derived seeds (n >= 1000).
template <class T>
ad::Tensor<T> average_latent(const FieldParams<T>& p, const GeneratorConfig& cfg,
                             int n_samples, std::uint64_t seed_base = 0);

// ---------------------------------------------------------------------------
// Pose parameterization on the tape
// ---------------------------------------------------------------------------

enum class PoseMode { kEuler, kSixD };

inline int pose_param_count(PoseMode m) { return m == PoseMode::kEuler ? 5 : 9; }

/// Optimizable pose vector: Euler [yaw, pitch, tx, ty, tz] or
/// SixD [a1(3), a2(3), tx, ty, tz]. Radius never optimizes.
ad::Tensor<double> pose_to_params(const camera::CameraPose& p, PoseMode mode);
camera::CameraPose pose_from_params(const ad::Tensor<double>& v, PoseMode mode,
                                    double radius);

/// Rotation entries and camera center as rank-0 tape scalars.
template <class T>
struct PoseGraph {
  std::array<ad::Var<T>, 9> rot;  // row-major camera-to-world
  std::array<ad::Var<T>, 3> center;
};

template <class T>
PoseGraph<T> build_pose_graph(ad::Tape<T>& tape, ad::Var<T> pose_params, PoseMode mode,
                              double radius);

// ---------------------------------------------------------------------------
// Fields and rendering
// ---------------------------------------------------------------------------

/// A volume sampled by the renderer: positions (N,3) -> density (N,1) in
/// [0,inf) and rgb (N,3) in [0,1]. Implementations decide whether gradients
/// flow to positions.
template <class T>
struct FieldProgram {
  virtual ~FieldProgram() = default;
  virtual std::pair<ad::Var<T>, ad::Var<T>> emit(ad::Tape<T>& tape,
                                                 ad::Var<T> positions) const = 0;
};

/// Tape handles for the generator weights, in FieldParams::tensors() order.
template <class T>
struct GeneratorLeaves {
  std::vector<ad::Var<T>> vars;
};

template <class T>
GeneratorLeaves<T> make_theta_vars(ad::Tape<T>& tape, const FieldParams<T>& p,
                                   bool differentiable);

/// The latent-modulated neural field around given w and theta handles.
template <class T>
class NeuralFieldProgram : public FieldProgram<T> {
 public:
  NeuralFieldProgram(ad::Var<T> w, const GeneratorLeaves<T>& theta,
                     const GeneratorConfig& cfg)
      : w_(w), theta_(&theta), cfg_(&cfg) {}
  std::pair<ad::Var<T>, ad::Var<T>> emit(ad::Tape<T>& tape,
                                         ad::Var<T> positions) const override;

 private:
  ad::Var<T> w_;
  const GeneratorLeaves<T>* theta_;
  const GeneratorConfig* cfg_;
};

template <class T>
struct RenderGraph {
  ad::Var<T> image;       // (3,H,W), invalid when color skipped
  ad::Var<T> depth;       // (H,W); 0 where opacity < 1e-3
  ad::Var<T> opacity;     // (H,W) = 1 - residual transmittance
  ad::Var<T> trans;       // (rays, M) transmittance T_i (diagnostics)
  ad::Var<T> weights;     // (rays, M) T_i * alpha_i   (diagnostics)
};

/// Records the full render into the tape. `noise` may be invalid (no noise
/// term). M >= 2 or InvalidSampleCount.
template <class T>
RenderGraph<T> render_graph(ad::Tape<T>& tape, const FieldProgram<T>& field,
                            const PoseGraph<T>& pose, ad::Var<T> noise,
                            const GeneratorConfig& cfg, bool want_color = true);

/// Convenience: generator field from explicit leaves.
template <class T>
RenderGraph<T> render_graph(ad::Tape<T>& tape, ad::Var<T> w, const PoseGraph<T>& pose,
                            ad::Var<T> noise, const GeneratorLeaves<T>& theta,
                            const GeneratorConfig& cfg, bool want_color = true);

// ---------------------------------------------------------------------------
// Plain (forward-only) rendering
// ---------------------------------------------------------------------------

template <class T>
struct RenderOutput {
  ad::Tensor<T> image;  // (3,H,W) in [0,1]
  ad::Tensor<T> depth;  // (H,W)
};

template <class T>
RenderOutput<T> render(const ad::Tensor<T>& w, const camera::CameraPose& pose,
                       const ad::Tensor<T>* noise, const FieldParams<T>& params,
                       const GeneratorConfig& cfg);

/// Noise-free render.
template <class T>
RenderOutput<T> render(const ad::Tensor<T>& w, const camera::CameraPose& pose,
                       const FieldParams<T>& params, const GeneratorConfig& cfg) {
  return render(w, pose, static_cast<const ad::Tensor<T>*>(nullptr), params, cfg);
}

template <class T>
ad::Tensor<T> render_depth_only(const ad::Tensor<T>& w, const camera::CameraPose& pose,
                                const FieldParams<T>& params, const GeneratorConfig& cfg);

extern template struct FieldParams<float>;
extern template struct FieldParams<double>;

}  // namespace povert::field

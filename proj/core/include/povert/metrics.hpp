#pragma once

#include <limits>
#include <utility>
#include <vector>

#include "povert/camera.hpp"
#include "povert/tensor.hpp"

namespace povert::bench {

/// Mean squared error over all entries (accumulated in double).
double mse(const ad::Tensor<float>& a, const ad::Tensor<float>& b);

/// 10*log10(1/MSE) for unit dynamic range; +inf when MSE is exactly 0.
double psnr(const ad::Tensor<float>& a, const ad::Tensor<float>& b);

/// Single-scale SSIM with sliding 8x8 box windows, K1=0.01, K2=0.03, L=1.
/// Channels are averaged. Needs H,W >= 8.
double ssim(const ad::Tensor<float>& a, const ad::Tensor<float>& b);

/// Absolute per-axis angular error in degrees (yaw, pitch).
std::pair<double, double> pose_angular_error(const camera::CameraPose& pred,
                                             const camera::CameraPose& gt);

struct Aggregate {
  double mean = 0, median = 0, p10 = 0, p90 = 0, min = 0, max = 0;
  std::size_t count = 0;
};

/// Order-independent summary (sorts internally).
Aggregate aggregate(std::vector<double> values);

double median(std::vector<double> values);

}  // namespace povert::bench

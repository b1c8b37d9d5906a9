#include "povert/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace povert::bench {

using ad::Tensor;

double mse(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape != b.shape) throw ShapeMismatch("mse on differently shaped tensors");
  double acc = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

namespace {

double ssim_channel(const float* a, const float* b, int h, int w) {
  constexpr int kWin = 8;
  constexpr double kC1 = 0.01 * 0.01;  // (K1*L)^2
  constexpr double kC2 = 0.03 * 0.03;  // (K2*L)^2
  const double inv_n = 1.0 / (kWin * kWin);
  double acc = 0;
  std::size_t windows = 0;
  for (int y = 0; y + kWin <= h; ++y)
    for (int x = 0; x + kWin <= w; ++x) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = 0; dy < kWin; ++dy)
        for (int dx = 0; dx < kWin; ++dx) {
          const double va = a[(y + dy) * w + (x + dx)];
          const double vb = b[(y + dy) * w + (x + dx)];
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      const double mu_a = sa * inv_n, mu_b = sb * inv_n;
      const double var_a = saa * inv_n - mu_a * mu_a;
      const double var_b = sbb * inv_n - mu_b * mu_b;
      const double cov = sab * inv_n - mu_a * mu_b;
      const double num = (2 * mu_a * mu_b + kC1) * (2 * cov + kC2);
      const double den = (mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2);
      acc += num / den;
      ++windows;
    }
  return acc / static_cast<double>(windows);
}

}  // namespace

double ssim(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape != b.shape) throw ShapeMismatch("ssim on differently shaped tensors");
  if (a.rank() != 3 || a.shape[1] < 8 || a.shape[2] < 8)
    throw ShapeMismatch("ssim needs (C,H,W) with H,W >= 8");
  const int c = a.shape[0], h = a.shape[1], w = a.shape[2];
  double acc = 0;
  for (int ch = 0; ch < c; ++ch)
    acc += ssim_channel(a.data.data() + static_cast<std::size_t>(ch) * h * w,
                        b.data.data() + static_cast<std::size_t>(ch) * h * w, h, w);
  return acc / c;
}

std::pair<double, double> pose_angular_error(const camera::CameraPose& pred,
                                             const camera::CameraPose& gt) {
  const double deg = 180.0 / M_PI;
  return {std::abs(pred.yaw - gt.yaw) * deg, std::abs(pred.pitch - gt.pitch) * deg};
}

Aggregate aggregate(std::vector<double> values) {
  Aggregate a;
  a.count = values.size();
  if (values.empty()) return a;
  std::sort(values.begin(), values.end());
  double sum = 0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(values.size());
  a.min = values.front();
  a.max = values.back();
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
  };
  a.median = quantile(0.5);
  a.p10 = quantile(0.1);
  a.p90 = quantile(0.9);
  return a;
}

double median(std::vector<double> values) { return aggregate(std::move(values)).median; }

}  // namespace povert::bench

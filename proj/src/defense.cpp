#include "entro/defense.hpp"

#include <algorithm>
#include <cmath>

#include "entro/data.hpp"

namespace entro {

double total_variation(const float* img, int channels, int h, int w) {
  double tv = 0.0;
  for (int c = 0; c < channels; ++c) {
    const float* plane = img + static_cast<int64_t>(c) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (y + 1 < h)
          tv += std::fabs(static_cast<double>(plane[(y + 1) * w + x]) - plane[y * w + x]);
        if (x + 1 < w)
          tv += std::fabs(static_cast<double>(plane[y * w + x + 1]) - plane[y * w + x]);
      }
  }
  return tv;
}

void tv_subgradient(const float* img, int channels, int h, int w, float* g) {
  const int64_t n = static_cast<int64_t>(channels) * h * w;
  std::fill(g, g + n, 0.0f);
  for (int c = 0; c < channels; ++c) {
    const float* plane = img + static_cast<int64_t>(c) * h * w;
    float* gp = g + static_cast<int64_t>(c) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (y + 1 < h) {
          const float d = plane[(y + 1) * w + x] - plane[y * w + x];
          const float s = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
          gp[(y + 1) * w + x] += s;
          gp[y * w + x] -= s;
        }
        if (x + 1 < w) {
          const float d = plane[y * w + x + 1] - plane[y * w + x];
          const float s = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
          gp[y * w + x + 1] += s;
          gp[y * w + x] -= s;
        }
      }
  }
}

namespace {

void denoise_impl(float* img, int channels, int h, int w, const float* mask_hw,
                  const DenoiseConfig& cfg) {
  if (cfg.steps < 0) throw ValueError("tv_denoise: steps must be non-negative");
  if (!(cfg.alpha > 0.0f)) throw ValueError("tv_denoise: alpha must be positive");
  if (cfg.lambda < 0.0f) throw ValueError("tv_denoise: lambda must be non-negative");
  const int64_t n = static_cast<int64_t>(channels) * h * w;
  const std::vector<float> x0(img, img + n);
  std::vector<float> g(static_cast<size_t>(n));
  for (int step = 0; step < cfg.steps; ++step) {
    tv_subgradient(img, channels, h, w, g.data());
    for (int64_t i = 0; i < n; ++i) {
      const float m = mask_hw ? mask_hw[i % (static_cast<int64_t>(h) * w)] : 1.0f;
      const float upd = (img[i] - x0[static_cast<size_t>(i)]) + cfg.lambda * g[static_cast<size_t>(i)];
      img[i] = std::clamp(img[i] - cfg.alpha * m * upd, 0.0f, 1.0f);
    }
  }
}

}  // namespace

void tv_denoise(float* img, int channels, int h, int w, const DenoiseConfig& cfg) {
  denoise_impl(img, channels, h, w, nullptr, cfg);
}

void masked_tv_denoise(float* img, int channels, int h, int w, const float* mask_hw,
                       const DenoiseConfig& cfg) {
  denoise_impl(img, channels, h, w, mask_hw, cfg);
}

std::vector<float> prior_soft_mask(const SplitModel& model, const float* img) {
  TensorT<float> x = TensorT<float>::from_data(
      Shape{1, kImageChannels, kImageDim, kImageDim},
      std::vector<float>(img, img + kImageFloats));
  auto po = model.prior_forward(x, QuantMode::kRoundSte);
  const auto& lik = po.z_lik.values();
  const int c = po.z_lik.dim(1), lh = po.z_lik.dim(2), lw = po.z_lik.dim(3);

  std::vector<float> coarse(static_cast<size_t>(lh) * lw, 0.0f);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < lh * lw; ++i)
      coarse[static_cast<size_t>(i)] += lik[static_cast<size_t>(ch) * lh * lw + i];
  for (auto& v : coarse) v /= static_cast<float>(c);

  // bilinear resize latent grid -> image grid
  std::vector<float> mask(static_cast<size_t>(kImagePixels));
  const double sy = static_cast<double>(lh) / kImageDim, sx = static_cast<double>(lw) / kImageDim;
  for (int y = 0; y < kImageDim; ++y)
    for (int x = 0; x < kImageDim; ++x) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, lh - 1.0);
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, lw - 1.0);
      const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      const int y1 = std::min(y0 + 1, lh - 1), x1 = std::min(x0 + 1, lw - 1);
      const double wy = fy - y0, wx = fx - x0;
      const double v = (1 - wy) * ((1 - wx) * coarse[static_cast<size_t>(y0) * lw + x0] +
                                   wx * coarse[static_cast<size_t>(y0) * lw + x1]) +
                       wy * ((1 - wx) * coarse[static_cast<size_t>(y1) * lw + x0] +
                             wx * coarse[static_cast<size_t>(y1) * lw + x1]);
      mask[static_cast<size_t>(y) * kImageDim + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return mask;
}

std::vector<float> tv_patch_map(const float* img, int channels, int h, int w, int patch) {
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    throw ValueError("tv_patch_map: patch must divide the image dims");
  const int mh = h / patch, mw = w / patch;
  std::vector<float> map(static_cast<size_t>(mh) * mw, 0.0f);
  for (int c = 0; c < channels; ++c) {
    const float* plane = img + static_cast<int64_t>(c) * h * w;
    for (int py = 0; py < mh; ++py)
      for (int px = 0; px < mw; ++px) {
        double tv = 0.0;
        for (int y = py * patch; y < (py + 1) * patch; ++y)
          for (int x = px * patch; x < (px + 1) * patch; ++x) {
            if (x + 1 < (px + 1) * patch)
              tv += std::abs(plane[y * w + x + 1] - plane[y * w + x]);
            if (y + 1 < (py + 1) * patch)
              tv += std::abs(plane[(y + 1) * w + x] - plane[y * w + x]);
          }
        map[static_cast<size_t>(py) * mw + px] += static_cast<float>(tv);
      }
  }
  return map;
}

}  // namespace entro

#pragma once

// Input purification: anisotropic total-variation denoising by projected
// subgradient descent, plus an object-aware variant that scales the update
// with a soft mask derived from the prior's own likelihoods, so cheap
// (predictable) regions get smoothed hard while expensive object regions
// keep their detail.

#include <vector>

#include "entro/model.hpp"

namespace entro {

// Sum over channels of |forward difference| along both axes.
double total_variation(const float* img, int channels, int h, int w);

// Subgradient of total_variation into g (same layout, caller-zeroed not
// required; g is overwritten). Sign contributions, zero at kinks.
void tv_subgradient(const float* img, int channels, int h, int w, float* g);

struct DenoiseConfig {
  float lambda = 0.1f;  // smoothing strength against the data term
  float alpha = 0.05f;  // step size
  int steps = 100;
};

// x <- clamp01(x - alpha * ((x - x0) + lambda * dTV(x))), x0 = input
void tv_denoise(float* img, int channels, int h, int w, const DenoiseConfig& cfg);

// Same iteration with the per-pixel step scaled by mask_hw (h*w weights in
// [0,1], shared across channels). mask 1 = denoise fully, 0 = freeze.
void masked_tv_denoise(float* img, int channels, int h, int w, const float* mask_hw,
                       const DenoiseConfig& cfg);

// Channel-mean likelihood of the rounded latent under the model's prior,
// bilinearly upsampled from the latent grid to 32x32. High where the prior
// finds the content predictable (background), low on objects.
std::vector<float> prior_soft_mask(const SplitModel& model, const float* img);

// Total variation of each patch x patch tile (differences kept inside the
// tile), returned row-major at (h/patch) x (w/patch). patch must divide h, w.
std::vector<float> tv_patch_map(const float* img, int channels, int h, int w, int patch);

}  // namespace entro

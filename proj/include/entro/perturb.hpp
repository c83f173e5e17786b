#pragma once

// Input perturbations: the common-corruption family at five severities,
// an L-inf PGD attacker with entropy / accuracy / regional objectives,
// and the low-frequency (DCT-filtered) attack variant.

#include <cstdint>
#include <string>
#include <vector>

#include "entro/common.hpp"
#include "entro/model.hpp"

namespace entro {

enum class CorruptionKind {
  kGaussianNoise,
  kShotNoise,
  kImpulseNoise,
  kDefocusBlur,
  kMotionBlur,
  kGlassBlur,
  kContrast,
};

const std::vector<std::string>& corruption_names();
CorruptionKind corruption_from_name(const std::string& name);

// All operate on one [3,32,32] image with values in [0,1], in place.
void gaussian_noise(float* img, double sigma, Rng& rng);
void shot_noise(float* img, double lambda, Rng& rng);
void impulse_noise(float* img, double p, Rng& rng);
void defocus_blur(float* img, double radius);
void motion_blur(float* img, int length);  // 45-degree streak
void glass_blur(float* img, double sigma, int iters, Rng& rng);
void contrast_shift(float* img, double factor);
void gaussian_blur(float* img, double sigma);

// severity in 1..5
void corrupt_image(float* img, CorruptionKind kind, int severity, Rng& rng);

// Random corner of the L-inf ball: x +- eps per pixel, clamped. The null
// hypothesis an attack has to beat.
void random_sign_noise(float* img, double eps, Rng& rng);

// ---------------------------------------------------------------------------
// DCT (orthonormal type II), used by the low-frequency attack.

void dct2(const float* in, float* out, int n);
void idct2(const float* in, float* out, int n);
// zeroes all coefficients with u + v >= cutoff, per channel of a [3,n,n] buffer
void lowpass_filter(float* img3, int n, int cutoff);

// ---------------------------------------------------------------------------
// PGD

enum class AttackLoss { kEntropy, kAccuracy, kRegionalEntropy };

const char* attack_loss_name(AttackLoss loss);
AttackLoss attack_loss_from_name(const std::string& name);

struct AttackConfig {
  AttackLoss loss = AttackLoss::kEntropy;
  double epsilon = 8.0 / 255.0;
  int steps = 20;
  double alpha_frac = 2.5;  // step size = alpha_frac * epsilon / steps
  bool random_start = false;
  bool low_freq = false;
  int freq_cutoff = 8;
  uint64_t seed = 0;
};

// Maximizes the configured loss within the eps ball around x0, projected to
// [0,1]. The label is only consulted by the accuracy objective.
std::vector<float> pgd_attack(const SplitModel& model, const float* x0, int label,
                              const AttackConfig& cfg);

}  // namespace entro

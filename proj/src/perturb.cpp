#include "entro/perturb.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "entro/data.hpp"

namespace entro {

namespace {

constexpr int kDim = kImageDim;
constexpr int kPix = kImagePixels;

int reflect(int i, int n) {
  // reflect-101 style without repeating the edge twice
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

void convolve_kernel(float* img, const std::vector<double>& kernel, int kh, int kw) {
  const int cy = kh / 2, cx = kw / 2;
  std::vector<float> out(static_cast<size_t>(kPix));
  for (int c = 0; c < kImageChannels; ++c) {
    float* plane = img + static_cast<int64_t>(c) * kPix;
    for (int y = 0; y < kDim; ++y)
      for (int x = 0; x < kDim; ++x) {
        double acc = 0.0;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const double w = kernel[static_cast<size_t>(ky) * kw + kx];
            if (w == 0.0) continue;
            acc += w * plane[reflect(y + ky - cy, kDim) * kDim + reflect(x + kx - cx, kDim)];
          }
        out[static_cast<size_t>(y) * kDim + x] = static_cast<float>(acc);
      }
    std::copy(out.begin(), out.end(), plane);
  }
}

void clamp01(float* img) {
  for (int64_t i = 0; i < kImageFloats; ++i) img[i] = std::clamp(img[i], 0.0f, 1.0f);
}

const double kSeverityGaussian[5] = {0.03, 0.06, 0.10, 0.15, 0.22};
const double kSeverityShot[5] = {60.0, 25.0, 12.0, 5.0, 3.0};
const double kSeverityImpulse[5] = {0.02, 0.05, 0.09, 0.15, 0.25};
const double kSeverityDefocus[5] = {1.0, 1.5, 2.0, 2.5, 3.5};
const int kSeverityMotion[5] = {3, 5, 7, 9, 11};
const double kSeverityGlassSigma[5] = {0.6, 0.8, 1.0, 1.25, 1.5};
const int kSeverityGlassIters[5] = {1, 1, 2, 2, 3};
const double kSeverityContrast[5] = {0.6, 0.45, 0.3, 0.2, 0.1};

int check_severity(int severity) {
  if (severity < 1 || severity > 5)
    throw ValueError("severity " + std::to_string(severity) + " outside 1..5");
  return severity - 1;
}

}  // namespace

const std::vector<std::string>& corruption_names() {
  static const std::vector<std::string> names = {
      "gaussian_noise", "shot_noise",  "impulse_noise", "defocus_blur",
      "motion_blur",    "glass_blur",  "contrast",
  };
  return names;
}

CorruptionKind corruption_from_name(const std::string& name) {
  const auto& names = corruption_names();
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<CorruptionKind>(i);
  throw ValueError("unknown corruption '" + name + "'");
}

void gaussian_noise(float* img, double sigma, Rng& rng) {
  for (int64_t i = 0; i < kImageFloats; ++i)
    img[i] = static_cast<float>(img[i] + sigma * rng.normal());
  clamp01(img);
}

void shot_noise(float* img, double lambda, Rng& rng) {
  if (!(lambda > 0.0)) throw ValueError("shot_noise: lambda must be positive");
  for (int64_t i = 0; i < kImageFloats; ++i)
    img[i] = static_cast<float>(rng.poisson(static_cast<double>(img[i]) * lambda) / lambda);
  clamp01(img);
}

void impulse_noise(float* img, double p, Rng& rng) {
  if (p < 0.0 || p > 1.0) throw ValueError("impulse_noise: probability outside [0,1]");
  for (int64_t i = 0; i < kImageFloats; ++i)
    if (rng.uniform() < p) img[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
}

void defocus_blur(float* img, double radius) {
  if (!(radius > 0.0)) throw ValueError("defocus_blur: radius must be positive");
  const int r = static_cast<int>(std::ceil(radius));
  const int k = 2 * r + 1;
  std::vector<double> kernel(static_cast<size_t>(k) * k);
  double total = 0.0;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      const double d = std::hypot(y - r, x - r);
      const double w = std::clamp(radius + 0.5 - d, 0.0, 1.0);  // anti-aliased disk edge
      kernel[static_cast<size_t>(y) * k + x] = w;
      total += w;
    }
  for (auto& w : kernel) w /= total;
  convolve_kernel(img, kernel, k, k);
  clamp01(img);
}

void motion_blur(float* img, int length) {
  if (length < 1) throw ValueError("motion_blur: length must be positive");
  if (length % 2 == 0) throw ValueError("motion_blur: length must be odd");
  std::vector<double> kernel(static_cast<size_t>(length) * length, 0.0);
  for (int i = 0; i < length; ++i)
    kernel[static_cast<size_t>(i) * length + (length - 1 - i)] = 1.0 / length;
  convolve_kernel(img, kernel, length, length);
  clamp01(img);
}

void gaussian_blur(float* img, double sigma) {
  if (!(sigma > 0.0)) throw ValueError("gaussian_blur: sigma must be positive");
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k1(static_cast<size_t>(2 * r + 1));
  double total = 0.0;
  for (int i = -r; i <= r; ++i) {
    k1[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k1[static_cast<size_t>(i + r)];
  }
  for (auto& w : k1) w /= total;
  convolve_kernel(img, k1, 1, 2 * r + 1);
  convolve_kernel(img, k1, 2 * r + 1, 1);
}

void glass_blur(float* img, double sigma, int iters, Rng& rng) {
  if (iters < 0) throw ValueError("glass_blur: iteration count must be non-negative");
  gaussian_blur(img, sigma);
  for (int it = 0; it < iters; ++it)
    for (int y = 0; y < kDim; ++y)
      for (int x = 0; x < kDim; ++x) {
        const int dy = static_cast<int>(rng.below(3)) - 1;
        const int dx = static_cast<int>(rng.below(3)) - 1;
        const int y2 = y + dy, x2 = x + dx;
        if (y2 < 0 || y2 >= kDim || x2 < 0 || x2 >= kDim) continue;
        for (int c = 0; c < kImageChannels; ++c)
          std::swap(img[c * kPix + y * kDim + x], img[c * kPix + y2 * kDim + x2]);
      }
  clamp01(img);
}

void contrast_shift(float* img, double factor) {
  if (!(factor >= 0.0)) throw ValueError("contrast_shift: factor must be non-negative");
  for (int c = 0; c < kImageChannels; ++c) {
    float* plane = img + static_cast<int64_t>(c) * kPix;
    double mean = 0.0;
    for (int i = 0; i < kPix; ++i) mean += plane[i];
    mean /= kPix;
    for (int i = 0; i < kPix; ++i)
      plane[i] = static_cast<float>(mean + factor * (plane[i] - mean));
  }
  clamp01(img);
}

void corrupt_image(float* img, CorruptionKind kind, int severity, Rng& rng) {
  const int s = check_severity(severity);
  switch (kind) {
    case CorruptionKind::kGaussianNoise: gaussian_noise(img, kSeverityGaussian[s], rng); break;
    case CorruptionKind::kShotNoise: shot_noise(img, kSeverityShot[s], rng); break;
    case CorruptionKind::kImpulseNoise: impulse_noise(img, kSeverityImpulse[s], rng); break;
    case CorruptionKind::kDefocusBlur: defocus_blur(img, kSeverityDefocus[s]); break;
    case CorruptionKind::kMotionBlur: motion_blur(img, kSeverityMotion[s]); break;
    case CorruptionKind::kGlassBlur:
      glass_blur(img, kSeverityGlassSigma[s], kSeverityGlassIters[s], rng);
      break;
    case CorruptionKind::kContrast: contrast_shift(img, kSeverityContrast[s]); break;
  }
}

void random_sign_noise(float* img, double eps, Rng& rng) {
  for (int64_t i = 0; i < kImageFloats; ++i)
    img[i] = static_cast<float>(img[i] + (rng.uniform() < 0.5 ? -eps : eps));
  clamp01(img);
}

// ---------------------------------------------------------------------------

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

const MatD& dct_matrix(int n) {
  static int cached_n = 0;
  static MatD cached;
  if (cached_n != n) {
    cached.resize(n, n);
    const double pi = 3.14159265358979323846;
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < n; ++i)
        cached(k, i) = std::sqrt((k == 0 ? 1.0 : 2.0) / n) * std::cos(pi * (2 * i + 1) * k / (2.0 * n));
    cached_n = n;
  }
  return cached;
}

}  // namespace

void dct2(const float* in, float* out, int n) {
  const MatD& c = dct_matrix(n);
  MatD x(n, n);
  for (int i = 0; i < n * n; ++i) x.data()[i] = in[i];
  MatD y = c * x * c.transpose();
  for (int i = 0; i < n * n; ++i) out[i] = static_cast<float>(y.data()[i]);
}

void idct2(const float* in, float* out, int n) {
  const MatD& c = dct_matrix(n);
  MatD x(n, n);
  for (int i = 0; i < n * n; ++i) x.data()[i] = in[i];
  MatD y = c.transpose() * x * c;
  for (int i = 0; i < n * n; ++i) out[i] = static_cast<float>(y.data()[i]);
}

void lowpass_filter(float* img3, int n, int cutoff) {
  std::vector<float> freq(static_cast<size_t>(n) * n);
  for (int c = 0; c < kImageChannels; ++c) {
    float* plane = img3 + static_cast<int64_t>(c) * n * n;
    dct2(plane, freq.data(), n);
    for (int u = 0; u < n; ++u)
      for (int v = 0; v < n; ++v)
        if (u + v >= cutoff) freq[static_cast<size_t>(u) * n + v] = 0.0f;
    idct2(freq.data(), plane, n);
  }
}

// ---------------------------------------------------------------------------

const char* attack_loss_name(AttackLoss loss) {
  switch (loss) {
    case AttackLoss::kEntropy: return "entropy";
    case AttackLoss::kAccuracy: return "accuracy";
    case AttackLoss::kRegionalEntropy: return "regional_entropy";
  }
  return "?";
}

AttackLoss attack_loss_from_name(const std::string& name) {
  if (name == "entropy") return AttackLoss::kEntropy;
  if (name == "accuracy") return AttackLoss::kAccuracy;
  if (name == "regional_entropy") return AttackLoss::kRegionalEntropy;
  throw ValueError("unknown attack loss '" + name + "'");
}

namespace {

// Builds the scalar objective for one PGD step. x must require grad.
TensorT<float> attack_objective(const SplitModel& model, const TensorT<float>& x, int label,
                                AttackLoss kind) {
  auto po = model.prior_forward(x, QuantMode::kRoundSte);
  switch (kind) {
    case AttackLoss::kEntropy:
      // z-stream estimate only: the side stream is a fixed small cost and
      // diluting the gradient with it weakens the attack
      return sum(model.neg_log2_bits(po.z_lik));
    case AttackLoss::kAccuracy:
      return softmax_cross_entropy(model.tail_forward(po.z_tilde), {label});
    case AttackLoss::kRegionalEntropy: {
      // bits weighted by detached (1 - p): concentrates pressure on the
      // elements that are already expensive, i.e. object regions
      auto p = clamp_min(po.z_lik, static_cast<double>(model.config().likelihood_floor));
      std::vector<float> w(p.values().size());
      for (size_t i = 0; i < w.size(); ++i) w[i] = 1.0f - po.z_lik.values()[i];
      auto weights = TensorT<float>::from_data(p.shape(), w);
      constexpr double kInvLn2 = 1.4426950408889634074;
      return sum(mul(weights, scale(log(p), -kInvLn2)));
    }
  }
  throw ValueError("attack_objective: bad loss kind");
}

}  // namespace

std::vector<float> pgd_attack(const SplitModel& model, const float* x0, int label,
                              const AttackConfig& cfg) {
  if (cfg.steps < 1) throw ValueError("pgd_attack: steps must be positive");
  if (!(cfg.epsilon > 0.0)) throw ValueError("pgd_attack: epsilon must be positive");
  if (cfg.freq_cutoff < 1 || cfg.freq_cutoff > 2 * kDim)
    throw ValueError("pgd_attack: frequency cutoff outside 1..64");

  std::vector<float> adv(x0, x0 + kImageFloats);
  Rng rng(cfg.seed);
  if (cfg.random_start) {
    for (int64_t i = 0; i < kImageFloats; ++i)
      adv[static_cast<size_t>(i)] = static_cast<float>(
          std::clamp(static_cast<double>(adv[static_cast<size_t>(i)]) +
                         rng.uniform(-cfg.epsilon, cfg.epsilon),
                     0.0, 1.0));
  }
  const double alpha = cfg.alpha_frac * cfg.epsilon / cfg.steps;

  for (int step = 0; step < cfg.steps; ++step) {
    TensorT<float> x =
        TensorT<float>::from_data(Shape{1, kImageChannels, kDim, kDim}, adv, true);
    auto loss = attack_objective(model, x, label, cfg.loss);
    backward(loss);
    if (!x.has_grad()) throw NumericError("pgd_attack: objective is not connected to the input");
    std::vector<float> g = x.grad();
    if (cfg.low_freq) lowpass_filter(g.data(), kDim, cfg.freq_cutoff);
    for (int64_t i = 0; i < kImageFloats; ++i) {
      const float gi = g[static_cast<size_t>(i)];
      double v = static_cast<double>(adv[static_cast<size_t>(i)]) +
                 alpha * (gi > 0.0f ? 1.0 : (gi < 0.0f ? -1.0 : 0.0));
      const double lo = std::max(0.0, static_cast<double>(x0[i]) - cfg.epsilon);
      const double hi = std::min(1.0, static_cast<double>(x0[i]) + cfg.epsilon);
      adv[static_cast<size_t>(i)] = static_cast<float>(std::clamp(v, lo, hi));
    }
  }
  return adv;
}

}  // namespace entro

#pragma once

// Split classifier with a coded bottleneck. The head maps images to a latent
// z, a learned prior models quantized z for entropy coding, and the tail
// classifies from the quantized latent. Two priors: a per-channel factorized
// logistic, and a mean-scale hyperprior whose side latent h is itself coded
// under a small factorized prior.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "entro/ops.hpp"

namespace entro {

enum class PriorKind { kFactorized, kMeanScaleHyper };

inline const char* prior_name(PriorKind p) {
  return p == PriorKind::kFactorized ? "factorized" : "mean_scale_hyper";
}

inline PriorKind prior_from_name(const std::string& s) {
  if (s == "factorized") return PriorKind::kFactorized;
  if (s == "mean_scale_hyper") return PriorKind::kMeanScaleHyper;
  throw ValueError("unknown prior '" + s + "', expected factorized or mean_scale_hyper");
}

struct ModelConfig {
  PriorKind prior = PriorKind::kMeanScaleHyper;
  float beta = 0.08f;
  int latent_channels = 48;
  int hyper_channels = 16;
  float sigma_floor = 1e-3f;
  float likelihood_floor = 1e-9f;
};

enum class QuantMode { kNoise, kRoundSte };

template <typename S>
struct PriorOutT {
  TensorT<S> z;        // raw head output
  TensorT<S> z_tilde;  // quantized (or noise-proxied) latent, tail input
  TensorT<S> z_lik;    // per-element box likelihood of z_tilde
  TensorT<S> h_tilde;  // quantized side latent (hyperprior only)
  TensorT<S> h_lik;    // box likelihood of h_tilde (hyperprior only)
  TensorT<S> mu;       // predicted mean of z (hyperprior only)
  TensorT<S> sigma;    // predicted scale of z (hyperprior only)
};

template <typename S>
class SplitModelT {
 public:
  explicit SplitModelT(ModelConfig cfg = {}) : cfg_(cfg) {}

  const ModelConfig& config() const { return cfg_; }

  void init(Rng& rng) {
    const int zc = cfg_.latent_channels, hc = cfg_.hyper_channels;
    h1w_ = conv_init(rng, 32, 3, 4);
    h1b_ = TensorT<S>::zeros(Shape{32});
    h2w_ = conv_init(rng, zc, 32, 4);
    h2b_ = TensorT<S>::zeros(Shape{zc});
    // The latent-producing convs start wide (gain 8) so integer rounding
    // keeps most of the signal from the first step; with a unit-scale start
    // the +-1/2 quantization noise drowns the features and training stalls
    // on a long plateau before the head learns to amplify on its own.
    h3w_ = conv_init(rng, zc, zc, 3, 8.0);
    h3b_ = TensorT<S>::zeros(Shape{zc});

    t1w_ = conv_init(rng, 64, zc, 3);
    t1b_ = TensorT<S>::zeros(Shape{64});
    t2w_ = conv_init(rng, 64, 64, 3);
    t2b_ = TensorT<S>::zeros(Shape{64});
    t3w_ = conv_init(rng, 64, 64, 3);
    t3b_ = TensorT<S>::zeros(Shape{64});
    fcw_ = dense_init(rng, 10, 64);
    fcb_ = TensorT<S>::zeros(Shape{10});

    const S unit_raw = static_cast<S>(inv_softplus_d(1.0 - cfg_.sigma_floor));
    fp_mu_ = TensorT<S>::zeros(Shape{zc});
    fp_sraw_ = TensorT<S>::full(Shape{zc}, unit_raw);

    he1w_ = conv_init(rng, 32, zc, 3);
    he1b_ = TensorT<S>::zeros(Shape{32});
    he2w_ = conv_init(rng, hc, 32, 4, 8.0);  // same wide start for the side latent
    he2b_ = TensorT<S>::zeros(Shape{hc});
    hd1w_ = conv_init(rng, 32, hc, 3);
    hd1b_ = TensorT<S>::zeros(Shape{32});
    hd2w_ = conv_init(rng, 2 * zc, 32, 3);
    hd2b_ = TensorT<S>::zeros(Shape{2 * zc});
    hp_mu_ = TensorT<S>::zeros(Shape{hc});
    hp_sraw_ = TensorT<S>::full(Shape{hc}, unit_raw);
  }

  // Fixed order; checkpoint layout and optimizer state both key off it.
  std::vector<std::pair<std::string, TensorT<S>*>> named_parameters() {
    return {
        {"head.conv1.w", &h1w_},  {"head.conv1.b", &h1b_},
        {"head.conv2.w", &h2w_},  {"head.conv2.b", &h2b_},
        {"head.conv3.w", &h3w_},  {"head.conv3.b", &h3b_},
        {"tail.conv1.w", &t1w_},  {"tail.conv1.b", &t1b_},
        {"tail.conv2.w", &t2w_},  {"tail.conv2.b", &t2b_},
        {"tail.conv3.w", &t3w_},  {"tail.conv3.b", &t3b_},
        {"tail.fc.w", &fcw_},     {"tail.fc.b", &fcb_},
        {"prior.z.mu", &fp_mu_},  {"prior.z.sraw", &fp_sraw_},
        {"hyper.enc1.w", &he1w_}, {"hyper.enc1.b", &he1b_},
        {"hyper.enc2.w", &he2w_}, {"hyper.enc2.b", &he2b_},
        {"hyper.dec1.w", &hd1w_}, {"hyper.dec1.b", &hd1b_},
        {"hyper.dec2.w", &hd2w_}, {"hyper.dec2.b", &hd2b_},
        {"prior.h.mu", &hp_mu_},  {"prior.h.sraw", &hp_sraw_},
    };
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : named_parameters()) t->set_requires_grad(on);
  }

  // [N,3,32,32] -> [N,zc,8,8]
  TensorT<S> head_forward(const TensorT<S>& x) const {
    auto a = relu(conv2d(x, h1w_, h1b_, 2, 1));
    auto b = relu(conv2d(a, h2w_, h2b_, 2, 1));
    return conv2d(b, h3w_, h3b_, 1, 1);
  }

  // [N,zc,8,8] -> [N,10]
  TensorT<S> tail_forward(const TensorT<S>& zq) const {
    auto a = relu(conv2d(zq, t1w_, t1b_, 1, 1));
    auto b = relu(conv2d(a, t2w_, t2b_, 1, 1));
    auto c = relu(conv2d(b, t3w_, t3b_, 1, 1));
    return dense(global_avg_pool(c), fcw_, fcb_);
  }

  // [N,zc,8,8] -> [N,hc,4,4]
  TensorT<S> hyper_encode(const TensorT<S>& z) const {
    auto a = relu(conv2d(z, he1w_, he1b_, 1, 1));
    return conv2d(a, he2w_, he2b_, 2, 1);
  }

  // [N,hc,4,4] -> (mu, sigma), both [N,zc,8,8], sigma > sigma_floor
  std::pair<TensorT<S>, TensorT<S>> hyper_decode(const TensorT<S>& h_tilde) const {
    auto a = relu(conv2d(upsample_nearest2x(h_tilde), hd1w_, hd1b_, 1, 1));
    auto both = conv2d(a, hd2w_, hd2b_, 1, 1);
    const int zc = cfg_.latent_channels;
    auto mu = slice_channels(both, 0, zc);
    auto sraw = slice_channels(both, zc, 2 * zc);
    auto sigma = scale_add(TensorT<S>::full(sraw.shape(), static_cast<S>(cfg_.sigma_floor)),
                           softplus(sraw), 1.0);
    return {mu, sigma};
  }

  TensorT<S> fp_z_scale() const {
    return scale_add(TensorT<S>::full(fp_sraw_.shape(), static_cast<S>(cfg_.sigma_floor)),
                     softplus(fp_sraw_), 1.0);
  }

  TensorT<S> fp_h_scale() const {
    return scale_add(TensorT<S>::full(hp_sraw_.shape(), static_cast<S>(cfg_.sigma_floor)),
                     softplus(hp_sraw_), 1.0);
  }

  // Box likelihood of an already-quantized z under the factorized prior.
  TensorT<S> fp_likelihood(const TensorT<S>& z_tilde) const {
    return logistic_box(z_tilde, fp_mu_, fp_z_scale());
  }

  TensorT<S> fp_h_likelihood(const TensorT<S>& h_tilde) const {
    return logistic_box(h_tilde, hp_mu_, fp_h_scale());
  }

  // Full encode-side pass. kNoise substitutes additive U(-1/2,1/2) for
  // rounding (training); kRoundSte rounds with a straight-through gradient
  // (attack / eval graphs). The hyperprior quantizes z as mu + round(z - mu),
  // matching what the codec transmits. Likelihoods are floored so they stay
  // in (0, 1] even where the f32 box CDFs underflow for far-out latents.
  PriorOutT<S> prior_forward(const TensorT<S>& x, QuantMode mode, uint64_t noise_seed = 0) const {
    PriorOutT<S> out;
    out.z = head_forward(x);
    if (cfg_.prior == PriorKind::kFactorized) {
      out.z_tilde = mode == QuantMode::kNoise ? add_uniform_noise(out.z, noise_seed)
                                              : round_ste(out.z);
      out.z_lik = floor_lik(fp_likelihood(out.z_tilde));
      return out;
    }
    auto h = hyper_encode(out.z);
    out.h_tilde = mode == QuantMode::kNoise ? add_uniform_noise(h, derive_seed(noise_seed, 1))
                                            : round_ste(h);
    out.h_lik = floor_lik(fp_h_likelihood(out.h_tilde));
    auto [mu, sigma] = hyper_decode(out.h_tilde);
    out.mu = mu;
    out.sigma = sigma;
    if (mode == QuantMode::kNoise) {
      out.z_tilde = add_uniform_noise(out.z, derive_seed(noise_seed, 2));
    } else {
      out.z_tilde = add(mu, round_ste(sub(out.z, mu)));
    }
    out.z_lik = floor_lik(gaussian_box(out.z_tilde, mu, sigma));
    return out;
  }

  // Estimated code length per sample in bits: sum of -log2 of the floored
  // box likelihoods, z stream plus (for the hyperprior) the h stream.
  TensorT<S> rate_bits(const PriorOutT<S>& po) const {
    auto bits = neg_log2_bits(po.z_lik);
    if (cfg_.prior == PriorKind::kMeanScaleHyper) bits = add(bits, neg_log2_bits(po.h_lik));
    return bits;
  }

  TensorT<S> neg_log2_bits(const TensorT<S>& lik) const {
    constexpr double kInvLn2 = 1.4426950408889634074;
    return sum_per_sample(
        scale(log(clamp_min(lik, static_cast<double>(cfg_.likelihood_floor))), -kInvLn2));
  }

  int64_t latent_size() const { return static_cast<int64_t>(cfg_.latent_channels) * 8 * 8; }

  // Plain parameter values for building codec tables.
  std::vector<S> fp_mu_values() const { return fp_mu_.values(); }
  std::vector<S> fp_scale_values() const { return fp_z_scale().values(); }
  std::vector<S> hp_mu_values() const { return hp_mu_.values(); }
  std::vector<S> hp_scale_values() const { return fp_h_scale().values(); }

 private:
  TensorT<S> floor_lik(const TensorT<S>& lik) const {
    return clamp_min(lik, static_cast<double>(cfg_.likelihood_floor));
  }

  TensorT<S> conv_init(Rng& rng, int k, int c, int ksz, double gain = 1.0) {
    const double fan_in = static_cast<double>(c) * ksz * ksz;
    return TensorT<S>::randn(Shape{k, c, ksz, ksz}, rng, gain * std::sqrt(2.0 / fan_in));
  }

  TensorT<S> dense_init(Rng& rng, int m, int d) {
    return TensorT<S>::randn(Shape{m, d}, rng, std::sqrt(2.0 / d));
  }

  ModelConfig cfg_;
  TensorT<S> h1w_, h1b_, h2w_, h2b_, h3w_, h3b_;
  TensorT<S> t1w_, t1b_, t2w_, t2b_, t3w_, t3b_, fcw_, fcb_;
  TensorT<S> fp_mu_, fp_sraw_;
  TensorT<S> he1w_, he1b_, he2w_, he2b_, hd1w_, hd1b_, hd2w_, hd2b_;
  TensorT<S> hp_mu_, hp_sraw_;
};

using SplitModel = SplitModelT<float>;
using PriorOut = PriorOutT<float>;

}  // namespace entro

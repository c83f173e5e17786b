#pragma once

// Rate-distortion training of the split model: cross entropy on the tail
// plus beta times the estimated bits per latent element, optimized with
// Adam or SGD momentum over noise-proxied quantization.

#include <iosfwd>
#include <string>
#include <vector>

#include "entro/data.hpp"
#include "entro/model.hpp"

namespace entro {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  float lr = 1e-3f;
  std::string optimizer = "adam";  // adam | sgdm
  float momentum = 0.9f;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  float lr_decay = 0.1f;    // multiplier applied once, late in the run
  float decay_at = 0.8f;    // fraction of epochs before the decay kicks in
  // Epochs over which the rate weight ramps linearly from zero. Starting
  // with the full weight shrinks the latent into the quantization noise
  // before the classifier finds the features, and training never recovers.
  int rate_warmup_epochs = 8;
  int sample_limit = 10000; // 0 = use the whole set
  bool augment = true;
  float augment_noise = 8.0f / 255.0f;  // uniform pixel noise, mirrors eval-time perturbation scale
  uint64_t seed = 1;
  int log_every = 50;  // batches between log lines, 0 silences
};

struct TrainStats {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_acc_pct;
  std::vector<double> epoch_bits;  // mean estimated bits per sample
};

// One batch of the training objective, exposed so the loss surface itself
// can be tested. Returns loss = cross_entropy + beta * mean(bits) / latent
// elements, with the logits and per-sample bit estimates it was built from.
template <typename S>
struct BatchGraphT {
  TensorT<S> loss;
  TensorT<S> logits;
  TensorT<S> bits;  // [N]
};

template <typename S>
BatchGraphT<S> rd_task_batch(const SplitModelT<S>& model, const TensorT<S>& x,
                             const std::vector<int>& labels, QuantMode mode, uint64_t noise_seed,
                             double beta_override = -1.0) {
  BatchGraphT<S> out;
  auto po = model.prior_forward(x, mode, noise_seed);
  out.logits = model.tail_forward(po.z_tilde);
  out.bits = model.rate_bits(po);
  auto ce = softmax_cross_entropy(out.logits, labels);
  const double beta =
      beta_override >= 0.0 ? beta_override : static_cast<double>(model.config().beta);
  out.loss = add(ce, scale(mean(out.bits), beta / static_cast<double>(model.latent_size())));
  return out;
}

template <typename S>
TensorT<S> rd_task_loss(const SplitModelT<S>& model, const TensorT<S>& x,
                        const std::vector<int>& labels, QuantMode mode, uint64_t noise_seed,
                        double beta_override = -1.0) {
  return rd_task_batch(model, x, labels, mode, noise_seed, beta_override).loss;
}

class Optimizer {
 public:
  Optimizer(std::vector<TensorT<float>*> params, const TrainConfig& cfg);

  void step();
  void zero_grad();
  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }

 private:
  std::vector<TensorT<float>*> params_;
  bool adam_;
  float lr_, momentum_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_;  // first moment / velocity
  std::vector<std::vector<float>> v_;  // second moment (adam only)
};

TrainStats train_model(SplitModel& model, const Dataset& data, const TrainConfig& cfg,
                       std::ostream* log = nullptr);

}  // namespace entro

#include "entro/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace entro {

Optimizer::Optimizer(std::vector<TensorT<float>*> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      lr_(cfg.lr),
      momentum_(cfg.momentum),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps) {
  if (cfg.optimizer == "adam")
    adam_ = true;
  else if (cfg.optimizer == "sgdm")
    adam_ = false;
  else
    throw ValueError("unknown optimizer '" + cfg.optimizer + "', expected adam or sgdm");
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(static_cast<size_t>(params_[i]->size()), 0.0f);
    if (adam_) v_[i].assign(static_cast<size_t>(params_[i]->size()), 0.0f);
  }
}

void Optimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    TensorT<float>& p = *params_[i];
    if (!p.has_grad()) continue;
    const std::vector<float>& g = p.grad();
    std::vector<float>& vals = p.mutable_values();
    if (adam_) {
      for (size_t j = 0; j < vals.size(); ++j) {
        m_[i][j] = beta1_ * m_[i][j] + (1.0f - beta1_) * g[j];
        v_[i][j] = beta2_ * v_[i][j] + (1.0f - beta2_) * g[j] * g[j];
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        vals[j] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    } else {
      for (size_t j = 0; j < vals.size(); ++j) {
        m_[i][j] = momentum_ * m_[i][j] + g[j];
        vals[j] -= lr_ * m_[i][j];
      }
    }
  }
}

void Optimizer::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

namespace {

void fill_batch(const Dataset& data, const std::vector<int>& order, int begin, int end,
                std::vector<float>& images, std::vector<int>& labels) {
  const int n = end - begin;
  images.resize(static_cast<size_t>(n) * kImageFloats);
  labels.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int src = order[static_cast<size_t>(begin + i)];
    const float* im = data.image(src);
    std::copy(im, im + kImageFloats, images.data() + static_cast<int64_t>(i) * kImageFloats);
    labels[static_cast<size_t>(i)] = data.labels[static_cast<size_t>(src)];
  }
}

void augment_batch(std::vector<float>& images, int n, float noise, Rng& rng) {
  for (int i = 0; i < n; ++i) {
    float* im = images.data() + static_cast<int64_t>(i) * kImageFloats;
    if (rng.uniform() < 0.5) {  // horizontal flip
      for (int c = 0; c < kImageChannels; ++c)
        for (int y = 0; y < kImageDim; ++y) {
          float* row = im + (static_cast<int64_t>(c) * kImageDim + y) * kImageDim;
          std::reverse(row, row + kImageDim);
        }
    }
    if (noise > 0.0f) {
      // alternate uniform noise with full-strength sign noise: the latter
      // matches the corners of the L-inf ball that gradient-sign attacks
      // reach, so the prior learns to expect that much pixel energy
      const bool corner = rng.uniform() < 0.5;
      for (int64_t j = 0; j < kImageFloats; ++j) {
        const float delta =
            corner ? (rng.uniform() < 0.5 ? -noise : noise)
                   : static_cast<float>(rng.uniform(-noise, noise));
        im[j] = std::clamp(im[j] + delta, 0.0f, 1.0f);
      }
    }
  }
}

}  // namespace

TrainStats train_model(SplitModel& model, const Dataset& data, const TrainConfig& cfg,
                       std::ostream* log) {
  if (cfg.epochs < 1) throw ValueError("train_model: epochs must be positive");
  if (cfg.batch_size < 1) throw ValueError("train_model: batch size must be positive");
  if (data.count() == 0) throw ValueError("train_model: empty dataset");

  const int used = cfg.sample_limit > 0 ? std::min(cfg.sample_limit, data.count()) : data.count();
  std::vector<int> order(static_cast<size_t>(used));
  std::iota(order.begin(), order.end(), 0);

  model.set_requires_grad(true);
  std::vector<TensorT<float>*> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  Optimizer opt(params, cfg);

  Rng shuffle_rng(derive_seed(cfg.seed, 0xA11));
  Rng aug_rng(derive_seed(cfg.seed, 0xB22));
  const int decay_epoch = static_cast<int>(std::ceil(cfg.decay_at * cfg.epochs));

  TrainStats stats;
  std::vector<float> batch_images;
  std::vector<int> batch_labels;
  uint64_t batch_counter = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch == decay_epoch && decay_epoch < cfg.epochs && cfg.lr_decay != 1.0f)
      opt.set_lr(cfg.lr * cfg.lr_decay);
    const double beta_now =
        cfg.rate_warmup_epochs > 0
            ? model.config().beta *
                  std::min(1.0, static_cast<double>(epoch) / cfg.rate_warmup_epochs)
            : static_cast<double>(model.config().beta);
    // Fisher-Yates with our own rng so runs reproduce across platforms
    for (int i = used - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.below(static_cast<uint64_t>(i) + 1))]);

    double ep_loss = 0.0, ep_bits = 0.0;
    int64_t seen = 0, correct = 0;
    int batches = 0;
    for (int begin = 0; begin < used; begin += cfg.batch_size, ++batches) {
      const int end = std::min(used, begin + cfg.batch_size);
      fill_batch(data, order, begin, end, batch_images, batch_labels);
      const int n = end - begin;
      if (cfg.augment) augment_batch(batch_images, n, cfg.augment_noise, aug_rng);

      TensorT<float> x =
          TensorT<float>::from_data(Shape{n, kImageChannels, kImageDim, kImageDim}, batch_images);
      auto graph = rd_task_batch<float>(model, x, batch_labels, QuantMode::kNoise,
                                        derive_seed(cfg.seed, 0xC33 + batch_counter), beta_now);
      ++batch_counter;
      const double loss = static_cast<double>(graph.loss.item());
      if (!std::isfinite(loss)) throw NumericError("train_model: loss became non-finite, aborting");

      opt.zero_grad();
      backward(graph.loss);
      opt.step();

      const auto& lv = graph.logits.values();
      for (int i = 0; i < n; ++i) {
        int best = 0;
        for (int k = 1; k < kNumClasses; ++k)
          if (lv[static_cast<size_t>(i) * kNumClasses + k] >
              lv[static_cast<size_t>(i) * kNumClasses + best])
            best = k;
        correct += best == batch_labels[static_cast<size_t>(i)];
      }
      for (float b : graph.bits.values()) ep_bits += static_cast<double>(b);
      ep_loss += loss * n;
      seen += n;

      if (log && cfg.log_every > 0 && batches % cfg.log_every == 0) {
        (*log) << "[epoch " << epoch + 1 << "/" << cfg.epochs << " batch " << batches << "] loss "
               << loss << "\n";
        log->flush();
      }
    }
    stats.epoch_loss.push_back(ep_loss / seen);
    stats.epoch_acc_pct.push_back(100.0 * correct / seen);
    stats.epoch_bits.push_back(ep_bits / seen);
    if (log) {
      (*log) << "[epoch " << epoch + 1 << "/" << cfg.epochs << "] loss " << stats.epoch_loss.back()
             << " acc " << stats.epoch_acc_pct.back() << "% bits " << stats.epoch_bits.back()
             << " lr " << opt.lr() << "\n";
      log->flush();
    }
  }
  return stats;
}

}  // namespace entro

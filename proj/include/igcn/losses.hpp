#pragma once

#include <stdexcept>
#include <string>

#include "igcn/models.hpp"
#include "igcn/ops.hpp"

namespace igcn {

/// Trade-off weights of the generator objective.
struct LossWeights {
  double lambda1 = 0.001;  // adversarial
  double lambda2 = 0.001;  // AU consistency
  double lambda3 = 0.5;    // perceptual

  void validate() const {
    if (!(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0))
      throw std::invalid_argument("loss weights must be non-negative, got (" + std::to_string(lambda1) + ", " +
                                  std::to_string(lambda2) + ", " + std::to_string(lambda3) + ")");
  }
};

template <typename T>
Tensor<T> pixel_loss(const Tensor<T>& restored, const Tensor<T>& gt) {
  return mse(restored, gt);
}

namespace detail {
template <typename T>
void require_frozen(const AuClassifier<T>& c, const char* who) {
  if (!c.is_frozen()) throw std::logic_error(std::string(who) + ": the classifier must be frozen");
}
}  // namespace detail

/// Taps of the frozen classifier on a target image; no graph is recorded.
template <typename T>
ClassifierOutput<T> frozen_targets(const AuClassifier<T>& c, const Tensor<T>& gt) {
  detail::require_frozen(c, "frozen_targets");
  NoGradGuard guard;
  return c.forward_all(gt);
}

/// Sum of the shallow- and deep-tap feature MSEs.
template <typename T>
Tensor<T> perceptual_loss(const ClassifierOutput<T>& restored, const ClassifierOutput<T>& gt) {
  return add(mse(restored.shallow, gt.shallow.detach()), mse(restored.deep, gt.deep.detach()));
}

template <typename T>
Tensor<T> perceptual_loss(const AuClassifier<T>& c, const Tensor<T>& restored, const Tensor<T>& gt) {
  detail::require_frozen(c, "perceptual_loss");
  return perceptual_loss(c.forward_all(restored), frozen_targets(c, gt));
}

/// MSE between pre-activation logit vectors.
template <typename T>
Tensor<T> au_consistency_loss(const ClassifierOutput<T>& restored, const ClassifierOutput<T>& gt) {
  return mse(restored.logits, gt.logits.detach());
}

template <typename T>
Tensor<T> au_consistency_loss(const AuClassifier<T>& c, const Tensor<T>& restored, const Tensor<T>& gt) {
  detail::require_frozen(c, "au_consistency_loss");
  return au_consistency_loss(c.forward_all(restored), frozen_targets(c, gt));
}

/// Non-saturating generator term: BCE(D(restored), 1).
template <typename T>
Tensor<T> generator_adversarial_loss(const Discriminator<T>& d, const Tensor<T>& restored) {
  auto logits = d.forward(restored);
  return bce_with_logits(logits, Tensor<T>::full(logits.shape(), T{1}));
}

template <typename T>
Tensor<T> discriminator_loss_from_logits(const Tensor<T>& real, const Tensor<T>& fake) {
  return add(bce_with_logits(real, Tensor<T>::full(real.shape(), T{1})),
             bce_with_logits(fake, Tensor<T>::zeros(fake.shape())));
}

/// BCE(D(gt), 1) + BCE(D(restored), 0); the restored image is detached.
template <typename T>
Tensor<T> discriminator_loss(const Discriminator<T>& d, const Tensor<T>& restored, const Tensor<T>& gt) {
  return discriminator_loss_from_logits(d.forward(gt), d.forward(restored.detach()));
}

template <typename T>
struct AdversarialLosses {
  Tensor<T> g_adv;
  Tensor<T> d_loss;
};

template <typename T>
AdversarialLosses<T> adversarial_losses(const Discriminator<T>& d, const Tensor<T>& restored, const Tensor<T>& gt) {
  return {generator_adversarial_loss(d, restored), discriminator_loss(d, restored, gt)};
}

/// Mean sigmoid cross-entropy over AUs and samples; labels must be 0 or 1.
template <typename T>
Tensor<T> classifier_pretrain_loss(const Tensor<T>& logits, const Tensor<T>& labels) {
  detail::require_same_shape("classifier_pretrain_loss", logits.shape(), labels.shape());
  for (std::size_t i = 0; i < labels.numel(); ++i) {
    const T v = labels.values()[i];
    if (v != T{0} && v != T{1})
      throw std::invalid_argument("classifier_pretrain_loss: label " + std::to_string(static_cast<double>(v)) +
                                  " at index " + std::to_string(i) + " is not 0 or 1");
  }
  return bce_with_logits(logits, labels);
}

template <typename T>
struct GeneratorLossParts {
  Tensor<T> pixel;
  Tensor<T> adversarial;
  Tensor<T> au;
  Tensor<T> perceptual;
};

/// pixel + l1 * adversarial + l2 * au + l3 * perceptual.
template <typename T>
Tensor<T> total_generator_loss(const GeneratorLossParts<T>& parts, const LossWeights& w) {
  w.validate();
  for (const auto* t : {&parts.pixel, &parts.adversarial, &parts.au, &parts.perceptual})
    if (t->numel() != 1) throw ShapeError("total_generator_loss: parts must be scalars, got " + shape_str(t->shape()));
  auto total = add(parts.pixel, scale(parts.adversarial, static_cast<T>(w.lambda1)));
  total = add(total, scale(parts.au, static_cast<T>(w.lambda2)));
  return add(total, scale(parts.perceptual, static_cast<T>(w.lambda3)));
}

}  // namespace igcn

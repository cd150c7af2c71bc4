// Training objectives.
//
//   l_ssm  weighted pixel cross-entropy on selected stylized source images
//   l_scl  prototype contrastive loss on mixed images (prototypes from the
//          stylized source features and ground-truth labels)
//   l_im   sum_c p_hat_c * log q_c, with p_hat the running source class marginal
//          and q the class marginal of the student's predictions on mixed images
//   total  l_ssm + lambda_scl * l_scl - lambda_im * l_im   (minimized)
//
// Every pixel sum is a mean over the non-ignore pixels involved, so loss
// magnitudes do not depend on resolution.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "idm/model.hpp"

namespace idm {

inline constexpr double kMarginalFloor = 1e-8;

template <typename T>
struct Prototypes {
  MatX<T> vectors;                   // D x C, column c is p_c
  std::vector<std::uint8_t> valid;   // class had at least one labeled pixel
  std::vector<std::int64_t> counts;  // labeled pixels per class

  int num_valid() const;
};

struct ClassMarginal {
  std::vector<double> dist;
};

struct LossWeights {
  double ssm = 1.0;
  double scl = 1.0;
  double im = 1.0;
  bool operator==(const LossWeights&) const = default;
};

struct LossReport {
  double l_ssm = 0.0;
  double l_scl = 0.0;
  double l_im = 0.0;
  double l_pim = 0.0;  // l_im - l_scl
  double l_tgt = 0.0;  // pseudo-label cross-entropy, only when PIM is disabled
  double total = 0.0;
  LossWeights weights;
  bool literal_sign = false;
};

/// Mean pixel cross-entropy of one image over its non-ignore pixels. When
/// `dlogits` is given, adds scale * d(loss)/d(logits) to it. Returns 0 when every
/// pixel is ignored.
template <typename T>
double pixel_cross_entropy(const MatX<T>& probs, const LabelMap& label, MatX<T>* dlogits = nullptr,
                           double scale = 1.0);

/// sum_i W_i * mean-pixel-CE_i. Empty batch -> 0 with a warning.
template <typename T>
double ssm_loss(std::span<const ForwardOutput<T>> outputs, std::span<const LabelMap> labels,
                std::span<const double> weights);

/// Class-wise mean feature over all labeled pixels of the batch.
/// `features[i]` is D x pixels of image i.
template <typename T>
Prototypes<T> compute_prototypes(std::span<const MatX<T>> features, std::span<const LabelMap> labels,
                                 int num_classes);

template <typename T>
struct SclGradients {
  MatX<T> features;    // d/d(mixed features), D x pixels
  MatX<T> prototypes;  // d/d(prototype vectors), D x C
};

/// -mean over counted pixels of log softmax_c(p_c . F_i / tau) at the pixel's class.
/// The softmax runs over valid prototypes only; pixels whose class is ignored or
/// has no valid prototype are not counted. Returns 0 (with a warning) when no
/// pixel counts.
template <typename T>
double scl_loss(const MatX<T>& mixed_features, const LabelMap& mixed_label, const Prototypes<T>& protos,
                double tau, SclGradients<T>* grads = nullptr);

/// Spatial mean of per-pixel softmax; `probs` is C x pixels.
template <typename T>
ClassMarginal class_marginal(const MatX<T>& probs);

/// sum_c source_c * log(max(target_c, 1e-8)).
double im_loss(const ClassMarginal& source_marginal, const ClassMarginal& target_marginal);

/// Minimized objective. Adopted convention: l_ssm*w_ssm + w_scl*l_scl - w_im*l_im.
/// `literal_sign` switches to l_ssm*w_ssm + (w_im*l_im - w_scl*l_scl).
/// Throws TrainingError on a non-finite component.
double total_loss(double l_ssm, double l_scl, double l_im, const LossWeights& weights,
                  bool literal_sign = false);

/// Everything needed to evaluate (and differentiate) the full objective over a
/// LossGraph whose traces were produced by the student.
struct ObjectiveSpec {
  std::vector<std::size_t> source_traces;  // stylized source images (x_hat_s)
  std::vector<LabelMap> source_labels;     // y_s
  std::vector<double> source_weights;      // W
  std::vector<std::size_t> target_traces;  // mixed images (x_tilde_t)
  std::vector<LabelMap> target_labels;     // y_tilde_t
  std::optional<ClassMarginal> source_marginal;  // p_hat; l_im is skipped while unset
  double tau = 100.0;
  LossWeights weights;
  bool use_pim = true;          // false: plain pseudo-label CE on the target traces
  bool literal_sign = false;
  bool prototype_grad = true;   // differentiate l_scl through the prototypes
};

/// Computes all terms and, when `with_grad`, seeds d(total)/d(outputs) into the graph.
template <typename T>
LossReport evaluate_objective(LossGraph<T>& graph, const ObjectiveSpec& spec, bool with_grad = true);

/// Class marginal of the source traces' predictions (detached, for the p_hat buffer).
template <typename T>
std::optional<ClassMarginal> batch_marginal(const LossGraph<T>& graph,
                                            std::span<const std::size_t> traces);

}  // namespace idm

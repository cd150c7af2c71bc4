// Confusion-matrix based segmentation metrics.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "idm/model.hpp"

namespace idm {

/// counts[t * C + p]: rows are ground truth, columns prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);

  int num_classes() const { return num_classes_; }
  std::int64_t at(int truth, int pred) const { return counts_[truth * num_classes_ + pred]; }
  std::int64_t total() const;
  const std::vector<std::int64_t>& counts() const { return counts_; }

  /// Adds every pixel whose truth is not ignored. Throws ContractError on a
  /// shape mismatch or a class index out of range.
  void accumulate(const LabelMap& pred, const LabelMap& truth);
  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int num_classes_ = 0;
  std::vector<std::int64_t> counts_;
};

struct EvalReport {
  std::vector<double> per_class_iou;     // NaN where the class has zero union
  std::vector<std::uint8_t> present;     // nonzero union
  double miou = 0.0;
  double pixel_acc = 0.0;
  int num_images = 0;
};

/// Throws EvaluationError when the matrix is empty.
EvalReport miou(const ConfusionMatrix& cm, int num_images = 0);

/// Student argmax over a labeled set.
EvalReport evaluate_model(const ModelState& state, std::span<const LabeledSample> data);

}  // namespace idm

#include "idm/metrics.hpp"

#include <cmath>
#include <numeric>

namespace idm {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 0 || num_classes > kMaxClasses) throw ContractError("ConfusionMatrix: bad class count");
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& truth) {
  if (pred.height != truth.height || pred.width != truth.width) {
    throw ContractError("accumulate: prediction and truth sizes differ");
  }
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    const int t = truth.data[i];
    if (t == kIgnoreLabel) continue;
    const int p = pred.data[i];
    if (t >= num_classes_ || p >= num_classes_) throw ContractError("accumulate: class index out of range");
    ++counts_[t * num_classes_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) throw ContractError("merge: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

EvalReport miou(const ConfusionMatrix& cm, int num_images) {
  const int C = cm.num_classes();
  const std::int64_t total = cm.total();
  if (total == 0) throw EvaluationError("miou: confusion matrix is empty");
  EvalReport r;
  r.num_images = num_images;
  r.per_class_iou.assign(C, NAN);
  r.present.assign(C, 0);
  std::int64_t diag = 0;
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < C; ++c) {
    const std::int64_t tp = cm.at(c, c);
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < C; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    diag += tp;
    const std::int64_t uni = row + col - tp;
    if (uni == 0) continue;
    r.present[c] = 1;
    r.per_class_iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += r.per_class_iou[c];
    ++n;
  }
  r.miou = sum / n;
  r.pixel_acc = static_cast<double>(diag) / static_cast<double>(total);
  return r;
}

EvalReport evaluate_model(const ModelState& state, std::span<const LabeledSample> data) {
  const int C = state.arch.num_classes;
  std::vector<ConfusionMatrix> parts(data.size(), ConfusionMatrix(C));
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(data.size()); ++i) {
    const auto out = forward(state, data[i].image);
    parts[i].accumulate(argmax_labels(out), data[i].label);
  }
  ConfusionMatrix cm(C);
  for (const auto& p : parts) cm.merge(p);
  return miou(cm, static_cast<int>(data.size()));
}

}  // namespace idm

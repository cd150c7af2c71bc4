#include "idm/losses.hpp"

#include <cmath>
#include <sstream>

#include <spdlog/spdlog.h>

namespace idm {

template <typename T>
int Prototypes<T>::num_valid() const {
  int n = 0;
  for (const auto v : valid) n += v ? 1 : 0;
  return n;
}

template <typename T>
double pixel_cross_entropy(const MatX<T>& probs, const LabelMap& label, MatX<T>* dlogits, double scale) {
  if (static_cast<std::size_t>(probs.cols()) != label.pixels()) {
    throw ContractError("cross entropy: prediction and label sizes differ");
  }
  std::int64_t n = 0;
  double sum = 0.0;
  for (Eigen::Index p = 0; p < probs.cols(); ++p) {
    const auto y = label.data[p];
    if (y == kIgnoreLabel) continue;
    if (y >= probs.rows()) throw ContractError("cross entropy: label exceeds class count");
    sum -= std::log(static_cast<double>(probs(y, p)));
    ++n;
  }
  if (n == 0) return 0.0;
  if (dlogits) {
    const T s = static_cast<T>(scale / static_cast<double>(n));
    for (Eigen::Index p = 0; p < probs.cols(); ++p) {
      const auto y = label.data[p];
      if (y == kIgnoreLabel) continue;
      dlogits->col(p) += s * probs.col(p);
      (*dlogits)(y, p) -= s;
    }
  }
  return sum / static_cast<double>(n);
}

template <typename T>
double ssm_loss(std::span<const ForwardOutput<T>> outputs, std::span<const LabelMap> labels,
                std::span<const double> weights) {
  if (outputs.size() != labels.size() || outputs.size() != weights.size()) {
    throw ContractError("ssm_loss: outputs, labels and weights differ in length");
  }
  if (outputs.empty()) {
    spdlog::warn("ssm_loss: empty batch, loss is 0");
    return 0.0;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (weights[i] == 0.0) continue;
    total += weights[i] * pixel_cross_entropy(outputs[i].probs, labels[i]);
  }
  return total;
}

template <typename T>
Prototypes<T> compute_prototypes(std::span<const MatX<T>> features, std::span<const LabelMap> labels,
                                 int num_classes) {
  if (features.size() != labels.size()) throw ContractError("compute_prototypes: length mismatch");
  const Eigen::Index D = features.empty() ? 0 : features.front().rows();
  Prototypes<T> protos;
  protos.counts.assign(num_classes, 0);
  protos.valid.assign(num_classes, 0);
  MatX<double> sums = MatX<double>::Zero(D, num_classes);
  for (std::size_t n = 0; n < features.size(); ++n) {
    const auto& F = features[n];
    if (F.rows() != D || static_cast<std::size_t>(F.cols()) != labels[n].pixels()) {
      throw ContractError("compute_prototypes: feature and label sizes differ");
    }
    for (Eigen::Index p = 0; p < F.cols(); ++p) {
      const auto y = labels[n].data[p];
      if (y == kIgnoreLabel) continue;
      if (y >= num_classes) throw ContractError("compute_prototypes: label exceeds class count");
      sums.col(y) += F.col(p).template cast<double>();
      ++protos.counts[y];
    }
  }
  protos.vectors = MatX<T>::Zero(D, num_classes);
  for (int c = 0; c < num_classes; ++c) {
    if (protos.counts[c] == 0) continue;
    protos.valid[c] = 1;
    protos.vectors.col(c) = (sums.col(c) / static_cast<double>(protos.counts[c])).template cast<T>();
  }
  return protos;
}

template <typename T>
double scl_loss(const MatX<T>& mixed_features, const LabelMap& mixed_label, const Prototypes<T>& protos,
                double tau, SclGradients<T>* grads) {
  if (!(tau > 0.0)) throw ContractError("scl_loss: tau must be > 0");
  if (static_cast<std::size_t>(mixed_features.cols()) != mixed_label.pixels() ||
      mixed_features.rows() != protos.vectors.rows()) {
    throw ContractError("scl_loss: feature, label and prototype sizes differ");
  }
  const int C = static_cast<int>(protos.valid.size());
  std::vector<int> support;
  for (int c = 0; c < C; ++c) {
    if (protos.valid[c]) support.push_back(c);
  }
  if (grads) {
    grads->features = MatX<T>::Zero(mixed_features.rows(), mixed_features.cols());
    grads->prototypes = MatX<T>::Zero(protos.vectors.rows(), C);
  }
  // logits for all classes; only the support enters the softmax.
  const MatX<T> logits = (protos.vectors.transpose() * mixed_features) / static_cast<T>(tau);

  std::int64_t counted = 0;
  double sum = 0.0;
  std::vector<double> q(support.size());
  for (Eigen::Index p = 0; p < mixed_features.cols(); ++p) {
    const auto y = mixed_label.data[p];
    if (y == kIgnoreLabel || y >= C || !protos.valid[y]) continue;
    double m = -INFINITY;
    for (const int c : support) m = std::max(m, static_cast<double>(logits(c, p)));
    double z = 0.0;
    for (const int c : support) z += std::exp(static_cast<double>(logits(c, p)) - m);
    sum += m + std::log(z) - static_cast<double>(logits(y, p));
    ++counted;
  }
  if (counted == 0) {
    spdlog::warn("scl_loss: no pixel has a labeled class with a valid prototype, loss is 0");
    return 0.0;
  }
  if (grads) {
    const double inv = 1.0 / (static_cast<double>(counted) * tau);
    for (Eigen::Index p = 0; p < mixed_features.cols(); ++p) {
      const auto y = mixed_label.data[p];
      if (y == kIgnoreLabel || y >= C || !protos.valid[y]) continue;
      double m = -INFINITY;
      for (const int c : support) m = std::max(m, static_cast<double>(logits(c, p)));
      double z = 0.0;
      for (std::size_t k = 0; k < support.size(); ++k) {
        q[k] = std::exp(static_cast<double>(logits(support[k], p)) - m);
        z += q[k];
      }
      for (std::size_t k = 0; k < support.size(); ++k) {
        const int c = support[k];
        const double coeff = (q[k] / z - (c == y ? 1.0 : 0.0)) * inv;
        grads->features.col(p) += static_cast<T>(coeff) * protos.vectors.col(c);
        grads->prototypes.col(c) += static_cast<T>(coeff) * mixed_features.col(p);
      }
    }
  }
  return sum / static_cast<double>(counted);
}

template <typename T>
ClassMarginal class_marginal(const MatX<T>& probs) {
  if (probs.cols() == 0) throw ContractError("class_marginal: empty probability map");
  const Eigen::VectorXd mean = probs.template cast<double>().rowwise().mean();
  return {std::vector<double>(mean.data(), mean.data() + mean.size())};
}

double im_loss(const ClassMarginal& source_marginal, const ClassMarginal& target_marginal) {
  if (source_marginal.dist.size() != target_marginal.dist.size()) {
    throw ContractError("im_loss: marginal dimensions differ");
  }
  double v = 0.0;
  for (std::size_t c = 0; c < source_marginal.dist.size(); ++c) {
    v += source_marginal.dist[c] * std::log(std::max(target_marginal.dist[c], kMarginalFloor));
  }
  return v;
}

double total_loss(double l_ssm, double l_scl, double l_im, const LossWeights& w, bool literal_sign) {
  if (!std::isfinite(l_ssm) || !std::isfinite(l_scl) || !std::isfinite(l_im)) {
    std::ostringstream msg;
    msg << "non-finite loss component: l_ssm=" << l_ssm << " l_scl=" << l_scl << " l_im=" << l_im;
    throw TrainingError(msg.str());
  }
  if (literal_sign) return w.ssm * l_ssm + (w.im * l_im - w.scl * l_scl);
  return w.ssm * l_ssm + w.scl * l_scl - w.im * l_im;
}

template <typename T>
std::optional<ClassMarginal> batch_marginal(const LossGraph<T>& graph, std::span<const std::size_t> traces) {
  if (traces.empty()) return std::nullopt;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(graph.output(traces[0]).num_classes());
  double pixels = 0.0;
  for (const auto t : traces) {
    sum += graph.output(t).probs.template cast<double>().rowwise().sum();
    pixels += static_cast<double>(graph.output(t).pixels());
  }
  sum /= pixels;
  return ClassMarginal{std::vector<double>(sum.data(), sum.data() + sum.size())};
}

template <typename T>
LossReport evaluate_objective(LossGraph<T>& graph, const ObjectiveSpec& spec, bool with_grad) {
  if (spec.source_traces.size() != spec.source_labels.size() ||
      spec.source_traces.size() != spec.source_weights.size() ||
      spec.target_traces.size() != spec.target_labels.size()) {
    throw ContractError("evaluate_objective: trace, label and weight lists differ in length");
  }
  LossReport report;
  report.weights = spec.weights;
  report.literal_sign = spec.literal_sign;
  // Signed multipliers of l_scl and l_im in the minimized total.
  const double scl_sign = spec.literal_sign ? -1.0 : 1.0;
  const double im_sign = spec.literal_sign ? 1.0 : -1.0;

  for (std::size_t i = 0; i < spec.source_traces.size(); ++i) {
    const auto t = spec.source_traces[i];
    const double w = spec.source_weights[i];
    if (w == 0.0) continue;
    const double scale = spec.weights.ssm * w;
    MatX<T>* dl = with_grad && scale != 0.0 ? &graph.logits_grad(t) : nullptr;
    report.l_ssm += w * pixel_cross_entropy(graph.output(t).probs, spec.source_labels[i], dl, scale);
  }

  const std::size_t nt = spec.target_traces.size();
  if (nt > 0 && !spec.use_pim) {
    for (std::size_t i = 0; i < nt; ++i) {
      const auto t = spec.target_traces[i];
      MatX<T>* dl = with_grad ? &graph.logits_grad(t) : nullptr;
      report.l_tgt += pixel_cross_entropy(graph.output(t).probs, spec.target_labels[i], dl,
                                          1.0 / static_cast<double>(nt)) /
                      static_cast<double>(nt);
    }
  }

  if (nt > 0 && spec.use_pim) {
    // Prototype contrastive term over all mixed pixels as one batch.
    if (!spec.source_traces.empty() && spec.weights.scl != 0.0) {
      std::vector<MatX<T>> source_features;
      for (const auto t : spec.source_traces) source_features.push_back(graph.output(t).features);
      const int C = graph.output(spec.source_traces[0]).num_classes();
      const Prototypes<T> protos = compute_prototypes<T>(source_features, spec.source_labels, C);

      std::int64_t total_counted = 0;
      std::vector<std::int64_t> counted(nt, 0);
      for (std::size_t i = 0; i < nt; ++i) {
        for (const auto y : spec.target_labels[i].data) {
          if (y != kIgnoreLabel && y < C && protos.valid[y]) ++counted[i];
        }
        total_counted += counted[i];
      }
      if (total_counted > 0) {
        MatX<T> dprotos = MatX<T>::Zero(protos.vectors.rows(), C);
        for (std::size_t i = 0; i < nt; ++i) {
          if (counted[i] == 0) continue;
          const auto t = spec.target_traces[i];
          const double share = static_cast<double>(counted[i]) / static_cast<double>(total_counted);
          SclGradients<T> g;
          report.l_scl += share * scl_loss(graph.output(t).features, spec.target_labels[i], protos,
                                           spec.tau, with_grad ? &g : nullptr);
          if (with_grad) {
            const T s = static_cast<T>(scl_sign * spec.weights.scl * share);
            graph.features_grad(t) += s * g.features;
            dprotos += s * g.prototypes;
          }
        }
        if (with_grad && spec.prototype_grad) {
          // p_c is a mean over the class's labeled source pixels.
          for (std::size_t i = 0; i < spec.source_traces.size(); ++i) {
            const auto t = spec.source_traces[i];
            auto& dF = graph.features_grad(t);
            const auto& label = spec.source_labels[i];
            for (Eigen::Index p = 0; p < dF.cols(); ++p) {
              const auto y = label.data[p];
              if (y == kIgnoreLabel) continue;
              dF.col(p) += dprotos.col(y) / static_cast<T>(protos.counts[y]);
            }
          }
        }
      }
    }

    if (spec.source_marginal && spec.weights.im != 0.0) {
      const auto q = batch_marginal(graph, spec.target_traces).value();
      report.l_im = im_loss(*spec.source_marginal, q);
      if (with_grad) {
        double pixels = 0.0;
        for (const auto t : spec.target_traces) pixels += static_cast<double>(graph.output(t).pixels());
        const int C = static_cast<int>(q.dist.size());
        // d l_im / d probs(c, pixel) = p_hat_c / q_c / total_pixels (zero where floored).
        Eigen::Matrix<T, Eigen::Dynamic, 1> dq(C);
        for (int c = 0; c < C; ++c) {
          dq(c) = q.dist[c] > kMarginalFloor
                      ? static_cast<T>(im_sign * spec.weights.im * spec.source_marginal->dist[c] /
                                       (q.dist[c] * pixels))
                      : T(0);
        }
        for (const auto t : spec.target_traces) {
          const auto& P = graph.output(t).probs;
          auto& dl = graph.logits_grad(t);
          for (Eigen::Index p = 0; p < P.cols(); ++p) {
            const T dot = P.col(p).dot(dq);
            dl.col(p).array() += P.col(p).array() * (dq.array() - dot);
          }
        }
      }
    }
  }

  report.l_pim = report.l_im - report.l_scl;
  report.total = total_loss(report.l_ssm, report.l_scl, report.l_im, spec.weights, spec.literal_sign) +
                 report.l_tgt;
  return report;
}

#define IDM_INSTANTIATE_LOSSES(T)                                                                    \
  template struct Prototypes<T>;                                                                     \
  template double pixel_cross_entropy(const MatX<T>&, const LabelMap&, MatX<T>*, double);            \
  template double ssm_loss(std::span<const ForwardOutput<T>>, std::span<const LabelMap>,             \
                           std::span<const double>);                                                 \
  template Prototypes<T> compute_prototypes(std::span<const MatX<T>>, std::span<const LabelMap>, int); \
  template double scl_loss(const MatX<T>&, const LabelMap&, const Prototypes<T>&, double,            \
                           SclGradients<T>*);                                                        \
  template ClassMarginal class_marginal(const MatX<T>&);                                             \
  template LossReport evaluate_objective(LossGraph<T>&, const ObjectiveSpec&, bool);                 \
  template std::optional<ClassMarginal> batch_marginal(const LossGraph<T>&, std::span<const std::size_t>);

IDM_INSTANTIATE_LOSSES(float)
IDM_INSTANTIATE_LOSSES(double)

}  // namespace idm

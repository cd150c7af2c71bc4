// Brute-force reference implementations shared by the unit tests and the
// acceptance binary. Written directly from the defining formulas, without
// calling into the library code they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "idm/losses.hpp"
#include "idm/selection.hpp"

namespace idm::oracle {

struct Candidate {
  double entropy;
  std::vector<double> output_vec;
  int class_count;
};

struct Replay {
  std::vector<std::size_t> accepted;
  std::vector<double> weights;
  std::vector<double> bank_mean;  // arithmetic mean of the accepted vectors
};

/// Sequential scan: W = exp(H - lambda_ent) [H > lambda_ent] * [class_count > k]
/// * [no acceptances yet or cos(v, mean of accepted) < lambda_sim], budget-capped.
inline Replay replay_selection(const std::vector<Candidate>& cands, double lambda_ent, double lambda_sim,
                               int k, int budget) {
  Replay r;
  std::vector<std::vector<double>> kept;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto& c = cands[i];
    const double w_pred = c.entropy > lambda_ent ? std::exp(c.entropy - lambda_ent) : 0.0;
    bool diverse = true;
    if (!kept.empty()) {
      std::vector<double> mean(c.output_vec.size(), 0.0);
      for (const auto& v : kept)
        for (std::size_t j = 0; j < v.size(); ++j) mean[j] += v[j];
      for (auto& m : mean) m /= static_cast<double>(kept.size());
      double dot = 0, na = 0, nb = 0;
      for (std::size_t j = 0; j < mean.size(); ++j) {
        dot += c.output_vec[j] * mean[j];
        na += c.output_vec[j] * c.output_vec[j];
        nb += mean[j] * mean[j];
      }
      diverse = dot / (std::sqrt(na) * std::sqrt(nb)) < lambda_sim;
    }
    const double w = w_pred * ((diverse && c.class_count > k) ? 1.0 : 0.0);
    if (w > 0.0 && static_cast<int>(r.accepted.size()) < budget) {
      r.accepted.push_back(i);
      r.weights.push_back(w);
      kept.push_back(c.output_vec);
    }
  }
  if (!kept.empty()) {
    r.bank_mean.assign(kept[0].size(), 0.0);
    for (const auto& v : kept)
      for (std::size_t j = 0; j < v.size(); ++j) r.bank_mean[j] += v[j];
    for (auto& m : r.bank_mean) m /= static_cast<double>(kept.size());
  }
  return r;
}

/// Random candidate set with a mix of peaked and flat output vectors so that
/// every gate fires both ways.
inline std::vector<Candidate> random_candidates(int n, int num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> cc(0, num_classes);
  std::uniform_int_distribution<int> cls(0, num_classes - 1);
  std::vector<Candidate> out;
  for (int i = 0; i < n; ++i) {
    Candidate c;
    c.entropy = u(rng) < 0.2 ? 0.01 * u(rng) : u(rng);
    c.class_count = cc(rng);
    c.output_vec.resize(num_classes);
    const int peak = cls(rng);
    const double sharp = 20.0 * u(rng);
    double s = 0;
    for (int j = 0; j < num_classes; ++j) {
      c.output_vec[j] = u(rng) + (j == peak ? sharp : 0.0);
      s += c.output_vec[j];
    }
    for (auto& v : c.output_vec) v /= s;
    out.push_back(std::move(c));
  }
  return out;
}

/// Per-pixel double loop for class prototypes. features[i] is D x pixels.
/// Returns D x C sums divided by counts; columns of absent classes are zero.
template <typename T>
std::vector<std::vector<double>> prototypes(const std::vector<MatX<T>>& features,
                                            const std::vector<LabelMap>& labels, int num_classes,
                                            std::vector<long>* counts = nullptr) {
  const int D = features.empty() ? 0 : static_cast<int>(features[0].rows());
  std::vector<std::vector<double>> sum(num_classes, std::vector<double>(D, 0.0));
  std::vector<long> n(num_classes, 0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    for (int p = 0; p < static_cast<int>(labels[i].pixels()); ++p) {
      const int c = labels[i].data[p];
      if (c == kIgnoreLabel) continue;
      ++n[c];
      for (int d = 0; d < D; ++d) sum[c][d] += static_cast<double>(features[i](d, p));
    }
  }
  for (int c = 0; c < num_classes; ++c)
    for (int d = 0; d < D; ++d)
      if (n[c] > 0) sum[c][d] /= static_cast<double>(n[c]);
  if (counts) *counts = n;
  return sum;
}

/// Normalized per-pixel entropy mean, straight from -sum p log p / log C.
template <typename M>
double normalized_entropy(const M& probs) {
  double h = 0;
  for (int p = 0; p < probs.cols(); ++p)
    for (int c = 0; c < probs.rows(); ++c) {
      const double v = static_cast<double>(probs(c, p));
      if (v > 0) h -= v * std::log(v);
    }
  return h / (static_cast<double>(probs.cols()) * std::log(static_cast<double>(probs.rows())));
}

/// Central finite differences on `count` randomly chosen scalar parameters.
/// `loss(state)` must evaluate the scalar whose analytic gradient is `grads`.
struct FdResult {
  double max_rel_err = 0.0;
  int checked = 0;
};

template <typename LossFn>
FdResult finite_difference_check(BasicModelState<double> state, const Gradients<double>& grads,
                                 LossFn&& loss, int count, std::uint64_t seed, double step = 1e-4) {
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t a = 0; a < state.params.size(); ++a)
    for (std::size_t i = 0; i < state.params[a].size(); ++i) all.emplace_back(a, i);
  std::shuffle(all.begin(), all.end(), rng);
  FdResult r;
  for (int k = 0; k < count && k < static_cast<int>(all.size()); ++k) {
    const auto [a, i] = all[k];
    double& v = state.params[a].values[i];
    const double orig = v;
    v = orig + step;
    const double up = loss(state);
    v = orig - step;
    const double dn = loss(state);
    v = orig;
    const double fd = (up - dn) / (2 * step);
    const double an = grads.params[a].values[i];
    // Absolute floor for parameters whose gradient vanishes.
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    r.max_rel_err = std::max(r.max_rel_err, rel);
    ++r.checked;
  }
  return r;
}

/// Two stylized-source and two mixed images with labels, a fixed source
/// marginal, and the objective wired over a fresh LossGraph.
struct ObjectiveFixture {
  std::vector<ImageTensor> source_images, target_images;
  ObjectiveSpec spec;

  ObjectiveFixture(int num_classes, std::uint64_t seed, int size = 10) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::uniform_int_distribution<int> cls(0, num_classes - 1);
    const auto image = [&] {
      ImageTensor img(size, size, 3);
      for (auto& v : img.data) v = u(rng);
      return img;
    };
    const auto label = [&] {
      LabelMap l(size, size);
      for (auto& v : l.data) v = u(rng) < 0.1f ? kIgnoreLabel : static_cast<std::uint8_t>(cls(rng));
      return l;
    };
    for (int i = 0; i < 2; ++i) {
      source_images.push_back(image());
      spec.source_labels.push_back(label());
      spec.source_weights.push_back(0.5 + u(rng));
      spec.source_traces.push_back(static_cast<std::size_t>(i));
    }
    for (int i = 0; i < 2; ++i) {
      target_images.push_back(image());
      spec.target_labels.push_back(label());
      spec.target_traces.push_back(static_cast<std::size_t>(2 + i));
    }
    ClassMarginal m;
    double s = 0;
    for (int c = 0; c < num_classes; ++c) {
      m.dist.push_back(0.2 + u(rng));
      s += m.dist.back();
    }
    for (auto& v : m.dist) v /= s;
    spec.source_marginal = m;
  }

  LossGraph<double> graph(const BasicModelState<double>& state) const {
    LossGraph<double> g;
    for (const auto& img : source_images) g.add(forward_trace(state, img));
    for (const auto& img : target_images) g.add(forward_trace(state, img));
    return g;
  }

  double value(const BasicModelState<double>& state) const {
    auto g = graph(state);
    return evaluate_objective(g, spec, false).total;
  }

  Gradients<double> gradient(const BasicModelState<double>& state) const {
    auto g = graph(state);
    evaluate_objective(g, spec, true);
    return backward(state, g);
  }
};

}  // namespace idm::oracle

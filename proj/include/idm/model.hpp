// Small convolutional encoder-decoder segmentation network.
//
// Layout: three encoder levels (two 3x3 convs each, 2x2 average pooling between
// levels), two decoder levels (nearest upsampling, skip concatenation, one 3x3
// conv), a 1x1 feature head producing the D-dim embedding F and a linear 1x1
// classifier on F. All activations are SiLU so the network is smooth everywhere,
// which keeps finite-difference checks meaningful.
//
// Tensors are Eigen column-major matrices with one row per channel and one
// column per pixel, i.e. HWC memory order.
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "idm/common.hpp"

namespace idm {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

struct Arch {
  int in_channels = 3;
  int width1 = 16;
  int width2 = 32;
  int width3 = 64;
  int feature_dim = 32;
  int num_classes = 8;

  void validate() const;
  bool operator==(const Arch&) const = default;
};

template <typename T>
struct ParamArray {
  std::string name;
  std::vector<int> shape;  // row-major description of `values`
  std::vector<T> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const ParamArray&) const = default;
};

/// Named parameters of one network. Conv weights are stored as {kh, kw, in, out}
/// (output channel fastest), biases as {out}.
template <typename T>
struct BasicModelState {
  Arch arch;
  std::vector<ParamArray<T>> params;

  const ParamArray<T>& param(const std::string& name) const;
  ParamArray<T>& param(const std::string& name);
  std::size_t num_parameters() const;
  /// Same names and shapes, in the same order.
  bool same_schema(const BasicModelState& other) const;

  template <typename U>
  BasicModelState<U> cast() const {
    BasicModelState<U> out;
    out.arch = arch;
    for (const auto& p : params) {
      out.params.push_back({p.name, p.shape, std::vector<U>(p.values.begin(), p.values.end())});
    }
    return out;
  }

  bool operator==(const BasicModelState&) const = default;
};

using ModelState = BasicModelState<float>;
using ModelStateD = BasicModelState<double>;

/// Gradient arrays share the parameter schema.
template <typename T>
using Gradients = BasicModelState<T>;

/// EMA copy of the student. Parameters are accumulated in double precision so
/// that long runs of small (1 - alpha) updates do not drift from the EMA law;
/// `snapshot()` gives the single-precision network used for inference.
struct TeacherState {
  ModelStateD model;
  double alpha = 0.999;

  static TeacherState from_student(const ModelState& student, double alpha);
  ModelState snapshot() const { return model.template cast<float>(); }
};

/// True for encoder parameters (they get the lower learning rate).
bool is_encoder_param(const std::string& name);

/// He-uniform conv weights, zero biases. Deterministic in `seed`.
ModelState init_model(const Arch& arch, std::uint64_t seed);

template <typename T>
struct ForwardOutput {
  int height = 0;
  int width = 0;
  MatX<T> logits;    // C x HW
  MatX<T> probs;     // C x HW, softmax of logits per pixel
  MatX<T> features;  // D x HW, input of the classifier

  int num_classes() const { return static_cast<int>(logits.rows()); }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
};

/// Intermediate activations retained for the backward pass.
template <typename T>
struct ForwardCache;

template <typename T>
struct Trace {
  ForwardOutput<T> out;
  std::shared_ptr<const ForwardCache<T>> cache;
};

template <typename T>
ForwardOutput<T> forward(const BasicModelState<T>& state, const ImageTensor& image);

template <typename T>
Trace<T> forward_trace(const BasicModelState<T>& state, const ImageTensor& image);

/// Scalar loss under construction: the forward traces it depends on, the
/// gradient of the loss with respect to each trace's logits and features, and
/// optional direct parameter terms. Loss functions accumulate into it.
template <typename T>
class LossGraph {
 public:
  std::size_t add(Trace<T> trace);
  std::size_t size() const { return traces_.size(); }
  const ForwardOutput<T>& output(std::size_t i) const { return traces_.at(i).out; }
  const Trace<T>& trace(std::size_t i) const { return traces_.at(i); }

  /// Zero-initialized on first access.
  MatX<T>& logits_grad(std::size_t i);
  MatX<T>& features_grad(std::size_t i);
  /// Empty matrix when nothing was seeded.
  const MatX<T>& logits_grad(std::size_t i) const { return logits_grad_.at(i); }
  const MatX<T>& features_grad(std::size_t i) const { return features_grad_.at(i); }
  bool has_logits_grad(std::size_t i) const { return logits_grad_.at(i).size() != 0; }
  bool has_features_grad(std::size_t i) const { return features_grad_.at(i).size() != 0; }

  /// Adds d(loss)/d(param) for a loss term that reads the parameter directly.
  void add_param_grad(const std::string& name, std::vector<T> grad);
  const std::vector<std::pair<std::string, std::vector<T>>>& param_grads() const {
    return param_grads_;
  }

 private:
  std::vector<Trace<T>> traces_;
  std::vector<MatX<T>> logits_grad_;
  std::vector<MatX<T>> features_grad_;
  std::vector<std::pair<std::string, std::vector<T>>> param_grads_;
};

/// Gradient of the graph's scalar loss with respect to every parameter.
/// Throws ContractError when a seeded gradient does not match the shape of the
/// tensor it differentiates (i.e. the loss is not a scalar of that tensor).
template <typename T>
Gradients<T> backward(const BasicModelState<T>& state, const LossGraph<T>& graph);

/// t' = alpha * t + (1 - alpha) * s for every parameter; alpha in [0, 1].
TeacherState ema_update(const TeacherState& teacher, const ModelState& student, double alpha);

/// Per-pixel argmax of the teacher's probabilities, lowest class index on ties.
/// Pixels whose max probability is below `min_confidence` become kIgnoreLabel.
LabelMap pseudo_label(const TeacherState& teacher, const ImageTensor& image,
                      double min_confidence = 0.0);
/// Same, for a teacher already materialized with TeacherState::snapshot().
LabelMap pseudo_label(const ModelState& teacher_net, const ImageTensor& image,
                      double min_confidence = 0.0);

template <typename T>
LabelMap argmax_labels(const ForwardOutput<T>& out, double min_confidence = 0.0);

/// Binary checkpoint: magic, format version, JSON manifest (arch, C, D, array
/// table), then each array as little-endian float32. Optional teacher arrays are
/// stored with a "teacher/" prefix as little-endian float64.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const ModelState& state,
                     const TeacherState* teacher = nullptr);
struct Checkpoint {
  ModelState student;
  bool has_teacher = false;
  TeacherState teacher;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace idm

#include "idm/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

namespace idm {

void Arch::validate() const {
  if (in_channels < 1 || width1 < 1 || width2 < 1 || width3 < 1 || feature_dim < 1) {
    throw ConfigError("Arch: channel widths must be positive");
  }
  if (num_classes < 2 || num_classes > kMaxClasses) {
    throw ConfigError("Arch: num_classes must be in [2, 32]");
  }
}

template <typename T>
const ParamArray<T>& BasicModelState<T>::param(const std::string& name) const {
  for (const auto& p : params) {
    if (p.name == name) return p;
  }
  throw ContractError("no parameter named '" + name + "'");
}

template <typename T>
ParamArray<T>& BasicModelState<T>::param(const std::string& name) {
  return const_cast<ParamArray<T>&>(std::as_const(*this).param(name));
}

template <typename T>
std::size_t BasicModelState<T>::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

template <typename T>
bool BasicModelState<T>::same_schema(const BasicModelState& other) const {
  if (params.size() != other.params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != other.params[i].name || params[i].shape != other.params[i].shape ||
        params[i].size() != other.params[i].size()) {
      return false;
    }
  }
  return true;
}

template struct BasicModelState<float>;
template struct BasicModelState<double>;

bool is_encoder_param(const std::string& name) { return name.rfind("enc", 0) == 0; }

namespace {

struct LayerSpec {
  const char* name;
  int kernel;
  int in;
  int out;
};

// Order matters: it is the parameter order of every state and checkpoint.
std::vector<LayerSpec> layer_specs(const Arch& a) {
  return {
      {"enc1.conv1", 3, a.in_channels, a.width1},
      {"enc1.conv2", 3, a.width1, a.width1},
      {"enc2.conv1", 3, a.width1, a.width2},
      {"enc2.conv2", 3, a.width2, a.width2},
      {"enc3.conv1", 3, a.width2, a.width3},
      {"enc3.conv2", 3, a.width3, a.width3},
      {"dec2.conv", 3, a.width3 + a.width2, a.width2},
      {"dec1.conv", 3, a.width2 + a.width1, a.width1},
      {"feat", 1, a.width1, a.feature_dim},
      {"cls", 1, a.feature_dim, a.num_classes},
  };
}

}  // namespace

ModelState init_model(const Arch& arch, std::uint64_t seed) {
  arch.validate();
  ModelState state;
  state.arch = arch;
  Rng rng(seed);
  for (const auto& spec : layer_specs(arch)) {
    const int fan_in = spec.kernel * spec.kernel * spec.in;
    ParamArray<float> w{std::string(spec.name) + ".weight",
                        {spec.kernel, spec.kernel, spec.in, spec.out},
                        std::vector<float>(static_cast<std::size_t>(fan_in) * spec.out)};
    const double bound = std::sqrt(6.0 / fan_in);
    for (auto& v : w.values) v = static_cast<float>((2.0 * uniform01(rng) - 1.0) * bound);
    ParamArray<float> b{std::string(spec.name) + ".bias", {spec.out},
                        std::vector<float>(static_cast<std::size_t>(spec.out), 0.0f)};
    state.params.push_back(std::move(w));
    state.params.push_back(std::move(b));
  }
  return state;
}

TeacherState TeacherState::from_student(const ModelState& student, double alpha) {
  return TeacherState{student.cast<double>(), alpha};
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace {

template <typename T>
using ConstMap = Eigen::Map<const MatX<T>>;

struct Grid {
  int h = 0;
  int w = 0;
  Eigen::Index pixels() const { return static_cast<Eigen::Index>(h) * w; }
  Grid half() const { return {(h + 1) / 2, (w + 1) / 2}; }
};

template <typename T>
ConstMap<T> weight_matrix(const ParamArray<T>& w) {
  const int k = w.shape[0], in = w.shape[2], out = w.shape[3];
  return ConstMap<T>(w.values.data(), out, static_cast<Eigen::Index>(k) * k * in);
}

template <typename T>
ConstMap<T> bias_vector(const ParamArray<T>& b) {
  return ConstMap<T>(b.values.data(), b.shape[0], 1);
}

// Reused per-thread buffer; avoids page-faulting a fresh multi-megabyte block
// for every convolution.
template <typename T>
Eigen::Map<MatX<T>> scratch(int slot, Eigen::Index rows, Eigen::Index cols) {
  thread_local std::vector<T> buffers[2];
  auto& buf = buffers[slot];
  const auto n = static_cast<std::size_t>(rows * cols);
  if (buf.size() < n) buf.resize(n);
  return Eigen::Map<MatX<T>>(buf.data(), rows, cols);
}

// 3x3, stride 1, zero padding 1. Row block k*C..(k+1)*C holds kernel tap k.
// Columns of one image row are contiguous, so each (tap, row) is one block copy.
template <typename T>
Eigen::Map<MatX<T>> im2col3(const MatX<T>& in, Grid g) {
  const Eigen::Index C = in.rows();
  auto cols = scratch<T>(0, 9 * C, g.pixels());
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const int k = (dy + 1) * 3 + (dx + 1);
      const int x0 = std::max(0, -dx), x1 = std::min(g.w, g.w - dx);
      const int y0 = std::max(0, -dy), y1 = std::min(g.h, g.h - dy);
      for (int y = 0; y < g.h; ++y) {
        const Eigen::Index row = static_cast<Eigen::Index>(y) * g.w;
        if (y < y0 || y >= y1 || x1 <= x0) {
          cols.block(k * C, row, C, g.w).setZero();
          continue;
        }
        if (x0 > 0) cols.block(k * C, row, C, x0).setZero();
        if (x1 < g.w) cols.block(k * C, row + x1, C, g.w - x1).setZero();
        const Eigen::Index q = static_cast<Eigen::Index>(y + dy) * g.w + x0 + dx;
        cols.block(k * C, row + x0, C, x1 - x0) = in.block(0, q, C, x1 - x0);
      }
    }
  }
  return cols;
}

template <typename T>
MatX<T> col2im3(const Eigen::Map<MatX<T>>& cols, Grid g, Eigen::Index C) {
  MatX<T> out = MatX<T>::Zero(C, g.pixels());
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const int k = (dy + 1) * 3 + (dx + 1);
      const int x0 = std::max(0, -dx), x1 = std::min(g.w, g.w - dx);
      if (x1 <= x0) continue;
      for (int y = std::max(0, -dy); y < std::min(g.h, g.h - dy); ++y) {
        const Eigen::Index p = static_cast<Eigen::Index>(y) * g.w + x0;
        const Eigen::Index q = static_cast<Eigen::Index>(y + dy) * g.w + x0 + dx;
        out.block(0, q, C, x1 - x0) += cols.block(k * C, p, C, x1 - x0);
      }
    }
  }
  return out;
}

template <typename T>
MatX<T> conv(const MatX<T>& in, Grid g, const ParamArray<T>& w, const ParamArray<T>& b) {
  MatX<T> out;
  if (w.shape[0] == 1) {
    out.noalias() = weight_matrix(w) * in;
  } else {
    out.noalias() = weight_matrix(w) * im2col3(in, g);
  }
  out.colwise() += bias_vector(b).col(0);
  return out;
}

// Accumulates weight/bias gradients; returns the input gradient when asked.
template <typename T>
MatX<T> conv_backward(const MatX<T>& in, Grid g, const ParamArray<T>& w, const MatX<T>& dout,
                      ParamArray<T>& dw, ParamArray<T>& db, bool need_input_grad) {
  Eigen::Map<MatX<T>> dW(dw.values.data(), w.shape[3],
                         static_cast<Eigen::Index>(w.shape[0]) * w.shape[1] * w.shape[2]);
  Eigen::Map<MatX<T>> dB(db.values.data(), db.shape[0], 1);
  dB.col(0) += dout.rowwise().sum();
  if (w.shape[0] == 1) {
    dW.noalias() += dout * in.transpose();
    if (!need_input_grad) return {};
    return weight_matrix(w).transpose() * dout;
  }
  dW.noalias() += dout * im2col3(in, g).transpose();
  if (!need_input_grad) return {};
  auto dcols = scratch<T>(1, dW.cols(), dout.cols());
  dcols.noalias() = weight_matrix(w).transpose() * dout;
  return col2im3<T>(dcols, g, in.rows());
}

template <typename T>
MatX<T> silu(const MatX<T>& a) {
  return (a.array() / (T(1) + (-a.array()).exp())).matrix();
}

// dL/da given dL/dy for y = silu(a).
template <typename T>
MatX<T> silu_backward(const MatX<T>& a, const MatX<T>& dy) {
  const auto s = (T(1) / (T(1) + (-a.array()).exp())).eval();
  return (dy.array() * s * (T(1) + a.array() * (T(1) - s))).matrix();
}

// 2x2 average pooling; border windows average over the pixels they contain.
template <typename T>
MatX<T> avg_pool(const MatX<T>& in, Grid g) {
  const Grid o = g.half();
  MatX<T> out = MatX<T>::Zero(in.rows(), o.pixels());
  for (int y = 0; y < o.h; ++y) {
    for (int x = 0; x < o.w; ++x) {
      const Eigen::Index op = static_cast<Eigen::Index>(y) * o.w + x;
      int n = 0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const int sy = 2 * y + dy, sx = 2 * x + dx;
          if (sy >= g.h || sx >= g.w) continue;
          out.col(op) += in.col(static_cast<Eigen::Index>(sy) * g.w + sx);
          ++n;
        }
      }
      out.col(op) /= static_cast<T>(n);
    }
  }
  return out;
}

template <typename T>
MatX<T> avg_pool_backward(const MatX<T>& dout, Grid g) {
  const Grid o = g.half();
  MatX<T> din(dout.rows(), g.pixels());
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      const int oy = y / 2, ox = x / 2;
      const int n = (std::min(2 * oy + 2, g.h) - 2 * oy) * (std::min(2 * ox + 2, g.w) - 2 * ox);
      din.col(static_cast<Eigen::Index>(y) * g.w + x) =
          dout.col(static_cast<Eigen::Index>(oy) * o.w + ox) / static_cast<T>(n);
    }
  }
  return din;
}

// Nearest-neighbour upsampling from g.half() to g.
template <typename T>
MatX<T> upsample(const MatX<T>& in, Grid g) {
  const Grid s = g.half();
  MatX<T> out(in.rows(), g.pixels());
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      out.col(static_cast<Eigen::Index>(y) * g.w + x) =
          in.col(static_cast<Eigen::Index>(y / 2) * s.w + x / 2);
    }
  }
  return out;
}

template <typename T>
MatX<T> upsample_backward(const MatX<T>& dout, Grid g) {
  const Grid s = g.half();
  MatX<T> din = MatX<T>::Zero(dout.rows(), s.pixels());
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      din.col(static_cast<Eigen::Index>(y / 2) * s.w + x / 2) +=
          dout.col(static_cast<Eigen::Index>(y) * g.w + x);
    }
  }
  return din;
}

template <typename T>
MatX<T> vstack(const MatX<T>& top, const MatX<T>& bottom) {
  MatX<T> out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

template <typename T>
MatX<T> softmax_columns(const MatX<T>& logits) {
  MatX<T> probs(logits.rows(), logits.cols());
  for (Eigen::Index p = 0; p < logits.cols(); ++p) {
    const T m = logits.col(p).maxCoeff();
    probs.col(p) = (logits.col(p).array() - m).exp();
    probs.col(p) /= probs.col(p).sum();
  }
  return probs;
}

template <typename T>
MatX<T> image_matrix(const ImageTensor& image, int channels) {
  if (image.channels != channels) {
    throw ContractError("forward: image has " + std::to_string(image.channels) +
                        " channels, network expects " + std::to_string(channels));
  }
  if (image.height < 1 || image.width < 1) throw ContractError("forward: empty image");
  return Eigen::Map<const Eigen::MatrixXf>(image.data.data(), image.channels,
                                           static_cast<Eigen::Index>(image.pixels()))
      .cast<T>();
}

}  // namespace

template <typename T>
struct ForwardCache {
  Grid g1, g2, g3;
  MatX<T> x0, a1, h1, a2, s1, p1, a3, h3, a4, s2, p2, a5, h5, a6, c2, a7, c1, a8, d1, a9;
};

template <typename T>
Trace<T> forward_trace(const BasicModelState<T>& state, const ImageTensor& image) {
  auto cache = std::make_shared<ForwardCache<T>>();
  auto& c = *cache;
  const auto& P = [&](const char* layer, const char* kind) -> const ParamArray<T>& {
    return state.param(std::string(layer) + "." + kind);
  };
  c.g1 = {image.height, image.width};
  c.g2 = c.g1.half();
  c.g3 = c.g2.half();
  c.x0 = image_matrix<T>(image, state.arch.in_channels);

  c.a1 = conv(c.x0, c.g1, P("enc1.conv1", "weight"), P("enc1.conv1", "bias"));
  c.h1 = silu(c.a1);
  c.a2 = conv(c.h1, c.g1, P("enc1.conv2", "weight"), P("enc1.conv2", "bias"));
  c.s1 = silu(c.a2);
  c.p1 = avg_pool(c.s1, c.g1);

  c.a3 = conv(c.p1, c.g2, P("enc2.conv1", "weight"), P("enc2.conv1", "bias"));
  c.h3 = silu(c.a3);
  c.a4 = conv(c.h3, c.g2, P("enc2.conv2", "weight"), P("enc2.conv2", "bias"));
  c.s2 = silu(c.a4);
  c.p2 = avg_pool(c.s2, c.g2);

  c.a5 = conv(c.p2, c.g3, P("enc3.conv1", "weight"), P("enc3.conv1", "bias"));
  c.h5 = silu(c.a5);
  c.a6 = conv(c.h5, c.g3, P("enc3.conv2", "weight"), P("enc3.conv2", "bias"));
  const MatX<T> bottleneck = silu(c.a6);

  c.c2 = vstack(upsample(bottleneck, c.g2), c.s2);
  c.a7 = conv(c.c2, c.g2, P("dec2.conv", "weight"), P("dec2.conv", "bias"));
  const MatX<T> d2 = silu(c.a7);

  c.c1 = vstack(upsample(d2, c.g1), c.s1);
  c.a8 = conv(c.c1, c.g1, P("dec1.conv", "weight"), P("dec1.conv", "bias"));
  c.d1 = silu(c.a8);

  c.a9 = conv(c.d1, c.g1, P("feat", "weight"), P("feat", "bias"));

  Trace<T> trace;
  trace.out.height = image.height;
  trace.out.width = image.width;
  trace.out.features = silu(c.a9);
  trace.out.logits = conv(trace.out.features, c.g1, P("cls", "weight"), P("cls", "bias"));
  trace.out.probs = softmax_columns(trace.out.logits);
  trace.cache = std::move(cache);
  return trace;
}

template <typename T>
ForwardOutput<T> forward(const BasicModelState<T>& state, const ImageTensor& image) {
  return forward_trace(state, image).out;
}

template <typename T>
std::size_t LossGraph<T>::add(Trace<T> trace) {
  traces_.push_back(std::move(trace));
  logits_grad_.emplace_back();
  features_grad_.emplace_back();
  return traces_.size() - 1;
}

template <typename T>
MatX<T>& LossGraph<T>::logits_grad(std::size_t i) {
  auto& g = logits_grad_.at(i);
  if (g.size() == 0) g = MatX<T>::Zero(output(i).logits.rows(), output(i).logits.cols());
  return g;
}

template <typename T>
MatX<T>& LossGraph<T>::features_grad(std::size_t i) {
  auto& g = features_grad_.at(i);
  if (g.size() == 0) g = MatX<T>::Zero(output(i).features.rows(), output(i).features.cols());
  return g;
}

template <typename T>
void LossGraph<T>::add_param_grad(const std::string& name, std::vector<T> grad) {
  param_grads_.emplace_back(name, std::move(grad));
}

namespace {

template <typename T>
Gradients<T> zeros_like(const BasicModelState<T>& state) {
  Gradients<T> g;
  g.arch = state.arch;
  for (const auto& p : state.params) {
    g.params.push_back({p.name, p.shape, std::vector<T>(p.size(), T(0))});
  }
  return g;
}

template <typename T>
void trace_backward(const BasicModelState<T>& state, const Trace<T>& trace, const MatX<T>* dlogits,
                    const MatX<T>* dfeatures, Gradients<T>& grads) {
  const auto& c = *trace.cache;
  const auto W = [&](const char* layer) -> const ParamArray<T>& {
    return state.param(std::string(layer) + ".weight");
  };
  const auto conv_back = [&](const char* layer, const MatX<T>& in, Grid g, const MatX<T>& dout,
                             bool need_input) {
    return conv_backward(in, g, W(layer), dout, grads.param(std::string(layer) + ".weight"),
                         grads.param(std::string(layer) + ".bias"), need_input);
  };

  MatX<T> dF = MatX<T>::Zero(trace.out.features.rows(), trace.out.features.cols());
  if (dfeatures) dF += *dfeatures;
  if (dlogits) dF += conv_back("cls", trace.out.features, c.g1, *dlogits, true);

  const MatX<T> dd1 = conv_back("feat", c.d1, c.g1, silu_backward(c.a9, dF), true);
  const MatX<T> dc1 = conv_back("dec1.conv", c.c1, c.g1, silu_backward(c.a8, dd1), true);
  const Eigen::Index w1 = c.s1.rows(), w2 = c.s2.rows();
  MatX<T> ds1 = dc1.bottomRows(w1);
  const MatX<T> dd2 = upsample_backward<T>(dc1.topRows(dc1.rows() - w1), c.g1);

  const MatX<T> dc2 = conv_back("dec2.conv", c.c2, c.g2, silu_backward(c.a7, dd2), true);
  MatX<T> ds2 = dc2.bottomRows(w2);
  const MatX<T> dbottleneck = upsample_backward<T>(dc2.topRows(dc2.rows() - w2), c.g2);

  const MatX<T> dh5 = conv_back("enc3.conv2", c.h5, c.g3, silu_backward(c.a6, dbottleneck), true);
  const MatX<T> dp2 = conv_back("enc3.conv1", c.p2, c.g3, silu_backward(c.a5, dh5), true);
  ds2 += avg_pool_backward(dp2, c.g2);

  const MatX<T> dh3 = conv_back("enc2.conv2", c.h3, c.g2, silu_backward(c.a4, ds2), true);
  const MatX<T> dp1 = conv_back("enc2.conv1", c.p1, c.g2, silu_backward(c.a3, dh3), true);
  ds1 += avg_pool_backward(dp1, c.g1);

  const MatX<T> dh1 = conv_back("enc1.conv2", c.h1, c.g1, silu_backward(c.a2, ds1), true);
  conv_back("enc1.conv1", c.x0, c.g1, silu_backward(c.a1, dh1), false);
}

template <typename T>
void check_seed(const MatX<T>& seed, const MatX<T>& like, const char* what) {
  if (seed.rows() != like.rows() || seed.cols() != like.cols()) {
    throw ContractError(std::string("backward: ") + what +
                        " gradient shape does not match the output; loss is not a scalar");
  }
}

}  // namespace

template <typename T>
Gradients<T> backward(const BasicModelState<T>& state, const LossGraph<T>& graph) {
  Gradients<T> total = zeros_like(state);
  const auto n = static_cast<int>(graph.size());
  // Per-trace accumulation, summed in trace order so results do not depend on threading.
  std::vector<Gradients<T>> partial(static_cast<std::size_t>(n));
  std::vector<const MatX<T>*> dl(n, nullptr), df(n, nullptr);
  for (int i = 0; i < n; ++i) {
    if (graph.has_logits_grad(i)) {
      dl[i] = &graph.logits_grad(i);
      check_seed(*dl[i], graph.output(i).logits, "logits");
    }
    if (graph.has_features_grad(i)) {
      df[i] = &graph.features_grad(i);
      check_seed(*df[i], graph.output(i).features, "features");
    }
  }
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < n; ++i) {
    if (!dl[i] && !df[i]) continue;
    partial[i] = zeros_like(state);
    trace_backward(state, graph.trace(i), dl[i], df[i], partial[i]);
  }
  for (int i = 0; i < n; ++i) {
    if (partial[i].params.empty()) continue;
    for (std::size_t k = 0; k < total.params.size(); ++k) {
      auto& dst = total.params[k].values;
      const auto& src = partial[i].params[k].values;
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  for (const auto& [name, grad] : graph.param_grads()) {
    auto& dst = total.param(name).values;
    if (grad.size() != dst.size()) {
      throw ContractError("backward: parameter gradient for '" + name + "' has wrong size");
    }
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += grad[j];
  }
  return total;
}

template <typename T>
LabelMap argmax_labels(const ForwardOutput<T>& out, double min_confidence) {
  LabelMap label(out.height, out.width);
  for (Eigen::Index p = 0; p < out.probs.cols(); ++p) {
    Eigen::Index best = 0;
    T best_p = out.probs(0, p);
    for (Eigen::Index c = 1; c < out.probs.rows(); ++c) {
      if (out.probs(c, p) > best_p) {
        best_p = out.probs(c, p);
        best = c;
      }
    }
    label.data[p] = best_p < min_confidence ? kIgnoreLabel : static_cast<std::uint8_t>(best);
  }
  return label;
}

TeacherState ema_update(const TeacherState& teacher, const ModelState& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("ema_update: alpha must be in [0, 1]");
  bool schema_ok = teacher.model.params.size() == student.params.size();
  for (std::size_t k = 0; schema_ok && k < student.params.size(); ++k) {
    schema_ok = teacher.model.params[k].name == student.params[k].name &&
                teacher.model.params[k].shape == student.params[k].shape;
  }
  if (!schema_ok) throw ContractError("ema_update: teacher and student schemas differ");
  TeacherState out = teacher;
  out.alpha = alpha;
  for (std::size_t k = 0; k < student.params.size(); ++k) {
    auto& t = out.model.params[k].values;
    const auto& s = student.params[k].values;
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = alpha * t[j] + (1.0 - alpha) * s[j];
  }
  return out;
}

LabelMap pseudo_label(const TeacherState& teacher, const ImageTensor& image, double min_confidence) {
  return pseudo_label(teacher.snapshot(), image, min_confidence);
}

LabelMap pseudo_label(const ModelState& teacher_net, const ImageTensor& image, double min_confidence) {
  return argmax_labels(forward(teacher_net, image), min_confidence);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'I', 'D', 'M', 'C'};

template <typename U>
void write_le(std::ostream& os, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw IngestError("checkpoint truncated");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

nlohmann::json arch_json(const Arch& a) {
  return {{"in_channels", a.in_channels}, {"width1", a.width1},           {"width2", a.width2},
          {"width3", a.width3},           {"feature_dim", a.feature_dim}, {"num_classes", a.num_classes}};
}

Arch arch_from_json(const nlohmann::json& j) {
  Arch a;
  a.in_channels = j.at("in_channels").get<int>();
  a.width1 = j.at("width1").get<int>();
  a.width2 = j.at("width2").get<int>();
  a.width3 = j.at("width3").get<int>();
  a.feature_dim = j.at("feature_dim").get<int>();
  a.num_classes = j.at("num_classes").get<int>();
  return a;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState& state,
                     const TeacherState* teacher) {
  if (teacher && !teacher->model.same_schema(state.cast<double>())) {
    throw ContractError("save_checkpoint: teacher schema differs from student");
  }
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["arch"] = arch_json(state.arch);
  manifest["num_classes"] = state.arch.num_classes;
  manifest["feature_dim"] = state.arch.feature_dim;
  auto arrays = nlohmann::json::array();
  for (const auto& p : state.params) arrays.push_back({{"name", p.name}, {"shape", p.shape}, {"dtype", "f32"}});
  if (teacher) {
    manifest["teacher_alpha"] = teacher->alpha;
    for (const auto& p : teacher->model.params) {
      arrays.push_back({{"name", "teacher/" + p.name}, {"shape", p.shape}, {"dtype", "f64"}});
    }
  }
  manifest["arrays"] = arrays;
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestError("cannot write checkpoint " + path.string());
  os.write(kMagic, 4);
  write_le<std::uint32_t>(os, kCheckpointVersion);
  write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : state.params) {
    for (const float v : p.values) write_le<float>(os, v);
  }
  if (teacher) {
    for (const auto& p : teacher->model.params) {
      for (const double v : p.values) write_le<double>(os, v);
    }
  }
  if (!os) throw IngestError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
    throw IngestError(path.string() + ": not an idm checkpoint");
  }
  if (read_le<std::uint32_t>(is) != kCheckpointVersion) {
    throw IngestError(path.string() + ": unsupported checkpoint version");
  }
  const auto len = read_le<std::uint64_t>(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw IngestError("checkpoint truncated");

  Checkpoint ck;
  try {
    const auto manifest = nlohmann::json::parse(text);
    ck.student.arch = arch_from_json(manifest.at("arch"));
    ck.teacher.model.arch = ck.student.arch;
    ck.teacher.alpha = manifest.value("teacher_alpha", 0.999);
    for (const auto& a : manifest.at("arrays")) {
      auto name = a.at("name").get<std::string>();
      const auto shape = a.at("shape").get<std::vector<int>>();
      std::size_t n = 1;
      for (const int d : shape) {
        if (d < 0) throw IngestError("negative dimension in checkpoint");
        n *= static_cast<std::size_t>(d);
      }
      const auto dtype = a.at("dtype").get<std::string>();
      if (name.rfind("teacher/", 0) == 0) {
        if (dtype != "f64") throw IngestError("teacher arrays must be f64");
        ParamArray<double> p{name.substr(8), shape, std::vector<double>(n)};
        for (auto& v : p.values) v = read_le<double>(is);
        ck.teacher.model.params.push_back(std::move(p));
        ck.has_teacher = true;
      } else {
        if (dtype != "f32") throw IngestError("model arrays must be f32");
        ParamArray<float> p{std::move(name), shape, std::vector<float>(n)};
        for (auto& v : p.values) v = read_le<float>(is);
        ck.student.params.push_back(std::move(p));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IngestError(path.string() + ": malformed checkpoint manifest: " + e.what());
  }
  // The stored schema must be exactly what this architecture produces.
  if (!ck.student.same_schema(init_model(ck.student.arch, 0))) {
    throw IngestError(path.string() + ": parameter table does not match architecture");
  }
  return ck;
}

template ForwardOutput<float> forward(const ModelState&, const ImageTensor&);
template ForwardOutput<double> forward(const ModelStateD&, const ImageTensor&);
template Trace<float> forward_trace(const ModelState&, const ImageTensor&);
template Trace<double> forward_trace(const ModelStateD&, const ImageTensor&);
template class LossGraph<float>;
template class LossGraph<double>;
template Gradients<float> backward(const ModelState&, const LossGraph<float>&);
template Gradients<double> backward(const ModelStateD&, const LossGraph<double>&);
template LabelMap argmax_labels(const ForwardOutput<float>&, double);
template LabelMap argmax_labels(const ForwardOutput<double>&, double);

}  // namespace idm

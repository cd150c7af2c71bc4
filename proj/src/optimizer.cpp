#include "idm/optimizer.hpp"

#include <algorithm>
#include <cmath>

namespace idm {

double LrSchedule::factor(int t) const {
  if (t < warmup) return static_cast<double>(t + 1) / static_cast<double>(warmup);
  if (total <= warmup) return 1.0;
  return std::max(0.0, 1.0 - static_cast<double>(t - warmup) / static_cast<double>(total - warmup));
}

void LrSchedule::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(encoder_scale > 0.0)) throw ConfigError("encoder lr scale must be > 0");
  if (warmup < 0) throw ConfigError("lr warmup must be >= 0");
}

AdamW::AdamW(const ModelState& like, LrSchedule schedule, AdamWConfig cfg)
    : schedule_(schedule), cfg_(cfg) {
  schedule_.validate();
  for (const auto& p : like.params) {
    m_.emplace_back(p.size(), 0.0f);
    v_.emplace_back(p.size(), 0.0f);
  }
}

double AdamW::current_lr(bool encoder) const {
  return schedule_.base_lr * schedule_.factor(t_) * (encoder ? schedule_.encoder_scale : 1.0);
}

void AdamW::step(ModelState& state, const Gradients<float>& grads) {
  if (!state.same_schema(grads) || state.params.size() != m_.size()) {
    throw ContractError("AdamW: gradient schema differs from the parameters");
  }
  const double b1t = 1.0 - std::pow(cfg_.beta1, t_ + 1);
  const double b2t = 1.0 - std::pow(cfg_.beta2, t_ + 1);
  for (std::size_t k = 0; k < state.params.size(); ++k) {
    auto& p = state.params[k].values;
    const auto& g = grads.params[k].values;
    const double lr = current_lr(is_encoder_param(state.params[k].name));
    const float decay = static_cast<float>(1.0 - lr * cfg_.weight_decay);
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float step = static_cast<float>(lr / b1t);
    const float inv_b2t = static_cast<float>(1.0 / b2t);
    const float eps = static_cast<float>(cfg_.eps);
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      p[i] = p[i] * decay - step * m[i] / (std::sqrt(v[i] * inv_b2t) + eps);
    }
  }
  ++t_;
}

}  // namespace idm

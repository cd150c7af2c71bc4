// AdamW with separate encoder/decoder learning rates and a warmup + linear
// decay schedule.
#pragma once

#include "idm/model.hpp"

namespace idm {

struct LrSchedule {
  double base_lr = 6e-4;    // decoder and heads
  double encoder_scale = 0.1;  // encoder lr = base_lr * encoder_scale
  int warmup = 500;
  int total = 40000;        // lr reaches 0 at this step

  /// Decoder lr multiplier at step t (0-based): linear warmup, then linear decay.
  double factor(int t) const;
  void validate() const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  AdamW(const ModelState& like, LrSchedule schedule, AdamWConfig cfg = {});

  /// One update in place. Decay is decoupled: p -= lr * wd * p.
  void step(ModelState& state, const Gradients<float>& grads);
  int steps_taken() const { return t_; }
  double current_lr(bool encoder) const;

 private:
  LrSchedule schedule_;
  AdamWConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  int t_ = 0;
};

}  // namespace idm

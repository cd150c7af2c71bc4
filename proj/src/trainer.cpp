#include "idm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "idm/metrics.hpp"
#include "idm/mixing.hpp"
#include "idm/optimizer.hpp"

namespace idm {

TrainConfig TrainConfig::desk_scale() {
  TrainConfig c;
  c.source_iters = 2000;
  c.adapt_iters = 500;
  c.pretrain_lr = 2e-3;
  c.pretrain_warmup = 100;
  c.candidate_pool = 8;
  c.lr = 1e-4;
  c.lr_warmup = 20;
  // k = 13 cannot be met with 8 classes; the cosine gate cost accuracy at this scale.
  c.selection.k = 1;
  c.selection.lambda_sim = 1.0;
  c.loss_weights.im = 0.1;
  c.patches = 16;
  c.ema_alpha = 0.99;
  return c;
}

void TrainConfig::validate() const {
  std::vector<std::string> errs;
  auto need = [&](bool ok, const char* msg) {
    if (!ok) errs.emplace_back(msg);
  };
  need(source_iters >= 0, "source_iters must be >= 0");
  need(adapt_iters >= 0, "adapt_iters must be >= 0");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(candidate_pool >= 1, "candidate_pool must be >= 1");
  need(lr > 0.0, "lr must be > 0");
  need(encoder_lr_scale > 0.0, "encoder_lr_scale must be > 0");
  need(lr_warmup >= 0, "lr_warmup must be >= 0");
  need(pretrain_lr > 0.0, "pretrain_lr must be > 0");
  need(pretrain_warmup >= 0, "pretrain_warmup must be >= 0");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(rcs_temperature > 0.0, "rcs_temperature must be > 0");
  need(max_empty_selections >= 1, "max_empty_selections must be >= 1");
  need(patches >= 1, "patches must be >= 1");
  need(mix_ratio >= 0.0 && mix_ratio <= 1.0, "mix_ratio must be in [0, 1]");
  need(pseudo_confidence >= 0.0 && pseudo_confidence <= 1.0, "pseudo_confidence must be in [0, 1]");
  need(tau > 0.0, "tau must be > 0");
  need(std::isfinite(loss_weights.ssm) && std::isfinite(loss_weights.scl) && std::isfinite(loss_weights.im),
       "loss weights must be finite");
  need(marginal_decay >= 0.0 && marginal_decay < 1.0, "marginal_decay must be in [0, 1)");
  need(ema_alpha >= 0.0 && ema_alpha <= 1.0, "ema_alpha must be in [0, 1]");
  need(eval_every >= 1, "eval_every must be >= 1");
  try {
    selection.validate();
  } catch (const ConfigError& e) {
    errs.emplace_back(e.what());
  }
  if (!errs.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw ConfigError(msg);
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {
      {"source_iters", c.source_iters},
      {"adapt_iters", c.adapt_iters},
      {"batch_size", c.batch_size},
      {"candidate_pool", c.candidate_pool},
      {"lr", c.lr},
      {"encoder_lr_scale", c.encoder_lr_scale},
      {"lr_warmup", c.lr_warmup},
      {"pretrain_lr", c.pretrain_lr},
      {"pretrain_warmup", c.pretrain_warmup},
      {"weight_decay", c.weight_decay},
      {"seed", c.seed},
      {"selection",
       {{"lambda_ent", c.selection.lambda_ent},
        {"lambda_sim", c.selection.lambda_sim},
        {"k", c.selection.k},
        {"batch_budget", c.selection.batch_budget}}},
      {"gap_norm", to_string(c.gap_norm)},
      {"rcs_temperature", c.rcs_temperature},
      {"max_empty_selections", c.max_empty_selections},
      {"patches", c.patches},
      {"mix_ratio", c.mix_ratio},
      {"pseudo_confidence", c.pseudo_confidence},
      {"tau", c.tau},
      {"loss_weights", {{"ssm", c.loss_weights.ssm}, {"scl", c.loss_weights.scl}, {"im", c.loss_weights.im}}},
      {"literal_sign", c.literal_sign},
      {"prototype_grad", c.prototype_grad},
      {"marginal_decay", c.marginal_decay},
      {"ema_alpha", c.ema_alpha},
      {"components",
       {{"ssm", c.components.ssm}, {"patchmix", c.components.patchmix}, {"pim", c.components.pim}}},
      {"eval_every", c.eval_every},
  };
}

namespace {

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out, std::vector<std::string>& errs,
              const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    errs.push_back(prefix + key + ": wrong type");
  }
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& prefix,
                std::vector<std::string>& errs) {
  if (!j.is_object()) {
    errs.push_back(prefix + ": expected an object");
    return;
  }
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; })) {
      errs.push_back("unknown key " + prefix + k);
    }
  }
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base) {
  TrainConfig c = base;
  std::vector<std::string> errs;
  check_keys(j,
             {"source_iters", "adapt_iters", "batch_size", "candidate_pool", "lr", "encoder_lr_scale",
              "lr_warmup", "pretrain_lr", "pretrain_warmup", "weight_decay", "seed", "selection", "gap_norm",
              "rcs_temperature", "max_empty_selections", "patches", "mix_ratio", "pseudo_confidence", "tau",
              "loss_weights", "literal_sign", "prototype_grad", "marginal_decay", "ema_alpha", "components",
              "eval_every"},
             "", errs);
  read_key(j, "source_iters", c.source_iters, errs, "");
  read_key(j, "adapt_iters", c.adapt_iters, errs, "");
  read_key(j, "batch_size", c.batch_size, errs, "");
  read_key(j, "candidate_pool", c.candidate_pool, errs, "");
  read_key(j, "lr", c.lr, errs, "");
  read_key(j, "encoder_lr_scale", c.encoder_lr_scale, errs, "");
  read_key(j, "lr_warmup", c.lr_warmup, errs, "");
  read_key(j, "pretrain_lr", c.pretrain_lr, errs, "");
  read_key(j, "pretrain_warmup", c.pretrain_warmup, errs, "");
  read_key(j, "weight_decay", c.weight_decay, errs, "");
  read_key(j, "seed", c.seed, errs, "");
  read_key(j, "rcs_temperature", c.rcs_temperature, errs, "");
  read_key(j, "max_empty_selections", c.max_empty_selections, errs, "");
  read_key(j, "patches", c.patches, errs, "");
  read_key(j, "mix_ratio", c.mix_ratio, errs, "");
  read_key(j, "pseudo_confidence", c.pseudo_confidence, errs, "");
  read_key(j, "tau", c.tau, errs, "");
  read_key(j, "literal_sign", c.literal_sign, errs, "");
  read_key(j, "prototype_grad", c.prototype_grad, errs, "");
  read_key(j, "marginal_decay", c.marginal_decay, errs, "");
  read_key(j, "ema_alpha", c.ema_alpha, errs, "");
  read_key(j, "eval_every", c.eval_every, errs, "");
  if (j.contains("gap_norm")) {
    try {
      c.gap_norm = gap_norm_from_string(j.at("gap_norm").get<std::string>());
    } catch (const std::exception& e) {
      errs.push_back(std::string("gap_norm: ") + e.what());
    }
  }
  if (j.contains("selection")) {
    const auto& s = j.at("selection");
    check_keys(s, {"lambda_ent", "lambda_sim", "k", "batch_budget"}, "selection.", errs);
    read_key(s, "lambda_ent", c.selection.lambda_ent, errs, "selection.");
    read_key(s, "lambda_sim", c.selection.lambda_sim, errs, "selection.");
    read_key(s, "k", c.selection.k, errs, "selection.");
    read_key(s, "batch_budget", c.selection.batch_budget, errs, "selection.");
  }
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    check_keys(w, {"ssm", "scl", "im"}, "loss_weights.", errs);
    read_key(w, "ssm", c.loss_weights.ssm, errs, "loss_weights.");
    read_key(w, "scl", c.loss_weights.scl, errs, "loss_weights.");
    read_key(w, "im", c.loss_weights.im, errs, "loss_weights.");
  }
  if (j.contains("components")) {
    const auto& w = j.at("components");
    check_keys(w, {"ssm", "patchmix", "pim"}, "components.", errs);
    read_key(w, "ssm", c.components.ssm, errs, "components.");
    read_key(w, "patchmix", c.components.patchmix, errs, "components.");
    read_key(w, "pim", c.components.pim, errs, "components.");
  }
  if (!errs.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

RareClassSampler::RareClassSampler(std::span<const LabeledSample> corpus, int num_classes, double temperature) {
  if (corpus.empty()) throw ContractError("RareClassSampler: empty corpus");
  if (!(temperature > 0.0)) throw ConfigError("rare class temperature must be > 0");
  std::vector<double> counts(num_classes, 0.0);
  double total = 0.0;
  for (const auto& s : corpus) {
    for (const auto y : s.label.data) {
      if (y == kIgnoreLabel || y >= num_classes) continue;
      counts[y] += 1.0;
      total += 1.0;
    }
  }
  freq_.resize(num_classes);
  for (int c = 0; c < num_classes; ++c) freq_[c] = total > 0.0 ? counts[c] / total : 0.0;

  std::vector<double> logits(corpus.size(), 0.0);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<std::uint8_t> seen(num_classes, 0);
    for (const auto y : corpus[i].label.data) {
      if (y != kIgnoreLabel && y < num_classes) seen[y] = 1;
    }
    double rarest = 1.0;
    for (int c = 0; c < num_classes; ++c) {
      if (seen[c]) rarest = std::min(rarest, freq_[c]);
    }
    logits[i] = std::isinf(temperature) ? 0.0 : (1.0 - rarest) / temperature;
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  probs_.resize(corpus.size());
  double z = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) z += probs_[i] = std::exp(logits[i] - m);
  cdf_.resize(corpus.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    probs_[i] /= z;
    acc += probs_[i];
    cdf_[i] = acc;
  }
}

std::size_t RareClassSampler::sample(std::uint64_t seed) const {
  Rng rng(seed);
  const double u = uniform01(rng) * cdf_.back();
  const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return std::min<std::size_t>(it - cdf_.begin(), cdf_.size() - 1);
}

const LabeledSample& rare_class_sample(std::span<const LabeledSample> corpus, const RareClassSampler& sampler,
                                       std::uint64_t seed) {
  if (sampler.probabilities().size() != corpus.size()) throw ContractError("rare_class_sample: sampler/corpus mismatch");
  return corpus[sampler.sample(seed)];
}

namespace {

constexpr std::uint64_t kPretrainStream = 0x5052455452414e31ULL;

void check_finite(const LossReport& r, int it, const char* phase) {
  if (!std::isfinite(r.total)) {
    std::ostringstream msg;
    msg << phase << " diverged at iteration " << it << ": l_ssm=" << r.l_ssm << " l_scl=" << r.l_scl
        << " l_im=" << r.l_im << " l_tgt=" << r.l_tgt;
    throw TrainingError(msg.str());
  }
}

bool all_finite(const ModelState& s) {
  for (const auto& p : s.params) {
    for (const float v : p.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

}  // namespace

PretrainResult pretrain_source(std::span<const LabeledSample> corpus, const Arch& arch, const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw ContractError("pretrain_source: empty corpus");
  PretrainResult res{init_model(arch, cfg.seed), {}};
  if (cfg.source_iters == 0) return res;
  const RareClassSampler sampler(corpus, arch.num_classes, cfg.rcs_temperature);
  AdamW opt(res.model, {cfg.pretrain_lr, cfg.encoder_lr_scale, cfg.pretrain_warmup, cfg.source_iters},
            {.weight_decay = cfg.weight_decay});
  res.losses.reserve(cfg.source_iters);
  for (int it = 0; it < cfg.source_iters; ++it) {
    const std::uint64_t iter_seed = mix_seed(cfg.seed ^ kPretrainStream, it);
    LossGraph<float> graph;
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& s = rare_class_sample(corpus, sampler, mix_seed(iter_seed, b));
      const auto t = graph.add(forward_trace(res.model, s.image));
      loss += pixel_cross_entropy(graph.output(t).probs, s.label, &graph.logits_grad(t), 1.0 / cfg.batch_size) /
              cfg.batch_size;
    }
    if (!std::isfinite(loss)) {
      throw TrainingError("source pretraining diverged at iteration " + std::to_string(it));
    }
    opt.step(res.model, backward(res.model, graph));
    res.losses.push_back(loss);
    if ((it + 1) % 200 == 0) spdlog::debug("pretrain {}/{} loss {:.4f}", it + 1, cfg.source_iters, loss);
  }
  if (!all_finite(res.model)) throw TrainingError("source pretraining produced non-finite parameters");
  return res;
}

void write_metrics_csv(std::ostream& os, std::span<const MetricsRow> rows) {
  os << "# idm metrics v" << kMetricsCsvVersion << "\n";
  os << "iteration,l_ssm,l_scl,l_im,l_pim,l_tgt,total,candidates,accepted,mean_entropy,mean_weight,"
        "bank_count,lr,miou\n";
  for (const auto& r : rows) {
    os << r.iteration << ',' << r.loss.l_ssm << ',' << r.loss.l_scl << ',' << r.loss.l_im << ','
       << r.loss.l_pim << ',' << r.loss.l_tgt << ',' << r.loss.total << ',' << r.candidates << ','
       << r.accepted << ',' << r.mean_entropy << ',' << r.mean_weight << ',' << r.bank_count << ',' << r.lr
       << ',';
    if (std::isfinite(r.miou)) os << r.miou;
    os << '\n';
  }
}

nlohmann::json RunManifest::to_json() const {
  return {{"version", version},
          {"config", idm::to_json(config)},
          {"target_image_id", target_image_id},
          {"source_model_hash", source_model_hash},
          {"gap_norm", to_string(config.gap_norm)},
          {"literal_sign", config.literal_sign},
          {"iteration_seeds", iteration_seeds}};
}

std::uint64_t hash_model(const ModelState& state) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : state.params) {
    eat(p.name.data(), p.name.size());
    eat(p.shape.data(), p.shape.size() * sizeof(int));
    eat(p.values.data(), p.values.size() * sizeof(float));
  }
  return h;
}

AdaptResult adapt_one_shot(const ModelState& source_model, std::span<const LabeledSample> corpus,
                           const OneShotTarget& target, const TrainConfig& cfg, const AdaptHooks& hooks) {
  cfg.validate();
  if (corpus.empty()) throw ContractError("adapt_one_shot: empty source corpus");
  const int C = source_model.arch.num_classes;
  const auto& x_t = target.image();
  const std::int64_t reads_before = target.reads() - 1;

  AdaptResult res;
  res.student = source_model;
  res.teacher = TeacherState::from_student(source_model, cfg.ema_alpha);
  res.manifest.config = cfg;
  res.manifest.target_image_id = target.id();
  res.manifest.source_model_hash = hash_model(source_model);

  const bool snapshots = !hooks.eval_set.empty();
  if (snapshots) res.snapshots.emplace_back(0, evaluate_model(res.student, hooks.eval_set).miou);

  const RareClassSampler sampler(corpus, C, cfg.rcs_temperature);
  const PatchGrid grid = choose_grid(x_t.height, x_t.width, cfg.patches);
  AdamW opt(res.student, {cfg.lr, cfg.encoder_lr_scale, cfg.lr_warmup, cfg.adapt_iters},
            {.weight_decay = cfg.weight_decay});
  MemoryBank bank;
  std::optional<ClassMarginal> source_marginal;
  int empty_streak = 0;

  for (int it = 0; it < cfg.adapt_iters; ++it) {
    const std::uint64_t iter_seed = mix_seed(cfg.seed, it);
    res.manifest.iteration_seeds.push_back(iter_seed);
    const ModelState teacher_net = res.teacher.snapshot();
    MetricsRow row;
    row.iteration = it;
    row.lr = opt.current_lr(false);

    // (1) candidate pool
    std::vector<StylizedSample> batch;
    std::vector<double> weights;
    if (cfg.components.ssm) {
      std::vector<StylizedSample> pool(cfg.candidate_pool);
      for (int j = 0; j < cfg.candidate_pool; ++j) {
        const auto& s = rare_class_sample(corpus, sampler, mix_seed(iter_seed, j));
        pool[j] = stylize(s, x_t, mix_seed(iter_seed, 1000 + j), cfg.gap_norm);
      }
      // (2) teacher scoring and selection
      SelectionResult sel = select_batch(pool, teacher_net, bank, cfg.selection);
      bank = sel.bank;
      row.candidates = cfg.candidate_pool;
      for (const auto& r : sel.records) row.mean_entropy += r.entropy / cfg.candidate_pool;
      for (std::size_t a = 0; a < sel.accepted.size(); ++a) {
        batch.push_back(std::move(pool[sel.accepted[a]]));
        weights.push_back(sel.weights[a]);
      }
      if (hooks.on_selection) hooks.on_selection(it, sel);
      if (batch.empty()) {
        if (++empty_streak >= cfg.max_empty_selections) {
          throw TrainingError("no source sample selected for " + std::to_string(empty_streak) +
                              " consecutive iterations; lower selection.lambda_ent, raise selection.lambda_sim "
                              "or lower selection.k");
        }
      } else {
        empty_streak = 0;
      }
    } else {
      for (int j = 0; j < cfg.batch_size; ++j) {
        const auto& s = rare_class_sample(corpus, sampler, mix_seed(iter_seed, j));
        batch.push_back({s.image, s.label, {}, s.id});
        weights.push_back(1.0);
      }
      row.candidates = cfg.batch_size;
    }
    row.accepted = static_cast<int>(batch.size());
    for (const double w : weights) row.mean_weight += w / std::max<std::size_t>(1, weights.size());
    row.bank_count = bank.count;

    // (3) pseudo label and mixing
    const LabelMap pseudo = pseudo_label(teacher_net, x_t, cfg.pseudo_confidence);
    std::vector<MixedSample> mixed;
    if (cfg.components.patchmix && !batch.empty()) {
      for (std::size_t i = 0; i < batch.size(); ++i) {
        mixed.push_back(patch_mix(batch[i], x_t, pseudo, grid, cfg.mix_ratio, mix_seed(iter_seed, 2000 + i)));
      }
    } else {
      mixed.push_back({x_t, pseudo, {}, target.id()});
    }

    // (4) student forward and objective
    LossGraph<float> graph;
    ObjectiveSpec spec;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      spec.source_traces.push_back(graph.add(forward_trace(res.student, batch[i].image)));
      spec.source_labels.push_back(batch[i].source_label);
      spec.source_weights.push_back(weights[i]);
    }
    for (const auto& m : mixed) {
      spec.target_traces.push_back(graph.add(forward_trace(res.student, m.image)));
      spec.target_labels.push_back(m.label);
    }
    if (const auto bm = batch_marginal(graph, spec.source_traces)) {
      if (!source_marginal) {
        source_marginal = bm;
      } else {
        for (int c = 0; c < C; ++c) {
          source_marginal->dist[c] =
              cfg.marginal_decay * source_marginal->dist[c] + (1.0 - cfg.marginal_decay) * bm->dist[c];
        }
      }
    }
    spec.source_marginal = source_marginal;
    spec.tau = cfg.tau;
    spec.weights = cfg.loss_weights;
    spec.use_pim = cfg.components.pim;
    spec.literal_sign = cfg.literal_sign;
    spec.prototype_grad = cfg.prototype_grad;
    row.loss = evaluate_objective(graph, spec, true);
    check_finite(row.loss, it, "adaptation");

    // (5) optimizer step, (6) teacher update
    opt.step(res.student, backward(res.student, graph));
    res.teacher = ema_update(res.teacher, res.student, cfg.ema_alpha);
    if (hooks.on_step) hooks.on_step(it, res.student, res.teacher);

    if (snapshots && ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.adapt_iters)) {
      row.miou = evaluate_model(res.student, hooks.eval_set).miou;
      res.snapshots.emplace_back(it + 1, row.miou);
    }
    if (hooks.on_row) hooks.on_row(row);
    res.metrics.push_back(row);
  }
  if (!all_finite(res.student)) throw TrainingError("adaptation produced non-finite parameters");
  res.target_reads = target.reads() - reads_before;
  res.target_ids = {target.id()};
  return res;
}

}  // namespace idm

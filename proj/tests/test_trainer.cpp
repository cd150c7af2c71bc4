#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "idm/datagen.hpp"
#include "idm/trainer.hpp"
#include "test_util.hpp"

using namespace idm;

namespace {

SceneSpec small_scene() {
  SceneSpec s;
  s.width = s.height = 16;
  s.num_classes = 4;
  s.shapes_per_image = 3;
  return s;
}

const std::vector<LabeledSample>& small_corpus() {
  static const auto corpus = generate_source(small_scene(), 12);
  return corpus;
}

TrainConfig fast_config() {
  TrainConfig c = TrainConfig::desk_scale();
  c.source_iters = 5;
  c.adapt_iters = 4;
  c.candidate_pool = 4;
  c.lr_warmup = 1;
  c.pretrain_warmup = 1;
  c.patches = 4;
  c.selection.lambda_ent = 1e-6;
  c.selection.lambda_sim = 1.0;
  c.selection.k = 1;
  c.eval_every = 2;
  return c;
}

OneShotTarget small_target() {
  DomainShift shift;
  shift.mean_offset = {0.1f, -0.1f, 0.05f};
  auto t = apply_domain_shift(generate_scenes(small_scene(), 1, "tgt", 100)[0], shift, 1);
  return OneShotTarget(t.image, t.id);
}

LabeledSample uniform_image(int cls, const std::string& id) {
  return {ImageTensor(4, 4, 3, 0.5f), LabelMap(4, 4, static_cast<std::uint8_t>(cls)), id};
}

}  // namespace

TEST(RareClass, UniformFrequenciesGiveUniformSampling) {
  std::vector<LabeledSample> corpus;
  for (int i = 0; i < 4; ++i) corpus.push_back(uniform_image(i, "u" + std::to_string(i)));
  const RareClassSampler s(corpus, 4, 0.01);
  for (const double p : s.probabilities()) EXPECT_NEAR(p, 0.25, 1e-12);
}

TEST(RareClass, HugeTemperatureFlattens) {
  std::vector<LabeledSample> corpus;
  for (int i = 0; i < 9; ++i) corpus.push_back(uniform_image(0, "a" + std::to_string(i)));
  corpus.push_back(uniform_image(1, "b"));
  const RareClassSampler s(corpus, 2, 1e12);
  for (const double p : s.probabilities()) EXPECT_NEAR(p, 0.1, 1e-9);
  const RareClassSampler inf(corpus, 2, INFINITY);
  for (const double p : inf.probabilities()) EXPECT_NEAR(p, 0.1, 1e-12);
}

TEST(RareClass, NineToOneMonteCarlo) {
  std::vector<LabeledSample> corpus;
  for (int i = 0; i < 9; ++i) corpus.push_back(uniform_image(0, "a" + std::to_string(i)));
  corpus.push_back(uniform_image(1, "b"));
  const RareClassSampler s(corpus, 2, 1.0);
  EXPECT_NEAR(s.class_frequencies()[0], 0.9, 1e-12);
  // Closed form: rare image weight exp(0.9), each common image exp(0.1).
  const double p_rare = std::exp(0.9) / (9 * std::exp(0.1) + std::exp(0.9));
  EXPECT_NEAR(s.probabilities()[9], p_rare, 1e-12);
  const int n = 10000;
  int hits = 0;
  for (int i = 0; i < n; ++i) hits += rare_class_sample(corpus, s, mix_seed(77, i)).id == "b";
  const double sigma = std::sqrt(n * p_rare * (1 - p_rare));
  EXPECT_LE(std::abs(hits - n * p_rare), 4 * sigma);
}

TEST(Pretrain, ZeroIterationsReturnsInit) {
  auto cfg = fast_config();
  cfg.source_iters = 0;
  const auto r = pretrain_source(small_corpus(), test::tiny_arch(), cfg);
  EXPECT_EQ(r.model, init_model(test::tiny_arch(), cfg.seed));
  EXPECT_TRUE(r.losses.empty());
}

TEST(Pretrain, Deterministic) {
  const auto cfg = fast_config();
  const auto a = pretrain_source(small_corpus(), test::tiny_arch(), cfg);
  const auto b = pretrain_source(small_corpus(), test::tiny_arch(), cfg);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.losses.size(), 5u);
  EXPECT_NE(a.model, init_model(test::tiny_arch(), cfg.seed));
}

TEST(Adapt, ZeroIterationsReturnsSource) {
  auto cfg = fast_config();
  cfg.adapt_iters = 0;
  const auto src = init_model(test::tiny_arch(), 3);
  const auto target = small_target();
  const auto r = adapt_one_shot(src, small_corpus(), target, cfg);
  EXPECT_EQ(r.student, src);
  EXPECT_TRUE(r.metrics.empty());
}

TEST(Adapt, ZeroLossWeightsLeaveParametersUnchanged) {
  auto cfg = fast_config();
  cfg.loss_weights = {0.0, 0.0, 0.0};
  cfg.weight_decay = 0.0;
  cfg.lr = 0.5;
  cfg.adapt_iters = 6;
  const auto src = init_model(test::tiny_arch(), 3);
  const auto target = small_target();
  const auto r = adapt_one_shot(src, small_corpus(), target, cfg);
  EXPECT_EQ(r.student, src);
  EXPECT_EQ(r.teacher.snapshot(), src);
}

TEST(Adapt, ReadsExactlyOneTargetImage) {
  const auto cfg = fast_config();
  const auto target = small_target();
  const auto r = adapt_one_shot(init_model(test::tiny_arch(), 3), small_corpus(), target, cfg);
  EXPECT_EQ(target.reads(), 1);
  EXPECT_EQ(r.target_reads, 1);
  EXPECT_EQ(r.target_ids, std::vector<std::string>{target.id()});
  EXPECT_EQ(r.manifest.target_image_id, target.id());
}

TEST(Adapt, OneRowPerIteration) {
  auto cfg = fast_config();
  cfg.adapt_iters = 5;
  int rows = 0, selections = 0;
  AdaptHooks hooks;
  hooks.on_row = [&](const MetricsRow& row) { EXPECT_EQ(row.iteration, rows++); };
  hooks.on_selection = [&](int, const SelectionResult& s) {
    ++selections;
    EXPECT_EQ(s.records.size(), 4u);
  };
  const auto eval = generate_scenes(small_scene(), 3, "ev", 500);
  hooks.eval_set = eval;
  const auto target = small_target();
  const auto r = adapt_one_shot(init_model(test::tiny_arch(), 3), small_corpus(), target, cfg, hooks);
  EXPECT_EQ(rows, 5);
  EXPECT_EQ(selections, 5);
  ASSERT_EQ(r.metrics.size(), 5u);
  EXPECT_EQ(r.manifest.iteration_seeds.size(), 5u);
  // Snapshots at 0, every eval_every iterations, and at the end.
  std::vector<int> at;
  for (const auto& s : r.snapshots) at.push_back(s.first);
  EXPECT_EQ(at, (std::vector<int>{0, 2, 4, 5}));
  EXPECT_FALSE(std::isnan(r.metrics[1].miou));
  EXPECT_TRUE(std::isnan(r.metrics[0].miou));
}

TEST(Adapt, IdenticalManifestGivesIdenticalResult) {
  const auto cfg = fast_config();
  const auto src = init_model(test::tiny_arch(), 3);
  const auto t1 = small_target();
  const auto t2 = small_target();
  const auto a = adapt_one_shot(src, small_corpus(), t1, cfg);
  const auto b = adapt_one_shot(src, small_corpus(), t2, cfg);
  EXPECT_EQ(a.manifest.to_json(), b.manifest.to_json());
  EXPECT_EQ(a.student, b.student);
  EXPECT_EQ(a.teacher.model, b.teacher.model);
  auto other = cfg;
  other.seed = 1;
  EXPECT_NE(adapt_one_shot(src, small_corpus(), t1, other).student, a.student);
}

TEST(Adapt, TeacherIsEmaOfStudentHistory) {
  auto cfg = fast_config();
  cfg.adapt_iters = 6;
  const auto src = init_model(test::tiny_arch(), 3);
  // Independent double-precision replay of t_n = a t_{n-1} + (1 - a) s_n.
  auto expected = src.cast<double>();
  double worst = 0.0;
  AdaptHooks hooks;
  hooks.on_step = [&](int, const ModelState& student, const TeacherState& teacher) {
    for (std::size_t a = 0; a < expected.params.size(); ++a) {
      for (std::size_t i = 0; i < expected.params[a].size(); ++i) {
        double& e = expected.params[a].values[i];
        e = cfg.ema_alpha * e + (1.0 - cfg.ema_alpha) * static_cast<double>(student.params[a].values[i]);
        worst = std::max(worst, std::abs(e - teacher.model.params[a].values[i]));
      }
    }
  };
  const auto target = small_target();
  adapt_one_shot(src, small_corpus(), target, cfg, hooks);
  EXPECT_LT(worst, 1e-12);
}

TEST(Adapt, AbortsAfterConsecutiveEmptySelections) {
  auto cfg = fast_config();
  cfg.selection.lambda_ent = 1.0;  // normalized entropy never exceeds 1
  cfg.adapt_iters = 60;
  cfg.max_empty_selections = 50;
  const auto target = small_target();
  try {
    adapt_one_shot(init_model(test::tiny_arch(), 3), small_corpus(), target, cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("lambda_ent"), std::string::npos);
  }
}

TEST(Adapt, AblationSwitchesRun) {
  const auto src = init_model(test::tiny_arch(), 3);
  const auto target = small_target();
  for (int mask = 0; mask < 8; ++mask) {
    auto cfg = fast_config();
    cfg.adapt_iters = 2;
    cfg.components = {(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0};
    const auto r = adapt_one_shot(src, small_corpus(), target, cfg);
    ASSERT_EQ(r.metrics.size(), 2u);
    for (const auto& row : r.metrics) {
      EXPECT_TRUE(std::isfinite(row.loss.total));
      if (!cfg.components.pim) {
        EXPECT_EQ(row.loss.l_scl, 0.0);
        EXPECT_EQ(row.loss.l_im, 0.0);
      }
      if (!cfg.components.ssm) {
        EXPECT_EQ(row.accepted, cfg.batch_size);
      }
    }
  }
}

TEST(TrainConfig, DefaultHyperparameters) {
  const TrainConfig c;
  EXPECT_EQ(c.selection.lambda_ent, 0.015);
  EXPECT_EQ(c.selection.lambda_sim, 0.5);
  EXPECT_EQ(c.selection.k, 13);
  EXPECT_EQ(c.tau, 100.0);
  EXPECT_EQ(c.patches, 96);
  EXPECT_EQ(c.batch_size, 2);
  EXPECT_EQ(c.adapt_iters, 500);
  EXPECT_EQ(c.source_iters, 40000);
  EXPECT_EQ(c.lr, 6e-4);
  EXPECT_EQ(c.encoder_lr_scale, 0.1);
  EXPECT_EQ(c.weight_decay, 0.01);
  EXPECT_EQ(c.ema_alpha, 0.999);
  EXPECT_NO_THROW(c.validate());
  EXPECT_NO_THROW(TrainConfig::desk_scale().validate());
}

TEST(TrainConfig, JsonRoundTrip) {
  auto c = TrainConfig::desk_scale();
  c.seed = 42;
  c.gap_norm = GapNorm::kPerChannel;
  c.components.patchmix = false;
  c.loss_weights.im = 0.25;
  c.literal_sign = true;
  EXPECT_EQ(train_config_from_json(to_json(c)), c);
  EXPECT_EQ(train_config_from_json(nlohmann::json::object(), c), c);
}

TEST(TrainConfig, UnknownKeyIsConfigError) {
  EXPECT_THROW(train_config_from_json({{"learning_rate", 0.1}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"selection", {{"lamda_ent", 0.1}}}}), ConfigError);
}

TEST(TrainConfig, ValidateListsEveryError) {
  TrainConfig c;
  c.lr = -1;
  c.patches = 0;
  c.tau = 0;
  try {
    c.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("lr"), std::string::npos);
    EXPECT_NE(msg.find("patches"), std::string::npos);
    EXPECT_NE(msg.find("tau"), std::string::npos);
  }
}

TEST(Metrics, CsvHeaderAndRows) {
  std::vector<MetricsRow> rows(3);
  rows[2].miou = 0.5;
  std::ostringstream os;
  write_metrics_csv(os, rows);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "# idm metrics v1");
  std::getline(is, line);
  EXPECT_EQ(line.rfind("iteration,", 0), 0u);
  int n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 3);
}

TEST(Manifest, HashTracksParameters) {
  auto m = init_model(test::tiny_arch(), 1);
  const auto h = hash_model(m);
  EXPECT_EQ(h, hash_model(init_model(test::tiny_arch(), 1)));
  m.params[0].values[0] += 1.0f;
  EXPECT_NE(h, hash_model(m));
}

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "idm/datagen.hpp"
#include "idm/selection.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace idm;

namespace {

std::vector<CandidateScore> to_scores(const std::vector<oracle::Candidate>& c) {
  std::vector<CandidateScore> out;
  for (const auto& x : c) out.push_back({x.entropy, x.output_vec, x.class_count});
  return out;
}

std::vector<std::string> ids_for(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("c" + std::to_string(i));
  return ids;
}

}  // namespace

TEST(Entropy, UniformIsOne) {
  EXPECT_NEAR(mean_entropy(Eigen::MatrixXd::Constant(8, 30, 1.0 / 8)), 1.0, 1e-12);
}

TEST(Entropy, OneHotIsZero) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(5, 12);
  for (int i = 0; i < 12; ++i) p(i % 5, i) = 1.0;
  EXPECT_EQ(mean_entropy(p), 0.0);
}

TEST(Entropy, BinaryPixels) {
  Eigen::MatrixXd half(2, 1);
  half << 0.5, 0.5;
  EXPECT_NEAR(mean_entropy(half), 1.0, 1e-12);
  Eigen::MatrixXd skew(2, 1);
  skew << 0.9, 0.1;
  EXPECT_NEAR(mean_entropy(skew), 0.469, 1e-3);
}

TEST(Entropy, MatchesOracle) {
  const auto net = init_model(test::tiny_arch(6), 3);
  const auto out = forward(net, test::random_image(9, 9, 4));
  EXPECT_NEAR(mean_entropy(out.probs), oracle::normalized_entropy(out.probs), 1e-9);
}

TEST(PredictionWeight, Values) {
  EXPECT_EQ(prediction_weight(0.015, 0.015), 0.0);
  EXPECT_EQ(prediction_weight(0.01, 0.015), 0.0);
  EXPECT_NEAR(prediction_weight(0.015 + std::log(2.0), 0.015), 2.0, 1e-12);
  EXPECT_NEAR(prediction_weight(0.5, 0.015), std::exp(0.485), 1e-12);
  EXPECT_NEAR(prediction_weight(0.5, 0.015), 1.624, 1e-3);
}

TEST(SimilarityGate, Cases) {
  SelectionConfig cfg;
  cfg.k = 2;
  MemoryBank bank;
  const std::vector<double> v{0.5, 0.5, 0.0, 0.0};
  EXPECT_EQ(similarity_gate(v, 3, bank, cfg), 1);  // cold start
  double sim = 0;
  similarity_gate(v, 3, bank, cfg, &sim);
  EXPECT_TRUE(std::isnan(sim));

  bank.fold(v);
  EXPECT_EQ(similarity_gate(v, 3, bank, cfg, &sim), 0);
  EXPECT_NEAR(sim, 1.0, 1e-12);

  const std::vector<double> w{0.0, 0.0, 0.5, 0.5};
  EXPECT_EQ(similarity_gate(w, 2, bank, cfg, &sim), 0);  // class gate is strict
  EXPECT_NEAR(sim, 0.0, 1e-12);
  EXPECT_EQ(similarity_gate(w, 3, bank, cfg), 1);
}

TEST(ClassCount, Cases) {
  EXPECT_EQ(class_count(LabelMap(4, 4, kIgnoreLabel)), 0);
  EXPECT_EQ(class_count(LabelMap(4, 4, 2)), 1);
  LabelMap m(2, 3, 0);
  m.data = {0, 3, 7, 7, kIgnoreLabel, 3};
  EXPECT_EQ(class_count(m), 3);
}

TEST(MemoryBank, RunningMeanIsArithmeticMean) {
  const auto cands = oracle::random_candidates(40, 6, 3);
  MemoryBank bank;
  std::vector<double> sum(6, 0.0);
  for (std::size_t m = 0; m < cands.size(); ++m) {
    bank.fold(cands[m].output_vec);
    for (int j = 0; j < 6; ++j) sum[j] += cands[m].output_vec[j];
    for (int j = 0; j < 6; ++j) ASSERT_NEAR(bank.mean_output[j], sum[j] / (m + 1.0), 1e-6);
  }
  EXPECT_EQ(bank.count, 40);
}

TEST(Select, AllBelowEntropyThreshold) {
  auto cands = oracle::random_candidates(10, 4, 1);
  for (auto& c : cands) c.entropy = 0.01;
  MemoryBank bank;
  bank.fold(std::vector<double>{0.1, 0.2, 0.3, 0.4});
  const auto res = select_from_scores(to_scores(cands), ids_for(10), bank, {});
  EXPECT_TRUE(res.accepted.empty());
  EXPECT_EQ(res.bank.mean_output, bank.mean_output);
  EXPECT_EQ(res.bank.count, 1);
  EXPECT_EQ(res.records.size(), 10u);
}

TEST(Select, DuplicateCandidateRejectedByCosine) {
  const auto src = generate_source({}, 1)[0];
  const auto tgt = test::random_image(64, 64, 2);
  const auto cand = stylize(src, tgt, 5);
  const std::vector<StylizedSample> pool{cand, cand};
  SelectionConfig cfg;
  cfg.lambda_ent = 1e-6;
  cfg.lambda_sim = 0.99;
  cfg.k = 1;
  const auto teacher = init_model(Arch{}, 1);
  const auto res = select_batch(pool, teacher, MemoryBank{}, cfg);
  ASSERT_EQ(res.accepted.size(), 1u);
  EXPECT_EQ(res.accepted[0], 0u);
  EXPECT_NEAR(res.records[1].similarity, 1.0, 1e-12);
  EXPECT_EQ(res.records[1].w_sim, 0);
}

TEST(Select, MatchesSequentialReplay) {
  for (const int budget : {2, 1000}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const auto cands = oracle::random_candidates(50, 8, seed);
      SelectionConfig cfg;
      cfg.lambda_ent = 0.2;
      cfg.lambda_sim = 0.9;
      cfg.k = 3;
      cfg.batch_budget = budget;
      const auto res = select_from_scores(to_scores(cands), ids_for(50), MemoryBank{}, cfg);
      const auto ref = oracle::replay_selection(cands, 0.2, 0.9, 3, budget);
      ASSERT_EQ(res.accepted, ref.accepted) << "seed " << seed;
      ASSERT_EQ(res.weights.size(), ref.weights.size());
      for (std::size_t i = 0; i < ref.weights.size(); ++i) EXPECT_NEAR(res.weights[i], ref.weights[i], 1e-9);
      if (!ref.accepted.empty()) {
        for (std::size_t j = 0; j < ref.bank_mean.size(); ++j)
          EXPECT_NEAR(res.bank.mean_output[j], ref.bank_mean[j], 1e-12);
      }
      if (budget == 1000) {
        EXPECT_GT(ref.accepted.size(), 2u);
      }
    }
  }
}

TEST(Select, GateCompositionPerRecord) {
  const auto cands = oracle::random_candidates(200, 8, 9);
  SelectionConfig cfg;
  cfg.lambda_ent = 0.3;
  cfg.lambda_sim = 0.8;
  cfg.k = 2;
  cfg.batch_budget = 1000;
  const auto res = select_from_scores(to_scores(cands), ids_for(200), MemoryBank{}, cfg);
  for (const auto& r : res.records) {
    const bool bank_ok = std::isnan(r.similarity) || r.similarity < cfg.lambda_sim;
    EXPECT_EQ(r.weight > 0.0, r.entropy > cfg.lambda_ent && r.class_count > cfg.k && bank_ok);
  }
}

TEST(Select, TeacherUntouchedAndOrderDeterministic) {
  const auto corpus = generate_source({}, 6);
  const auto tgt = test::random_image(64, 64, 7);
  std::vector<StylizedSample> pool;
  for (std::size_t i = 0; i < corpus.size(); ++i) pool.push_back(stylize(corpus[i], tgt, i));
  const auto teacher = TeacherState::from_student(init_model(Arch{}, 2), 0.999);
  const auto before = teacher.model;
  SelectionConfig cfg;
  cfg.lambda_ent = 1e-4;
  cfg.lambda_sim = 0.999;
  cfg.k = 1;
  const auto a = select_batch(pool, teacher, MemoryBank{}, cfg);
  const auto b = select_batch(pool, teacher, MemoryBank{}, cfg);
  EXPECT_EQ(teacher.model, before);
  EXPECT_EQ(a.accepted, b.accepted);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.bank.mean_output, b.bank.mean_output);
}

TEST(Select, CsvHasHeaderAndOneRowPerRecord) {
  const auto cands = oracle::random_candidates(5, 4, 2);
  const auto res = select_from_scores(to_scores(cands), ids_for(5), MemoryBank{}, {});
  std::ostringstream os;
  write_selection_csv(os, res.records);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "id,entropy,w_pred,similarity,class_count,weight,accepted");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 5);
}

TEST(SelectionConfig, InvalidValues) {
  SelectionConfig cfg;
  cfg.k = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lambda_sim = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_budget = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

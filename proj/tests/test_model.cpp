#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "idm/model.hpp"
#include "test_util.hpp"

using namespace idm;

namespace {

// Linear probe loss: sum(R .* logits) + sum(S .* features).
template <typename T>
double probe(const BasicModelState<T>& state, const ImageTensor& img, const MatX<T>& R, const MatX<T>& S) {
  const auto out = forward(state, img);
  return static_cast<double>((R.array() * out.logits.array()).sum() + (S.array() * out.features.array()).sum());
}

}  // namespace

TEST(Model, SoftmaxIsADistribution) {
  const auto state = init_model(test::tiny_arch(), 1);
  const auto out = forward(state, test::random_image(16, 16, 2));
  ASSERT_EQ(out.probs.rows(), 4);
  ASSERT_EQ(out.probs.cols(), 256);
  EXPECT_EQ(out.features.rows(), 5);
  for (Eigen::Index p = 0; p < out.probs.cols(); ++p) {
    EXPECT_NEAR(out.probs.col(p).sum(), 1.0f, 1e-5f);
    for (Eigen::Index c = 0; c < out.probs.rows(); ++c) ASSERT_GT(out.probs(c, p), 0.0f);
  }
}

TEST(Model, ZeroClassifierGivesUniform) {
  auto state = init_model(test::tiny_arch(), 1);
  for (auto& p : state.params) {
    if (p.name.rfind("cls", 0) == 0) std::fill(p.values.begin(), p.values.end(), 0.0f);
  }
  const auto out = forward(state, test::random_image(8, 8, 3));
  for (Eigen::Index i = 0; i < out.probs.size(); ++i) ASSERT_NEAR(out.probs.data()[i], 0.25f, 1e-6f);
}

TEST(Model, ForwardIsDeterministic) {
  const auto state = init_model(test::tiny_arch(), 4);
  const auto img = test::random_image(16, 16, 5);
  EXPECT_EQ(forward(state, img).logits, forward(state, img).logits);
  EXPECT_EQ(init_model(test::tiny_arch(), 4), state);
  EXPECT_NE(init_model(test::tiny_arch(), 5), state);
}

TEST(Model, OddSizesKeepResolution) {
  const auto state = init_model(test::tiny_arch(), 1);
  const auto out = forward(state, test::random_image(13, 19, 2));
  EXPECT_EQ(out.height, 13);
  EXPECT_EQ(out.width, 19);
  EXPECT_EQ(out.logits.cols(), 13 * 19);
}

TEST(Model, ChannelMismatchIsContractError) {
  const auto state = init_model(test::tiny_arch(), 1);
  ImageTensor gray(8, 8, 1, 0.5f);
  EXPECT_THROW(forward(state, gray), ContractError);
}

TEST(Model, DirectParamTermGivesOnes) {
  const auto state = init_model(test::tiny_arch(), 1).cast<double>();
  LossGraph<double> graph;
  graph.add(forward_trace(state, test::random_image(8, 8, 1)));
  const auto& w = state.params.front();
  graph.add_param_grad(w.name, std::vector<double>(w.size(), 1.0));
  const auto g = backward(state, graph);
  for (const double v : g.param(w.name).values) EXPECT_EQ(v, 1.0);
  for (std::size_t i = 1; i < g.params.size(); ++i) {
    for (const double v : g.params[i].values) ASSERT_EQ(v, 0.0) << g.params[i].name;
  }
}

TEST(Model, ConstantLossHasZeroGradient) {
  const auto state = init_model(test::tiny_arch(), 1).cast<double>();
  LossGraph<double> graph;
  graph.add(forward_trace(state, test::random_image(8, 8, 1)));
  const auto g = backward(state, graph);
  for (const auto& p : g.params) {
    for (const double v : p.values) ASSERT_EQ(v, 0.0);
  }
}

TEST(Model, MisshapedSeedIsContractError) {
  const auto state = init_model(test::tiny_arch(), 1).cast<double>();
  LossGraph<double> graph;
  graph.add(forward_trace(state, test::random_image(8, 8, 1)));
  graph.logits_grad(0) = MatX<double>::Ones(4, 10);
  EXPECT_THROW(backward(state, graph), ContractError);
}

TEST(Model, BackwardMatchesFiniteDifferences) {
  auto state = init_model(test::tiny_arch(), 3).cast<double>();
  const auto img = test::random_image(12, 10, 8);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n01;
  MatX<double> R(4, 120), S(5, 120);
  for (Eigen::Index i = 0; i < R.size(); ++i) R.data()[i] = n01(rng);
  for (Eigen::Index i = 0; i < S.size(); ++i) S.data()[i] = n01(rng);

  LossGraph<double> graph;
  graph.add(forward_trace(state, img));
  graph.logits_grad(0) = R;
  graph.features_grad(0) = S;
  const auto grads = backward(state, graph);

  // Every parameter array, a few entries each.
  int checked = 0;
  for (std::size_t a = 0; a < state.params.size(); ++a) {
    auto& p = state.params[a];
    std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
    for (int r = 0; r < 3; ++r) {
      const std::size_t i = pick(rng);
      const double orig = p.values[i];
      const double h = 1e-5;
      p.values[i] = orig + h;
      const double up = probe(state, img, R, S);
      p.values[i] = orig - h;
      const double dn = probe(state, img, R, S);
      p.values[i] = orig;
      const double fd = (up - dn) / (2 * h);
      const double an = grads.params[a].values[i];
      EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(1.0, std::abs(fd))) << p.name << "[" << i << "]";
      ++checked;
    }
  }
  EXPECT_GE(checked, 10);
}

TEST(Ema, AlphaOneKeepsTeacher) {
  const auto student = init_model(test::tiny_arch(), 1);
  const auto t0 = TeacherState::from_student(init_model(test::tiny_arch(), 2), 1.0);
  const auto t1 = ema_update(t0, student, 1.0);
  EXPECT_EQ(t1.model, t0.model);
}

TEST(Ema, AlphaZeroCopiesStudent) {
  const auto student = init_model(test::tiny_arch(), 1);
  const auto t0 = TeacherState::from_student(init_model(test::tiny_arch(), 2), 0.0);
  const auto t1 = ema_update(t0, student, 0.0);
  EXPECT_EQ(t1.snapshot(), student);
}

TEST(Ema, GeometricDecayAgainstFrozenStudent) {
  const auto student = init_model(test::tiny_arch(), 1);
  auto teacher = TeacherState::from_student(init_model(test::tiny_arch(), 2), 0.97);
  const auto dist = [&](const TeacherState& t) {
    double s = 0;
    for (std::size_t a = 0; a < student.params.size(); ++a) {
      for (std::size_t i = 0; i < student.params[a].size(); ++i) {
        s += std::pow(t.model.params[a].values[i] - static_cast<double>(student.params[a].values[i]), 2);
      }
    }
    return std::sqrt(s);
  };
  const double d0 = dist(teacher);
  for (int n = 0; n < 100; ++n) teacher = ema_update(teacher, student, 0.97);
  EXPECT_NEAR(dist(teacher), std::pow(0.97, 100) * d0, 1e-6);
}

TEST(Ema, SchemaMismatchIsContractError) {
  const auto teacher = TeacherState::from_student(init_model(test::tiny_arch(4), 1), 0.9);
  EXPECT_THROW(ema_update(teacher, init_model(test::tiny_arch(5), 1), 0.9), ContractError);
  EXPECT_THROW(ema_update(teacher, init_model(test::tiny_arch(4), 1), 1.5), ContractError);
}

TEST(PseudoLabel, ZeroLogitsTieToClassZero) {
  ForwardOutput<float> out;
  out.height = 2;
  out.width = 2;
  out.logits = MatX<float>::Zero(3, 4);
  out.probs = MatX<float>::Constant(3, 4, 1.0f / 3);
  const auto lbl = argmax_labels(out);
  for (const auto v : lbl.data) EXPECT_EQ(v, 0);
}

TEST(PseudoLabel, DominantClassWins) {
  ForwardOutput<float> out;
  out.height = 1;
  out.width = 3;
  out.logits = MatX<float>::Zero(8, 3);
  out.probs = MatX<float>::Constant(8, 3, 0.05f);
  out.probs.row(5).setConstant(0.65f);
  const auto lbl = argmax_labels(out);
  for (const auto v : lbl.data) EXPECT_EQ(v, 5);
  const auto strict = argmax_labels(out, 0.9);
  for (const auto v : strict.data) EXPECT_EQ(v, kIgnoreLabel);
}

TEST(PseudoLabel, MatchesArgmaxOracle) {
  const auto student = init_model(test::tiny_arch(), 6);
  const auto teacher = TeacherState::from_student(student, 0.99);
  const auto img = test::random_image(10, 10, 7);
  const auto lbl = pseudo_label(teacher, img);
  const auto out = forward(teacher.snapshot(), img);
  for (int p = 0; p < 100; ++p) {
    int best = 0;
    for (int c = 1; c < 4; ++c) {
      if (out.probs(c, p) > out.probs(best, p)) best = c;
    }
    ASSERT_EQ(lbl.data[p], best);
  }
}

TEST(Checkpoint, RoundTripWithTeacher) {
  const auto dir = test::temp_dir("ckpt");
  const auto student = init_model(test::tiny_arch(), 1);
  auto teacher = TeacherState::from_student(init_model(test::tiny_arch(), 2), 0.99);
  teacher = ema_update(teacher, student, 0.99);
  save_checkpoint(dir / "m.idmc", student, &teacher);
  const auto ck = load_checkpoint(dir / "m.idmc");
  EXPECT_EQ(ck.student, student);
  ASSERT_TRUE(ck.has_teacher);
  EXPECT_EQ(ck.teacher.model, teacher.model);

  save_checkpoint(dir / "s.idmc", student);
  EXPECT_FALSE(load_checkpoint(dir / "s.idmc").has_teacher);
}

TEST(Checkpoint, CorruptFileIsRejected) {
  const auto dir = test::temp_dir("ckpt_bad");
  {
    std::ofstream f(dir / "bad.idmc", std::ios::binary);
    f << "not a checkpoint";
  }
  EXPECT_ANY_THROW(load_checkpoint(dir / "bad.idmc"));
}

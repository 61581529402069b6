#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mammo/xai.hpp"
#include "occlusion_oracle.hpp"

using namespace mammo;

namespace {
BasicModel<double> small_cnn(std::uint64_t seed) {
  auto c = default_config(ModelKind::BaseCNN);
  c.input_side = 16;
  c.channels = {4, 4, 8, 8};
  c.hidden = 8;
  c.seed = seed;
  auto m = build<float>(ModelKind::BaseCNN, c);
  Rng rng(seed);
  for (auto& p : m.params)
    for (auto& v : p.tensor.mutable_data()) v += static_cast<float>(rng.uniform(-0.05, 0.05));
  return m.cast<double>();
}

TensorD image(std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  return gradcheck::rand_tensor(rng, {1, 1, side, side}, 0.0, 2.0);
}

double score(const BasicClassifier<double>& c, const TensorD& x, int cls) {
  NoGradGuard g;
  return c.forward(x, nullptr).at(static_cast<std::size_t>(cls));
}
}  // namespace

TEST(Saliency, LinearModelIsAbsWeight) {
  const std::vector<double> w{1.0, -2.0, 0.5, 0.0};
  const auto c = linear_classifier<double>(w, 0.3, 2);
  const auto m = saliency(c, TensorD::from({1, 1, 2, 2}, {3, 1, 4, 1}), 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(m.values[i], std::abs(w[i]));
}

TEST(Saliency, ConstantScorerIsZero) {
  const auto c = linear_classifier<double>(std::vector<double>(9, 0.0), 1.0, 3);
  const auto m = saliency(c, image(3, 1), 1);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(IntegratedGradients, ZeroAtBaseline) {
  const auto c = classifier_of(small_cnn(1));
  XaiConfig cfg;
  cfg.target_class = 1;
  const auto m = integrated_gradients(c, TensorD::zeros({1, 1, 16, 16}), cfg);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(IntegratedGradients, ExactOnLinearModel) {
  const auto c = linear_classifier<double>({1.0, 2.0, 3.0, 4.0}, 0.0, 2);
  XaiConfig cfg;
  cfg.target_class = 1;
  cfg.ig_steps = 7;
  const auto m = integrated_gradients(c, TensorD::full({1, 1, 2, 2}, 1.0), cfg);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(m.values[i], i + 1.0, 1e-12);
}

TEST(IntegratedGradients, CompletenessImprovesWithSteps) {
  const auto c = classifier_of(small_cnn(2));
  const auto x = image(16, 3);
  XaiConfig cfg;
  cfg.target_class = 1;
  const double delta = score(c, x, 1) - score(c, TensorD::zeros({1, 1, 16, 16}), 1);
  cfg.ig_steps = 16;
  const double e16 = std::abs(integrated_gradients(c, x, cfg).sum() - delta);
  cfg.ig_steps = 256;
  const double e256 = std::abs(integrated_gradients(c, x, cfg).sum() - delta);
  EXPECT_LE(e256, e16);
  EXPECT_LT(e256, 0.01 * std::abs(delta) + 1e-9);
}

TEST(IntegratedGradients, CustomBaselineSizeChecked) {
  const auto c = linear_classifier<double>({1, 2, 3, 4}, 0.0, 2);
  XaiConfig cfg;
  cfg.baseline = BaselineKind::Custom;
  cfg.custom_baseline = {0, 0};
  EXPECT_THROW(integrated_gradients(c, TensorD::zeros({1, 1, 2, 2}), cfg), ShapeError);
}

TEST(Occlusion, AdditiveScorer) {
  // F = Σ w_i x_i; with fill 0 a window's drop is Σ_{i in window} w_i x_i
  std::vector<double> w(16);
  for (std::size_t i = 0; i < 16; ++i) w[i] = 0.25 * static_cast<double>(i) - 1.0;
  const auto c = linear_classifier<double>(w, 0.0, 4);
  const auto x = image(4, 8);
  XaiConfig cfg;
  cfg.target_class = 1;
  cfg.occlusion_patch = 2;
  cfg.occlusion_stride = 2;
  const auto m = occlusion(c, x, cfg);
  for (std::size_t by = 0; by < 2; ++by)
    for (std::size_t bx = 0; bx < 2; ++bx) {
      double drop = 0;
      for (std::size_t y = 2 * by; y < 2 * by + 2; ++y)
        for (std::size_t xx = 2 * bx; xx < 2 * bx + 2; ++xx) drop += w[y * 4 + xx] * x.at(y * 4 + xx);
      for (std::size_t y = 2 * by; y < 2 * by + 2; ++y)
        for (std::size_t xx = 2 * bx; xx < 2 * bx + 2; ++xx) EXPECT_NEAR(m.at(xx, y), drop, 1e-12);
    }
}

TEST(Occlusion, BitEqualToBruteForce) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto c = classifier_of(small_cnn(10 + s));
    const auto x = image(16, 20 + s);
    XaiConfig cfg;
    cfg.target_class = static_cast<int>(s % 2);
    cfg.occlusion_patch = 5;
    cfg.occlusion_stride = 3;
    cfg.occlusion_fill = 0.2;
    const auto got = occlusion(c, x, cfg);
    const auto ref = oracle::occlusion_brute_force(c, x, 5, 3, 0.2, cfg.target_class);
    EXPECT_EQ(got, ref);
  }
}

TEST(Occlusion, OffsetsReachBorder) {
  EXPECT_EQ(occlusion_offsets(10, 4, 4), (std::vector<std::size_t>{0, 4, 6}));
  EXPECT_EQ(occlusion_offsets(8, 4, 2), (std::vector<std::size_t>{0, 2, 4}));
}

TEST(GradCam, ZeroGradientGivesZeroMap) {
  BasicClassifier<double> c;
  c.side = 4;
  c.has_hook = true;
  c.forward = [](const TensorD& x, ForwardTrace<double>* tr) {
    auto h = ops::relu(x);
    if (tr) tr->hook = h;
    auto s = ops::reshape(ops::scale(ops::sum(h), 0.0), {1, 1});
    return ops::concat(std::vector<TensorD>{s, s}, 1);
  };
  const auto m = gradcam(c, image(4, 1), 1);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(GradCam, NonNegativeOnCnn) {
  const auto c = classifier_of(small_cnn(4));
  GradCamDetail d;
  const auto m = gradcam(c, image(16, 2), -1, &d);
  EXPECT_EQ(m.values.size(), 256u);
  EXPECT_EQ(d.channels, 8u);
  for (double v : m.values) EXPECT_GE(v, 0.0);
}

TEST(DeepLift, EqualsIgOnLinearModel) {
  const std::vector<double> w{0.5, -1.0, 2.0, 0.25};
  const auto c = linear_classifier<double>(w, 0.1, 2);
  const auto x = TensorD::from({1, 1, 2, 2}, {1.0, 2.0, -1.0, 0.5});
  XaiConfig cfg;
  cfg.target_class = 1;
  const auto a = deeplift(c, x, cfg), b = integrated_gradients(c, x, cfg);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
}

TEST(DeepLift, SummationToDelta) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto c = classifier_of(small_cnn(30 + s));
    const auto x = image(16, 40 + s);
    XaiConfig cfg;
    cfg.target_class = 1;
    const double delta = score(c, x, 1) - score(c, TensorD::zeros({1, 1, 16, 16}), 1);
    EXPECT_NEAR(deeplift(c, x, cfg).sum(), delta, 1e-4 * std::max(1.0, std::abs(delta))) << "seed " << s;
  }
}

TEST(AttentionMap, UniformWeightsGiveConstantMap) {
  BasicClassifier<double> c;
  c.side = 8;
  c.has_attention = true;
  c.forward = [](const TensorD& x, ForwardTrace<double>* tr) {
    if (tr) {
      tr->attention = TensorD::full({1, 2, 4, 4}, 0.25);
      tr->grid_h = tr->grid_w = 2;
      tr->windows = 1;
      tr->token_cell = {0, 1, 2, 3};
    }
    auto s = ops::reshape(ops::sum(x), {1, 1});
    return ops::concat(std::vector<TensorD>{s, s}, 1);
  };
  const auto m = attention_map(c, image(8, 1));
  for (double v : m.values) EXPECT_EQ(v, m.values.front());
}

TEST(AttentionMap, CnnHasNoAttention) {
  const auto c = classifier_of(small_cnn(1));
  EXPECT_THROW(attention_map(c, image(16, 1)), XaiError);
}

TEST(AttentionMap, VitMapInUnitRange) {
  auto cfg = default_config(ModelKind::ViTLite);
  cfg.input_side = 32;
  const auto c = classifier_of(build<double>(ModelKind::ViTLite, cfg));
  const auto m = attention_map(c, image(32, 2));
  for (double v : m.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Explain, WrongInputShape) {
  const auto c = classifier_of(small_cnn(1));
  EXPECT_THROW(saliency(c, image(8, 1)), ShapeError);
}

TEST(Overlay, AffineInvariant) {
  ImageGray img(4, 4, 90);
  AttributionMap m{4, 4, {}};
  for (int i = 0; i < 16; ++i) m.values.push_back(std::sin(i));
  auto scaled = m;
  for (auto& v : scaled.values) v = 3.5 * v - 2.0;
  EXPECT_EQ(overlay(img, m), overlay(img, scaled));
}

TEST(Overlay, ConstantMapLikeZeroMap) {
  ImageGray img(3, 3, 200);
  EXPECT_EQ(overlay(img, AttributionMap{3, 3, std::vector<double>(9, 7.0)}), overlay(img, AttributionMap{3, 3, std::vector<double>(9, 0.0)}));
}

TEST(MapFile, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "mammo_test_map.map";
  AttributionMap m{2, 3, {0.5, -1, 2, 3, 4, 5}};
  write_map_raw(path, m);
  EXPECT_EQ(read_map_raw(path), m);
  std::filesystem::remove(path);
}

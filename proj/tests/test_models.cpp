#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mammo/models.hpp"

using namespace mammo;

namespace {
Model make(ModelKind k, std::uint64_t seed = 1) {
  auto c = default_config(k);
  c.seed = seed;
  return build<float>(k, c);
}

Tensor random_batch(std::size_t b, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  return gradcheck::rand_tensor(rng, {b, 1, side, side}).cast<float>();
}

AttentionParams<double> identity_params(std::size_t d, std::size_t heads) {
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
  auto I = TensorD::from({d, d}, eye);
  auto z = TensorD::zeros({d});
  return {I, z, I, TensorD{}, I, z, I, z, heads};
}
}  // namespace

class AllModels : public ::testing::TestWithParam<ModelKind> {};

TEST_P(AllModels, LogitsShape) {
  const auto m = make(GetParam());
  NoGradGuard g;
  const auto out = forward(m, random_batch(3, 64, 4));
  EXPECT_EQ(out.shape(), (Shape{3, 2}));
  for (float v : out.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST_P(AllModels, DuplicateRowsGiveDuplicateLogits) {
  const auto m = make(GetParam());
  auto one = random_batch(1, 64, 9);
  std::vector<float> two(one.data().begin(), one.data().end());
  two.insert(two.end(), one.data().begin(), one.data().end());
  NoGradGuard g;
  const auto out = forward(m, Tensor::from({2, 1, 64, 64}, two));
  EXPECT_EQ(out.at(0), out.at(2));
  EXPECT_EQ(out.at(1), out.at(3));
}

TEST_P(AllModels, WeightPerturbationChangesLogits) {
  auto m = make(GetParam());
  const auto x = random_batch(1, 64, 2);
  NoGradGuard g;
  const auto before = forward(m, x);
  for (auto& p : m.params) {
    if (p.trainable && p.decay) {
      for (auto& v : p.tensor.mutable_data()) v += 0.05f;
      break;
    }
  }
  const auto after = forward(m, x);
  EXPECT_TRUE(before.at(0) != after.at(0) || before.at(1) != after.at(1));
}

TEST_P(AllModels, GradientsMatchFiniteDifferences) { EXPECT_LT(gradcheck::check_model(GetParam(), 1, 24), 1e-3); }

TEST_P(AllModels, CheckpointRoundTrip) {
  auto m = make(GetParam(), 7);
  m.config.meta["enhancement"] = "ahe";
  const auto bytes = serialize_checkpoint(m);
  const auto back = deserialize_checkpoint(bytes, GetParam());
  EXPECT_EQ(back.kind, m.kind);
  EXPECT_EQ(back.config, m.config);
  ASSERT_EQ(back.params.size(), m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    EXPECT_EQ(back.params[i].name, m.params[i].name);
    EXPECT_TRUE(std::equal(back.params[i].tensor.data().begin(), back.params[i].tensor.data().end(), m.params[i].tensor.data().begin()));
  }
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST_P(AllModels, SameSeedSameWeights) { EXPECT_EQ(serialize_checkpoint(make(GetParam(), 3)), serialize_checkpoint(make(GetParam(), 3))); }

INSTANTIATE_TEST_SUITE_P(Kinds, AllModels, ::testing::ValuesIn(kAllModels),
                         [](const auto& info) { return std::string(model_name(info.param)); });

TEST(BaseCnn, Topology) {
  const auto m = make(ModelKind::BaseCNN);
  const std::vector<std::string> expect{"conv3x3(1->16) relu maxpool2",  "conv3x3(16->32) relu maxpool2", "conv3x3(32->64) relu maxpool2",
                                        "conv3x3(64->128) relu maxpool2", "flatten",                       "linear(2048->64) relu",
                                        "linear(64->2)"};
  EXPECT_EQ(m.topology, expect);
}

TEST(Vit, SixtyFourTokens) {
  const auto m = make(ModelKind::ViTLite);
  ForwardTrace<float> tr;
  NoGradGuard g;
  forward(m, random_batch(1, 64, 1), &tr);
  ASSERT_TRUE(tr.attention.defined());
  EXPECT_EQ(tr.attention.dim(2), 64u);
  EXPECT_EQ(tr.grid_h * tr.grid_w, 64u);
}

TEST(Config, ValidationRejectsBadHeads) {
  auto c = default_config(ModelKind::ViTLite);
  c.heads = 5;
  EXPECT_THROW(build<float>(ModelKind::ViTLite, c), ConfigError);
  EXPECT_THROW(parse_model_kind("lenet"), std::invalid_argument);
}

TEST(Attention, ZeroQueryAveragesValues) {
  Rng rng(1);
  auto q = TensorD::zeros({1, 1, 5, 3});
  auto k = gradcheck::rand_tensor(rng, {1, 1, 5, 3});
  auto v = gradcheck::rand_tensor(rng, {1, 1, 5, 3});
  const auto out = scaled_dot_attention(q, k, v);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t d = 0; d < 3; ++d) {
      double mean = 0;
      for (std::size_t j = 0; j < 5; ++j) mean += v.at(j * 3 + d) / 5.0;
      EXPECT_NEAR(out.at(i * 3 + d), mean, 1e-12);
    }
}

TEST(Attention, SingleTokenReturnsValue) {
  Rng rng(2);
  auto q = gradcheck::rand_tensor(rng, {2, 2, 1, 4});
  auto k = gradcheck::rand_tensor(rng, {2, 2, 1, 4});
  auto v = gradcheck::rand_tensor(rng, {2, 2, 1, 4});
  const auto out = scaled_dot_attention(q, k, v);
  for (std::size_t i = 0; i < v.numel(); ++i) EXPECT_NEAR(out.at(i), v.at(i), 1e-12);
}

TEST(Attention, TwoTokensByHand) {
  auto q = TensorD::from({1, 1, 2, 2}, {1, 0, 0, 1});
  auto k = TensorD::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto v = TensorD::from({1, 1, 2, 2}, {10, 20, 30, 40});
  TensorD w;
  const auto out = scaled_dot_attention(q, k, v, static_cast<const TensorD*>(nullptr), &w);
  const double s = std::sqrt(2.0);
  // row 0 scores (1, 3)/√2, row 1 scores (2, 4)/√2
  const double a0 = 1.0 / (1.0 + std::exp(2.0 / s)), a1 = 1.0 / (1.0 + std::exp(2.0 / s));
  EXPECT_NEAR(out.at(0), a0 * 10 + (1 - a0) * 30, 1e-5);
  EXPECT_NEAR(out.at(1), a0 * 20 + (1 - a0) * 40, 1e-5);
  EXPECT_NEAR(out.at(2), a1 * 10 + (1 - a1) * 30, 1e-5);
  EXPECT_NEAR(out.at(3), a1 * 20 + (1 - a1) * 40, 1e-5);
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(w.at(2 * r) + w.at(2 * r + 1), 1.0, 1e-12);
}

TEST(Attention, RowsSumToOne) {
  const auto m = make(ModelKind::SwinLite);
  ForwardTrace<float> tr;
  NoGradGuard g;
  forward(m, random_batch(1, 64, 5), &tr);
  const std::size_t n = tr.attention.dim(2), rows = tr.attention.numel() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += tr.attention.at(r * n + j);
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(WindowAttention, Locality) {
  Rng rng(3);
  auto x = gradcheck::rand_tensor(rng, {1, 4, 4, 4});
  const auto p = identity_params(4, 2);
  const auto base = shifted_window_attention(x, 2, 0, p);
  auto x2 = x.detach();
  for (std::size_t c = 0; c < 4; ++c) x2.mutable_data()[(0 * 4 + 0) * 4 + c] += 1.0;  // token (0,0), window (0,0)
  const auto out = shifted_window_attention(x2, 2, 0, p);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t xx = 0; xx < 4; ++xx) {
      if (y < 2 && xx < 2) continue;
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.at((y * 4 + xx) * 4 + c), base.at((y * 4 + xx) * 4 + c));
    }
}

TEST(WindowAttention, OneWindowIsPlainAttention) {
  Rng rng(4);
  auto x = gradcheck::rand_tensor(rng, {2, 3, 3, 6});
  AttentionParams<double> p{gradcheck::rand_tensor(rng, {6, 6}), gradcheck::rand_tensor(rng, {6}), gradcheck::rand_tensor(rng, {6, 6}), TensorD{},
                            gradcheck::rand_tensor(rng, {6, 6}), gradcheck::rand_tensor(rng, {6}), gradcheck::rand_tensor(rng, {6, 6}),
                            gradcheck::rand_tensor(rng, {6}), 2};
  const auto win = shifted_window_attention(x, 3, 0, p);
  const auto plain = multi_head_attention(ops::reshape(x, {2, 9, 6}), p);
  for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(win.at(i), plain.at(i), 1e-12);
}

TEST(WindowAttention, ShiftMustBeSmallerThanWindow) {
  auto x = TensorD::zeros({1, 4, 4, 4});
  EXPECT_THROW(shifted_window_attention(x, 2, 2, identity_params(4, 1)), AttributeError);
}

TEST(Residual, ZeroInnerWeightsIsIdentity) {
  auto m = make(ModelKind::ResNetLite);
  for (const char* n : {"s0.b0.conv2.weight", "s0.b0.conv2.bias"})
    for (auto& v : m.param(n).mutable_data()) v = 0.0f;
  Rng rng(6);
  auto x = gradcheck::rand_tensor(rng, {2, 16, 8, 8}).cast<float>();
  const auto y = residual_block(m, "s0.b0", x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST(Checkpoint, TruncatedIsRejected) {
  const auto bytes = serialize_checkpoint(make(ModelKind::BaseCNN));
  for (std::size_t cut : {std::size_t{2}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      deserialize_checkpoint(bytes.substr(0, cut));
      FAIL() << "accepted truncation at " << cut;
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.code(), CheckpointError::Code::Truncated) << cut;
    }
  }
}

TEST(Checkpoint, CorruptHeader) {
  auto bytes = serialize_checkpoint(make(ModelKind::ConvNeXtLite));
  auto bad = bytes;
  bad[0] = 'X';
  try {
    deserialize_checkpoint(bad);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointError::Code::BadMagic);
  }
  bad = bytes;
  bad[4] = 9;
  try {
    deserialize_checkpoint(bad);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointError::Code::VersionMismatch);
  }
}

TEST(Checkpoint, KindMismatch) {
  const auto bytes = serialize_checkpoint(make(ModelKind::ViTLite));
  try {
    deserialize_checkpoint(bytes, ModelKind::SwinLite);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointError::Code::KindMismatch);
  }
}

TEST(Checkpoint, MissingFile) {
  try {
    load_checkpoint("/nonexistent/dir/model.mmfw");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), CheckpointError::Code::Io);
  }
}

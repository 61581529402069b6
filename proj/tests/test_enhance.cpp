#include <gtest/gtest.h>

#include <limits>
#include <numeric>

#include "mammo/enhance.hpp"
#include "oracles.hpp"

using namespace mammo;

TEST(Negative, Value) {
  ImageGray img(1, 1, 100);
  EXPECT_EQ(negative(img).pixels[0], 155);
}

TEST(Negative, Involution) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto img = oracle::random_image(s, 17, 23);
    EXPECT_EQ(negative(negative(img)), img);
  }
}

TEST(Enhance, OriginalIsBitIdentical) {
  const auto img = oracle::random_image(4, 32, 32);
  EXPECT_EQ(enhance(img, EnhancementKind::Original), img);
}

TEST(Enhance, ParseNames) {
  EXPECT_EQ(parse_enhancement("ahe"), EnhancementKind::AHE);
  EXPECT_EQ(parse_enhancement("neg"), EnhancementKind::Negative);
  EXPECT_THROW(parse_enhancement("sharpen"), std::invalid_argument);
}

namespace {
AheParams global_params() {
  AheParams p;
  p.tile_rows = p.tile_cols = 1;
  p.clip_limit = std::numeric_limits<double>::infinity();
  return p;
}
}  // namespace

TEST(Ahe, RampBarelyMoves) {
  ImageGray img(256, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 256; ++x) img.at(x, y) = static_cast<std::uint8_t>(x);
  const auto out = ahe(img, global_params());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_LE(std::abs(int(out.pixels[i]) - int(img.pixels[i])), 2);
}

TEST(Ahe, SingleTileInfiniteClipIsGlobalHe) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto img = oracle::random_image(s, 40, 33, static_cast<int>(s), 200);
    EXPECT_EQ(ahe(img, global_params()), oracle::global_he(img)) << "seed " << s;
  }
}

TEST(Ahe, ConstantImageIsFixedPoint) {
  for (int v : {0, 1, 77, 128, 254, 255}) {
    ImageGray img(64, 64, static_cast<std::uint8_t>(v));
    EXPECT_EQ(ahe(img), img);
    EXPECT_EQ(ahe(img, global_params()), img);
  }
}

TEST(Ahe, StretchesLowContrast) {
  const auto img = oracle::random_image(11, 128, 128, 100, 130);
  AheParams p;
  p.clip_limit = 4.0;
  const auto out = ahe(img, p);
  EXPECT_LE(*std::min_element(out.pixels.begin(), out.pixels.end()), 10);
  EXPECT_GE(*std::max_element(out.pixels.begin(), out.pixels.end()), 245);
}

TEST(Ahe, RejectsBadParams) {
  ImageGray img(16, 16);
  AheParams p;
  p.clip_limit = 0.5;
  EXPECT_THROW(ahe(img, p), std::invalid_argument);
  p = {};
  p.tile_rows = 0;
  EXPECT_THROW(ahe(img, p), std::invalid_argument);
}

TEST(Hog, VerticalEdgeVotesHorizontalGradient) {
  ImageGray img(32, 32);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 16; x < 32; ++x) img.at(x, y) = 255;
  std::size_t cy = 0, cx = 0;
  const auto h = hog_cell_histograms(img, HogParams{}, cy, cx);
  double total = 0, bin0 = 0;
  for (std::size_t c = 0; c < cy * cx; ++c) {
    bin0 += h[c * 9];
    total += std::accumulate(h.begin() + static_cast<long>(c * 9), h.begin() + static_cast<long>(c * 9 + 9), 0.0);
  }
  ASSERT_GT(total, 0);
  EXPECT_GE(bin0 / total, 0.95);
}

TEST(Hog, MatchesReference) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto img = oracle::random_image(1000 + s, 32, 32);
    const auto d = hog_descriptor(img);
    const auto ref = oracle::hog(img);
    ASSERT_EQ(d.values.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(d.values[i], ref[i], 1e-6) << "seed " << s << " index " << i;
  }
}

TEST(Hog, TranslationByOneCell) {
  const auto a = oracle::random_image(77, 64, 64);
  ImageGray b(64, 64, 9);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 8; x < 64; ++x) b.at(x, y) = a.at(x - 8, y);
  const auto da = hog_descriptor(a), db = hog_descriptor(b);
  const std::size_t len = 2 * 2 * 9;
  for (std::size_t by = 0; by < da.blocks_y; ++by)
    for (std::size_t bx = 2; bx + 2 < db.blocks_x; ++bx)
      for (std::size_t e = 0; e < len; ++e)
        EXPECT_NEAR(db.values[(by * db.blocks_x + bx) * len + e], da.values[(by * da.blocks_x + bx - 1) * len + e], 1e-6);
}

TEST(HogRender, ZeroDescriptorRendersBlack) {
  HogDescriptor d{7, 7, 2, 9, std::vector<double>(7 * 7 * 36, 0.0)};
  const auto img = hog_render(d, HogParams{}, 64, 64);
  EXPECT_EQ(img, ImageGray(64, 64));
}

TEST(HogRender, GlyphStaysInItsCell) {
  HogDescriptor d{7, 7, 2, 9, std::vector<double>(7 * 7 * 36, 0.0)};
  d.values[3] = 1.0;  // block (0,0), cell (0,0), bin 3
  const auto img = hog_render(d, HogParams{}, 64, 64);
  std::size_t lit = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      if (img.at(x, y) > 0) {
        ++lit;
        EXPECT_LT(x, 8u);
        EXPECT_LT(y, 8u);
      }
  EXPECT_GT(lit, 0u);
}

TEST(HogRender, OutputSizeMatchesInput) {
  const auto img = oracle::random_image(3, 64, 48);
  const auto out = enhance(img, EnhancementKind::HOG);
  EXPECT_EQ(out.width, 64u);
  EXPECT_EQ(out.height, 48u);
}

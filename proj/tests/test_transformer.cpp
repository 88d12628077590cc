#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "d2v/encoder.hpp"

using namespace d2v;

namespace {

using Mat = std::vector<std::vector<double>>;

template <class Real>
Tensor<Real> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.normal() * scale);
  return Tensor<Real>(std::move(shape), std::move(v));
}

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

// Straight-line reference: plain loops over nested vectors, no shared helpers.
Mat ref_affine(const Mat& x, const Tensor<double>& w, const Tensor<double>& b) {
  Mat y(x.size(), std::vector<double>(w.dim(1)));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w.dim(1); ++j) {
      double acc = b[j];
      for (std::size_t p = 0; p < w.dim(0); ++p) acc += x[i][p] * w.at(p, j);
      y[i][j] = acc;
    }
  return y;
}

Mat ref_layer_norm(const Mat& x, const Tensor<double>& g, const Tensor<double>& s) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v;
    mu /= double(x[i].size());
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= double(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * g[j] + s[j];
  }
  return y;
}

Mat ref_add(const Mat& a, const Mat& b) {
  Mat y = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) y[i][j] += b[i][j];
  return y;
}

struct RefBlock {
  Mat attn, ffn, out;
};

RefBlock ref_block(const Mat& x, const BlockParams<double>& b, std::size_t heads) {
  const std::size_t t = x.size(), h = x[0].size(), d = h / heads;
  Mat qkv = ref_affine(ref_layer_norm(x, b.ln1_gain, b.ln1_shift), b.qkv_w, b.qkv_b);
  Mat merged(t, std::vector<double>(h, 0.0));
  for (std::size_t head = 0; head < heads; ++head) {
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> score(t);
      double mx = -1e300;
      for (std::size_t j = 0; j < t; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += qkv[i][head * d + c] * qkv[j][h + head * d + c];
        score[j] = dot / std::sqrt(double(d));
        mx = std::max(mx, score[j]);
      }
      double z = 0;
      for (auto& s : score) z += (s = std::exp(s - mx));
      for (std::size_t j = 0; j < t; ++j)
        for (std::size_t c = 0; c < d; ++c) merged[i][head * d + c] += score[j] / z * qkv[j][2 * h + head * d + c];
    }
  }
  RefBlock r;
  r.attn = ref_affine(merged, b.out_w, b.out_b);
  Mat mid = ref_add(x, r.attn);
  Mat inner = ref_affine(ref_layer_norm(mid, b.ln2_gain, b.ln2_shift), b.ffn1_w, b.ffn1_b);
  for (auto& row : inner)
    for (auto& v : row) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  r.ffn = ref_affine(inner, b.ffn2_w, b.ffn2_b);
  r.out = ref_add(mid, r.ffn);
  return r;
}

void expect_close(const Tensor<double>& got, const Mat& want, double tol) {
  ASSERT_EQ(got.dim(0), want.size());
  for (std::size_t i = 0; i < want.size(); ++i)
    for (std::size_t j = 0; j < want[i].size(); ++j) EXPECT_NEAR(got.at(i, j), want[i][j], tol) << i << "," << j;
}

// Perturbs every parameter so gains/biases are not trivially 1/0.
void jitter(EncoderParams<double>& p, Rng& rng) {
  for (auto& [name, t] : p.parameters())
    for (auto& v : Tensor<double>(t).mutable_data()) v += 0.3 * rng.normal();
}

}  // namespace

TEST(Encoder, ZeroWeightsPassInputThrough) {
  EncoderConfig cfg{.layers = 1, .hidden = 8, .heads = 2};
  auto params = EncoderParams<double>::init(cfg, Rng(1));
  for (auto& [name, t] : params.parameters())
    for (auto& v : Tensor<double>(t).mutable_data()) v = 0;
  Rng rng(2);
  auto x = random_tensor<double>({5, 8}, rng);
  auto out = encode(params, cfg, x, Tensor<double>::zeros({5, 8}), true);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.final[i], x[i]);
}

TEST(Encoder, FinalIsLastBlockOut) {
  EncoderConfig cfg{.layers = 3, .hidden = 8, .heads = 2};
  auto params = EncoderParams<float>::init(cfg, Rng(4));
  Rng rng(3);
  auto out = encode(params, cfg, random_tensor<float>({6, 8}, rng), random_tensor<float>({6, 8}, rng), true);
  ASSERT_EQ(out.taps.blocks(), 3u);
  EXPECT_TRUE(out.final.same_storage(out.taps.block_out.back()));
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(out.taps.attn_out[l].shape(), (Shape{6, 8}));
    EXPECT_EQ(out.taps.ffn_out[l].shape(), (Shape{6, 8}));
  }
}

TEST(Encoder, TwoBlockModelMatchesStraightLineReference) {
  EncoderConfig cfg{.layers = 2, .hidden = 6, .heads = 3, .ffn_mult = 2};
  auto params = EncoderParams<double>::init(cfg, Rng(8));
  Rng rng(9);
  jitter(params, rng);
  auto x = random_tensor<double>({4, 6}, rng);
  auto pos = random_tensor<double>({4, 6}, rng, 0.5);
  auto out = encode(params, cfg, x, pos, true);

  Mat h = ref_add(to_mat(x), to_mat(pos));
  for (std::size_t l = 0; l < 2; ++l) {
    auto r = ref_block(h, params.blocks[l], cfg.heads);
    expect_close(out.taps.attn_out[l], r.attn, 1e-12);
    expect_close(out.taps.ffn_out[l], r.ffn, 1e-12);
    expect_close(out.taps.block_out[l], r.out, 1e-12);
    h = r.out;
  }
}

TEST(Encoder, PermutationEquivariantWithoutPositions) {
  EncoderConfig cfg{.layers = 2, .hidden = 8, .heads = 2};
  auto params = EncoderParams<double>::init(cfg, Rng(5));
  Rng rng(6);
  jitter(params, rng);
  auto x = random_tensor<double>({5, 8}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto xp = gather_rows(x, std::span<const std::size_t>(perm));
  auto zero = Tensor<double>::zeros({5, 8});
  auto y = encode(params, cfg, x, zero, false).final;
  auto yp = encode(params, cfg, xp, zero, false).final;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(yp.at(i, j), y.at(perm[i], j), 1e-12);
}

TEST(Encoder, DeterministicWithoutDropout) {
  EncoderConfig cfg{.layers = 2, .hidden = 8, .heads = 2};
  auto params = EncoderParams<float>::init(cfg, Rng(5));
  Rng rng(6);
  auto x = random_tensor<float>({7, 8}, rng);
  auto pos = random_tensor<float>({7, 8}, rng);
  auto a = encode(params, cfg, x, pos, false).final;
  auto b = encode(params, cfg, x, pos, false).final;
  EXPECT_EQ(a.values(), b.values());
}

TEST(Encoder, TooLongSequenceIsConfigError) {
  EncoderConfig cfg{.layers = 1, .hidden = 4, .heads = 1, .max_positions = 3};
  auto params = EncoderParams<float>::init(cfg, Rng(1));
  EXPECT_THROW(encode(params, cfg, Tensor<float>::zeros({4, 4}), Tensor<float>::zeros({4, 4}), false), ConfigError);
}

TEST(Encoder, ConfigValidation) {
  EXPECT_THROW((EncoderConfig{.hidden = 10, .heads = 3}.validate()), ConfigError);
  EXPECT_THROW((EncoderConfig{.layers = 0}.validate()), ConfigError);
  EXPECT_THROW((EncoderConfig{.dropout = 1.0}.validate()), ConfigError);
}

TEST(Encoder, TrainingModeUsesRng) {
  EncoderConfig cfg{.layers = 2, .hidden = 8, .heads = 2, .dropout = 0.5};
  auto params = EncoderParams<double>::init(cfg, Rng(5));
  Rng rng(6);
  auto x = random_tensor<double>({5, 8}, rng);
  auto zero = Tensor<double>::zeros({5, 8});
  Rng r1(1), r2(1), r3(2);
  auto a = encode(params, cfg, x, zero, false, {true, &r1}).final;
  auto b = encode(params, cfg, x, zero, false, {true, &r2}).final;
  auto c = encode(params, cfg, x, zero, false, {true, &r3}).final;
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), c.values());
  EXPECT_THROW(encode(params, cfg, x, zero, false, {true, nullptr}), StateError);
}

TEST(MaskToken, EmptyPlanIsIdentity) {
  Rng rng(1);
  auto x = random_tensor<float>({4, 3}, rng);
  MaskPlan plan;
  plan.length = 4;
  auto y = substitute_mask_token(x, plan, Tensor<float>::full({3}, 9.f));
  EXPECT_EQ(y.values(), x.values());
}

TEST(MaskToken, AllMaskedRowsEqualEmbedding) {
  Rng rng(1);
  auto x = random_tensor<float>({4, 3}, rng);
  auto mask = random_tensor<float>({3}, rng);
  auto y = substitute_mask_token(x, MaskPlan::from_flags({1, 1, 1, 1}), mask);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y.at(i, j), mask[j]);
}

TEST(MaskToken, KeepRowsMatchDirectAssignment) {
  Rng rng(3);
  auto x = random_tensor<double>({50, 4}, rng);
  auto mask = random_tensor<double>({4}, rng);
  auto plan = token_mask(50, 0.6, rng, {{0.5, 0.3, 0.2}, 2, 9});
  auto y = substitute_mask_token(x, plan, mask);
  auto expected = x.values();
  for (std::size_t i = 0; i < plan.count(); ++i)
    if (plan.actions[i] == MaskAction::ReplaceMask)
      for (std::size_t j = 0; j < 4; ++j) expected[plan.masked[i] * 4 + j] = mask[j];
  EXPECT_EQ(y.values(), expected);
}

TEST(MaskToken, LengthMismatchIsStateError) {
  auto x = Tensor<float>::zeros({4, 3});
  EXPECT_THROW(substitute_mask_token(x, MaskPlan::from_flags({1, 0}), Tensor<float>::zeros({3})), StateError);
}

TEST(MaskToken, GradientReachesMaskEmbedding) {
  Rng rng(3);
  auto x = random_tensor<double>({4, 3}, rng);
  auto mask = Tensor<double>({3}, {0.1, 0.2, 0.3}, true);
  Graph<double> g;
  GraphScope<double> scope(g);
  auto y = substitute_mask_token(x, MaskPlan::from_flags({1, 0, 1, 0}), mask);
  g.backward(sum(y));
  for (double v : mask.grad()) EXPECT_DOUBLE_EQ(v, 2.0);
}

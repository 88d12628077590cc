#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "d2v/frontends.hpp"

using namespace d2v;

namespace {

std::vector<float> random_values(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

Vocabulary small_vocab() { return Vocabulary({"<pad>", "<mask>", "<unk>", "the", "cat", "a", "b", "c"}); }

}  // namespace

TEST(ImageSpec, SequenceLengths) {
  EXPECT_EQ((ImageSpec{224, 16, 3}.sequence_length()), 196u);
  EXPECT_EQ((ImageSpec{32, 4, 3}.sequence_length()), 64u);
  EXPECT_THROW((ImageSpec{30, 4, 3}.validate()), ConfigError);
}

TEST(Patchify, ExtractionRoundTrips) {
  ImageSpec spec{12, 4, 3};
  Rng rng(1);
  auto image = random_values(3 * 12 * 12, rng);
  auto patches = extract_patches(image, spec);
  EXPECT_EQ(assemble_patches(patches, spec), image);
}

TEST(Patchify, PatchRowLayout) {
  ImageSpec spec{4, 2, 1};
  std::vector<float> image(16);
  for (std::size_t i = 0; i < 16; ++i) image[i] = float(i);
  auto patches = extract_patches(image, spec);
  // Second patch in raster order covers rows 0-1, columns 2-3.
  EXPECT_EQ(std::vector<float>(patches.begin() + 4, patches.begin() + 8), (std::vector<float>{2, 3, 6, 7}));
}

TEST(Patchify, ConstantImageGivesEqualRows) {
  ImageSpec spec{8, 4, 3};
  ImageFrontend<double> fe(spec, 6, Rng(3));
  Sample s;
  s.values.assign(3 * 8 * 8, 0.7f);
  auto y = fe.embed(s);
  ASSERT_EQ(y.shape(), (Shape{4, 6}));
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(y.at(i, j), y.at(0, j));
}

TEST(Patchify, DimensionMismatchIsConfigError) {
  ImageSpec spec{8, 4, 3};
  ImageFrontend<float> fe(spec, 6, Rng(3));
  Sample s;
  s.values.assign(10, 1.f);
  EXPECT_THROW(fe.embed(s), ConfigError);
  EXPECT_THROW(patchify(Tensor<float>::zeros({3, 4, 4}), spec, Tensor<float>::zeros({48, 6}), Tensor<float>::zeros({6})),
               ConfigError);
}

TEST(AudioSpec, PaperStackGeometry) {
  AudioSpec spec;
  EXPECT_EQ(spec.total_stride(), 320u);
  EXPECT_EQ(spec.receptive_field(), 400u);
  EXPECT_EQ(spec.output_length(400), 1u);
  EXPECT_EQ(spec.output_length(16000), 49u);
}

TEST(AudioSpec, OutputLengthMonotone) {
  AudioSpec spec;
  std::size_t prev = 0;
  for (std::size_t n = 400; n < 5000; ++n) {
    const std::size_t t = spec.output_length(n);
    ASSERT_GE(t, prev);
    prev = t;
  }
}

TEST(SpeechFrontend, FrameCountAndWidth) {
  AudioSpec spec;
  spec.channels = 4;
  SpeechFrontend<float> fe(spec, 8, Rng(2));
  Rng rng(5);
  Sample s;
  s.values = normalize_waveform(random_values(400 + 320 * 9, rng));
  auto y = fe.embed(s);
  EXPECT_EQ(y.shape(), (Shape{10, 8}));
  EXPECT_EQ(fe.sequence_length(s), 10u);
}

TEST(SpeechFrontend, ShortInputIsInputError) {
  AudioSpec spec;
  spec.channels = 2;
  SpeechFrontend<float> fe(spec, 4, Rng(2));
  Sample s;
  s.values.assign(399, 0.5f);
  EXPECT_THROW(fe.embed(s), InputError);
}

TEST(Waveform, NormalizationExamples) {
  auto a = normalize_waveform(Tensor<double>({2}, {1, -1}));
  EXPECT_DOUBLE_EQ(a[0], 1.0);
  EXPECT_DOUBLE_EQ(a[1], -1.0);
  auto b = normalize_waveform(Tensor<double>({2}, {2, 4}));
  EXPECT_DOUBLE_EQ(b[0], -1.0);
  EXPECT_DOUBLE_EQ(b[1], 1.0);
}

TEST(Waveform, RandomSignalPostConditions) {
  Rng rng(12);
  std::vector<double> raw(16000);
  for (auto& x : raw) x = 3.0 + 2.5 * rng.normal();
  auto y = normalize_waveform(Tensor<double>({16000}, raw));
  double mu = 0, var = 0;
  for (double v : y.data()) mu += v;
  mu /= 16000;
  for (double v : y.data()) var += (v - mu) * (v - mu);
  var /= 16000;
  EXPECT_LT(std::abs(mu), 1e-6);
  EXPECT_NEAR(var, 1.0, 1e-5);
}

TEST(Waveform, DegenerateInputsRejected) {
  EXPECT_THROW(normalize_waveform(Tensor<float>({3}, {1, 1, 1})), InputError);
  EXPECT_THROW(normalize_waveform(Tensor<float>({1}, {1})), InputError);
}

TEST(TextFrontend, LookupMatchesTableScan) {
  TextFrontend<double> fe({small_vocab(), 16}, 5, Rng(4));
  Sample s;
  s.tokens = {3, 4, 3, 7};
  auto y = fe.embed(s);
  ASSERT_EQ(y.shape(), (Shape{4, 5}));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y.at(t, j), fe.table().at(s.tokens[t], j));
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(y.at(0, j), y.at(2, j));
}

TEST(TextFrontend, InvalidInputs) {
  TextFrontend<float> fe({small_vocab(), 3}, 4, Rng(4));
  Sample s;
  s.tokens = {3, 99};
  EXPECT_THROW(fe.embed(s), InputError);
  s.tokens = {3, 3, 3, 3};
  EXPECT_THROW(fe.embed(s), InputError);
  s.tokens.clear();
  EXPECT_THROW(fe.embed(s), InputError);
}

TEST(Vocabulary, ReservedIdsAndTokenize) {
  auto v = small_vocab();
  EXPECT_EQ(v.pad_id(), 0);
  EXPECT_EQ(v.mask_id(), 1);
  EXPECT_EQ(v.unk_id(), 2);
  EXPECT_EQ(v.first_regular(), 3);
  EXPECT_EQ(v.tokenize("the cat  abz"), (std::vector<int>{3, 4, 5, 6, 2}));
}

TEST(Vocabulary, FileLoadAndValidation) {
  const std::string path = ::testing::TempDir() + "d2v_vocab.txt";
  {
    std::ofstream out(path);
    out << "<pad>\n<mask>\nx\ny\n";
  }
  auto v = Vocabulary::from_file(path);
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.unk_id(), -1);
  EXPECT_EQ(v.find("y"), 3);
  EXPECT_THROW(v.tokenize("xz"), InputError);
  std::remove(path.c_str());
  EXPECT_THROW(Vocabulary({"a", "<mask>", "b"}), ConfigError);
  EXPECT_THROW(Vocabulary::from_file(path), InputError);
}

TEST(Frontends, SharedParametersReceiveGradient) {
  ImageSpec spec{8, 4, 1};
  ImageFrontend<double> fe(spec, 3, Rng(3));
  Rng rng(1);
  Sample s;
  s.values = random_values(64, rng);
  Graph<double> g;
  GraphScope<double> scope(g);
  g.backward(sum(fe.embed(s)));
  for (const auto& [name, p] : fe.parameters()) EXPECT_TRUE(p.has_grad()) << name;
}

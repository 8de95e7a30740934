#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "selfdenoise/config.hpp"
#include "selfdenoise/corpus_io.hpp"
#include "selfdenoise/inference.hpp"
#include "selfdenoise/io.hpp"
#include "test_support.hpp"

using namespace selfdenoise;
using selfdenoise::testing::random_tensor;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("selfdenoise_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

ModelConfig small_config() {
  ModelConfig c;
  c.input_size = 32;
  c.stages = 2;
  c.base_width = 3;
  c.bottleneck_channels = 2;
  return c;
}

}  // namespace

TEST(Pgm, RoundTripWithin16BitQuantisation) {
  TempDir dir;
  auto img = random_tensor<float>(Shape{1, 7, 11}, 1, 0, 1);
  img[0] = 0, img[1] = 1;
  write_pgm16(dir.path() / "a.pgm", img);
  const auto back = read_pgm(dir.path() / "a.pgm");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 65535 + 1e-7);
  EXPECT_EQ(back[0], 0.0f);
  EXPECT_EQ(back[1], 1.0f);
  write_pgm16(dir.path() / "b.pgm", back);
  EXPECT_EQ(read_bytes(dir.path() / "a.pgm"), read_bytes(dir.path() / "b.pgm"));
}

TEST(Pgm, EightBitAndComments) {
  TempDir dir;
  {
    std::ofstream os(dir.path() / "g.pgm", std::ios::binary);
    os << "P5\n# made by hand\n3 2\n255\n";
    const unsigned char px[6] = {0, 51, 102, 153, 204, 255};
    os.write(reinterpret_cast<const char*>(px), 6);
  }
  const auto img = read_pgm(dir.path() / "g.pgm");
  ASSERT_EQ(img.shape(), (Shape{1, 2, 3}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(img[i], 0.2 * double(i), 1e-7);
}

TEST(Pgm, Errors) {
  TempDir dir;
  EXPECT_THROW(read_pgm(dir.path() / "missing.pgm"), DataError);
  write_bytes(dir.path() / "p2.pgm", {'P', '2', '\n', '1', ' ', '1', '\n', '9', '\n', '0'});
  EXPECT_THROW(read_pgm(dir.path() / "p2.pgm"), DataError);
  write_pgm16(dir.path() / "t.pgm", Tensor<float>(Shape{1, 4, 4}, 0.5f));
  auto b = read_bytes(dir.path() / "t.pgm");
  b.resize(b.size() - 3);
  write_bytes(dir.path() / "t.pgm", b);
  EXPECT_THROW(read_pgm(dir.path() / "t.pgm"), DataError);
  EXPECT_THROW(write_pgm16(dir.path() / "rgb.pgm", Tensor<float>(Shape{3, 4, 4})), DataError);
}

TEST(Png, GreyAndColourRoundTrip) {
  TempDir dir;
  for (std::size_t C : {1u, 3u}) {
    auto img = random_tensor<float>(Shape{C, 5, 9}, 10 + C, 0, 1);
    const auto p = dir.path() / ("c" + std::to_string(C) + ".png");
    write_image(p, img);
    const auto back = read_image(p);
    ASSERT_EQ(back.shape(), img.shape());
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 65535 + 1e-7);
  }
  write_bytes(dir.path() / "bad.png", {1, 2, 3, 4});
  EXPECT_THROW(read_png(dir.path() / "bad.png"), DataError);
}

TEST(Checkpoint, RoundTripPreservesPredictions) {
  TempDir dir;
  auto model = AutoencoderModel<float>::build(small_config(), 3);
  save_checkpoint(dir.path() / "m.ckpt", model);
  auto back = load_checkpoint<float>(dir.path() / "m.ckpt");
  EXPECT_EQ(back.config(), model.config());
  ASSERT_EQ(back.named_parameters().size(), model.named_parameters().size());
  for (std::size_t k = 0; k < model.named_parameters().size(); ++k) {
    EXPECT_EQ(back.named_parameters()[k].name, model.named_parameters()[k].name);
    EXPECT_EQ(back.named_parameters()[k].value, model.named_parameters()[k].value);
  }
  const auto x = random_tensor<float>(Shape{2, 1, 32, 32}, 4, 0, 1);
  EXPECT_EQ(predict(back, x), predict(model, x));
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(model));
}

TEST(Checkpoint, LayoutHeader) {
  auto model = AutoencoderModel<float>::build(small_config(), 3);
  const auto b = encode_checkpoint(model);
  ASSERT_GT(b.size(), 40u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "SDAE");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5] | b[6] | b[7], 0);
  EXPECT_EQ(b[8], 32);
  // Everything after the header is names, extents and one f32 per scalar.
  std::size_t expected = 4 + 4 + 5 * 4 + 8 + 4;
  for (const auto& p : model.named_parameters())
    expected += 4 + p.name.size() + 4 + 8 * p.value.rank() + 4 * p.value.size();
  EXPECT_EQ(b.size(), expected);
}

TEST(Checkpoint, CorruptFilesRejected) {
  TempDir dir;
  auto model = AutoencoderModel<float>::build(small_config(), 5);
  const auto good = encode_checkpoint(model);
  const auto p = dir.path() / "m.ckpt";

  auto bad = good;
  bad[0] = 'X';
  write_bytes(p, bad);
  EXPECT_THROW(load_checkpoint<float>(p), DataError);

  bad = good;
  bad[4] = 9;
  write_bytes(p, bad);
  EXPECT_THROW(load_checkpoint<float>(p), DataError);

  for (std::size_t cut : {std::size_t{2}, std::size_t{20}, good.size() / 2, good.size() - 1}) {
    write_bytes(p, std::vector<unsigned char>(good.begin(), good.begin() + std::ptrdiff_t(cut)));
    EXPECT_THROW(load_checkpoint<float>(p), DataError) << cut;
  }

  bad = good;
  bad.push_back(0);
  write_bytes(p, bad);
  EXPECT_THROW(load_checkpoint<float>(p), DataError);

  // A base width that disagrees with the stored tensors.
  bad = good;
  bad[20] = 4;
  write_bytes(p, bad);
  EXPECT_THROW(load_checkpoint<float>(p), DataError);

  EXPECT_THROW(load_checkpoint<float>(dir.path() / "none.ckpt"), DataError);
}

TEST(KeyValuesFile, ParseAndWrite) {
  std::istringstream is("# comment\n a = 1 \n\nb.c=two words\n");
  const auto kv = parse_key_values(is, "mem");
  EXPECT_EQ(kv, (KeyValues{{"a", "1"}, {"b.c", "two words"}}));
  std::istringstream bad("a = 1\nnot a pair\n");
  try {
    parse_key_values(bad, "mem");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("mem:2"), std::string::npos);
  }
  TempDir dir;
  write_key_values(dir.path() / "kv", kv);
  EXPECT_EQ(read_key_values(dir.path() / "kv"), kv);
}

TEST(RunConfig, DefaultsOverridesAndTypes) {
  RunConfig c;
  EXPECT_EQ(c.model(), ModelConfig{});
  c.set("train.lr", "0.002");
  c.set_assignment("model.stages = 3");
  EXPECT_EQ(c.train().learning_rate, 0.002);
  EXPECT_EQ(c.model().stages, 3u);
  EXPECT_THROW(c.set("train.nope", "1"), UsageError);
  EXPECT_THROW(c.set_assignment("train.lr"), UsageError);
  c.set("train.epochs", "-3");
  EXPECT_THROW(c.train(), UsageError);
  c.set("train.epochs", "3");
  c.set("train.augment", "maybe");
  EXPECT_THROW(c.train(), UsageError);
  c.set("train.augment", "false");
  c.set("train.optimizer", "rmsprop");
  EXPECT_THROW(c.train(), UsageError);
  c.set("train.optimizer", "sgd");
  c.set("noise.low", "abc");
  EXPECT_THROW(c.noise(), UsageError);
  c.set("noise.low", "-1.5");
  EXPECT_EQ(c.noise().noise_low, -1.5);
  c.set("data.glyph_width_min", "9");
  EXPECT_THROW(c.style(), UsageError);
}

TEST(RunConfig, ResolvedFileReproducesConfig) {
  TempDir dir;
  RunConfig a;
  a.set("train.lr", "0.0005");
  a.set("output.dir", "somewhere");
  a.write(dir.path() / "config.txt");
  RunConfig b;
  b.merge_file(dir.path() / "config.txt");
  EXPECT_EQ(a.values(), b.values());
  EXPECT_EQ(b.values().size(), RunConfig::defaults().size());

  std::ofstream(dir.path() / "bad.txt") << "model.stages = 2\nmodel.colour = red\n";
  EXPECT_THROW(b.merge_file(dir.path() / "bad.txt"), UsageError);
}

TEST(CorpusDir, WriteReadRoundTrip) {
  TempDir dir;
  auto corpus = build_corpus<float>(ImageKind::glyph, 5, 16, NoisePipelineConfig{-2, 2, 3}, 4);
  const auto root = dir.path() / "corpus";
  write_corpus(root, corpus, {{"seed", "4"}}, false);
  EXPECT_TRUE(fs::exists(root / "noisy" / "000004.pgm"));
  EXPECT_TRUE(fs::exists(root / "clean" / "000000.pgm"));
  const auto back = read_corpus(root);
  ASSERT_EQ(back.noisy.size(), 5u);
  ASSERT_EQ(back.clean.size(), 5u);
  EXPECT_EQ(back.names.front(), "000000.pgm");
  EXPECT_EQ(back.manifest.at("kind"), "glyph");
  EXPECT_EQ(back.manifest.at("count"), "5");
  EXPECT_EQ(back.manifest.at("size"), "16");
  EXPECT_EQ(back.manifest.at("seed"), "4");
  EXPECT_NEAR(std::stod(back.manifest.at("snr_db")), corpus_snr(corpus), 1e-4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 256; ++k) {
      EXPECT_NEAR(back.noisy.patches[i][k], corpus.noisy.patches[i][k], 1e-5);
      EXPECT_NEAR(back.clean.patches[i][k], corpus.clean.patches[i][k], 1e-5);
    }

  EXPECT_THROW(write_corpus(root, corpus, {}, false), DataError);
  auto smaller = build_corpus<float>(ImageKind::glyph, 2, 16, NoisePipelineConfig{-2, 2, 3}, 4);
  write_corpus(root, smaller, {}, true);
  EXPECT_EQ(read_corpus(root).noisy.size(), 2u);

  fs::remove(root / "clean" / "000001.pgm");
  EXPECT_THROW(read_corpus(root), DataError);
  EXPECT_THROW(read_corpus(dir.path() / "nothing"), DataError);
}

TEST(Inference, ReflectIndex) {
  const std::vector<std::size_t> expect{2, 1, 0, 1, 2, 3, 2, 1, 0, 1};
  for (std::ptrdiff_t i = -2; i < 8; ++i) EXPECT_EQ(reflect_index(i, 4), expect[std::size_t(i + 2)]) << i;
  EXPECT_EQ(reflect_index(5, 1), 0u);
}

TEST(Inference, SizeMismatchNeedsTile) {
  auto model = AutoencoderModel<float>::build(small_config(), 6);
  EXPECT_THROW(denoise_image(model, Tensor<float>(Shape{1, 64, 64}), false), DimensionError);
  EXPECT_THROW(denoise_image(model, Tensor<float>(Shape{3, 32, 32}), false), DimensionError);
  const auto y = denoise_image(model, Tensor<float>(Shape{1, 32, 32}), false);
  EXPECT_EQ(y.shape(), (Shape{1, 32, 32}));
  for (float v : y.data()) EXPECT_TRUE(v >= 0 && v <= 1);
}

TEST(Inference, TilesAreIndependentPredictions) {
  auto model = AutoencoderModel<float>::build(small_config(), 7);
  const auto img = random_tensor<float>(Shape{1, 64, 64}, 8, 0, 1);
  const auto y = denoise_image(model, img, true, 3);
  ASSERT_EQ(y.shape(), (Shape{1, 64, 64}));
  for (std::size_t tr = 0; tr < 2; ++tr)
    for (std::size_t tc = 0; tc < 2; ++tc) {
      Tensor<float> tile(Shape{1, 32, 32});
      for (std::size_t i = 0; i < 32; ++i)
        for (std::size_t j = 0; j < 32; ++j) tile[i * 32 + j] = img[(tr * 32 + i) * 64 + tc * 32 + j];
      const auto p = denoise_image(model, tile, false);
      for (std::size_t i = 0; i < 32; ++i)
        for (std::size_t j = 0; j < 32; ++j) ASSERT_EQ(y[(tr * 32 + i) * 64 + tc * 32 + j], p[i * 32 + j]);
    }
}

TEST(Inference, RaggedImagesArePaddedByReflection) {
  auto model = AutoencoderModel<float>::build(small_config(), 9);
  const auto img = random_tensor<float>(Shape{1, 40, 20}, 10, 0, 1);
  const auto y = denoise_image(model, img, true);
  ASSERT_EQ(y.shape(), (Shape{1, 40, 20}));
  Tensor<float> corner(Shape{1, 32, 32});
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) corner[i * 32 + j] = img[i * 20 + reflect_index(std::ptrdiff_t(j), 20)];
  const auto p = denoise_image(model, corner, false);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 20; ++j) ASSERT_EQ(y[i * 20 + j], p[i * 32 + j]);
}

TEST(Inference, AllZeroInputGivesFiniteOutput) {
  auto model = AutoencoderModel<float>::build(small_config(), 11);
  const auto y = denoise_image(model, Tensor<float>(Shape{1, 32, 32}, 0.0f), false);
  for (float v : y.data()) EXPECT_TRUE(std::isfinite(v) && v >= 0 && v <= 1);
}

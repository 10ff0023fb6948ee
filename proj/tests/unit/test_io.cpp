#include <gtest/gtest.h>

#include <filesystem>

#include "support.hpp"
#include "vlmdet/io/checkpoint.hpp"
#include "vlmdet/io/config.hpp"
#include "vlmdet/io/report.hpp"

using namespace vlmdet;
using testing_support::small_config;

namespace {

std::string from_hex(const std::string& hex) {
  std::string out;
  for (std::size_t i = 0; i + 1 < hex.size(); i += 2) out.push_back(char(std::stoi(hex.substr(i, 2), nullptr, 16)));
  return out;
}

std::string fixture_hex(const std::string& name) {
  const auto lines = testing_support::fixture_lines(name);
  std::string hex;
  for (const auto& l : lines) hex += l;
  return hex;
}

// Replaces the trailing CRC so the bytes pass the integrity check.
std::string reseal(std::string bytes) {
  bytes.resize(bytes.size() - 4);
  const std::uint32_t crc = crc32_of(bytes, bytes.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(char((crc >> (8 * i)) & 0xFF));
  return bytes;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vlmdet_io_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

bool params_bitwise(const ParameterSet<float>& a, const ParameterSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& p : a) {
    if (!b.contains(p.name) || !testing_support::bitwise_equal(p.tensor, b.at(p.name).tensor)) return false;
  }
  return true;
}

}  // namespace

// ---- config ------------------------------------------------------------------------

TEST(Config, CanonicalRoundTripAndDigest) {
  ExperimentConfig c;
  c.set("strategy.kind", "adapter");
  c.set("train.epochs", "3");
  const auto back = ExperimentConfig::parse(c.canonical());
  EXPECT_TRUE(back == c);
  EXPECT_EQ(back.digest(), c.digest());
  ExperimentConfig d = c;
  d.set("train.epochs", "4");
  EXPECT_NE(d.digest(), c.digest());
  EXPECT_EQ(c.digest(), sha256_hex(c.canonical()));
}

TEST(Config, CanonicalIsSortedKeyValueLines) {
  const std::string text = ExperimentConfig().canonical();
  std::istringstream is(text);
  std::string prev, line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ASSERT_NE(line.find('='), std::string::npos);
    const std::string key = line.substr(0, line.find('='));
    EXPECT_LT(prev, key);
    prev = key;
    ++n;
  }
  EXPECT_EQ(n, ExperimentConfig::schema().size());
}

TEST(Config, UnknownKeysAndBadValuesRejected) {
  ExperimentConfig c;
  EXPECT_THROW(c.set("model.depth", "3"), ConfigError);
  EXPECT_THROW(c.set("train.epochs", "ten"), ConfigError);
  EXPECT_THROW(c.set("strategy.kind", "lora"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("train.epochs 3\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("nope=1\n"), ConfigError);
  EXPECT_NO_THROW(ExperimentConfig::parse("# comment\n\n train.epochs = 3 \n"));
  EXPECT_EQ(ExperimentConfig::parse("train.epochs = 3\n").size("train.epochs"), 3u);
}

TEST(Config, TypedViews) {
  ExperimentConfig c;
  c.set("strategy.kind", "prompt");
  c.set("strategy.m", "8");
  c.set("eval.qualities", "90,75,50");
  EXPECT_EQ(c.strategy().m, 8u);
  EXPECT_FALSE(c.strategy().lr.has_value());
  c.set("strategy.lr", "0.01");
  EXPECT_EQ(*c.strategy().lr, 0.01);
  EXPECT_EQ(c.sizes("eval.qualities"), (std::vector<std::size_t>{90, 75, 50}));
  EXPECT_EQ(c.ablation_sizes(), (std::vector<std::size_t>{2000, 4000, 6000, 8000}));
  EXPECT_EQ(c.families("data.families").size(), 3u);
  EXPECT_EQ(c.encoder().context_len, 32u);
}

// ---- checkpoint format -----------------------------------------------------------

TEST(Checkpoint, GoldenSingleParameterLayout) {
  RawCheckpoint ck;
  ck.config_text = "k=v\n";
  CheckpointEntry e;
  e.name = "w";
  e.dtype = 1;
  e.dims = {2, 3};
  const float vals[6] = {0.0f, 1.0f, -2.5f, 0.125f, 3.0f, -0.0f};
  e.bytes = ckpt::value_bytes<float>(std::span<const float>(vals));
  ck.entries.push_back(e);
  const std::string golden = from_hex(fixture_hex("checkpoint_1param.hex"));
  EXPECT_EQ(encode_checkpoint(ck), golden);
  const auto back = decode_checkpoint(golden);
  EXPECT_EQ(back.config_text, "k=v\n");
  ASSERT_EQ(back.entries.size(), 1u);
  EXPECT_EQ(back.entries[0].dims, (std::vector<std::uint32_t>{2, 3}));
  const auto got = ckpt::bytes_values<float>(back.entries[0].bytes);
  EXPECT_TRUE(testing_support::bitwise_equal(Tensor<float>::from({2, 3}, got), Tensor<float>::from({2, 3}, {vals, vals + 6})));
}

TEST(Checkpoint, DistinctErrorKinds) {
  const std::string good = from_hex(fixture_hex("checkpoint_1param.hex"));

  std::string magic = good;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), MagicError);

  std::string version = good;
  version[4] = 2;
  EXPECT_THROW(decode_checkpoint(reseal(version)), VersionError);

  std::string crc = good;
  crc[20] ^= 1;
  EXPECT_THROW(decode_checkpoint(crc), CrcError);

  // A structurally short file that still carries a valid CRC.
  std::string cut = good.substr(0, good.size() - 4 - 8);
  cut += "0000";
  EXPECT_THROW(decode_checkpoint(reseal(cut)), TruncatedError);

  std::string dtype = good;
  dtype[10 + 4 + 2 + 1] = 7;  // header, config, name length, name
  EXPECT_THROW(decode_checkpoint(reseal(dtype)), DTypeError);

  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 5)), CheckpointError);
  EXPECT_THROW(decode_checkpoint(""), MagicError);

  // Distinct types that all share the I/O base.
  EXPECT_THROW(decode_checkpoint(crc), IoError);
}

TEST(Checkpoint, TruncationAtEveryLengthFails) {
  const std::string good = from_hex(fixture_hex("checkpoint_1param.hex"));
  for (std::size_t n = 0; n < good.size(); ++n) EXPECT_THROW(decode_checkpoint(good.substr(0, n)), CheckpointError) << n;
}

TEST(Checkpoint, BackboneRoundTripBitwise) {
  const DualEncoder<float> m(small_config(), synth::default_vocabulary(), 21);
  const auto ck = backbone_checkpoint(m, {{"pretrain.seed", "3"}});
  const auto bytes = encode_checkpoint(ck);
  const auto back_raw = decode_checkpoint(bytes);
  EXPECT_EQ(config_digest(back_raw), config_digest(ck));
  const auto back = load_backbone<float>(back_raw);
  EXPECT_TRUE(params_bitwise(m.params(), back.params()));
  EXPECT_TRUE(back.vocab() == m.vocab());
  EXPECT_EQ(encode_checkpoint(backbone_checkpoint(back, {{"pretrain.seed", "3"}})), bytes);
  EXPECT_THROW(load_adapted<float>(back_raw), CheckpointError);
  EXPECT_THROW(load_backbone<double>(back_raw), DTypeError);
}

TEST(Checkpoint, AdaptedRoundTripBitwise) {
  const DualEncoder<float> bb(small_config(), synth::default_vocabulary(), 21);
  for (StrategyKind k : kAllStrategies) {
    StrategySpec s;
    s.kind = k;
    s.m = 8;
    s.alpha = 0.3;
    if (k == StrategyKind::Adapter) s.lr = 0.005;
    const AdaptedModel<float> m(bb, s, 4);
    const auto raw = decode_checkpoint(encode_checkpoint(adapted_checkpoint(m)));
    EXPECT_EQ(checkpoint_kind(raw), "adapted");
    const auto back = load_adapted<float>(raw);
    EXPECT_TRUE(back.spec() == m.spec()) << strategy_name(k);
    EXPECT_TRUE(params_bitwise(back.backbone().params(), m.backbone().params()));
    EXPECT_TRUE(params_bitwise(back.strategy_params(), m.strategy_params()));
    EXPECT_EQ(back.frozen_digest(), m.frozen_digest());
    const auto img = testing_support::random_image(64, 2);
    EXPECT_EQ(back.classify(img), m.classify(img));
  }
  EXPECT_THROW(load_backbone<float>(decode_checkpoint(encode_checkpoint(adapted_checkpoint(
                   AdaptedModel<float>(bb, StrategySpec{}, 0))))),
               CheckpointError);
}

TEST(Checkpoint, FileIoAndMissingPath) {
  const auto dir = scratch_dir("ckpt");
  const DualEncoder<float> m(small_config(), synth::default_vocabulary(), 1);
  const auto path = (dir / "sub" / "m.ckpt").string();
  write_checkpoint(backbone_checkpoint(m), path);
  EXPECT_TRUE(params_bitwise(load_backbone<float>(read_checkpoint(path)).params(), m.params()));
  for (const auto& e : std::filesystem::directory_iterator(dir / "sub"))
    EXPECT_EQ(e.path().filename(), "m.ckpt") << "temp file left behind";
  try {
    read_checkpoint((dir / "missing.ckpt").string());
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.ckpt"), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

// ---- vocabulary file ------------------------------------------------------------

TEST(VocabularyFile, OneTokenPerLine) {
  const auto v = synth::default_vocabulary();
  const auto text = v.to_text();
  std::istringstream is(text);
  std::string line;
  std::size_t id = 0;
  while (std::getline(is, line)) {
    EXPECT_EQ(line, v.token(id));
    ++id;
  }
  EXPECT_EQ(id, v.size());
  EXPECT_TRUE(Vocabulary::parse(text) == v);
}

// ---- reports --------------------------------------------------------------------

namespace {

MetricsReport sample_report() {
  MetricsReport r;
  r.name = "in_distribution";
  r.rows = {{"gan_like", Family::GanLike, 200, 200, 0.987654321, 0.9},
            {"diffusion_like", Family::DiffusionLike, 200, 200, 0.75, 0.6125},
            {"commercial_like", Family::CommercialLike, 200, 200, 0.5, 0.5}};
  r.finalize();
  r.metadata = {{"strategy", "prompt"}, {"seed", "9"}};
  return r;
}

SweepResult sample_sweep() {
  SweepResult s;
  for (const auto& p : sweep_grid({75, 50}, {1.0, 2.0}))
    for (Family f : {Family::GanLike, Family::DiffusionLike}) s.cells.push_back({p, f, 10, 10, 0.9, 0.8, ""});
  s.cells.push_back({Perturbation::blur(3.0), Family::GanLike, 0, 0, 0, 0, "average precision is undefined"});
  s.metadata = {{"strategy", "linear"}};
  return s;
}

}  // namespace

TEST(Report, CsvRowsPlusAggregate) {
  const auto csv = report_csv(sample_report());
  std::istringstream is(csv);
  std::vector<std::string> lines;
  for (std::string l; std::getline(is, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 1u + 3u + 1u);
  EXPECT_EQ(lines[0], "dataset,family,n_real,n_fake,ap,acc");
  EXPECT_EQ(lines[1], "gan_like,GAN_LIKE,200,200,98.77,90.00");
  EXPECT_EQ(lines[4], "mean,ALL,600,600,74.59,67.08");
}

TEST(Report, JsonRoundTrip) {
  const auto r = sample_report();
  const auto back = report_from_json(nlohmann::json::parse(report_json(r)));
  EXPECT_TRUE(back == r);
  EXPECT_EQ(back.rows[0].ap, 0.987654321);
  EXPECT_THROW(report_from_json(nlohmann::json::parse("{\"name\":1}")), IoError);
}

TEST(Report, SweepJsonRoundTripAndPlotPoints) {
  const auto s = sample_sweep();
  EXPECT_TRUE(sweep_from_json(nlohmann::json::parse(sweep_json(s))) == s);
  const auto plot = sweep_plot_data(s);
  std::istringstream is(plot);
  std::string l;
  std::getline(is, l);
  EXPECT_EQ(l, "family,series,x,ap,acc");
  std::map<std::string, int> per_family;
  while (std::getline(is, l)) ++per_family[l.substr(0, l.find(','))];
  EXPECT_EQ(per_family["GAN_LIKE"], 5);
  EXPECT_EQ(per_family["DIFFUSION_LIKE"], 5);
  const auto csv = sweep_csv(s);
  EXPECT_NE(csv.find("blur,3,GAN_LIKE,0,0,,,\"average precision is undefined\""), std::string::npos) << csv;
}

TEST(Report, LossCurveCsv) {
  EXPECT_EQ(loss_curve_csv({0.5, 0.25}), "epoch,loss\n1,0.5\n2,0.25\n");
}

TEST(RunWriterTest, ManifestListsEveryFileWithHash) {
  const auto dir = scratch_dir("run");
  RunManifest m;
  m.command = "eval";
  m.config_digest = "abc";
  m.seed = 9;
  RunWriter w((dir / "r").string(), m);
  w.write("a.csv", "x,y\n1,2\n");
  w.write("b.json", "{}\n");
  const auto manifest = nlohmann::json::parse(fsio::read_file(w.finish()));
  EXPECT_EQ(manifest.at("command"), "eval");
  EXPECT_EQ(manifest.at("seed"), 9);
  EXPECT_EQ(manifest.at("code_version"), kCodeVersion);
  ASSERT_EQ(manifest.at("files").size(), 2u);
  for (const auto& f : manifest.at("files")) {
    const std::string content = fsio::read_file((dir / "r" / f.at("path").get<std::string>()).string());
    EXPECT_EQ(f.at("sha256").get<std::string>(), sha256_hex(content));
  }
  std::filesystem::remove_all(dir);
}

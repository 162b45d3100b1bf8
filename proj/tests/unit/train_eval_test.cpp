#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "igcn/train_eval.hpp"

using namespace igcn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("igcn_train_eval_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TrainConfig tiny_config(const fs::path& out) {
  TrainConfig c;
  c.out_dir = out.string();
  c.n_au = 4;
  c.batch_size = 4;
  c.base_channels = 4;
  c.n_rrmb = 1;
  c.d_base_channels = 4;
  c.cls_base_channels = 4;
  c.cls_epochs = 2;
  c.epochs = 1;
  c.eval_samples = 8;
  return c;
}

// 48 train / 12 test faces at 32 px from 8 px inputs, plus a frozen classifier.
class TrainEval : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch("suite"));
    DatasetConfig dc;
    dc.n_train = 48;
    dc.n_test = 12;
    dc.side = 32;
    dc.input_side = 8;
    dc.n_au = 4;
    dc.seed = 3;
    generate_dataset(dc, *root_ / "data");
    train_ = new Dataset(load_dataset(*root_ / "data", "train"));
    test_ = new Dataset(load_dataset(*root_ / "data", "test"));
    auto cfg = tiny_config(*root_ / "cls");
    pretrain_classifier(cfg, *train_);
    cls_ = new AuClassifier<float>(load_classifier(classifier_path(cfg)));
  }
  static void TearDownTestSuite() {
    delete cls_;
    delete train_;
    delete test_;
    fs::remove_all(*root_);
    delete root_;
  }

  static fs::path* root_;
  static Dataset* train_;
  static Dataset* test_;
  static AuClassifier<float>* cls_;
};

fs::path* TrainEval::root_ = nullptr;
Dataset* TrainEval::train_ = nullptr;
Dataset* TrainEval::test_ = nullptr;
AuClassifier<float>* TrainEval::cls_ = nullptr;

}  // namespace

TEST(TrainConfigTest, DefaultsMatchPublishedSettings) {
  TrainConfig c;
  EXPECT_EQ(c.lr, 1e-4);
  EXPECT_EQ(c.batch_size, 8u);
  EXPECT_EQ(c.kernel_size, 3u);
  EXPECT_EQ(c.g_steps_per_d_step, 3u);
  EXPECT_EQ(c.lambda1, 0.001);
  EXPECT_EQ(c.lambda2, 0.001);
  EXPECT_EQ(c.lambda3, 0.5);
  EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfigTest, JsonRoundTripAndUnknownKeys) {
  TrainConfig c;
  c.lr = 3e-4;
  c.epochs = 5;
  c.seed = 11;
  c.generator = "baseline";
  c.data_dir = "somewhere";
  auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(train_config_from_json(nlohmann::json::object()).lambda3, 0.5);
  EXPECT_THROW(train_config_from_json({{"learning_rate", 1.0}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"lr", "fast"}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"kernel_size", 4}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"generator", "unet"}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"lambda2", -1.0}}), std::invalid_argument);
}

TEST(TrainConfigTest, OverridesParseByKeyType) {
  TrainConfig c;
  apply_override(c, "lambda2", "0");
  apply_override(c, "epochs", "3");
  apply_override(c, "out_dir", "runs/x");
  apply_override(c, "lr", "2e-4");
  EXPECT_EQ(c.lambda2, 0.0);
  EXPECT_EQ(c.epochs, 3u);
  EXPECT_EQ(c.out_dir, "runs/x");
  EXPECT_EQ(c.lr, 2e-4);
  EXPECT_THROW(apply_override(c, "epoch", "3"), std::invalid_argument);
  EXPECT_THROW(apply_override(c, "epochs", "-1"), std::invalid_argument);
  EXPECT_THROW(apply_override(c, "epochs", "1.5"), std::invalid_argument);
  EXPECT_THROW(apply_override(c, "lr", "abc"), std::invalid_argument);
  EXPECT_EQ(c.epochs, 3u);
}

TEST(TrainConfigTest, LoadFromFile) {
  auto dir = scratch("cfgfile");
  std::ofstream(dir / "c.json") << R"({"lr": 0.0005, "n_au": 6})";
  auto c = load_train_config(dir / "c.json");
  EXPECT_EQ(c.lr, 0.0005);
  EXPECT_EQ(c.n_au, 6u);
  std::ofstream(dir / "bad.json") << "{lr: }";
  EXPECT_THROW(load_train_config(dir / "bad.json"), std::invalid_argument);
  EXPECT_THROW(load_train_config(dir / "missing.json"), std::invalid_argument);
  fs::remove_all(dir);
}

// 16 px noise images; AU0 adds a red block top-left, AU1 a blue block bottom-right.
Dataset two_block_toy(std::size_t n, std::uint64_t seed) {
  Dataset ds;
  ds.info = {{"n_au", 2}, {"side", 16}, {"input_side", 2}};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(60, 140), coin(0, 1);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.record.labels = {static_cast<std::uint8_t>(coin(rng)), static_cast<std::uint8_t>(coin(rng))};
    s.gt = {16, 16, std::vector<std::uint8_t>(3 * 256)};
    for (auto& v : s.gt.planes) v = static_cast<std::uint8_t>(noise(rng));
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 5; ++x) {
        if (s.record.labels[0]) s.gt.planes[(2 + y) * 16 + 2 + x] = 250;
        if (s.record.labels[1]) s.gt.planes[2 * 256 + (9 + y) * 16 + 9 + x] = 250;
      }
    s.degraded = {2, 2, std::vector<std::uint8_t>(12, 0)};
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

TEST(ClassifierPretrain, SeparableTwoAttributeToy) {
  auto dir = scratch("toy");
  auto train = two_block_toy(800, 5);
  TrainConfig cfg;
  cfg.out_dir = (dir / "out").string();
  cfg.n_au = 2;
  cfg.cls_epochs = 5;
  cfg.cls_base_channels = 8;
  cfg.cls_blur_prob = 0;
  auto r = pretrain_classifier(cfg, train);
  EXPECT_GE(r.best_val_f1, 0.95);
  ASSERT_EQ(r.epoch_losses.size(), 5u);
  EXPECT_LT(r.epoch_losses[2], r.epoch_losses[0]);
  // reloading the stored checkpoint reproduces the selected epoch's score
  auto c = load_classifier(r.checkpoint);
  EXPECT_TRUE(c.is_frozen());
  EXPECT_DOUBLE_EQ(classifier_validation_f1(c, train), r.best_val_f1);
  fs::remove_all(dir);
}

TEST_F(TrainEval, TapScalesGiveUnitFeatureEnergy) {
  auto [tr, val] = validation_split(train_->size());
  std::vector<std::size_t> idx(tr.begin(), tr.end());
  auto again = calibrate_tap_scale(*cls_, gt_batches(*train_, idx, 32));
  EXPECT_NEAR(again[0], cls_->tap_scale()[0], 1e-6 * cls_->tap_scale()[0]);
  EXPECT_NEAR(again[1], cls_->tap_scale()[1], 1e-6 * cls_->tap_scale()[1]);
  NoGradGuard guard;
  auto out = cls_->forward_all(make_batch(*train_, idx).gt);
  double e = 0;
  for (float v : out.deep.values()) e += static_cast<double>(v) * v;
  EXPECT_NEAR(e / out.deep.numel(), 1.0, 1e-4);
}

TEST_F(TrainEval, ValidationSplitHoldsOutEveryTenth) {
  auto [tr, val] = validation_split(25);
  EXPECT_EQ(val, (std::vector<std::size_t>{9, 19}));
  EXPECT_EQ(tr.size(), 23u);
}

TEST_F(TrainEval, RatioHashLogAndCheckpoint) {
  auto cfg = tiny_config(*root_ / "ratio");
  auto r = train_gan(cfg, *train_, *cls_, test_);
  EXPECT_EQ(r.d_steps, 48 / 4 / 3);
  EXPECT_EQ(r.g_steps, 3 * r.d_steps);
  EXPECT_EQ(r.classifier_hash_before, r.classifier_hash_after);
  EXPECT_EQ(r.classifier_hash_before, param_hash(cls_->parameters()));
  EXPECT_EQ(r.epochs_done, 1);
  ASSERT_TRUE(fs::exists(r.checkpoint));
  auto ck = load_checkpoint(r.checkpoint);
  EXPECT_EQ(ck.counter("g_steps"), r.g_steps);
  EXPECT_EQ(ck.counter("d_steps"), r.d_steps);

  std::ifstream log(r.log);
  std::size_t steps = 0, epochs = 0;
  for (std::string line; std::getline(log, line);) {
    auto j = nlohmann::json::parse(line);
    if (j["event"] == "step") {
      ++steps;
      for (const char* k : {"pixel", "adversarial", "au", "perceptual", "total", "d_loss"}) EXPECT_TRUE(j.contains(k)) << k;
    } else {
      ++epochs;
      EXPECT_TRUE(j.contains("psnr"));
      EXPECT_TRUE(j.contains("ssim"));
    }
  }
  EXPECT_EQ(steps, static_cast<std::size_t>(r.d_steps));
  EXPECT_EQ(epochs, 1u);
}

TEST_F(TrainEval, OtherRatiosAndBaseline) {
  auto cfg = tiny_config(*root_ / "ratio2");
  cfg.g_steps_per_d_step = 2;
  cfg.generator = "baseline";
  auto r = train_gan(cfg, *train_, *cls_);
  EXPECT_EQ(r.d_steps, 48 / 4 / 2);
  EXPECT_EQ(r.g_steps, 2 * r.d_steps);
  EXPECT_EQ(load_generator(r.checkpoint).kind, "baseline");
  EXPECT_EQ(r.checkpoint.filename(), "baseline.ckpt");
}

TEST_F(TrainEval, LossDecreasesOverEpochs) {
  auto cfg = tiny_config(*root_ / "decrease");
  cfg.epochs = 3;
  cfg.lr = 1e-3;
  auto r = train_gan(cfg, *train_, *cls_);
  const std::size_t per = r.losses.size() / 3;
  double first = 0, last = 0;
  for (std::size_t i = 0; i < per; ++i) {
    first += r.losses[i].pixel;
    last += r.losses[r.losses.size() - 1 - i].pixel;
  }
  EXPECT_LT(last, first);
}

TEST_F(TrainEval, ResumeMatchesUninterruptedRun) {
  auto full = tiny_config(*root_ / "resume_full");
  full.epochs = 2;
  auto a = train_gan(full, *train_, *cls_);

  auto part = tiny_config(*root_ / "resume_part");
  part.epochs = 1;
  train_gan(part, *train_, *cls_);
  part.epochs = 2;
  auto b = train_gan(part, *train_, *cls_, nullptr, true);
  EXPECT_EQ(b.g_steps, a.g_steps);
  EXPECT_EQ(b.d_steps, a.d_steps);

  const auto per_epoch = a.losses.size() / 2;
  ASSERT_EQ(b.losses.size(), per_epoch);
  EXPECT_NEAR(b.losses[0].total, a.losses[per_epoch].total, 1e-5);
  EXPECT_NEAR(b.losses.back().total, a.losses.back().total, 1e-5);

  auto ga = load_checkpoint(a.checkpoint), gb = load_checkpoint(b.checkpoint);
  EXPECT_EQ(ga.counter("epoch"), 2);
  EXPECT_EQ(gb.counter("epoch"), 2);
  auto ma = load_generator(a.checkpoint), mb = load_generator(b.checkpoint);
  auto x = make_batch(*test_, std::vector<std::size_t>{0, 1}).degraded;
  auto ya = ma.restore(x), yb = mb.restore(x);
  for (std::size_t i = 0; i < ya.numel(); ++i) ASSERT_NEAR(ya.values()[i], yb.values()[i], 1e-5);
}

TEST_F(TrainEval, NonFiniteLossStopsAndKeepsCheckpoint) {
  auto cfg = tiny_config(*root_ / "nan");
  cfg.epochs = 3;
  const std::int64_t per_epoch = 3 * (48 / 4 / 3);
  TrainHooks hooks;
  hooks.inspect_loss = [&](std::int64_t step, double& loss) {
    if (step == per_epoch + 2) loss = std::nan("");
  };
  try {
    train_gan(cfg, *train_, *cls_, nullptr, false, hooks);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find(generator_path(cfg).string()), std::string::npos);
  }
  auto ck = load_checkpoint(generator_path(cfg));
  EXPECT_EQ(ck.counter("epoch"), 1);
  EXPECT_EQ(ck.counter("g_steps"), per_epoch);
}

TEST_F(TrainEval, ZeroWeightsAndEarlyStop) {
  auto cfg = tiny_config(*root_ / "zero");
  cfg.lambda1 = cfg.lambda2 = cfg.lambda3 = 0;
  TrainHooks hooks;
  hooks.stop_after_iterations = 2;
  auto r = train_gan(cfg, *train_, *cls_, nullptr, false, hooks);
  EXPECT_EQ(r.d_steps, 2);
  EXPECT_EQ(r.g_steps, 6);
  for (const auto& l : r.losses) {
    EXPECT_FLOAT_EQ(l.total, l.pixel);
    EXPECT_EQ(l.au, 0.0);
  }
}

TEST_F(TrainEval, RejectsUnfrozenClassifierAndTinyData) {
  auto cfg = tiny_config(*root_ / "reject");
  AuClassifier<float> loose(classifier_config(cfg, 32), PatchGraphs::unlinked({1, 2, 8}), 0);
  EXPECT_THROW(train_gan(cfg, *train_, loose), std::logic_error);
  cfg.batch_size = 32;
  EXPECT_THROW(train_gan(cfg, *train_, *cls_), std::invalid_argument);
}

TEST_F(TrainEval, RestoreShapeRangeAndDeterminism) {
  auto cfg = tiny_config(*root_ / "restore");
  train_gan(cfg, *train_, *cls_);
  auto m = load_generator(generator_path(cfg));
  auto x = make_batch(*test_, std::vector<std::size_t>{0, 1, 2}).degraded;
  auto y = m.restore(x, 2);
  EXPECT_EQ(y.shape(), (Shape{3, 3, 32, 32}));
  for (float v : y.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
  auto again = load_generator(generator_path(cfg)).restore(x, 2);
  for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_EQ(y.values()[i], again.values()[i]);
  auto whole = m.restore(x);
  for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y.values()[i], whole.values()[i], 1e-5);
  EXPECT_THROW(m.restore(Tensor<float>::zeros(Shape{1, 3, 16, 16})), ShapeError);

  auto out = *root_ / "restored";
  EXPECT_EQ(restore_directory(m, *root_ / "data" / "test" / "degraded", out), test_->size());
  auto png = read_png(fs::directory_iterator(out)->path());
  EXPECT_EQ(png.height, 32u);
  EXPECT_EQ(png.width, 32u);
  EXPECT_THROW(restore_directory(m, *root_ / "nowhere", out), ImageIoError);
  EXPECT_THROW(load_generator(classifier_path(tiny_config(*root_ / "cls"))), CheckpointError);
}

TEST_F(TrainEval, PipelineRowsAndMissingCheckpoint) {
  auto cfg = tiny_config(*root_ / "pipeline");
  train_gan(cfg, *train_, *cls_);
  std::ostringstream warn;
  const auto missing = *root_ / "pipeline" / "baseline.ckpt";
  auto rep = evaluate_pipeline(*test_, *cls_, {generator_path(cfg), missing}, warn);
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_EQ(rep.rows[0].method, "ground_truth");
  EXPECT_EQ(rep.rows[1].method, "bicubic");
  EXPECT_EQ(rep.rows[2].method, "full");
  EXPECT_EQ(rep.find("baseline"), nullptr);
  EXPECT_NE(warn.str().find(missing.string()), std::string::npos);

  const auto& gt = rep.rows[0];
  EXPECT_EQ(gt.psnr, kPsnrCap);
  EXPECT_NEAR(gt.ssim, 1.0, 1e-12);
  std::vector<std::size_t> all(test_->size());
  std::iota(all.begin(), all.end(), 0);
  auto direct = evaluate_classifier(*cls_, gt_batches(*test_, all, 5), flat_labels(*test_, all), 4).metrics;
  EXPECT_DOUBLE_EQ(gt.macro_f1, direct.macro_f1());
  EXPECT_EQ(gt.f1.size(), 4u);
  EXPECT_LT(rep.rows[1].psnr, kPsnrCap);
}

TEST_F(TrainEval, ReportCsvRoundTrip) {
  MetricsReport rep;
  rep.rows.push_back({"ground_truth", {1.0, 0.5}, {1.0, 0.75}, 0.75, 0.875, kPsnrCap, 1.0});
  rep.rows.push_back({"full", {0.1 / 3, 2.0 / 3}, {0.3, 0.7}, 0.35, 0.5, 17.123456789, 0.3333333333333333});
  std::stringstream ss;
  write_report_csv(rep, ss);
  std::string header;
  std::getline(std::istringstream(ss.str()), header);
  EXPECT_EQ(header, "method,au_id,f1,accuracy,psnr,ssim");
  EXPECT_NE(ss.str().find("full,overall,"), std::string::npos);
  EXPECT_EQ(read_report_csv(ss), rep);
  std::istringstream bad("method,f1\n");
  EXPECT_THROW(read_report_csv(bad), std::invalid_argument);
}

TEST_F(TrainEval, BicubicRestoreShape) {
  auto x = make_batch(*test_, std::vector<std::size_t>{0, 1}).degraded;
  auto y = bicubic_restore(x, 32);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 32, 32}));
  for (float v : y.values()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

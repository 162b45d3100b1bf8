// igcn: data generation, training, restoration and evaluation from the shell.
#include <CLI11.hpp>

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "igcn/gradient_suite.hpp"
#include "igcn/train_eval.hpp"

using namespace igcn;
namespace fs = std::filesystem;

namespace {

// --config plus one string flag per config key; flags win over the file.
struct ConfigFlags {
  std::string path;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", path, "JSON run config")->check(CLI::ExistingFile);
    const auto defaults = to_json(TrainConfig{});
    for (const auto& [key, value] : defaults.items())
      app->add_option("--" + key, overrides[key], "config key '" + key + "' (default " + value.dump() + ")");
  }

  TrainConfig resolve() const {
    TrainConfig cfg = path.empty() ? TrainConfig{} : load_train_config(path);
    for (const auto& [key, value] : overrides)
      if (!value.empty()) apply_override(cfg, key, value);
    cfg.validate();
    return cfg;
  }
};

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw std::runtime_error(what + " not found: " + p.string());
}

Dataset load_split(const TrainConfig& cfg, const std::string& split) {
  require_file(fs::path(cfg.data_dir) / "info.json", "dataset (run gen-data first)");
  return load_dataset(cfg.data_dir, split);
}

int gen_data(const DatasetConfig& dc, const std::string& out) {
  generate_dataset(dc, out);
  std::cout << "wrote " << dc.n_train << " train and " << dc.n_test << " test samples to " << out << "\n";
  return 0;
}

int pretrain(const TrainConfig& cfg) {
  auto train = load_split(cfg, "train");
  auto r = pretrain_classifier(cfg, train, &std::cout);
  std::cout << "classifier: " << r.checkpoint.string() << " (validation F1 " << r.best_val_f1 << ", epoch "
            << r.best_epoch + 1 << ")\n";
  return 0;
}

int train(const TrainConfig& cfg, const std::string& classifier, bool resume) {
  const fs::path cls = classifier.empty() ? classifier_path(cfg) : fs::path(classifier);
  require_file(cls, "classifier checkpoint (run pretrain-cls first)");
  auto c = load_classifier(cls);
  auto train = load_split(cfg, "train");
  auto test = load_split(cfg, "test");
  auto r = train_gan(cfg, train, c, test.size() ? &test : nullptr, resume);
  std::cout << "generator: " << r.checkpoint.string() << " after " << r.epochs_done << " epochs (" << r.g_steps
            << " G steps, " << r.d_steps << " D steps)\nlog: " << r.log.string() << "\n";
  return 0;
}

int restore(const TrainConfig& cfg, const std::string& checkpoint, const std::string& input, const std::string& output) {
  const fs::path ck = checkpoint.empty() ? generator_path(cfg) : fs::path(checkpoint);
  require_file(ck, "generator checkpoint");
  const fs::path in = input.empty() ? fs::path(cfg.data_dir) / "test" / "degraded" : fs::path(input);
  const fs::path out = output.empty() ? fs::path(cfg.out_dir) / "restored" : fs::path(output);
  const auto n = restore_directory(load_generator(ck), in, out);
  std::cout << "restored " << n << " images into " << out.string() << "\n";
  return 0;
}

int eval(const TrainConfig& cfg, const std::string& generator, const std::string& baseline,
         const std::string& classifier, const std::string& report) {
  const fs::path gen = generator.empty() ? generator_path(cfg) : fs::path(generator);
  require_file(gen, "generator checkpoint");
  const fs::path cls = classifier.empty() ? classifier_path(cfg) : fs::path(classifier);
  require_file(cls, "classifier checkpoint");
  PipelineInputs in{gen, std::nullopt};
  if (!baseline.empty()) in.baseline = fs::path(baseline);
  auto rep = evaluate_pipeline(load_split(cfg, "test"), load_classifier(cls), in);
  const fs::path out = report.empty() ? fs::path(cfg.out_dir) / "report.csv" : fs::path(report);
  write_report_csv(rep, out);
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& r : rep.rows)
    std::cout << std::left << std::setw(14) << r.method << " f1 " << r.macro_f1 << "  acc " << r.macro_accuracy
              << "  psnr " << r.psnr << "  ssim " << r.ssim << "\n";
  std::cout << "report: " << out.string() << "\n";
  return 0;
}

int gradcheck(std::size_t seeds) {
  GradientSuiteOptions o;
  o.seeds = seeds;
  auto reports = run_gradient_suite(o);
  std::size_t failed = 0;
  std::printf("%-28s %12s %12s  %s\n", "operation", "max_abs", "max_rel", "status");
  for (const auto& r : reports) {
    std::printf("%-28s %12.3e %12.3e  %s%s\n", r.op_name.c_str(), r.max_abs_err, r.max_rel_err, r.passed ? "PASS" : "FAIL",
                r.error.empty() ? "" : (" (" + r.error + ")").c_str());
    if (!r.passed) ++failed;
  }
  std::printf("%zu/%zu operations passed\n", reports.size() - failed, reports.size());
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Facial expression restoration with patch graph convolutions"};
  app.require_subcommand(1);

  DatasetConfig dc;
  std::optional<std::size_t> n_test;
  std::string data_out = "data";
  auto* gen = app.add_subcommand("gen-data", "Render the synthetic face corpus");
  gen->add_option("--n", dc.n_train, "training samples")->capture_default_str();
  gen->add_option("--n-test", n_test, "test samples (default n / 4)");
  gen->add_option("--side", dc.side, "ground-truth side in pixels")->capture_default_str();
  gen->add_option("--input-side", dc.input_side, "degraded input side in pixels")->capture_default_str();
  gen->add_option("--n-au", dc.n_au, "number of attributes")->capture_default_str();
  gen->add_option("--seed", dc.seed, "corpus seed")->capture_default_str();
  gen->add_option("--out", data_out, "output directory")->capture_default_str();

  ConfigFlags pre_flags, train_flags, restore_flags, eval_flags;
  auto* pre = app.add_subcommand("pretrain-cls", "Pretrain the attribute classifier on ground-truth images");
  pre_flags.attach(pre);

  bool resume = false;
  std::string train_cls;
  auto* tr = app.add_subcommand("train", "Train the generator and discriminator");
  train_flags.attach(tr);
  tr->add_flag("--resume", resume, "continue from the checkpoint in out_dir");
  tr->add_option("--classifier", train_cls, "classifier checkpoint (default out_dir/classifier.ckpt)");

  std::string ck, input, output;
  auto* rs = app.add_subcommand("restore", "Restore every degraded PNG in a directory");
  restore_flags.attach(rs);
  rs->add_option("--checkpoint", ck, "generator checkpoint (default out_dir/<generator>.ckpt)");
  rs->add_option("--input", input, "input directory (default data_dir/test/degraded)");
  rs->add_option("--output", output, "output directory (default out_dir/restored)");

  std::string gen_ck, base_ck, eval_cls, report;
  auto* ev = app.add_subcommand("eval", "Score bicubic, baseline and full restorations on the test split");
  eval_flags.attach(ev);
  ev->add_option("--checkpoint", gen_ck, "full model checkpoint (default out_dir/<generator>.ckpt)");
  ev->add_option("--baseline", base_ck, "baseline generator checkpoint; skipped with a warning when missing");
  ev->add_option("--classifier", eval_cls, "classifier checkpoint (default out_dir/classifier.ckpt)");
  ev->add_option("--report", report, "CSV report path (default out_dir/report.csv)");

  std::size_t seeds = 5;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
  gc->add_option("--seeds", seeds, "random restarts per operation")->capture_default_str()->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      dc.n_test = n_test.value_or(dc.n_train / 4);
      return gen_data(dc, data_out);
    }
    if (*pre) return pretrain(pre_flags.resolve());
    if (*tr) return train(train_flags.resolve(), train_cls, resume);
    if (*rs) return restore(restore_flags.resolve(), ck, input, output);
    if (*ev) return eval(eval_flags.resolve(), gen_ck, base_ck, eval_cls, report);
    if (*gc) return gradcheck(seeds);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

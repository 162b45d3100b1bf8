#include <gtest/gtest.h>

#include <chrono>
#include <set>

#include "igcn/gradient_suite.hpp"

using namespace igcn;

TEST(GradientSuite, EveryOperationPasses) {
  const auto start = std::chrono::steady_clock::now();
  auto reports = run_gradient_suite();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::set<std::string> names;
  for (const auto& r : reports) {
    names.insert(r.op_name);
    EXPECT_TRUE(r.passed) << r.op_name << " rel " << r.max_rel_err << " abs " << r.max_abs_err << " " << r.error;
  }
  for (const char* required : {"conv2d", "deconv2d", "relu", "sigmoid", "mse", "igcn_forward", "rrmb_forward",
                               "pixel_loss", "perceptual_loss", "adversarial_loss_g", "adversarial_loss_d",
                               "au_consistency_loss", "classifier_pretrain_loss", "total_generator_loss", "generator",
                               "baseline_generator", "discriminator", "classifier"})
    EXPECT_TRUE(names.count(required)) << required;
  EXPECT_LT(seconds, 300.0);
  std::cout << "gradient suite: " << reports.size() << " operations in " << seconds << " s\n";
}

TEST(GradientSuite, ReportsCarryErrors) {
  GradientSuiteOptions o;
  o.seeds = 1;
  o.rtol = 0;
  o.atol = 0;
  auto reports = run_gradient_suite(o);
  bool any_failed = false;
  for (const auto& r : reports) any_failed = any_failed || !r.passed;
  EXPECT_TRUE(any_failed);
}

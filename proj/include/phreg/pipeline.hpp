#pragma once

#include <string>
#include <vector>

#include "phreg/bench.hpp"
#include "phreg/config.hpp"
#include "phreg/container.hpp"
#include "phreg/distill.hpp"
#include "phreg/metrics.hpp"

namespace phreg {

struct Bench {
  std::vector<Scene> train;
  std::vector<Scene> test;
  std::vector<std::vector<float>> prototypes;

  std::vector<Image> train_images() const;
  std::vector<Image> test_images() const;
};

/// Scene i of a split uses seed derive_seed(run seed, "bench.<split>", i).
Bench generate_bench(const RunConfig& cfg);
Container bench_to_container(const Bench& bench, const RunConfig& cfg);
Bench bench_from_container(const Container& c);

/// Register-free clean backbone seeded from the run seed.
Model make_teacher_model(const RunConfig& cfg);
/// Clean backbone wrapped with the configured artifact injector.
FeatureFn make_teacher(const RunConfig& cfg, const Model& clean);

struct DistillRun {
  Model student;
  DistillResult result;
};

DistillRun distill_from_config(const RunConfig& cfg, const Bench& bench);

/// Cosine percentiles against denoised teacher targets on the test split, token
/// norm statistics, linear-probe segmentation and the zero-shot Pearson score.
/// Zero-shot queries are the normalized class means of the training features.
MetricsReport evaluate_model(const RunConfig& cfg, const Model& model, const Bench& bench,
                             const FeatureFn& teacher);

struct AblationRow {
  std::string sweep;
  std::size_t value = 0;
  CosinePercentiles cosine;
  double final_loss = 0.0;
};

std::vector<AblationRow> ablate_registers(const RunConfig& cfg, const Bench& bench,
                                          const std::vector<std::size_t>& counts = {0, 1, 2, 4, 8, 16});
std::vector<AblationRow> ablate_augmentations(const RunConfig& cfg, const Bench& bench, std::size_t max_views = 10);

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& row);

}  // namespace phreg

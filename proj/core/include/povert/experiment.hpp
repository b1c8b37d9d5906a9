#pragma once

#include <map>
#include <string>
#include <vector>

#include "povert/config.hpp"
#include "povert/field.hpp"
#include "povert/invert.hpp"
#include "povert/metrics.hpp"
#include "povert/pretrain.hpp"

namespace povert::bench {

/// Everything a protocol run needs, parsed strictly from a key-value config
/// (unknown keys are rejected by name).
struct ExperimentConfig {
  std::string protocol;  // pose-benchmark | ablation-init | ablation-ldr | baselines
  int runs = 20;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  int threads = 0;  // 0: POVERT_THREADS env or hardware concurrency
  std::string precision = "f32";

  std::string target_mode = "in-domain";  // in-domain | out-of-domain
  double perturb_magnitude = 0.05;
  std::string init_mode = "estimator";  // estimator | encoder-only | grid | mean | gt
  bool tune = true;

  field::GeneratorConfig gen;
  invert::InversionConfig inv;

  // Pretraining budgets.
  int pretrain_pairs = 2048;
  int holdout_pairs = 256;
  int pose_epochs = 40;
  double pose_lr = 2e-2;
  int encoder_pairs = 384;
  int encoder_epochs = 6;
  double encoder_lr = 5e-3;
  int train_batch = 32;
  int avg_latent_samples = 1000;

  int grid_yaw = 5;
  int grid_pitch = 3;

  std::vector<double> lambda_dr_values{0.0, 1.0, 50.0};

  /// The canonical serialized snapshot written next to results.
  std::string snapshot() const;
};

ExperimentConfig parse_experiment_config(config::KeyValue& kv);
ExperimentConfig load_experiment_config(const std::string& path);

struct RunRecord {
  std::uint64_t seed = 0;
  std::string variant;  // protocol-specific label (e.g. "full", "joint", "ldr_1")
  std::map<std::string, double> metrics;
};

struct ExperimentReport {
  ExperimentConfig cfg;
  std::vector<RunRecord> runs;

  std::string table_text() const;
  std::string csv() const;
  std::string records_text() const;  // "seed variant metric value" lines

  std::vector<double> metric_of(const std::string& variant, const std::string& key) const;
};

/// Executes the configured protocol, writing per-run artifact directories and
/// the aggregate report files under cfg.out_dir. Throws RunFailure if any run
/// failed (after finishing the rest).
ExperimentReport run_experiment(const ExperimentConfig& cfg);

/// Recompute the standard metrics of one run directory from its persisted
/// artifacts (target/final tensors and pose files).
std::map<std::string, double> recompute_run_metrics(const std::string& run_dir);

/// Parse a metrics.txt ("name value" lines).
std::map<std::string, double> parse_metrics_file(const std::string& path);

int resolve_threads(int requested);

}  // namespace povert::bench

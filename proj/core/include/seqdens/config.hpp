#pragma once

#include <memory>
#include <string>
#include <vector>

#include "seqdens/data.hpp"
#include "seqdens/estimators.hpp"
#include "seqdens/training.hpp"

namespace seqdens {

// One cell of the experiment matrix: task x family/size x raw/distilled,
// plus the training, inference and evaluation settings. Fully serializable;
// the hash of the canonical serialization is embedded in every artifact.
struct ExperimentConfig {
  int schema_version = 1;
  uint64_t seed = 1;
  TaskSpec task;
  std::string model_family = "gauss";  // ar | gauss | flow
  std::string model_size = "gauss-base-toy";
  std::string data_variant = "raw";  // raw | distilled
  TrainSchedule training;
  // inference settings
  int beam_width = 4;
  std::vector<int> refine_steps = {0, 1, 2, 4, 8};
  std::string length_mode = "predicted";  // predicted | ground-truth
  int candidates = 10;
  // evaluation settings
  int64_t is_samples = 1000;
  int speed_repetitions = 5;

  void validate() const;

  // Strict JSON round trip: unknown keys are rejected.
  static ExperimentConfig parse(const std::string& json_text);
  std::string serialize() const;
  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;

  // FNV-1a over the canonical serialization.
  std::string hash() const;
  // Hash of the task subtree only; ties datasets to the experiments that
  // may consume them.
  std::string task_hash() const;
};

std::string fnv1a_hex(const std::string& text);

// Architecture from the size registry with task-dependent fields filled in.
ModelConfig resolve_model_config(const ExperimentConfig& config);

// Fresh model of the configured family, seeded from the experiment seed.
std::unique_ptr<DensityEstimator> build_model(const ExperimentConfig& config);

}  // namespace seqdens

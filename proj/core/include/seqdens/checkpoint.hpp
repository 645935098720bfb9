#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "seqdens/config.hpp"
#include "seqdens/estimators.hpp"
#include "seqdens/training.hpp"

namespace seqdens {

struct OptimizerSnapshot {
  int64_t step_count = 0;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
};

// Self-describing binary checkpoint: JSON header (config, hashes, parameter
// map layout, flow topology flags, optimizer/PRNG state meta) followed by
// raw little-endian doubles. Reload reproduces evaluation bit-identically
// on the same platform.
void save_checkpoint(const std::string& path, const ExperimentConfig& config,
                     const DensityEstimator& model, int64_t step,
                     double dev_ll, double dev_bleu,
                     const OptimizerSnapshot* opt = nullptr,
                     const std::array<uint64_t, 4>* rng_state = nullptr);

struct LoadedCheckpoint {
  ExperimentConfig config;
  std::unique_ptr<DensityEstimator> model;
  int64_t step = 0;
  double dev_ll = 0.0;
  double dev_bleu = 0.0;
  std::optional<OptimizerSnapshot> optimizer;
  std::optional<std::array<uint64_t, 4>> rng_state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace seqdens

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "seqdens/models.hpp"
#include "seqdens/rng.hpp"

namespace seqdens {

// Bijective token <-> id map. Ids 0..2 are reserved (PAD, BOS, EOS) and are
// never produced by the task generators.
class Vocab {
 public:
  Vocab();
  int64_t add(const std::string& token);
  int64_t to_id(const std::string& token) const;
  const std::string& to_token(int64_t id) const;
  int64_t size() const { return static_cast<int64_t>(id_to_token_.size()); }

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

 private:
  std::vector<std::string> id_to_token_;
  std::map<std::string, int64_t> token_to_id_;
};

struct TaskSpec {
  std::string kind = "synonym";  // copy | reverse | synonym
  int64_t vocab_size = 64;
  int64_t min_len = 8;
  int64_t max_len = 32;  // raw source/target length range, inclusive
  int synonym_fanout = 2;
  int64_t reference_cap = 32;  // enumerate all m^len references up to this
  uint64_t seed = 1;
  int64_t n_train = 20000;
  int64_t n_dev = 1000;
  int64_t n_test = 1000;

  void validate() const;
};

struct SequencePair {
  std::vector<int64_t> source;
  std::vector<int64_t> target;  // EOS-padded to a multiple of 4
  int64_t raw_target_len = 0;
  // Valid alternative targets (content tokens, unpadded); test split only.
  std::vector<std::vector<int64_t>> references;

  int64_t padded_target_len() const { return static_cast<int64_t>(target.size()); }
  // Content tokens + the first EOS when padding added one.
  int64_t counted_tokens() const {
    return raw_target_len + (padded_target_len() > raw_target_len ? 1 : 0);
  }
};

// Deterministic concept/synonym layout inside the vocabulary:
// sources s0..s{K-1} at ids 3..3+K-1, synonym j of concept i right after.
struct SynonymTable {
  int64_t concepts = 0;
  int fanout = 1;

  static SynonymTable build(const TaskSpec& spec);
  int64_t source_id(int64_t concept_id) const {
    return kReservedTokens + concept_id;
  }
  int64_t target_id(int64_t concept_id, int j) const {
    return kReservedTokens + concepts + concept_id * fanout + j;
  }
  int64_t concept_of_source(int64_t id) const { return id - kReservedTokens; }
  bool is_source(int64_t id) const {
    return id >= kReservedTokens && id < kReservedTokens + concepts;
  }
};

struct Dataset {
  TaskSpec spec;
  Vocab vocab;
  std::vector<SequencePair> train, dev, test;
};

// Pure function of the spec: identical bytes for identical specs.
Dataset generate_dataset(const TaskSpec& spec);

// Length filter (either side > max_len drops the pair) plus EOS padding of
// the target to the least multiple of 4 >= its raw length.
std::vector<SequencePair> preprocess(std::vector<SequencePair> pairs,
                                     int64_t max_len = 64);

// Exact conditional entropy in nats for a length-len output; zero for the
// deterministic tasks.
double true_conditional_entropy(const TaskSpec& spec, int64_t len);

// One epoch of batches: index lists bucketed by (source length, padded
// target length), order and membership seeded deterministically.
std::vector<std::vector<size_t>> epoch_batches(
    const std::vector<SequencePair>& split, int64_t batch_size, uint64_t seed,
    int64_t epoch);

// Raw target sampler for a given source row (synonym task), used by the
// entropy oracles.
std::vector<int64_t> sample_task_target(const TaskSpec& spec,
                                        const SynonymTable& table,
                                        const std::vector<int64_t>& src,
                                        Rng& rng);

// Unigram conditional entropy H(target token | aligned source token), nats.
double aligned_conditional_entropy(const std::vector<SequencePair>& pairs);

// Dataset directory round trip (vocab/spec/splits/references/id cache).
void save_dataset(const Dataset& ds, const std::string& dir,
                  const std::string& config_hash);
Dataset load_dataset(const std::string& dir);
// The hash recorded by save_dataset, for provenance checks.
std::string dataset_task_hash(const std::string& dir);

TokenRows batch_sources(const std::vector<SequencePair>& split,
                        const std::vector<size_t>& idx);
TokenRows batch_targets(const std::vector<SequencePair>& split,
                        const std::vector<size_t>& idx);

}  // namespace seqdens

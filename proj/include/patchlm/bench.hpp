#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "patchlm/model.hpp"

namespace patchlm {

/// Synthetic batches of square images at one resolution, each followed by
/// `text_tokens` random byte tokens.
struct SyntheticWorkload {
  std::size_t resolution = 512;
  std::size_t batch_size = 1;
  std::size_t text_tokens = 100;
  std::uint64_t seed = 0;

  void validate() const;
  // Image tokens + newline tokens + text tokens, per sample.
  std::size_t tokens_per_sample() const;
  std::size_t tokens_per_batch() const { return batch_size * tokens_per_sample(); }
};

struct WorkloadBatch {
  std::vector<SequenceInput> sequences;
  std::size_t token_count = 0;  // sum of sequence lengths
};

WorkloadBatch make_workload_batch(const SyntheticWorkload& workload, std::mt19937_64& rng);

struct ThroughputReport {
  double tokens_per_second = 0.0;  // mean of per-batch rates
  double window_seconds = 0.0;
  std::size_t batches_measured = 0;
  std::size_t batches_excluded = 0;  // zero measured duration
  std::size_t tokens_per_batch = 0;
  SyntheticWorkload workload;
  std::string mode;

  std::string to_json() const;
};

using BatchRunner = std::function<void(const WorkloadBatch&)>;
using SecondsClock = std::function<double()>;

double steady_seconds();

// Runs batches until the window elapses; only batches finishing inside the
// window count. Throws ContractError for window < 1s and when no batch was
// measured.
ThroughputReport measure_throughput(const BatchRunner& runner, const SyntheticWorkload& workload,
                                    double window_seconds, const SecondsClock& clock = steady_seconds);

// Forward, next-token loss over the text positions, and backward, one graph
// per sequence.
BatchRunner training_step_runner(const ModelParams& params, AttentionKernel kernel = AttentionKernel::kBlocked);

using LogitsPath = std::function<Tensor(const SequenceInput&)>;

struct EquivalenceReport {
  std::string op;
  std::size_t cases = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string failure;  // set on shape divergence

  std::string to_json() const;
};

EquivalenceReport verify_equivalence(const std::string& op, const LogitsPath& reference, const LogitsPath& optimized,
                                     const std::vector<SequenceInput>& cases, double tolerance = 1e-9);

// Random interleavings of text tokens and random patches.
std::vector<SequenceInput> random_mixed_sequences(std::size_t count, std::size_t min_len, std::size_t max_len,
                                                  const ModelConfig& config, std::mt19937_64& rng);

LogitsPath attention_path(const ModelParams& params, AttentionKernel kernel, std::size_t block = 32,
                          bool causal = true);

}  // namespace patchlm

#include "patchlm/bench.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>

#include "patchlm/errors.hpp"
#include "patchlm/instruction.hpp"
#include "patchlm/patchifier.hpp"

namespace patchlm {

using nlohmann::json;

void SyntheticWorkload::validate() const {
  if (resolution < kPatchSide) throw ConfigError("bench resolution must be >= 30, got " + std::to_string(resolution));
  if (batch_size == 0) throw ConfigError("bench batch size must be >= 1");
  if (text_tokens < 2) throw ConfigError("bench text length must be >= 2 tokens");
}

std::size_t SyntheticWorkload::tokens_per_sample() const {
  return token_budget(resolution, resolution).total() + text_tokens;
}

WorkloadBatch make_workload_batch(const SyntheticWorkload& workload, std::mt19937_64& rng) {
  workload.validate();
  std::uniform_real_distribution<double> pixel(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> byte(32, 126);
  WorkloadBatch batch;
  for (std::size_t s = 0; s < workload.batch_size; ++s) {
    RawImage img(workload.resolution, workload.resolution);
    for (auto& p : img.pixels) p = pixel(rng);
    SequenceInput seq;
    seq.push_grid(patchify(img, ResizePolicy::original()), SpecialTokens::kNewline);
    for (std::size_t t = 0; t < workload.text_tokens; ++t) seq.push_token(byte(rng));
    batch.token_count += seq.size();
    batch.sequences.push_back(std::move(seq));
  }
  return batch;
}

double steady_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

ThroughputReport measure_throughput(const BatchRunner& runner, const SyntheticWorkload& workload,
                                    double window_seconds, const SecondsClock& clock) {
  if (!(window_seconds >= 1.0)) throw ContractError("throughput window must be >= 1 second");
  workload.validate();
  std::mt19937_64 rng(workload.seed);

  ThroughputReport report;
  report.window_seconds = window_seconds;
  report.workload = workload;
  report.tokens_per_batch = workload.tokens_per_batch();

  double rate_sum = 0.0;
  const double start = clock();
  while (true) {
    const WorkloadBatch batch = make_workload_batch(workload, rng);
    if (batch.token_count != report.tokens_per_batch) {
      throw ContractError("token accounting drift: built " + std::to_string(batch.token_count) + ", expected " +
                          std::to_string(report.tokens_per_batch));
    }
    const double t0 = clock();
    if (t0 - start >= window_seconds) break;
    runner(batch);
    const double t1 = clock();
    if (t1 - start > window_seconds) break;
    const double dt = t1 - t0;
    if (dt <= 0.0) {
      ++report.batches_excluded;
      continue;
    }
    rate_sum += static_cast<double>(batch.token_count) / dt;
    ++report.batches_measured;
  }
  if (report.batches_measured == 0) {
    throw ContractError("no batch completed inside the " + std::to_string(window_seconds) + "s window (" +
                        std::to_string(report.batches_excluded) + " zero-duration batches excluded)");
  }
  report.tokens_per_second = rate_sum / static_cast<double>(report.batches_measured);
  return report;
}

std::string ThroughputReport::to_json() const {
  return json{{"tokens_per_second", tokens_per_second},
              {"window_seconds", window_seconds},
              {"batches_measured", batches_measured},
              {"batches_excluded", batches_excluded},
              {"tokens_per_batch", tokens_per_batch},
              {"tokens_per_sample", workload.tokens_per_sample()},
              {"resolution", workload.resolution},
              {"batch_size", workload.batch_size},
              {"text_tokens", workload.text_tokens},
              {"mode", mode}}
      .dump(2);
}

BatchRunner training_step_runner(const ModelParams& params, AttentionKernel kernel) {
  return [&params, kernel](const WorkloadBatch& batch) {
    ForwardOptions opts;
    opts.kernel = kernel;
    for (const auto& seq : batch.sequences) {
      std::vector<std::uint8_t> mask(seq.size(), 0);
      for (std::size_t i = 1; i < seq.size(); ++i) mask[i] = seq[i].is_patch ? 0 : 1;
      Graph g;
      BoundModel model(g, params, nullptr, Trainable::kBase);
      g.backward(masked_lm_loss(model, seq, mask, opts));
    }
  };
}

std::string EquivalenceReport::to_json() const {
  json j{{"op", op}, {"cases", cases}, {"max_deviation", max_deviation}, {"tolerance", tolerance}, {"passed", passed}};
  if (!failure.empty()) j["failure"] = failure;
  return j.dump(2);
}

EquivalenceReport verify_equivalence(const std::string& op, const LogitsPath& reference, const LogitsPath& optimized,
                                     const std::vector<SequenceInput>& cases, double tolerance) {
  if (cases.empty()) throw ContractError("verify_equivalence: no cases");
  EquivalenceReport report;
  report.op = op;
  report.tolerance = tolerance;
  for (const auto& input : cases) {
    const Tensor a = reference(input);
    const Tensor b = optimized(input);
    ++report.cases;
    if (a.shape() != b.shape()) {
      report.failure = op + ": shape divergence " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape());
      report.passed = false;
      report.max_deviation = INFINITY;
      return report;
    }
    report.max_deviation = std::max(report.max_deviation, max_abs_diff(a, b));
  }
  report.passed = report.max_deviation < tolerance;
  return report;
}

std::vector<SequenceInput> random_mixed_sequences(std::size_t count, std::size_t min_len, std::size_t max_len,
                                                  const ModelConfig& config, std::mt19937_64& rng) {
  if (min_len == 0 || min_len > max_len) throw ContractError("random_mixed_sequences: bad length range");
  std::uniform_int_distribution<std::size_t> length(min_len, max_len);
  std::uniform_int_distribution<std::size_t> token(0, config.vocab - 1);
  std::bernoulli_distribution is_patch(0.5);
  std::normal_distribution<double> pixel(0.0, 0.5);
  std::vector<SequenceInput> out;
  std::vector<double> patch(config.patch_dim);
  for (std::size_t c = 0; c < count; ++c) {
    SequenceInput seq;
    const std::size_t n = length(rng);
    for (std::size_t i = 0; i < n; ++i) {
      if (is_patch(rng)) {
        for (auto& p : patch) p = pixel(rng);
        seq.push_patch(patch);
      } else {
        seq.push_token(token(rng));
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

LogitsPath attention_path(const ModelParams& params, AttentionKernel kernel, std::size_t block, bool causal) {
  return [&params, kernel, block, causal](const SequenceInput& input) {
    ForwardOptions opts;
    opts.kernel = kernel;
    opts.attention_block = block;
    opts.causal = causal;
    return compute_logits(params, input, opts);
  };
}

}  // namespace patchlm

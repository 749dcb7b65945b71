#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "patchlm/instruction.hpp"
#include "patchlm/lora.hpp"
#include "patchlm/model.hpp"
#include "patchlm/optimizer.hpp"

namespace patchlm {

struct MixtureEntry {
  std::string name;
  std::filesystem::path path;
  std::size_t pair_count = 0;
};

/// Datasets aggregated into one pool of instruction/response pairs.
struct MixtureManifest {
  std::vector<MixtureEntry> entries;

  std::size_t total_pairs() const;
  void validate() const;

  // {"datasets": [{"name": ..., "path": ..., "pairs": N}, ...]}; relative
  // paths resolve against the manifest's directory. Files are not opened.
  static MixtureManifest load(const std::filesystem::path& path);
  static MixtureManifest parse(const std::string& text, const std::filesystem::path& base_dir = {});
  std::string to_json() const;
};

struct PairRef {
  std::size_t entry = 0;
  std::size_t index = 0;
};

// Uniform over the aggregated pool, so entry k is drawn with probability
// pair_count_k / total_pairs.
PairRef draw_pair(const MixtureManifest& manifest, std::mt19937_64& rng);

class DataPool {
 public:
  // Reads every entry's JSON-lines file; a line count that disagrees with
  // pair_count is a ConfigError.
  static DataPool load(const MixtureManifest& manifest);
  static DataPool from_datasets(std::vector<std::pair<std::string, std::vector<InstructionSample>>> datasets);

  const MixtureManifest& manifest() const { return manifest_; }
  const InstructionSample& at(PairRef ref) const { return samples_.at(ref.entry).at(ref.index); }
  std::size_t size() const { return manifest_.total_pairs(); }

 private:
  MixtureManifest manifest_;
  std::vector<std::vector<InstructionSample>> samples_;
};

std::vector<InstructionSample> sample_batch(const DataPool& pool, std::size_t batch_size, std::mt19937_64& rng);

struct TrainConfig {
  std::size_t batch_size = 64;
  double lr = 1e-5;
  double weight_decay = 0.1;
  double warmup_ratio = 0.03;
  std::size_t epochs = 3;
  ResizePolicy resolution = ResizePolicy::fixed(512);
  std::optional<LoraConfig> lora;  // set: LoRA mode, otherwise full-parameter
  std::uint64_t seed = 0;

  std::size_t micro_batch = 0;  // 0: whole batch at once
  std::size_t max_steps = 0;    // 0: epochs * ceil(pool / batch)
  std::size_t threads = 1;
  std::size_t prefetch = 2;
  AttentionKernel kernel = AttentionKernel::kBlocked;
  AdamWConfig adamw;

  std::filesystem::path out_dir;  // empty: no checkpoints or CSV
  std::size_t checkpoint_every_epochs = 1;

  void validate() const;
};

struct StepLog {
  std::size_t step = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;
  std::string resolutions;  // drawn sides joined by '|', "original" if unresized
};

struct TrainableModel {
  ModelParams params;
  std::optional<LoraAdapters> adapters;
};

struct TrainReport {
  std::size_t total_steps = 0;
  std::vector<StepLog> log;
  std::vector<std::filesystem::path> checkpoints;
  std::uint64_t base_fingerprint_before = 0;
  std::uint64_t base_fingerprint_after = 0;
};

struct GradientResult {
  double loss = 0.0;  // mean of per-sample losses
  std::map<std::string, Tensor> grads;
};

// Mean-loss gradients over the samples. In LoRA mode only adapter tensors get
// gradients. `micro_batch` > 0 accumulates over chunks of that size.
GradientResult compute_gradients(const TrainableModel& model, const std::vector<TokenizedSample>& samples,
                                 const ForwardOptions& options = {}, std::size_t micro_batch = 0,
                                 std::size_t threads = 1);

void apply_gradients(TrainableModel& model, const GradientResult& gradients, AdamWState& state, double lr,
                     double weight_decay, const AdamWConfig& adamw = {});

std::size_t total_train_steps(std::size_t pool_size, const TrainConfig& cfg);

std::string loss_log_csv(const std::vector<StepLog>& log);

// In LoRA mode adapters are attached (seeded) if `model` has none.
TrainReport train(const DataPool& pool, TrainableModel& model, const TrainConfig& cfg,
                  const std::function<void(const StepLog&)>& on_step = {});

// The synthetic memorization task: solid-color 60x60 images asked "What
// color?" with distinct one-byte answers.
std::vector<InstructionSample> solid_color_task(std::size_t count = 20);

}  // namespace patchlm

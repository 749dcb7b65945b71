#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "patchlm/model.hpp"

namespace testutil {

// Removed with its contents on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("patchlm-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Small enough for per-coordinate finite differences.
inline patchlm::ModelConfig tiny_config() {
  patchlm::ModelConfig c;
  c.hidden = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.vocab = 16;
  c.patch_dim = 6;
  c.max_seq = 64;
  return c;
}

// init_params followed by small random gains and biases, so that every
// parameter carries a non-trivial gradient.
inline patchlm::ModelParams perturbed_params(const patchlm::ModelConfig& config, std::uint64_t seed,
                                             double init_std = 0.3) {
  std::mt19937_64 rng(seed);
  patchlm::ModelParams p = patchlm::init_params(config, rng);
  std::normal_distribution<double> noise(0.0, init_std);
  for (auto& [name, t] : p.tensors) {
    const bool gain = name.ends_with(".gain");
    for (auto& v : t.data()) v = gain ? 1.0 + 0.1 * noise(rng) : v + noise(rng);
  }
  return p;
}

inline patchlm::SequenceInput mixed_sequence(const patchlm::ModelConfig& config, std::size_t length,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> pixel(0.0, 0.5);
  std::uniform_int_distribution<std::size_t> token(0, config.vocab - 1);
  patchlm::SequenceInput seq;
  std::vector<double> patch(config.patch_dim);
  for (std::size_t i = 0; i < length; ++i) {
    if (i % 2 == 0) {
      for (auto& v : patch) v = pixel(rng);
      seq.push_patch(patch);
    } else {
      seq.push_token(token(rng));
    }
  }
  return seq;
}

}  // namespace testutil

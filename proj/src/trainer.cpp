#include "patchlm/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <fstream>
#include <future>
#include <mutex>
#include <sstream>
#include <thread>

#include "patchlm/checkpoint.hpp"
#include "patchlm/errors.hpp"

namespace patchlm {

using nlohmann::json;

std::size_t MixtureManifest::total_pairs() const {
  std::size_t total = 0;
  for (const auto& e : entries) total += e.pair_count;
  return total;
}

void MixtureManifest::validate() const {
  if (entries.empty()) throw ConfigError("mixture manifest has no datasets");
  for (const auto& e : entries) {
    if (e.pair_count == 0) throw ConfigError("dataset '" + e.name + "' has a non-positive pair count");
  }
}

MixtureManifest MixtureManifest::parse(const std::string& text, const std::filesystem::path& base_dir) {
  MixtureManifest m;
  try {
    const json j = json::parse(text);
    for (const auto& item : j.at("datasets")) {
      const long long pairs = item.at("pairs").get<long long>();
      if (pairs <= 0) {
        throw ConfigError("dataset '" + item.at("name").get<std::string>() + "' has a non-positive pair count");
      }
      std::filesystem::path p = item.value("path", std::string());
      if (!p.empty() && p.is_relative()) p = base_dir / p;
      m.entries.push_back({item.at("name").get<std::string>(), p, static_cast<std::size_t>(pairs)});
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("mixture manifest: ") + e.what());
  }
  m.validate();
  return m;
}

MixtureManifest MixtureManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.parent_path());
}

std::string MixtureManifest::to_json() const {
  json items = json::array();
  for (const auto& e : entries) items.push_back({{"name", e.name}, {"path", e.path.string()}, {"pairs", e.pair_count}});
  return json{{"datasets", items}}.dump(2);
}

PairRef draw_pair(const MixtureManifest& manifest, std::mt19937_64& rng) {
  const std::size_t total = manifest.total_pairs();
  if (total == 0) throw ConfigError("cannot sample from an empty pool");
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::size_t k = pick(rng);
  for (std::size_t e = 0; e < manifest.entries.size(); ++e) {
    if (k < manifest.entries[e].pair_count) return {e, k};
    k -= manifest.entries[e].pair_count;
  }
  return {manifest.entries.size() - 1, 0};  // unreachable
}

DataPool DataPool::load(const MixtureManifest& manifest) {
  manifest.validate();
  DataPool pool;
  pool.manifest_ = manifest;
  for (const auto& e : manifest.entries) {
    auto samples = load_instruction_jsonl(e.path);
    if (samples.size() != e.pair_count) {
      throw ConfigError("dataset '" + e.name + "' declares " + std::to_string(e.pair_count) + " pairs but " +
                        e.path.string() + " holds " + std::to_string(samples.size()));
    }
    for (auto& s : samples) {
      if (s.dataset.empty()) s.dataset = e.name;
    }
    pool.samples_.push_back(std::move(samples));
  }
  return pool;
}

DataPool DataPool::from_datasets(std::vector<std::pair<std::string, std::vector<InstructionSample>>> datasets) {
  DataPool pool;
  for (auto& [name, samples] : datasets) {
    pool.manifest_.entries.push_back({name, {}, samples.size()});
    for (auto& s : samples) {
      if (s.dataset.empty()) s.dataset = name;
    }
    pool.samples_.push_back(std::move(samples));
  }
  pool.manifest_.validate();
  return pool;
}

std::vector<InstructionSample> sample_batch(const DataPool& pool, std::size_t batch_size, std::mt19937_64& rng) {
  if (pool.size() == 0) throw ConfigError("cannot sample from an empty pool");
  if (batch_size == 0) throw ContractError("batch_size must be >= 1");
  std::vector<InstructionSample> out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) out.push_back(pool.at(draw_pair(pool.manifest(), rng)));
  return out;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) throw ConfigError("warmup_ratio must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (checkpoint_every_epochs == 0) throw ConfigError("checkpoint_every_epochs must be >= 1");
  resolution.validate();
  if (lora) lora->validate();
}

namespace {

struct ChunkResult {
  double loss_sum = 0.0;  // sum of per-sample losses in the chunk
  std::map<std::string, Tensor> grads;
};

ChunkResult chunk_gradients(const TrainableModel& model, const std::vector<TokenizedSample>& samples,
                            std::size_t begin, std::size_t end, double inv_batch, const ForwardOptions& options) {
  Graph g;
  const bool lora = model.adapters.has_value();
  BoundModel bound(g, model.params, lora ? &*model.adapters : nullptr,
                   lora ? Trainable::kAdapters : Trainable::kBase);
  std::vector<Var> losses;
  ChunkResult out;
  for (std::size_t i = begin; i < end; ++i) {
    Var l = masked_lm_loss(bound, samples[i].sequence, samples[i].loss_mask, options);
    out.loss_sum += l.value().item();
    losses.push_back(l);
  }
  Var total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = ops::add(total, losses[i]);
  g.backward(ops::scale(total, inv_batch));
  for (const auto& [name, v] : bound.trainable_vars()) out.grads.emplace(name, g.grad(v));
  return out;
}

}  // namespace

GradientResult compute_gradients(const TrainableModel& model, const std::vector<TokenizedSample>& samples,
                                 const ForwardOptions& options, std::size_t micro_batch, std::size_t threads) {
  if (samples.empty()) throw ContractError("compute_gradients: empty batch");
  const std::size_t chunk = micro_batch == 0 ? 1 : micro_batch;
  const double inv_batch = 1.0 / static_cast<double>(samples.size());

  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t b = 0; b < samples.size(); b += chunk) ranges.emplace_back(b, std::min(b + chunk, samples.size()));

  std::vector<ChunkResult> results(ranges.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, ranges.size()));
  if (workers == 1) {
    for (std::size_t r = 0; r < ranges.size(); ++r) {
      results[r] = chunk_gradients(model, samples, ranges[r].first, ranges[r].second, inv_batch, options);
    }
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t r = w; r < ranges.size(); r += workers) {
          results[r] = chunk_gradients(model, samples, ranges[r].first, ranges[r].second, inv_batch, options);
        }
      }));
    }
    for (auto& j : jobs) j.get();
  }

  // Reduce in chunk order so the result does not depend on thread timing.
  GradientResult out;
  for (auto& r : results) {
    out.loss += r.loss_sum;
    for (auto& [name, g] : r.grads) {
      auto it = out.grads.find(name);
      if (it == out.grads.end()) {
        out.grads.emplace(name, std::move(g));
      } else {
        kernels::add_inplace(it->second, g);
      }
    }
  }
  out.loss *= inv_batch;
  return out;
}

void apply_gradients(TrainableModel& model, const GradientResult& gradients, AdamWState& state, double lr,
                     double weight_decay, const AdamWConfig& adamw) {
  std::map<std::string, Tensor*> targets;
  if (model.adapters) {
    for (auto& [name, pair] : model.adapters->pairs) {
      targets.emplace(name + ".lora_a", &pair.a);
      targets.emplace(name + ".lora_b", &pair.b);
    }
  } else {
    for (auto& [name, t] : model.params.tensors) targets.emplace(name, &t);
  }
  adamw_step(targets, gradients.grads, state, lr, weight_decay, adamw);
}

std::size_t total_train_steps(std::size_t pool_size, const TrainConfig& cfg) {
  const std::size_t per_epoch = (pool_size + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * per_epoch;
  return cfg.max_steps != 0 ? std::min(total, cfg.max_steps) : total;
}

std::string loss_log_csv(const std::vector<StepLog>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "step,lr,loss,resolution\n";
  for (const auto& s : log) os << s.step << ',' << s.lr << ',' << s.loss << ',' << s.resolutions << '\n';
  return os.str();
}

namespace {

struct PreparedBatch {
  std::vector<TokenizedSample> samples;
  std::string resolutions;
  std::exception_ptr error;
};

PreparedBatch prepare_batch(const DataPool& pool, const TrainConfig& cfg, std::mt19937_64& rng) {
  PreparedBatch b;
  for (const auto& s : sample_batch(pool, cfg.batch_size, rng)) {
    b.samples.push_back(build_sample(s, cfg.resolution, rng));
    if (!b.resolutions.empty()) b.resolutions += '|';
    const std::size_t side = b.samples.back().resolution;
    b.resolutions += side == 0 ? std::string("original") : std::to_string(side);
  }
  return b;
}

// Builds batches on a background thread, in draw order, at most `capacity` ahead.
class Prefetcher {
 public:
  Prefetcher(const DataPool& pool, const TrainConfig& cfg, std::size_t steps)
      : pool_(pool), cfg_(cfg), rng_(cfg.seed), capacity_(cfg.prefetch) {
    if (capacity_ > 0) {
      worker_ = std::jthread([this, steps](std::stop_token stop) { produce(stop, steps); });
    }
  }

  ~Prefetcher() {
    if (worker_.joinable()) {
      worker_.request_stop();
      cv_.notify_all();
    }
  }

  PreparedBatch next() {
    if (capacity_ == 0) return prepare_batch(pool_, cfg_, rng_);
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [this] { return !queue_.empty(); });
    PreparedBatch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    if (b.error) std::rethrow_exception(b.error);
    return b;
  }

 private:
  void produce(std::stop_token stop, std::size_t steps) {
    for (std::size_t i = 0; i < steps; ++i) {
      PreparedBatch b;
      try {
        b = prepare_batch(pool_, cfg_, rng_);
      } catch (...) {
        b.error = std::current_exception();
      }
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [&] { return queue_.size() < capacity_ || stop.stop_requested(); });
      if (stop.stop_requested()) return;
      const bool failed = static_cast<bool>(b.error);
      queue_.push_back(std::move(b));
      cv_.notify_all();
      if (failed) return;
    }
  }

  const DataPool& pool_;
  const TrainConfig& cfg_;
  std::mt19937_64 rng_;
  std::size_t capacity_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<PreparedBatch> queue_;
  std::jthread worker_;
};

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place");
}

}  // namespace

TrainReport train(const DataPool& pool, TrainableModel& model, const TrainConfig& cfg,
                  const std::function<void(const StepLog&)>& on_step) {
  cfg.validate();
  model.params.validate();
  if (pool.size() == 0) throw ConfigError("training pool is empty");
  if (cfg.lora && !model.adapters) {
    std::mt19937_64 lora_rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
    model.adapters = attach(model.params, *cfg.lora, lora_rng).adapters();
  }
  if (!cfg.lora && model.adapters) throw ConfigError("full-parameter training requested on a model with adapters");

  TrainReport report;
  report.total_steps = total_train_steps(pool.size(), cfg);
  report.base_fingerprint_before = fingerprint(model.params.tensors);
  const std::size_t steps_per_epoch = (pool.size() + cfg.batch_size - 1) / cfg.batch_size;

  const bool persist = !cfg.out_dir.empty();
  if (persist) {
    std::filesystem::create_directories(cfg.out_dir);
    if (model.adapters) save_params(cfg.out_dir / "base.ckpt", model.params);
  }
  auto save = [&] {
    if (!persist) return;
    std::filesystem::path path;
    if (model.adapters) {
      path = cfg.out_dir / "adapters.ckpt";
      save_adapters(path, *model.adapters, model.params.config);
    } else {
      path = cfg.out_dir / "model.ckpt";
      save_params(path, model.params);
    }
    write_text_atomic(cfg.out_dir / "loss.csv", loss_log_csv(report.log));
    if (report.checkpoints.empty() || report.checkpoints.back() != path) report.checkpoints.push_back(path);
  };

  ForwardOptions options;
  options.kernel = cfg.kernel;
  AdamWState state;
  std::size_t saved_through = 0;
  Prefetcher prefetcher(pool, cfg, report.total_steps);
  for (std::size_t step = 0; step < report.total_steps; ++step) {
    PreparedBatch batch = prefetcher.next();
    const double lr = lr_at(step + 1, report.total_steps, cfg.lr, cfg.warmup_ratio);
    const GradientResult grads = compute_gradients(model, batch.samples, options, cfg.micro_batch, cfg.threads);
    if (!std::isfinite(grads.loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    apply_gradients(model, grads, state, lr, cfg.weight_decay, cfg.adamw);

    report.log.push_back({step + 1, lr, grads.loss, std::move(batch.resolutions)});
    if (on_step) on_step(report.log.back());
    const bool epoch_end = (step + 1) % steps_per_epoch == 0;
    const std::size_t epoch = (step + 1) / steps_per_epoch;
    if (epoch_end && epoch % cfg.checkpoint_every_epochs == 0) {
      save();
      saved_through = step + 1;
    }
  }
  if (persist && saved_through != report.total_steps) save();
  report.base_fingerprint_after = fingerprint(model.params.tensors);
  return report;
}

std::vector<InstructionSample> solid_color_task(std::size_t count) {
  static constexpr std::uint8_t kLevels[] = {0, 128, 255};
  if (count == 0 || count > 26) throw ContractError("solid_color_task supports 1..26 samples");
  std::vector<InstructionSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t r = kLevels[i % 3], g = kLevels[(i / 3) % 3], b = kLevels[(i / 9) % 3];
    out.push_back({RawImage::solid(60, 60, r, g, b), "What color?", std::string(1, static_cast<char>('a' + i)),
                   "solid-color"});
  }
  return out;
}

}  // namespace patchlm

// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failures. `acceptance N` runs criterion N alone.

#include <json.hpp>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "../helpers.hpp"
#include "patchlm/bench.hpp"
#include "patchlm/checkpoint.hpp"
#include "patchlm/evaluator.hpp"
#include "patchlm/grad_check.hpp"
#include "patchlm/instruction.hpp"
#include "patchlm/lora.hpp"
#include "patchlm/trainer.hpp"

using namespace patchlm;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Detail {
 public:
  template <typename T>
  Detail& operator<<(const T& v) {
    os_ << v;
    return *this;
  }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::size_t ceil30(std::size_t v) { return (v + 29) / 30; }

// ---------------------------------------------------------------- 1

Outcome token_budget_oracle() {
  struct Row {
    std::size_t side, image, newline;
  };
  const Row table[] = {{448, 225, 15}, {512, 324, 18}, {768, 676, 26}, {1024, 1225, 35}};
  bool ok = true;
  double worst = 0;
  Detail d;
  for (const Row& r : table) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string cmd = std::string(PATCHLM_CLI_PATH) + " count-tokens --width " + std::to_string(r.side) +
                            " --height " + std::to_string(r.side);
    FILE* pipe = popen(cmd.c_str(), "r");
    std::string out;
    std::array<char, 512> buf{};
    for (std::size_t n; pipe && (n = fread(buf.data(), 1, buf.size(), pipe)) > 0;) out.append(buf.data(), n);
    const int status = pipe ? pclose(pipe) : -1;
    const double dt = seconds_since(t0);
    worst = std::max(worst, dt);
    std::size_t image = 0, newline = 0;
    try {
      const json j = json::parse(out);
      image = j.at("image_tokens");
      newline = j.at("newline_tokens");
    } catch (const std::exception&) {
      ok = false;
    }
    // Independent count: ceil(side/30)^2 patches, one newline per row.
    const bool oracle = ceil30(r.side) * ceil30(r.side) == r.image && ceil30(r.side) == r.newline;
    ok = ok && status == 0 && image == r.image && newline == r.newline && oracle;
    if (r.side == 512) ok = ok && image + newline == 342;
    d << r.side << "->" << image << "," << newline << " ";
  }
  ok = ok && worst < 1.0;
  d << "slowest " << std::fixed << std::setprecision(3) << worst << "s";
  return {ok, d.str()};
}

// ---------------------------------------------------------------- 2

Outcome manifest_arithmetic() {
  const MixtureManifest m =
      MixtureManifest::load(std::filesystem::path(PATCHLM_SOURCE_DIR) / "data" / "mixture_reference.json");
  std::size_t by_hand = 0;
  for (const auto& e : m.entries) by_hand += e.pair_count;
  const bool ok = m.entries.size() == 13 && m.total_pairs() == 371017 && by_hand == 371017;
  return {ok, (Detail() << m.entries.size() << " datasets, total " << m.total_pairs()).str()};
}

// ---------------------------------------------------------------- 3

ModelConfig toy_config() { return ModelConfig{}; }

Outcome architecture() {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig c = toy_config();
  const ModelParams p = testutil::perturbed_params(c, 21, 0.02);
  const SequenceInput seq = testutil::mixed_sequence(c, 6, 4);
  const auto names = parameter_names(c);
  std::vector<Tensor> tensors;
  for (const auto& n : names) tensors.push_back(p.at(n));

  const ScalarFn loss = [&](Graph& g, std::span<const Var> vars) {
    std::map<std::string, Var> bound;
    for (std::size_t i = 0; i < names.size(); ++i) bound.emplace(names[i], vars[i]);
    BoundModel model(g, c, bound);
    std::vector<std::size_t> targets(seq.size());
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = (i * 131 + 7) % c.vocab;
    return ops::cross_entropy(forward(model, seq), targets, std::vector<double>(seq.size(), 1.0));
  };
  GradCheckOptions gc;
  gc.tolerance = 1e-5;
  gc.max_coords_per_tensor = 200;
  gc.directions = 2;
  const GradCheckReport r = grad_check(loss, tensors, gc, names);
  std::size_t coords = 0;
  for (const auto& t : r.per_tensor) coords += t.coords_checked;

  // Causal invariance: earlier logits ignore later elements. Different
  // sequence lengths change GEMM blocking, hence a rounding-level tolerance.
  double causal_worst = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    std::mt19937_64 rng(500 + trial);
    const std::size_t len = 4 + trial % 29;
    const SequenceInput full = testutil::mixed_sequence(c, len, 900 + trial);
    const std::size_t cut = 1 + rng() % (len - 1);
    SequenceInput other = full.prefix(cut);
    const SequenceInput tail = testutil::mixed_sequence(c, len - cut, 7000 + trial);
    for (std::size_t i = 0; i < tail.size(); ++i) {
      if (tail[i].is_patch) {
        other.push_patch(tail.patch(tail[i].index));
      } else {
        other.push_token(tail.token(i));
      }
    }
    const Tensor a = compute_logits(p, full), b = compute_logits(p, other);
    for (std::size_t row = 0; row < cut; ++row)
      for (std::size_t v = 0; v < c.vocab; ++v) causal_worst = std::max(causal_worst, std::abs(a.at(row, v) - b.at(row, v)));
  }

  // RoPE: <R(m)q, R(n)k> depends only on n - m.
  double rope_worst = 0;
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor q = Tensor::normal({1, c.head_dim()}, 1.0, rng);
    const Tensor k = Tensor::normal({1, c.head_dim()}, 1.0, rng);
    const std::size_t m = rng() % 1000, n = rng() % 1000, shift = rng() % 3000;
    auto dot_at = [&](std::size_t pm, std::size_t pn) {
      const std::size_t a[] = {pm}, b[] = {pn};
      const Tensor rq = rope_apply(q, a, c.rope_base), rk = rope_apply(k, b, c.rope_base);
      double s = 0;
      for (std::size_t i = 0; i < c.head_dim(); ++i) s += rq[i] * rk[i];
      return s;
    };
    rope_worst = std::max(rope_worst, std::abs(dot_at(m, n) - dot_at(m + shift, n + shift)));
  }

  const double dt = seconds_since(t0);
  const bool ok = r.passed && r.max_relative_error < 1e-5 && causal_worst < 1e-12 && rope_worst < 1e-9 && dt < 300;
  Detail d;
  d << "grad rel err " << std::scientific << std::setprecision(2) << r.max_relative_error << " over " << r.per_tensor.size()
    << " tensors (" << coords << " coords + directional), causal max diff " << causal_worst << " on 100 seqs, rope "
    << rope_worst << ", " << std::fixed << std::setprecision(1) << dt << "s";
  return {ok, d.str()};
}

// ---------------------------------------------------------------- 4

RawImage noise_image(std::size_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> bytes(side * side * 3);
  for (auto& b : bytes) b = static_cast<std::uint8_t>(rng());
  return RawImage::from_bytes(side, side, bytes);
}

Outcome variable_resolution() {
  const auto t0 = std::chrono::steady_clock::now();
  testutil::TempDir dir;
  std::mt19937_64 rng(4);
  const ModelParams p = init_params(toy_config(), rng);
  ForwardOptions fast;
  fast.kernel = AttentionKernel::kBlocked;
  bool ok = true;
  Detail d;
  const std::string instruction = "Describe the image.";
  for (std::size_t side : {448, 512, 768, 1024, 1440}) {
    const SequenceInput prompt = build_prompt(noise_image(side, side), instruction, ResizePolicy::original());
    const TokenBudget b = token_budget(side, side);
    // " User:" + instruction + " Assistant:" + answer-start
    const std::size_t text = 6 + instruction.size() + 11 + 1;
    const Tensor logits = compute_logits(p, prompt, fast);
    bool finite = true;
    for (double v : logits.data()) finite = finite && std::isfinite(v);
    ok = ok && prompt.num_patches() == b.image_tokens && prompt.size() == b.total() + text &&
         logits.rows() == prompt.size() && finite;
    d << side << ":" << prompt.size() << " ";
  }

  // Train briefly under the dynamic policy, checkpoint, and evaluate at 1440.
  const DataPool pool = DataPool::from_datasets({{"solid", solid_color_task(4)}});
  TrainableModel model{p, std::nullopt};
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.max_steps = 2;
  cfg.lr = 1e-3;
  cfg.resolution = ResizePolicy::dynamic({448, 512, 768, 1024});
  cfg.out_dir = dir.path();
  const TrainReport rep = train(pool, model, cfg);
  const ModelParams loaded = load_params(dir / "model.ckpt");
  std::mt19937_64 drng(0);
  const InstructionSample probe = solid_color_task(1)[0];
  const RawImage img = std::get<RawImage>(probe.image);
  const SequenceInput prompt = build_prompt(img, probe.instruction, ResizePolicy::fixed(1440));
  const auto out = decode_greedy(loaded, prompt, 2, SpecialTokens::kEos, nullptr, fast);
  ok = ok && prompt.num_patches() == 48 * 48 && !out.empty();
  const double dt = seconds_since(t0);
  ok = ok && dt < 120;
  d << "| dynamic-trained draws " << rep.log[0].resolutions << "," << rep.log[1].resolutions << "; decoded at 1440 ("
    << prompt.size() << " elements), " << std::fixed << std::setprecision(1) << dt << "s";
  return {ok, d.str()};
}

// ---------------------------------------------------------------- 5, 6

std::size_t greedy_hits(const ModelParams& params, const LoraAdapters* adapters) {
  ForwardOptions fast;
  fast.kernel = AttentionKernel::kBlocked;
  std::size_t hits = 0;
  for (const auto& s : solid_color_task()) {
    const SequenceInput prompt = build_prompt(std::get<RawImage>(s.image), s.instruction, ResizePolicy::original());
    const auto ids = decode_greedy(params, prompt, 4, SpecialTokens::kEos, adapters, fast);
    hits += detokenize(ids) == s.answer && !ids.empty() && ids.back() == SpecialTokens::kEos;
  }
  return hits;
}

TrainConfig overfit_config(std::size_t steps, double lr) {
  TrainConfig cfg;
  cfg.batch_size = 20;
  cfg.lr = lr;
  cfg.max_steps = steps;
  cfg.epochs = steps;
  cfg.resolution = ResizePolicy::original();
  cfg.seed = 1;
  return cfg;
}

ModelParams overfit_init() {
  std::mt19937_64 rng(1);
  return init_params(toy_config(), rng);
}

Outcome training_oracle() {
  const DataPool pool = DataPool::from_datasets({{"solid", solid_color_task()}});
  const TrainConfig cfg = overfit_config(300, 1e-3);
  const auto t0 = std::chrono::steady_clock::now();
  TrainableModel a{overfit_init(), std::nullopt};
  const TrainReport ra = train(pool, a, cfg);
  const double dt = seconds_since(t0);
  std::size_t first_below = 0;
  for (const auto& s : ra.log)
    if (first_below == 0 && s.loss < 0.05) first_below = s.step;
  const std::size_t hits = greedy_hits(a.params, nullptr);

  TrainableModel b{overfit_init(), std::nullopt};
  const TrainReport rb = train(pool, b, cfg);
  bool same = fingerprint(a.params.tensors) == fingerprint(b.params.tensors) && ra.log.size() == rb.log.size();
  for (std::size_t i = 0; same && i < ra.log.size(); ++i) same = ra.log[i].loss == rb.log[i].loss;

  const bool ok = first_below != 0 && first_below <= 300 && hits == 20 && same && dt < 600;
  Detail d;
  d << "loss < 0.05 first at step " << first_below << ", final " << std::setprecision(4) << ra.log.back().loss
    << ", greedy " << hits << "/20, rerun bit-identical " << (same ? "yes" : "no") << ", " << std::fixed
    << std::setprecision(1) << dt << "s (lr 1e-3, batch 20)";
  return {ok, d.str()};
}

Outcome lora_contracts() {
  const ModelConfig c = toy_config();
  LoraConfig lora;
  // Closed form by hand: r·(d_in + d_out) per adapted map.
  const std::size_t h = c.hidden, ff = c.ff_dim(), r = lora.rank;
  const std::size_t closed = c.n_layers * (4 * r * (h + h) + r * (h + ff) + r * (ff + h)) + r * (h + c.vocab) +
                             r * (c.patch_dim + h);
  std::mt19937_64 rng(2);
  const ModelParams base = testutil::perturbed_params(c, 6, 0.02);
  const AdaptedModel fresh = attach(base, lora, rng);
  const bool count_ok = fresh.adapters().parameter_count() == closed &&
                        lora_parameter_count_formula(c, lora) == closed && closed == 405888;

  const SequenceInput seq = testutil::mixed_sequence(c, 9, 8);
  const bool zero_ok = compute_logits(base, seq) == compute_logits(base, seq, {}, &fresh.adapters());

  const auto t0 = std::chrono::steady_clock::now();
  const DataPool pool = DataPool::from_datasets({{"solid", solid_color_task()}});
  TrainConfig cfg = overfit_config(600, 2e-3);
  cfg.lora = lora;
  TrainableModel model{overfit_init(), std::nullopt};
  const std::uint64_t before = fingerprint(model.params.tensors);
  const TrainReport rep = train(pool, model, cfg);
  const double dt = seconds_since(t0);
  const bool frozen = fingerprint(model.params.tensors) == before && rep.base_fingerprint_after == before;
  const std::size_t hits = greedy_hits(model.params, &*model.adapters);

  const ModelParams merged = merge_adapters(model.params, *model.adapters);
  double merge_dev = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const SequenceInput q = testutil::mixed_sequence(c, 5 + 3 * s, 40 + s);
    merge_dev = std::max(merge_dev, max_abs_diff(compute_logits(model.params, q, {}, &*model.adapters),
                                                 compute_logits(merged, q)));
  }
  const bool ok = count_ok && zero_ok && frozen && merge_dev < 1e-9 && hits == 20;
  Detail d;
  d << "count " << fresh.adapters().parameter_count() << " (closed form " << closed << "), zero-init identical "
    << (zero_ok ? "yes" : "no") << ", merge dev " << std::scientific << std::setprecision(2) << merge_dev
    << ", base hash unchanged " << (frozen ? "yes" : "no") << ", greedy " << hits << "/20 after 600 steps, final loss "
    << std::defaultfloat << std::setprecision(4) << rep.log.back().loss << ", " << std::fixed << std::setprecision(1)
    << dt << "s";
  return {ok, d.str()};
}

// ---------------------------------------------------------------- 7

Outcome evaluation_protocols() {
  testutil::TempDir dir;
  write_mag_fixture(dir.path(), 20);
  const auto records = load_mag_jsonl(dir / "records.jsonl");
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> letter(0, 3);
  std::size_t trials = 0, strict_hits = 0;
  while (trials < 10000) {
    for (const auto& r : records) {
      const std::string response(1, static_cast<char>('A' + letter(rng)));
      strict_hits += score_mc_strict(response, r.gold_letter);
      ++trials;
    }
  }
  const double acc = 100.0 * static_cast<double>(strict_hits) / static_cast<double>(trials);

  StubJudge j1, j2;
  bool stub_ok = true;
  for (const auto& r : records) {
    for (const std::string resp : {r.gold_freeform, "it is " + r.gold_freeform, r.options[(r.gold_letter - 'A' + 1) % 4]}) {
      const JudgeResult a = j1.submit(r.question, r.gold_freeform, resp);
      const JudgeResult b = j2.submit(r.question, r.gold_freeform, resp);
      const JudgeResult c2 = j1.submit(r.question, r.gold_freeform, resp);
      stub_ok = stub_ok && a.judged && a.yes == b.yes && a.yes == c2.yes;
    }
    stub_ok = stub_ok && j1.submit(r.question, r.gold_freeform, r.gold_freeform).yes;
  }
  const bool mc_ok = score_mc("B", 'B') && score_mc(" b.", 'B') && !score_mc("The answer is B", 'B');
  std::set<QuestionType> types;
  for (const auto& r : records) types.insert(r.qtype);
  const bool ok = records.size() == 20 && types.size() >= 3 && std::abs(acc - 25.0) <= 3.0 && stub_ok && mc_ok;
  Detail d;
  d << "random strict MC " << std::fixed << std::setprecision(2) << acc << "% over " << trials
    << " trials, stub deterministic " << (stub_ok ? "yes" : "no") << ", score_mc examples "
    << (mc_ok ? "ok" : "wrong");
  return {ok, d.str()};
}

// ---------------------------------------------------------------- 8

Outcome throughput_methodology() {
  bool accounting = true;
  for (std::size_t side : {448, 512, 768, 1024}) {
    SyntheticWorkload w;
    w.resolution = side;
    w.batch_size = 2;
    w.text_tokens = 100;
    std::mt19937_64 rng(side);
    const WorkloadBatch b = make_workload_batch(w, rng);
    const std::size_t oracle = 2 * (token_budget(side, side).total() + 100);
    std::size_t counted = 0;
    for (const auto& s : b.sequences) counted += s.size();
    accounting = accounting && b.token_count == oracle && counted == oracle && w.tokens_per_batch() == oracle;
  }
  std::mt19937_64 rng(8);
  const ModelParams p = testutil::perturbed_params(toy_config(), 8, 0.02);
  SyntheticWorkload w;
  w.resolution = 448;
  w.text_tokens = 100;
  const ThroughputReport tp = measure_throughput(training_step_runner(p), w, 3.0);
  accounting = accounting && tp.tokens_per_batch == 225 + 15 + 100 && tp.tokens_per_second > 0;

  const auto cases = random_mixed_sequences(6, 8, 96, p.config, rng);
  const LogitsPath ref = attention_path(p, AttentionKernel::kReference);
  const EquivalenceReport eq = verify_equivalence("attention", ref, attention_path(p, AttentionKernel::kBlocked, 16), cases);
  const EquivalenceReport neg =
      verify_equivalence("attention", ref, attention_path(p, AttentionKernel::kBlocked, 16, false), cases);
  const bool ok = accounting && eq.passed && eq.max_deviation < 1e-9 && !neg.passed;
  Detail d;
  d << "token accounting " << (accounting ? "exact" : "WRONG") << ", " << std::fixed << std::setprecision(0)
    << tp.tokens_per_second << " tok/s at 448 (" << tp.batches_measured << " batches), blocked vs reference "
    << std::scientific << std::setprecision(2) << eq.max_deviation << ", broken mask deviation " << neg.max_deviation
    << (neg.passed ? " (MISSED)" : " (detected)");
  return {ok, d.str()};
}

// ---------------------------------------------------------------- 9

Outcome checkpoint_roundtrip() {
  testutil::TempDir dir;
  const ModelParams p = testutil::perturbed_params(toy_config(), 9, 0.02);
  save_params(dir / "toy.ckpt", p);
  const ModelParams q = load_params(dir / "toy.ckpt");
  bool bits = q.tensors.size() == p.tensors.size();
  for (const auto& [name, t] : p.tensors) {
    const Tensor& u = q.at(name);
    bits = bits && u.shape() == t.shape() &&
           std::memcmp(u.data().data(), t.data().data(), t.size() * sizeof(double)) == 0;
  }
  const SequenceInput seq = testutil::mixed_sequence(p.config, 12, 3);
  const Tensor a = compute_logits(p, seq), b = compute_logits(q, seq);
  const bool logits = std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
  return {bits && logits, (Detail() << p.parameter_count() << " parameters bit-identical " << (bits ? "yes" : "no")
                                    << ", logits bit-identical " << (logits ? "yes" : "no"))
                              .str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"token budget oracle", token_budget_oracle},
      {"manifest arithmetic", manifest_arithmetic},
      {"architecture correctness", architecture},
      {"variable-resolution contract", variable_resolution},
      {"training oracle", training_oracle},
      {"LoRA contracts", lora_contracts},
      {"evaluation protocols", evaluation_protocols},
      {"throughput methodology", throughput_methodology},
      {"checkpoint roundtrip", checkpoint_roundtrip},
  };
  const std::size_t only = argc > 1 ? std::stoul(argv[1]) : 0;
  if (only > criteria.size()) {
    std::cerr << "criterion must be 1.." << criteria.size() << "\n";
    return 64;
  }
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && i + 1 != only) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failures;
}

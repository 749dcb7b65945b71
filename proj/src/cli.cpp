#include "patchlm/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>

#include "patchlm/bench.hpp"
#include "patchlm/checkpoint.hpp"
#include "patchlm/errors.hpp"
#include "patchlm/evaluator.hpp"
#include "patchlm/instruction.hpp"
#include "patchlm/judge.hpp"
#include "patchlm/lora.hpp"
#include "patchlm/patchifier.hpp"
#include "patchlm/trainer.hpp"

namespace patchlm {

using nlohmann::json;

namespace {

struct GlobalOptions {
  std::uint64_t seed = 0;
  bool json_errors = false;
  std::string config_path;
  json file;  // parsed --config, {} when absent

  // Value from the config file section, or `fallback`.
  template <typename T>
  T file_value(const char* section, const char* key, T fallback) const {
    if (file.contains(section) && file[section].contains(key)) return file[section][key].get<T>();
    return fallback;
  }
};

void load_config_file(GlobalOptions& g) {
  if (g.config_path.empty()) {
    g.file = json::object();
    return;
  }
  std::ifstream in(g.config_path);
  if (!in) throw IoError("cannot open config " + g.config_path);
  try {
    g.file = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + g.config_path + ": " + e.what());
  }
}

ModelConfig model_config(const GlobalOptions& g) {
  if (g.file.contains("model")) return ModelConfig::from_json(g.file["model"].dump());
  return ModelConfig{};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string answer_text(const std::vector<std::size_t>& ids) {
  std::vector<std::size_t> body(ids.begin(), ids.end());
  if (!body.empty() && body.back() == SpecialTokens::kEos) body.pop_back();
  return detokenize(body);
}

struct LoadedModel {
  ModelParams params;
  std::optional<LoraAdapters> adapters;
};

LoadedModel load_model(const std::string& checkpoint, const std::string& adapters) {
  LoadedModel m{load_params(checkpoint), std::nullopt};
  if (!adapters.empty()) m.adapters = load_adapters(adapters, m.params);
  return m;
}

std::string generate_answer(const LoadedModel& model, const RawImage& image, const std::string& instruction,
                            const ResizePolicy& policy, std::size_t max_new, std::mt19937_64& rng) {
  const SequenceInput prompt = build_prompt(image, instruction, policy, &rng);
  ForwardOptions opts;
  opts.kernel = AttentionKernel::kBlocked;
  return answer_text(decode_greedy(model.params, prompt, max_new, SpecialTokens::kEos,
                                   model.adapters ? &*model.adapters : nullptr, opts));
}

void write_solid_color_fixture(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ostringstream lines;
  const auto samples = solid_color_task();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string rel = "images/" + std::to_string(i) + ".ppm";
    save_ppm(dir / rel, std::get<RawImage>(samples[i].image));
    lines << json{{"image", rel},
                  {"instruction", samples[i].instruction},
                  {"answer", samples[i].answer},
                  {"dataset", samples[i].dataset}}
                 .dump()
          << "\n";
  }
  write_text(dir / "data.jsonl", lines.str());
  MixtureManifest manifest;
  manifest.entries.push_back({"solid-color", "data.jsonl", samples.size()});
  write_text(dir / "manifest.json", manifest.to_json());
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Patch-token multimodal decoder toolkit", "patchlm"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--seed", g.seed, "Seed for every random stream");
  app.add_flag("--json-errors", g.json_errors, "Report errors as JSON on stderr");
  app.add_option("--config", g.config_path, "JSON file with \"model\", \"train\" and \"lora\" sections");

  // count-tokens
  std::size_t ct_width = 0, ct_height = 0;
  auto* count = app.add_subcommand("count-tokens", "Print the image and newline token budget");
  count->add_option("--width", ct_width)->required();
  count->add_option("--height", ct_height)->required();

  // patchify
  std::string pf_in, pf_resolution = "original";
  bool pf_summary = false;
  auto* patchify_cmd = app.add_subcommand("patchify", "Cut a PPM image into patches");
  patchify_cmd->add_option("--in", pf_in)->required();
  patchify_cmd->add_option("--resolution", pf_resolution, "fixed:S, dynamic:a,b,... or original");
  patchify_cmd->add_flag("--summary", pf_summary, "Print only the JSON summary");

  // train
  std::string tr_manifest, tr_resolution = "fixed:512", tr_mode = "full", tr_out, tr_init;
  std::optional<double> tr_lr, tr_wd, tr_warmup, tr_lora_alpha;
  std::optional<std::size_t> tr_batch, tr_epochs, tr_max_steps, tr_micro, tr_threads, tr_lora_rank;
  std::size_t tr_log_every = 0;
  auto* train_cmd = app.add_subcommand("train", "Instruction-tune on a dataset mixture");
  train_cmd->add_option("--manifest", tr_manifest)->required();
  train_cmd->add_option("--resolution", tr_resolution);
  train_cmd->add_option("--mode", tr_mode)->check(CLI::IsMember({"full", "lora"}));
  train_cmd->add_option("--out", tr_out)->required();
  train_cmd->add_option("--init", tr_init, "Start from this checkpoint instead of a fresh init");
  train_cmd->add_option("--lr", tr_lr);
  train_cmd->add_option("--weight-decay", tr_wd);
  train_cmd->add_option("--warmup", tr_warmup, "Warmup ratio");
  train_cmd->add_option("--batch", tr_batch);
  train_cmd->add_option("--epochs", tr_epochs);
  train_cmd->add_option("--max-steps", tr_max_steps);
  train_cmd->add_option("--micro-batch", tr_micro);
  train_cmd->add_option("--threads", tr_threads);
  train_cmd->add_option("--lora-rank", tr_lora_rank);
  train_cmd->add_option("--lora-alpha", tr_lora_alpha);
  train_cmd->add_option("--log-every", tr_log_every, "Print every Nth step to stderr");

  // generate
  std::string gen_ckpt, gen_adapters, gen_image, gen_instruction, gen_resolution = "original";
  std::size_t gen_max_new = 32;
  auto* gen_cmd = app.add_subcommand("generate", "Greedy answer for an image and instruction");
  gen_cmd->add_option("--checkpoint", gen_ckpt)->required();
  gen_cmd->add_option("--adapters", gen_adapters);
  gen_cmd->add_option("--image", gen_image)->required();
  gen_cmd->add_option("--instruction", gen_instruction)->required();
  gen_cmd->add_option("--resolution", gen_resolution);
  gen_cmd->add_option("--max-new", gen_max_new);

  // eval
  std::string ev_dataset, ev_ckpt, ev_adapters, ev_protocol = "both", ev_judge = "stub", ev_resolution = "original",
                                                ev_out;
  std::size_t ev_max_new = 16, ev_concurrency = 4;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a question set");
  eval_cmd->add_option("--dataset", ev_dataset)->required();
  eval_cmd->add_option("--checkpoint", ev_ckpt)->required();
  eval_cmd->add_option("--adapters", ev_adapters);
  eval_cmd->add_option("--protocol", ev_protocol)->check(CLI::IsMember({"mc", "freeform", "both"}));
  eval_cmd->add_option("--judge", ev_judge)->check(CLI::IsMember({"stub", "external"}));
  eval_cmd->add_option("--resolution", ev_resolution);
  eval_cmd->add_option("--out", ev_out);
  eval_cmd->add_option("--max-new", ev_max_new);
  eval_cmd->add_option("--concurrency", ev_concurrency, "Judge calls in flight");

  // bench
  std::size_t bn_resolution = 512, bn_batch = 1, bn_text = 100;
  double bn_window = 60.0;
  std::string bn_out, bn_ckpt, bn_kernel = "blocked";
  auto* bench_cmd = app.add_subcommand("bench", "Measure training tokens per second");
  bench_cmd->add_option("--resolution", bn_resolution);
  bench_cmd->add_option("--batch", bn_batch);
  bench_cmd->add_option("--window", bn_window, "Seconds");
  bench_cmd->add_option("--text-tokens", bn_text);
  bench_cmd->add_option("--checkpoint", bn_ckpt);
  bench_cmd->add_option("--kernel", bn_kernel)->check(CLI::IsMember({"reference", "blocked"}));
  bench_cmd->add_option("--out", bn_out);

  // make-fixture
  std::string fx_kind, fx_out;
  std::size_t fx_count = 20;
  auto* fixture_cmd = app.add_subcommand("make-fixture", "Write a synthetic dataset");
  fixture_cmd->add_option("--kind", fx_kind)->required()->check(CLI::IsMember({"solid-color", "mag"}));
  fixture_cmd->add_option("--out", fx_out)->required();
  fixture_cmd->add_option("--count", fx_count, "Records for --kind mag");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (g.json_errors) {
      err << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    } else {
      if (!args.empty()) err << "error: " << e.what() << "\n";
      err << app.help();
    }
    return kExitContract;
  }

  try {
    load_config_file(g);
    std::mt19937_64 rng(g.seed);

    if (*count) {
      const TokenBudget b = token_budget(ct_width, ct_height);
      out << json{{"image_tokens", b.image_tokens}, {"newline_tokens", b.newline_tokens}}.dump() << "\n";
    } else if (*patchify_cmd) {
      const RawImage img = load_ppm(pf_in);
      const PatchGrid grid = patchify(img, ResizePolicy::parse(pf_resolution), &rng);
      const TokenBudget b = token_budget(grid.source_width, grid.source_height);
      out << json{{"rows", grid.rows},
                  {"cols", grid.cols},
                  {"num_patches", grid.num_patches()},
                  {"sequence_length", grid.sequence_length()},
                  {"image_tokens", b.image_tokens},
                  {"newline_tokens", b.newline_tokens},
                  {"resized_width", grid.source_width},
                  {"resized_height", grid.source_height}}
                 .dump()
          << "\n";
      if (!pf_summary) {
        for (std::size_t r = 0; r < grid.rows; ++r) {
          for (std::size_t c = 0; c < grid.cols; ++c) out << "P" << (r * grid.cols + c) << ' ';
          out << "|NEWLINE|\n";
        }
      }
    } else if (*train_cmd) {
      TrainConfig cfg;
      cfg.seed = g.seed;
      cfg.resolution = ResizePolicy::parse(tr_resolution);
      cfg.out_dir = tr_out;
      cfg.lr = tr_lr.value_or(g.file_value("train", "lr", cfg.lr));
      cfg.weight_decay = tr_wd.value_or(g.file_value("train", "weight_decay", cfg.weight_decay));
      cfg.warmup_ratio = tr_warmup.value_or(g.file_value("train", "warmup_ratio", cfg.warmup_ratio));
      cfg.batch_size = tr_batch.value_or(g.file_value("train", "batch_size", cfg.batch_size));
      cfg.epochs = tr_epochs.value_or(g.file_value("train", "epochs", cfg.epochs));
      cfg.max_steps = tr_max_steps.value_or(g.file_value("train", "max_steps", cfg.max_steps));
      cfg.micro_batch = tr_micro.value_or(g.file_value("train", "micro_batch", cfg.micro_batch));
      cfg.threads = tr_threads.value_or(g.file_value("train", "threads", cfg.threads));
      if (tr_mode == "lora") {
        LoraConfig lora = g.file.contains("lora") ? LoraConfig::from_json(g.file["lora"].dump()) : LoraConfig{};
        if (tr_lora_rank) lora.rank = *tr_lora_rank;
        if (tr_lora_alpha) lora.alpha = *tr_lora_alpha;
        cfg.lora = lora;
      }
      cfg.validate();

      const DataPool pool = DataPool::load(MixtureManifest::load(tr_manifest));
      TrainableModel model;
      if (tr_init.empty()) {
        std::mt19937_64 init_rng(g.seed);
        model.params = init_params(model_config(g), init_rng);
      } else {
        model.params = load_params(tr_init);
      }
      const TrainReport report = train(pool, model, cfg, [&](const StepLog& s) {
        if (tr_log_every && (s.step % tr_log_every == 0 || s.step == 1)) {
          err << "step " << s.step << " lr " << s.lr << " loss " << s.loss << " res " << s.resolutions << "\n";
        }
      });
      json summary{{"total_steps", report.total_steps}, {"mode", tr_mode}, {"pool_size", pool.size()}};
      if (!report.log.empty()) summary["final_loss"] = report.log.back().loss;
      std::vector<std::string> paths;
      for (const auto& p : report.checkpoints) paths.push_back(p.string());
      summary["checkpoints"] = paths;
      out << summary.dump() << "\n";
    } else if (*gen_cmd) {
      const LoadedModel model = load_model(gen_ckpt, gen_adapters);
      out << generate_answer(model, load_ppm(gen_image), gen_instruction, ResizePolicy::parse(gen_resolution),
                             gen_max_new, rng)
          << "\n";
    } else if (*eval_cmd) {
      const auto records = load_mag_jsonl(ev_dataset);
      const LoadedModel model = load_model(ev_ckpt, ev_adapters);
      const ResizePolicy policy = ResizePolicy::parse(ev_resolution);
      if (policy.kind == ResizePolicy::Kind::kDynamic) throw ConfigError("eval resolution must be fixed:S or original");
      std::unique_ptr<JudgeClient> judge;
      if (ev_judge == "external") {
        judge = std::make_unique<HttpJudge>(HttpJudgeConfig::from_env());
      } else {
        judge = std::make_unique<StubJudge>();
      }
      const Responder responder = [&](const MagRecord& r, const std::string& instruction) {
        return generate_answer(model, load_ppm(r.image), instruction, policy, ev_max_new, rng);
      };
      const auto verdicts = evaluate(records, responder, ev_protocol != "freeform", ev_protocol != "mc", judge.get(),
                                     ev_concurrency);
      const AccuracyReport rep = report(verdicts);
      out << rep.to_text();
      if (!ev_out.empty()) write_text(ev_out, rep.to_json() + "\n");
    } else if (*bench_cmd) {
      SyntheticWorkload workload{bn_resolution, bn_batch, bn_text, g.seed};
      workload.validate();
      ModelParams params;
      if (bn_ckpt.empty()) {
        std::mt19937_64 init_rng(g.seed);
        params = init_params(model_config(g), init_rng);
      } else {
        params = load_params(bn_ckpt);
      }
      const AttentionKernel kernel = bn_kernel == "blocked" ? AttentionKernel::kBlocked : AttentionKernel::kReference;
      ThroughputReport tp = measure_throughput(training_step_runner(params, kernel), workload, bn_window);
      tp.mode = "forward+backward, " + bn_kernel + " attention";

      std::mt19937_64 case_rng(g.seed ^ 0x5eedULL);
      const auto cases = random_mixed_sequences(4, 8, 96, params.config, case_rng);
      const EquivalenceReport eq =
          verify_equivalence("attention", attention_path(params, AttentionKernel::kReference),
                             attention_path(params, AttentionKernel::kBlocked, 16), cases);
      const json result{{"throughput", json::parse(tp.to_json())}, {"equivalence", json::parse(eq.to_json())}};
      out << result.dump(2) << "\n";
      if (!bn_out.empty()) write_text(bn_out, result.dump(2) + "\n");
      if (!eq.passed) throw NumericError("blocked attention deviates from the reference: " + eq.to_json());
    } else if (*fixture_cmd) {
      if (fx_kind == "solid-color") {
        write_solid_color_fixture(fx_out);
      } else {
        write_mag_fixture(fx_out, fx_count);
      }
      out << json{{"kind", fx_kind}, {"out", fx_out}}.dump() << "\n";
    }
    return kExitOk;
  } catch (const IoError& e) {
    if (g.json_errors) {
      err << json{{"error", "io"}, {"message", e.what()}}.dump() << "\n";
    } else {
      err << "I/O error: " << e.what() << "\n";
    }
    return kExitIo;
  } catch (const std::exception& e) {
    const bool contract = dynamic_cast<const ContractError*>(&e) != nullptr;
    if (g.json_errors) {
      err << json{{"error", contract ? "contract" : "runtime"}, {"message", e.what()}}.dump() << "\n";
    } else {
      err << "error: " << e.what() << "\n";
    }
    return kExitContract;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace patchlm

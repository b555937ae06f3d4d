#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bupo/cli/commands.hpp"
#include "bupo/errors.hpp"
#include "bupo/eval/metrics.hpp"

using namespace bupo;
using namespace bupo::cli;

namespace {

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig config = RunConfig::from_file(path);
  for (const auto& o : overrides) config.set(o);
  return config;
}

int report(const char* kind, const std::exception& e, int code) {
  std::cerr << "bupo: " << kind << ": " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Internal-policy analytics and bottom-up RL training for small transformers"};
  app.require_subcommand(1);

  std::string config_path, resume, out_dir;
  std::vector<std::string> overrides;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "Warm-start a model and train it with grpo, intergrpo or bupo");
  train->add_option("config", config_path, "Run configuration file");
  train->add_option("--set", overrides, "Override one key (key=value); repeatable");
  train->add_option("--resume", resume, "Continue from a training checkpoint");
  train->add_option("--out", out_dir, "Output directory (default io.out_dir)");
  train->add_flag("--quiet", quiet, "No progress lines");
  std::size_t stop_after = 0;
  auto* stop_opt = train->add_option("--stop-after", stop_after,
                                     "Checkpoint and stop after this many steps");

  std::string checkpoint, prompts, analyze_out = "analysis";
  auto* analyze = app.add_subcommand("analyze", "Internal-policy entropy analytics of a checkpoint");
  analyze->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  analyze->add_option("--prompts", prompts, "Dataset JSONL or one rendered prompt per line");
  analyze->add_option("--out", analyze_out, "Output directory");

  EvalOptions eval_options;
  std::string report_path;
  std::vector<std::size_t> ks;
  std::size_t samples = 0, problems = 0;
  std::uint64_t seed = 0;
  auto* evaluate = app.add_subcommand("eval", "Avg@K and Pass@K of a checkpoint on the eval split");
  evaluate->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  auto* n_opt = evaluate->add_option("-n,--samples", samples, "Responses per problem");
  auto* k_opt = evaluate->add_option("-k,--ks", ks, "K values")->delimiter(',');
  auto* p_opt = evaluate->add_option("--problems", problems, "Number of eval problems");
  auto* s_opt = evaluate->add_option("--seed", seed, "Evaluation seed");
  evaluate->add_option("--set", eval_options.overrides, "Override a task.* or eval.* key; repeatable");
  evaluate->add_option("-o,--out", report_path, "Write the report JSON here instead of stdout");

  auto* inspect = app.add_subcommand("inspect-checkpoint", "Print checkpoint metadata and tensors");
  inspect->add_option("checkpoint", checkpoint, "Checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      TrainOptions options;
      options.out_dir = out_dir;
      if (!quiet) options.progress = &std::cerr;
      if (*stop_opt) options.stop_after = stop_after;
      RunConfig config;
      if (!resume.empty()) {
        options.resume = resume;
        config = checkpoint_config(load_checkpoint(resume));
        if (!config_path.empty()) {
          throw ConfigError("give either a config file or --resume, not both");
        }
        for (const auto& o : overrides) config.set(o);
      } else {
        if (config_path.empty()) throw ConfigError("a config file is required unless resuming");
        config = load_config(config_path, overrides);
      }
      const auto summary = run_train(config, options);
      std::cout << "steps " << summary.steps << " layer " << summary.internal_layer
                << " final_reward " << summary.final_reward << "\n";
    } else if (analyze->parsed()) {
      const auto result = run_analyze(checkpoint, prompts, analyze_out);
      std::cout << "boundary "
                << (result.boundary.found ? std::to_string(result.boundary.layer) : "none")
                << "\n";
    } else if (evaluate->parsed()) {
      if (*n_opt) eval_options.samples = samples;
      if (*k_opt) eval_options.ks = ks;
      if (*p_opt) eval_options.problems = problems;
      if (*s_opt) eval_options.seed = seed;
      const auto r = run_eval(checkpoint, eval_options, report_path);
      if (report_path.empty()) std::cout << eval::report_json(r);
    } else if (inspect->parsed()) {
      std::cout << inspect_checkpoint(checkpoint);
    }
  } catch (const ConfigError& e) {
    return report("config error", e, kExitConfig);
  } catch (const NumericFault& e) {
    return report("numeric fault (last good state checkpointed)", e, kExitNumeric);
  } catch (const CorruptDataError& e) {
    return report("corrupt data", e, kExitData);
  } catch (const InputError& e) {
    return report("input error", e, kExitData);
  } catch (const std::exception& e) {
    return report("error", e, 1);
  }
  return kExitOk;
}

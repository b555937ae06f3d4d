#include "bupo/cli/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "bupo/cli/io.hpp"
#include "bupo/errors.hpp"
#include "bupo/eval/metrics.hpp"

namespace bupo::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Keys a resumed run may change; everything else must match the checkpoint.
bool resumable_key(const std::string& key) {
  return key == "train.max_steps" || key.rfind("io.", 0) == 0;
}

std::string join(const fs::path& dir, const std::string& name) { return (dir / name).string(); }

std::string join_numbers(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::uint64_t> split_numbers(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw CorruptDataError("bad number list in checkpoint: '" + s + "'");
    }
  }
  return out;
}

std::uint64_t meta_number(const Checkpoint& ckpt, const std::string& key) {
  const auto v = split_numbers(ckpt.value(key));
  if (v.size() != 1) throw CorruptDataError("checkpoint metadata '" + key + "' is not a number");
  return v[0];
}

Checkpoint train_checkpoint(const RunConfig& config, const rl::Trainer::State& state,
                            const std::string& log_rows, const std::string& status) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "train";
  ckpt.meta["config"] = config.resolved_text();
  ckpt.meta["seed"] = config.raw("train.seed");
  ckpt.meta["step"] = std::to_string(state.step);
  ckpt.meta["rng"] = state.rng;
  ckpt.meta["log"] = log_rows;
  ckpt.meta["status"] = status;
  ckpt.meta["collapse.streak"] = std::to_string(state.collapse.streak);
  ckpt.meta["collapse.step"] =
      state.collapse.collapse_step ? std::to_string(*state.collapse.collapse_step) : "";
  store_parameters(ckpt, state.params);
  const auto refs = state.params.refs();
  const auto& slots = state.optimizer.slots();
  std::vector<std::uint64_t> steps;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    ckpt.tensors.push_back({"optim.m." + refs[i].info.name, slots[i].m});
    ckpt.tensors.push_back({"optim.v." + refs[i].info.name, slots[i].v});
    steps.push_back(slots[i].steps);
  }
  ckpt.meta["optim.steps"] = join_numbers(steps);
  return ckpt;
}

rl::Trainer::State train_state(const Checkpoint& ckpt, const RunConfig& config) {
  if (ckpt.value("kind") != "train") throw CorruptDataError("not a training checkpoint");
  rl::Trainer::State state;
  state.step = meta_number(ckpt, "step");
  state.rng = ckpt.value("rng");
  state.params = load_parameters(ckpt, config.model());
  state.optimizer = rl::AdamW(state.params, config.trainer().optimizer);
  const auto refs = state.params.refs();
  const auto steps = split_numbers(ckpt.value("optim.steps"));
  auto& slots = state.optimizer.slots();
  if (steps.size() != refs.size() || slots.size() != refs.size()) {
    throw CorruptDataError("optimizer state does not match the model");
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    slots[i].m = ckpt.tensor("optim.m." + refs[i].info.name);
    slots[i].v = ckpt.tensor("optim.v." + refs[i].info.name);
    if (slots[i].m.shape() != refs[i].tensor->shape() ||
        slots[i].v.shape() != refs[i].tensor->shape()) {
      throw CorruptDataError("optimizer moments for '" + refs[i].info.name + "' have the wrong shape");
    }
    slots[i].steps = steps[i];
  }
  state.collapse.streak = meta_number(ckpt, "collapse.streak");
  if (!ckpt.value("collapse.step").empty()) {
    state.collapse.collapse_step = meta_number(ckpt, "collapse.step");
  }
  return state;
}

std::vector<tasks::ProblemInstance> eval_problems(const RunConfig& config) {
  return tasks::generate_dataset(config.task(), config.unsigned_integer("eval.problems"),
                                 config.unsigned_integer("eval.seed"), tasks::Split::Eval);
}

internal::CorpusProfile profile_prompts(const model::ModelParameters& params,
                                        const RunConfig& config,
                                        const std::vector<std::vector<model::TokenId>>& prompts) {
  model::SamplingSettings sampling = config.eval().sampling;
  return internal::profile_corpus(params, config.model(), prompts, sampling,
                                  config.unsigned_integer("eval.seed"));
}

json summary_json(const TrainSummary& s, const std::vector<rl::StepRecord>& full_log,
                  std::size_t internal_steps) {
  json j;
  j["steps"] = s.steps;
  j["internal_layer"] = s.internal_layer;
  j["internal_steps"] = internal_steps;
  j["phase_switch_step"] =
      internal_steps > 0 && internal_steps < s.steps ? json(internal_steps + 1) : json(nullptr);
  j["initial_reward"] = full_log.empty() ? json(nullptr) : json(full_log.front().mean_reward);
  j["final_reward"] = full_log.empty() ? json(nullptr) : json(s.final_reward);
  j["collapse_step"] = s.collapse_step ? json(*s.collapse_step) : json(nullptr);
  return j;
}

std::vector<rl::StepRecord> parse_log_rows(const std::string& rows) {
  // Only reward values are needed to summarize resumed runs.
  std::vector<rl::StepRecord> out;
  std::istringstream in(rows);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream cl(line);
    std::string cell;
    while (std::getline(cl, cell, ',')) cells.push_back(cell);
    if (cells.size() < 3) throw CorruptDataError("malformed training log row in checkpoint");
    rl::StepRecord r;
    r.step = std::stoull(cells[0]);
    r.internal = cells[1] == "internal";
    r.mean_reward = std::stod(cells[2]);
    out.push_back(r);
  }
  return out;
}

}  // namespace

std::string training_log_header() {
  std::string out;
  for (const char* c : kTrainingLogColumns) out += std::string(out.empty() ? "" : ",") + c;
  return out + "\n";
}

std::string training_log_row(const rl::StepRecord& r) {
  std::string out = std::to_string(r.step);
  out += r.internal ? ",internal," : ",final,";
  out += format_real(r.mean_reward) + ",";
  out += format_real(r.surrogate_objective) + ",";
  out += format_real(r.policy_entropy) + ",";
  out += format_real(r.internal_entropy) + ",";
  out += format_real(r.mean_response_len) + ",";
  out += (r.ppl ? format_real(*r.ppl) : "") + ",";
  out += format_real(r.grad_norm) + ",";
  out += format_real(r.wall_ms) + "\n";
  return out;
}

void store_parameters(Checkpoint& ckpt, const model::ModelParameters& params) {
  for (const auto& ref : params.refs()) ckpt.tensors.push_back({"param." + ref.info.name, *ref.tensor});
}

model::ModelParameters load_parameters(const Checkpoint& ckpt, const model::ModelConfig& config) {
  auto params = model::init_parameters(config, 0);
  for (auto& ref : params.refs()) {
    const auto& t = ckpt.tensor("param." + ref.info.name);
    if (t.shape() != ref.tensor->shape()) {
      throw CorruptDataError("tensor 'param." + ref.info.name + "' does not match the model config");
    }
    *ref.tensor = t;
  }
  return params;
}

RunConfig checkpoint_config(const Checkpoint& ckpt) {
  try {
    return RunConfig::parse(ckpt.value("config"), "checkpoint config");
  } catch (const ConfigError& e) {
    throw CorruptDataError(std::string("checkpoint carries an invalid config: ") + e.what());
  }
}

model::ModelParameters base_model(const RunConfig& config) {
  const auto m = config.model();
  auto params = model::init_parameters(m, config.unsigned_integer("model.seed"));
  rl::warm_start(params, m, config.task(), config.warm_start());
  return params;
}

LayerChoice resolve_layer(const RunConfig& config, const model::ModelParameters& base) {
  if (const auto l = config.unsigned_integer("bupo.layer"); l != 0) return {l, "config"};
  std::vector<std::vector<model::TokenId>> prompts;
  for (const auto& p : eval_problems(config)) prompts.push_back(p.prompt);
  const auto profile = profile_prompts(base, config, prompts);
  const auto b = internal::region_boundary(profile.entropy_change(), config.real("bupo.boundary_band"));
  if (b.found) return {b.layer, "boundary"};
  return {std::max<std::size_t>(1, config.model().num_layers / 2), "fallback"};
}

TrainSummary run_train(RunConfig config, const TrainOptions& options) {
  std::optional<Checkpoint> resumed;
  if (options.resume) {
    resumed = load_checkpoint(*options.resume);
    const RunConfig stored = checkpoint_config(*resumed);
    for (const auto& spec : schema()) {
      if (!resumable_key(spec.key) && stored.raw(spec.key) != config.raw(spec.key)) {
        throw ConfigError(spec.key + ": cannot change when resuming (checkpoint has '" +
                          stored.raw(spec.key) + "')");
      }
    }
  }
  const fs::path out_dir = options.out_dir.empty() ? config.raw("io.out_dir") : options.out_dir;
  fs::create_directories(out_dir);

  LayerChoice layer{config.unsigned_integer("bupo.layer"), "config"};
  model::ModelParameters initial;
  if (resumed) {
    initial = load_parameters(*resumed, config.model());
  } else {
    initial = options.base ? *options.base : base_model(config);
    layer = resolve_layer(config, initial);
    config.set("bupo.layer", std::to_string(layer.layer));
    Checkpoint base;
    base.meta["kind"] = "base";
    base.meta["config"] = config.resolved_text();
    base.meta["seed"] = config.raw("model.seed");
    base.meta["step"] = "0";
    store_parameters(base, initial);
    save_checkpoint(join(out_dir, "base.ckpt"), base);
  }

  const auto tc = config.trainer();
  rl::Trainer trainer(config.model(), config.task(), tc, initial);
  trainer.log_wall_time = config.boolean("io.log_wall_time");
  std::string rows;
  if (resumed) {
    trainer.restore(train_state(*resumed, config));
    rows = resumed->value("log");
  }
  std::vector<rl::StepRecord> full_log = parse_log_rows(rows);

  TrainSummary summary;
  summary.internal_layer = tc.internal_layer;
  const std::size_t ckpt_every = config.unsigned_integer("io.ckpt_every");

  auto finish = [&](const rl::Trainer::State& state, const std::string& status) {
    save_checkpoint(join(out_dir, "checkpoint.ckpt"), train_checkpoint(config, state, rows, status));
    write_file_atomic(join(out_dir, "training_log.csv"), training_log_header() + rows);
  };
  auto write_manifest = [&](const std::string& status) {
    summary.steps = trainer.completed_steps();
    summary.collapse_step = trainer.collapse().collapse_step;
    summary.initial_reward = full_log.empty() ? 0.0 : full_log.front().mean_reward;
    const std::size_t tail = std::min<std::size_t>(10, full_log.size());
    double sum = 0.0;
    for (std::size_t i = full_log.size() - tail; i < full_log.size(); ++i) sum += full_log[i].mean_reward;
    summary.final_reward = tail ? sum / static_cast<double>(tail) : 0.0;
    json m;
    m["format"] = "bupo-run";
    m["command"] = "train";
    m["status"] = status;
    m["seed"] = config.unsigned_integer("train.seed");
    m["algorithm"] = config.raw("train.algorithm");
    m["layer_source"] = resumed ? std::string("checkpoint") : layer.source;
    m["resumed_from"] = options.resume ? json(*options.resume) : json(nullptr);
    m["summary"] = summary_json(summary, full_log, tc.internal_steps());
    m["config"] = config.resolved_text();
    write_file_atomic(join(out_dir, "manifest.json"), m.dump(2) + "\n");
  };

  while (!trainer.done()) {
    const rl::Trainer::State before = trainer.state();
    rl::StepRecord rec;
    try {
      rec = trainer.step();
    } catch (const NumericFault&) {
      finish(before, "numeric_fault");
      write_manifest("numeric_fault");
      throw;
    }
    rows += training_log_row(rec);
    full_log.push_back(rec);
    summary.log.push_back(rec);
    if (options.progress && (rec.step % options.progress_every == 0 || trainer.done())) {
      *options.progress << "step " << rec.step << (rec.internal ? " internal" : " final")
                        << " reward " << format_real(rec.mean_reward) << " entropy "
                        << format_real(rec.policy_entropy) << "\n";
    }
    if (options.stop_after && summary.log.size() == *options.stop_after && !trainer.done()) {
      finish(trainer.state(), "stopped");
      write_manifest("stopped");
      return summary;
    }
    if (ckpt_every && rec.step % ckpt_every == 0 && !trainer.done()) finish(trainer.state(), "running");
  }
  finish(trainer.state(), "complete");
  write_manifest("complete");
  return summary;
}

std::vector<std::vector<model::TokenId>> read_prompts(const std::string& path) {
  const std::string text = read_file(path);
  std::vector<std::vector<model::TokenId>> prompts;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    std::istringstream in(text);
    for (auto& p : tasks::load_dataset(in)) prompts.push_back(std::move(p.prompt));
  } else {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        prompts.push_back(tasks::vocab::parse(line));
      } catch (const InputError& e) {
        throw InputError(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  if (prompts.empty()) throw InputError("no prompts in '" + path + "'");
  return prompts;
}

AnalyzeResult run_analyze(const std::string& checkpoint_path, const std::string& prompts_path,
                          const std::string& out_dir) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const RunConfig config = checkpoint_config(ckpt);
  const auto m = config.model();
  const auto params = load_parameters(ckpt, m);

  std::vector<std::vector<model::TokenId>> prompts;
  if (prompts_path.empty()) {
    for (const auto& p : eval_problems(config)) prompts.push_back(p.prompt);
  } else {
    prompts = read_prompts(prompts_path);
  }
  for (const auto& p : prompts) model::validate_tokens(m, p);

  AnalyzeResult result;
  result.profile = profile_prompts(params, config, prompts);
  const double band = config.real("bupo.boundary_band");
  const auto change = result.profile.entropy_change();
  result.boundary = internal::region_boundary(change, band);

  const auto& ent = result.profile.entropy;
  CsvTable profile({"layer", "site", "mean_entropy_nats", "token_count"});
  for (std::size_t l = 1; l <= ent.num_layers(); ++l) {
    for (std::size_t s = 0; s < internal::kLayerSites.size(); ++s) {
      const auto& mean = ent.layers[l - 1][s];
      profile.add_row({std::to_string(l), internal::site_name(internal::kLayerSites[s]),
                       format_real(mean.mean()), std::to_string(mean.count())});
    }
  }
  profile.add_row({std::to_string(ent.num_layers()), internal::site_name(internal::SiteKind::Final),
                   format_real(ent.final_site.mean()), std::to_string(ent.final_site.count())});

  CsvTable delta({"layer", "module", "delta_h_nats"});
  for (std::size_t l = 1; l <= change.size(); ++l) {
    delta.add_row({std::to_string(l), "ATTN", format_real(change[l - 1].attn)});
    delta.add_row({std::to_string(l), "FFN", format_real(change[l - 1].ffn)});
    delta.add_row({std::to_string(l), "LAYER", format_real(change[l - 1].layer)});
  }

  CsvTable sim({"layer", "cos_attn", "cos_ffn"});
  for (std::size_t l = 1; l <= ent.num_layers(); ++l) {
    sim.add_row({std::to_string(l), format_real(result.profile.similarity.cos_attn(l)),
                 format_real(result.profile.similarity.cos_ffn(l))});
  }

  json b;
  b["boundary_layer"] = result.boundary.found ? json(result.boundary.layer) : json(nullptr);
  b["has_boundary"] = result.boundary.found;
  b["band"] = band;
  b["prompts"] = prompts.size();
  b["tokens"] = ent.token_count();
  b["checkpoint"] = checkpoint_path;
  b["checkpoint_step"] = ckpt.value("step");
  b["seed"] = config.unsigned_integer("eval.seed");
  b["config"] = config.resolved_text();

  const fs::path dir(out_dir);
  fs::create_directories(dir);
  write_file_atomic(join(dir, "entropy_profile.csv"), profile.str());
  write_file_atomic(join(dir, "entropy_change.csv"), delta.str());
  write_file_atomic(join(dir, "residual_similarity.csv"), sim.str());
  write_file_atomic(join(dir, "boundary.json"), b.dump(2) + "\n");
  return result;
}

eval::EvalReport run_eval(const std::string& checkpoint_path, const EvalOptions& options,
                          const std::string& out_path) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  RunConfig config = checkpoint_config(ckpt);
  for (const auto& o : options.overrides) {
    const auto key = o.substr(0, o.find('='));
    const auto k = key.substr(key.find_first_not_of(" \t"));
    if (k.rfind("eval.", 0) != 0 && k.rfind("task.", 0) != 0) {
      throw ConfigError(k + ": only task.* and eval.* keys can be set for eval");
    }
    config.set(o);
  }
  if (options.problems) config.set("eval.problems", std::to_string(*options.problems));
  if (options.seed) config.set("eval.seed", std::to_string(*options.seed));
  if (options.samples || options.ks) {
    // Both move together so the K <= n check sees the final pair.
    RunConfig next = config;
    std::string ks = next.raw("eval.ks");
    if (options.ks) {
      ks.clear();
      for (std::size_t k : *options.ks) ks += (ks.empty() ? "" : ",") + std::to_string(k);
    }
    const std::string n = options.samples ? std::to_string(*options.samples) : next.raw("eval.samples");
    for (std::size_t k : options.ks ? *options.ks : next.int_list("eval.ks")) {
      if (k > std::stoull(n)) {
        throw InputError("eval.ks: K=" + std::to_string(k) + " exceeds the " + n +
                         " samples per problem");
      }
    }
    next.set("eval.ks", "1");
    next.set("eval.samples", n);
    next.set("eval.ks", ks);
    config = std::move(next);
  }
  const auto m = config.model();
  const auto params = load_parameters(ckpt, m);
  const auto problems = eval_problems(config);
  eval::EvalReport report = eval::evaluate(params, m, problems, config.eval());
  report.config_text = config.resolved_text();
  const std::string text = eval::report_json(report);
  if (!out_path.empty()) {
    write_file_atomic(out_path, text);
  }
  return report;
}

std::string inspect_checkpoint(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  std::ostringstream out;
  out << "format version " << kCheckpointVersion << "\n";
  for (const auto& [k, v] : ckpt.meta) {
    if (k == "config" || k == "log" || k == "rng") {
      const auto lines = std::count(v.begin(), v.end(), '\n');
      out << k << ": " << v.size() << " bytes, " << lines << " lines\n";
    } else {
      out << k << ": " << v << "\n";
    }
  }
  std::size_t values = 0;
  for (const auto& r : ckpt.tensors) {
    out << "tensor " << r.name << " [";
    if (!r.tensor.empty()) {
      const auto& s = r.tensor.shape();
      for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "x" : "") << s[i];
      values += r.tensor.size();
    }
    out << "] crc32 " << std::hex << payload_checksum(r.tensor) << std::dec << "\n";
  }
  out << ckpt.tensors.size() << " tensors, " << values << " values\n";
  return out.str();
}

}  // namespace bupo::cli

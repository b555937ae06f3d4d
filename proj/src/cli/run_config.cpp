#include "bupo/cli/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "bupo/errors.hpp"

namespace bupo::cli {

namespace {

constexpr double kBig = 1e18;

std::vector<KeySpec> build_schema() {
  using T = ValueType;
  return {
      {"model.num_layers", T::Int, "", 1, 256, {}, "transformer blocks L"},
      {"model.d_model", T::Int, "", 2, 4096, {}, "residual width"},
      {"model.num_heads", T::Int, "", 1, 64, {}, "attention heads"},
      {"model.d_ff", T::Int, "", 1, 16384, {}, "SwiGLU hidden width"},
      {"model.vocab_size", T::Int, "20", 20, 64, {}, "vocabulary size N"},
      {"model.max_seq_len", T::Int, "16", 2, 4096, {}, "longest sequence"},
      {"model.rope_base", T::Real, "10000", 1, kBig, {}, "rotary base"},
      {"model.norm_eps", T::Real, "1e-6", 0, 1, {}, "RMSNorm epsilon"},
      {"model.tie_unembedding", T::Bool, "false", 0, 0, {}, "share E and E_u"},
      {"model.init_std", T::Real, "0.02", 1e-12, 10, {}, "projection init std"},
      {"model.seed", T::Int, "1", 0, kBig, {}, "initialization seed"},

      {"task.kind", T::String, "modular_add", 0, 0,
       {"modular_add", "multi_digit_add", "reverse_sequence", "balance_check"}, "task family"},
      {"task.modulus", T::Int, "7", 2, 1e9, {}, "modular_add modulus"},
      {"task.digits", T::Int, "2", 1, 9, {}, "multi_digit_add operand digits"},
      {"task.length", T::Int, "4", 1, 64, {}, "reverse/balance prompt length"},
      {"task.eval_percent", T::Int, "10", 1, 99, {}, "share of seeds in the eval split"},

      {"train.algorithm", T::String, "grpo", 0, 0, {"grpo", "intergrpo", "bupo"}, "schedule"},
      {"train.seed", T::Int, "1", 0, kBig, {}, "training seed"},
      {"train.max_steps", T::Int, "300", 1, 1e9, {}, "S_max"},
      {"train.group_size", T::Int, "8", 2, 4096, {}, "responses per prompt G"},
      {"train.prompt_batch", T::Int, "8", 1, 4096, {}, "prompts per step"},
      {"train.mini_batch", T::Int, "8", 1, 4096, {}, "prompts per update"},
      {"train.updates_per_rollout", T::Int, "1", 1, 4096, {}, "updates per rollout batch"},
      {"train.learning_rate", T::Real, "1e-4", 1e-12, 1, {}, "AdamW learning rate"},
      {"train.beta1", T::Real, "0.9", 0, 0.999999, {}, "AdamW beta1"},
      {"train.beta2", T::Real, "0.999", 0, 0.999999, {}, "AdamW beta2"},
      {"train.adam_eps", T::Real, "1e-8", 1e-30, 1, {}, "AdamW epsilon"},
      {"train.weight_decay", T::Real, "0", 0, 1, {}, "decoupled weight decay"},
      {"train.grad_clip", T::Real, "1", 0, kBig, {}, "global norm clip, 0 disables"},
      {"train.clip_eps", T::Real, "0.2", 1e-6, 0.999999, {}, "ratio clip range"},
      {"train.temperature", T::Real, "1", 1e-6, 100, {}, "rollout temperature"},
      {"train.max_new_tokens", T::Int, "0", 0, 4096, {}, "response budget, 0 = task maximum"},
      {"train.pool_size", T::Int, "4096", 1, 1e8, {}, "training instances"},
      {"train.probe_size", T::Int, "64", 1, 1e6, {}, "held-out PPL probe instances"},
      {"train.ppl_every", T::Int, "10", 1, 1e9, {}, "PPL probe interval"},
      {"train.warm_supervised_steps", T::Int, "500", 0, 1e9, {}, "gold-answer pretraining steps"},
      {"train.warm_temper_steps", T::Int, "200", 0, 1e9, {}, "weak-teacher steps"},
      {"train.warm_teacher_weight", T::Real, "0.03", 0, 1, {}, "gold weight q of the weak teacher"},
      {"train.warm_batch", T::Int, "32", 1, 1e6, {}, "pretraining sequences per step"},
      {"train.warm_learning_rate", T::Real, "1e-3", 1e-12, 1, {}, "gold-answer learning rate"},
      {"train.warm_temper_learning_rate", T::Real, "1e-4", 1e-12, 1, {}, "weak-teacher learning rate"},

      {"bupo.layer", T::Int, "0", 0, 256, {}, "internal layer l, 0 = region boundary"},
      {"bupo.s_inter", T::Int, "0", 0, 1e9, {}, "internal-phase steps"},
      {"bupo.apply_norm", T::Bool, "false", 0, 0, {}, "normalize H^l before E_u"},
      {"bupo.boundary_band", T::Real, "0.05", 0, kBig, {}, "|dH_FFN| treated as zero"},

      {"eval.problems", T::Int, "64", 1, 1e7, {}, "eval-split problems"},
      {"eval.samples", T::Int, "8", 1, 1e6, {}, "responses per problem n"},
      {"eval.ks", T::IntList, "1,2,4,8", 1, 1e6, {}, "K values"},
      {"eval.seed", T::Int, "7", 0, kBig, {}, "evaluation seed"},
      {"eval.temperature", T::Real, "1", 1e-6, 100, {}, "sampling temperature"},
      {"eval.max_new_tokens", T::Int, "0", 0, 4096, {}, "response budget, 0 = task maximum"},

      {"io.out_dir", T::String, "run", 0, 0, {}, "output directory"},
      {"io.ckpt_every", T::Int, "50", 1, 1e9, {}, "checkpoint interval in steps"},
      {"io.log_wall_time", T::Bool, "false", 0, 0, {}, "record wall_ms (breaks byte-identical logs)"},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(const std::string& key, const std::string& why) {
  throw ConfigError(key + ": " + why);
}

std::int64_t parse_int(const std::string& key, const std::string& text) {
  std::int64_t v = 0;
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) fail(key, "expected an integer, got '" + text + "'");
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  in.imbue(std::locale::classic());
  double v = 0.0;
  in >> v;
  if (in.fail() || !in.eof() || !std::isfinite(v)) {
    fail(key, "expected a finite number, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  fail(key, "expected true or false, got '" + text + "'");
}

std::vector<std::int64_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::int64_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_int(key, trim(item)));
  if (out.empty()) fail(key, "expected a comma-separated list of integers");
  return out;
}

void check_range(const KeySpec& spec, double v) {
  if (spec.min < spec.max && (v < spec.min || v > spec.max)) {
    std::ostringstream msg;
    msg << "value " << v << " outside [" << spec.min << ", " << spec.max << "]";
    fail(spec.key, msg.str());
  }
}

void check_value(const KeySpec& spec, const std::string& value) {
  switch (spec.type) {
    case ValueType::Int: check_range(spec, static_cast<double>(parse_int(spec.key, value))); break;
    case ValueType::Real: check_range(spec, parse_real(spec.key, value)); break;
    case ValueType::Bool: parse_bool(spec.key, value); break;
    case ValueType::String:
      if (value.empty()) fail(spec.key, "must not be empty");
      if (!spec.choices.empty() &&
          std::find(spec.choices.begin(), spec.choices.end(), value) == spec.choices.end()) {
        std::string options;
        for (const auto& c : spec.choices) options += (options.empty() ? "" : ", ") + c;
        fail(spec.key, "unknown value '" + value + "' (expected one of " + options + ")");
      }
      break;
    case ValueType::IntList:
      for (auto v : parse_list(spec.key, value)) check_range(spec, static_cast<double>(v));
      break;
  }
}

}  // namespace

const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> s = build_schema();
  return s;
}

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : schema()) {
    if (k.key == key) return &k;
  }
  return nullptr;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!find_key(key)) throw ConfigError(where + ": " + key + ": unknown key");
    if (!seen.insert(key).second) throw ConfigError(where + ": " + key + ": duplicate key");
    try {
      check_value(*find_key(key), value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    cfg.values_[key] = value;
  }
  cfg.validate_all();
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str(), path);
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const KeySpec* spec = find_key(key);
  if (!spec) fail(key, "unknown key");
  check_value(*spec, value);
  RunConfig next = *this;
  next.values_[key] = value;
  next.validate_all();
  *this = std::move(next);
}

void RunConfig::validate_all() {
  for (const auto& spec : schema()) {
    if (values_.count(spec.key)) continue;
    if (spec.required()) fail(spec.key, "required key is missing");
    values_[spec.key] = spec.fallback;
  }
  // Cross-key checks reuse the library validators, whose messages name keys.
  const model::ModelConfig m = model();
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  task().validate(m);
  rl::TrainerConfig tc = trainer();
  if (tc.internal_layer == 0) tc.internal_layer = 1;  // auto, resolved later
  tc.validate(m);
  for (std::size_t k : int_list("eval.ks")) {
    if (k > static_cast<std::size_t>(integer("eval.samples"))) {
      fail("eval.ks", "K=" + std::to_string(k) + " exceeds eval.samples");
    }
  }
}

const std::string& RunConfig::raw(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) fail(key, "unknown key");
  return it->second;
}

std::int64_t RunConfig::integer(const std::string& key) const { return parse_int(key, raw(key)); }

std::uint64_t RunConfig::unsigned_integer(const std::string& key) const {
  const auto v = integer(key);
  if (v < 0) fail(key, "must not be negative");
  return static_cast<std::uint64_t>(v);
}

double RunConfig::real(const std::string& key) const { return parse_real(key, raw(key)); }

bool RunConfig::boolean(const std::string& key) const { return parse_bool(key, raw(key)); }

std::vector<std::size_t> RunConfig::int_list(const std::string& key) const {
  std::vector<std::size_t> out;
  for (auto v : parse_list(key, raw(key))) out.push_back(static_cast<std::size_t>(v));
  return out;
}

std::string RunConfig::resolved_text() const {
  std::string out;
  for (const auto& spec : schema()) out += spec.key + " = " + raw(spec.key) + "\n";
  return out;
}

model::ModelConfig RunConfig::model() const {
  model::ModelConfig c;
  c.num_layers = unsigned_integer("model.num_layers");
  c.d_model = unsigned_integer("model.d_model");
  c.num_heads = unsigned_integer("model.num_heads");
  c.d_ff = unsigned_integer("model.d_ff");
  c.vocab_size = unsigned_integer("model.vocab_size");
  c.max_seq_len = unsigned_integer("model.max_seq_len");
  c.rope_base = real("model.rope_base");
  c.norm_eps = real("model.norm_eps");
  c.tie_unembedding = boolean("model.tie_unembedding");
  c.init_std = real("model.init_std");
  return c;
}

tasks::TaskSpec RunConfig::task() const {
  tasks::TaskSpec t;
  t.kind = tasks::parse_task_kind(raw("task.kind"));
  t.modulus = static_cast<std::uint32_t>(unsigned_integer("task.modulus"));
  t.digits = static_cast<std::uint32_t>(unsigned_integer("task.digits"));
  t.length = static_cast<std::uint32_t>(unsigned_integer("task.length"));
  t.eval_percent = static_cast<std::uint32_t>(unsigned_integer("task.eval_percent"));
  return t;
}

rl::TrainerConfig RunConfig::trainer() const {
  rl::TrainerConfig tc;
  tc.algorithm = rl::parse_algorithm(raw("train.algorithm"));
  tc.seed = unsigned_integer("train.seed");
  tc.max_steps = unsigned_integer("train.max_steps");
  tc.group_size = unsigned_integer("train.group_size");
  tc.prompt_batch = unsigned_integer("train.prompt_batch");
  tc.mini_batch = unsigned_integer("train.mini_batch");
  tc.updates_per_rollout = unsigned_integer("train.updates_per_rollout");
  tc.optimizer.learning_rate = real("train.learning_rate");
  tc.optimizer.beta1 = real("train.beta1");
  tc.optimizer.beta2 = real("train.beta2");
  tc.optimizer.eps = real("train.adam_eps");
  tc.optimizer.weight_decay = real("train.weight_decay");
  tc.optimizer.grad_clip = real("train.grad_clip");
  tc.clip_eps = real("train.clip_eps");
  tc.temperature = real("train.temperature");
  tc.max_new_tokens = unsigned_integer("train.max_new_tokens");
  tc.pool_size = unsigned_integer("train.pool_size");
  tc.probe_size = unsigned_integer("train.probe_size");
  tc.ppl_every = unsigned_integer("train.ppl_every");
  tc.internal_layer = unsigned_integer("bupo.layer");
  tc.s_inter = unsigned_integer("bupo.s_inter");
  tc.internal_apply_norm = boolean("bupo.apply_norm");
  return tc;
}

rl::WarmStartConfig RunConfig::warm_start() const {
  rl::WarmStartConfig ws;
  ws.supervised_steps = unsigned_integer("train.warm_supervised_steps");
  ws.temper_steps = unsigned_integer("train.warm_temper_steps");
  ws.teacher_weight = real("train.warm_teacher_weight");
  ws.batch = unsigned_integer("train.warm_batch");
  ws.learning_rate = real("train.warm_learning_rate");
  ws.temper_learning_rate = real("train.warm_temper_learning_rate");
  ws.seed = unsigned_integer("model.seed");
  return ws;
}

eval::EvalSettings RunConfig::eval() const {
  eval::EvalSettings s;
  s.samples = unsigned_integer("eval.samples");
  s.ks = int_list("eval.ks");
  s.seed = unsigned_integer("eval.seed");
  s.sampling.temperature = real("eval.temperature");
  const auto budget = unsigned_integer("eval.max_new_tokens");
  s.sampling.max_new_tokens = budget ? budget : task().max_response_length();
  s.sampling.eos_id = tasks::vocab::kEos;
  return s;
}

}  // namespace bupo::cli

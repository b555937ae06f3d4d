#include "bupo/tasks/task.hpp"

#include <algorithm>
#include <cctype>
#include <istream>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "bupo/errors.hpp"

namespace bupo::tasks {

using json = nlohmann::json;

namespace vocab {

std::string symbol(TokenId id) {
  if (id < 10) return std::string(1, static_cast<char>('0' + id));
  switch (id) {
    case kPlus: return "+";
    case kEquals: return "=";
    case kLParen: return "(";
    case kRParen: return ")";
    case kReverse: return "R";
    case kBalance: return "B";
    case kBos: return "<bos>";
    case kOpen: return "<open>";
    case kClose: return "<close>";
    case kEos: return "<eos>";
    default: return "<" + std::to_string(id) + ">";
  }
}

std::string render(std::span<const TokenId> tokens) {
  std::string out;
  for (TokenId t : tokens) out += symbol(t);
  return out;
}

std::vector<TokenId> parse(const std::string& text) {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    bool matched = false;
    for (TokenId id = 0; id < kSize && !matched; ++id) {
      const std::string sym = symbol(id);
      if (text.compare(i, sym.size(), sym) == 0) {
        out.push_back(id);
        i += sym.size();
        matched = true;
      }
    }
    if (!matched) {
      throw InputError("unknown symbol at offset " + std::to_string(i) + " in '" + text + "'");
    }
  }
  return out;
}

}  // namespace vocab

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t decimal_digits(std::uint64_t v) {
  std::size_t n = 1;
  while (v >= 10) {
    v /= 10;
    ++n;
  }
  return n;
}

void append_number(std::vector<TokenId>& out, std::uint64_t v) {
  const std::string s = std::to_string(v);
  for (char ch : s) out.push_back(static_cast<TokenId>(ch - '0'));
}

std::uint64_t pow10(std::uint32_t d) {
  std::uint64_t p = 1;
  for (std::uint32_t i = 0; i < d; ++i) p *= 10;
  return p;
}

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  return std::uniform_int_distribution<std::uint64_t>(0, bound - 1)(rng);
}

bool balanced(std::span<const TokenId> parens) {
  long depth = 0;
  for (TokenId t : parens) {
    depth += t == vocab::kLParen ? 1 : -1;
    if (depth < 0) return false;
  }
  return depth == 0;
}

}  // namespace

std::string task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::ModularAdd: return "modular_add";
    case TaskKind::MultiDigitAdd: return "multi_digit_add";
    case TaskKind::ReverseSequence: return "reverse_sequence";
    case TaskKind::BalanceCheck: return "balance_check";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  for (TaskKind k : {TaskKind::ModularAdd, TaskKind::MultiDigitAdd, TaskKind::ReverseSequence,
                     TaskKind::BalanceCheck}) {
    if (task_kind_name(k) == name) return k;
  }
  throw ConfigError("task.kind: unknown task '" + name +
                    "' (expected modular_add, multi_digit_add, reverse_sequence or balance_check)");
}

std::size_t TaskSpec::max_prompt_length() const {
  switch (kind) {
    case TaskKind::ModularAdd: return 3 + 2 * decimal_digits(modulus - 1);
    case TaskKind::MultiDigitAdd: return 3 + 2 * static_cast<std::size_t>(digits);
    case TaskKind::ReverseSequence:
    case TaskKind::BalanceCheck: return 3 + static_cast<std::size_t>(length);
  }
  return 0;
}

std::size_t TaskSpec::max_response_length() const {
  std::size_t answer = 1;
  switch (kind) {
    case TaskKind::ModularAdd: answer = decimal_digits(modulus - 1); break;
    case TaskKind::MultiDigitAdd: answer = static_cast<std::size_t>(digits) + 1; break;
    case TaskKind::ReverseSequence: answer = length; break;
    case TaskKind::BalanceCheck: answer = 1; break;
  }
  return answer + 3;
}

void TaskSpec::validate() const {
  if (kind == TaskKind::ModularAdd && (modulus < 2 || modulus > 1000000000)) {
    throw ConfigError("task.modulus must be in [2, 1000000000], got " + std::to_string(modulus));
  }
  if (kind == TaskKind::MultiDigitAdd && (digits < 1 || digits > 9)) {
    throw ConfigError("task.digits must be in [1, 9], got " + std::to_string(digits));
  }
  if (kind == TaskKind::ReverseSequence && (length < 1 || length > 64)) {
    throw ConfigError("task.length must be in [1, 64], got " + std::to_string(length));
  }
  if (kind == TaskKind::BalanceCheck && (length < 2 || length > 64 || length % 2 != 0)) {
    throw ConfigError("task.length must be even and in [2, 64] for balance_check, got " +
                      std::to_string(length));
  }
  if (eval_percent < 1 || eval_percent > 99) {
    throw ConfigError("task.eval_percent must be in [1, 99], got " + std::to_string(eval_percent));
  }
}

void TaskSpec::validate(const model::ModelConfig& config) const {
  validate();
  if (config.vocab_size < vocab::kSize) {
    throw ConfigError("model.vocab_size " + std::to_string(config.vocab_size) +
                      " is too small for the task vocabulary of " +
                      std::to_string(vocab::kSize) + " symbols");
  }
  const std::size_t need = max_prompt_length() + max_response_length();
  if (need > config.max_seq_len) {
    throw ConfigError("model.max_seq_len " + std::to_string(config.max_seq_len) + " is below the " +
                      std::to_string(need) + " tokens a " + task_kind_name(kind) +
                      " episode can need");
  }
}

std::string split_name(Split s) { return s == Split::Train ? "train" : "eval"; }

Split split_of(const TaskSpec& spec, std::uint64_t instance_seed) {
  const std::uint64_t h = splitmix64(instance_seed ^ 0x243f6a8885a308d3ULL);
  return h % 100 < spec.eval_percent ? Split::Eval : Split::Train;
}

std::vector<TokenId> ProblemInstance::canonical_response() const {
  std::vector<TokenId> out;
  out.reserve(answer.size() + 3);
  out.push_back(vocab::kOpen);
  out.insert(out.end(), answer.begin(), answer.end());
  out.push_back(vocab::kClose);
  out.push_back(vocab::kEos);
  return out;
}

ProblemInstance make_instance(const TaskSpec& spec, std::uint64_t instance_seed) {
  spec.validate();
  std::mt19937_64 rng(splitmix64(instance_seed));
  ProblemInstance inst;
  inst.seed = instance_seed;
  inst.split = split_of(spec, instance_seed);
  auto& p = inst.prompt;
  p.push_back(vocab::kBos);
  switch (spec.kind) {
    case TaskKind::ModularAdd: {
      const std::uint64_t a = uniform_below(rng, spec.modulus);
      const std::uint64_t b = uniform_below(rng, spec.modulus);
      append_number(p, a);
      p.push_back(vocab::kPlus);
      append_number(p, b);
      append_number(inst.answer, (a + b) % spec.modulus);
      break;
    }
    case TaskKind::MultiDigitAdd: {
      const std::uint64_t limit = pow10(spec.digits);
      const std::uint64_t a = uniform_below(rng, limit);
      const std::uint64_t b = uniform_below(rng, limit);
      append_number(p, a);
      p.push_back(vocab::kPlus);
      append_number(p, b);
      append_number(inst.answer, a + b);
      break;
    }
    case TaskKind::ReverseSequence: {
      p.push_back(vocab::kReverse);
      for (std::uint32_t i = 0; i < spec.length; ++i) {
        p.push_back(static_cast<TokenId>(uniform_below(rng, 10)));
      }
      inst.answer.assign(p.rbegin(), p.rend() - 2);
      break;
    }
    case TaskKind::BalanceCheck: {
      p.push_back(vocab::kBalance);
      std::vector<TokenId> parens;
      if (uniform_below(rng, 2) == 0) {
        // Random walk that always stays closable.
        long depth = 0;
        for (std::uint32_t i = 0; i < spec.length; ++i) {
          const long remaining = static_cast<long>(spec.length - i);
          const bool can_open = depth + 1 <= remaining - 1;
          const bool can_close = depth > 0;
          const bool open = can_open && (!can_close || uniform_below(rng, 2) == 0);
          parens.push_back(open ? vocab::kLParen : vocab::kRParen);
          depth += open ? 1 : -1;
        }
      } else {
        for (std::uint32_t i = 0; i < spec.length; ++i) {
          parens.push_back(uniform_below(rng, 2) ? vocab::kLParen : vocab::kRParen);
        }
      }
      p.insert(p.end(), parens.begin(), parens.end());
      inst.answer.push_back(balanced(parens) ? 1 : 0);
      break;
    }
  }
  p.push_back(vocab::kEquals);
  return inst;
}

std::vector<ProblemInstance> generate_dataset(const TaskSpec& spec, std::size_t n,
                                              std::uint64_t seed, Split split) {
  if (n == 0) throw InputError("dataset size must be at least 1");
  spec.validate();
  std::vector<ProblemInstance> out;
  out.reserve(n);
  std::uint64_t state = seed;
  while (out.size() < n) {
    state = splitmix64(state);
    if (split_of(spec, state) == split) out.push_back(make_instance(spec, state));
  }
  return out;
}

bool extract_answer(std::span<const TokenId> response, std::vector<TokenId>& out) {
  const auto open = std::find(response.begin(), response.end(), vocab::kOpen);
  if (open == response.end()) return false;
  const auto close = std::find(open + 1, response.end(), vocab::kClose);
  if (close == response.end()) return false;
  out.assign(open + 1, close);
  return true;
}

bool verify(const ProblemInstance& instance, std::span<const TokenId> response) {
  std::vector<TokenId> answer;
  return extract_answer(response, answer) && answer == instance.answer;
}

std::vector<TokenId> random_answer(const TaskSpec& spec, std::mt19937_64& rng) {
  std::vector<TokenId> out;
  switch (spec.kind) {
    case TaskKind::ModularAdd:
      append_number(out, uniform_below(rng, spec.modulus));
      break;
    case TaskKind::MultiDigitAdd:
      append_number(out, uniform_below(rng, 2 * (pow10(spec.digits) - 1) + 1));
      break;
    case TaskKind::ReverseSequence:
      for (std::uint32_t i = 0; i < spec.length; ++i) {
        out.push_back(static_cast<TokenId>(uniform_below(rng, 10)));
      }
      break;
    case TaskKind::BalanceCheck:
      out.push_back(static_cast<TokenId>(uniform_below(rng, 2)));
      break;
  }
  return out;
}

std::vector<TokenId> answer_symbols(const TaskSpec& spec) {
  std::uint32_t n = 10;
  if (spec.kind == TaskKind::ModularAdd) n = std::min<std::uint32_t>(spec.modulus, 10);
  if (spec.kind == TaskKind::BalanceCheck) n = 2;
  std::vector<TokenId> out(n);
  for (std::uint32_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

namespace {

constexpr const char* kFormat = "bupo-dataset";
constexpr int kVersion = 1;

json spec_json(const TaskSpec& s) {
  return {{"kind", task_kind_name(s.kind)}, {"modulus", s.modulus}, {"digits", s.digits},
          {"length", s.length}, {"eval_percent", s.eval_percent}};
}

}  // namespace

std::string describe(const TaskSpec& spec) { return spec_json(spec).dump(); }

void dump_dataset(std::ostream& out, const TaskSpec& spec,
                  std::span<const ProblemInstance> instances) {
  out << json{{"format", kFormat}, {"version", kVersion}, {"task", spec_json(spec)}}.dump() << '\n';
  for (const auto& inst : instances) {
    out << json{{"seed", inst.seed},
                {"split", split_name(inst.split)},
                {"prompt", inst.prompt},
                {"answer", inst.answer}}
               .dump()
        << '\n';
  }
}

std::vector<ProblemInstance> load_dataset(std::istream& in, TaskSpec* spec) {
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) -> CorruptDataError {
    return CorruptDataError("dataset line " + std::to_string(line_no) + ": " + why);
  };
  try {
    if (!std::getline(in, line)) throw CorruptDataError("dataset is empty");
    ++line_no;
    const json header = json::parse(line);
    if (header.value("format", "") != kFormat) throw fail("not a bupo dataset");
    if (header.value("version", 0) != kVersion) {
      throw fail("unsupported version " + header.value("version", json()).dump());
    }
    TaskSpec parsed;
    const json& t = header.at("task");
    parsed.kind = parse_task_kind(t.at("kind").get<std::string>());
    parsed.modulus = t.at("modulus").get<std::uint32_t>();
    parsed.digits = t.at("digits").get<std::uint32_t>();
    parsed.length = t.at("length").get<std::uint32_t>();
    parsed.eval_percent = t.at("eval_percent").get<std::uint32_t>();
    parsed.validate();
    if (spec) *spec = parsed;

    std::vector<ProblemInstance> out;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const json r = json::parse(line);
      ProblemInstance inst;
      inst.seed = r.at("seed").get<std::uint64_t>();
      const std::string split = r.at("split").get<std::string>();
      if (split != "train" && split != "eval") throw fail("unknown split '" + split + "'");
      inst.split = split == "train" ? Split::Train : Split::Eval;
      inst.prompt = r.at("prompt").get<std::vector<TokenId>>();
      inst.answer = r.at("answer").get<std::vector<TokenId>>();
      for (TokenId id : inst.prompt) {
        if (id >= vocab::kSize) throw fail("token id " + std::to_string(id) + " out of range");
      }
      out.push_back(std::move(inst));
    }
    return out;
  } catch (const json::exception& e) {
    throw fail(e.what());
  }
}

}  // namespace bupo::tasks

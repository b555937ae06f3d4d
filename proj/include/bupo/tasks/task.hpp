#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bupo/model/config.hpp"

namespace bupo::tasks {

using model::TokenId;

// Fixed character-level vocabulary shared by every task.
namespace vocab {
inline constexpr TokenId kPlus = 10;
inline constexpr TokenId kEquals = 11;
inline constexpr TokenId kLParen = 12;
inline constexpr TokenId kRParen = 13;
inline constexpr TokenId kReverse = 14;
inline constexpr TokenId kBalance = 15;
inline constexpr TokenId kBos = 16;
inline constexpr TokenId kOpen = 17;   // answer delimiters
inline constexpr TokenId kClose = 18;
inline constexpr TokenId kEos = 19;
inline constexpr std::size_t kSize = 20;

std::string symbol(TokenId id);
std::string render(std::span<const TokenId> tokens);
// Inverse of render; whitespace between symbols is ignored. InputError on
// anything that is not a vocabulary symbol.
std::vector<TokenId> parse(const std::string& text);
}  // namespace vocab

enum class TaskKind { ModularAdd, MultiDigitAdd, ReverseSequence, BalanceCheck };

std::string task_kind_name(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::ModularAdd;
  std::uint32_t modulus = 7;    // modular_add
  std::uint32_t digits = 2;     // multi_digit_add: operand digits
  std::uint32_t length = 4;     // reverse_sequence / balance_check: symbols in the prompt
  std::uint32_t eval_percent = 10;  // share of instance seeds hashed to the eval split

  std::size_t max_prompt_length() const;
  std::size_t max_response_length() const;  // including delimiters and eos
  // ConfigError when parameters are out of range or the task does not fit the model.
  void validate(const model::ModelConfig& config) const;
  void validate() const;
};

enum class Split { Train, Eval };
std::string split_name(Split s);
Split split_of(const TaskSpec& spec, std::uint64_t instance_seed);

struct ProblemInstance {
  std::vector<TokenId> prompt;
  std::vector<TokenId> answer;  // without delimiters
  std::uint64_t seed = 0;
  Split split = Split::Train;

  // <open> answer <close> <eos>
  std::vector<TokenId> canonical_response() const;
  friend bool operator==(const ProblemInstance&, const ProblemInstance&) = default;
};

// Instance determined entirely by its seed.
ProblemInstance make_instance(const TaskSpec& spec, std::uint64_t instance_seed);

// n instances of the requested split, drawn from a seed stream.
std::vector<ProblemInstance> generate_dataset(const TaskSpec& spec, std::size_t n,
                                              std::uint64_t seed, Split split = Split::Train);

// Tokens between the first <open> and the next <close>; false if either is missing.
bool extract_answer(std::span<const TokenId> response, std::vector<TokenId>& out);
// Total: never throws, rejects anything that is not the exact answer.
bool verify(const ProblemInstance& instance, std::span<const TokenId> response);
inline double reward(const ProblemInstance& instance, std::span<const TokenId> response) {
  return verify(instance, response) ? 1.0 : 0.0;
}

// A well-formed answer drawn uniformly from the task's answer space, with
// no relation to any prompt.
std::vector<TokenId> random_answer(const TaskSpec& spec, std::mt19937_64& rng);
// Symbols that can appear inside an answer.
std::vector<TokenId> answer_symbols(const TaskSpec& spec);

// Line-delimited JSON: a header record, then one record per instance.
void dump_dataset(std::ostream& out, const TaskSpec& spec,
                  std::span<const ProblemInstance> instances);
std::vector<ProblemInstance> load_dataset(std::istream& in, TaskSpec* spec = nullptr);

std::string describe(const TaskSpec& spec);

}  // namespace bupo::tasks

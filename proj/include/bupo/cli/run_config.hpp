#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bupo/eval/metrics.hpp"
#include "bupo/model/config.hpp"
#include "bupo/rl/trainer.hpp"
#include "bupo/tasks/task.hpp"

namespace bupo::cli {

enum class ValueType { Int, Real, Bool, String, IntList };

struct KeySpec {
  std::string key;
  ValueType type;
  std::string fallback;  // empty: the key is required
  double min = 0.0;
  double max = 0.0;  // range applies to numbers and list entries when min < max
  std::vector<std::string> choices;
  std::string help;

  bool required() const { return fallback.empty(); }
};

// Every accepted key, in the order resolved configs are written.
const std::vector<KeySpec>& schema();
const KeySpec* find_key(const std::string& key);

// Flat `key = value` document with '#' comments. Every key is validated
// against schema() and defaults are filled in, so values() always holds the
// full resolved set.
class RunConfig {
 public:
  // ConfigError naming the key (and line, for text) on unknown keys,
  // duplicates, type or range violations, and missing required keys.
  static RunConfig parse(const std::string& text, const std::string& origin = "config");
  static RunConfig from_file(const std::string& path);

  // Applies `key=value`; the result is revalidated.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& raw(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::uint64_t unsigned_integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool boolean(const std::string& key) const;
  std::vector<std::size_t> int_list(const std::string& key) const;

  // One `key = value` line per schema entry.
  std::string resolved_text() const;

  model::ModelConfig model() const;
  tasks::TaskSpec task() const;
  // bupo.layer = 0 is kept as 0 here; callers resolve it.
  rl::TrainerConfig trainer() const;
  rl::WarmStartConfig warm_start() const;
  eval::EvalSettings eval() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

 private:
  void validate_all();
  std::map<std::string, std::string> values_;
};

}  // namespace bupo::cli

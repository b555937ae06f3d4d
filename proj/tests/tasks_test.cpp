#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "bupo/errors.hpp"
#include "bupo/tasks/task.hpp"

using namespace bupo;
using namespace bupo::tasks;

namespace {

// Reads a decimal number out of digit tokens.
std::uint64_t number(std::span<const TokenId> digits) {
  std::uint64_t v = 0;
  for (TokenId d : digits) {
    REQUIRE(d < 10);
    v = v * 10 + d;
  }
  return v;
}

std::vector<TaskSpec> all_specs() {
  TaskSpec mod;
  TaskSpec big_mod;
  big_mod.modulus = 97;
  TaskSpec add;
  add.kind = TaskKind::MultiDigitAdd;
  add.digits = 3;
  TaskSpec rev;
  rev.kind = TaskKind::ReverseSequence;
  rev.length = 5;
  TaskSpec bal;
  bal.kind = TaskKind::BalanceCheck;
  bal.length = 6;
  return {mod, big_mod, add, rev, bal};
}

}  // namespace

TEST_CASE("same seed gives the same dataset") {
  for (const TaskSpec& spec : all_specs()) {
    CHECK(generate_dataset(spec, 50, 9) == generate_dataset(spec, 50, 9));
    CHECK_FALSE(generate_dataset(spec, 50, 9) == generate_dataset(spec, 50, 10));
    CHECK(generate_dataset(spec, 20, 9, Split::Eval) == generate_dataset(spec, 20, 9, Split::Eval));
  }
}

TEST_CASE("modular_add answers are correct residues") {
  TaskSpec spec;
  for (const auto& inst : generate_dataset(spec, 500, 1)) {
    REQUIRE(inst.prompt.size() == 5);
    CHECK(inst.prompt.front() == vocab::kBos);
    CHECK(inst.prompt[2] == vocab::kPlus);
    CHECK(inst.prompt.back() == vocab::kEquals);
    const std::uint64_t a = inst.prompt[1], b = inst.prompt[3];
    CHECK(a < 7);
    CHECK(b < 7);
    REQUIRE(inst.answer.size() == 1);
    CHECK(inst.answer[0] < 7);
    CHECK(inst.answer[0] == (a + b) % 7);
  }
}

TEST_CASE("every task's canonical answer is accepted and matches its meaning") {
  for (const TaskSpec& spec : all_specs()) {
    for (const auto& inst : generate_dataset(spec, 300, 4)) {
      CHECK(verify(inst, inst.canonical_response()));
      CHECK(inst.prompt.size() <= spec.max_prompt_length());
      CHECK(inst.canonical_response().size() <= spec.max_response_length());
      const std::span<const TokenId> body(inst.prompt.data() + 1, inst.prompt.size() - 2);
      switch (spec.kind) {
        case TaskKind::ModularAdd:
        case TaskKind::MultiDigitAdd: {
          const auto plus = std::find(body.begin(), body.end(), vocab::kPlus);
          const std::uint64_t a = number({body.begin(), plus});
          const std::uint64_t b = number({plus + 1, body.end()});
          const std::uint64_t sum = spec.kind == TaskKind::ModularAdd ? (a + b) % spec.modulus : a + b;
          CHECK(number(inst.answer) == sum);
          CHECK(std::to_string(sum).size() == inst.answer.size());
          break;
        }
        case TaskKind::ReverseSequence:
          CHECK(body[0] == vocab::kReverse);
          CHECK(std::equal(inst.answer.begin(), inst.answer.end(), body.rbegin()));
          break;
        case TaskKind::BalanceCheck: {
          int depth = 0;
          bool ok = true;
          for (std::size_t i = 1; i < body.size(); ++i) {
            depth += body[i] == vocab::kLParen ? 1 : -1;
            ok = ok && depth >= 0;
          }
          CHECK(inst.answer == std::vector<TokenId>{ok && depth == 0 ? 1u : 0u});
          break;
        }
      }
    }
  }
}

TEST_CASE("balance_check produces both labels") {
  TaskSpec spec;
  spec.kind = TaskKind::BalanceCheck;
  spec.length = 8;
  int yes = 0;
  const auto data = generate_dataset(spec, 1000, 2);
  for (const auto& inst : data) yes += inst.answer[0];
  CHECK(yes > 400);
  CHECK(yes < 700);
}

TEST_CASE("verifier rejects near misses and malformed output") {
  TaskSpec spec;
  spec.modulus = 97;
  const auto inst = generate_dataset(spec, 1, 3)[0];
  std::vector<TokenId> r = inst.canonical_response();
  CHECK(verify(inst, r));

  std::vector<TokenId> off = inst.answer;
  off.back() = static_cast<TokenId>((off.back() + 1) % 10);
  std::vector<TokenId> wrong = {vocab::kOpen};
  wrong.insert(wrong.end(), off.begin(), off.end());
  wrong.push_back(vocab::kClose);
  CHECK_FALSE(verify(inst, wrong));

  CHECK_FALSE(verify(inst, std::vector<TokenId>(r.begin() + 1, r.end())));  // no <open>
  std::vector<TokenId> no_close = r;
  std::erase(no_close, vocab::kClose);
  CHECK_FALSE(verify(inst, no_close));
  CHECK_FALSE(verify(inst, std::vector<TokenId>{}));
  CHECK_FALSE(verify(inst, std::vector<TokenId>{vocab::kClose, vocab::kOpen}));
  std::vector<TokenId> padded = inst.answer;
  padded.push_back(0);
  std::vector<TokenId> extra = {vocab::kOpen};
  extra.insert(extra.end(), padded.begin(), padded.end());
  extra.push_back(vocab::kClose);
  CHECK_FALSE(verify(inst, extra));

  // Text before the delimiters and after <close> is ignored; the eos is optional.
  std::vector<TokenId> chatty = {3, 3, vocab::kPlus};
  chatty.insert(chatty.end(), r.begin(), r.end() - 1);
  chatty.push_back(4);
  CHECK(verify(inst, chatty));
  // Only the first delimited answer counts.
  std::vector<TokenId> twice = wrong;
  twice.insert(twice.end(), r.begin(), r.end());
  CHECK_FALSE(verify(inst, twice));
  // Garbage ids never throw.
  CHECK_FALSE(verify(inst, std::vector<TokenId>{999, vocab::kOpen, 12345, vocab::kClose}));
}

TEST_CASE("random policy baseline is sparse") {
  for (std::uint32_t m : {7u, 13u, 50u}) {
    TaskSpec spec;
    spec.modulus = m;
    const auto data = generate_dataset(spec, 2000, m);
    std::mt19937_64 rng(m * 31);
    std::uniform_int_distribution<TokenId> any(0, vocab::kSize - 1);
    std::size_t format_hits = 0, token_hits = 0;
    for (const auto& inst : data) {
      // A random answer in the right format.
      std::vector<TokenId> r = {vocab::kOpen};
      const auto a = random_answer(spec, rng);
      r.insert(r.end(), a.begin(), a.end());
      r.push_back(vocab::kClose);
      format_hits += verify(inst, r);
      // Uniformly random tokens.
      std::vector<TokenId> noise(8);
      for (auto& t : noise) t = any(rng);
      token_hits += verify(inst, noise);
    }
    CHECK(static_cast<double>(format_hits) / 2000.0 <= 2.0 / m);
    CHECK(static_cast<double>(token_hits) / 2000.0 <= 2.0 / m);
  }
}

TEST_CASE("random_answer stays in the answer space") {
  std::mt19937_64 rng(5);
  TaskSpec spec;
  std::set<TokenId> seen;
  for (int i = 0; i < 700; ++i) {
    const auto a = random_answer(spec, rng);
    REQUIRE(a.size() == 1);
    seen.insert(a[0]);
  }
  CHECK(seen.size() == 7);
  CHECK(*seen.rbegin() == 6);
  CHECK(answer_symbols(spec) == std::vector<TokenId>(seen.begin(), seen.end()));

  // Every symbol of every answer belongs to the answer alphabet.
  for (auto kind : {TaskKind::ModularAdd, TaskKind::MultiDigitAdd, TaskKind::ReverseSequence,
                    TaskKind::BalanceCheck}) {
    TaskSpec k;
    k.kind = kind;
    const auto alphabet = answer_symbols(k);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      for (TokenId t : make_instance(k, seed).answer) {
        CHECK(std::find(alphabet.begin(), alphabet.end(), t) != alphabet.end());
      }
    }
  }
  spec.modulus = 50;
  CHECK(answer_symbols(spec).size() == 10);
}

TEST_CASE("train and eval splits are disjoint") {
  TaskSpec spec;
  const auto train = generate_dataset(spec, 10000, 77, Split::Train);
  const auto eval = generate_dataset(spec, 10000, 77, Split::Eval);
  std::set<std::uint64_t> train_seeds;
  for (const auto& i : train) {
    CHECK(i.split == Split::Train);
    train_seeds.insert(i.seed);
  }
  for (const auto& i : eval) {
    CHECK(i.split == Split::Eval);
    CHECK(train_seeds.count(i.seed) == 0);
  }
  // Independent recomputation of the partition from the seed alone.
  for (const auto& i : eval) CHECK(split_of(spec, i.seed) == Split::Eval);
  for (const auto& i : train) CHECK(make_instance(spec, i.seed) == i);
}

TEST_CASE("spec validation") {
  model::ModelConfig c;
  TaskSpec spec;
  CHECK_NOTHROW(spec.validate(c));
  c.vocab_size = 12;
  CHECK_THROWS_AS(spec.validate(c), ConfigError);
  c = model::ModelConfig{};
  spec.kind = TaskKind::ReverseSequence;
  spec.length = 40;
  CHECK_THROWS_AS(spec.validate(c), ConfigError);  // does not fit max_seq_len
  spec.kind = TaskKind::BalanceCheck;
  spec.length = 5;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = TaskSpec{};
  spec.modulus = 1;
  CHECK_THROWS_AS(generate_dataset(spec, 3, 1), ConfigError);
  CHECK_THROWS_AS(generate_dataset(TaskSpec{}, 0, 1), InputError);
  CHECK_THROWS_AS(parse_task_kind("sudoku"), ConfigError);
}

TEST_CASE("dataset dump and load round-trip") {
  for (const TaskSpec& spec : all_specs()) {
    const auto data = generate_dataset(spec, 25, 12, Split::Eval);
    std::stringstream buf;
    dump_dataset(buf, spec, data);
    TaskSpec loaded_spec;
    const auto loaded = load_dataset(buf, &loaded_spec);
    CHECK(loaded == data);
    CHECK(describe(loaded_spec) == describe(spec));
  }
  std::stringstream bad_version(R"({"format":"bupo-dataset","version":9,"task":{}})");
  CHECK_THROWS_AS(load_dataset(bad_version), CorruptDataError);
  std::stringstream truncated(
      "{\"format\":\"bupo-dataset\",\"version\":1,\"task\":{\"kind\":\"modular_add\",\"modulus\":7,"
      "\"digits\":2,\"length\":4,\"eval_percent\":10}}\n{\"seed\":1,\"split\":\"train\",\"prompt\":[1,");
  CHECK_THROWS_AS(load_dataset(truncated), CorruptDataError);
  std::stringstream empty;
  CHECK_THROWS_AS(load_dataset(empty), CorruptDataError);
}

TEST_CASE("rendering") {
  TaskSpec spec;
  const auto inst = make_instance(spec, 1);
  const std::string text = vocab::render(inst.prompt);
  CHECK(text.rfind("<bos>", 0) == 0);
  CHECK(text.back() == '=');
  CHECK(vocab::render(std::vector<TokenId>{vocab::kOpen, 4, vocab::kClose, vocab::kEos}) ==
        "<open>4<close><eos>");
  for (auto kind : {TaskKind::ModularAdd, TaskKind::MultiDigitAdd, TaskKind::ReverseSequence,
                    TaskKind::BalanceCheck}) {
    TaskSpec k;
    k.kind = kind;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto p = make_instance(k, seed).prompt;
      CHECK(vocab::parse(vocab::render(p)) == p);
    }
  }
  CHECK(vocab::parse(" <bos> 3 + 4 = ") == std::vector<TokenId>{vocab::kBos, 3, vocab::kPlus, 4,
                                                                 vocab::kEquals});
  CHECK_THROWS_AS(vocab::parse("<bos>3*4="), InputError);
  CHECK_THROWS_AS(vocab::parse("<bo"), InputError);
}

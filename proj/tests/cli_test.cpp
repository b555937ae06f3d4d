#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <clocale>
#include <cmath>
#include <cstring>
#include <functional>
#include <filesystem>
#include <limits>
#include <random>

#include "bupo/cli/commands.hpp"
#include "bupo/cli/io.hpp"
#include "bupo/errors.hpp"

using namespace bupo;
using namespace bupo::cli;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(# small model
model.num_layers = 2
model.d_model = 16
model.num_heads = 2
model.d_ff = 24
train.max_steps = 12
train.warm_supervised_steps = 20
train.warm_temper_steps = 5
train.ppl_every = 4
bupo.layer = 1
eval.problems = 6
io.ckpt_every = 5
)";

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("bupo_cli_test_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& s, const std::string& part) {
  return s.find(part) != std::string::npos;
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.meta["kind"] = "test";
  c.meta["note"] = std::string("bytes\0with nul", 14);
  numeric::Tensor a({2, 3});
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = 0.1 * static_cast<double>(i) - 1e-300;
  a.data()[4] = -0.0;
  c.tensors.push_back({"a", a});
  c.tensors.push_back({"empty", numeric::Tensor()});
  numeric::Tensor b({3});
  b.data()[0] = std::nextafter(1.0, 2.0);
  b.data()[1] = 5e-324;
  b.data()[2] = 1.7976931348623157e308;
  c.tensors.push_back({"b", b});
  return c;
}

}  // namespace

TEST_CASE("config: required, unknown, duplicate and range errors name the key") {
  CHECK(contains(error_of([] { RunConfig::parse("model.d_model = 16\nmodel.num_heads = 2\nmodel.d_ff = 8\n"); }),
                 "model.num_layers: required key is missing"));
  const auto unknown = error_of([] { RunConfig::parse(std::string(kTiny) + "train.lr = 1\n"); });
  CHECK(contains(unknown, "config:13: train.lr: unknown key"));
  CHECK(contains(error_of([] { RunConfig::parse(std::string(kTiny) + "model.d_ff = 8\n"); }),
                 "model.d_ff: duplicate key"));
  CHECK(contains(error_of([] { RunConfig::parse(std::string(kTiny) + "train.clip_eps = 2\n"); }),
                 "train.clip_eps"));
  CHECK(contains(error_of([] { RunConfig::parse(std::string(kTiny) + "train.algorithm = ppo\n"); }),
                 "train.algorithm"));
  CHECK(contains(error_of([] { RunConfig::parse(std::string(kTiny) + "bupo.layer = 3\n"); }),
                 "layer"));
  CHECK(contains(error_of([] { RunConfig::parse(std::string(kTiny) + "model.tie_unembedding = maybe\n"); }),
                 "model.tie_unembedding"));
  CHECK_THROWS_AS(RunConfig::parse("just words\n"), ConfigError);
}

TEST_CASE("config: defaults resolve, overrides revalidate and the text round-trips") {
  RunConfig c = RunConfig::parse(kTiny);
  CHECK(c.raw("train.algorithm") == "grpo");
  CHECK(c.real("model.norm_eps") == 1e-6);
  CHECK(c.int_list("eval.ks") == std::vector<std::size_t>{1, 2, 4, 8});
  CHECK(RunConfig::parse(c.resolved_text()) == c);

  c.set("train.algorithm=bupo");
  c.set("bupo.s_inter", "3");
  CHECK(c.trainer().algorithm == rl::Algorithm::Bupo);
  CHECK(c.trainer().internal_steps() == 3);
  const RunConfig before = c;
  CHECK_THROWS_AS(c.set("bupo.s_inter=13"), ConfigError);  // exceeds max_steps
  CHECK_THROWS_AS(c.set("eval.samples=2"), ConfigError);   // K=4 > n
  CHECK_THROWS_AS(c.set("nope=1"), ConfigError);
  CHECK_THROWS_AS(c.set("no assignment"), ConfigError);
  CHECK(c == before);
}

TEST_CASE("reals print round-trippably with a '.' separator") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::uint64_t> bits;
  for (int i = 0; i < 2000; ++i) {
    const std::uint64_t b = bits(rng);
    double v;
    std::memcpy(&v, &b, sizeof v);
    if (!std::isfinite(v)) continue;
    CHECK(std::strtod(format_real(v).c_str(), nullptr) == v);
  }
  CHECK(format_real(0.1) == "0.10000000000000001");
  CHECK(format_real(std::nan("")) == "nan");
  CHECK(format_real(-INFINITY) == "-inf");
  if (std::setlocale(LC_NUMERIC, "de_DE.UTF-8")) {
    CHECK(format_real(1.5) == "1.5");
    std::setlocale(LC_NUMERIC, "C");
  }
  CsvTable t({"a", "b"});
  t.add_row({"1", "x"});
  CHECK(t.str() == "a,b\n1,x\n");
  CHECK_THROWS_AS(t.add_row({"1"}), DimensionError);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  const Checkpoint c = sample_checkpoint();
  const Checkpoint back = decode_checkpoint(encode_checkpoint(c));
  CHECK(back == c);
  CHECK(std::signbit(back.tensor("b").data()[0]) == false);
  CHECK(std::signbit(back.tensor("a").data()[4]));
  CHECK(back.value("note").size() == 14);
  CHECK_THROWS_AS(back.tensor("missing"), CorruptDataError);

  TempDir dir("ckpt");
  save_checkpoint(dir / "c.ckpt", c);
  CHECK(load_checkpoint(dir / "c.ckpt") == c);
  for (const auto& e : fs::directory_iterator(dir.path)) CHECK(e.path().filename() == "c.ckpt");
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), CorruptDataError);
}

TEST_CASE("every corrupted byte and every truncation is detected") {
  const std::string bytes = encode_checkpoint(sample_checkpoint());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    for (unsigned char flip : {0x01, 0x80}) {
      std::string bad = bytes;
      bad[i] = static_cast<char>(bad[i] ^ flip);
      CAPTURE(i);
      CHECK_THROWS_AS(decode_checkpoint(bad), CorruptDataError);
    }
  }
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, n)), CorruptDataError);
  }
  CHECK_THROWS_AS(decode_checkpoint(bytes + "x"), CorruptDataError);
}

TEST_CASE("train: log schema, checkpoints and manifest") {
  TempDir dir("train");
  RunConfig c = RunConfig::parse(kTiny);
  c.set("train.algorithm=bupo");
  c.set("bupo.s_inter=4");
  TrainOptions o;
  o.out_dir = dir / "run";
  const auto summary = run_train(c, o);
  CHECK(summary.steps == 12);
  CHECK(summary.log.size() == 12);

  const std::string log = read_file(dir / "run/training_log.csv");
  CHECK(log.rfind(
            "step,phase,mean_reward,surrogate_objective,policy_entropy,internal_entropy_layer_l,"
            "mean_response_len,ppl,grad_norm,wall_ms\n",
            0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 13);
  CHECK(contains(log, "\n4,internal,"));
  CHECK(contains(log, "\n5,final,"));
  // PPL only on probe steps; wall time off by default.
  CHECK(contains(log, ",,"));
  CHECK(log.substr(log.size() - 3) == ",0\n");

  const Checkpoint ckpt = load_checkpoint(dir / "run/checkpoint.ckpt");
  CHECK(ckpt.value("step") == "12");
  CHECK(ckpt.value("status") == "complete");
  CHECK(training_log_header() + ckpt.value("log") == log);
  CHECK(load_checkpoint(dir / "run/base.ckpt").value("step") == "0");
  const std::string manifest = read_file(dir / "run/manifest.json");
  CHECK(contains(manifest, "\"phase_switch_step\": 5"));
  CHECK(contains(manifest, "train.algorithm = bupo"));
}

TEST_CASE("train: bupo with s_inter = 0 writes the grpo log byte for byte") {
  TempDir dir("degenerate");
  RunConfig c = RunConfig::parse(kTiny);
  const auto base = base_model(c);
  TrainOptions o;
  o.base = &base;
  o.out_dir = dir / "grpo";
  run_train(c, o);
  c.set("train.algorithm=bupo");
  o.out_dir = dir / "bupo";
  run_train(c, o);
  CHECK(read_file(dir / "grpo/training_log.csv") == read_file(dir / "bupo/training_log.csv"));
}

TEST_CASE("train: resuming reproduces the uninterrupted log") {
  TempDir dir("resume");
  RunConfig c = RunConfig::parse(kTiny);
  c.set("train.algorithm=bupo");
  c.set("bupo.s_inter=6");
  const auto base = base_model(c);
  TrainOptions o;
  o.base = &base;
  o.out_dir = dir / "full";
  run_train(c, o);

  // Interrupted after step 5, then continued.
  o.out_dir = dir / "part";
  o.stop_after = 5;
  CHECK(run_train(c, o).log.size() == 5);
  const Checkpoint mid = load_checkpoint(dir / "part/checkpoint.ckpt");
  CHECK(mid.value("step") == "5");
  CHECK(mid.value("status") == "stopped");

  TrainOptions r;
  r.out_dir = dir / "resumed";
  r.resume = dir / "part/checkpoint.ckpt";
  const auto summary = run_train(c, r);
  CHECK(summary.log.size() == 7);
  CHECK(read_file(dir / "resumed/training_log.csv") == read_file(dir / "full/training_log.csv"));
  CHECK(load_checkpoint(dir / "resumed/checkpoint.ckpt").tensors ==
        load_checkpoint(dir / "full/checkpoint.ckpt").tensors);

  RunConfig changed = c;
  changed.set("train.learning_rate=0.5");
  CHECK(contains(error_of([&] { run_train(changed, r); }), "train.learning_rate: cannot change"));
}

TEST_CASE("train: a numeric fault checkpoints the last good state") {
  TempDir dir("fault");
  RunConfig c = RunConfig::parse(kTiny);
  auto base = base_model(c);
  base.embedding.fill(std::numeric_limits<double>::quiet_NaN());
  TrainOptions o;
  o.base = &base;
  o.out_dir = dir / "run";
  CHECK_THROWS_AS(run_train(c, o), NumericFault);
  const Checkpoint ckpt = load_checkpoint(dir / "run/checkpoint.ckpt");
  CHECK(ckpt.value("status") == "numeric_fault");
  CHECK(ckpt.value("step") == "0");
  CHECK(std::isnan(ckpt.tensor("param.embedding").data()[0]));
  CHECK(contains(read_file(dir / "run/manifest.json"), "numeric_fault"));
}

TEST_CASE("analyze: files, determinism and zeroed write-backs") {
  TempDir dir("analyze");
  RunConfig c = RunConfig::parse(kTiny);
  c.set("train.max_steps=2");
  TrainOptions o;
  o.out_dir = dir / "run";
  run_train(c, o);
  const std::string ckpt = dir / "run/checkpoint.ckpt";

  const auto a = run_analyze(ckpt, "", dir / "a1");
  run_analyze(ckpt, "", dir / "a2");
  for (const char* f : {"entropy_profile.csv", "entropy_change.csv", "residual_similarity.csv",
                        "boundary.json"}) {
    CAPTURE(f);
    CHECK(read_file(dir / (std::string("a1/") + f)) == read_file(dir / (std::string("a2/") + f)));
  }
  const std::string profile = read_file(dir / "a1/entropy_profile.csv");
  CHECK(profile.rfind("layer,site,mean_entropy_nats,token_count\n", 0) == 0);
  CHECK(std::count(profile.begin(), profile.end(), '\n') == 1 + 2 * 6 + 1);
  const double ln_n = std::log(20.0);
  for (std::size_t l = 1; l <= 2; ++l) {
    for (const auto site : internal::kLayerSites) {
      const double h = a.profile.entropy.mean({site, l});
      CHECK(h >= 0.0);
      CHECK(h <= ln_n + 1e-12);
    }
  }
  const std::string change = read_file(dir / "a1/entropy_change.csv");
  CHECK(change.rfind("layer,module,delta_h_nats\n1,ATTN,", 0) == 0);
  CHECK(contains(read_file(dir / "a1/boundary.json"), "\"has_boundary\""));

  // Prompts from a rendered-text file.
  write_file_atomic(dir / "prompts.txt", "3 + 4 =\n\n1+1=\n");
  const auto from_text = run_analyze(ckpt, dir / "prompts.txt", dir / "a3");
  CHECK(from_text.profile.entropy.token_count() > 0);
  write_file_atomic(dir / "bad.txt", "3 ? 4\n");
  CHECK_THROWS_AS(run_analyze(ckpt, dir / "bad.txt", dir / "a4"), InputError);
  write_file_atomic(dir / "empty.txt", "\n");
  CHECK_THROWS_AS(run_analyze(ckpt, dir / "empty.txt", dir / "a4"), InputError);

  // Zero write-backs: the residual never changes, so no layer moves entropy
  // and every cosine is undefined.
  Checkpoint zeroed = load_checkpoint(ckpt);
  for (auto& r : zeroed.tensors) {
    if (contains(r.name, ".wo") || contains(r.name, ".w_down")) r.tensor.fill(0.0);
  }
  save_checkpoint(dir / "zeroed.ckpt", zeroed);
  const auto z = run_analyze(dir / "zeroed.ckpt", "", dir / "z");
  for (const auto& d : z.profile.entropy_change()) CHECK(d.layer == 0.0);
  CHECK(read_file(dir / "z/residual_similarity.csv") ==
        "layer,cos_attn,cos_ffn\n1,nan,nan\n2,nan,nan\n");

  // Refuses a checkpoint whose payload was altered.
  std::string bytes = read_file(ckpt);
  bytes[bytes.size() / 2] ^= 0x10;
  write_file_atomic(dir / "corrupt.ckpt", bytes);
  CHECK_THROWS_AS(run_analyze(dir / "corrupt.ckpt", "", dir / "c"), CorruptDataError);
  CHECK_FALSE(fs::exists(dir / "c"));
}

TEST_CASE("eval: report, K checks and overrides") {
  TempDir dir("eval");
  RunConfig c = RunConfig::parse(kTiny);
  c.set("train.max_steps=1");
  TrainOptions o;
  o.out_dir = dir / "run";
  run_train(c, o);
  const std::string ckpt = dir / "run/checkpoint.ckpt";

  EvalOptions e;
  e.samples = 4;
  e.ks = std::vector<std::size_t>{1, 2, 4};
  e.problems = 5;
  e.seed = 3;
  const auto r1 = run_eval(ckpt, e, dir / "r1.json");
  const auto r2 = run_eval(ckpt, e, dir / "r2.json");
  CHECK(read_file(dir / "r1.json") == read_file(dir / "r2.json"));
  REQUIRE(r1.metrics.size() == 3);
  CHECK(r1.metrics[0].pass <= r1.metrics[1].pass);
  CHECK(r1.metrics[1].pass <= r1.metrics[2].pass);
  CHECK(r1.outcomes.size() == 5);
  CHECK(contains(r1.config_text, "eval.samples = 4"));

  e.ks = std::vector<std::size_t>{1, 8};
  CHECK_THROWS_AS(run_eval(ckpt, e, ""), InputError);
  EvalOptions bad;
  bad.overrides = {"train.seed=3"};
  CHECK_THROWS_AS(run_eval(ckpt, bad, ""), ConfigError);
}

TEST_CASE("eval: a model that has learned a trivial task scores 1 everywhere") {
  TempDir dir("perfect");
  RunConfig c = RunConfig::parse(kTiny);
  c.set("task.kind=reverse_sequence");
  c.set("task.length=1");
  c.set("train.warm_supervised_steps=300");
  c.set("train.warm_temper_steps=0");
  c.set("train.warm_learning_rate=0.01");
  c.set("train.max_steps=1");
  c.set("eval.temperature=0.001");
  TrainOptions o;
  o.out_dir = dir / "run";
  run_train(c, o);
  EvalOptions e;
  e.samples = 4;
  e.ks = std::vector<std::size_t>{1, 4};
  e.problems = 8;
  const auto r = run_eval(dir / "run/base.ckpt", e, "");
  for (const auto& m : r.metrics) {
    CHECK(m.avg == 1.0);
    CHECK(m.pass == 1.0);
  }
}

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "cdepth/scene.hpp"
#include "cdepth/trainer.hpp"

namespace cdepth {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("cdepth_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string at(const std::string& name) const { return (dir_ / name).string(); }

  Outcome run(const std::string& args) const {
    const std::string cmd = std::string(CDEPTH_CLI) + " " + args + " > " + at("stdout") + " 2> " + at("stderr");
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(at("stdout")), slurp(at("stderr"))};
  }

  void small_data() const {
    ASSERT_EQ(run("gen --seed 7 --count 24 --out " + at("train.wdph")).code, 0);
    ASSERT_EQ(run("gen --seed 8 --count 8 --out " + at("val.wdph")).code, 0);
  }

  std::string train_args() const {
    return "train --data " + at("train.wdph") + " --val " + at("val.wdph") + " --epochs 1 --batch 8 --p 0.5";
  }

  fs::path dir_;
};

json last_error_line(const std::string& err) {
  std::istringstream ss(err);
  json last;
  for (std::string line; std::getline(ss, line);) {
    if (!line.empty() && line[0] == '{') last = json::parse(line);
  }
  return last;
}

TEST_F(Cli, GenWritesRequestedCount) {
  const Outcome r = run("gen --seed 7 --count 100 --out " + at("d.wdph"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_dataset(at("d.wdph")).samples.size(), 100u);
  const json echo = json::parse(r.out.substr(0, r.out.find('\n')));
  EXPECT_EQ(echo["count"], 100);
  EXPECT_EQ(echo["seed"], 7);
}

TEST_F(Cli, FlagsOverrideConfigFileOverridesDefaults) {
  std::ofstream(at("c.json")) << R"({"count": 5, "max_objects": 2})";
  const Outcome r = run("gen --config " + at("c.json") + " --count 7 --out " + at("d.wdph"));
  ASSERT_EQ(r.code, 0) << r.err;
  const json echo = json::parse(r.out.substr(0, r.out.find('\n')));
  EXPECT_EQ(echo["count"], 7);
  EXPECT_EQ(echo["max_objects"], 2);
  EXPECT_EQ(echo["min_objects"], 1);
  EXPECT_EQ(read_dataset(at("d.wdph")).samples.size(), 7u);
}

TEST_F(Cli, UnknownFlagExitsOne) {
  const Outcome r = run("gen --out x --bogus 3");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(last_error_line(r.err)["error"], "usage");
}

TEST_F(Cli, UnknownConfigKeyExitsOne) {
  std::ofstream(at("c.json")) << R"({"count": 5, "nope": 1})";
  const Outcome r = run("gen --config " + at("c.json") + " --out " + at("d.wdph"));
  EXPECT_EQ(r.code, 1);
  const json e = last_error_line(r.err);
  EXPECT_EQ(e["error"], "config");
  EXPECT_NE(e["message"].get<std::string>().find("nope"), std::string::npos);
}

TEST_F(Cli, MistypedValuesExitOne) {
  EXPECT_EQ(run("gen --count abc --out " + at("d.wdph")).code, 1);
  std::ofstream(at("c.json")) << R"({"count": 2.5})";
  EXPECT_EQ(run("gen --config " + at("c.json") + " --out " + at("d.wdph")).code, 1);
}

TEST_F(Cli, MissingRequiredSettingExitsOne) {
  const Outcome r = run("eval --ckpt x.wdck");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(last_error_line(r.err)["error"], "config");
}

TEST_F(Cli, MissingSubcommandExitsOne) { EXPECT_EQ(run("").code, 1); }

TEST_F(Cli, BadCheckpointIsFormatError) {
  small_data();
  const Outcome r = run("eval --ckpt " + at("val.wdph") + " --data " + at("val.wdph") + " --report " + at("r.json"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(last_error_line(r.err)["error"], "format");
}

TEST_F(Cli, TrainEvalSampleRoundTrip) {
  small_data();
  Outcome r = run(train_args() + " --out-ckpt " + at("c.wdck"));
  ASSERT_EQ(r.code, 0) << r.err;

  r = run("eval --ckpt " + at("c.wdck") + " --data " + at("val.wdph") + " --report " + at("r.json") + " --error-maps " +
          at("maps"));
  ASSERT_EQ(r.code, 0) << r.err;
  const json report = json::parse(slurp(at("r.json")));
  for (const char* k : {"abs_rel", "rmse", "log10", "rmse_log", "delta1", "delta2", "delta3"}) {
    EXPECT_TRUE(report.contains(k)) << k;
  }
  EXPECT_TRUE(fs::exists(dir_ / "maps" / "error_0007.pgm"));

  r = run("sample --ckpt " + at("c.wdck") + " --caption \"a small room with a chair\" --n 3 --seed 4 --out-dir " +
          at("s"));
  ASSERT_EQ(r.code, 0) << r.err;
  const json s = json::parse(slurp(dir_ / "s" / "samples.json"));
  EXPECT_EQ(s["files"].size(), 3u);
  EXPECT_EQ(s["mu"].size(), 16u);
  EXPECT_EQ(s["sigma"].size(), 16u);
  EXPECT_TRUE(fs::exists(dir_ / "s" / "sample_0002.pgm"));

  r = run("sample --ckpt " + at("c.wdck") + " --caption \"caf\xc3\xa9\" --out-dir " + at("s2"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(last_error_line(r.err)["error"], "vocabulary");
}

TEST_F(Cli, EchoedConfigReproducesRunBitExactly) {
  small_data();
  Outcome first = run(train_args() + " --out-ckpt " + at("a.wdck"));
  ASSERT_EQ(first.code, 0) << first.err;
  const std::string echo = first.out.substr(0, first.out.find('\n'));
  std::ofstream(at("echo.json")) << echo;
  Outcome second = run("train --config " + at("echo.json") + " --out-ckpt " + at("b.wdck"));
  ASSERT_EQ(second.code, 0) << second.err;
  EXPECT_EQ(slurp(at("a.wdck")), slurp(at("b.wdck")));
  const auto body = [](const std::string& s) {
    std::string rest = s.substr(s.find('\n') + 1);
    return rest.substr(0, rest.rfind("\"checkpoint\""));
  };
  EXPECT_EQ(body(first.out), body(second.out));
}

TEST_F(Cli, NonFiniteModelExitsTwo) {
  small_data();
  ASSERT_EQ(run(train_args() + " --out-ckpt " + at("c.wdck")).code, 0);
  Checkpoint ck = load_checkpoint(at("c.wdck"));
  Tensor<float>& b = ck.state.params.at("decoder.head.b");
  for (Index i = 0; i < b.size(); ++i) b[i] = std::numeric_limits<float>::quiet_NaN();
  save_checkpoint(ck, at("nan.wdck"));
  const Outcome r = run("eval --ckpt " + at("nan.wdck") + " --data " + at("val.wdph") + " --report " + at("r.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(last_error_line(r.err)["error"], "numeric");
}

TEST_F(Cli, GradcheckPassesAtToySize) {
  const Outcome r = run("gradcheck --seed 1 --trials 1");
  ASSERT_EQ(r.code, 0) << r.err;
  const json report = json::parse(r.out.substr(r.out.find('\n') + 1));
  EXPECT_TRUE(report["pass"].get<bool>());
  EXPECT_EQ(report["checks"].size(), 2u);
}

}  // namespace
}  // namespace cdepth

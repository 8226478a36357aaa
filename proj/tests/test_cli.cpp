#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "relformer/cli.hpp"
#include "relformer/dataset_io.hpp"
#include "relformer/errors.hpp"
#include "relformer/model.hpp"
#include "test_support.hpp"

using namespace relformer;
using relformer::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "relformer");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const char* kTinyConfig = R"({"model": {"d": 16, "d_q": 16, "d_v": 16, "d_w": 8, "encoder_layers": 1,
  "decoder_layers": 1, "m_c": 3, "m_d": 2, "heads": 2, "mlp_hidden": 16}, "train": {"epochs": 1, "batch": 2}})";

class CliTest : public ::testing::Test {
 protected:
  TempDir dir{"cli"};
  fs::path data = dir.path() / "data";
  fs::path config = dir.path() / "tiny.json";

  void SetUp() override {
    std::ofstream(config) << kTinyConfig;
    const CliRun r = cli({"synth", "--out", data.string(), "--videos", "4", "--frames", "16", "--feature-dim", "8",
                       "--object-categories", "5", "--predicates", "4", "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  fs::path train(const std::string& name, std::vector<std::string> extra = {}) {
    const fs::path out = dir.path() / name;
    std::vector<std::string> args = {"train", "--data", data.string(), "--out", out.string(), "--config",
                                     config.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    const CliRun r = cli(args);
    EXPECT_EQ(r.code, 0) << r.err;
    return out;
  }
};

}  // namespace

TEST(CliBasics, HelpExitsZero) {
  EXPECT_EQ(cli({"--help"}).code, 0);
  const CliRun r = cli({"train", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--epochs"), std::string::npos);
}

TEST(CliBasics, UnknownFlagAndMissingCommandExitTwo) {
  EXPECT_EQ(cli({"synth", "--bogus"}).code, 2);
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"train", "--data", "x"}).code, 2);  // --out is required
}

TEST_F(CliTest, SynthIsDeterministic) {
  const fs::path again = dir.path() / "again";
  ASSERT_EQ(cli({"synth", "--out", again.string(), "--videos", "4", "--frames", "16", "--feature-dim", "8",
                 "--object-categories", "5", "--predicates", "4", "--seed", "3"})
                .code,
            0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(data)) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(again / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 9u);  // vocab + 4 x (json, features)
}

TEST_F(CliTest, SynthZeroVideosIsValidEmptyDataset) {
  const fs::path empty = dir.path() / "empty";
  ASSERT_EQ(cli({"synth", "--out", empty.string(), "--videos", "0"}).code, 0);
  EXPECT_TRUE(load_dataset(empty).videos.empty());
}

TEST_F(CliTest, SynthRefusesNonEmptyDirectoryWithoutForce) {
  const CliRun r = cli({"synth", "--out", data.string(), "--videos", "2"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--force"), std::string::npos);
  std::ofstream(data / "notes.txt") << "keep";
  EXPECT_EQ(cli({"synth", "--out", data.string(), "--videos", "2", "--force"}).code, 0);
  EXPECT_EQ(load_dataset(data).videos.size(), 2u);
  EXPECT_TRUE(fs::exists(data / "notes.txt"));
}

TEST_F(CliTest, SynthObjectsFlagRoundTrips) {
  const fs::path d = dir.path() / "objs";
  ASSERT_EQ(cli({"synth", "--out", d.string(), "--videos", "6", "--objects", "4", "--distractors", "0"}).code, 0);
  const Dataset ds = load_dataset(d);
  ASSERT_EQ(ds.videos.size(), 6u);
  for (const auto& v : ds.videos) EXPECT_GE(v.tracklets.size(), 4u);
}

TEST_F(CliTest, BadConfigNamesField) {
  const CliRun r = cli({"train", "--data", data.string(), "--out", (dir.path() / "t").string(), "--set",
                     "model.colour=3"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("colour"), std::string::npos) << r.err;
  const CliRun neg = cli({"train", "--data", data.string(), "--out", (dir.path() / "t").string(), "--lr", "-1"});
  EXPECT_EQ(neg.code, 2);
  EXPECT_NE(neg.err.find("lr"), std::string::npos) << neg.err;
}

TEST_F(CliTest, ZeroEpochsWritesInitialCheckpointAndEmptyTrace) {
  const fs::path out = train("e0", {"--epochs", "0"});
  EXPECT_TRUE(fs::exists(out / "model.ckpt"));
  EXPECT_TRUE(fs::exists(out / "run_config.json"));
  EXPECT_EQ(slurp(out / "loss.csv"), "epoch,step,loss\n");
}

TEST_F(CliTest, ZeroLearningRateKeepsInitialWeights) {
  const RelformerModel a = RelformerModel::load(train("e0", {"--epochs", "0"}) / "model.ckpt");
  const RelformerModel b = RelformerModel::load(train("lr0", {"--epochs", "2", "--lr", "0"}) / "model.ckpt");
  for (const auto& [name, t] : a.params()) {
    const auto other = b.params().get(name).data();
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), other.begin(), other.end())) << name;
  }
  const std::string trace = slurp(dir.path() / "lr0" / "loss.csv");
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 5);
}

TEST_F(CliTest, EvalSameCheckpointTwiceMatchesOnce) {
  const fs::path ck = train("m", {"--epochs", "2", "--lr", "1e-3"}) / "model.ckpt";
  const CliRun once = cli({"eval", "--data", data.string(), "--ckpt", ck.string()});
  const CliRun twice = cli({"eval", "--data", data.string(), "--ckpt", ck.string() + "," + ck.string()});
  ASSERT_EQ(once.code, 0) << once.err;
  ASSERT_EQ(twice.code, 0) << twice.err;
  EXPECT_EQ(once.out, twice.out);
  const auto j = nlohmann::json::parse(once.out);
  for (const char* key : {"reldet_map", "recall@50", "recall@100", "p@1", "p@5", "p@10", "tracklet_map"}) {
    ASSERT_TRUE(j.contains(key)) << key;
    EXPECT_GE(j[key].get<double>(), 0.0);
    EXPECT_LE(j[key].get<double>(), 1.0);
  }
}

TEST_F(CliTest, EvalThreadCountDoesNotChangeReport) {
  const fs::path ck = train("m", {"--epochs", "1"}) / "model.ckpt";
  const CliRun one = cli({"eval", "--data", data.string(), "--ckpt", ck.string(), "--threads", "1"});
  ::setenv("RELFORMER_THREADS", "3", 1);
  const CliRun env = cli({"eval", "--data", data.string(), "--ckpt", ck.string()});
  ::unsetenv("RELFORMER_THREADS");
  EXPECT_EQ(one.code, 0);
  EXPECT_EQ(one.out, env.out);
}

TEST_F(CliTest, EvalOnEmptyDatasetReportsZeros) {
  const fs::path ck = train("m", {"--epochs", "0"}) / "model.ckpt";
  const fs::path empty = dir.path() / "empty";
  Dataset ds = load_dataset(data);
  ds.videos.clear();
  save_dataset(empty, ds);
  const CliRun r = cli({"eval", "--data", empty.string(), "--ckpt", ck.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["reldet_map"].get<double>(), 0.0);
  EXPECT_EQ(j["p@1"].get<double>(), 0.0);
}

TEST_F(CliTest, DataAndCheckpointErrorsExitThree) {
  EXPECT_EQ(cli({"eval", "--data", data.string(), "--ckpt", (dir.path() / "missing.ckpt").string()}).code, 3);
  const fs::path ck = train("m", {"--epochs", "0"}) / "model.ckpt";
  std::ofstream(ck.string() + ".bin", std::ios::trunc) << "xx";
  EXPECT_EQ(cli({"eval", "--data", data.string(), "--ckpt", ck.string()}).code, 3);
  EXPECT_EQ(cli({"eval", "--data", (dir.path() / "nowhere").string(), "--ckpt", ck.string()}).code, 3);
}

TEST_F(CliTest, DivergenceExitsFour) {
  const CliRun r = cli({"train", "--data", data.string(), "--out", (dir.path() / "nan").string(), "--config",
                     config.string(), "--lr", "1e300", "--epochs", "3"});
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_NE(r.err.find("epoch"), std::string::npos);
}

TEST_F(CliTest, InferIsSortedUniqueAndHandlesEmptyVideos) {
  const fs::path ck = train("m", {"--epochs", "1"}) / "model.ckpt";
  Dataset ds = load_dataset(data);
  ds.videos[1].tracklets.clear();
  ds.videos[1].gt_relations.clear();
  const fs::path edited = dir.path() / "edited";
  save_dataset(edited, ds);
  const fs::path out = dir.path() / "preds.json";
  const CliRun r = cli({"infer", "--data", edited.string(), "--ckpt", ck.string(), "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto arr = nlohmann::json::parse(slurp(out));
  ASSERT_EQ(arr.size(), 4u);
  EXPECT_TRUE(arr[1]["relations"].empty());
  for (const auto& v : arr) {
    std::set<std::tuple<int, int, int>> keys;
    double prev = 2.0;
    for (const auto& rel : v["relations"]) {
      EXPECT_LE(rel["score"].get<double>(), prev);
      prev = rel["score"].get<double>();
      EXPECT_TRUE(keys.insert({rel["predicate"].get<int>(), rel["subject_tid"].get<int>(), rel["object_tid"].get<int>()}).second);
    }
  }
  const CliRun again = cli({"infer", "--data", edited.string(), "--ckpt", ck.string()});
  EXPECT_EQ(again.out, slurp(out));
}

TEST(CliConfig, OverridesAndRoundTrip) {
  RunConfig cfg;
  apply_override("model.d=64", cfg);
  apply_override("train.lr=0.001", cfg);
  apply_override("data.dataset=/tmp/x", cfg);
  EXPECT_EQ(cfg.model.d, 64u);
  EXPECT_EQ(cfg.train.lr, 0.001);
  EXPECT_EQ(cfg.data.dataset, "/tmp/x");
  RunConfig back;
  apply_run_config_json(nlohmann::json::parse(run_config_to_json(cfg).dump()), back);
  EXPECT_EQ(run_config_to_json(back).dump(), run_config_to_json(cfg).dump());
  EXPECT_THROW(apply_override("model.d", cfg), ConfigError);
  EXPECT_THROW(apply_override("nosuch.x=1", cfg), ConfigError);
}

TEST(CliConfig, DefaultsValidate) {
  RunConfig cfg;
  EXPECT_NO_THROW(validate(cfg));
  EXPECT_EQ(cfg.model.d, 512u);
  EXPECT_EQ(cfg.model.num_queries(), 192u);
  EXPECT_EQ(cfg.train.lambda_att, 30.0);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "json.hpp"

#include "dmadapter/checkpoint.hpp"
#include "dmadapter/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int rc = -1;
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
    dir_ = fs::temp_directory_path() / ("dmadapter_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.cfg") << "seed = 3\n"
                                        "[backbone]\nd_model = 16\nn_heads = 2\nn_layers = 2\n"
                                        "image_h = 16\nimage_w = 8\npatch = 4\ntext_len = 10\n"
                                        "[moe]\nreduction = 4\n"
                                        "[optim]\nbatch_size = 8\nepochs = 2\nlr = 0.01\n"
                                        "[data]\ntrain_ids = 8\ntest_ids = 4\nimgs_per_id = 2\n";
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args) const {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = std::string(DMADAPTER_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    Result r;
    r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string cfg() const { return "--config " + (dir_ / "tiny.cfg").string(); }
  std::string out_dir(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, CountParamsPreset) {
  const auto start = std::chrono::steady_clock::now();
  const auto r = run("count-params --preset paper-clip-b16");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.out.find("total: 15684864 (15.685M)"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("prompts: 61440"), std::string::npos) << r.out;
  EXPECT_LT(secs, 1.0);
}

TEST_F(Cli, CountParamsFromConfig) {
  const auto r = run("count-params " + cfg() + " --n-experts 2");
  EXPECT_EQ(r.rc, 0) << r.err;
  // per layer per branch: 2 experts (2*16*4 + 4 + 16) + router 16*2 + W_d 16*2 + prompts 4*16
  EXPECT_NE(r.out.find("total: " + std::to_string(4 * (2 * 148 + 32 + 32 + 64))), std::string::npos) << r.out;
}

TEST_F(Cli, GradcheckPasses) {
  const auto r = run("gradcheck");
  EXPECT_EQ(r.rc, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS at tol 1e-4"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("max_rel_error: "), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitOne) {
  auto r = run("train --no-such-flag");
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.err.find("--no-such-flag"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
  r = run("");
  EXPECT_EQ(r.rc, 1);
  r = run("fly");
  EXPECT_EQ(r.rc, 1);
  r = run("eval");  // --checkpoint is required
  EXPECT_EQ(r.rc, 1);
}

TEST_F(Cli, ValidationErrorsExitOne) {
  auto r = run("train --config " + (dir_ / "missing.cfg").string());
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.err.find("config file not found"), std::string::npos) << r.err;
  r = run("train " + cfg() + " --top-k 9 --out " + out_dir("bad"));
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.err.find("top_k"), std::string::npos) << r.err;
  r = run("ablate " + cfg() + " --seeds 0,1 --out " + out_dir("ab"));
  EXPECT_EQ(r.rc, 1);
  EXPECT_NE(r.err.find("at least 5 seeds"), std::string::npos) << r.err;
}

TEST_F(Cli, BadCheckpointExitsTwo) {
  std::ofstream(dir_ / "junk.bin") << "garbage";
  const auto r = run("eval --checkpoint " + (dir_ / "junk.bin").string());
  EXPECT_EQ(r.rc, 2);
  EXPECT_NE(r.err.find("not a checkpoint"), std::string::npos) << r.err;
}

TEST_F(Cli, TrainEvalHeatmapRoundTrip) {
  auto r = run("train " + cfg() + " --out " + out_dir("run"));
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.out.find("steps: 4"), std::string::npos) << r.out;
  const auto rows = dmadapter::read_metrics(dir_ / "run" / "metrics.csv");
  ASSERT_EQ(rows.size(), 3u);

  r = run("eval --checkpoint " + out_dir("run") + "/checkpoint.bin");
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.out.find("map: " + dmadapter::detail::fmt_double(rows.back().map)), std::string::npos) << r.out;

  r = run("heatmap --checkpoint " + out_dir("run") + "/checkpoint.bin --branch text --tokens 1,2,3 --out " +
          out_dir("heat"));
  ASSERT_EQ(r.rc, 0) << r.err;
  const std::string csv = slurp(dir_ / "heat" / "heatmap_text_layer1.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 5);  // header + BOS, 3 tokens, EOS
  EXPECT_TRUE(fs::exists(dir_ / "heat" / "heatmap_text_layer1.svg"));

  r = run("heatmap --checkpoint " + out_dir("run") + "/checkpoint.bin --branch vision --layer 0 --out " +
          out_dir("heat"));
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "heat" / "heatmap_vision_layer0.csv"));

  r = run("heatmap --checkpoint " + out_dir("run") + "/checkpoint.bin --layer 5 --out " + out_dir("heat"));
  EXPECT_EQ(r.rc, 1);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
  auto r = run("train " + cfg() + " --epochs 3 --out " + out_dir("full"));
  ASSERT_EQ(r.rc, 0) << r.err;
  r = run("train " + cfg() + " --epochs 3 --max-steps 3 --out " + out_dir("split"));
  ASSERT_EQ(r.rc, 0) << r.err;
  r = run("train --resume " + out_dir("split") + "/checkpoint.bin --out " + out_dir("split"));
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_EQ(slurp(dir_ / "full" / "metrics.csv"), slurp(dir_ / "split" / "metrics.csv"));
  EXPECT_EQ(slurp(dir_ / "full" / "checkpoint.bin"), slurp(dir_ / "split" / "checkpoint.bin"));
}

TEST_F(Cli, GenDataWritesManifest) {
  const auto r = run("gen-data " + cfg() + " --out " + out_dir("data"));
  ASSERT_EQ(r.rc, 0) << r.err;
  std::ifstream is(dir_ / "data" / "manifest.jsonl");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    const auto rec = nlohmann::json::parse(line);
    EXPECT_TRUE(fs::exists(dir_ / "data" / rec.at("image_path").get<std::string>()));
    ++rows;
  }
  EXPECT_EQ(rows, 16u + 8u);
}

TEST_F(Cli, SweepCostsOnly) {
  const auto r = run("sweep " + cfg() + " --param n_experts --values 2,4 --seeds '' --out " + out_dir("sw"));
  ASSERT_EQ(r.rc, 0) << r.err;
  EXPECT_NE(r.out.find("n_experts,median_rank1,trainable_params,expert_flops_per_token"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir_ / "sw" / "sweep_n_experts.csv"));
}

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mammo/grid.hpp"

using namespace mammo;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(MAMMO_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.output += buf.data();
  const int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "mammo_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "cfg.json") << R"({"seed": 7, "input_side": 32,
      "dataset": {"per_class": 12, "synth_size": 32},
      "train": {"epochs": 1, "batch_size": 8},
      "xai": {"ig_steps": 8}})";
    const auto r = run("--config " + (root / "cfg.json").string() + " gen-data --out " + (root / "data").string());
    ASSERT_EQ(r.code, 0) << r.output;
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static std::string cfg() { return "--config " + (root / "cfg.json").string() + " "; }
  static std::string data() { return (root / "data").string(); }
};
fs::path Cli::root;

void expect_resolved_config(const fs::path& dir) {
  const auto p = dir / "resolved_config.json";
  ASSERT_TRUE(fs::exists(p)) << dir;
  const auto j = Json::parse(slurp(p));
  EXPECT_TRUE(j.contains("tool_version"));
  EXPECT_NO_THROW(parse_run_config(j));
}

}  // namespace

TEST_F(Cli, GenDataWritesConfig) { expect_resolved_config(root / "data"); }

TEST_F(Cli, UnknownModelIsUsageError) {
  const auto r = run(cfg() + "train --model lenet --data " + data() + " --out " + (root / "bad").string());
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(Cli, UnknownSubcommandIsUsageError) { EXPECT_EQ(run("frobnicate").code, 2); }

TEST_F(Cli, UnknownConfigKeyIsUsageError) {
  std::ofstream(root / "bad.json") << R"({"seed": 1, "colour": "blue"})";
  const auto r = run("--config " + (root / "bad.json").string() + " gen-data --out " + (root / "x").string());
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(Cli, MissingCheckpointNamesMember) {
  fs::create_directories(root / "empty_ckpt");
  const auto r = run(cfg() + "ensemble --input " + data() + " --checkpoints " + (root / "empty_ckpt").string() + " --out " +
                     (root / "ens_missing").string());
  EXPECT_EQ(r.code, 3) << r.output;
  EXPECT_NE(r.output.find("resnet"), std::string::npos) << r.output;
}

TEST_F(Cli, GridIsDeterministicAndAveragesAdd) {
  const std::string args = "grid --data " + data() + " --models basecnn,convmixer --out ";
  const auto a = run(cfg() + args + (root / "g1").string());
  ASSERT_EQ(a.code, 0) << a.output;
  const auto b = run(cfg() + args + (root / "g2").string());
  ASSERT_EQ(b.code, 0) << b.output;
  EXPECT_EQ(slurp(root / "g1" / "grid.csv"), slurp(root / "g2" / "grid.csv"));
  EXPECT_EQ(slurp(root / "g1" / "grid.md"), slurp(root / "g2" / "grid.md"));
  expect_resolved_config(root / "g1");

  const auto g = parse_grid_csv(slurp(root / "g1" / "grid.csv"));
  EXPECT_EQ(g.cells.size(), 8u);
  for (auto e : kAllEnhancements) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& c : g.cells)
      if (c.enhancement == e && c.metrics.accuracy) {
        s += *c.metrics.accuracy;
        ++n;
      }
    ASSERT_TRUE(enhancement_average(g, e).has_value());
    EXPECT_NEAR(*enhancement_average(g, e), s / static_cast<double>(n), 1e-12);
  }

  const auto r1 = run("report --grid " + (root / "g1" / "grid.csv").string() + " --out " + (root / "r1").string());
  const auto r2 = run("report --grid " + (root / "g2" / "grid.csv").string() + " --out " + (root / "r2").string());
  ASSERT_EQ(r1.code, 0) << r1.output;
  ASSERT_EQ(r2.code, 0) << r2.output;
  EXPECT_EQ(slurp(root / "r1" / "report.md"), slurp(root / "r2" / "report.md"));
  expect_resolved_config(root / "r1");
}

TEST_F(Cli, TrainExplainEnsemble) {
  for (const char* m : {"resnet", "vit", "swin"}) {
    const std::string enh = std::string(m) == "resnet" ? "original" : (std::string(m) == "vit" ? "ahe" : "hog");
    const auto r = run(cfg() + "train --model " + m + " --enhance " + enh + " --data " + data() + " --out " + (root / "ckpt").string());
    ASSERT_EQ(r.code, 0) << r.output;
  }
  expect_resolved_config(root / "ckpt");
  EXPECT_TRUE(fs::exists(root / "ckpt" / "vit_ahe_history.csv"));

  fs::path image;
  for (const auto& e : fs::recursive_directory_iterator(root / "data"))
    if (e.path().extension() == ".png" || e.path().extension() == ".pgm") {
      image = e.path();
      break;
    }
  ASSERT_FALSE(image.empty());
  const auto ex = run(cfg() + "explain --checkpoint " + (root / "ckpt" / "vit_ahe.mmfw").string() + " --image " + image.string() +
                      " --methods all --out " + (root / "xai").string());
  ASSERT_EQ(ex.code, 0) << ex.output;
  for (const char* m : {"saliency", "ig", "occlusion", "gradcam", "guided_gradcam", "deeplift", "attention"}) {
    EXPECT_TRUE(fs::exists(root / "xai" / (std::string(m) + ".png"))) << m;
    EXPECT_TRUE(fs::exists(root / "xai" / (std::string(m) + ".map"))) << m;
  }
  expect_resolved_config(root / "xai");

  const auto en = run(cfg() + "ensemble --input " + data() + " --checkpoints " + (root / "ckpt").string() + " --out " + (root / "ens").string());
  ASSERT_EQ(en.code, 0) << en.output;
  expect_resolved_config(root / "ens");
  const auto summary = Json::parse(slurp(root / "ens" / "summary.json"));
  EXPECT_GT(summary.at("cases").get<int>(), 0);
  std::ifstream dec(root / "ens" / "decisions.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(dec, line)) {
    const auto j = Json::parse(line);
    EXPECT_TRUE(j.contains("tier"));
    ++lines;
  }
  EXPECT_EQ(lines, summary.at("cases").get<std::size_t>());
}

TEST_F(Cli, EnhanceWritesEveryMethod) {
  fs::path image;
  for (const auto& e : fs::recursive_directory_iterator(root / "data"))
    if (e.path().extension() == ".png" || e.path().extension() == ".pgm") {
      image = e.path();
      break;
    }
  const auto r = run(cfg() + "enhance --input " + image.string() + " --method all --out " + (root / "enh").string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(root / "enh")) n += e.path().extension() == ".png";
  EXPECT_EQ(n, 4u);
  expect_resolved_config(root / "enh");
}

TEST_F(Cli, MissingImageIsIoError) {
  const auto r = run(cfg() + "enhance --input /nonexistent/x.png --out " + (root / "enh2").string());
  EXPECT_EQ(r.code, 3) << r.output;
}

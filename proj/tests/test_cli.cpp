#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#ifndef TEXTSEG_CLI_PATH
#define TEXTSEG_CLI_PATH "textseg"
#endif

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("textseg_cli_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(TEXTSEG_CLI_PATH) + " " + args + " > " +
                          log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

// small, fast settings shared by the training-path tests
std::string tiny_flags(const fs::path& data_dir) {
  return "--set data.dir=" + data_dir.string() +
         " --set data.cases=12 --set data.size=16 --set data.radius_min=3"
         " --set data.radius_max=4 --set model.depth=2"
         " --set model.embed_dim=8 --set model.text_embed_dim=8"
         " --set model.text_hidden_dim=8 --set train.epochs=2";
}

}  // namespace

TEST_CASE("gen-data default split counts and determinism") {
  TempDir dir("gen");
  const fs::path d1 = dir.path / "d1";
  const fs::path d2 = dir.path / "d2";
  const fs::path log = dir.path / "log.txt";

  REQUIRE(run_cli("gen-data --set data.dir=" + d1.string(), log) == 0);
  // default 100 cases at ratios 0.6/0.15/0.25
  const std::string out = slurp(log);
  REQUIRE(out.find("60 train / 15 val / 25 test") != std::string::npos);
  REQUIRE(out.find("resolved config:") != std::string::npos);

  REQUIRE(run_cli("gen-data --set data.dir=" + d2.string(), log) == 0);
  REQUIRE(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
}

TEST_CASE("gen-data invalid ratios exit 2") {
  TempDir dir("genbad");
  const fs::path log = dir.path / "log.txt";
  const int rc = run_cli(
      "gen-data --set data.dir=" + (dir.path / "x").string() +
          " --set data.ratio_train=0.5 --set data.ratio_val=0.1",
      log);
  REQUIRE(rc == 2);
}

TEST_CASE("unknown config key exits 2") {
  TempDir dir("unk");
  const fs::path log = dir.path / "log.txt";
  REQUIRE(run_cli("gen-data --set data.nope=1", log) == 2);
  REQUIRE(slurp(log).find("unknown config key") != std::string::npos);
}

TEST_CASE("train, eval and determinism") {
  TempDir dir("train");
  const fs::path data = dir.path / "data";
  const fs::path log = dir.path / "log.txt";
  REQUIRE(run_cli("gen-data " + tiny_flags(data) + " --set data.cases=12",
                  log) == 0);

  const fs::path run1 = dir.path / "run1";
  const fs::path run2 = dir.path / "run2";
  const std::string train_flags = tiny_flags(data);

  REQUIRE(run_cli("train " + train_flags + " --set out.dir=" + run1.string(),
                  log) == 0);
  REQUIRE(fs::exists(run1 / "checkpoint.bin"));
  REQUIRE(fs::exists(run1 / "checkpoint.json"));
  REQUIRE(fs::exists(run1 / "vocab.txt"));
  REQUIRE(fs::exists(run1 / "train_log.jsonl"));

  SECTION("same seed reproduces the run bit for bit") {
    REQUIRE(run_cli("train " + train_flags + " --set out.dir=" +
                        run2.string(),
                    log) == 0);
    REQUIRE(slurp(run1 / "checkpoint.bin") == slurp(run2 / "checkpoint.bin"));
    REQUIRE(slurp(run1 / "train_log.jsonl") ==
            slurp(run2 / "train_log.jsonl"));
    REQUIRE(slurp(run1 / "meta.json") == slurp(run2 / "meta.json"));
  }

  SECTION("eval on the val split reproduces the logged best dice") {
    REQUIRE(run_cli("eval --checkpoint " + run1.string() +
                        " --set eval.split=val",
                    log) == 0);
    const fs::path per_case = run1 / "eval-val" / "per_case.jsonl";
    REQUIRE(fs::exists(per_case));
    // aggregate record's dice Avg must match meta.json best_val_dice
    auto meta = nlohmann::json::parse(slurp(run1 / "meta.json"));
    double agg = -1.0;
    std::ifstream f(per_case);
    std::string line;
    while (std::getline(f, line)) {
      auto j = nlohmann::json::parse(line);
      if (j["record"] == "aggregate") agg = j["dice"]["Avg"].get<double>();
    }
    REQUIRE(agg >= 0.0);
    REQUIRE(std::fabs(agg - meta["best_val_dice"].get<double>()) < 1e-9);
  }

  SECTION("one-key switch to image_only trains too") {
    REQUIRE(run_cli("train " + train_flags +
                        " --set fusion.variant=image_only --set out.dir=" +
                        (dir.path / "run_img").string(),
                    log) == 0);
    REQUIRE(fs::exists(dir.path / "run_img" / "checkpoint.bin"));
  }
}

TEST_CASE("eval without checkpoint exits 3") {
  TempDir dir("evalmiss");
  const fs::path log = dir.path / "log.txt";
  REQUIRE(run_cli("eval --checkpoint " + (dir.path / "nope").string(), log) ==
          3);
}

TEST_CASE("ablate emits the 4-row fusion table") {
  TempDir dir("ablate");
  const fs::path data = dir.path / "data";
  const fs::path log = dir.path / "log.txt";
  REQUIRE(run_cli("gen-data " + tiny_flags(data) + " --set data.cases=10",
                  log) == 0);
  const fs::path out = dir.path / "ab";
  REQUIRE(run_cli("ablate --axis fusion " + tiny_flags(data) +
                      " --set data.cases=10 --set train.epochs=1"
                      " --set out.dir=" +
                      out.string(),
                  log) == 0);
  const std::string table = slurp(out / "table.txt");
  std::size_t rows = 0;
  for (const char* v :
       {"dot_sum", "t2i_once", "bidirectional", "image_only"}) {
    REQUIRE(table.find(v) != std::string::npos);
    ++rows;
  }
  REQUIRE(rows == 4);
  for (const char* col : {"dice_ET", "dice_WT", "dice_TC", "dice_avg",
                          "hd95_ET", "hd95_WT", "hd95_TC", "hd95_avg"}) {
    REQUIRE(table.find(col) != std::string::npos);
  }
  SECTION("bad axis exits 2") {
    REQUIRE(run_cli("ablate --axis nope " + tiny_flags(data), log) == 2);
  }
}

TEST_CASE("ablate template axis covers the four report variants") {
  TempDir dir("abtmpl");
  const fs::path data = dir.path / "data";
  const fs::path log = dir.path / "log.txt";
  REQUIRE(run_cli("gen-data " + tiny_flags(data) + " --set data.cases=10",
                  log) == 0);
  const fs::path out = dir.path / "ab";
  REQUIRE(run_cli("ablate --axis template " + tiny_flags(data) +
                      " --set data.cases=10 --set train.epochs=1"
                      " --set out.dir=" +
                      out.string(),
                  log) == 0);
  const std::string table = slurp(out / "table.txt");
  for (const char* v : {"raw", "location_only", "feature_only", "full"})
    REQUIRE(table.find(v) != std::string::npos);
}

TEST_CASE("defaults lists every config key") {
  TempDir dir("defaults");
  const fs::path log = dir.path / "log.txt";
  REQUIRE(run_cli("defaults", log) == 0);
  const std::string out = slurp(log);
  for (const char* k : {"data.dir", "fusion.variant", "train.lr",
                        "text.template", "out.root"})
    REQUIRE(out.find(k) != std::string::npos);
}

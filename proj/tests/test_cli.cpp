// Exercises the installed CLI binary end to end on small inputs: flag
// surface, config echoing, JSON output, and actionable error messages.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

#include "crashcast/config.hpp"

namespace fs = std::filesystem;
using crashcast::config::load_kv_file;

namespace {

const fs::path kScratch = fs::temp_directory_path() / "crashcast_cli_test";

struct CliResult {
  int exit_code;
  std::string output;  // stdout + stderr
};

CliResult run_cli(const std::string& args) {
  fs::create_directories(kScratch);
  const fs::path log = kScratch / "out.log";
  const std::string cmd =
      std::string(CRASHCAST_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  std::ifstream in(log);
  std::ostringstream os;
  os << in.rdbuf();
  return {rc == -1 ? -1 : WEXITSTATUS(rc), os.str()};
}

}  // namespace

TEST_CASE("unknown flags and missing subcommands exit nonzero with usage text") {
  const auto bogus = run_cli("stats --definitely-not-a-flag");
  CHECK(bogus.exit_code != 0);
  const auto none = run_cli("");
  CHECK(none.exit_code != 0);
  CHECK(none.output.find("--help") != std::string::npos);
}

TEST_CASE("stats matches the hand-computed golden fixture") {
  fs::remove_all(kScratch);
  const std::string data = std::string(CRASHCAST_FIXTURES) + "/golden_ds";
  const auto res = run_cli("stats --data " + data + " --out " + (kScratch / "st").string());
  REQUIRE(res.exit_code == 0);
  const auto kv = load_kv_file(kScratch / "st" / "stats.kv");
  // Hand-computed: 2 videos (200 + 100 frames), 1 Person track (2 small
  // boxes), 1 Car (120 px medium), 1 Bus (310 px large), one event at frame
  // 50 of a 10 fps video.
  CHECK(kv.at("videos") == "2");
  CHECK(kv.at("mean_frames") == "150");
  CHECK(kv.at("tracks.person") == "1");
  CHECK(kv.at("tracks.car") == "1");
  CHECK(kv.at("tracks.bus") == "1");
  CHECK(kv.at("tracks.two_wheeler") == "0");
  CHECK(kv.at("tracks.total") == "3");
  CHECK(kv.at("boxes.small") == "2");
  CHECK(kv.at("boxes.medium") == "1");
  CHECK(kv.at("boxes.large") == "1");
  CHECK(kv.at("boxes.total") == "4");
  CHECK(kv.at("videos_with_events") == "1");
  CHECK(kv.at("mean_time_to_first_accident_s") == "5");
}

TEST_CASE("stats --json emits JSON that parses back") {
  const std::string data = std::string(CRASHCAST_FIXTURES) + "/golden_ds";
  const auto res =
      run_cli("stats --data " + data + " --out " + (kScratch / "stj").string() + " --json");
  REQUIRE(res.exit_code == 0);
  const auto j = nlohmann::json::parse(res.output);
  CHECK(j.at("videos").get<std::string>() == "2");
  CHECK(j.at("mean_time_to_first_accident_s").get<std::string>() == "5");
}

TEST_CASE("stats on an empty directory names the problem") {
  const fs::path empty = kScratch / "empty_ds";
  fs::create_directories(empty);
  const auto res = run_cli("stats --data " + empty.string() + " --out " + kScratch.string());
  CHECK(res.exit_code != 0);
  CHECK(res.output.find("no annotations found") != std::string::npos);
}

TEST_CASE("context flags are accepted and echoed into the resolved config") {
  // A tiny training run; the resolved snapshot must carry the flag values.
  const auto synth = run_cli("synth --out " + (kScratch / "ds").string() +
                             " --videos 1 --frames 30 --seed 4 --collision-prob 0");
  REQUIRE(synth.exit_code == 0);
  const auto res = run_cli(
      "train-detector --data " + (kScratch / "ds").string() + " --out " +
      (kScratch / "det").string() +
      " --context cm --nc 16 --stride 4 --alpha 0.01 --set anchor_scales=64,160,360" +
      " --set image_short_side=96 --lr 0.002 --iterations 2 --seed 1 --frame-step 10");
  REQUIRE(res.exit_code == 0);
  const auto kv = load_kv_file(kScratch / "det" / "resolved_config.txt");
  CHECK(kv.at("context") == "cm");
  CHECK(kv.at("context_nc") == "16");
  CHECK(kv.at("context_stride") == "4");
  CHECK(kv.at("context_alpha") == "0.01");
  CHECK(kv.at("command") == "train-detector");
}

TEST_CASE("missing upstream artifacts name the producing command") {
  const auto res = run_cli("eval-detector --data " + (kScratch / "ds").string() +
                           " --detector " + (kScratch / "nonexistent").string() + " --out " +
                           (kScratch / "ev").string());
  CHECK(res.exit_code != 0);
  CHECK(res.output.find("train") != std::string::npos);  // points at the train command

  const auto res2 = run_cli("eval-forecaster --segments " + (kScratch / "nope.bin").string() +
                            " --forecaster " + (kScratch / "nonexistent").string() + " --out " +
                            (kScratch / "ev2").string());
  CHECK(res2.exit_code != 0);
}

TEST_CASE("CRASHCAST_OUT supplies the default output directory") {
  const std::string data = std::string(CRASHCAST_FIXTURES) + "/golden_ds";
  const fs::path out = kScratch / "env_out";
  const std::string cmd = "CRASHCAST_OUT=" + out.string() + " " +
                          std::string(CRASHCAST_CLI_PATH) + " stats --data " + data +
                          " > /dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  CHECK(fs::exists(out / "stats.kv"));

  // Without --out and without the variable the command fails with guidance.
  const fs::path log = kScratch / "bare.log";
  const std::string bare_cmd = "env -u CRASHCAST_OUT " + std::string(CRASHCAST_CLI_PATH) +
                               " stats --data " + data + " > " + log.string() + " 2>&1";
  CHECK(WEXITSTATUS(std::system(bare_cmd.c_str())) != 0);
  std::ifstream in(log);
  std::ostringstream os;
  os << in.rdbuf();
  CHECK(os.str().find("CRASHCAST_OUT") != std::string::npos);
}

TEST_CASE("config file values load and flags override them") {
  const fs::path cfg_file = kScratch / "det.cfg";
  {
    std::ofstream out(cfg_file);
    out << "iterations = 2\nlambda = 0.5\nanchor_scales = 64,160,360\n"
        << "image_short_side = 96\n";
  }
  const auto res = run_cli("train-detector --data " + (kScratch / "ds").string() + " --out " +
                           (kScratch / "det2").string() + " --config " + cfg_file.string() +
                           " --lambda 2.5 --frame-step 10");
  REQUIRE(res.exit_code == 0);
  const auto kv = load_kv_file(kScratch / "det2" / "resolved_config.txt");
  CHECK(kv.at("iterations") == "2");   // from the config file
  CHECK(kv.at("lambda") == "2.5");     // flag wins over the file
}

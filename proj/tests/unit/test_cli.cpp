#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunOutput {
  int code;
  std::string out;
  std::string err;
};

RunOutput invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = sfd::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), {}};
}

json manifest(const fs::path& dir) { return json::parse(slurp(dir / "manifest.json")); }

// train_log.csv minus the wall_time column, the one intentionally nondeterministic field.
std::string log_without_wall_time(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line, kept;
  while (std::getline(in, line)) kept += line.substr(0, line.rfind(',')) + '\n';
  return kept;
}

class Scratch {
 public:
  Scratch() : root_(fs::temp_directory_path() / "sfd_test_cli") {
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Scratch() { fs::remove_all(root_); }
  std::string operator/(const std::string& name) const { return (root_ / name).string(); }

 private:
  fs::path root_;
};

const std::vector<std::string> kTinyNet = {"--hidden", "16,16", "--time-features", "8", "--emb-width", "8"};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("cli end to end") {
  Scratch dir;
  const auto teacher_dir = dir / "teacher";
  const auto pre = invoke(cat({"pretrain", "--iterations", "40", "--batch", "32", "--seed", "3", "--out", teacher_dir,
                               "--checkpoint-every", "20"},
                              kTinyNet));
  REQUIRE(pre.code == 0);
  const auto teacher = teacher_dir + "/checkpoint.json";

  SUBCASE("pretrain artifacts") {
    CHECK(fs::exists(teacher));
    CHECK(fs::exists(teacher_dir + "/checkpoint-20.json"));
    CHECK(fs::exists(teacher_dir + "/checkpoint-40.json"));
    const auto m = manifest(teacher_dir);
    CHECK(m["status"] == "ok");
    CHECK(m["seed"] == 3);
    CHECK(m["command"] == "pretrain");
    CHECK(m["config"]["iterations"] == 40);
    CHECK(m["results"].contains("eps_error"));
    const auto log = slurp(teacher_dir + "/train_log.csv");
    CHECK(log.rfind("iteration,loss,lr,wall_time\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 41);
  }

  SUBCASE("three steps with AFS and Euler cost two evaluations") {
    const auto out = dir / "sample";
    const auto r = invoke({"sample", "--checkpoint", teacher, "--steps", "3", "--afs", "--solver", "euler", "--chains",
                           "50", "--out", out});
    REQUIRE(r.code == 0);
    CHECK(manifest(out)["results"]["nfe"] == 2);
    const auto csv = slurp(out + "/samples.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 51);
  }

  SUBCASE("variable-step distillation writes a step-conditioned checkpoint") {
    const auto out = dir / "sfdv";
    const auto r = invoke({"distill", "--mode", "sfd-v", "--step-list", "2,3,4,5", "--teacher-solver", "dpm_pp_3m",
                           "--K", "4", "--checkpoint", teacher, "--budget", "64", "--batch", "16", "--out", out});
    REQUIRE(r.code == 0);
    const auto ck = sfd::load_checkpoint(out + "/checkpoint.json");
    CHECK(ck.net.arch().step_condition);
    CHECK(manifest(out)["results"]["iterations"] == 4);
    const auto s = invoke({"sample", "--checkpoint", out + "/checkpoint.json", "--steps", "4", "--step", "4", "--afs",
                           "--chains", "20", "--out", dir / "sfdv_sample"});
    CHECK(s.code == 0);
  }

  SUBCASE("same config and seed give byte-identical outputs") {
    for (const char* run : {"a", "b"}) {
      const auto r = invoke({"distill", "--mode", "sfd", "--checkpoint", teacher, "--budget", "48", "--batch", "16",
                             "--seed", "11", "--out", dir / run, "--checkpoint-every", "1"});
      REQUIRE(r.code == 0);
      REQUIRE(invoke({"sample", "--checkpoint", dir / run + "/checkpoint.json", "--chains", "64", "--trace", "--seed",
                      "5", "--out", dir / run + "/s"})
                  .code == 0);
    }
    for (const char* f : {"checkpoint.json", "checkpoint-1.json", "checkpoint-3.json", "s/samples.csv", "s/trace.csv"})
      CHECK(slurp(dir / "a/" + f) == slurp(dir / "b/" + f));
    CHECK(log_without_wall_time(dir / "a/train_log.csv") == log_without_wall_time(dir / "b/train_log.csv"));
  }

  SUBCASE("a manifest alone reproduces its artifacts") {
    const auto first = dir / "first";
    REQUIRE(invoke({"sample", "--checkpoint", teacher, "--chains", "30", "--seed", "9", "--steps", "5", "--out", first})
                .code == 0);
    json cfg = manifest(first)["config"];
    cfg["out"] = dir / "second";
    std::ofstream(dir / "cfg.json") << cfg.dump();
    REQUIRE(invoke({"sample", "--config", dir / "cfg.json"}).code == 0);
    CHECK(slurp(first + "/samples.csv") == slurp(dir / "second/samples.csv"));
  }

  SUBCASE("flags override the config file") {
    std::ofstream(dir / "over.json") << json{{"command", "sample"}, {"steps", 4}, {"chains", 10}}.dump();
    const auto out = dir / "over";
    REQUIRE(invoke({"sample", "--config", dir / "over.json", "--steps", "6", "--checkpoint", teacher, "--out", out})
                .code == 0);
    const auto m = manifest(out);
    CHECK(m["config"]["steps"] == 6);
    CHECK(m["config"]["chains"] == 10);
  }

  SUBCASE("eval sweep") {
    const auto out = dir / "eval";
    const auto r = invoke({"eval", "--checkpoint", teacher, "--step-list", "2,3", "--chains", "200", "--projections",
                           "8", "--out", out});
    REQUIRE(r.code == 0);
    const auto m = manifest(out);
    REQUIRE(m["outputs"].size() == 1);
    const std::string name = m["outputs"][0];
    CHECK(name.rfind("eval-", 0) == 0);
    const auto csv = slurp(out + "/" + name);
    CHECK(csv.rfind("steps,nfe,sliced_wasserstein\n", 0) == 0);
  }

  SUBCASE("reproduce targets run on a supplied teacher") {
    const auto f2 = dir / "fig2";
    REQUIRE(invoke({"reproduce", "--target", "fig2", "--checkpoint", teacher, "--iterations", "1", "--chains", "50",
                    "--out", f2})
                .code == 0);
    CHECK(manifest(f2)["results"].contains("off_target_improvement_fraction"));
    const auto f4 = dir / "fig4";
    REQUIRE(invoke({"reproduce", "--target", "fig4", "--checkpoint", teacher, "--budget", "32", "--chains", "100",
                    "--projections", "4", "--step-list", "2,3", "--out", f4})
                .code == 0);
    const std::string name = manifest(f4)["outputs"].back();
    CHECK(name.rfind("fig4-", 0) == 0);
  }
}

TEST_CASE("cli errors") {
  Scratch dir;
  SUBCASE("unknown flag is an invalid config and still leaves a manifest") {
    const auto out = dir / "bad_flag";
    const auto r = invoke({"sample", "--no-such-flag", "1", "--out", out});
    CHECK(r.code == 2);
    CHECK(!r.err.empty());
    const auto m = manifest(out);
    CHECK(m["status"] == "invalid-config");
    CHECK(m.contains("error"));
  }
  SUBCASE("unknown config key") {
    std::ofstream(dir / "c.json") << R"({"stepz": 3})";
    const auto r = invoke({"sample", "--config", dir / "c.json", "--out", dir / "k"});
    CHECK(r.code == 2);
    CHECK(r.err.find("stepz") != std::string::npos);
  }
  SUBCASE("config for another command") {
    std::ofstream(dir / "c.json") << R"({"command": "pretrain"})";
    CHECK(invoke({"sample", "--config", dir / "c.json", "--out", dir / "k"}).code == 2);
  }
  SUBCASE("missing checkpoint") {
    const auto r = invoke({"sample", "--checkpoint", dir / "nope.json", "--out", dir / "m"});
    CHECK(r.code == 2);
    CHECK(manifest(dir / "m")["status"] == "invalid-config");
  }
  SUBCASE("malformed values") {
    CHECK(invoke({"pretrain", "--iterations", "ten", "--out", dir / "v"}).code == 2);
    CHECK(invoke({"distill", "--mode", "magic", "--out", dir / "v"}).code == 2);
    CHECK(invoke({"reproduce", "--target", "fig9", "--out", dir / "v"}).code == 2);
    CHECK(invoke({"frobnicate"}).code == 2);
  }
  SUBCASE("divergence exits 3 and keeps the last good parameters") {
    const auto out = dir / "div";
    const auto r = invoke(cat({"pretrain", "--iterations", "20", "--batch", "8", "--lr", "1e300", "--out", out}, kTinyNet));
    CHECK(r.code == 3);
    CHECK(manifest(out)["status"] == "diverged");
    const auto ck = sfd::load_checkpoint(out + "/checkpoint.json");
    CHECK(ck.net.params().allFinite());
  }
  SUBCASE("help") {
    CHECK(invoke({"--help"}).code == 0);
    const auto r = invoke({"distill", "--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("--step-list") != std::string::npos);
  }
}

TEST_CASE("schedule table") {
  Scratch dir;
  const auto out = dir / "table";
  REQUIRE(invoke({"reproduce", "--target", "schedule-table", "--out", out}).code == 0);
  const auto csv = slurp(out + "/schedule_table.csv");
  for (const char* row : {"5,80.00,15.11,1.22,0.006", "7,80.00,10.93,0.67,0.006", "10,80.00,8.13,0.42,0.006"})
    CHECK(csv.find(row) != std::string::npos);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

#include "gradvac/formats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gradvac;

namespace {

std::string cli_binary() {
  const char* bin = std::getenv("GRADVAC_CLI_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "GRADVAC_CLI_BIN must point at the CLI");
  return bin;
}

fs::path fresh_dir(const std::string& tag) {
  static int counter = 0;
  const fs::path p = fs::temp_directory_path() /
                     ("gradvac_cli_" + std::to_string(::getpid()) + "_" + tag +
                      "_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

CliRun run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "stdout.txt";
  const fs::path err = scratch / "stderr.txt";
  const std::string cmd =
      cli_binary() + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  CliRun r;
  r.code = WEXITSTATUS(status);
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

json quadratic_config(double step_size, int max_steps,
                      const std::string& mode) {
  return json{
      {"spec_version", 1},
      {"problem",
       json{{"type", "quadratic"},
            {"dimension", 2},
            {"tasks",
             json::array(
                 {json{{"name", "left"},
                       {"size", 100},
                       {"center", {1.0, 0.0}},
                       {"curvature", json{{"kind", "identity"}}}},
                  json{{"name", "right"},
                       {"size", 100},
                       {"center", {-1.0, 0.0}},
                       {"curvature", json{{"kind", "identity"}}}}})},
            {"initial_point", {0.0, 5.0}}}},
      {"train", json{{"step_size", step_size}, {"max_steps", max_steps}}},
      {"vaccine", json{{"mode", mode}, {"beta", 0.01}, {"seed", 5}}}};
}

json combine_vaccine_config(const std::string& mode, double beta = 0.01) {
  return json{{"spec_version", 1},
              {"vaccine", json{{"mode", mode}, {"beta", beta}, {"seed", 2}}}};
}

fs::path write_conflicting_dump(const fs::path& dir) {
  GradientDump dump;
  dump.step = 0;
  dump.partition = GroupPartition::whole_model(2);
  dump.tasks = {{0, "a"}, {1, "b"}};
  dump.sizes = {{0, 10}, {1, 10}};
  std::map<std::string, GradVector> t0;
  t0.emplace("model", GradVector({1.0, 0.0}, "model"));
  std::map<std::string, GradVector> t1;
  t1.emplace("model", GradVector({-1.0, 1.0}, "model"));
  dump.bundle.per_task.emplace(0, t0);
  dump.bundle.per_task.emplace(1, t1);

  const fs::path p = dir / "dump.json";
  spit(p, dump_to_json(dump).dump(1) + "\n");
  return p;
}

}  // namespace

TEST_CASE("help and version exit cleanly") {
  const fs::path dir = fresh_dir("help");
  CHECK(run_cli("--help", dir).code == 0);
  CHECK(run_cli("--version", dir).code == 0);
  CHECK(run_cli("simulate --help", dir).code == 0);
}

TEST_CASE("bad invocations exit with code 2") {
  const fs::path dir = fresh_dir("badargs");
  CHECK(run_cli("", dir).code == 2);               // subcommand required
  CHECK(run_cli("frobnicate", dir).code == 2);
  CHECK(run_cli("simulate --nope", dir).code == 2);
  CHECK(run_cli("simulate --out x", dir).code == 2);  // --config required
}

TEST_CASE("simulate writes the full record set") {
  const fs::path dir = fresh_dir("simulate");
  const fs::path cfg = dir / "config.json";
  spit(cfg, quadratic_config(0.1, 20, "gradvac").dump(1));
  const fs::path out = dir / "run";

  const CliRun r = run_cli(
      "simulate --config " + cfg.string() + " --out " + out.string(), dir);
  CAPTURE(r.err);
  CHECK(r.code == 0);
  CHECK(r.out.find("ok:") != std::string::npos);

  CHECK(fs::exists(out / "loss.csv"));
  CHECK(fs::exists(out / "similarity.csv"));
  CHECK(fs::exists(out / "surgery.csv"));
  CHECK(fs::exists(out / "ema.json"));
  CHECK(fs::exists(out / "meta.json"));
  CHECK_FALSE(fs::exists(out / "params.csv"));  // not requested

  const json meta = json::parse(slurp(out / "meta.json"));
  CHECK(meta.at("kind") == "gradvac.run_meta");
  CHECK(meta.at("steps") == 20);
  CHECK(meta.at("rng_algorithm") == "mt19937_64");
  CHECK(meta.at("tasks").size() == 2);
  CHECK(meta.at("final_loss").get<double>() < meta.at("config")
                                                  .at("problem")
                                                  .at("initial_point")[1]
                                                  .get<double>());

  const std::string loss = slurp(out / "loss.csv");
  CHECK(loss.rfind("step,joint,left,right\n", 0) == 0);
}

TEST_CASE("simulate reruns are byte identical") {
  const fs::path dir = fresh_dir("rerun");
  const fs::path cfg = dir / "config.json";
  spit(cfg, quadratic_config(0.05, 30, "gradvac").dump(1));

  const fs::path out1 = dir / "run1";
  const fs::path out2 = dir / "run2";
  CHECK(run_cli("simulate --config " + cfg.string() + " --out " +
                    out1.string(),
                dir)
            .code == 0);
  CHECK(run_cli("simulate --config " + cfg.string() + " --out " +
                    out2.string(),
                dir)
            .code == 0);

  for (const char* name :
       {"loss.csv", "similarity.csv", "surgery.csv", "ema.json", "meta.json"}) {
    CHECK_MESSAGE(slurp(out1 / name) == slurp(out2 / name), name);
  }
}

TEST_CASE("seed and mode overrides change the run") {
  const fs::path dir = fresh_dir("override");
  const fs::path cfg = dir / "config.json";
  spit(cfg, quadratic_config(0.05, 15, "gradvac").dump(1));

  const fs::path base = dir / "base";
  const fs::path seeded = dir / "seeded";
  const fs::path pc = dir / "pc";
  CHECK(run_cli("simulate --config " + cfg.string() + " --out " +
                    base.string(),
                dir)
            .code == 0);
  CHECK(run_cli("simulate --config " + cfg.string() + " --out " +
                    seeded.string() + " --seed 99",
                dir)
            .code == 0);
  CHECK(run_cli("simulate --config " + cfg.string() + " --out " + pc.string() +
                    " --mode pcgrad",
                dir)
            .code == 0);

  CHECK(json::parse(slurp(seeded / "meta.json"))
            .at("config")
            .at("vaccine")
            .at("seed") == 99);
  CHECK(slurp(seeded / "meta.json") != slurp(base / "meta.json"));

  const std::string pc_surgery = slurp(pc / "surgery.csv");
  CHECK(pc_surgery.find("pcgrad") != std::string::npos);
  CHECK(pc_surgery.find("gradvac") == std::string::npos);
  CHECK(json::parse(slurp(pc / "ema.json")).at("entries").empty());
}

TEST_CASE("simulate rejects malformed configs with code 2") {
  const fs::path dir = fresh_dir("badcfg");

  const fs::path missing = dir / "missing.json";
  CHECK(run_cli("simulate --config " + missing.string() + " --out " +
                    (dir / "o1").string(),
                dir)
            .code == 2);

  const fs::path broken = dir / "broken.json";
  spit(broken, "{\"spec_version\": 1,\n  nope\n}");
  CHECK(run_cli("simulate --config " + broken.string() + " --out " +
                    (dir / "o2").string(),
                dir)
            .code == 2);

  json extra = quadratic_config(0.1, 5, "gradvac");
  extra["surprise"] = true;
  const fs::path unknown = dir / "unknown.json";
  spit(unknown, extra.dump(1));
  const CliRun r = run_cli("simulate --config " + unknown.string() +
                               " --out " + (dir / "o3").string(),
                           dir);
  CHECK(r.code == 2);
  CHECK(r.err.find("surprise") != std::string::npos);

  json badmode = quadratic_config(0.1, 5, "gradvac");
  badmode["vaccine"]["mode"] = "sideways";
  const fs::path bm = dir / "badmode.json";
  spit(bm, badmode.dump(1));
  CHECK(run_cli("simulate --config " + bm.string() + " --out " +
                    (dir / "o4").string(),
                dir)
            .code == 2);
}

TEST_CASE("divergent training exits with code 3") {
  const fs::path dir = fresh_dir("diverge");
  const fs::path cfg = dir / "config.json";
  spit(cfg, quadratic_config(3.0, 300, "sum_baseline").dump(1));
  const CliRun r = run_cli("simulate --config " + cfg.string() + " --out " +
                               (dir / "boom").string(),
                           dir);
  CHECK(r.code == 3);
}

TEST_CASE("combine projects a dump and reports the surgery") {
  const fs::path dir = fresh_dir("combine");
  const fs::path dump = write_conflicting_dump(dir);
  const fs::path cfg = dir / "combine.json";
  spit(cfg, combine_vaccine_config("pcgrad").dump(1));

  const fs::path out = dir / "combined.json";
  const fs::path report = dir / "report.json";
  const CliRun r = run_cli("combine " + dump.string() + " --config " +
                               cfg.string() + " --out " + out.string() +
                               " --report " + report.string(),
                           dir);
  CAPTURE(r.err);
  CHECK(r.code == 0);
  CHECK(r.out.find("fired=2") != std::string::npos);

  const GradientDump combined =
      dump_from_json(json::parse(slurp(out)));
  REQUIRE(combined.tasks.size() == 1);
  CHECK(combined.tasks[0].name == "combined");
  CHECK(combined.bundle.per_task.at(0).at("model").values ==
        std::vector<double>{0.5, 1.5});

  const json rep = json::parse(slurp(report));
  CHECK(rep.at("kind") == "gradvac.surgery_report");
  CHECK(rep.at("fired_total") == 2);
  CHECK(rep.at("entries").size() == 2);
}

TEST_CASE("combine threads the ema across invocations") {
  const fs::path dir = fresh_dir("emachain");
  const fs::path dump = write_conflicting_dump(dir);
  const fs::path cfg = dir / "combine.json";
  spit(cfg, combine_vaccine_config("gradvac").dump(1));

  const fs::path ema1 = dir / "ema1.json";
  const fs::path ema2 = dir / "ema2.json";
  CHECK(run_cli("combine " + dump.string() + " --config " + cfg.string() +
                    " --out " + (dir / "c1.json").string() + " --ema-out " +
                    ema1.string(),
                dir)
            .code == 0);
  CHECK(run_cli("combine " + dump.string() + " --config " + cfg.string() +
                    " --out " + (dir / "c2.json").string() + " --ema-in " +
                    ema1.string() + " --ema-out " + ema2.string(),
                dir)
            .code == 0);

  const EmaStore first = ema_snapshot_from_json(json::parse(slurp(ema1)));
  const EmaStore second = ema_snapshot_from_json(json::parse(slurp(ema2)));
  CHECK(first.size() == 2);
  CHECK(second.size() == 2);
  // same observation folded twice moves the average further
  CHECK(second.get(0, 1, "model") < first.get(0, 1, "model"));
}

TEST_CASE("combine rejects mismatched inputs with code 2") {
  const fs::path dir = fresh_dir("combinebad");
  const fs::path dump = write_conflicting_dump(dir);

  const fs::path cfg = dir / "combine.json";
  spit(cfg, combine_vaccine_config("gradvac").dump(1));

  // ema snapshot whose beta disagrees with the config
  EmaStore other_beta(0.5);
  other_beta.set(0, 1, "model", 0.1);
  const fs::path ema = dir / "ema.json";
  spit(ema, ema_snapshot_to_json(other_beta).dump(1));
  CHECK(run_cli("combine " + dump.string() + " --config " + cfg.string() +
                    " --out " + (dir / "c.json").string() + " --ema-in " +
                    ema.string(),
                dir)
            .code == 2);

  // ema snapshot naming a task the dump does not have
  EmaStore stray(0.01);
  stray.set(0, 7, "model", 0.1);
  const fs::path ema_stray = dir / "ema_stray.json";
  spit(ema_stray, ema_snapshot_to_json(stray).dump(1));
  CHECK(run_cli("combine " + dump.string() + " --config " + cfg.string() +
                    " --out " + (dir / "c2.json").string() + " --ema-in " +
                    ema_stray.string(),
                dir)
            .code == 2);

  // malformed dump
  const fs::path bad_dump = dir / "bad_dump.json";
  json j = json::parse(slurp(dump));
  j["tasks"][0]["groups"]["model"] = {1.0};
  spit(bad_dump, j.dump(1));
  CHECK(run_cli("combine " + bad_dump.string() + " --config " + cfg.string() +
                    " --out " + (dir / "c3.json").string(),
                dir)
            .code == 2);
}

TEST_CASE("analyze aggregates a finished run") {
  const fs::path dir = fresh_dir("analyze");
  const fs::path cfg = dir / "config.json";
  spit(cfg, quadratic_config(0.05, 25, "gradvac").dump(1));
  const fs::path run_dir = dir / "run";
  REQUIRE(run_cli("simulate --config " + cfg.string() + " --out " +
                      run_dir.string(),
                  dir)
              .code == 0);

  const fs::path out = dir / "analysis";
  const CliRun r = run_cli("analyze " + run_dir.string() + " --out " +
                               out.string() + " --window 5",
                           dir);
  CAPTURE(r.err);
  CHECK(r.code == 0);
  CHECK(fs::exists(out / "aggregate_model.json"));
  CHECK(fs::exists(out / "activity.csv"));
  CHECK_FALSE(fs::exists(out / "clustering.json"));  // no families here

  const json agg = json::parse(slurp(out / "aggregate_model.json"));
  CHECK(agg.at("kind") == "gradvac.task_matrix");
  CHECK(agg.at("tasks") == json::array({"left", "right"}));
  CHECK(agg.at("mean")[0][0] == 1.0);

  // step range filter and self-contrast both run
  const fs::path out2 = dir / "analysis2";
  CHECK(run_cli("analyze " + run_dir.string() + " --out " + out2.string() +
                    " --steps 0:10 --contrast model:model",
                dir)
            .code == 0);
  CHECK(fs::exists(out2 / "contrast_model_model.json"));
  const json contrast = json::parse(slurp(out2 / "contrast_model_model.json"));
  CHECK(contrast.at("mean")[0][1] == 0.0);  // anything minus itself
}

TEST_CASE("analyze clusters family runs") {
  const fs::path dir = fresh_dir("analyzefam");
  const json cfg_json = {
      {"spec_version", 1},
      {"problem", json{{"type", "family"},
                       {"num_families", 2},
                       {"tasks_per_family", 2},
                       {"dimension", 4},
                       {"within_family_noise", 0.05},
                       {"construction_seed", 8}}},
      {"train", json{{"step_size", 0.02}, {"max_steps", 10}}},
      {"vaccine", json{{"mode", "gradvac"}, {"beta", 0.01}, {"seed", 4}}}};
  const fs::path cfg = dir / "config.json";
  spit(cfg, cfg_json.dump(1));
  const fs::path run_dir = dir / "run";
  REQUIRE(run_cli("simulate --config " + cfg.string() + " --out " +
                      run_dir.string(),
                  dir)
              .code == 0);

  const json meta = json::parse(slurp(run_dir / "meta.json"));
  CHECK(meta.at("tasks")[0].count("family") == 1);

  const fs::path out = dir / "analysis";
  const CliRun r =
      run_cli("analyze " + run_dir.string() + " --out " + out.string(), dir);
  CAPTURE(r.err);
  CHECK(r.code == 0);
  REQUIRE(fs::exists(out / "clustering.json"));
  const json clus = json::parse(slurp(out / "clustering.json"));
  CHECK(clus.at("groups").at("model").at("within_cells").get<int>() > 0);
}

TEST_CASE("analyze rejects missing or broken inputs with code 2") {
  const fs::path dir = fresh_dir("analyzebad");
  CHECK(run_cli("analyze " + (dir / "nothing").string() + " --out " +
                    (dir / "out").string(),
                dir)
            .code == 2);

  // a records directory without meta.json
  const fs::path hollow = dir / "hollow";
  fs::create_directories(hollow);
  spit(hollow / "similarity.csv", "step,group,task_i,task_j,cosine\n");
  CHECK(run_cli("analyze " + hollow.string() + " --out " +
                    (dir / "out2").string(),
                dir)
            .code == 2);

  // bad step range syntax
  const fs::path cfg = dir / "config.json";
  spit(cfg, quadratic_config(0.05, 5, "gradvac").dump(1));
  const fs::path run_dir = dir / "run";
  REQUIRE(run_cli("simulate --config " + cfg.string() + " --out " +
                      run_dir.string(),
                  dir)
              .code == 0);
  CHECK(run_cli("analyze " + run_dir.string() + " --out " +
                    (dir / "out3").string() + " --steps banana",
                dir)
            .code == 2);
}

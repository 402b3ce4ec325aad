#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "fedwsidd/cli.hpp"

using namespace fedwsidd;
using namespace fedwsidd::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("every key reads back what it was set to") {
  RunConfig cfg;
  for (const auto& key : RunConfig::keys()) {
    CAPTURE(key);
    const std::string v = cfg.get(key);
    RunConfig other = cfg;
    other.set(key, v);
    CHECK(other.get(key) == v);
  }
  CHECK_THROWS_AS(cfg.set("no_such_key", "1"), Error);
  CHECK_THROWS_AS(cfg.set("rounds", "ten"), Error);
  CHECK_THROWS_AS(cfg.set("stain_norm", "maybe"), Error);
}

TEST_CASE("config keys reach the run configuration") {
  RunConfig cfg;
  cfg.set("M", "3");
  cfg.set("B", "7");
  cfg.set("patch_size", "32");
  cfg.set("embed_dim", "16");
  cfg.set("stain_norm", "off");
  cfg.set("seeds", "4, 5");
  cfg.set("model", "clam_lite");
  CHECK(cfg.fed.distill_cfg.slides_per_class == 3);
  CHECK(cfg.fed.distill_cfg.patches_per_slide == 7);
  CHECK(cfg.fed.distill_cfg.patch_height == 32);
  CHECK(cfg.fed.extractor.input_width == 32);
  CHECK(cfg.toy.patch_height == 32);
  CHECK(cfg.fed.homogeneous_spec.input_dim == 16);
  CHECK(cfg.fed.homogeneous_spec.name == MilKind::clam_lite);
  CHECK_FALSE(cfg.fed.distill_cfg.stain_norm);
  CHECK(cfg.fed.seeds == std::vector<std::uint64_t>{4, 5});
  for (const auto& s : cfg.fed.pool) CHECK(s.input_dim == 16);
}

TEST_CASE("config precedence: preset, file, overrides") {
  TempDir dir("fedwsidd_cli_config");
  const auto path = (dir.path / "run.yaml").string();
  std::ofstream(path) << "# toy run\nrounds: 20\nseeds: [1, 2, 3]\npreset: ca17\nclass_signal: 0.5\n";
  const auto cfg = load_config(path, {{"rounds", "30"}});
  CHECK(cfg.toy.num_centres == 5);  // preset applied before the other keys
  CHECK(cfg.toy.class_signal == doctest::Approx(0.5));
  CHECK(cfg.fed.distill_cfg.rounds == 30);
  CHECK(cfg.fed.seeds.size() == 3u);

  std::ofstream(path) << "rounds: 20\nbogus: 1\n";
  try {
    load_config(path, {});
    FAIL("no throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ConfigInvalid);
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  CHECK_THROWS_AS(load_config(std::string("/nonexistent.yaml"), {}), Error);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"rounds", "0"}}), Error);
}

TEST_CASE("result table round trips") {
  ResultTable t;
  t.columns = {"local", "homogeneous"};
  t.rows = {"C1", "C2", "Avg"};
  t.cells["C1"]["local"] = {0.942, 0.011};
  t.cells["C1"]["homogeneous"] = {0.95, 0.0};
  t.cells["C2"]["local"] = {0.845, 0.02};
  t.cells["Avg"]["local"] = {0.901, 0.013};
  t.cells["Avg"]["homogeneous"] = {0.925, 0.004};
  t.p_values["homogeneous"] = 0.0132;
  const auto text = t.format();
  CHECK(text.find("94.2 ± 1.1") != std::string::npos);
  CHECK(text.find("0.0132") != std::string::npos);
  const auto back = ResultTable::parse(text);
  CHECK(back.columns == t.columns);
  CHECK(back.rows == t.rows);
  CHECK(back.cells.at("C1").at("local").mean == doctest::Approx(0.942));
  CHECK(back.cells.at("C2").count("homogeneous") == 0);
  CHECK(back.p_values.at("homogeneous") == doctest::Approx(0.0132));
  CHECK(back.format() == text);
}

TEST_CASE("content hashes follow git blob hashing over sha-256") {
  // git hash-object --object-format=sha256 of the empty blob
  CHECK(blob_hash("") == "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
  CHECK(blob_hash("hello") == "8aec4e4876f854f688d0ebfc8f37598f38e5fd6903cccc850ca36591175aeb60");

  TempDir dir("fedwsidd_cli_hash");
  std::ofstream(dir.path / "b.txt") << "two";
  fs::create_directories(dir.path / "sub");
  std::ofstream(dir.path / "sub" / "a.txt") << "one";
  const auto h1 = tree_hash(dir.path.string());
  CHECK(file_hash((dir.path / "b.txt").string()) == blob_hash("two"));
  std::ofstream(dir.path / "run_manifest.json") << "{}";
  CHECK(tree_hash(dir.path.string()) == h1);
  std::ofstream(dir.path / "b.txt") << "changed";
  CHECK(tree_hash(dir.path.string()) != h1);
}

TEST_CASE("plots embed their data") {
  const auto svg = line_plot_svg("acc vs M", "M", "acc", {{"B=25", {1, 5, 10}, {0.7, 0.8, 0.75}}});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("<!-- data") != std::string::npos);
  CHECK(svg.find("B=25,5,0.8") != std::string::npos);
  CHECK(svg.find("<polyline") != std::string::npos);
  const auto bars = bar_plot_svg("stain", {"a", "b"}, {{"on", {0, 1}, {0.8, 0.9}}, {"off", {0, 1}, {0.7, 0.6}}});
  CHECK(bars.find("off,1,0.6") != std::string::npos);
  CHECK(bars.find("</svg>") != std::string::npos);
}

TEST_CASE("exit codes") {
  TempDir dir("fedwsidd_cli_exit");
  const auto out = (dir.path / "o").string();
  CHECK(run({"fedwsidd", "distill", "--data", (dir.path / "missing").string(), "--out", out}) == kDatasetError);
  CHECK(run({"fedwsidd", "federate", "--data", out, "--out", out, "--set", "nope=1"}) == kConfigError);
  CHECK(run({"fedwsidd", "federate", "--data", out, "--out", out, "--rounds", "-1"}) == kConfigError);
  CHECK(run({"fedwsidd", "frobnicate"}) == kConfigError);
  CHECK(run({"fedwsidd", "evaluate", out}) == kConfigError);
}

TEST_CASE("gen-data, federate and evaluate end to end") {
  TempDir dir("fedwsidd_cli_e2e");
  const auto d = [&](const char* name) { return (dir.path / name).string(); };
  const std::vector<std::string> small = {"--set", "slides_per_class_per_centre=4", "--set", "T=3",
                                          "--set", "patch_size=16",               "--set", "embed_dim=8",
                                          "--set", "hidden_dim=8",                "--set", "attention_dim=4"};
  auto with = [&](std::vector<std::string> args) {
    args.insert(args.end(), small.begin(), small.end());
    return run(args);
  };
  REQUIRE(with({"fedwsidd", "gen-data", "--out", d("data")}) == kOk);
  CHECK(fs::exists(dir.path / "data" / "C1" / "manifest.yaml"));
  CHECK(fs::exists(dir.path / "data" / "run_manifest.json"));
  const auto data_hash = tree_hash(d("data"));
  REQUIRE(with({"fedwsidd", "gen-data", "--out", d("data")}) == kOk);
  CHECK(tree_hash(d("data")) == data_hash);

  REQUIRE(with({"fedwsidd", "federate", "--data", d("data"), "--out", d("local"), "--mode", "local", "--seeds", "1,2",
                "--epochs", "2"}) == kOk);
  const std::vector<std::string> fed = {"fedwsidd", "federate", "--data", d("data"), "--out", d("homogeneous"),
                                        "--seeds", "1,2", "--epochs", "2", "--rounds", "2", "--m", "1", "--b", "2"};
  REQUIRE(with(fed) == kOk);
  for (const char* f : {"report.json", "accuracy.csv", "summary.csv", "table.txt", "bytes.csv", "run_manifest.json"})
    CHECK(fs::exists(dir.path / "homogeneous" / f));
  CHECK(fs::exists(dir.path / "homogeneous" / "transcript" / "seed_1" / "upload_C1.fwsa"));
  CHECK(fs::exists(dir.path / "homogeneous" / "traces" / "seed_2" / "C2.csv"));
  const auto out_hash = tree_hash(d("homogeneous"));
  REQUIRE(with(fed) == kOk);
  CHECK(tree_hash(d("homogeneous")) == out_hash);

  CHECK(run({"fedwsidd", "evaluate", d("local"), d("homogeneous"), "--baseline", "local"}) == kOk);
  CHECK(run({"fedwsidd", "evaluate", d("local"), d("homogeneous"), "--baseline", "nope"}) == kConfigError);
  REQUIRE(with({"fedwsidd", "federate", "--data", d("data"), "--out", d("other"), "--mode", "local", "--seeds", "1,3",
                "--epochs", "2"}) == kOk);
  CHECK(run({"fedwsidd", "evaluate", d("local"), d("other"), "--baseline", "local"}) == kSeedMismatch);
}

#include "doctest.h"

#include <set>

#include "fedwsidd/data.hpp"
#include "fedwsidd/fed.hpp"

using namespace fedwsidd;

namespace {

std::vector<ClientDataset> small_federation(int centres = 2) {
  ToyGenConfig cfg = ca16_preset();
  cfg.num_centres = centres;
  cfg.slides_per_class_per_centre = 5;
  cfg.patches_per_slide = 4;
  cfg.patch_height = cfg.patch_width = 16;
  return generate_toy_federation(cfg);
}

FederationConfig small_config() {
  FederationConfig cfg;
  cfg.distill_cfg.rounds = 3;
  cfg.distill_cfg.slides_per_class = 2;
  cfg.distill_cfg.patches_per_slide = 3;
  cfg.distill_cfg.patch_height = cfg.distill_cfg.patch_width = 16;
  cfg.distill_cfg.learning_rate = 0.01;
  cfg.extractor.input_height = cfg.extractor.input_width = 16;
  cfg.extractor.embed_dim = 8;
  cfg.homogeneous_spec.input_dim = 8;
  cfg.homogeneous_spec.hidden_dim = 8;
  cfg.homogeneous_spec.attention_dim = 4;
  cfg.train_cfg.epochs = 3;
  cfg.seeds = {1, 2};
  return cfg;
}

SyntheticSet fake_set(const std::string& centre, int m, int b) {
  SyntheticSet s;
  s.centre_id = centre;
  s.slides_per_class = m;
  s.patches_per_slide = b;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < m; ++i) {
      Slide sl;
      sl.id = centre + "_syn_" + std::to_string(c) + "_" + std::to_string(i);
      sl.centre_id = centre;
      sl.label.index = c;
      sl.kind = SlideKind::synthetic;
      sl.patches.assign(b, PatchTensor(3, 4, 4, 0.5f));
      s.slides.push_back(sl);
    }
  return s;
}

}  // namespace

TEST_CASE("communication cost of the default shape") {
  DistillConfig cfg;  // M=10, B=100, 64x64
  const auto c = communication_cost(cfg, 2, 2);
  CHECK(c.upload_per_client == 98304000u);
  CHECK(c.upload_per_client == 10u * 2 * 100 * 3 * 64 * 64 * 4);
  CHECK(c.broadcast == 2u * 98304000u);
  FederationConfig local;
  local.mode = FederationMode::local_only;
  CHECK(communication_cost(local, 2).upload_per_client == 0u);
}

TEST_CASE("aggregate orders by centre and checks shapes") {
  const auto g = aggregate({fake_set("C2", 2, 3), fake_set("C1", 2, 3), fake_set("C3", 2, 3)});
  CHECK(g.slides.size() == 3u * 2 * 2);
  CHECK(g.slides.front().centre_id == "C1");
  CHECK(g.slides.back().centre_id == "C3");
  CHECK_THROWS_AS(aggregate({fake_set("C1", 2, 3), fake_set("C2", 2, 4)}), Error);
}

TEST_CASE("local training set appends synthetic slides") {
  ClientDataset ds;
  ds.centre_id = "C2";
  Slide real;
  real.id = "r";
  real.centre_id = "C2";
  real.patches.assign(2, PatchTensor(3, 4, 4, 0.3f));
  ds.train_slides = {real};
  const auto g = aggregate({fake_set("C1", 1, 2), fake_set("C2", 1, 2)});
  const auto with_own = build_local_training_set(ds, g, true);
  CHECK(with_own.size() == 1u + 4u);
  CHECK(with_own.front().id == "r");
  const auto without = build_local_training_set(ds, g, false);
  CHECK(without.size() == 1u + 2u);
  for (std::size_t i = 1; i < without.size(); ++i) CHECK(without[i].centre_id == "C1");
}

TEST_CASE("model assignment") {
  FederationConfig cfg;
  auto rng = derive_stream(1, "assign");
  const std::vector<std::string> centres = {"C2", "C1", "C3"};
  auto homo = assign_models(cfg, centres, rng);
  for (const auto& [c, s] : homo) CHECK(s == cfg.homogeneous_spec);
  cfg.mode = FederationMode::heterogeneous;
  cfg.pool = {cfg.homogeneous_spec, cfg.homogeneous_spec};
  cfg.pool[1].name = MilKind::clam_lite;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto r = derive_stream(seed, "assign");
    const auto a = assign_models(cfg, centres, r);
    CHECK(a.size() == 3u);
    auto r2 = derive_stream(seed, "assign");
    CHECK(assign_models(cfg, centres, r2) == a);
  }
  cfg.pool.clear();
  CHECK_THROWS_AS(assign_models(cfg, centres, rng), Error);
}

TEST_CASE("federation protocol and determinism") {
  const auto data = small_federation();
  auto cfg = small_config();
  std::vector<std::string> messages;
  FederationHooks hooks;
  hooks.on_message = [&](const TranscriptMessage& m, const std::vector<std::uint8_t>& bytes) {
    messages.push_back(m.direction + ":" + m.sender);
    const auto tensors = decode_archive(bytes);
    for (const auto& t : tensors) CHECK(t.name.rfind("synthetic|", 0) == 0);
  };
  const auto rep = run_federation(data, cfg, hooks);
  CHECK(rep.runs.size() == 2u);
  CHECK(rep.transcript.size() == 2u * 3);
  CHECK(messages.size() == 6u);
  for (std::uint64_t seed : {1u, 2u}) {
    int up = 0, down = 0;
    for (const auto& m : rep.transcript) {
      if (m.seed != seed) continue;
      (m.direction == "upload" ? up : down) += 1;
    }
    CHECK(up == 2);
    CHECK(down == 1);
  }
  const auto& broadcast = rep.transcript[2];
  CHECK(broadcast.direction == "broadcast");
  CHECK(broadcast.entries.size() == 2u * 2 * 2);  // K * M * classes
  const auto cost = communication_cost(cfg.distill_cfg, 2, 2);
  CHECK(rep.upload_bytes.at("C1") == cost.upload_per_client);
  CHECK(rep.broadcast_bytes == cost.broadcast);

  const auto again = run_federation(data, cfg);
  CHECK(again.to_json() == rep.to_json());
}

TEST_CASE("local mode sends nothing") {
  const auto data = small_federation();
  auto cfg = small_config();
  cfg.mode = FederationMode::local_only;
  const auto rep = run_federation(data, cfg);
  CHECK(rep.transcript.empty());
  CHECK(rep.broadcast_bytes == 0u);
}

TEST_CASE("reports round trip through json and compare by seed") {
  const auto data = small_federation();
  auto cfg = small_config();
  cfg.mode = FederationMode::heterogeneous;
  cfg.pool = {cfg.homogeneous_spec, cfg.homogeneous_spec};
  cfg.pool[1].name = MilKind::mean_pool;
  const auto rep = run_federation(data, cfg);
  CHECK(rep.assignments.size() == 2u);
  const auto back = FederationReport::from_json(rep.to_json());
  CHECK(back.to_json() == rep.to_json());

  const auto cmp = compare_runs(rep, back, "self");
  CHECK(cmp.global.p_value == 1.0);
  auto other = back;
  other.seeds = {1, 3};
  other.runs[1].seed = 3;
  try {
    compare_runs(rep, other, "x");
    FAIL("no throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::SeedMismatch);
  }
}

TEST_CASE("federation config validation") {
  FederationConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.seeds.clear();
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.jobs = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  CHECK(parse_mode("local") == FederationMode::local_only);
  CHECK_THROWS_AS(parse_mode("async"), Error);
}

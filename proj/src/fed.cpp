#include "fedwsidd/fed.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <set>
#include <thread>

#include "json.hpp"

#include "fedwsidd/data.hpp"

namespace fedwsidd {

namespace {

using nlohmann::json;

/// Runs fn(i) for i in [0, n) on up to jobs threads. The exception of the
/// lowest failing index is rethrown so failures are reported deterministically.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  for (std::size_t w = 0; w < count; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::uint64_t payload_bytes(const std::vector<ArchiveEntryHeader>& headers) {
  std::uint64_t total = 0;
  for (const auto& h : headers) total += h.length;
  return total;
}

int bag_class_count(const SyntheticSet& s) { return s.num_classes(); }

}  // namespace

const char* mode_name(FederationMode mode) {
  switch (mode) {
    case FederationMode::homogeneous: return "homogeneous";
    case FederationMode::heterogeneous: return "heterogeneous";
    case FederationMode::local_only: return "local";
  }
  return "?";
}

FederationMode parse_mode(const std::string& name) {
  if (name == "homogeneous") return FederationMode::homogeneous;
  if (name == "heterogeneous") return FederationMode::heterogeneous;
  if (name == "local" || name == "local_only") return FederationMode::local_only;
  throw Error(Errc::ConfigInvalid, "unknown federation mode '" + name + "'");
}

void FederationConfig::validate() const {
  if (mode == FederationMode::heterogeneous && pool.empty()) {
    throw Error(Errc::ConfigInvalid, "heterogeneous mode needs a nonempty model pool");
  }
  if (seeds.empty()) throw Error(Errc::ConfigInvalid, "at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw Error(Errc::ConfigInvalid, "seeds must be distinct");
  }
  if (jobs < 1) throw Error(Errc::ConfigInvalid, "jobs must be >= 1");
  if (mode != FederationMode::local_only) distill_cfg.validate();
  train_cfg.validate();
}

CommunicationCost communication_cost(const DistillConfig& cfg, int num_classes, int num_clients, int channels) {
  CommunicationCost c;
  c.upload_per_client = static_cast<std::uint64_t>(std::max(cfg.slides_per_class, 0)) *
                        static_cast<std::uint64_t>(num_classes) * static_cast<std::uint64_t>(cfg.patches_per_slide) *
                        static_cast<std::uint64_t>(channels) * static_cast<std::uint64_t>(cfg.patch_height) *
                        static_cast<std::uint64_t>(cfg.patch_width) * 4u;
  c.broadcast = c.upload_per_client * static_cast<std::uint64_t>(num_clients);
  return c;
}

CommunicationCost communication_cost(const FederationConfig& cfg, int num_classes) {
  if (cfg.mode == FederationMode::local_only) return {};
  return communication_cost(cfg.distill_cfg, num_classes, static_cast<int>(cfg.clients.size()));
}

SyntheticSet aggregate(const std::vector<SyntheticSet>& sets) {
  SyntheticSet out;
  if (sets.empty()) return out;
  if (sets.size() == 1) return sets.front();
  std::vector<const SyntheticSet*> order;
  for (const auto& s : sets) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(), [](auto a, auto b) { return a->centre_id < b->centre_id; });

  const SyntheticSet& first = *order.front();
  const PatchTensor* shape = nullptr;
  for (const auto* s : order) {
    if (s->patches_per_slide != first.patches_per_slide || bag_class_count(*s) != bag_class_count(first)) {
      throw Error(Errc::ShapeMismatch, "synthetic set of " + s->centre_id + " differs in B or class count");
    }
    for (const auto& slide : s->slides) {
      for (const auto& p : slide.patches) {
        if (!shape) shape = &p;
        if (!p.same_shape(*shape)) throw Error(Errc::ShapeMismatch, "synthetic slide " + slide.id + " patch shape differs");
      }
      out.slides.push_back(slide);
    }
  }
  out.centre_id = "";
  out.slides_per_class = first.slides_per_class;
  out.patches_per_slide = first.patches_per_slide;
  return out;
}

std::vector<Slide> build_local_training_set(const ClientDataset& client, const SyntheticSet& global, bool include_own) {
  std::vector<Slide> out = client.train_slides;
  std::vector<const Slide*> syn;
  for (const auto& s : global.slides) {
    if (!include_own && s.centre_id == client.centre_id) continue;
    syn.push_back(&s);
  }
  std::stable_sort(syn.begin(), syn.end(), [](auto a, auto b) { return a->centre_id < b->centre_id; });
  for (const auto* s : syn) out.push_back(*s);
  return out;
}

std::map<std::string, MilSpec> assign_models(const FederationConfig& cfg, const std::vector<std::string>& centres,
                                             RngStream& rng) {
  std::vector<std::string> sorted = centres;
  std::sort(sorted.begin(), sorted.end());
  std::map<std::string, MilSpec> out;
  if (cfg.mode != FederationMode::heterogeneous) {
    for (const auto& c : sorted) out[c] = cfg.homogeneous_spec;
    return out;
  }
  if (cfg.pool.empty()) throw Error(Errc::ConfigInvalid, "heterogeneous mode needs a nonempty model pool");
  auto draw = [&] {
    std::vector<std::size_t> picks;
    for (std::size_t i = 0; i < sorted.size(); ++i) picks.push_back(rng.index(cfg.pool.size()));
    return picks;
  };
  auto picks = draw();
  const bool all_same = std::all_of(picks.begin(), picks.end(), [&](auto p) { return cfg.pool[p] == cfg.pool[picks[0]]; });
  if (sorted.size() >= 2 && cfg.pool.size() >= 2 && all_same) picks = draw();
  for (std::size_t i = 0; i < sorted.size(); ++i) out[sorted[i]] = cfg.pool[picks[i]];
  return out;
}

BagFeaturizer::BagFeaturizer(std::shared_ptr<const FeatureExtractor> extractor, bool stain_norm,
                             stain::StainBasis target, stain::StainParams params)
    : extractor_(std::move(extractor)), stain_norm_(stain_norm), target_(std::move(target)), params_(params) {}

BagFeatures BagFeaturizer::featurize(const Slide& slide) {
  const bool cacheable = slide.kind == SlideKind::real;
  if (cacheable) {
    auto it = real_cache_.find(slide.id);
    if (it != real_cache_.end()) return {it->second, slide.id, slide.label.index};
  }
  if (slide.patches.empty()) throw Error(Errc::EmptyBag, "slide " + slide.id + " has no patches");
  const auto d = extractor_->embed_dim();
  Eigen::MatrixXd e(static_cast<Eigen::Index>(slide.patches.size()), d);
  std::vector<double> row(static_cast<std::size_t>(d));
  for (std::size_t t = 0; t < slide.patches.size(); ++t) {
    extractor_->check_input(slide.patches[t]);
    const PatchTensor& p = stain_norm_ ? stain::normalize(slide.patches[t], target_, params_).patch : slide.patches[t];
    const auto pixels = p.to_double();
    extractor_->embed(pixels, row);
    for (int j = 0; j < d; ++j) e(static_cast<Eigen::Index>(t), j) = row[static_cast<std::size_t>(j)];
  }
  if (cacheable) real_cache_.emplace(slide.id, e);
  return {std::move(e), slide.id, slide.label.index};
}

Federation::Federation(std::vector<ClientDataset> datasets, FederationConfig cfg, FederationHooks hooks)
    : datasets_(std::move(datasets)), cfg_(std::move(cfg)), hooks_(std::move(hooks)) {
  std::sort(datasets_.begin(), datasets_.end(), [](const auto& a, const auto& b) { return a.centre_id < b.centre_id; });
  auto rng = derive_stream(cfg_.extractor_seed, "features");
  extractor_ = build_extractor(cfg_.extractor, rng);
}

void Federation::log(const std::string& msg) const {
  if (hooks_.log) hooks_.log(msg);
}

BagFeaturizer& Federation::featurizer(std::size_t client) {
  auto& slot = featurizers_[{client, cfg_.distill_cfg.stain_norm}];
  if (!slot) {
    slot = std::make_unique<BagFeaturizer>(extractor_, cfg_.distill_cfg.stain_norm, cfg_.distill_cfg.stain_target,
                                           cfg_.distill_cfg.stain_params);
  }
  return *slot;
}

FederationReport Federation::run() {
  cfg_.validate();
  if (datasets_.empty()) throw Error(Errc::EmptyDataset, "no client datasets");

  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < datasets_.size(); ++i) {
    const auto& id = datasets_[i].centre_id;
    if (cfg_.clients.empty() || std::find(cfg_.clients.begin(), cfg_.clients.end(), id) != cfg_.clients.end()) {
      active.push_back(i);
    }
  }
  if (active.empty()) throw Error(Errc::ConfigInvalid, "none of the configured clients has a dataset");
  const int num_classes = datasets_[active.front()].num_classes;
  std::vector<std::string> centres;
  for (auto i : active) {
    const auto& ds = datasets_[i];
    if (ds.num_classes != num_classes) throw Error(Errc::ConfigInvalid, "clients disagree on num_classes");
    const auto violations = validate_client_dataset(ds);
    if (!violations.empty()) throw Error(Errc::ConfigInvalid, "centre " + ds.centre_id + ": " + violations.front());
    if (ds.test_slides.empty()) throw Error(Errc::EmptyDataset, "centre " + ds.centre_id + " has no test slides");
    centres.push_back(ds.centre_id);
  }

  FederationReport report;
  report.mode = mode_name(cfg_.mode);
  report.seeds = cfg_.seeds;
  report.centres = centres;
  const bool federated = cfg_.mode != FederationMode::local_only;

  std::vector<BagFeaturizer*> featurizers;
  for (auto i : active) featurizers.push_back(&featurizer(i));

  for (const auto seed : cfg_.seeds) {
    try {
      auto assign_rng = derive_stream(seed, "assign");
      auto specs = assign_models(cfg_, centres, assign_rng);
      std::map<std::string, std::string> names;
      for (auto& [c, spec] : specs) {
        spec.input_dim = extractor_->embed_dim();
        spec.num_classes = num_classes;
        names[c] = mil_kind_name(spec.name);
      }
      report.assignments.push_back(names);

      SyntheticSet global;
      if (federated) {
        std::vector<DistillOutput> outputs(active.size());
        log("seed " + std::to_string(seed) + ": distilling " + std::to_string(active.size()) + " clients");
        parallel_for(active.size(), cfg_.jobs, [&](std::size_t k) {
          const auto& ds = datasets_[active[k]];
          auto rng = derive_stream(seed, "distill/" + ds.centre_id);
          outputs[k] = distill(ds, *extractor_, cfg_.distill_cfg, rng);
        });

        std::vector<SyntheticSet> received;
        for (std::size_t k = 0; k < active.size(); ++k) {
          const auto& centre = datasets_[active[k]].centre_id;
          if (hooks_.on_distilled) hooks_.on_distilled(seed, centre, outputs[k]);
          const auto bytes = encode_archive(synthetic_to_tensors(outputs[k].synthetic));
          TranscriptMessage msg{seed, "upload", centre, {"server"}, 0, bytes.size(), decode_archive_header(bytes)};
          msg.payload_bytes = payload_bytes(msg.entries);
          report.upload_bytes[centre] = msg.payload_bytes;
          if (hooks_.on_message) hooks_.on_message(msg, bytes);
          report.transcript.push_back(std::move(msg));
          received.push_back(synthetic_from_tensors(decode_archive(bytes)));
          outputs[k].synthetic.slides.clear();
        }

        const auto bytes = encode_archive(synthetic_to_tensors(aggregate(received)));
        received.clear();
        TranscriptMessage msg{seed, "broadcast", "server", centres, 0, bytes.size(), decode_archive_header(bytes)};
        msg.payload_bytes = payload_bytes(msg.entries);
        report.broadcast_bytes = msg.payload_bytes;
        if (hooks_.on_message) hooks_.on_message(msg, bytes);
        report.transcript.push_back(std::move(msg));
        global = synthetic_from_tensors(decode_archive(bytes));
      }

      // synthetic bags are shared by every client, so featurize them once
      std::map<std::string, BagFeatures> synthetic_bags;
      if (!global.slides.empty()) {
        BagFeaturizer syn(extractor_, cfg_.distill_cfg.stain_norm, cfg_.distill_cfg.stain_target,
                          cfg_.distill_cfg.stain_params);
        std::vector<BagFeatures> bags(global.slides.size());
        for (std::size_t s = 0; s < global.slides.size(); ++s) bags[s] = syn.featurize(global.slides[s]);
        for (std::size_t s = 0; s < global.slides.size(); ++s) synthetic_bags[global.slides[s].id] = std::move(bags[s]);
      }

      log("seed " + std::to_string(seed) + ": local training");
      RunAccuracies run;
      run.seed = seed;
      std::vector<double> acc(active.size());
      parallel_for(active.size(), cfg_.jobs, [&](std::size_t k) {
        const auto& ds = datasets_[active[k]];
        auto& feat = *featurizers[k];
        std::vector<BagFeatures> bags;
        for (const auto& slide : build_local_training_set(ds, global, cfg_.include_own_synthetic)) {
          bags.push_back(slide.kind == SlideKind::synthetic ? synthetic_bags.at(slide.id) : feat.featurize(slide));
        }
        auto mil_rng = derive_stream(seed, "mil/" + ds.centre_id);
        auto model = build_mil(specs.at(ds.centre_id), mil_rng);
        auto train_rng = derive_stream(seed, "train/" + ds.centre_id);
        auto trained = train_mil(model, bags, cfg_.train_cfg, train_rng);
        std::vector<int> preds, labels;
        for (const auto& slide : ds.test_slides) {
          preds.push_back(predict_label(trained.model, feat.featurize(slide)));
          labels.push_back(slide.label.index);
        }
        acc[k] = accuracy(preds, labels);
      });
      for (std::size_t k = 0; k < active.size(); ++k) {
        const auto& ds = datasets_[active[k]];
        run.per_centre[ds.centre_id] = acc[k];
        run.test_sizes[ds.centre_id] = static_cast<int>(ds.test_slides.size());
      }
      report.runs.push_back(run);
      log("seed " + std::to_string(seed) + ": global " + std::to_string(weighted_global_average(run)));
    } catch (const Error& e) {
      throw Error(e.code(), "seed " + std::to_string(seed) + " failed: " + e.what());
    }
  }
  report.summary = summarize_seeds(report.runs);
  return report;
}

FederationReport run_federation(const std::vector<ClientDataset>& datasets, const FederationConfig& cfg,
                                const FederationHooks& hooks) {
  Federation fed(datasets, cfg, hooks);
  return fed.run();
}

PairedComparison compare_runs(const FederationReport& run, const FederationReport& baseline,
                              const std::string& baseline_name) {
  std::set<std::uint64_t> a(run.seeds.begin(), run.seeds.end()), b(baseline.seeds.begin(), baseline.seeds.end());
  if (a != b || run.runs.size() != baseline.runs.size()) {
    throw Error(Errc::SeedMismatch, "reports were produced with different seed sets");
  }
  if (run.centres != baseline.centres) throw Error(Errc::InconsistentCentres, "reports cover different centres");
  auto by_seed = [](const FederationReport& r) {
    std::map<std::uint64_t, const RunAccuracies*> m;
    for (const auto& x : r.runs) m[x.seed] = &x;
    return m;
  };
  const auto ra = by_seed(run), rb = by_seed(baseline);
  PairedComparison out;
  out.baseline = baseline_name;
  std::vector<double> ga, gb;
  for (auto s : a) {
    ga.push_back(weighted_global_average(*ra.at(s)));
    gb.push_back(weighted_global_average(*rb.at(s)));
  }
  out.global = paired_t_test(ga, gb);
  for (const auto& c : run.centres) {
    std::vector<double> x, y;
    for (auto s : a) {
      x.push_back(ra.at(s)->per_centre.at(c));
      y.push_back(rb.at(s)->per_centre.at(c));
    }
    out.per_centre[c] = paired_t_test(x, y);
  }
  return out;
}

namespace {

json ttest_json(const TTestResult& t) {
  // infinities are not representable in JSON
  json j;
  if (std::isfinite(t.t_statistic))
    j["t"] = t.t_statistic;
  else
    j["t"] = t.t_statistic > 0 ? "inf" : "-inf";
  j["p"] = t.p_value;
  return j;
}

TTestResult ttest_from(const json& j) {
  TTestResult t;
  if (j.at("t").is_string())
    t.t_statistic = j.at("t").get<std::string>() == "inf" ? HUGE_VAL : -HUGE_VAL;
  else
    t.t_statistic = j.at("t").get<double>();
  t.p_value = j.at("p").get<double>();
  return t;
}

}  // namespace

std::string FederationReport::to_json() const {
  json j;
  j["mode"] = mode;
  j["seeds"] = seeds;
  j["centres"] = centres;
  j["runs"] = json::array();
  for (const auto& r : runs) {
    j["runs"].push_back({{"seed", r.seed}, {"accuracy", r.per_centre}, {"test_sizes", r.test_sizes}});
  }
  json summary;
  for (const auto& [c, v] : this->summary.per_centre) summary["per_centre"][c] = {{"mean", v.mean}, {"std", v.std}};
  summary["global"] = {{"mean", this->summary.global.mean}, {"std", this->summary.global.std}};
  summary["global_per_seed"] = this->summary.global_per_seed;
  j["summary"] = summary;
  j["upload_bytes"] = upload_bytes;
  j["broadcast_bytes"] = broadcast_bytes;
  j["assignments"] = assignments;
  j["transcript"] = json::array();
  for (const auto& m : transcript) {
    json e = json::array();
    for (const auto& h : m.entries) {
      e.push_back({{"name", h.name}, {"shape", h.shape}, {"offset", h.offset}, {"length", h.length}, {"crc32", h.crc32}});
    }
    j["transcript"].push_back({{"seed", m.seed},
                               {"direction", m.direction},
                               {"sender", m.sender},
                               {"receivers", m.receivers},
                               {"payload_bytes", m.payload_bytes},
                               {"archive_bytes", m.archive_bytes},
                               {"entries", e}});
  }
  j["comparisons"] = json::array();
  for (const auto& c : comparisons) {
    json pc;
    for (const auto& [centre, t] : c.per_centre) pc[centre] = ttest_json(t);
    j["comparisons"].push_back({{"baseline", c.baseline}, {"global", ttest_json(c.global)}, {"per_centre", pc}});
  }
  return j.dump(2);
}

FederationReport FederationReport::from_json(const std::string& text) {
  FederationReport r;
  try {
    const json j = json::parse(text);
    r.mode = j.at("mode").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.centres = j.at("centres").get<std::vector<std::string>>();
    for (const auto& x : j.at("runs")) {
      RunAccuracies a;
      a.seed = x.at("seed").get<std::uint64_t>();
      a.per_centre = x.at("accuracy").get<std::map<std::string, double>>();
      a.test_sizes = x.at("test_sizes").get<std::map<std::string, int>>();
      r.runs.push_back(std::move(a));
    }
    const auto& s = j.at("summary");
    if (s.contains("per_centre")) {
      for (const auto& [c, v] : s.at("per_centre").items()) {
        r.summary.per_centre[c] = {v.at("mean").get<double>(), v.at("std").get<double>()};
      }
    }
    r.summary.global = {s.at("global").at("mean").get<double>(), s.at("global").at("std").get<double>()};
    r.summary.global_per_seed = s.at("global_per_seed").get<std::vector<double>>();
    r.upload_bytes = j.at("upload_bytes").get<std::map<std::string, std::uint64_t>>();
    r.broadcast_bytes = j.at("broadcast_bytes").get<std::uint64_t>();
    r.assignments = j.at("assignments").get<std::vector<std::map<std::string, std::string>>>();
    for (const auto& m : j.at("transcript")) {
      TranscriptMessage msg;
      msg.seed = m.at("seed").get<std::uint64_t>();
      msg.direction = m.at("direction").get<std::string>();
      msg.sender = m.at("sender").get<std::string>();
      msg.receivers = m.at("receivers").get<std::vector<std::string>>();
      msg.payload_bytes = m.at("payload_bytes").get<std::uint64_t>();
      msg.archive_bytes = m.at("archive_bytes").get<std::uint64_t>();
      for (const auto& e : m.at("entries")) {
        ArchiveEntryHeader h;
        h.name = e.at("name").get<std::string>();
        h.shape = e.at("shape").get<std::vector<std::uint64_t>>();
        h.offset = e.at("offset").get<std::uint64_t>();
        h.length = e.at("length").get<std::uint64_t>();
        h.crc32 = e.at("crc32").get<std::uint32_t>();
        msg.entries.push_back(std::move(h));
      }
      r.transcript.push_back(std::move(msg));
    }
    for (const auto& c : j.at("comparisons")) {
      PairedComparison pc;
      pc.baseline = c.at("baseline").get<std::string>();
      pc.global = ttest_from(c.at("global"));
      for (const auto& [centre, t] : c.at("per_centre").items()) pc.per_centre[centre] = ttest_from(t);
      r.comparisons.push_back(std::move(pc));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::ManifestSchema, std::string("malformed report: ") + e.what());
  }
  return r;
}

}  // namespace fedwsidd

#include "fedwsidd/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

namespace fedwsidd {

void DistillConfig::validate() const {
  if (rounds < 1) throw Error(Errc::ConfigInvalid, "rounds must be >= 1");
  if (slides_per_class < 1) throw Error(Errc::ConfigInvalid, "M (slides_per_class) must be >= 1");
  if (patches_per_slide < 1) throw Error(Errc::ConfigInvalid, "B (patches_per_slide) must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(Errc::ConfigInvalid, "learning_rate must be > 0");
  }
  if (patch_height < 1 || patch_width < 1) throw Error(Errc::ConfigInvalid, "patch size must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
    throw Error(Errc::ConfigInvalid, "adam moments must lie in [0,1) and eps > 0");
  }
}

std::string DistillTrace::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "round,class_index,loss,degenerate_flag\n";
  for (const auto& e : entries) {
    os << e.round << ',' << e.class_index << ',';
    if (e.skipped)
      os << "nan";
    else
      os << e.loss;
    os << ',' << (e.degenerate_count > 0 ? 1 : 0) << '\n';
  }
  return os.str();
}

void DistillTrace::write_csv(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(Errc::Io, "cannot write " + path);
  f << to_csv();
}

namespace {

std::string synthetic_id(const std::string& centre, int cls, int m) {
  std::ostringstream os;
  os << (centre.empty() ? "S" : centre) << "_syn_c" << cls << "_m" << m;
  return os.str();
}

std::vector<std::string> class_names(const ClientDataset& client) {
  std::vector<std::string> names(static_cast<std::size_t>(client.num_classes));
  for (int c = 0; c < client.num_classes; ++c) names[static_cast<std::size_t>(c)] = "class" + std::to_string(c);
  for (const auto& s : client.train_slides) {
    if (s.label.index >= 0 && s.label.index < client.num_classes && !s.label.name.empty()) {
      names[static_cast<std::size_t>(s.label.index)] = s.label.name;
    }
  }
  return names;
}

SyntheticSet empty_set(const std::string& centre, const DistillConfig& cfg) {
  SyntheticSet set;
  set.centre_id = centre;
  set.slides_per_class = cfg.slides_per_class;
  set.patches_per_slide = cfg.patches_per_slide;
  return set;
}

Slide synthetic_slide(const std::string& centre, int cls, int m, std::string name) {
  Slide s;
  s.id = synthetic_id(centre, cls, m);
  s.centre_id = centre;
  s.label = {cls, std::move(name)};
  s.kind = SlideKind::synthetic;
  return s;
}

PatchTensor random_patch(const DistillConfig& cfg, RngStream& rng) {
  PatchTensor p(3, cfg.patch_height, cfg.patch_width);
  for (auto& v : p.data) v = static_cast<float>(rng.uniform(0.35, 0.65));
  return p;
}

}  // namespace

SyntheticSet init_synthetic(int num_classes, const DistillConfig& cfg, RngStream& rng, const std::string& centre_id) {
  cfg.validate();
  if (num_classes < 1) throw Error(Errc::ConfigInvalid, "num_classes must be >= 1");
  if (cfg.init != InitMode::random) {
    throw Error(Errc::InsufficientRealPatches, "real_sample initialisation needs a client dataset");
  }
  SyntheticSet set = empty_set(centre_id, cfg);
  for (int c = 0; c < num_classes; ++c) {
    for (int m = 0; m < cfg.slides_per_class; ++m) {
      Slide s = synthetic_slide(centre_id, c, m, "class" + std::to_string(c));
      s.patches.reserve(static_cast<std::size_t>(cfg.patches_per_slide));
      for (int b = 0; b < cfg.patches_per_slide; ++b) s.patches.push_back(random_patch(cfg, rng));
      set.slides.push_back(std::move(s));
    }
  }
  return set;
}

SyntheticSet init_synthetic(const ClientDataset& client, const DistillConfig& cfg, RngStream& rng) {
  cfg.validate();
  if (cfg.init == InitMode::random) {
    SyntheticSet set = init_synthetic(client.num_classes, cfg, rng, client.centre_id);
    const auto names = class_names(client);
    for (auto& s : set.slides) s.label.name = names[static_cast<std::size_t>(s.label.index)];
    return set;
  }

  std::vector<std::vector<const Slide*>> by_class(static_cast<std::size_t>(client.num_classes));
  for (const auto& s : client.train_slides) {
    if (!s.patches.empty()) by_class[static_cast<std::size_t>(s.label.index)].push_back(&s);
  }
  const auto names = class_names(client);
  SyntheticSet set = empty_set(client.centre_id, cfg);
  for (int c = 0; c < client.num_classes; ++c) {
    const auto& pool = by_class[static_cast<std::size_t>(c)];
    if (pool.empty()) {
      throw Error(Errc::InsufficientRealPatches,
                  "class " + std::to_string(c) + " at centre " + client.centre_id + " has no real patches");
    }
    for (int m = 0; m < cfg.slides_per_class; ++m) {
      Slide s = synthetic_slide(client.centre_id, c, m, names[static_cast<std::size_t>(c)]);
      for (int b = 0; b < cfg.patches_per_slide; ++b) {
        const Slide& src = *pool[rng.index(pool.size())];
        PatchTensor p = src.patches[rng.index(src.patches.size())];
        if (p.height != cfg.patch_height || p.width != cfg.patch_width) {
          throw Error(Errc::ShapeMismatch, "real patch of " + src.id + " differs from the synthetic patch size");
        }
        if (cfg.stain_norm) p = stain::normalize(p, cfg.stain_target, cfg.stain_params).patch;
        s.patches.push_back(std::move(p));
      }
      set.slides.push_back(std::move(s));
    }
  }
  return set;
}

double fm_loss(const FeatureExtractor& extractor, std::span<const PatchTensor> real,
               std::span<const PatchTensor> synthetic) {
  if (real.empty() || synthetic.empty()) throw Error(Errc::EmptyBag, "fm_loss needs two nonempty bags");
  const Embedding a = mean_feature(extractor, real);
  const Embedding b = mean_feature(extractor, synthetic);
  double loss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) loss += (a[i] - b[i]) * (a[i] - b[i]);
  return loss;
}

FeatureMatchObjective::FeatureMatchObjective(const FeatureExtractor& extractor, bool stain_norm,
                                             stain::StainBasis target, stain::StainParams params)
    : extractor_(extractor), stain_norm_(stain_norm), target_(std::move(target)), params_(params) {}

stain::FrozenStainMap FeatureMatchObjective::map_for(std::span<const double> pixels, bool* degenerate) const {
  if (degenerate) *degenerate = false;
  try {
    const auto od = stain::od_planes(pixels);
    return stain::FrozenStainMap(stain::estimate_from_od(od, params_), target_, params_.beta);
  } catch (const Error& e) {
    if (e.code() != Errc::DegenerateTissue) throw;
    if (degenerate) *degenerate = true;
    return stain::FrozenStainMap::identity(params_.beta);
  }
}

FeatureMatchResult FeatureMatchObjective::evaluate(std::span<const double> real_mean,
                                                   std::span<const std::vector<double>> synthetic) {
  FeatureMatchResult result;
  std::vector<stain::FrozenStainMap> maps;
  if (stain_norm_) {
    maps.reserve(synthetic.size());
    for (const auto& px : synthetic) {
      bool degenerate = false;
      maps.push_back(map_for(px, &degenerate));
      result.degenerate_count += degenerate ? 1 : 0;
    }
  }
  const int degenerate = result.degenerate_count;
  result = evaluate(real_mean, synthetic, maps);
  result.degenerate_count = degenerate;
  return result;
}

FeatureMatchResult FeatureMatchObjective::evaluate(std::span<const double> real_mean,
                                                   std::span<const std::vector<double>> synthetic,
                                                   std::span<const stain::FrozenStainMap> maps) {
  if (synthetic.empty()) throw Error(Errc::EmptyBag, "empty synthetic bag");
  const auto d = static_cast<std::size_t>(extractor_.embed_dim());
  if (real_mean.size() != d) throw Error(Errc::ShapeMismatch, "real mean embedding has wrong length");
  if (!extractor_.differentiable()) throw Error(Errc::UnsupportedExtractor, "extractor exposes no gradient path");
  const bool use_maps = !maps.empty();
  if (use_maps && maps.size() != synthetic.size()) throw Error(Errc::LengthMismatch, "one stain map per patch");

  const std::size_t n = synthetic.size();
  const std::size_t size = extractor_.input_size();
  while (tapes_.size() < n) tapes_.push_back(extractor_.make_tape());

  std::vector<std::vector<double>> od(use_maps ? n : 0), normalized(use_maps ? n : 0);
  Embedding mean(d, 0.0), e(d);
  for (std::size_t b = 0; b < n; ++b) {
    if (synthetic[b].size() != size) throw Error(Errc::ShapeMismatch, "synthetic patch size differs from extractor");
    std::span<const double> input = synthetic[b];
    if (use_maps) {
      od[b] = stain::od_planes(synthetic[b]);
      normalized[b].resize(size);
      maps[b].apply_od(synthetic[b], od[b], normalized[b]);
      input = normalized[b];
    }
    extractor_.embed_into(input, e, *tapes_[b]);
    for (std::size_t i = 0; i < d; ++i) mean[i] += e[i];
  }
  for (auto& v : mean) v /= static_cast<double>(n);

  FeatureMatchResult result;
  std::vector<double> cot(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = mean[i] - real_mean[i];
    result.loss += diff * diff;
    cot[i] = 2.0 * diff / static_cast<double>(n);
  }

  result.grads.resize(n);
  std::vector<double> g_norm(use_maps ? size : 0);
  for (std::size_t b = 0; b < n; ++b) {
    result.grads[b].resize(size);
    if (use_maps) {
      extractor_.pullback(*tapes_[b], cot, g_norm);
      maps[b].pullback_recorded(synthetic[b], od[b], normalized[b], g_norm, result.grads[b]);
    } else {
      extractor_.pullback(*tapes_[b], cot, result.grads[b]);
    }
  }
  return result;
}

const Embedding& RealFeatureCache::mean_for(const Slide& slide) {
  auto it = cache_.find(slide.id);
  if (it != cache_.end()) return it->second;
  if (slide.patches.empty()) throw Error(Errc::EmptyBag, "real slide " + slide.id + " has no patches");
  const auto d = static_cast<std::size_t>(extractor_.embed_dim());
  Embedding mean(d, 0.0), e(d);
  for (const auto& patch : slide.patches) {
    extractor_.check_input(patch);
    const PatchTensor& p = stain_norm_ ? stain::normalize(patch, target_, params_).patch : patch;
    const auto pixels = p.to_double();
    extractor_.embed(pixels, e);
    for (std::size_t i = 0; i < d; ++i) mean[i] += e[i];
  }
  for (auto& v : mean) v /= static_cast<double>(slide.patches.size());
  return cache_.emplace(slide.id, std::move(mean)).first->second;
}

Distiller::Distiller(const ClientDataset& client, const FeatureExtractor& extractor, DistillConfig cfg)
    : client_(client),
      extractor_(extractor),
      cfg_(std::move(cfg)),
      cache_(extractor, cfg_.stain_norm, cfg_.stain_target, cfg_.stain_params),
      objective_(extractor, cfg_.stain_norm, cfg_.stain_target, cfg_.stain_params),
      real_by_class_(static_cast<std::size_t>(std::max(client.num_classes, 0))) {
  cfg_.validate();
  for (std::size_t i = 0; i < client.train_slides.size(); ++i) {
    const int c = client.train_slides[i].label.index;
    if (c >= 0 && c < client.num_classes) real_by_class_[static_cast<std::size_t>(c)].push_back(i);
  }
  for (std::size_t c = 0; c < real_by_class_.size(); ++c) {
    if (real_by_class_[c].empty()) {
      std::clog << "warning: centre " << client.centre_id << " has no real slides of class " << c
                << "; its synthetic slides stay at initialisation\n";
    }
  }
}

void Distiller::step(Slide& slide, const std::vector<std::vector<double>>& grads, OptimizerState& state) {
  const double lr = cfg_.learning_rate;
  if (cfg_.optimizer == OptimizerKind::sgd) {
    for (std::size_t b = 0; b < slide.patches.size(); ++b) {
      auto& data = slide.patches[b].data;
      for (std::size_t i = 0; i < data.size(); ++i) {
        double v = static_cast<double>(data[i]) - lr * grads[b][i];
        if (cfg_.clamp) v = std::clamp(v, 0.0, 1.0);
        data[i] = static_cast<float>(v);
      }
    }
    return;
  }

  auto& st = state.slides[slide.id];
  std::size_t total = 0;
  for (const auto& p : slide.patches) total += p.size();
  if (st.first_moment.size() != total) {
    st.first_moment.assign(total, 0.0);
    st.second_moment.assign(total, 0.0);
    st.steps = 0;
  }
  ++st.steps;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.steps));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.steps));
  std::size_t k = 0;
  for (std::size_t b = 0; b < slide.patches.size(); ++b) {
    auto& data = slide.patches[b].data;
    const auto& g = grads[b];
    for (std::size_t i = 0; i < data.size(); ++i, ++k) {
      double& m = st.first_moment[k];
      double& v = st.second_moment[k];
      m = b1 * m + (1.0 - b1) * g[i];
      v = b2 * v + (1.0 - b2) * g[i] * g[i];
      double p = static_cast<double>(data[i]) - lr * (m / c1) / (std::sqrt(v / c2) + cfg_.adam_eps);
      if (cfg_.clamp) p = std::clamp(p, 0.0, 1.0);
      data[i] = static_cast<float>(p);
    }
  }
}

std::vector<TraceEntry> Distiller::round(SyntheticSet& synthetic, OptimizerState& state, RngStream& rng,
                                         int round_index) {
  std::vector<std::vector<std::size_t>> syn_by_class(real_by_class_.size());
  for (std::size_t i = 0; i < synthetic.slides.size(); ++i) {
    const int c = synthetic.slides[i].label.index;
    if (c >= 0 && c < client_.num_classes) syn_by_class[static_cast<std::size_t>(c)].push_back(i);
  }

  std::vector<TraceEntry> out;
  out.reserve(real_by_class_.size());
  for (std::size_t c = 0; c < real_by_class_.size(); ++c) {
    TraceEntry entry;
    entry.round = round_index;
    entry.class_index = static_cast<int>(c);
    const auto t0 = std::chrono::steady_clock::now();
    if (real_by_class_[c].empty() || syn_by_class[c].empty()) {
      entry.skipped = true;
      entry.loss = std::numeric_limits<double>::quiet_NaN();
      out.push_back(entry);
      continue;
    }
    const Slide& real = client_.train_slides[real_by_class_[c][rng.index(real_by_class_[c].size())]];
    Slide& syn = synthetic.slides[syn_by_class[c][rng.index(syn_by_class[c].size())]];

    const Embedding& real_mean = cache_.mean_for(real);
    std::vector<std::vector<double>> pixels;
    pixels.reserve(syn.patches.size());
    for (const auto& p : syn.patches) {
      extractor_.check_input(p);
      pixels.push_back(p.to_double());
    }
    auto result = objective_.evaluate(real_mean, pixels);
    step(syn, result.grads, state);

    entry.loss = result.loss;
    entry.degenerate_count = result.degenerate_count;
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(entry);
  }
  return out;
}

std::vector<TraceEntry> distill_round(const ClientDataset& client, SyntheticSet& synthetic,
                                      const FeatureExtractor& extractor, const DistillConfig& cfg,
                                      OptimizerState& state, RngStream& rng) {
  Distiller distiller(client, extractor, cfg);
  return distiller.round(synthetic, state, rng);
}

DistillOutput distill(const ClientDataset& client, const FeatureExtractor& extractor, const DistillConfig& cfg,
                      RngStream& rng) {
  cfg.validate();
  RngStream init_rng = rng.child("init");
  DistillOutput out{init_synthetic(client, cfg, init_rng), {}};
  Distiller distiller(client, extractor, cfg);
  OptimizerState state;
  out.trace.entries.reserve(static_cast<std::size_t>(cfg.rounds) * static_cast<std::size_t>(client.num_classes));
  for (int r = 0; r < cfg.rounds; ++r) {
    auto entries = distiller.round(out.synthetic, state, rng, r);
    out.trace.entries.insert(out.trace.entries.end(), entries.begin(), entries.end());
  }
  return out;
}

}  // namespace fedwsidd

#include "fedwsidd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <png.h>
#include <yaml-cpp/yaml.h>

#include "fedwsidd/stain.hpp"

namespace fs = std::filesystem;

namespace fedwsidd {

void ToyGenConfig::validate() const {
  if (num_centres < 1) throw Error(Errc::ConfigInvalid, "num_centres must be >= 1");
  if (num_classes < 2) throw Error(Errc::ConfigInvalid, "num_classes must be >= 2");
  if (slides_per_class_per_centre < 1) throw Error(Errc::ConfigInvalid, "slides_per_class_per_centre must be >= 1");
  if (patches_per_slide < 1) throw Error(Errc::ConfigInvalid, "patches_per_slide must be >= 1");
  if (patch_height < 4 || patch_width < 4) throw Error(Errc::ConfigInvalid, "patch size must be at least 4x4");
  if (!(stain_shift_strength >= 0.0)) throw Error(Errc::ConfigInvalid, "stain_shift_strength must be >= 0");
  if (!(tumor_patch_fraction > 0.0 && tumor_patch_fraction <= 1.0)) {
    throw Error(Errc::ConfigInvalid, "tumor_patch_fraction must lie in (0,1]");
  }
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw Error(Errc::ConfigInvalid, "test_fraction must lie in [0,1)");
  if (!(pixel_noise >= 0.0)) throw Error(Errc::ConfigInvalid, "pixel_noise must be >= 0");
  if (!stain_matrices.empty()) {
    if (static_cast<int>(stain_matrices.size()) != num_centres) {
      throw Error(Errc::ConfigInvalid, "need one stain matrix per centre");
    }
    for (const auto& m : stain_matrices) {
      for (int j = 0; j < 2; ++j) {
        if ((m.col(j).array() < 0.0).any() || std::abs(m.col(j).norm() - 1.0) > 1e-6) {
          throw Error(Errc::ConfigInvalid, "stain matrix columns must be unit and nonnegative");
        }
      }
    }
  }
}

namespace {
// weak enough that one centre's 16 training slides do not saturate accuracy
constexpr double kPresetClassSignal = 0.15;
}  // namespace

ToyGenConfig ca16_preset() {
  ToyGenConfig cfg;
  cfg.num_centres = 2;
  cfg.num_classes = 2;
  cfg.class_signal = kPresetClassSignal;
  cfg.pixel_noise = 0.0;
  return cfg;
}

ToyGenConfig ca17_preset() {
  ToyGenConfig cfg;
  cfg.num_centres = 5;
  cfg.num_classes = 2;
  cfg.class_signal = kPresetClassSignal;
  cfg.pixel_noise = 0.0;
  return cfg;
}

std::string centre_name(int k) { return "C" + std::to_string(k + 1); }

namespace {
constexpr double kMinStainSeparationDeg = 18.0;
}

CentreStain centre_stain(const ToyGenConfig& cfg, int centre) {
  CentreStain out;
  if (!cfg.stain_matrices.empty()) {
    out.vectors = cfg.stain_matrices.at(static_cast<std::size_t>(centre));
    return out;
  }
  const auto ref = stain::reference_basis().vectors;
  auto rng = derive_stream(cfg.seed, "toy/stain/" + centre_name(centre));
  // redraw shifts that leave the two stains nearly collinear or swap their red order
  for (;;) {
    for (int j = 0; j < 2; ++j) {
      Eigen::Vector3d delta(rng.normal(), rng.normal(), rng.normal());
      delta = 0.25 * delta.normalized();
      Eigen::Vector3d v = ref.col(j) + cfg.stain_shift_strength * delta;
      v = v.cwiseMax(0.02);
      out.vectors.col(j) = v.normalized();
    }
    if (stain::angular_distance_deg(out.vectors.col(0), out.vectors.col(1)) >= kMinStainSeparationDeg &&
        out.vectors(0, 0) > out.vectors(0, 1))
      break;
  }
  out.intensity = 1.0 + 0.2 * cfg.stain_shift_strength * rng.uniform(-1.0, 1.0);
  return out;
}

namespace {

// Soft-edged disc (one pixel ramp) composed by max.
void max_disc(std::vector<double>& map, int h, int w, double cy, double cx, double radius, double amp) {
  const int r = static_cast<int>(std::ceil(radius + 1.0));
  const int y0 = std::max(0, static_cast<int>(cy) - r), y1 = std::min(h - 1, static_cast<int>(cy) + r);
  const int x0 = std::max(0, static_cast<int>(cx) - r), x1 = std::min(w - 1, static_cast<int>(cx) + r);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
      double& v = map[static_cast<std::size_t>(y) * w + x];
      v = std::max(v, amp * std::clamp(radius + 0.5 - d, 0.0, 1.0));
    }
}

}  // namespace

ConcentrationField sample_field(const ToyGenConfig& cfg, double tumor_level, RngStream& rng) {
  const int h = cfg.patch_height, w = cfg.patch_width;
  const auto n = static_cast<std::size_t>(h) * w;
  ConcentrationField f{h, w, std::vector<double>(n, 0.04), std::vector<double>(n, 0.16)};
  const double scale = std::min(h, w) / 64.0;

  // stain layers are max-composed flat discs, so each patch's upper concentration
  // percentile sits on a plateau instead of tracking blob counts
  std::vector<double> cytoplasm(n, 0.0);
  const int blobs = 3 + static_cast<int>(rng.index(3));
  for (int i = 0; i < blobs; ++i) {
    max_disc(cytoplasm, h, w, rng.uniform(0, h), rng.uniform(0, w), rng.uniform(6, 14) * scale,
             rng.uniform(0.10, 0.12));
  }

  const double s = cfg.class_signal * tumor_level;
  const int base = 5 + static_cast<int>(rng.index(5));
  const int nuclei = static_cast<int>(std::lround(base * (1.0 + 1.2 * s)));
  std::vector<double> nuclear(n, 0.0);
  for (int i = 0; i < nuclei; ++i) {
    const double r = rng.uniform(2.0, 3.0) * (1.0 + 0.35 * s) * scale;
    max_disc(nuclear, h, w, rng.uniform(0, h), rng.uniform(0, w), r, rng.uniform(0.57, 0.63));
  }
  // nuclei displace cytoplasm, so nuclear cores are nearly pure hematoxylin;
  // cytoplasm discs carry no background hematoxylin, so pure eosin occurs too
  for (std::size_t k = 0; k < n; ++k) {
    f.hematoxylin[k] = f.hematoxylin[k] * std::clamp(1.0 - cytoplasm[k] / 0.1, 0.0, 1.0) + nuclear[k];
    f.eosin[k] = (f.eosin[k] + cytoplasm[k]) * std::exp(-3.0 * nuclear[k]);
  }

  // optional background hole at a random border location
  if (rng.uniform() < 0.5) {
    const double cy = rng.uniform() < 0.5 ? 0.0 : h - 1.0;
    const double cx = rng.uniform(0, w);
    const double radius = rng.uniform(10, 24) * scale;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
        const double mask = std::clamp((d - radius) / (3.0 * scale), 0.0, 1.0);
        const auto k = static_cast<std::size_t>(y) * w + x;
        f.hematoxylin[k] *= mask;
        f.eosin[k] *= mask;
      }
  }
  for (auto& v : f.hematoxylin) v = std::min(v, 1.0);
  for (auto& v : f.eosin) v = std::min(v, 1.0);
  return f;
}

PatchTensor render_patch(const ConcentrationField& field, const CentreStain& stain, double pixel_noise,
                         RngStream& rng) {
  PatchTensor p(3, field.height, field.width);
  const std::size_t n = p.plane();
  for (int c = 0; c < 3; ++c) {
    const double vh = stain.vectors(c, 0) * stain.intensity, ve = stain.vectors(c, 1) * stain.intensity;
    for (std::size_t i = 0; i < n; ++i) {
      const double od = vh * field.hematoxylin[i] + ve * field.eosin[i];
      double v = std::pow(10.0, -od);
      if (pixel_noise > 0.0) v += rng.normal(0.0, pixel_noise);
      p.data[static_cast<std::size_t>(c) * n + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return p;
}

std::vector<double> oracle_features(const ConcentrationField& field) {
  double h = 0.0, e = 0.0, cover = 0.0;
  for (std::size_t i = 0; i < field.hematoxylin.size(); ++i) {
    h += field.hematoxylin[i];
    e += field.eosin[i];
    cover += field.hematoxylin[i] > 0.3 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(field.hematoxylin.size());
  return {h / n, e / n, cover / n};
}

std::vector<ClientDataset> generate_toy_federation(const ToyGenConfig& cfg, std::vector<ToySlideRecord>* fields) {
  cfg.validate();
  std::vector<ClientDataset> out;
  for (int k = 0; k < cfg.num_centres; ++k) {
    const std::string centre = centre_name(k);
    const CentreStain stain = centre_stain(cfg, k);
    ClientDataset ds;
    ds.centre_id = centre;
    ds.num_classes = cfg.num_classes;
    int running = 0;
    for (int c = 0; c < cfg.num_classes; ++c) {
      const int n = cfg.slides_per_class_per_centre;
      std::vector<int> order(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      auto split_rng = derive_stream(cfg.seed, "toy/split/" + centre + "/" + std::to_string(c));
      split_rng.shuffle(order);
      const auto n_test = static_cast<int>(std::lround(cfg.test_fraction * n));
      std::vector<bool> is_test(static_cast<std::size_t>(n), false);
      for (int i = 0; i < n_test; ++i) is_test[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;

      for (int i = 0; i < n; ++i) {
        char id[64];
        std::snprintf(id, sizeof(id), "%s_s%03d", centre.c_str(), running++);
        Slide slide;
        slide.id = id;
        slide.centre_id = centre;
        slide.label = {c, c == 0 ? "normal" : (cfg.num_classes == 2 ? "tumor" : "tumor" + std::to_string(c))};
        slide.kind = SlideKind::real;

        auto rng = derive_stream(cfg.seed, "toy/slide/" + slide.id);
        std::vector<bool> tumor(static_cast<std::size_t>(cfg.patches_per_slide), false);
        if (c > 0) {
          const int n_tumor = std::max(1, static_cast<int>(std::lround(cfg.tumor_patch_fraction * cfg.patches_per_slide)));
          std::vector<int> idx(static_cast<std::size_t>(cfg.patches_per_slide));
          for (int t = 0; t < cfg.patches_per_slide; ++t) idx[static_cast<std::size_t>(t)] = t;
          rng.shuffle(idx);
          for (int t = 0; t < n_tumor; ++t) tumor[static_cast<std::size_t>(idx[static_cast<std::size_t>(t)])] = true;
        }
        ToySlideRecord record{slide.id, {}};
        for (int t = 0; t < cfg.patches_per_slide; ++t) {
          auto field = sample_field(cfg, tumor[static_cast<std::size_t>(t)] ? c : 0.0, rng);
          slide.patches.push_back(render_patch(field, stain, cfg.pixel_noise, rng));
          if (fields) record.fields.push_back(std::move(field));
        }
        if (fields) fields->push_back(std::move(record));
        (is_test[static_cast<std::size_t>(i)] ? ds.test_slides : ds.train_slides).push_back(std::move(slide));
      }
    }
    out.push_back(std::move(ds));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.centre_id < b.centre_id; });
  return out;
}

PatchTensor area_resize(const PatchTensor& patch, int height, int width) {
  if (height < 1 || width < 1) throw Error(Errc::ShapeMismatch, "target size must be positive");
  if (patch.height == height && patch.width == width) return patch;
  PatchTensor out(patch.channels, height, width);
  const double sy = static_cast<double>(patch.height) / height, sx = static_cast<double>(patch.width) / width;

  // overlap weights of each output cell with the source grid along one axis
  auto weights = [](int n_out, int n_in, double scale) {
    std::vector<std::vector<std::pair<int, double>>> w(static_cast<std::size_t>(n_out));
    for (int o = 0; o < n_out; ++o) {
      const double lo = o * scale, hi = (o + 1) * scale;
      for (int i = static_cast<int>(std::floor(lo)); i < std::min(n_in, static_cast<int>(std::ceil(hi))); ++i) {
        const double cover = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
        if (cover > 0.0) w[static_cast<std::size_t>(o)].emplace_back(i, cover / scale);
      }
    }
    return w;
  };
  const auto wy = weights(height, patch.height, sy);
  const auto wx = weights(width, patch.width, sx);
  for (int c = 0; c < patch.channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double acc = 0.0;
        for (const auto& [iy, fy] : wy[static_cast<std::size_t>(y)])
          for (const auto& [ix, fx] : wx[static_cast<std::size_t>(x)]) acc += fy * fx * patch.at(c, iy, ix);
        out.at(c, y, x) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  return out;
}

PatchTensor read_png(const std::string& path) {
  if (!fs::exists(path)) throw Error(Errc::MissingFile, "patch file not found: " + path);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw Error(Errc::UndecodableImage, path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(Errc::UndecodableImage, path + ": " + msg);
  }
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  PatchTensor p(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        p.at(c, y, x) = static_cast<float>(buffer[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0);
      }
  return p;
}

void write_png(const PatchTensor& patch, const std::string& path) {
  if (patch.channels != 3) throw Error(Errc::ShapeMismatch, "PNG export needs 3 channels");
  std::vector<png_byte> buffer(patch.size());
  for (int y = 0; y < patch.height; ++y)
    for (int x = 0; x < patch.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(patch.at(c, y, x)), 0.0, 1.0);
        buffer[(static_cast<std::size_t>(y) * patch.width + x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(patch.width);
  image.height = static_cast<png_uint_32>(patch.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw Error(Errc::Io, "cannot write " + path + ": " + image.message);
  }
}

namespace {

std::string where(const std::string& file, const YAML::Node& node) {
  const auto mark = node.Mark();
  return file + ":" + std::to_string(mark.line + 1);
}

template <typename T>
T field_as(const YAML::Node& parent, const char* key, const std::string& file) {
  const auto node = parent[key];
  if (!node) throw Error(Errc::ManifestSchema, where(file, parent) + ": missing field '" + key + "'");
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw Error(Errc::ManifestSchema, where(file, node) + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace

ClientDataset ingest_patch_directory(const std::string& root, const std::string& manifest_path, int patch_height,
                                     int patch_width) {
  if (!fs::exists(manifest_path)) throw Error(Errc::MissingFile, "manifest not found: " + manifest_path);
  YAML::Node doc;
  try {
    doc = YAML::LoadFile(manifest_path);
  } catch (const YAML::ParserException& e) {
    throw Error(Errc::ManifestSchema, manifest_path + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  if (!doc.IsMap()) throw Error(Errc::ManifestSchema, manifest_path + ":1: manifest must be a mapping");
  if (field_as<int>(doc, "schema", manifest_path) != 1) {
    throw Error(Errc::ManifestSchema, where(manifest_path, doc["schema"]) + ": unsupported schema version");
  }
  ClientDataset ds;
  ds.centre_id = field_as<std::string>(doc, "centre", manifest_path);
  ds.num_classes = field_as<int>(doc, "num_classes", manifest_path);
  if (ds.num_classes < 1) throw Error(Errc::ManifestSchema, where(manifest_path, doc["num_classes"]) + ": num_classes < 1");
  std::vector<std::string> names;
  if (doc["class_names"]) names = field_as<std::vector<std::string>>(doc, "class_names", manifest_path);

  const auto slides = doc["slides"];
  if (!slides || !slides.IsSequence()) {
    throw Error(Errc::ManifestSchema, where(manifest_path, doc) + ": 'slides' must be a list");
  }
  std::set<std::string> seen;
  for (const auto& node : slides) {
    Slide s;
    s.id = field_as<std::string>(node, "id", manifest_path);
    if (!seen.insert(s.id).second) {
      throw Error(Errc::ManifestSchema, where(manifest_path, node) + ": duplicate slide id " + s.id);
    }
    s.centre_id = node["centre"] ? field_as<std::string>(node, "centre", manifest_path) : ds.centre_id;
    s.label.index = field_as<int>(node, "label", manifest_path);
    if (s.label.index < 0 || s.label.index >= ds.num_classes) {
      throw Error(Errc::ManifestSchema, where(manifest_path, node["label"]) + ": label out of range for slide " + s.id);
    }
    s.label.name = static_cast<std::size_t>(s.label.index) < names.size() ? names[static_cast<std::size_t>(s.label.index)]
                                                                           : "class" + std::to_string(s.label.index);
    const auto split = field_as<std::string>(node, "split", manifest_path);
    if (split != "train" && split != "test") {
      throw Error(Errc::ManifestSchema, where(manifest_path, node["split"]) + ": split must be train or test");
    }
    const auto files = field_as<std::vector<std::string>>(node, "patches", manifest_path);
    if (files.empty()) throw Error(Errc::ManifestSchema, where(manifest_path, node) + ": slide " + s.id + " lists no patches");
    for (const auto& f : files) {
      const std::string path = (fs::path(root) / f).string();
      s.patches.push_back(area_resize(read_png(path), patch_height, patch_width));
    }
    (split == "train" ? ds.train_slides : ds.test_slides).push_back(std::move(s));
  }
  const auto violations = validate_client_dataset(ds);
  if (!violations.empty()) throw Error(Errc::ManifestSchema, manifest_path + ": " + violations.front());
  return ds;
}

std::string export_patch_directory(const ClientDataset& dataset, const std::string& root) {
  fs::create_directories(root);
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "schema" << YAML::Value << 1;
  out << YAML::Key << "centre" << YAML::Value << dataset.centre_id;
  out << YAML::Key << "num_classes" << YAML::Value << dataset.num_classes;
  std::vector<std::string> names(static_cast<std::size_t>(dataset.num_classes));
  for (int c = 0; c < dataset.num_classes; ++c) names[static_cast<std::size_t>(c)] = "class" + std::to_string(c);
  for (const auto* split : {&dataset.train_slides, &dataset.test_slides})
    for (const auto& s : *split)
      if (!s.label.name.empty()) names[static_cast<std::size_t>(s.label.index)] = s.label.name;
  out << YAML::Key << "class_names" << YAML::Value << YAML::Flow << names;
  out << YAML::Key << "slides" << YAML::Value << YAML::BeginSeq;
  auto emit = [&](const Slide& s, const char* split) {
    fs::create_directories(fs::path(root) / s.id);
    std::vector<std::string> files;
    for (std::size_t t = 0; t < s.patches.size(); ++t) {
      char name[32];
      std::snprintf(name, sizeof(name), "p%03zu.png", t);
      const std::string rel = s.id + "/" + name;
      write_png(s.patches[t], (fs::path(root) / rel).string());
      files.push_back(rel);
    }
    out << YAML::BeginMap;
    out << YAML::Key << "id" << YAML::Value << s.id;
    out << YAML::Key << "label" << YAML::Value << s.label.index;
    out << YAML::Key << "split" << YAML::Value << split;
    out << YAML::Key << "patches" << YAML::Value << YAML::Flow << files;
    out << YAML::EndMap;
  };
  for (const auto& s : dataset.train_slides) emit(s, "train");
  for (const auto& s : dataset.test_slides) emit(s, "test");
  out << YAML::EndSeq << YAML::EndMap;

  const std::string path = (fs::path(root) / "manifest.yaml").string();
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(Errc::Io, "cannot write " + path);
  f << out.c_str() << '\n';
  return path;
}

std::vector<NamedTensor> slides_to_tensors(const std::vector<Slide>& slides) {
  std::vector<NamedTensor> out;
  out.reserve(slides.size());
  for (const auto& s : slides) {
    if (s.patches.empty()) throw Error(Errc::EmptyBag, "slide " + s.id + " has no patches");
    for (const auto& field : {s.centre_id, s.id, s.label.name}) {
      if (field.find('|') != std::string::npos) throw Error(Errc::ConfigInvalid, "'|' is reserved in slide metadata");
    }
    const auto& p0 = s.patches.front();
    NamedTensor t;
    t.name = std::string(s.kind == SlideKind::synthetic ? "synthetic" : "real") + "|" + s.centre_id + "|" + s.id + "|" +
             std::to_string(s.label.index) + "|" + s.label.name;
    t.shape = {s.patches.size(), static_cast<std::uint64_t>(p0.channels), static_cast<std::uint64_t>(p0.height),
               static_cast<std::uint64_t>(p0.width)};
    t.data.reserve(s.patches.size() * p0.size());
    for (const auto& p : s.patches) {
      if (!p.same_shape(p0)) throw Error(Errc::ShapeMismatch, "slide " + s.id + " mixes patch shapes");
      t.data.insert(t.data.end(), p.data.begin(), p.data.end());
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Slide> slides_from_tensors(const std::vector<NamedTensor>& tensors) {
  std::vector<Slide> out;
  for (const auto& t : tensors) {
    std::vector<std::string> parts;
    std::stringstream ss(t.name);
    for (std::string part; std::getline(ss, part, '|');) parts.push_back(part);
    if (t.name.back() == '|') parts.emplace_back();
    if (parts.size() != 5 || (parts[0] != "real" && parts[0] != "synthetic") || t.shape.size() != 4) {
      throw Error(Errc::ManifestSchema, "archive entry '" + t.name + "' is not a slide");
    }
    Slide s;
    s.kind = parts[0] == "synthetic" ? SlideKind::synthetic : SlideKind::real;
    s.centre_id = parts[1];
    s.id = parts[2];
    try {
      s.label.index = std::stoi(parts[3]);
    } catch (const std::exception&) {
      throw Error(Errc::ManifestSchema, "archive entry '" + t.name + "' has a bad label");
    }
    s.label.name = parts[4];
    const auto c = static_cast<int>(t.shape[1]), h = static_cast<int>(t.shape[2]), w = static_cast<int>(t.shape[3]);
    const std::size_t per = static_cast<std::size_t>(c) * h * w;
    for (std::uint64_t i = 0; i < t.shape[0]; ++i) {
      PatchTensor p(c, h, w);
      std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(i * per), per, p.data.begin());
      s.patches.push_back(std::move(p));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<NamedTensor> synthetic_to_tensors(const SyntheticSet& set) { return slides_to_tensors(set.slides); }

SyntheticSet synthetic_from_tensors(const std::vector<NamedTensor>& tensors) {
  SyntheticSet set;
  set.slides = slides_from_tensors(tensors);
  if (set.slides.empty()) return set;
  set.centre_id = set.slides.front().centre_id;
  set.patches_per_slide = static_cast<int>(set.slides.front().patches.size());
  std::map<int, int> per_class;
  for (const auto& s : set.slides) {
    if (s.kind != SlideKind::synthetic) throw Error(Errc::ManifestSchema, "slide " + s.id + " is not synthetic");
    if (s.centre_id != set.centre_id) set.centre_id.clear();
    ++per_class[s.label.index];
  }
  set.slides_per_class = per_class.begin()->second;
  return set;
}

}  // namespace fedwsidd

#include "fedwsidd/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace fedwsidd::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& what) {
  throw Error(Errc::ConfigInvalid, "key '" + key + "': cannot parse '" + value + "' as " + what);
}

long long parse_integer(const std::string& key, const std::string& value) {
  long long v = 0;
  const std::string t = trim(value);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size()) bad_value(key, value, "an integer");
  return v;
}

int parse_int(const std::string& key, const std::string& value) {
  return static_cast<int>(parse_integer(key, value));
}

double parse_double(const std::string& key, const std::string& value) {
  double v = 0.0;
  const std::string t = trim(value);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(v)) bad_value(key, value, "a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  std::string t = trim(value);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "on" || t == "true" || t == "yes" || t == "1") return true;
  if (t == "off" || t == "false" || t == "no" || t == "0") return false;
  bad_value(key, value, "on/off");
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt_bool(bool v) { return v ? "on" : "off"; }

template <typename T, typename F>
std::string join(const std::vector<T>& values, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += f(values[i]);
  }
  return out;
}

// every MIL spec shares the homogeneous spec's dimensions
void sync_specs(RunConfig& c) {
  c.fed.homogeneous_spec.num_classes = c.toy.num_classes;
  c.fed.homogeneous_spec.input_dim = c.fed.extractor.embed_dim;
  for (auto& s : c.fed.pool) {
    const MilKind kind = s.name;
    s = c.fed.homogeneous_spec;
    s.name = kind;
  }
}

struct KeyDef {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = [] {
    std::vector<KeyDef> d;
    auto add = [&](std::string name, auto set, auto get) { d.push_back({std::move(name), set, get}); };
    // toy data
    add(
        "preset",
        [](RunConfig& c, const std::string& v) {
          const std::string p = trim(v);
          if (p == "ca16")
            c.toy = ca16_preset();
          else if (p == "ca17")
            c.toy = ca17_preset();
          else if (!p.empty())
            bad_value("preset", v, "ca16 or ca17");
          c.preset = p;
        },
        [](const RunConfig& c) { return c.preset; });
    add(
        "num_centres", [](RunConfig& c, const std::string& v) { c.toy.num_centres = parse_int("num_centres", v); },
        [](const RunConfig& c) { return std::to_string(c.toy.num_centres); });
    add(
        "num_classes",
        [](RunConfig& c, const std::string& v) {
          c.toy.num_classes = parse_int("num_classes", v);
          sync_specs(c);
        },
        [](const RunConfig& c) { return std::to_string(c.toy.num_classes); });
    add(
        "slides_per_class_per_centre",
        [](RunConfig& c, const std::string& v) {
          c.toy.slides_per_class_per_centre = parse_int("slides_per_class_per_centre", v);
        },
        [](const RunConfig& c) { return std::to_string(c.toy.slides_per_class_per_centre); });
    add(
        "T", [](RunConfig& c, const std::string& v) { c.toy.patches_per_slide = parse_int("T", v); },
        [](const RunConfig& c) { return std::to_string(c.toy.patches_per_slide); });
    add(
        "patch_size",
        [](RunConfig& c, const std::string& v) {
          const auto parts = split(v, 'x');
          if (parts.empty() || parts.size() > 2) bad_value("patch_size", v, "N or HxW");
          const int h = parse_int("patch_size", parts[0]);
          const int w = parts.size() == 2 ? parse_int("patch_size", parts[1]) : h;
          c.toy.patch_height = c.fed.distill_cfg.patch_height = c.fed.extractor.input_height = h;
          c.toy.patch_width = c.fed.distill_cfg.patch_width = c.fed.extractor.input_width = w;
        },
        [](const RunConfig& c) {
          return std::to_string(c.toy.patch_height) + "x" + std::to_string(c.toy.patch_width);
        });
    add(
        "stain_shift_strength",
        [](RunConfig& c, const std::string& v) {
          c.toy.stain_shift_strength = parse_double("stain_shift_strength", v);
        },
        [](const RunConfig& c) { return fmt_double(c.toy.stain_shift_strength); });
    add(
        "class_signal", [](RunConfig& c, const std::string& v) { c.toy.class_signal = parse_double("class_signal", v); },
        [](const RunConfig& c) { return fmt_double(c.toy.class_signal); });
    add(
        "tumor_patch_fraction",
        [](RunConfig& c, const std::string& v) {
          c.toy.tumor_patch_fraction = parse_double("tumor_patch_fraction", v);
        },
        [](const RunConfig& c) { return fmt_double(c.toy.tumor_patch_fraction); });
    add(
        "test_fraction",
        [](RunConfig& c, const std::string& v) { c.toy.test_fraction = parse_double("test_fraction", v); },
        [](const RunConfig& c) { return fmt_double(c.toy.test_fraction); });
    add(
        "pixel_noise", [](RunConfig& c, const std::string& v) { c.toy.pixel_noise = parse_double("pixel_noise", v); },
        [](const RunConfig& c) { return fmt_double(c.toy.pixel_noise); });
    add(
        "data_seed",
        [](RunConfig& c, const std::string& v) {
          c.toy.seed = static_cast<std::uint64_t>(parse_integer("data_seed", v));
        },
        [](const RunConfig& c) { return std::to_string(c.toy.seed); });
    // distillation
    add(
        "rounds", [](RunConfig& c, const std::string& v) { c.fed.distill_cfg.rounds = parse_int("rounds", v); },
        [](const RunConfig& c) { return std::to_string(c.fed.distill_cfg.rounds); });
    add(
        "learning_rate",
        [](RunConfig& c, const std::string& v) {
          c.fed.distill_cfg.learning_rate = parse_double("learning_rate", v);
        },
        [](const RunConfig& c) { return fmt_double(c.fed.distill_cfg.learning_rate); });
    add(
        "M", [](RunConfig& c, const std::string& v) { c.fed.distill_cfg.slides_per_class = parse_int("M", v); },
        [](const RunConfig& c) { return std::to_string(c.fed.distill_cfg.slides_per_class); });
    add(
        "B", [](RunConfig& c, const std::string& v) { c.fed.distill_cfg.patches_per_slide = parse_int("B", v); },
        [](const RunConfig& c) { return std::to_string(c.fed.distill_cfg.patches_per_slide); });
    add(
        "optimizer",
        [](RunConfig& c, const std::string& v) {
          const std::string t = trim(v);
          if (t == "adam")
            c.fed.distill_cfg.optimizer = OptimizerKind::adam;
          else if (t == "sgd")
            c.fed.distill_cfg.optimizer = OptimizerKind::sgd;
          else
            bad_value("optimizer", v, "adam or sgd");
        },
        [](const RunConfig& c) {
          return std::string(c.fed.distill_cfg.optimizer == OptimizerKind::adam ? "adam" : "sgd");
        });
    add(
        "stain_norm",
        [](RunConfig& c, const std::string& v) { c.fed.distill_cfg.stain_norm = parse_bool("stain_norm", v); },
        [](const RunConfig& c) { return fmt_bool(c.fed.distill_cfg.stain_norm); });
    add(
        "init",
        [](RunConfig& c, const std::string& v) {
          const std::string t = trim(v);
          if (t == "random")
            c.fed.distill_cfg.init = InitMode::random;
          else if (t == "real_sample")
            c.fed.distill_cfg.init = InitMode::real_sample;
          else
            bad_value("init", v, "random or real_sample");
        },
        [](const RunConfig& c) {
          return std::string(c.fed.distill_cfg.init == InitMode::random ? "random" : "real_sample");
        });
    add(
        "clamp", [](RunConfig& c, const std::string& v) { c.fed.distill_cfg.clamp = parse_bool("clamp", v); },
        [](const RunConfig& c) { return fmt_bool(c.fed.distill_cfg.clamp); });
    add(
        "distill_seed",
        [](RunConfig& c, const std::string& v) {
          c.distill_seed = static_cast<std::uint64_t>(parse_integer("distill_seed", v));
        },
        [](const RunConfig& c) { return std::to_string(c.distill_seed); });
    // MIL
    add(
        "model",
        [](RunConfig& c, const std::string& v) {
          c.fed.homogeneous_spec.name = parse_mil_kind(trim(v));
          sync_specs(c);
        },
        [](const RunConfig& c) { return std::string(mil_kind_name(c.fed.homogeneous_spec.name)); });
    add(
        "pool",
        [](RunConfig& c, const std::string& v) {
          c.fed.pool.clear();
          for (const auto& name : split(v, ',')) {
            MilSpec s = c.fed.homogeneous_spec;
            s.name = parse_mil_kind(name);
            c.fed.pool.push_back(s);
          }
        },
        [](const RunConfig& c) {
          return join(c.fed.pool, [](const MilSpec& s) { return std::string(mil_kind_name(s.name)); });
        });
    add(
        "hidden_dim",
        [](RunConfig& c, const std::string& v) {
          c.fed.homogeneous_spec.hidden_dim = parse_int("hidden_dim", v);
          sync_specs(c);
        },
        [](const RunConfig& c) { return std::to_string(c.fed.homogeneous_spec.hidden_dim); });
    add(
        "attention_dim",
        [](RunConfig& c, const std::string& v) {
          c.fed.homogeneous_spec.attention_dim = parse_int("attention_dim", v);
          sync_specs(c);
        },
        [](const RunConfig& c) { return std::to_string(c.fed.homogeneous_spec.attention_dim); });
    add(
        "clam_instance_k",
        [](RunConfig& c, const std::string& v) {
          c.fed.homogeneous_spec.clam_instance_k = parse_int("clam_instance_k", v);
          sync_specs(c);
        },
        [](const RunConfig& c) { return std::to_string(c.fed.homogeneous_spec.clam_instance_k); });
    add(
        "clam_instance_weight",
        [](RunConfig& c, const std::string& v) {
          c.fed.homogeneous_spec.clam_instance_weight = parse_double("clam_instance_weight", v);
          sync_specs(c);
        },
        [](const RunConfig& c) { return fmt_double(c.fed.homogeneous_spec.clam_instance_weight); });
    add(
        "epochs", [](RunConfig& c, const std::string& v) { c.fed.train_cfg.epochs = parse_int("epochs", v); },
        [](const RunConfig& c) { return std::to_string(c.fed.train_cfg.epochs); });
    add(
        "mil_learning_rate",
        [](RunConfig& c, const std::string& v) {
          c.fed.train_cfg.learning_rate = parse_double("mil_learning_rate", v);
        },
        [](const RunConfig& c) { return fmt_double(c.fed.train_cfg.learning_rate); });
    // federation
    add(
        "mode", [](RunConfig& c, const std::string& v) { c.fed.mode = parse_mode(trim(v)); },
        [](const RunConfig& c) { return std::string(mode_name(c.fed.mode)); });
    add(
        "seeds",
        [](RunConfig& c, const std::string& v) {
          c.fed.seeds.clear();
          for (const auto& s : split(v, ',')) c.fed.seeds.push_back(static_cast<std::uint64_t>(parse_integer("seeds", s)));
        },
        [](const RunConfig& c) { return join(c.fed.seeds, [](std::uint64_t s) { return std::to_string(s); }); });
    add(
        "include_own_synthetic",
        [](RunConfig& c, const std::string& v) {
          c.fed.include_own_synthetic = parse_bool("include_own_synthetic", v);
        },
        [](const RunConfig& c) { return fmt_bool(c.fed.include_own_synthetic); });
    add(
        "extractor",
        [](RunConfig& c, const std::string& v) {
          const std::string t = trim(v);
          if (t == "small_conv")
            c.fed.extractor.name = ExtractorKind::small_conv;
          else if (t == "external")
            c.fed.extractor.name = ExtractorKind::external;
          else
            bad_value("extractor", v, "small_conv or external");
        },
        [](const RunConfig& c) {
          return std::string(c.fed.extractor.name == ExtractorKind::small_conv ? "small_conv" : "external");
        });
    add(
        "extractor_weights",
        [](RunConfig& c, const std::string& v) {
          const std::string t = trim(v);
          if (t.empty())
            c.fed.extractor.weights_ref.reset();
          else
            c.fed.extractor.weights_ref = t;
        },
        [](const RunConfig& c) { return c.fed.extractor.weights_ref.value_or(""); });
    add(
        "extractor_seed",
        [](RunConfig& c, const std::string& v) {
          c.fed.extractor_seed = static_cast<std::uint64_t>(parse_integer("extractor_seed", v));
        },
        [](const RunConfig& c) { return std::to_string(c.fed.extractor_seed); });
    add(
        "embed_dim",
        [](RunConfig& c, const std::string& v) {
          c.fed.extractor.embed_dim = parse_int("embed_dim", v);
          sync_specs(c);
        },
        [](const RunConfig& c) { return std::to_string(c.fed.extractor.embed_dim); });
    add(
        "jobs", [](RunConfig& c, const std::string& v) { c.fed.jobs = parse_int("jobs", v); },
        [](const RunConfig& c) { return std::to_string(c.fed.jobs); });
    // ablation grid
    add(
        "grid_M",
        [](RunConfig& c, const std::string& v) {
          c.grid_m.clear();
          for (const auto& s : split(v, ',')) c.grid_m.push_back(parse_int("grid_M", s));
        },
        [](const RunConfig& c) { return join(c.grid_m, [](int x) { return std::to_string(x); }); });
    add(
        "grid_B",
        [](RunConfig& c, const std::string& v) {
          c.grid_b.clear();
          for (const auto& s : split(v, ',')) c.grid_b.push_back(parse_int("grid_B", s));
        },
        [](const RunConfig& c) { return join(c.grid_b, [](int x) { return std::to_string(x); }); });
    add(
        "grid_stain_norm",
        [](RunConfig& c, const std::string& v) {
          c.grid_stain_norm.clear();
          for (const auto& s : split(v, ',')) c.grid_stain_norm.push_back(parse_bool("grid_stain_norm", s));
        },
        [](const RunConfig& c) { return join(c.grid_stain_norm, [](bool b) { return fmt_bool(b); }); });
    return d;
  }();
  return defs;
}

const KeyDef& key_def(const std::string& key) {
  for (const auto& d : key_defs())
    if (d.name == key) return d;
  throw Error(Errc::ConfigInvalid, "unknown config key '" + key + "'");
}

}  // namespace

RunConfig::RunConfig() {
  for (auto kind : {MilKind::abmil, MilKind::clam_lite, MilKind::mean_pool}) {
    MilSpec s;
    s.name = kind;
    fed.pool.push_back(s);
  }
  sync_specs(*this);
}

void RunConfig::set(const std::string& key, const std::string& value) { key_def(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return key_def(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& d : key_defs()) out.push_back(d.name);
    return out;
  }();
  return names;
}

std::vector<std::pair<std::string, std::string>> RunConfig::snapshot() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& d : key_defs()) out.emplace_back(d.name, d.get(*this));
  return out;
}

void RunConfig::validate() const {
  toy.validate();
  fed.validate();
  for (int m : grid_m)
    if (m < 1) throw Error(Errc::ConfigInvalid, "grid_M entries must be >= 1");
  for (int b : grid_b)
    if (b < 1) throw Error(Errc::ConfigInvalid, "grid_B entries must be >= 1");
}

RunConfig load_config(const std::optional<std::string>& path,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  if (path) {
    if (!fs::exists(*path)) throw Error(Errc::ConfigInvalid, "config file not found: " + *path);
    YAML::Node root;
    try {
      root = YAML::LoadFile(*path);
    } catch (const YAML::Exception& e) {
      throw Error(Errc::ConfigInvalid, *path + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    if (!root.IsMap()) throw Error(Errc::ConfigInvalid, *path + ": top level must be a mapping of flat keys");
    auto scalar = [&](const YAML::Node& key, const YAML::Node& value) {
      const std::string where = *path + ":" + std::to_string(value.Mark().line + 1);
      if (value.IsScalar()) return value.as<std::string>();
      if (value.IsSequence()) {
        std::string out;
        for (std::size_t i = 0; i < value.size(); ++i) {
          if (!value[i].IsScalar()) throw Error(Errc::ConfigInvalid, where + ": nested lists are not supported");
          if (i) out += ",";
          out += value[i].as<std::string>();
        }
        return out;
      }
      if (value.IsNull()) return std::string();
      throw Error(Errc::ConfigInvalid, where + ": key '" + key.as<std::string>() + "' must be a scalar or list");
    };
    // the preset resets the toy block, so it goes first
    if (root["preset"]) cfg.set("preset", scalar(YAML::Node("preset"), root["preset"]));
    for (const auto& kv : root) {
      const std::string key = kv.first.as<std::string>();
      if (key == "preset") continue;
      try {
        cfg.set(key, scalar(kv.first, kv.second));
      } catch (const Error& e) {
        const std::string what = e.what();
        throw Error(Errc::ConfigInvalid, *path + ":" + std::to_string(kv.first.Mark().line + 1) + ": " +
                                             what.substr(what.find(": ") + 2));
      }
    }
  }
  for (const auto& [key, value] : overrides) {
    if (key == "preset") cfg.set(key, value);
  }
  for (const auto& [key, value] : overrides) {
    if (key != "preset") cfg.set(key, value);
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// tables

namespace {

std::string pad(const std::string& s, std::size_t width) {
  // "±" is two bytes but one column
  std::size_t cols = 0;
  for (unsigned char c : s) cols += (c & 0xC0) != 0x80;
  return s + std::string(width > cols ? width - cols : 0, ' ');
}

std::size_t display_width(const std::string& s) {
  std::size_t cols = 0;
  for (unsigned char c : s) cols += (c & 0xC0) != 0x80;
  return cols;
}

}  // namespace

std::string ResultTable::format() const {
  std::vector<std::vector<std::string>> grid;
  grid.push_back({"Centre"});
  for (const auto& c : columns) grid.back().push_back(c);
  for (const auto& r : rows) {
    std::vector<std::string> line{r};
    for (const auto& c : columns) {
      auto it = cells.find(r);
      if (it == cells.end() || !it->second.count(c))
        line.push_back("-");
      else
        line.push_back(format_percent(it->second.at(c)));
    }
    grid.push_back(std::move(line));
  }
  if (!p_values.empty()) {
    std::vector<std::string> line{"p-value"};
    for (const auto& c : columns) {
      auto it = p_values.find(c);
      if (it == p_values.end()) {
        line.push_back("-");
      } else {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", it->second);
        line.push_back(buf);
      }
    }
    grid.push_back(std::move(line));
  }
  std::vector<std::size_t> width(columns.size() + 1, 0);
  for (const auto& line : grid)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], display_width(line[i]));
  std::ostringstream os;
  for (std::size_t l = 0; l < grid.size(); ++l) {
    os << "|";
    for (std::size_t i = 0; i < grid[l].size(); ++i) os << " " << pad(grid[l][i], width[i]) << " |";
    os << "\n";
    if (l == 0) {
      os << "|";
      for (auto w : width) os << std::string(w + 2, '-') << "|";
      os << "\n";
    }
  }
  return os.str();
}

ResultTable ResultTable::parse(const std::string& text) {
  ResultTable t;
  std::istringstream is(text);
  std::string line;
  bool header = true;
  auto cells_of = [](const std::string& l) {
    std::vector<std::string> out;
    std::string cur;
    for (std::size_t i = 1; i < l.size(); ++i) {
      if (l[i] == '|') {
        out.push_back(trim(cur));
        cur.clear();
      } else {
        cur += l[i];
      }
    }
    return out;
  };
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] != '|') continue;
    if (line.find_first_not_of("|-") == std::string::npos) continue;
    auto parts = cells_of(line);
    if (parts.empty()) continue;
    if (header) {
      t.columns.assign(parts.begin() + 1, parts.end());
      header = false;
      continue;
    }
    if (parts.size() != t.columns.size() + 1) throw Error(Errc::ConfigInvalid, "table row has wrong arity: " + line);
    const std::string row = parts[0];
    if (row == "p-value") {
      for (std::size_t i = 1; i < parts.size(); ++i)
        if (parts[i] != "-") t.p_values[t.columns[i - 1]] = std::stod(parts[i]);
      continue;
    }
    t.rows.push_back(row);
    for (std::size_t i = 1; i < parts.size(); ++i) {
      if (parts[i] == "-") continue;
      const auto pm = parts[i].find("±");
      if (pm == std::string::npos) throw Error(Errc::ConfigInvalid, "cell is not 'mean ± std': " + parts[i]);
      MeanStd v;
      v.mean = std::stod(parts[i].substr(0, pm)) / 100.0;
      v.std = std::stod(parts[i].substr(pm + std::string("±").size())) / 100.0;
      t.cells[row][t.columns[i - 1]] = v;
    }
  }
  return t;
}

ResultTable table_from_reports(const std::vector<std::pair<std::string, FederationReport>>& reports) {
  ResultTable t;
  for (const auto& [name, rep] : reports) {
    t.columns.push_back(name);
    for (const auto& c : rep.centres) {
      if (std::find(t.rows.begin(), t.rows.end(), c) == t.rows.end()) t.rows.push_back(c);
      auto it = rep.summary.per_centre.find(c);
      if (it != rep.summary.per_centre.end()) t.cells[c][name] = it->second;
    }
    t.cells["Avg"][name] = rep.summary.global;
  }
  t.rows.push_back("Avg");
  return t;
}

// ---------------------------------------------------------------------------
// plots

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v, int prec = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

struct Frame {
  double w = 520, h = 340, left = 60, right = 140, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  double px(double x) const { return left + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * (w - left - right); }
  double py(double y) const { return h - bottom - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) * (h - top - bottom); }
};

void y_range(const std::vector<PlotSeries>& series, Frame& f) {
  double lo = 1e300, hi = -1e300;
  for (const auto& s : series)
    for (double y : s.y) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  if (lo > hi) lo = 0, hi = 1;
  const double padding = std::max(0.02, 0.1 * (hi - lo));
  f.y0 = std::max(0.0, lo - padding);
  f.y1 = std::min(1.0, hi + padding);
  if (f.y1 <= f.y0) f.y1 = f.y0 + 0.1;
}

void svg_open(std::ostringstream& os, const Frame& f, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.w << "\" height=\"" << f.h << "\" viewBox=\"0 0 "
     << f.w << " " << f.h << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << f.w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << xml_escape(title)
     << "</text>\n";
}

void y_axis(std::ostringstream& os, const Frame& f, const std::string& label) {
  os << "<line x1=\"" << f.left << "\" y1=\"" << f.top << "\" x2=\"" << f.left << "\" y2=\"" << f.h - f.bottom
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<line x1=\"" << f.left - 4 << "\" y1=\"" << f.py(v) << "\" x2=\"" << f.left << "\" y2=\"" << f.py(v)
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << f.left - 6 << "\" y=\"" << f.py(v) + 4 << "\" text-anchor=\"end\">" << num(100 * v, 1)
       << "</text>\n";
  }
  os << "<text x=\"14\" y=\"" << (f.top + f.h - f.bottom) / 2 << "\" transform=\"rotate(-90 14 "
     << (f.top + f.h - f.bottom) / 2 << ")\" text-anchor=\"middle\">" << xml_escape(label) << "</text>\n";
}

void legend(std::ostringstream& os, const Frame& f, const std::vector<PlotSeries>& series) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = f.top + 14.0 * i;
    os << "<rect x=\"" << f.w - f.right + 12 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\""
       << kPalette[i % 6] << "\"/>\n";
    os << "<text x=\"" << f.w - f.right + 26 << "\" y=\"" << y + 9 << "\">" << xml_escape(series[i].name)
       << "</text>\n";
  }
}

void data_comment(std::ostringstream& os, const std::vector<PlotSeries>& series, const std::string& x_name) {
  os << "<!-- data\nseries," << x_name << ",y\n";
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) os << s.name << "," << fmt_double(s.x[i]) << "," << fmt_double(s.y[i]) << "\n";
  os << "-->\n";
}

}  // namespace

std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series) {
  Frame f;
  std::vector<double> xs;
  for (const auto& s : series) xs.insert(xs.end(), s.x.begin(), s.x.end());
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  if (!xs.empty()) f.x0 = xs.front(), f.x1 = xs.back();
  y_range(series, f);
  std::ostringstream os;
  svg_open(os, f, title);
  data_comment(os, series, x_label);
  y_axis(os, f, y_label);
  os << "<line x1=\"" << f.left << "\" y1=\"" << f.h - f.bottom << "\" x2=\"" << f.w - f.right << "\" y2=\""
     << f.h - f.bottom << "\" stroke=\"black\"/>\n";
  for (double x : xs) {
    os << "<line x1=\"" << f.px(x) << "\" y1=\"" << f.h - f.bottom << "\" x2=\"" << f.px(x) << "\" y2=\""
       << f.h - f.bottom + 4 << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << f.px(x) << "\" y=\"" << f.h - f.bottom + 16 << "\" text-anchor=\"middle\">" << fmt_double(x)
       << "</text>\n";
  }
  os << "<text x=\"" << (f.left + f.w - f.right) / 2 << "\" y=\"" << f.h - 12 << "\" text-anchor=\"middle\">"
     << xml_escape(x_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[i % 6] << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) os << (k ? " " : "") << f.px(s.x[k]) << "," << f.py(s.y[k]);
    os << "\"/>\n";
    for (std::size_t k = 0; k < s.x.size(); ++k)
      os << "<circle cx=\"" << f.px(s.x[k]) << "\" cy=\"" << f.py(s.y[k]) << "\" r=\"3\" fill=\"" << kPalette[i % 6]
         << "\"/>\n";
  }
  legend(os, f, series);
  os << "</svg>\n";
  return os.str();
}

std::string bar_plot_svg(const std::string& title, const std::vector<std::string>& groups,
                         const std::vector<PlotSeries>& series) {
  Frame f;
  f.x0 = -0.5;
  f.x1 = groups.empty() ? 0.5 : groups.size() - 0.5;
  y_range(series, f);
  f.y0 = 0.0;
  std::ostringstream os;
  svg_open(os, f, title);
  data_comment(os, series, "group");
  y_axis(os, f, "global accuracy (%)");
  os << "<line x1=\"" << f.left << "\" y1=\"" << f.h - f.bottom << "\" x2=\"" << f.w - f.right << "\" y2=\""
     << f.h - f.bottom << "\" stroke=\"black\"/>\n";
  const double slot = (f.px(1.0) - f.px(0.0)) * 0.8;
  const double bar = series.empty() ? slot : slot / series.size();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double cx = f.px(static_cast<double>(g));
    os << "<text x=\"" << cx << "\" y=\"" << f.h - f.bottom + 16 << "\" text-anchor=\"middle\">"
       << xml_escape(groups[g]) << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
      const auto& s = series[i];
      for (std::size_t k = 0; k < s.x.size(); ++k) {
        if (static_cast<std::size_t>(s.x[k]) != g) continue;
        const double x = cx - slot / 2 + bar * i;
        os << "<rect x=\"" << x << "\" y=\"" << f.py(s.y[k]) << "\" width=\"" << bar * 0.9 << "\" height=\""
           << f.py(f.y0) - f.py(s.y[k]) << "\" fill=\"" << kPalette[i % 6] << "\"/>\n";
      }
    }
  }
  legend(os, f, series);
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// hashing and manifests

std::string blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::MissingFile, "cannot read " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::Io, "cannot write " + path.string());
  f << content;
}

std::vector<std::pair<std::string, std::string>> file_hashes(const std::string& root) {
  std::vector<std::pair<std::string, std::string>> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).generic_string();
    if (rel == "run_manifest.json") continue;
    out.emplace_back(rel, blob_hash(read_file(e.path().string())));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::string file_hash(const std::string& path) { return blob_hash(read_file(path)); }

std::string tree_hash(const std::string& root) {
  std::string listing;
  for (const auto& [rel, h] : file_hashes(root)) listing += h + " " + rel + "\n";
  return blob_hash(listing);
}

namespace {

std::string config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : cfg.snapshot()) out += k + ": " + v + "\n";
  return out;
}

void write_run_manifest(const std::string& out_dir, const std::string& command_line, const RunConfig& cfg,
                        const std::vector<std::string>& input_dirs) {
  json j;
  j["command"] = command_line;
  json c = json::object();
  for (const auto& [k, v] : cfg.snapshot()) c[k] = v;
  j["config"] = c;
  j["seeds"] = cfg.fed.seeds;
  std::string inputs = "config " + blob_hash(config_text(cfg)) + "\n";
  for (const auto& d : input_dirs) inputs += "tree " + tree_hash(d) + "\n";
  j["input_hash"] = blob_hash(inputs);
  j["output_dir"] = out_dir;
  json outputs = json::object();
  for (const auto& [rel, h] : file_hashes(out_dir)) outputs[rel] = h;
  j["outputs"] = outputs;
  j["output_hash"] = tree_hash(out_dir);
  write_file(fs::path(out_dir) / "run_manifest.json", j.dump(2) + "\n");
}

void log_line(const std::string& msg) { std::cerr << "[fedwsidd] " << msg << std::endl; }

std::vector<ClientDataset> load_datasets(const RunConfig& cfg, const std::string& data_dir) {
  if (!fs::is_directory(data_dir)) throw Error(Errc::MissingFile, "data directory not found: " + data_dir);
  std::vector<std::string> centres;
  for (const auto& e : fs::directory_iterator(data_dir)) {
    if (e.is_directory() && fs::exists(e.path() / "manifest.yaml")) centres.push_back(e.path().filename().string());
  }
  std::sort(centres.begin(), centres.end());
  if (centres.empty()) throw Error(Errc::MissingFile, "no <centre>/manifest.yaml under " + data_dir);
  std::vector<ClientDataset> out;
  for (const auto& c : centres) {
    const fs::path root = fs::path(data_dir) / c;
    out.push_back(ingest_patch_directory(root.string(), (root / "manifest.yaml").string(), cfg.toy.patch_height,
                                         cfg.toy.patch_width));
  }
  for (const auto& ds : out) {
    if (ds.num_classes != cfg.toy.num_classes)
      throw Error(Errc::ManifestSchema, ds.centre_id + ": num_classes " + std::to_string(ds.num_classes) +
                                            " does not match config num_classes " + std::to_string(cfg.toy.num_classes));
  }
  return out;
}

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case Errc::ConfigInvalid:
      return kConfigError;
    case Errc::MissingFile:
    case Errc::UndecodableImage:
    case Errc::ManifestSchema:
    case Errc::EmptyDataset:
      return kDatasetError;
    case Errc::SeedMismatch:
    case Errc::InconsistentCentres:
      return kSeedMismatch;
    default:
      return kRunFailure;
  }
}

std::string accuracy_csv(const FederationReport& rep) {
  std::ostringstream os;
  os.precision(17);
  os << "seed,centre,accuracy,test_size\n";
  for (const auto& run : rep.runs)
    for (const auto& [c, a] : run.per_centre) os << run.seed << "," << c << "," << a << "," << run.test_sizes.at(c) << "\n";
  return os.str();
}

std::string summary_csv(const FederationReport& rep) {
  std::ostringstream os;
  os.precision(17);
  os << "row,mean,std\n";
  for (const auto& [c, v] : rep.summary.per_centre) os << c << "," << v.mean << "," << v.std << "\n";
  os << "Avg," << rep.summary.global.mean << "," << rep.summary.global.std << "\n";
  return os.str();
}

std::string bytes_csv(const FederationReport& rep) {
  std::ostringstream os;
  os << "seed,direction,sender,receivers,payload_bytes,archive_bytes\n";
  for (const auto& m : rep.transcript) {
    os << m.seed << "," << m.direction << "," << m.sender << "," << join(m.receivers, [](const std::string& s) { return s; })
       << "," << m.payload_bytes << "," << m.archive_bytes << "\n";
  }
  return os.str();
}

std::string assignment_table(const FederationReport& rep) {
  std::ostringstream os;
  os << "seed";
  for (const auto& c : rep.centres) os << "\t" << c;
  os << "\n";
  for (std::size_t s = 0; s < rep.assignments.size() && s < rep.seeds.size(); ++s) {
    os << rep.seeds[s];
    for (const auto& c : rep.centres) {
      auto it = rep.assignments[s].find(c);
      os << "\t" << (it == rep.assignments[s].end() ? "-" : it->second);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// commands

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, const std::string& command_line) {
  cfg.toy.validate();
  auto datasets = generate_toy_federation(cfg.toy);
  fs::create_directories(out_dir);
  for (const auto& ds : datasets) {
    const fs::path root = fs::path(out_dir) / ds.centre_id;
    fs::remove_all(root);
    export_patch_directory(ds, root.string());
    log_line(ds.centre_id + ": " + std::to_string(ds.train_slides.size()) + " train / " +
             std::to_string(ds.test_slides.size()) + " test slides");
  }
  write_run_manifest(out_dir, command_line, cfg, {});
  std::cout << "wrote " << datasets.size() << " centre directories to " << out_dir << "\n";
  std::cout << "content hash " << tree_hash(out_dir) << "\n";
  return kOk;
}

int cmd_distill(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                const std::string& command_line) {
  const auto datasets = load_datasets(cfg, data_dir);
  cfg.fed.distill_cfg.validate();
  auto frng = derive_stream(cfg.fed.extractor_seed, "features");
  const auto extractor = build_extractor(cfg.fed.extractor, frng);
  fs::create_directories(out_dir);
  for (const auto& ds : datasets) {
    log_line(ds.centre_id + ": distilling " + std::to_string(cfg.fed.distill_cfg.rounds) + " rounds");
    auto rng = derive_stream(cfg.distill_seed, "distill/" + ds.centre_id);
    const auto out = distill(ds, *extractor, cfg.fed.distill_cfg, rng);
    const fs::path dir = fs::path(out_dir) / ds.centre_id;
    fs::create_directories(dir);
    write_archive(synthetic_to_tensors(out.synthetic), (dir / "synthetic.fwsa").string());
    out.trace.write_csv((dir / "trace.csv").string());
    // loss over the first and last 100 rounds per class
    const int w = std::min(100, cfg.fed.distill_cfg.rounds);
    for (int c = 0; c < ds.num_classes; ++c) {
      double lead = 0, trail = 0;
      int nl = 0, nt = 0;
      for (const auto& e : out.trace.entries) {
        if (e.class_index != c || e.skipped) continue;
        if (e.round < w) lead += e.loss, ++nl;
        if (e.round >= cfg.fed.distill_cfg.rounds - w) trail += e.loss, ++nt;
      }
      std::printf("%s class %d: leading mean loss %.6g, trailing mean loss %.6g\n", ds.centre_id.c_str(), c,
                  nl ? lead / nl : NAN, nt ? trail / nt : NAN);
    }
  }
  write_run_manifest(out_dir, command_line, cfg, {data_dir});
  return kOk;
}

namespace {

FederationHooks file_hooks(const std::string& out_dir) {
  FederationHooks hooks;
  hooks.log = [](const std::string& m) { log_line(m); };
  hooks.on_distilled = [out_dir](std::uint64_t seed, const std::string& centre, const DistillOutput& out) {
    write_file(fs::path(out_dir) / "traces" / ("seed_" + std::to_string(seed)) / (centre + ".csv"), out.trace.to_csv());
  };
  hooks.on_message = [out_dir](const TranscriptMessage& m, const std::vector<std::uint8_t>& archive) {
    write_file(fs::path(out_dir) / "transcript" / ("seed_" + std::to_string(m.seed)) /
                   (m.direction + "_" + m.sender + ".fwsa"),
               std::string(archive.begin(), archive.end()));
  };
  return hooks;
}

void write_report(const std::string& out_dir, const FederationReport& rep, const std::string& name) {
  const fs::path dir(out_dir);
  write_file(dir / "report.json", rep.to_json() + "\n");
  write_file(dir / "accuracy.csv", accuracy_csv(rep));
  write_file(dir / "summary.csv", summary_csv(rep));
  write_file(dir / "bytes.csv", bytes_csv(rep));
  write_file(dir / "table.txt", table_from_reports({{name, rep}}).format());
}

}  // namespace

int cmd_federate(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                 const std::string& command_line) {
  const auto datasets = load_datasets(cfg, data_dir);
  fs::create_directories(out_dir);
  fs::remove_all(fs::path(out_dir) / "transcript");
  fs::remove_all(fs::path(out_dir) / "traces");
  FederationReport rep;
  try {
    rep = run_federation(datasets, cfg.fed, file_hooks(out_dir));
  } catch (const Error& e) {
    if (e.code() == Errc::ConfigInvalid) throw;
    std::cerr << "error: " << e.what() << "\n";
    return kRunFailure;
  }
  const std::string name = mode_name(cfg.fed.mode);
  write_report(out_dir, rep, name);
  if (cfg.fed.mode == FederationMode::heterogeneous) {
    std::cout << "model assignment\n" << assignment_table(rep) << "\n";
    write_file(fs::path(out_dir) / "assignments.tsv", assignment_table(rep));
  }
  std::cout << table_from_reports({{name, rep}}).format();
  if (cfg.fed.mode != FederationMode::local_only) {
    std::cout << "upload bytes per client:";
    for (const auto& [c, b] : rep.upload_bytes) std::cout << " " << c << "=" << b;
    std::cout << "\nbroadcast bytes: " << rep.broadcast_bytes << "\n";
  }
  write_run_manifest(out_dir, command_line, cfg, {data_dir});
  return kOk;
}

int cmd_ablate(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
               const std::string& command_line) {
  if (cfg.grid_m.empty() || cfg.grid_b.empty()) {
    std::cerr << "error: ablation grid is empty (set grid_M and grid_B)\n";
    return kConfigError;
  }
  std::vector<bool> stain_values = cfg.grid_stain_norm;
  if (stain_values.empty()) stain_values.push_back(cfg.fed.distill_cfg.stain_norm);
  const auto datasets = load_datasets(cfg, data_dir);
  fs::create_directories(out_dir);
  fs::remove_all(fs::path(out_dir) / "cells");

  FederationConfig base = cfg.fed;
  if (base.mode == FederationMode::local_only) base.mode = FederationMode::homogeneous;
  FederationHooks hooks;
  hooks.log = [](const std::string& m) { log_line(m); };
  Federation fed(datasets, base, hooks);

  const fs::path csv_path = fs::path(out_dir) / "ablation.csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  csv.precision(17);
  csv << "M,B,stain_norm,seed,centre,accuracy,global_avg\n";
  csv.flush();

  struct Cell {
    int m, b;
    bool stain;
    MeanStd global;
  };
  std::vector<Cell> done;
  bool failed = false;
  for (bool stain : stain_values) {
    for (int m : cfg.grid_m) {
      for (int b : cfg.grid_b) {
        auto& c = fed.config();
        c = base;
        c.distill_cfg.slides_per_class = m;
        c.distill_cfg.patches_per_slide = b;
        c.distill_cfg.stain_norm = stain;
        const std::string tag = "M=" + std::to_string(m) + " B=" + std::to_string(b) + " stain_norm=" + fmt_bool(stain);
        log_line("cell " + tag);
        try {
          const auto rep = fed.run();
          for (const auto& run : rep.runs) {
            const double g = weighted_global_average(run);
            for (const auto& [centre, a] : run.per_centre)
              csv << m << "," << b << "," << fmt_bool(stain) << "," << run.seed << "," << centre << "," << a << "," << g
                  << "\n";
          }
          csv.flush();
          const std::string cell_dir = "M" + std::to_string(m) + "_B" + std::to_string(b) + "_" + fmt_bool(stain);
          write_file(fs::path(out_dir) / "cells" / cell_dir / "report.json", rep.to_json() + "\n");
          done.push_back({m, b, stain, rep.summary.global});
          std::printf("%-32s global %s\n", tag.c_str(), format_percent(rep.summary.global).c_str());
        } catch (const Error& e) {
          std::cerr << "error: cell " << tag << " failed: " << e.what() << "\n";
          failed = true;
        }
      }
    }
  }
  csv.close();

  auto find = [&](int m, int b, bool s) -> const Cell* {
    for (const auto& c : done)
      if (c.m == m && c.b == b && c.stain == s) return &c;
    return nullptr;
  };
  const bool main_stain = stain_values.front();
  std::vector<PlotSeries> vs_m, vs_b;
  for (int b : cfg.grid_b) {
    PlotSeries s{"B=" + std::to_string(b), {}, {}};
    for (int m : cfg.grid_m)
      if (auto* c = find(m, b, main_stain)) s.x.push_back(m), s.y.push_back(c->global.mean);
    vs_m.push_back(std::move(s));
  }
  for (int m : cfg.grid_m) {
    PlotSeries s{"M=" + std::to_string(m), {}, {}};
    for (int b : cfg.grid_b)
      if (auto* c = find(m, b, main_stain)) s.x.push_back(b), s.y.push_back(c->global.mean);
    vs_b.push_back(std::move(s));
  }
  const std::string suffix = " (stain_norm " + fmt_bool(main_stain) + ")";
  write_file(fs::path(out_dir) / "global_vs_M.svg",
             line_plot_svg("Global accuracy vs M" + suffix, "M", "global accuracy (%)", vs_m));
  write_file(fs::path(out_dir) / "global_vs_B.svg",
             line_plot_svg("Global accuracy vs B" + suffix, "B", "global accuracy (%)", vs_b));
  std::vector<std::string> groups;
  std::vector<PlotSeries> bars;
  for (bool s : stain_values) bars.push_back({"stain_norm " + fmt_bool(s), {}, {}});
  for (int m : cfg.grid_m) {
    for (int b : cfg.grid_b) {
      groups.push_back("M=" + std::to_string(m) + ",B=" + std::to_string(b));
      for (std::size_t i = 0; i < stain_values.size(); ++i) {
        if (auto* c = find(m, b, stain_values[i])) {
          bars[i].x.push_back(static_cast<double>(groups.size() - 1));
          bars[i].y.push_back(c->global.mean);
        }
      }
    }
  }
  write_file(fs::path(out_dir) / "stain_norm.svg", bar_plot_svg("Stain normalisation on/off", groups, bars));

  std::ostringstream summary;
  summary.precision(17);
  summary << "M,B,stain_norm,global_mean,global_std\n";
  for (const auto& c : done)
    summary << c.m << "," << c.b << "," << fmt_bool(c.stain) << "," << c.global.mean << "," << c.global.std << "\n";
  write_file(fs::path(out_dir) / "ablation_summary.csv", summary.str());
  write_run_manifest(out_dir, command_line, cfg, {data_dir});
  return failed ? kRunFailure : kOk;
}

int cmd_evaluate(const std::vector<std::string>& report_dirs, const std::string& baseline) {
  if (report_dirs.size() < 2) {
    std::cerr << "error: evaluate needs at least two report directories\n";
    return kConfigError;
  }
  std::vector<std::pair<std::string, FederationReport>> reports;
  for (const auto& dir : report_dirs) {
    const fs::path p = fs::path(dir) / "report.json";
    if (!fs::exists(p)) {
      std::cerr << "error: missing " << p.string() << "\n";
      return kDatasetError;
    }
    std::string name = fs::path(dir).filename().string();
    if (name.empty()) name = fs::path(dir).parent_path().filename().string();
    reports.emplace_back(name, FederationReport::from_json(read_file(p.string())));
  }
  const FederationReport* base = nullptr;
  for (const auto& [name, rep] : reports)
    if (name == baseline) base = &rep;
  if (!base) {
    std::cerr << "error: baseline '" << baseline << "' is not one of the report directories\n";
    return kConfigError;
  }
  ResultTable table = table_from_reports(reports);
  for (const auto& [name, rep] : reports) {
    if (&rep == base) continue;
    try {
      table.p_values[name] = compare_runs(rep, *base, baseline).global.p_value;
    } catch (const Error& e) {
      std::cerr << "error: " << name << " vs " << baseline << ": " << e.what() << "\n";
      return kSeedMismatch;
    }
  }
  std::cout << table.format();
  return kOk;
}

// ---------------------------------------------------------------------------
// argument parsing

int run(const std::vector<std::string>& args) {
  CLI::App app{"FedWSIDD: federated WSI classification via distilled synthetic slides", "fedwsidd"};
  app.require_subcommand(1);

  std::string command_line = "fedwsidd";
  for (std::size_t i = 1; i < args.size(); ++i) command_line += " " + args[i];

  std::optional<std::string> config_path;
  std::vector<std::string> sets;
  std::string out_dir, data_dir, baseline;
  std::vector<std::string> report_dirs;
  std::map<std::string, std::string> flag_values;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "YAML file of flat config keys");
    sub->add_option("--set", sets, "override a config key, key=value (repeatable)");
  };
  auto flag = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(
        name, [&flag_values, key](const std::string& v) { flag_values[key] = v; }, help);
  };
  auto distill_flags = [&](CLI::App* sub) {
    flag(sub, "--rounds", "rounds", "distillation rounds (default 1000)");
    flag(sub, "--lr", "learning_rate", "distillation learning rate (default 0.0003)");
    flag(sub, "--m", "M", "synthetic slides per class (default 10)");
    flag(sub, "--b", "B", "patches per synthetic slide (default 100)");
    flag(sub, "--patch-size", "patch_size", "patch size N or HxW (default 64)");
    flag(sub, "--stain-norm", "stain_norm", "on|off (default on)");
    flag(sub, "--init", "init", "random|real_sample");
    flag(sub, "--optimizer", "optimizer", "adam|sgd");
    flag(sub, "--jobs", "jobs", "worker threads (default 1)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the procedural toy federation");
  common(gen);
  gen->add_option("--out", out_dir, "output directory")->required();
  flag(gen, "--preset", "preset", "ca16|ca17");
  flag(gen, "--seed", "data_seed", "generator seed");
  flag(gen, "--stain-shift", "stain_shift_strength", "per-centre stain shift strength");

  auto* dis = app.add_subcommand("distill", "distill synthetic slides per centre");
  common(dis);
  dis->add_option("--data", data_dir, "dataset directory from gen-data")->required();
  dis->add_option("--out", out_dir, "output directory")->required();
  distill_flags(dis);
  flag(dis, "--seed", "distill_seed", "distillation seed");

  auto* fedc = app.add_subcommand("federate", "run the one-shot federation over all seeds");
  common(fedc);
  fedc->add_option("--data", data_dir, "dataset directory from gen-data")->required();
  fedc->add_option("--out", out_dir, "output directory")->required();
  distill_flags(fedc);
  flag(fedc, "--mode", "mode", "local|homogeneous|heterogeneous");
  flag(fedc, "--seeds", "seeds", "comma-separated root seeds (default 1,2,3,4,5)");
  flag(fedc, "--model", "model", "abmil|clam_lite|mean_pool");
  flag(fedc, "--pool", "pool", "heterogeneous model pool, comma-separated");
  flag(fedc, "--epochs", "epochs", "local MIL epochs (default 50)");

  auto* abl = app.add_subcommand("ablate", "sweep M, B and stain normalisation");
  common(abl);
  abl->add_option("--data", data_dir, "dataset directory from gen-data")->required();
  abl->add_option("--out", out_dir, "output directory")->required();
  distill_flags(abl);
  flag(abl, "--grid-m", "grid_M", "M values, comma-separated");
  flag(abl, "--grid-b", "grid_B", "B values, comma-separated");
  flag(abl, "--grid-stain-norm", "grid_stain_norm", "stain-norm values, e.g. on,off");
  flag(abl, "--seeds", "seeds", "comma-separated root seeds");
  flag(abl, "--epochs", "epochs", "local MIL epochs");

  auto* ev = app.add_subcommand("evaluate", "compare report directories with paired t-tests");
  ev->add_option("reports", report_dirs, "report directories (column names are their basenames)")->required();
  ev->add_option("--baseline", baseline, "baseline report name")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (ev->parsed()) return cmd_evaluate(report_dirs, baseline);

    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw Error(Errc::ConfigInvalid, "--set expects key=value, got '" + s + "'");
      overrides.emplace_back(trim(s.substr(0, eq)), s.substr(eq + 1));
    }
    for (const auto& kv : flag_values) overrides.push_back(kv);
    const RunConfig cfg = load_config(config_path, overrides);

    if (gen->parsed()) return cmd_gen_data(cfg, out_dir, command_line);
    if (dis->parsed()) return cmd_distill(cfg, data_dir, out_dir, command_line);
    if (fedc->parsed()) return cmd_federate(cfg, data_dir, out_dir, command_line);
    if (abl->parsed()) return cmd_ablate(cfg, data_dir, out_dir, command_line);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args);
}

}  // namespace fedwsidd::cli

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedwsidd/data.hpp"
#include "fedwsidd/fed.hpp"

namespace fedwsidd::cli {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfigError = 2,
  kDatasetError = 3,
  kRunFailure = 4,
  kSeedMismatch = 5,
};

/// Everything a command can be configured with. Keys are flat; see
/// RunConfig::keys() for the list.
struct RunConfig {
  std::string preset;  // "", "ca16" or "ca17"
  ToyGenConfig toy = ca16_preset();
  FederationConfig fed;
  std::uint64_t distill_seed = 1;
  std::vector<int> grid_m;
  std::vector<int> grid_b;
  std::vector<bool> grid_stain_norm;

  RunConfig();

  /// Throws Error(ConfigInvalid) for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();
  /// Flat key -> value, in keys() order.
  std::vector<std::pair<std::string, std::string>> snapshot() const;
  void validate() const;
};

/// Precedence, lowest first: built-in defaults, the preset named in the file,
/// the file's other keys, then overrides (in order).
RunConfig load_config(const std::optional<std::string>& path,
                      const std::vector<std::pair<std::string, std::string>>& overrides);

/// Table-1 layout: one row per centre plus "Avg", one column per run, cells
/// "mean ± std" in percent, and an optional "p-value" row.
struct ResultTable {
  std::vector<std::string> columns;
  std::vector<std::string> rows;
  std::map<std::string, std::map<std::string, MeanStd>> cells;  // row -> column -> value (fractions)
  std::map<std::string, double> p_values;                       // column -> p; baseline absent

  std::string format() const;
  static ResultTable parse(const std::string& text);
};

ResultTable table_from_reports(const std::vector<std::pair<std::string, FederationReport>>& reports);

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Standalone SVG; the plotted numbers are repeated in a CSV comment.
std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series);
std::string bar_plot_svg(const std::string& title, const std::vector<std::string>& groups,
                         const std::vector<PlotSeries>& series);

/// SHA-256 hex digest of "blob <size>\0<content>" (git object hashing).
std::string blob_hash(const std::string& content);
std::string file_hash(const std::string& path);
/// Hash over the sorted "<blob hash> <relative path>" lines of every regular
/// file below root, skipping run_manifest.json.
std::string tree_hash(const std::string& root);

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, const std::string& command_line);
int cmd_distill(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                const std::string& command_line);
int cmd_federate(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                 const std::string& command_line);
int cmd_ablate(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
               const std::string& command_line);
int cmd_evaluate(const std::vector<std::string>& report_dirs, const std::string& baseline);

/// Parses argv and dispatches to a command; returns the exit code.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace fedwsidd::cli

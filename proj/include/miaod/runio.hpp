#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "miaod/activeloop.hpp"
#include "miaod/synthdata.hpp"

namespace miaod::run {

/// Flat key=value run configuration covering the scene, the cycle schedule
/// and the run plumbing. Every key is optional; unknown keys are rejected.
struct RunConfig {
    synth::SceneSpec scene;
    loop::CycleConfig cycle;
    int train_count = 200;
    int test_count = 100;
    int heatmap_samples = 0;   // test images whose heatmaps cmd_run dumps
    bool record_timing = false;

    void validate() const;
};

/// Parse "key=value" lines ('#' starts a comment). Throws contract_error on
/// unknown keys or malformed values; numeric constraints are re-validated.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Apply one override (same key space as the config file).
void apply_override(RunConfig& cfg, const std::string& key,
                    const std::string& value);

// -- metrics CSV ------------------------------------------------------------

inline constexpr const char* kMetricsVersion = "# miaod-metrics v1";

std::string metrics_header(const std::vector<std::string>& class_names);
std::string metrics_row(const loop::CycleMetrics& m, loop::Strategy strategy,
                        std::uint64_t seed);

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<std::string>& class_names,
                       const std::vector<std::string>& rows);

/// One parsed CSV row; per-class APs keyed by class name, -1 for absent.
struct MetricsRow {
    int cycle = 0;
    double labeled_fraction = 0.0;
    std::string strategy;
    std::uint64_t seed = 0;
    double map = 0.0;
    std::map<std::string, double> class_ap;
    int tp_selected = 0;
    double mean_selected_uncertainty = 0.0;
    double wall_seconds = 0.0;
    // present only in sweep CSVs
    double lambda = -1.0;
    int k = -1;
};

/// Reads a metrics or sweep CSV; throws contract_error on a missing/alien
/// version line or schema mismatch, io_error on unreadable files.
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

// -- sweep ------------------------------------------------------------------

std::string sweep_cell_name(double lambda, int k, loop::Strategy strategy,
                            std::uint64_t seed);

inline constexpr const char* kSweepVersion = "# miaod-sweep v1";

std::string sweep_header(const std::vector<std::string>& class_names);
std::string sweep_row(double lambda, int k, const std::string& metrics_row);

// -- report -----------------------------------------------------------------

struct ReportCell {
    std::string strategy;
    int cycle = 0;
    int n = 0;  // seeds aggregated
    double map_mean = 0.0, map_std = 0.0;
    double tp_mean = 0.0, tp_std = 0.0;
};

/// Mean and sample standard deviation of mAP / tp_selected grouped by
/// (strategy, cycle), sorted by strategy then cycle.
std::vector<ReportCell> aggregate_rows(const std::vector<MetricsRow>& rows);

std::string render_report_table(const std::vector<ReportCell>& cells);
std::string report_summary_csv(const std::vector<ReportCell>& cells);

}  // namespace miaod::run

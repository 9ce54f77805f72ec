#include "miaod/runio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace miaod::run {

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out;
    try {
        out = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw contract_error("config: bad numeric value for " + key + ": '" + v + "'");
    }
    if (pos != v.size())
        throw contract_error("config: trailing junk in value for " + key + ": '" + v + "'");
    return out;
}

int parse_int(const std::string& key, const std::string& v) {
    const double d = parse_double(key, v);
    if (d != std::floor(d))
        throw contract_error("config: " + key + " must be an integer, got '" + v + "'");
    return static_cast<int>(d);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("junk");
        return out;
    } catch (const std::exception&) {
        throw contract_error("config: bad unsigned value for " + key + ": '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw contract_error("config: bad boolean for " + key + ": '" + v + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::validate() const {
    scene.validate();
    cycle.validate();
    if (train_count < 1 || test_count < 1)
        throw contract_error("config: train_count and test_count must be >= 1");
    if (heatmap_samples < 0)
        throw contract_error("config: heatmap_samples must be >= 0");
}

void apply_override(RunConfig& cfg, const std::string& key,
                    const std::string& value) {
    // scene
    if (key == "image_size") cfg.scene.image_size = parse_int(key, value);
    else if (key == "classes") cfg.scene.classes = split(value, ',');
    else if (key == "objects_min") cfg.scene.objects_min = parse_int(key, value);
    else if (key == "objects_max") cfg.scene.objects_max = parse_int(key, value);
    else if (key == "object_size_min") cfg.scene.object_size_min = parse_int(key, value);
    else if (key == "object_size_max") cfg.scene.object_size_max = parse_int(key, value);
    else if (key == "fg_min") cfg.scene.fg_min = parse_double(key, value);
    else if (key == "fg_max") cfg.scene.fg_max = parse_double(key, value);
    else if (key == "bg_mean") cfg.scene.bg_mean = parse_double(key, value);
    else if (key == "bg_noise_std") cfg.scene.bg_noise_std = parse_double(key, value);
    else if (key == "min_center_separation")
        cfg.scene.min_center_separation = parse_int(key, value);
    // schedule / optimizer
    else if (key == "init_fraction") cfg.cycle.init_fraction = parse_double(key, value);
    else if (key == "step_fraction") cfg.cycle.step_fraction = parse_double(key, value);
    else if (key == "num_cycles") cfg.cycle.num_cycles = parse_int(key, value);
    else if (key == "epochs_label") cfg.cycle.epochs_label = parse_int(key, value);
    else if (key == "epochs_max") cfg.cycle.epochs_max = parse_int(key, value);
    else if (key == "epochs_min") cfg.cycle.epochs_min = parse_int(key, value);
    else if (key == "maxmin_repeats") cfg.cycle.maxmin_repeats = parse_int(key, value);
    else if (key == "learning_rate") cfg.cycle.learning_rate = parse_double(key, value);
    else if (key == "lr_decay") cfg.cycle.lr_decay = parse_double(key, value);
    else if (key == "lr_decay_at") cfg.cycle.lr_decay_at = parse_double(key, value);
    else if (key == "momentum") cfg.cycle.momentum = parse_double(key, value);
    else if (key == "batch_size") cfg.cycle.batch_size = parse_int(key, value);
    else if (key == "k") cfg.cycle.top_k = parse_int(key, value);
    else if (key == "strategy") cfg.cycle.strategy = loop::parse_strategy(value);
    else if (key == "weighted_selection")
        cfg.cycle.weighted_selection = parse_bool(key, value);
    else if (key == "seed") cfg.cycle.seed = parse_u64(key, value);
    // loss
    else if (key == "lambda") cfg.cycle.loss.lambda = parse_double(key, value);
    else if (key == "focal_alpha") cfg.cycle.loss.focal_alpha = parse_double(key, value);
    else if (key == "focal_gamma") cfg.cycle.loss.focal_gamma = parse_double(key, value);
    else if (key == "instance_norm") {
        if (value == "sum") cfg.cycle.loss.instance_norm = loss::LossConfig::InstanceNorm::Sum;
        else if (value == "mean") cfg.cycle.loss.instance_norm = loss::LossConfig::InstanceNorm::Mean;
        else throw contract_error("config: instance_norm must be sum|mean, got '" + value + "'");
    }
    // detector geometry
    else if (key == "stride") cfg.cycle.stride = parse_int(key, value);
    else if (key == "anchor_sizes") {
        cfg.cycle.anchor_sizes.clear();
        for (const std::string& tok : split(value, ','))
            cfg.cycle.anchor_sizes.push_back(parse_int(key, trim(tok)));
    } else if (key == "patch") cfg.cycle.patch = parse_int(key, value);
    else if (key == "hidden") cfg.cycle.hidden = parse_int(key, value);
    else if (key == "feature_dim") cfg.cycle.feature_dim = parse_int(key, value);
    else if (key == "score_threshold") cfg.cycle.score_threshold = parse_double(key, value);
    else if (key == "nms_iou") cfg.cycle.nms_iou = parse_double(key, value);
    // plumbing
    else if (key == "train_count") cfg.train_count = parse_int(key, value);
    else if (key == "test_count") cfg.test_count = parse_int(key, value);
    else if (key == "heatmap_samples") cfg.heatmap_samples = parse_int(key, value);
    else if (key == "record_timing") cfg.record_timing = parse_bool(key, value);
    else throw contract_error("config: unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw contract_error("config: line " + std::to_string(lineno) +
                                 " is not key=value: '" + line + "'");
        apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    // a bad --config path is a configuration mistake, not a runtime I/O fault
    if (!f) throw contract_error("cannot open config file " + path.string());
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str());
}

// -- metrics CSV ------------------------------------------------------------

std::string metrics_header(const std::vector<std::string>& class_names) {
    std::string h = "cycle,labeled_fraction,strategy,seed,mAP";
    for (const std::string& c : class_names) h += ",ap_" + c;
    h += ",tp_selected,mean_selected_uncertainty,wall_seconds";
    return h;
}

std::string metrics_row(const loop::CycleMetrics& m, loop::Strategy strategy,
                        std::uint64_t seed) {
    std::string r = std::to_string(m.cycle) + "," + fmt(m.labeled_fraction) + "," +
                    loop::strategy_name(strategy) + "," + std::to_string(seed) +
                    "," + fmt(m.map);
    for (double ap : m.per_class_ap) r += "," + fmt(ap);
    r += "," + std::to_string(m.tp_selected) + "," +
         fmt(m.mean_selected_uncertainty) + "," + fmt(m.wall_seconds);
    return r;
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<std::string>& class_names,
                       const std::vector<std::string>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot write " + path.string());
    f << kMetricsVersion << "\n" << metrics_header(class_names) << "\n";
    for (const std::string& r : rows) f << r << "\n";
    if (!f) throw io_error("write failed for " + path.string());
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line) ||
        (line != kMetricsVersion && line != kSweepVersion))
        throw contract_error(path.string() + ": missing metrics version line");
    if (!std::getline(f, line))
        throw contract_error(path.string() + ": missing column header");
    const std::vector<std::string> cols = split(line, ',');
    auto col = [&](const std::string& name) {
        for (std::size_t i = 0; i < cols.size(); ++i)
            if (cols[i] == name) return static_cast<int>(i);
        return -1;
    };
    const int c_cycle = col("cycle"), c_frac = col("labeled_fraction"),
              c_strat = col("strategy"), c_seed = col("seed"), c_map = col("mAP"),
              c_tp = col("tp_selected"), c_unc = col("mean_selected_uncertainty"),
              c_wall = col("wall_seconds"), c_lam = col("lambda"), c_k = col("k");
    if (c_cycle < 0 || c_strat < 0 || c_seed < 0 || c_map < 0 || c_tp < 0)
        throw contract_error(path.string() + ": metrics schema mismatch");

    std::vector<MetricsRow> rows;
    int lineno = 2;
    while (std::getline(f, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const std::vector<std::string> vals = split(line, ',');
        if (vals.size() != cols.size())
            throw contract_error(path.string() + ": row " + std::to_string(lineno) +
                                 " has " + std::to_string(vals.size()) +
                                 " fields, expected " + std::to_string(cols.size()));
        MetricsRow r;
        r.cycle = parse_int("cycle", vals[static_cast<std::size_t>(c_cycle)]);
        if (c_frac >= 0)
            r.labeled_fraction = parse_double("labeled_fraction",
                                              vals[static_cast<std::size_t>(c_frac)]);
        r.strategy = vals[static_cast<std::size_t>(c_strat)];
        r.seed = parse_u64("seed", vals[static_cast<std::size_t>(c_seed)]);
        r.map = parse_double("mAP", vals[static_cast<std::size_t>(c_map)]);
        r.tp_selected = parse_int("tp_selected", vals[static_cast<std::size_t>(c_tp)]);
        if (c_unc >= 0)
            r.mean_selected_uncertainty = parse_double(
                "mean_selected_uncertainty", vals[static_cast<std::size_t>(c_unc)]);
        if (c_wall >= 0)
            r.wall_seconds =
                parse_double("wall_seconds", vals[static_cast<std::size_t>(c_wall)]);
        if (c_lam >= 0)
            r.lambda = parse_double("lambda", vals[static_cast<std::size_t>(c_lam)]);
        if (c_k >= 0) r.k = parse_int("k", vals[static_cast<std::size_t>(c_k)]);
        for (std::size_t i = 0; i < cols.size(); ++i)
            if (cols[i].rfind("ap_", 0) == 0)
                r.class_ap[cols[i].substr(3)] = parse_double(cols[i], vals[i]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// -- sweep ------------------------------------------------------------------

std::string sweep_cell_name(double lambda, int k, loop::Strategy strategy,
                            std::uint64_t seed) {
    char lam[32];
    std::snprintf(lam, sizeof lam, "%g", lambda);
    return std::string("lam") + lam + "_k" + std::to_string(k) + "_" +
           loop::strategy_name(strategy) + "_s" + std::to_string(seed);
}

std::string sweep_header(const std::vector<std::string>& class_names) {
    return "lambda,k," + metrics_header(class_names);
}

std::string sweep_row(double lambda, int k, const std::string& metrics_row) {
    return fmt(lambda) + "," + std::to_string(k) + "," + metrics_row;
}

// -- report -----------------------------------------------------------------

std::vector<ReportCell> aggregate_rows(const std::vector<MetricsRow>& rows) {
    std::map<std::pair<std::string, int>, std::vector<const MetricsRow*>> groups;
    for (const MetricsRow& r : rows) groups[{r.strategy, r.cycle}].push_back(&r);

    auto mean_std = [](const std::vector<double>& v) {
        const double n = static_cast<double>(v.size());
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= n;
        double var = 0.0;
        if (v.size() > 1) {
            for (double x : v) var += (x - mean) * (x - mean);
            var /= (n - 1.0);
        }
        return std::pair<double, double>{mean, std::sqrt(var)};
    };

    std::vector<ReportCell> cells;
    for (const auto& [key, members] : groups) {
        std::vector<double> maps, tps;
        for (const MetricsRow* r : members) {
            maps.push_back(r->map);
            tps.push_back(static_cast<double>(r->tp_selected));
        }
        ReportCell c;
        c.strategy = key.first;
        c.cycle = key.second;
        c.n = static_cast<int>(members.size());
        std::tie(c.map_mean, c.map_std) = mean_std(maps);
        std::tie(c.tp_mean, c.tp_std) = mean_std(tps);
        cells.push_back(std::move(c));
    }
    return cells;  // map iteration order is already (strategy, cycle) sorted
}

std::string render_report_table(const std::vector<ReportCell>& cells) {
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof buf, "%-12s %5s %3s %18s %18s\n", "strategy",
                  "cycle", "n", "mAP (mean+/-std)", "tp_sel (mean+/-std)");
    out += buf;
    for (const ReportCell& c : cells) {
        std::snprintf(buf, sizeof buf, "%-12s %5d %3d %9.4f+/-%.4f %9.1f+/-%.1f\n",
                      c.strategy.c_str(), c.cycle, c.n, c.map_mean, c.map_std,
                      c.tp_mean, c.tp_std);
        out += buf;
    }
    return out;
}

std::string report_summary_csv(const std::vector<ReportCell>& cells) {
    std::string out = "# miaod-report v1\n";
    out += "strategy,cycle,n,map_mean,map_std,tp_mean,tp_std\n";
    for (const ReportCell& c : cells)
        out += c.strategy + "," + std::to_string(c.cycle) + "," +
               std::to_string(c.n) + "," + fmt(c.map_mean) + "," + fmt(c.map_std) +
               "," + fmt(c.tp_mean) + "," + fmt(c.tp_std) + "\n";
    return out;
}

}  // namespace miaod::run

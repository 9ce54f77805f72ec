// miaod command-line driver: generate / run / sweep / report.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "miaod/activeloop.hpp"
#include "miaod/eval.hpp"
#include "miaod/runio.hpp"

namespace fs = std::filesystem;
using namespace miaod;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> strategy;
    std::optional<double> lambda;
    std::optional<int> k;
};

run::RunConfig resolve_config(const std::string& config_path, const Overrides& ov) {
    run::RunConfig cfg;
    if (!config_path.empty()) cfg = run::load_config(config_path);
    if (ov.seed) run::apply_override(cfg, "seed", std::to_string(*ov.seed));
    if (ov.strategy) run::apply_override(cfg, "strategy", *ov.strategy);
    if (ov.lambda) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", *ov.lambda);
        run::apply_override(cfg, "lambda", buf);
    }
    if (ov.k) run::apply_override(cfg, "k", std::to_string(*ov.k));
    cfg.validate();
    return cfg;
}

// test split draws from a stream disjoint from the train split
std::uint64_t test_seed(std::uint64_t seed) { return mix_seed(seed, 0x7e57); }

void cmd_generate(const run::RunConfig& cfg, const fs::path& out) {
    fs::create_directories(out / "train");
    fs::create_directories(out / "test");
    synth::Dataset train{cfg.scene, cfg.cycle.seed,
                         synth::generate_dataset(cfg.scene, cfg.train_count,
                                                 cfg.cycle.seed)};
    synth::Dataset test{cfg.scene, test_seed(cfg.cycle.seed),
                        synth::generate_dataset(cfg.scene, cfg.test_count,
                                                test_seed(cfg.cycle.seed))};
    synth::save_dataset(train, out / "train");
    synth::save_dataset(test, out / "test");
    std::printf("train %d %016llx\n", cfg.train_count,
                static_cast<unsigned long long>(synth::dataset_checksum(train)));
    std::printf("test %d %016llx\n", cfg.test_count,
                static_cast<unsigned long long>(synth::dataset_checksum(test)));
}

int cmd_run(const run::RunConfig& cfg, const fs::path& dataset, const fs::path& out) {
    const synth::Dataset train = synth::load_dataset(dataset / "train");
    const synth::Dataset test = synth::load_dataset(dataset / "test");
    fs::create_directories(out);
    std::ofstream log(out / "run.log");
    if (!log) throw io_error("cannot write " + (out / "run.log").string());

    loop::DatasetView view = loop::make_view(train.samples, cfg.cycle);
    loop::PoolState pool = loop::init_pool(train.samples, cfg.cycle);
    det::DetectorModel model;
    std::vector<std::string> rows;

    for (int cycle = 0; cycle < cfg.cycle.num_cycles; ++cycle) {
        try {
            loop::CycleMetrics m = loop::run_cycle(model, pool, view, test.samples,
                                                   cfg.cycle, cfg.record_timing);
            rows.push_back(run::metrics_row(m, cfg.cycle.strategy, cfg.cycle.seed));
            log << "cycle " << cycle << " labeled " << m.labeled_fraction
                << " mAP " << m.map << " tp_selected " << m.tp_selected << "\n";
            std::ofstream sel(out / ("selected_cycle" + std::to_string(cycle) + ".txt"));
            for (const std::string& id : m.selected) sel << id << "\n";
            if (!sel) throw io_error("cannot write selected id list");
        } catch (const numeric_fault& e) {
            throw numeric_fault("cycle " + std::to_string(cycle) + ": " + e.what());
        }
    }
    run::write_metrics_csv(out / "metrics.csv", cfg.scene.classes, rows);

    const int hm = std::min<int>(cfg.heatmap_samples,
                                 static_cast<int>(test.samples.size()));
    for (int i = 0; i < hm; ++i)
        eval::dump_heatmap(model, test.samples[static_cast<std::size_t>(i)],
                           view.grid, out / ("heatmap_" + test.samples[static_cast<std::size_t>(i)].id + ".pgm"),
                           cfg.cycle.strategy == loop::Strategy::MiaodIur);
    log << "done\n";
    return 0;
}

int error_code(const std::exception& e) {
    if (dynamic_cast<const contract_error*>(&e)) return kExitConfig;
    if (dynamic_cast<const io_error*>(&e)) return kExitIo;
    if (dynamic_cast<const numeric_fault*>(&e)) return kExitNumeric;
    return 1;
}

int cmd_sweep(const run::RunConfig& base, const fs::path& dataset, const fs::path& out,
              const std::vector<double>& lambdas, const std::vector<int>& ks,
              const std::vector<std::string>& strategies,
              const std::vector<std::uint64_t>& seeds) {
    if (lambdas.empty() || ks.empty() || strategies.empty() || seeds.empty())
        throw contract_error("sweep: empty grid axis");
    fs::create_directories(out);
    std::ofstream log(out / "sweep.log");
    std::vector<std::string> rows;
    for (double lam : lambdas)
        for (int k : ks)
            for (const std::string& strat : strategies)
                for (std::uint64_t seed : seeds) {
                    run::RunConfig cfg = base;
                    cfg.cycle.loss.lambda = lam;
                    cfg.cycle.top_k = k;
                    cfg.cycle.strategy = loop::parse_strategy(strat);
                    cfg.cycle.seed = seed;
                    const std::string cell =
                        run::sweep_cell_name(lam, k, cfg.cycle.strategy, seed);
                    try {
                        cfg.validate();
                        cmd_run(cfg, dataset, out / cell);
                        for (const run::MetricsRow& r :
                             run::read_metrics_csv(out / cell / "metrics.csv"))
                            rows.push_back(run::sweep_row(
                                lam, k, run::metrics_row(
                                            loop::CycleMetrics{
                                                r.cycle, r.labeled_fraction, {}, r.map,
                                                r.tp_selected,
                                                r.mean_selected_uncertainty,
                                                r.wall_seconds, {}},
                                            cfg.cycle.strategy, seed)));
                        log << cell << " ok\n";
                    } catch (const std::exception& e) {
                        log << cell << " failed code " << error_code(e) << ": "
                            << e.what() << "\n";
                    }
                }
    std::sort(rows.begin(), rows.end());
    std::ofstream f(out / "sweep.csv", std::ios::binary);
    f << run::kSweepVersion << "\n" << run::sweep_header({}) << "\n";
    for (const std::string& r : rows) f << r << "\n";
    if (!f) throw io_error("cannot write " + (out / "sweep.csv").string());
    return 0;
}

int cmd_report(const std::vector<std::string>& csvs, const std::string& out) {
    std::vector<run::MetricsRow> rows;
    for (const std::string& p : csvs)
        for (run::MetricsRow& r : run::read_metrics_csv(p))
            rows.push_back(std::move(r));
    const std::vector<run::ReportCell> cells = run::aggregate_rows(rows);
    std::cout << run::render_report_table(cells);
    if (!out.empty()) {
        std::ofstream f(out, std::ios::binary);
        f << run::report_summary_csv(cells);
        if (!f) throw io_error("cannot write " + out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"miaod: desk-scale active object detection lab"};
    app.require_subcommand(1);

    std::string config_path, dataset_dir, out_dir;
    Overrides ov;
    std::uint64_t seed_flag = 0;
    std::string strategy_flag;
    double lambda_flag = 0.0;
    int k_flag = 0;
    auto add_common = [&](CLI::App* sub, bool needs_dataset) {
        sub->add_option("--config", config_path, "config file (key=value lines)");
        if (needs_dataset)
            sub->add_option("--dataset", dataset_dir, "dataset directory")->required();
        sub->add_option("--out", out_dir, "output directory")->required();
        sub->add_option("--seed", seed_flag, "seed override");
        sub->add_option("--strategy", strategy_flag, "strategy override");
        sub->add_option("--lambda", lambda_flag, "lambda override");
        sub->add_option("--k", k_flag, "top-k override");
    };

    CLI::App* gen = app.add_subcommand("generate", "write a synthetic dataset");
    add_common(gen, false);

    CLI::App* runc = app.add_subcommand("run", "one active-learning run");
    add_common(runc, true);

    CLI::App* sweep = app.add_subcommand("sweep", "grid of runs, merged CSV");
    add_common(sweep, true);
    std::vector<double> lambdas;
    std::vector<int> ks;
    std::vector<std::string> strategies;
    std::vector<std::uint64_t> seeds;
    sweep->add_option("--lambdas", lambdas, "lambda grid")->delimiter(',');
    sweep->add_option("--ks", ks, "k grid")->delimiter(',');
    sweep->add_option("--strategies", strategies, "strategy grid")->delimiter(',');
    sweep->add_option("--seeds", seeds, "seed grid")->delimiter(',');

    CLI::App* report = app.add_subcommand("report", "aggregate metrics CSVs");
    std::vector<std::string> csvs;
    std::string report_out;
    report->add_option("csvs", csvs, "metrics.csv paths")->required();
    report->add_option("--out", report_out, "summary CSV path");

    CLI11_PARSE(app, argc, argv);

    CLI::App* active = gen->parsed() ? gen
                       : runc->parsed() ? runc
                       : sweep->parsed() ? sweep
                                         : nullptr;
    if (active) {
        if (active->count("--seed")) ov.seed = seed_flag;
        if (active->count("--strategy")) ov.strategy = strategy_flag;
        if (active->count("--lambda")) ov.lambda = lambda_flag;
        if (active->count("--k")) ov.k = k_flag;
    }

    try {
        if (gen->parsed()) {
            cmd_generate(resolve_config(config_path, ov), out_dir);
        } else if (runc->parsed()) {
            cmd_run(resolve_config(config_path, ov), dataset_dir, out_dir);
        } else if (sweep->parsed()) {
            run::RunConfig cfg = resolve_config(config_path, ov);
            if (lambdas.empty()) lambdas = {cfg.cycle.loss.lambda};
            if (ks.empty()) ks = {cfg.cycle.top_k};
            if (strategies.empty()) strategies = {loop::strategy_name(cfg.cycle.strategy)};
            if (seeds.empty()) seeds = {cfg.cycle.seed};
            cmd_sweep(cfg, dataset_dir, out_dir, lambdas, ks, strategies, seeds);
        } else if (report->parsed()) {
            cmd_report(csvs, report_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return error_code(e);
    }
    return 0;
}

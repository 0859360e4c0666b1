// command-line entry point: train / predict / evaluate / ablation /
// analyze-spectrum / oversample-report
#include <CLI11.hpp>
#include <json.hpp>

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "m2fmoe/config.hpp"
#include "m2fmoe/data.hpp"
#include "m2fmoe/model.hpp"
#include "m2fmoe/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace m2fmoe;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct GlobalArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string output_dir = ".";
    int64_t seed = -1;  // -1: keep config seed
    bool dump_routing = false;
};

RunConfig load_config(const GlobalArgs& g) {
    if (g.config_path.empty()) throw ConfigError("--config is required");
    RunConfig cfg = parse_run_config(g.config_path, g.sets);
    if (g.seed >= 0) cfg.train.seed = static_cast<uint64_t>(g.seed);
    return cfg;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output dir " + dir);
}

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

// full-precision numeric output so downstream oracles stay exact
std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct Pipeline {
    RawSeries raw;
    Tensor train_raw;   // levels, training portion
    SeriesDataset train_set;
    Tensor test_norm;   // normalized remainder incl. T_in of context
    int64_t split = 0;
    NormStats stats;
    OversampleReport oversample_report;
    bool oversampled = false;
};

// load -> split -> normalize (train stats only) -> window -> oversample
Pipeline build_pipeline(const RunConfig& cfg, bool do_oversample) {
    Pipeline p;
    p.raw = load_csv(cfg.data_csv);
    int64_t t_total = p.raw.values.shape[0];
    int64_t c = p.raw.values.shape[1];
    if (c != cfg.model.channels)
        throw ConfigError("data has " + std::to_string(c) + " channels, config says " +
                          std::to_string(cfg.model.channels));
    p.split = static_cast<int64_t>(std::floor(cfg.train_fraction * static_cast<double>(t_total)));
    if (p.split < cfg.model.t_in + cfg.model.t_p)
        throw DataError("training span too short for the configured windows");

    p.train_raw = Tensor({p.split, c});
    for (int64_t i = 0; i < p.split; ++i)
        for (int64_t ch = 0; ch < c; ++ch) p.train_raw.at2(i, ch) = p.raw.values.at2(i, ch);
    p.stats = zscore_fit(p.train_raw);
    Tensor train_norm = zscore_apply(p.train_raw, p.stats);
    p.train_set = make_windows(train_norm, cfg.model.t_in, cfg.model.t_p, p.stats);

    if (do_oversample) {
        GmmModel gmm = gmm_fit(
            std::vector<double>(p.train_raw.v.begin(), p.train_raw.v.end()), cfg.gmm_components,
            200, 1e-8, cfg.train.seed);
        auto [lower, upper] = extreme_thresholds(gmm);
        p.oversample_report = oversample(p.train_set, p.train_raw, lower, upper,
                                         cfg.oversample_cap, cfg.train.seed);
        p.oversampled = true;
    }

    // test portion keeps T_in context before the boundary
    int64_t test_start = std::max<int64_t>(p.split - cfg.model.t_in, 0);
    int64_t test_len = t_total - test_start;
    if (test_len >= cfg.model.t_in + cfg.model.t_p) {
        Tensor test_raw({test_len, c});
        for (int64_t i = 0; i < test_len; ++i)
            for (int64_t ch = 0; ch < c; ++ch)
                test_raw.at2(i, ch) = p.raw.values.at2(test_start + i, ch);
        p.test_norm = zscore_apply(test_raw, p.stats);
    }
    return p;
}

SeriesDataset rolling_test_set(const Pipeline& p, const RunConfig& cfg) {
    if (p.test_norm.v.empty()) throw DataError("test span too short for rolling evaluation");
    SeriesDataset ds;
    ds.data = p.test_norm;
    ds.t_in = cfg.model.t_in;
    ds.t_p = cfg.model.t_p;
    ds.stats = p.stats;
    for (int64_t s : rolling_starts(p.test_norm.shape[0], cfg.model.t_in, cfg.model.t_p)) {
        ds.starts.push_back(s);
        ds.oversampled.push_back(0);
    }
    return ds;
}

void write_history(const std::string& path, const TrainResult& r) {
    std::ofstream out(path);
    out << "epoch,train_loss,val_loss\n";
    for (const EpochStats& e : r.history)
        out << e.epoch << "," << fmt(e.train_loss) << "," << fmt(e.val_loss) << "\n";
}

void write_metrics(const std::string& path, const Metrics& m, const std::string& variant) {
    json j;
    j["rmse"] = m.rmse;
    j["mape"] = m.mape;
    if (!variant.empty()) j["variant"] = variant;
    std::ofstream out(path);
    out << j.dump(2) << "\n";
}

void write_routing(const std::string& path, const std::vector<RoutingDumpRow>& rows) {
    std::ofstream out(path);
    out << "window_index,resolution_index,view,expert_index,weight\n";
    for (const RoutingDumpRow& r : rows)
        out << r.window_index << "," << r.resolution_index << "," << r.view << ","
            << r.expert_index << "," << fmt(r.weight) << "\n";
}

int run_train_variant(const GlobalArgs& g, const std::string& variant) {
    RunConfig cfg = load_config(g);
    ModelConfig mc = apply_variant(cfg.model, variant_flags(variant));
    Model model(mc);
    ensure_dir(g.output_dir);

    Pipeline p = build_pipeline(cfg, cfg.oversample_enabled);
    if (p.oversampled) {
        json j;
        j["extreme_count"] = p.oversample_report.extreme_count;
        j["windows_added"] = p.oversample_report.windows_added;
        j["cap_applied"] = p.oversample_report.cap_applied;
        std::ofstream out(join(g.output_dir, "oversample.json"));
        out << j.dump(2) << "\n";
    }

    ParamRegistry params;
    model.init_params(params, cfg.train.seed);
    TrainResult result = train(model, params, p.train_set, cfg.train);

    std::string tag = variant == "full" ? "" : "_" + std::to_string(std::hash<std::string>{}(variant) % 10000);
    save_checkpoint(join(g.output_dir, "checkpoint.m2fm"), params);
    write_history(join(g.output_dir, "history.csv"), result);

    Metrics m;
    std::vector<RoutingDumpRow> dump;
    SeriesDataset test = rolling_test_set(p, cfg);
    m = evaluate(model, params, test, g.dump_routing ? &dump : nullptr);
    write_metrics(join(g.output_dir, "metrics.json"), m, variant);
    if (g.dump_routing) write_routing(join(g.output_dir, "routing.csv"), dump);

    std::printf("trained %s: best_epoch=%lld val=%s test rmse=%s mape=%s\n", variant.c_str(),
                static_cast<long long>(result.best_epoch), fmt(result.best_val).c_str(),
                fmt(m.rmse).c_str(), fmt(m.mape).c_str());
    (void)tag;
    return 0;
}

int run_predict(const GlobalArgs& g, const std::string& checkpoint, const std::string& input_csv,
                int64_t horizon) {
    RunConfig cfg = load_config(g);
    if (horizon > 0 && horizon != cfg.model.t_p)
        throw ConfigError("horizon " + std::to_string(horizon) +
                          " does not match checkpoint/model horizon " +
                          std::to_string(cfg.model.t_p));
    Model model(cfg.model);
    ParamRegistry params;
    model.init_params(params, cfg.train.seed);
    load_checkpoint(checkpoint, params);

    RawSeries series = load_csv(input_csv);
    int64_t t_total = series.values.shape[0];
    if (t_total < cfg.model.t_in)
        throw DataError("input has " + std::to_string(t_total) + " points, need T_in=" +
                        std::to_string(cfg.model.t_in));
    // normalization statistics come from the input's leading span, matching
    // the training-side fit on the training portion
    int64_t fit_len = std::max<int64_t>(
        static_cast<int64_t>(std::floor(cfg.train_fraction * static_cast<double>(t_total))),
        std::min<int64_t>(t_total, cfg.model.t_in));
    Tensor fit_part({fit_len, series.values.shape[1]});
    for (int64_t i = 0; i < fit_len; ++i)
        for (int64_t ch = 0; ch < series.values.shape[1]; ++ch)
            fit_part.at2(i, ch) = series.values.at2(i, ch);
    NormStats stats = zscore_fit(fit_part);

    Tensor window({cfg.model.t_in, series.values.shape[1]});
    for (int64_t i = 0; i < cfg.model.t_in; ++i)
        for (int64_t ch = 0; ch < series.values.shape[1]; ++ch)
            window.at2(i, ch) = series.values.at2(t_total - cfg.model.t_in + i, ch);
    Tensor forecast = predict(model, params, zscore_apply(window, stats), stats);

    std::printf("step");
    for (const std::string& ch : series.channels) std::printf(",%s", ch.c_str());
    std::printf("\n");
    for (int64_t i = 0; i < forecast.shape[0]; ++i) {
        std::printf("%lld", static_cast<long long>(i + 1));
        for (int64_t ch = 0; ch < forecast.shape[1]; ++ch)
            std::printf(",%s", fmt(forecast.at2(i, ch)).c_str());
        std::printf("\n");
    }
    return 0;
}

int run_evaluate(const GlobalArgs& g, const std::string& checkpoint) {
    RunConfig cfg = load_config(g);
    Model model(cfg.model);
    ParamRegistry params;
    model.init_params(params, cfg.train.seed);
    load_checkpoint(checkpoint, params);
    Pipeline p = build_pipeline(cfg, false);
    SeriesDataset test = rolling_test_set(p, cfg);
    std::vector<RoutingDumpRow> dump;
    Metrics m = evaluate(model, params, test, g.dump_routing ? &dump : nullptr);
    ensure_dir(g.output_dir);
    write_metrics(join(g.output_dir, "metrics.json"), m, "");
    if (g.dump_routing) write_routing(join(g.output_dir, "routing.csv"), dump);
    std::printf("rmse=%s mape=%s windows=%lld\n", fmt(m.rmse).c_str(), fmt(m.mape).c_str(),
                static_cast<long long>(test.size()));
    return 0;
}

int run_analyze_spectrum(const GlobalArgs& g, const std::string& input_csv) {
    RunConfig cfg = load_config(g);
    RawSeries series = load_csv(input_csv);
    int64_t t_total = series.values.shape[0];
    if (t_total < 16) throw DataError("analyze-spectrum: need at least 16 points");

    int64_t span = std::min<int64_t>(cfg.model.t_r, t_total);
    Tensor recent({span, 1});
    for (int64_t i = 0; i < span; ++i) recent.at2(i, 0) = series.values.at2(t_total - span + i, 0);
    Tensor d = first_diff(recent);
    int64_t n = d.shape[0];
    std::vector<double> x(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) x[static_cast<size_t>(i)] = d.at2(i, 0);

    spectral::WaveletSpec spec = spectral::WaveletSpec::complex_gaussian(cfg.model.wavelet_order);
    spectral::ScaleGrid grid = spectral::ScaleGrid::for_window(spec, n, cfg.model.scales);
    ComplexTensor f = spectral::rfft(x);
    ComplexTensor w = spectral::cwt(x, grid, spec);
    int64_t bins = f.shape[0];

    int64_t e_count = cfg.model.experts;
    std::vector<double> beta;
    for (int64_t i = 1; i < e_count; ++i)
        beta.push_back(static_cast<double>(i) / static_cast<double>(e_count));
    SpectralMasks masks = build_masks(to_fourier_indices(beta, bins),
                                      to_wavelet_scale_indices(beta, spec.gamma, grid), bins,
                                      grid.count(), e_count);

    ensure_dir(g.output_dir);
    std::ofstream bands(join(g.output_dir, "bands.tsv"));
    std::string header = "band_index\tf_lo\tf_hi\ta_lo\ta_hi\tenergy_dft\tenergy_cwt";
    std::printf("%s\n", header.c_str());
    bands << header << "\n";
    for (int64_t e = 0; e < e_count; ++e) {
        double f_lo = e == 0 ? 0.0 : beta[static_cast<size_t>(e - 1)];
        double f_hi = e == e_count - 1 ? 1.0 : beta[static_cast<size_t>(e)];
        double a_lo = 1e300, a_hi = 0.0;
        for (int64_t s = 0; s < grid.count(); ++s)
            if (masks.wavelet[static_cast<size_t>(e)][static_cast<size_t>(s)]) {
                a_lo = std::min(a_lo, grid.scale(s));
                a_hi = std::max(a_hi, grid.scale(s));
            }
        double e_dft = band_energy(View::Fourier, f, masks.fourier[static_cast<size_t>(e)], nullptr, n);
        double e_cwt = band_energy(View::Wavelet, w, masks.wavelet[static_cast<size_t>(e)], &grid);
        std::string row = std::to_string(e) + "\t" + fmt(f_lo) + "\t" + fmt(f_hi) + "\t" +
                          fmt(a_lo) + "\t" + fmt(a_hi) + "\t" + fmt(e_dft) + "\t" + fmt(e_cwt);
        std::printf("%s\n", row.c_str());
        bands << row << "\n";
    }

    std::ofstream spectrum(join(g.output_dir, "spectrum.tsv"));
    spectrum << "bin\tfreq_norm\tmagnitude\n";
    for (int64_t b = 0; b < bins; ++b)
        spectrum << b << "\t" << fmt(static_cast<double>(b) / static_cast<double>(bins - 1)) << "\t"
                 << fmt(std::hypot(f.re[static_cast<size_t>(b)], f.im[static_cast<size_t>(b)]))
                 << "\n";

    std::ofstream scales(join(g.output_dir, "scales.tsv"));
    scales << "scale_index\tscale\tenergy\n";
    for (int64_t s = 0; s < grid.count(); ++s) {
        double row_energy = 0.0;
        for (int64_t b = 0; b < n; ++b) {
            double r = w.re[static_cast<size_t>(s * n + b)], i = w.im[static_cast<size_t>(s * n + b)];
            row_energy += r * r + i * i;
        }
        scales << s << "\t" << fmt(grid.scale(s)) << "\t" << fmt(row_energy) << "\n";
    }
    return 0;
}

int run_oversample_report(const GlobalArgs& g) {
    RunConfig cfg = load_config(g);
    Pipeline p = build_pipeline(cfg, true);
    json j;
    j["extreme_count"] = p.oversample_report.extreme_count;
    j["windows_added"] = p.oversample_report.windows_added;
    j["cap_applied"] = p.oversample_report.cap_applied;
    std::cout << j.dump(2) << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"M2FMoE extreme-adaptive time-series forecaster"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config_path, "run configuration file");
    app.add_option("--set", g.sets, "override, section.key=value")->take_all();
    app.add_option("--output-dir", g.output_dir, "artifact directory");
    app.add_option("--seed", g.seed, "override train.seed");
    app.add_flag("--dump-routing", g.dump_routing, "write per-window routing weights CSV");

    auto* c_train = app.add_subcommand("train", "train the full model");
    auto* c_predict = app.add_subcommand("predict", "forecast from a checkpoint");
    std::string checkpoint, input_csv;
    int64_t horizon = 0;
    c_predict->add_option("checkpoint", checkpoint, "checkpoint path")->required();
    c_predict->add_option("input", input_csv, "input CSV")->required();
    c_predict->add_option("--horizon", horizon, "expected forecast horizon");
    auto* c_eval = app.add_subcommand("evaluate", "rolling evaluation of a checkpoint");
    std::string eval_checkpoint;
    c_eval->add_option("checkpoint", eval_checkpoint, "checkpoint path")->required();
    auto* c_ablation = app.add_subcommand("ablation", "train/evaluate an ablation variant");
    std::string variant;
    c_ablation->add_option("variant", variant, "variant name")->required();
    auto* c_spectrum = app.add_subcommand("analyze-spectrum", "per-band DFT/CWT energies");
    std::string spectrum_csv;
    c_spectrum->add_option("input", spectrum_csv, "input CSV")->required();
    auto* c_oversample = app.add_subcommand("oversample-report", "GMM thresholds and window counts");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (c_train->parsed()) return run_train_variant(g, "full");
        if (c_predict->parsed()) return run_predict(g, checkpoint, input_csv, horizon);
        if (c_eval->parsed()) return run_evaluate(g, eval_checkpoint);
        if (c_ablation->parsed()) return run_train_variant(g, variant);
        if (c_spectrum->parsed()) return run_analyze_spectrum(g, spectrum_csv);
        if (c_oversample->parsed()) return run_oversample_report(g);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitUsage;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitUsage;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return kExitUsage;
}

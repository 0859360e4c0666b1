#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "m2fmoe/training.hpp"
#include "oracles.hpp"

using namespace m2fmoe;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.t_in = 24;
    cfg.t_r = 12;
    cfg.t_p = 4;
    cfg.channels = 1;
    cfg.experts = 2;
    cfg.resolutions = {1, 3};
    cfg.hidden = 8;
    cfg.routing_hidden = 4;
    cfg.wavelet_channels = 2;
    cfg.wavelet_out_hidden = 3;
    cfg.scales = 6;
    cfg.dropout = 0.0;
    cfg.lambda_div = 0.05;
    cfg.mu_cons = 0.05;
    return cfg;
}

// deterministic synthetic series: trend + seasonality (+ optional noise)
Tensor synthetic_series(int64_t n, double noise, uint64_t seed) {
    Rng rng(seed, "series");
    Tensor x({n, 1});
    for (int64_t i = 0; i < n; ++i)
        x.at2(i, 0) = 0.01 * static_cast<double>(i) +
                      std::sin(2.0 * 3.14159265358979 * static_cast<double>(i) / 12.0) +
                      noise * rng.normal();
    return x;
}

SeriesDataset dataset_from(const Tensor& series, int64_t t_in, int64_t t_p) {
    NormStats stats = zscore_fit(series);
    return make_windows(zscore_apply(series, stats), t_in, t_p, stats);
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("adam first step magnitude and zero-gradient behaviour") {
    ParamRegistry params;
    params.add("w", Tensor::from({2}, {1.0, -2.0}));
    Adam adam;
    std::map<std::string, std::vector<double>> grads;
    grads["w"] = {1.0, 1.0};
    adam.step(params, grads, 0.001);
    // bias correction makes the first update ~ lr * g/|g|
    CHECK(params.get("w").v[0] == doctest::Approx(1.0 - 0.001).epsilon(1e-6));
    CHECK(adam.steps() == 1);

    // zero gradient from a fresh state leaves parameters unchanged
    ParamRegistry fresh;
    fresh.add("w", Tensor::from({2}, {0.4, 0.6}));
    Adam adam2;
    std::vector<double> before = fresh.get("w").v;
    grads["w"] = {0.0, 0.0};
    adam2.step(fresh, grads, 0.001);
    CHECK(fresh.get("w").v == before);
    CHECK(adam2.steps() == 1);
    grads["w"] = {1.0, 1.0};

    grads["w"] = {std::nan(""), 0.0};
    CHECK_THROWS_AS(adam.step(params, grads, 0.001), NumericError);
}

TEST_CASE("adam drives a parameter monotonically against a constant gradient") {
    ParamRegistry params;
    params.add("w", Tensor::from({1}, {0.5}));
    Adam adam;
    std::map<std::string, std::vector<double>> grads;
    grads["w"] = {1.0};
    double prev = 0.5;
    for (int i = 0; i < 25; ++i) {
        adam.step(params, grads, 0.01);
        double cur = params.get("w").v[0];
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("training on a learnable series halves the initial loss") {
    ModelConfig mc = small_config();
    Model model(mc);
    SeriesDataset ds = dataset_from(synthetic_series(160, 0.02, 3), mc.t_in, mc.t_p);
    ParamRegistry params;
    model.init_params(params, 9);
    TrainConfig tc;
    tc.max_epochs = 20;
    tc.patience = 20;
    tc.batch_size = 16;
    tc.val_windows = 8;
    tc.seed = 9;
    TrainResult r = train(model, params, ds, tc);
    REQUIRE(r.history.size() >= 2);
    CHECK(r.history.back().train_loss < 0.5 * r.history.front().train_loss);
    CHECK(r.best_epoch >= 0);
}

TEST_CASE("early stopping fires on an unlearnable target") {
    ModelConfig mc = small_config();
    Model model(mc);
    // pure-noise series: validation loss plateaus quickly
    Rng rng(11, "noise");
    Tensor series({140, 1});
    for (int64_t i = 0; i < 140; ++i) series.at2(i, 0) = rng.normal();
    SeriesDataset ds = dataset_from(series, mc.t_in, mc.t_p);
    ParamRegistry params;
    model.init_params(params, 13);
    TrainConfig tc;
    tc.max_epochs = 60;
    tc.patience = 4;
    tc.batch_size = 16;
    tc.val_windows = 10;
    tc.seed = 13;
    TrainResult r = train(model, params, ds, tc);
    CHECK(static_cast<int64_t>(r.history.size()) < tc.max_epochs);
}

TEST_CASE("fixed seed reproduces history and parameters bit-for-bit") {
    ModelConfig mc = small_config();
    auto run_once = [&]() {
        Model model(mc);
        SeriesDataset ds = dataset_from(synthetic_series(120, 0.05, 7), mc.t_in, mc.t_p);
        ParamRegistry params;
        model.init_params(params, 17);
        TrainConfig tc;
        tc.max_epochs = 4;
        tc.patience = 10;
        tc.batch_size = 16;
        tc.seed = 17;
        TrainResult r = train(model, params, ds, tc);
        return std::pair<TrainResult, std::vector<double>>(r, params.get("gate/w_g").v);
    };
    auto [r1, p1] = run_once();
    auto [r2, p2] = run_once();
    REQUIRE(r1.history.size() == r2.history.size());
    for (size_t i = 0; i < r1.history.size(); ++i) {
        CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
        CHECK(r1.history[i].val_loss == r2.history[i].val_loss);
    }
    CHECK(p1 == p2);
}

TEST_CASE("best-validation parameters are restored") {
    ModelConfig mc = small_config();
    Model model(mc);
    SeriesDataset ds = dataset_from(synthetic_series(140, 0.05, 21), mc.t_in, mc.t_p);
    ParamRegistry params;
    model.init_params(params, 23);
    TrainConfig tc;
    tc.max_epochs = 10;
    tc.patience = 10;
    tc.batch_size = 16;
    tc.val_windows = 10;
    tc.seed = 23;
    TrainResult r = train(model, params, ds, tc);
    double best = 1e300;
    for (const EpochStats& e : r.history) best = std::min(best, e.val_loss);
    CHECK(r.best_val == doctest::Approx(best));
    CHECK(r.history[static_cast<size_t>(r.best_epoch)].val_loss == doctest::Approx(best));
}

TEST_CASE("evaluate: perfect and hand-value metrics") {
    // build a dataset and a "model" by checking the metric arithmetic directly
    // on denormalized values: rmse 0 / mape formulas per the epsilon=1 rule
    // (checked through the public evaluate() on a constant-forecast model is
    // impractical, so the formulas are exercised on the dataset level)
    NormStats st;
    st.mean = {0.0};
    st.stddev = {1.0};
    st.constant_channel = {0};
    // X=[1], Xhat=[3] -> mape = 2/(1+1) = 1.0
    double mape = std::abs(1.0 - 3.0) / std::abs(1.0 + 1.0);
    CHECK(mape == doctest::Approx(1.0));
    // X=[0,0], Xhat=[3,4] -> rmse = sqrt(25/2)
    double rmse = std::sqrt((9.0 + 16.0) / 2.0);
    CHECK(rmse == doctest::Approx(3.5355339059327378));
}

TEST_CASE("evaluate matches a brute-force recomputation") {
    ModelConfig mc = small_config();
    Model model(mc);
    Tensor series = synthetic_series(100, 0.02, 31);
    SeriesDataset ds = dataset_from(series, mc.t_in, mc.t_p);
    ParamRegistry params;
    model.init_params(params, 31);
    Metrics m = evaluate(model, params, ds);
    // brute force: one window at a time through predict()
    double sq = 0.0, ape = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < ds.size(); ++i) {
        Tensor forecast = predict(model, params, ds.input(i), ds.stats);
        Tensor truth = zscore_invert(ds.target(i), ds.stats);
        for (int64_t k = 0; k < forecast.numel(); ++k) {
            double e = truth.v[static_cast<size_t>(k)] - forecast.v[static_cast<size_t>(k)];
            sq += e * e;
            ape += std::abs(e) / std::abs(truth.v[static_cast<size_t>(k)] + 1.0);
            ++count;
        }
    }
    CHECK(m.rmse == doctest::Approx(std::sqrt(sq / count)).epsilon(1e-12));
    CHECK(m.mape == doctest::Approx(ape / count).epsilon(1e-12));
}

TEST_CASE("routing dump rows cover every window, resolution and expert") {
    ModelConfig mc = small_config();
    Model model(mc);
    SeriesDataset ds = dataset_from(synthetic_series(80, 0.02, 37), mc.t_in, mc.t_p);
    ParamRegistry params;
    model.init_params(params, 37);
    std::vector<RoutingDumpRow> dump;
    evaluate(model, params, ds, &dump);
    // windows x resolutions x views x experts
    CHECK(static_cast<int64_t>(dump.size()) ==
          ds.size() * static_cast<int64_t>(mc.resolutions.size()) * 2 * mc.experts);
    for (const RoutingDumpRow& row : dump) {
        CHECK(row.weight >= 0.0);
        CHECK(row.weight <= 1.0 + 1e-12);
        CHECK((row.view == "fourier" || row.view == "wavelet"));
    }
}

TEST_CASE("checkpoint save/load round trip and error paths") {
    ModelConfig mc = small_config();
    Model model(mc);
    ParamRegistry params;
    model.init_params(params, 41);
    // mutate state so the round trip carries it
    params.get("res0/maf/bn_mean").v[0] = 0.25;
    const std::string path = "test_checkpoint.m2fm";
    save_checkpoint(path, params);

    ParamRegistry loaded;
    model.init_params(loaded, 99);  // different init, will be overwritten
    load_checkpoint(path, loaded);
    for (const std::string& n : params.names()) CHECK(loaded.get(n).v == params.get(n).v);
    for (const std::string& n : params.state_names()) CHECK(loaded.get(n).v == params.get(n).v);

    // shape mismatch is rejected
    ModelConfig other = mc;
    other.t_p = 5;
    Model mo(other);
    ParamRegistry wrong;
    mo.init_params(wrong, 1);
    CHECK_THROWS_AS(load_checkpoint(path, wrong), std::exception);
    std::remove(path.c_str());

    CHECK_THROWS_AS(load_checkpoint("missing_checkpoint.m2fm", params), DataError);
}

TEST_CASE("variant names are validated") {
    CHECK_THROWS_WITH_AS(variant_flags("w/o-Magic"), doctest::Contains("valid:"), ConfigError);
    for (const std::string& n : variant_names()) CHECK_NOTHROW(variant_flags(n));
    AblationFlags f = variant_flags("w/o-RegLosses");
    ModelConfig cfg = apply_variant(small_config(), f);
    CHECK(cfg.lambda_div == 0.0);
    CHECK(cfg.mu_cons == 0.0);
}

}  // TEST_SUITE

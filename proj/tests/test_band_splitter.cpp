#include <doctest.h>

#include <cmath>

#include "m2fmoe/band_splitter.hpp"
#include "oracles.hpp"

using namespace m2fmoe;

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<double> sinusoid(int64_t n, double freq_cps) {
    std::vector<double> x(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        x[static_cast<size_t>(i)] = std::sin(2.0 * kPi * freq_cps * static_cast<double>(i));
    return x;
}

}  // namespace

TEST_SUITE("band_splitter") {

TEST_CASE("normalize_boundaries basics") {
    CHECK(normalize_boundaries(std::vector<double>{}).empty());  // E=1

    std::vector<double> beta = normalize_boundaries({0.0, 0.0, 0.0});  // E=4, zero logits
    REQUIRE(beta.size() == 3);
    CHECK(beta[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(beta[1] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(beta[2] == doctest::Approx(0.75).epsilon(1e-12));

    // strictly increasing in (0,1) for arbitrary logits
    Rng rng(4, "bound");
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> raw(4);
        for (double& r : raw) r = rng.uniform(-3.0, 3.0);
        std::vector<double> b = normalize_boundaries(raw);
        double prev = 0.0;
        for (double v : b) {
            CHECK(v > prev);
            CHECK(v < 1.0);
            prev = v;
        }
    }
}

TEST_CASE("normalize_boundaries gradient matches finite differences") {
    Rng rng(17, "bgrad");
    std::vector<double> raw = {0.3, -0.7, 1.1};
    // scalar probe: weighted sum of boundaries
    std::vector<double> w = {1.0, -2.0, 0.5};
    auto eval = [&](const std::vector<double>& r) {
        std::vector<double> b = normalize_boundaries(r);
        double s = 0.0;
        for (size_t i = 0; i < b.size(); ++i) s += w[i] * b[i];
        return s;
    };
    Tape t;
    Tensor raw_t = leaf(t, Tensor::from({3}, raw));
    Tensor beta = normalize_boundaries(t, raw_t);
    Tensor probe = reduce_sum(t, mul(t, beta, constant(t, Tensor::from({3}, w))));
    backward(t, probe);
    std::vector<double> analytic = t.grad(raw_t.node);
    std::vector<double> numeric = oracles::central_diff(eval, raw, 1e-6);
    CHECK(oracles::max_rel_err(analytic, numeric) < 1e-5);
}

TEST_CASE("to_fourier_indices midpoint, thirds and collision repair") {
    CHECK(to_fourier_indices({0.5}, 61) == std::vector<int64_t>{30});
    CHECK(to_fourier_indices({1.0 / 3.0, 2.0 / 3.0}, 7) == std::vector<int64_t>({2, 4}));
    CHECK(to_fourier_indices({0.50, 0.501}, 61) == std::vector<int64_t>({30, 31}));
    CHECK_THROWS_AS(to_fourier_indices({0.2, 0.4, 0.6}, 3), ConfigError);
}

TEST_CASE("theorem-1 scale mapping identities") {
    spectral::WaveletSpec spec = spectral::WaveletSpec::complex_gaussian(7);
    double gamma = spec.gamma;
    // f_max maps to a_min = gamma / f_max
    double f_max = 1.0, f_min = 0.05;
    double a_min = gamma / f_max, a_max = gamma / f_min;
    CHECK(a_max / a_min == doctest::Approx(f_max / f_min).epsilon(1e-12));

    // grid built for a window covers [gamma/1, gamma*n/2]
    spectral::ScaleGrid grid = spectral::ScaleGrid::for_window(spec, 120, 16);
    CHECK(grid.scale(0) == doctest::Approx(gamma).epsilon(1e-12));
    CHECK(grid.scale(15) == doctest::Approx(gamma * 60.0).epsilon(1e-12));
}

TEST_CASE("build_masks partitions both views") {
    SpectralMasks m = build_masks({2, 4}, {5, 11}, 7, 16, 3);
    // fourier: {0,1}, {2,3}, {4,5,6}
    CHECK(m.fourier[0] == std::vector<uint8_t>({1, 1, 0, 0, 0, 0, 0}));
    CHECK(m.fourier[1] == std::vector<uint8_t>({0, 0, 1, 1, 0, 0, 0}));
    CHECK(m.fourier[2] == std::vector<uint8_t>({0, 0, 0, 0, 1, 1, 1}));
    // wavelet: ascending blocks map to experts in reverse
    for (int64_t s = 0; s < 5; ++s) CHECK(m.wavelet[2][static_cast<size_t>(s)] == 1);
    for (int64_t s = 5; s < 11; ++s) CHECK(m.wavelet[1][static_cast<size_t>(s)] == 1);
    for (int64_t s = 11; s < 16; ++s) CHECK(m.wavelet[0][static_cast<size_t>(s)] == 1);

    // E=1: single all-ones masks
    SpectralMasks one = build_masks({}, {}, 5, 4, 1);
    for (uint8_t v : one.fourier[0]) CHECK(v == 1);
    for (uint8_t v : one.wavelet[0]) CHECK(v == 1);

    CHECK_THROWS_AS(build_masks({4, 2}, {5, 11}, 7, 16, 3), ShapeError);
}

TEST_CASE("mask partition property over random configurations") {
    Rng rng(23, "masks");
    for (int trial = 0; trial < 1000; ++trial) {
        int64_t e = 1 + static_cast<int64_t>(rng.next_u64() % 6);
        int64_t f = e + static_cast<int64_t>(rng.next_u64() % 60);
        int64_t s = std::max<int64_t>(e, 2) + static_cast<int64_t>(rng.next_u64() % 28);
        std::vector<double> raw(static_cast<size_t>(e - 1));
        for (double& r : raw) r = rng.uniform(-2.0, 2.0);
        std::vector<double> beta = normalize_boundaries(raw);
        spectral::WaveletSpec spec;
        spec.center_freq = 0.34;
        spec.gamma = 0.68;
        spectral::ScaleGrid grid = spectral::ScaleGrid::geometric(spec.gamma, spec.gamma * 40.0, s);
        SpectralMasks m = build_masks(to_fourier_indices(beta, f),
                                      to_wavelet_scale_indices(beta, spec.gamma, grid), f, s, e);
        // every bin and scale belongs to exactly one expert
        for (int64_t n = 0; n < f; ++n) {
            int count = 0;
            for (int64_t ex = 0; ex < e; ++ex) count += m.fourier[static_cast<size_t>(ex)][static_cast<size_t>(n)];
            CHECK(count == 1);
        }
        for (int64_t sc = 0; sc < s; ++sc) {
            int count = 0;
            for (int64_t ex = 0; ex < e; ++ex) count += m.wavelet[static_cast<size_t>(ex)][static_cast<size_t>(sc)];
            CHECK(count == 1);
        }
        // masks are contiguous ranges
        for (int64_t ex = 0; ex < e; ++ex) {
            for (const auto* view : {&m.fourier, &m.wavelet}) {
                const std::vector<uint8_t>& mask = (*view)[static_cast<size_t>(ex)];
                int transitions = 0;
                for (size_t i = 1; i < mask.size(); ++i)
                    if (mask[i] != mask[i - 1]) ++transitions;
                CHECK(transitions <= 2);
            }
        }
        // monotone correspondence: lower frequency band -> higher scales
        for (int64_t ex = 0; ex + 1 < e; ++ex) {
            int64_t hi_scale_lo_band = -1, lo_scale_hi_band = 1 << 29;
            for (int64_t sc = 0; sc < s; ++sc) {
                if (m.wavelet[static_cast<size_t>(ex)][static_cast<size_t>(sc)])
                    hi_scale_lo_band = std::max(hi_scale_lo_band, sc);
                if (m.wavelet[static_cast<size_t>(ex + 1)][static_cast<size_t>(sc)])
                    lo_scale_hi_band = std::min<int64_t>(lo_scale_hi_band, sc);
            }
            // band ex (lower frequencies) sits ABOVE band ex+1 on the scale axis
            CHECK(hi_scale_lo_band > lo_scale_hi_band);
        }
    }
}

TEST_CASE("synthetic probes land in the owning expert's wavelet mask") {
    spectral::WaveletSpec spec = spectral::WaveletSpec::complex_gaussian(7);
    const int64_t n = 512;
    spectral::ScaleGrid grid = spectral::ScaleGrid::for_window(spec, n, 16);
    std::vector<double> beta = {1.0 / 3.0, 2.0 / 3.0};
    SpectralMasks masks = build_masks(to_fourier_indices(beta, n / 2 + 1),
                                      to_wavelet_scale_indices(beta, spec.gamma, grid),
                                      n / 2 + 1, 16, 3);
    // probes spread across the three bands, each at least half a grid step
    // (in log frequency) away from the band edges the 16-scale grid resolves
    const std::vector<double> probes = {0.05, 0.09, 0.14, 0.22, 0.42, 0.47, 0.53, 0.84, 0.9, 0.97};
    for (double f_norm : probes) {
        int64_t band = 0;
        while (band < 2 && f_norm >= beta[static_cast<size_t>(band)]) ++band;

        std::vector<double> x = sinusoid(n, f_norm / 2.0);  // cycles/sample = f_norm * f_nyq
        ComplexTensor w = spectral::cwt(x, grid, spec);
        int64_t best_s = 0;
        double best = -1.0;
        for (int64_t s = 0; s < grid.count(); ++s) {
            double e = 0.0;
            for (int64_t b = 0; b < n; ++b)
                e += w.re[static_cast<size_t>(s * n + b)] * w.re[static_cast<size_t>(s * n + b)] +
                     w.im[static_cast<size_t>(s * n + b)] * w.im[static_cast<size_t>(s * n + b)];
            if (e > best) {
                best = e;
                best_s = s;
            }
        }
        CHECK(masks.wavelet[static_cast<size_t>(band)][static_cast<size_t>(best_s)] == 1);
    }
}

TEST_CASE("band energy: zero signal, Parseval total and cross-band proportionality") {
    spectral::WaveletSpec spec = spectral::WaveletSpec::complex_gaussian(7);
    const int64_t n = 512;
    spectral::ScaleGrid grid = spectral::ScaleGrid::for_window(spec, n, 16);

    // zero signal
    std::vector<double> zero(static_cast<size_t>(n), 0.0);
    ComplexTensor fz = spectral::rfft(zero);
    ComplexTensor wz = spectral::cwt(zero, grid, spec);
    std::vector<uint8_t> full(static_cast<size_t>(n / 2 + 1), 1);
    std::vector<uint8_t> full_s(16, 1);
    CHECK(band_energy(View::Fourier, fz, full, nullptr, n) == 0.0);
    CHECK(band_energy(View::Wavelet, wz, full_s, &grid) == 0.0);

    // full Fourier mask reproduces Parseval's N * sum x^2
    Rng rng(5, "parseval");
    std::vector<double> x(static_cast<size_t>(n));
    for (double& v : x) v = rng.uniform(-1.0, 1.0);
    ComplexTensor f = spectral::rfft(x);
    double sum_sq = 0.0;
    for (double v : x) sum_sq += v * v;
    CHECK(oracles::rel_err(band_energy(View::Fourier, f, full, nullptr, n),
                           static_cast<double>(n) * sum_sq) < 1e-9);

    // Narrowband probes: E_CWT/E_DFT consistent across bands within 15%.
    // The complex Gaussian has Q ~ 2, so a band only captures the probe's
    // full scale-domain bump when the probe sits near the band's log
    // midpoint; bands are therefore split with equal log width above the
    // lowest frequency whose wavelet support still fits the window.
    const double f_low = 0.03;
    double step3 = std::pow(1.0 / f_low, 1.0 / 3.0);
    std::vector<double> beta = {f_low * step3, f_low * step3 * step3};
    SpectralMasks masks = build_masks(to_fourier_indices(beta, n / 2 + 1),
                                      to_wavelet_scale_indices(beta, spec.gamma, grid),
                                      n / 2 + 1, 16, 3);
    std::vector<double> ratios;
    for (int band = 0; band < 3; ++band) {
        double lo_edge = band == 0 ? f_low : beta[static_cast<size_t>(band - 1)];
        double hi_edge = band == 2 ? 1.0 : beta[static_cast<size_t>(band)];
        for (double jitter : {0.9, 1.0, 1.1}) {
            double f_norm = std::sqrt(lo_edge * hi_edge) * jitter;
            int64_t bin = std::llround(f_norm * static_cast<double>(n) / 2.0);
            double f_cps = static_cast<double>(bin) / static_cast<double>(n);
            std::vector<double> probe = sinusoid(n, f_cps);
            ComplexTensor pf = spectral::rfft(probe);
            ComplexTensor pw = spectral::cwt(probe, grid, spec);
            double e_dft = band_energy(View::Fourier, pf,
                                       masks.fourier[static_cast<size_t>(band)], nullptr, n);
            double e_cwt = band_energy(View::Wavelet, pw,
                                       masks.wavelet[static_cast<size_t>(band)], &grid);
            REQUIRE(e_dft > 0.0);
            ratios.push_back(e_cwt / e_dft);
        }
    }
    double lo = ratios[0], hi = ratios[0];
    for (double r : ratios) {
        lo = std::min(lo, r);
        hi = std::max(hi, r);
    }
    CHECK((hi - lo) / ((hi + lo) / 2.0) < 0.15);
}

TEST_CASE("soft band windows telescope to one and agree with hard masks") {
    spectral::WaveletSpec spec = spectral::WaveletSpec::complex_gaussian(7);
    spectral::ScaleGrid grid = spectral::ScaleGrid::for_window(spec, 120, 16);
    Rng rng(31, "windows");
    for (int trial = 0; trial < 20; ++trial) {
        int64_t e = 2 + static_cast<int64_t>(rng.next_u64() % 4);
        std::vector<double> raw(static_cast<size_t>(e - 1));
        for (double& r : raw) r = rng.uniform(-1.5, 1.5);
        Tape t;
        Tensor raw_t = leaf(t, Tensor::from({e - 1}, raw));
        Tensor beta = normalize_boundaries(t, raw_t);
        const int64_t f = 60;
        std::vector<Tensor> wf = fourier_band_windows(t, beta, f, e, 0.2);
        std::vector<Tensor> ww = wavelet_band_windows(t, beta, spec.gamma, grid, e, 0.2);
        // exact partition of unity
        for (int64_t bin = 0; bin < f; ++bin) {
            double sum = 0.0;
            for (const Tensor& w : wf) sum += w.v[static_cast<size_t>(bin)];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
        for (int64_t s = 0; s < 16; ++s) {
            double sum = 0.0;
            for (const Tensor& w : ww) sum += w.v[static_cast<size_t>(s)];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
        // agreement with binary masks away from boundaries
        std::vector<double> beta_v = normalize_boundaries(raw);
        SpectralMasks masks = build_masks(to_fourier_indices(beta_v, f),
                                          to_wavelet_scale_indices(beta_v, spec.gamma, grid), f,
                                          16, e);
        for (int64_t bin = 0; bin < f; ++bin) {
            double pos = static_cast<double>(bin) / static_cast<double>(f - 1);
            bool near_boundary = false;
            for (double bv : beta_v)
                if (std::abs(pos - bv) < 2.5 / static_cast<double>(f - 1)) near_boundary = true;
            if (near_boundary) continue;
            for (int64_t ex = 0; ex < e; ++ex) {
                double soft = wf[static_cast<size_t>(ex)].v[static_cast<size_t>(bin)];
                double hard = masks.fourier[static_cast<size_t>(ex)][static_cast<size_t>(bin)];
                CHECK(std::abs(soft - hard) < 1e-4);
            }
        }
    }

    // E=1 gives a full all-ones window
    Tape t;
    std::vector<Tensor> one = fourier_band_windows(t, Tensor(), 10, 1, 0.2);
    REQUIRE(one.size() == 1);
    for (double v : one[0].v) CHECK(v == 1.0);
}

TEST_CASE("boundary gradients flow through the soft windows") {
    spectral::WaveletSpec spec = spectral::WaveletSpec::complex_gaussian(7);
    spectral::ScaleGrid grid = spectral::ScaleGrid::for_window(spec, 60, 12);
    Tape t;
    Tensor raw = leaf(t, Tensor::from({2}, {0.1, -0.2}));
    Tensor beta = normalize_boundaries(t, raw);
    std::vector<Tensor> wf = fourier_band_windows(t, beta, 30, 3, 0.2);
    std::vector<Tensor> ww = wavelet_band_windows(t, beta, spec.gamma, grid, 3, 0.2);
    Rng rng(3, "wprobe");
    Tensor probe_f = oracles::random_tensor({30}, rng);
    Tensor probe_w = oracles::random_tensor({12}, rng);
    Tensor loss = add(t, reduce_sum(t, mul(t, wf[0], constant(t, probe_f))),
                      reduce_sum(t, mul(t, ww[2], constant(t, probe_w))));
    backward(t, loss);
    const std::vector<double>& g = t.grad(raw.node);
    REQUIRE(g.size() == 2);
    CHECK(std::abs(g[0]) > 1e-12);
    CHECK(std::abs(g[1]) > 1e-12);
}

}  // TEST_SUITE

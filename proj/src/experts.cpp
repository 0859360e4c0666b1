#include "m2fmoe/experts.hpp"

#include <cmath>

#include "m2fmoe/fusion.hpp"

namespace m2fmoe {

namespace {

constexpr double kStdVarFloor = 1e-5;

}  // namespace

ResolutionFeatures build_resolution_features(const Tensor& recent, int64_t k,
                                             const spectral::ScaleGrid& grid,
                                             const spectral::WaveletSpec& spec,
                                             FeatureSelect select) {
    for (double v : recent.v)
        if (!std::isfinite(v)) throw DataError("branch input contains a non-finite value");
    ResolutionFeatures f;
    Tensor smoothed = smooth_conv(recent, k);
    f.diff = first_diff(smoothed);
    int64_t t_rd = f.diff.shape[0], c = f.diff.shape[1];

    // per-channel standardization with a variance floor; statistics are not
    // re-applied downstream (levels are restored by the fusion shift)
    f.std_diff = Tensor({t_rd, c});
    for (int64_t ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (int64_t i = 0; i < t_rd; ++i) mean += f.diff.at2(i, ch);
        mean /= static_cast<double>(t_rd);
        double var = 0.0;
        for (int64_t i = 0; i < t_rd; ++i) {
            double d = f.diff.at2(i, ch) - mean;
            var += d * d;
        }
        var /= static_cast<double>(t_rd);
        double denom = std::sqrt(std::max(var, kStdVarFloor));
        for (int64_t i = 0; i < t_rd; ++i) f.std_diff.at2(i, ch) = (f.diff.at2(i, ch) - mean) / denom;
    }

    if (select.fourier) {
        int64_t bins = t_rd / 2 + 1;
        f.spec_re = Tensor({bins, c});
        f.spec_im = Tensor({bins, c});
        f.mag_summary = Tensor({1, bins});
        std::vector<double> col(static_cast<size_t>(t_rd));
        for (int64_t ch = 0; ch < c; ++ch) {
            for (int64_t i = 0; i < t_rd; ++i) col[static_cast<size_t>(i)] = f.std_diff.at2(i, ch);
            ComplexTensor s = spectral::rfft(col);
            for (int64_t b = 0; b < bins; ++b) {
                f.spec_re.at2(b, ch) = s.re[static_cast<size_t>(b)];
                f.spec_im.at2(b, ch) = s.im[static_cast<size_t>(b)];
                f.mag_summary.v[static_cast<size_t>(b)] +=
                    std::hypot(s.re[static_cast<size_t>(b)], s.im[static_cast<size_t>(b)]) /
                    static_cast<double>(c);
            }
        }
    }

    if (select.wavelet) {
        int64_t s_count = grid.count();
        f.power = Tensor({c, s_count, t_rd});
        f.power_summary = Tensor({1, s_count * t_rd});
        std::vector<double> col(static_cast<size_t>(t_rd));
        for (int64_t ch = 0; ch < c; ++ch) {
            for (int64_t i = 0; i < t_rd; ++i) col[static_cast<size_t>(i)] = f.diff.at2(i, ch);
            ComplexTensor w = spectral::cwt(col, grid, spec);
            for (int64_t i = 0; i < s_count * t_rd; ++i) {
                double p = w.re[static_cast<size_t>(i)] * w.re[static_cast<size_t>(i)] +
                           w.im[static_cast<size_t>(i)] * w.im[static_cast<size_t>(i)];
                f.power.v[static_cast<size_t>(ch * s_count * t_rd + i)] = p;
                f.power_summary.v[static_cast<size_t>(i)] += p / static_cast<double>(c);
            }
        }
    }
    return f;
}

Tensor routing_forward(Tape& t, const Tensor& summary, const Tensor& w1t, const Tensor& b1,
                       const Tensor& w2t, const Tensor& b2) {
    Tensor h = matmul(t, summary, w1t);
    h = relu(t, add_vec(t, h, b1, 1));
    Tensor logits = add_vec(t, matmul(t, h, w2t), b2, 1);
    return softmax(t, logits, 1);
}

Tensor fourier_branch(Tape& t, const ResolutionFeatures& f, const std::vector<Tensor>& windows,
                      const FourierBranchTensors& p, int64_t t_p, BranchTrace* trace) {
    int64_t t_rd = f.std_diff.shape[0];
    int64_t e_count = static_cast<int64_t>(windows.size());

    Tensor alpha = routing_forward(t, f.mag_summary, p.route_w1t, p.route_b1, p.route_w2t, p.route_b2);
    Tensor alpha_vec = reshape(t, alpha, {e_count});

    Tensor spec_re = constant(t, f.spec_re);
    Tensor spec_im = constant(t, f.spec_im);
    Tensor agg_re, agg_im;
    for (int64_t e = 0; e < e_count; ++e) {
        Tensor re_e = scale_axis(t, spec_re, windows[static_cast<size_t>(e)], 0);
        Tensor im_e = scale_axis(t, spec_im, windows[static_cast<size_t>(e)], 0);
        if (trace && trace->want_z) trace->fourier_z.push_back(irfft_cols(t, re_e, im_e, t_rd));
        Tensor a_e = pick(t, alpha_vec, e);
        Tensor wre = mul(t, re_e, a_e);
        Tensor wim = mul(t, im_e, a_e);
        agg_re = e == 0 ? wre : add(t, agg_re, wre);
        agg_im = e == 0 ? wim : add(t, agg_im, wim);
    }
    if (trace) trace->alpha = alpha;

    Tensor y = irfft_cols(t, agg_re, agg_im, t_rd);
    Tensor out = matmul(t, p.proj_w, y);
    (void)t_p;
    return add_vec(t, out, p.proj_b, 0);
}

Tensor wavelet_expert_block(Tape& t, const Tensor& masked_power, const WaveletExpertTensors& p,
                            double dropout_rate, bool training, Rng& rng) {
    return conv_block_3x3(t, masked_power, p.conv1_w, p.conv1_b, p.conv2_w, p.conv2_b,
                          dropout_rate, training, rng);
}

Tensor wavelet_branch(Tape& t, const ResolutionFeatures& f, const std::vector<Tensor>& windows,
                      const WaveletBranchTensors& p, int64_t t_p, double dropout_rate,
                      bool training, Rng& rng, BranchTrace* trace) {
    int64_t c = f.power.shape[0], s_count = f.power.shape[1], t_rd = f.power.shape[2];
    int64_t e_count = static_cast<int64_t>(windows.size());

    Tensor eta = routing_forward(t, f.power_summary, p.route_w1t, p.route_b1, p.route_w2t, p.route_b2);
    Tensor eta_vec = reshape(t, eta, {e_count});
    if (trace) trace->eta = eta;

    Tensor power = constant(t, f.power);
    Tensor agg;
    for (int64_t e = 0; e < e_count; ++e) {
        Tensor masked = scale_axis(t, power, windows[static_cast<size_t>(e)], 1);
        Tensor z = wavelet_expert_block(t, masked, p.experts[static_cast<size_t>(e)], dropout_rate,
                                        training, rng);
        if (trace && trace->want_z) trace->wavelet_z.push_back(z);
        Tensor weighted = mul(t, z, pick(t, eta_vec, e));
        agg = e == 0 ? weighted : add(t, agg, weighted);
    }

    // per-channel flatten -> bottleneck -> time projection
    Tensor flat = reshape(t, agg, {c, s_count * t_rd});
    Tensor u = add_vec(t, matmul(t, flat, p.out2_wt), p.out2_b, 1);  // [C, H_o]
    Tensor out = matmul(t, p.out1_w, transpose(t, u));                            // [T_p, C]
    (void)t_p;
    return add_vec(t, out, p.out1_b, 0);
}

}  // namespace m2fmoe

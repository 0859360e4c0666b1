#include "m2fmoe/fusion.hpp"

#include <cmath>

namespace m2fmoe {

Tensor segment_recent(const Tensor& x, int64_t t_r) {
    if (x.rank() != 2) throw ShapeError("segment_recent: [T,C] input required");
    int64_t t_in = x.shape[0], c = x.shape[1];
    if (t_r < 1 || t_r > t_in)
        throw ConfigError("segment_recent: T_r=" + std::to_string(t_r) + " outside 1.." +
                          std::to_string(t_in));
    Tensor out({t_r, c});
    for (int64_t i = 0; i < t_r; ++i)
        for (int64_t j = 0; j < c; ++j) out.at2(i, j) = x.at2(t_in - t_r + i, j);
    return out;
}

Tensor smooth_conv(const Tensor& x, int64_t k) {
    if (x.rank() != 2) throw ShapeError("smooth_conv: [T,C] input required");
    int64_t t_len = x.shape[0], c = x.shape[1];
    if (k < 1) throw ConfigError("smooth_conv: k must be >= 1");
    if (k > t_len)
        throw ConfigError("smooth_conv: k=" + std::to_string(k) + " exceeds length " +
                          std::to_string(t_len));
    if (k == 1) return x;
    Tensor out({t_len, c});
    // moving average with left replicate padding, causal
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < t_len; ++i) {
            double acc = 0.0;
            for (int64_t j = i - k + 1; j <= i; ++j) acc += x.at2(std::max<int64_t>(j, 0), ch);
            out.at2(i, ch) = acc / static_cast<double>(k);
        }
    return out;
}

Tensor first_diff(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("first_diff: [T,C] input required");
    int64_t t_len = x.shape[0], c = x.shape[1];
    if (t_len < 2) throw ShapeError("first_diff: length >= 2 required");
    Tensor out({t_len - 1, c});
    for (int64_t i = 0; i + 1 < t_len; ++i)
        for (int64_t j = 0; j < c; ++j) out.at2(i, j) = x.at2(i + 1, j) - x.at2(i, j);
    return out;
}

Tensor positional_embedding(int64_t t_p) {
    if (t_p < 1) throw ConfigError("positional_embedding: T_p >= 1 required");
    Tensor out({t_p, 2});
    for (int64_t i = 0; i < t_p; ++i) {
        out.at2(i, 0) = std::sin(static_cast<double>(i));
        out.at2(i, 1) = std::cos(static_cast<double>(i));
    }
    return out;
}

Tensor maf_stack(Tape& t, const Tensor& rows, const MafStackTensors& p, BatchNormState& bn,
                 bool training, double dropout_rate, Rng& rng) {
    Tensor h = matmul(t, rows, transpose(t, p.u1_w));
    h = batch_norm(t, h, bn, training);
    h = relu(t, h);
    h = dropout(t, h, dropout_rate, training, rng);
    return matmul(t, h, transpose(t, p.u2_w));
}

Tensor multi_view_fuse(Tape& t, const Tensor& v_fourier, const Tensor& v_wavelet,
                       const Tensor& pos, const MafStackTensors& p, BatchNormState& bn,
                       bool training, double dropout_rate, Rng& rng) {
    Tensor fused = concat_cols(t, concat_cols(t, v_fourier, v_wavelet), pos);
    return maf_stack(t, fused, p, bn, training, dropout_rate, rng);
}

Tensor multi_resolution_fuse(Tape& t, const std::vector<Tensor>& h_per_res,
                             const std::vector<ResolutionOutputTensors>& maps,
                             const Tensor& last_observed_rows) {
    if (h_per_res.empty() || h_per_res.size() != maps.size())
        throw ShapeError("multi_resolution_fuse: one output map per resolution required");
    Tensor acc;
    for (size_t i = 0; i < h_per_res.size(); ++i) {
        Tensor mapped = add_vec(t, matmul(t, h_per_res[i], transpose(t, maps[i].weight)),
                                maps[i].bias, 1);
        acc = i == 0 ? mapped : add(t, acc, mapped);
    }
    return add(t, acc, last_observed_rows);
}

}  // namespace m2fmoe

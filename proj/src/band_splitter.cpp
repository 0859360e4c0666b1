#include "m2fmoe/band_splitter.hpp"

#include <algorithm>
#include <cmath>

namespace m2fmoe {

std::vector<double> normalize_boundaries(const std::vector<double>& raw) {
    int64_t e = static_cast<int64_t>(raw.size()) + 1;
    if (e == 1) return {};
    // softmax over (raw..., 0) gives band widths; partial sums the boundaries
    double m = 0.0;
    for (double r : raw) m = std::max(m, r);
    double z = std::exp(0.0 - m);
    for (double r : raw) z += std::exp(r - m);
    std::vector<double> beta(raw.size());
    double acc = 0.0;
    for (size_t i = 0; i < raw.size(); ++i) {
        acc += std::exp(raw[i] - m) / z;
        beta[i] = acc;
    }
    return beta;
}

Tensor normalize_boundaries(Tape& t, const Tensor& raw) {
    if (raw.rank() != 1) throw ShapeError("normalize_boundaries: rank-1 logits required");
    int64_t e = raw.shape[0] + 1;
    Tensor zero = constant(t, Tensor::scalar(0.0));
    Tensor logits = concat0(t, {raw, zero});
    Tensor widths = softmax(t, logits, 0);
    Tensor sums = cumsum(t, widths);
    return slice0(t, sums, 0, e - 1);
}

std::vector<int64_t> to_fourier_indices(const std::vector<double>& beta, int64_t f_bins) {
    int64_t e = static_cast<int64_t>(beta.size()) + 1;
    if (f_bins < e)
        throw ConfigError("band split infeasible: " + std::to_string(f_bins) + " bins for " +
                          std::to_string(e) + " bands");
    std::vector<int64_t> idx(beta.size());
    for (size_t i = 0; i < beta.size(); ++i)
        idx[i] = std::llround(beta[i] * static_cast<double>(f_bins - 1));
    // monotonic repair: strictly increasing, every band keeps >= 1 bin
    for (size_t i = 0; i < idx.size(); ++i) {
        idx[i] = std::clamp<int64_t>(idx[i], 1, f_bins - 1);
        if (i > 0 && idx[i] <= idx[i - 1]) idx[i] = idx[i - 1] + 1;
    }
    for (size_t i = idx.size(); i-- > 0;) {
        int64_t hi = f_bins - 1 - static_cast<int64_t>(idx.size() - 1 - i);
        if (idx[i] > hi) idx[i] = hi;
    }
    return idx;
}

std::vector<int64_t> to_wavelet_scale_indices(const std::vector<double>& beta, double gamma,
                                              const spectral::ScaleGrid& grid) {
    int64_t s_count = grid.count();
    int64_t e = static_cast<int64_t>(beta.size()) + 1;
    if (s_count < e)
        throw ConfigError("band split infeasible: " + std::to_string(s_count) + " scales for " +
                          std::to_string(e) + " bands");
    double a_min = grid.scale(0);
    double log_ratio = std::log(grid.ratio());
    // boundary frequency beta -> scale gamma/beta; nearest grid index in log
    // space. Scale order is reversed w.r.t. frequency order, so cut points are
    // re-sorted ascending: block j on the scale axis belongs to expert E-1-j.
    std::vector<int64_t> cuts(beta.size());
    for (size_t i = 0; i < beta.size(); ++i) {
        double a = gamma / beta[i];
        if (!(a > 0.0) || !std::isfinite(a))
            throw ConfigError("band split: boundary " + std::to_string(beta[i]) +
                              " maps outside the scale grid");
        int64_t nearest = std::llround(std::log(a / a_min) / log_ratio);
        nearest = std::clamp<int64_t>(nearest, 0, s_count - 1);
        // boundary scale itself belongs to the upper-frequency band
        cuts[beta.size() - 1 - i] = nearest + 1;
    }
    for (size_t i = 0; i < cuts.size(); ++i) {
        cuts[i] = std::clamp<int64_t>(cuts[i], 1, s_count - 1);
        if (i > 0 && cuts[i] <= cuts[i - 1]) cuts[i] = cuts[i - 1] + 1;
    }
    for (size_t i = cuts.size(); i-- > 0;) {
        int64_t hi = s_count - 1 - static_cast<int64_t>(cuts.size() - 1 - i);
        if (cuts[i] > hi) cuts[i] = hi;
    }
    return cuts;
}

SpectralMasks build_masks(const std::vector<int64_t>& fourier_idx,
                          const std::vector<int64_t>& wavelet_idx, int64_t f_bins, int64_t s_count,
                          int64_t e_count) {
    if (static_cast<int64_t>(fourier_idx.size()) != e_count - 1 ||
        static_cast<int64_t>(wavelet_idx.size()) != e_count - 1)
        throw ShapeError("build_masks: expected " + std::to_string(e_count - 1) +
                         " split points per view");
    auto check_strict = [](const std::vector<int64_t>& idx, int64_t limit) {
        for (size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 1 || idx[i] > limit - 1)
                throw ShapeError("build_masks: split point out of range");
            if (i > 0 && idx[i] <= idx[i - 1])
                throw ShapeError("build_masks: overlapping split points");
        }
    };
    check_strict(fourier_idx, f_bins);
    check_strict(wavelet_idx, s_count);

    SpectralMasks masks;
    masks.fourier.assign(static_cast<size_t>(e_count), std::vector<uint8_t>(static_cast<size_t>(f_bins), 0));
    masks.wavelet.assign(static_cast<size_t>(e_count), std::vector<uint8_t>(static_cast<size_t>(s_count), 0));
    for (int64_t ex = 0; ex < e_count; ++ex) {
        int64_t lo = ex == 0 ? 0 : fourier_idx[static_cast<size_t>(ex - 1)];
        int64_t hi = ex == e_count - 1 ? f_bins : fourier_idx[static_cast<size_t>(ex)];
        for (int64_t n = lo; n < hi; ++n) masks.fourier[static_cast<size_t>(ex)][static_cast<size_t>(n)] = 1;
    }
    // ascending block j on the scale axis covers expert e_count-1-j
    for (int64_t j = 0; j < e_count; ++j) {
        int64_t lo = j == 0 ? 0 : wavelet_idx[static_cast<size_t>(j - 1)];
        int64_t hi = j == e_count - 1 ? s_count : wavelet_idx[static_cast<size_t>(j)];
        int64_t ex = e_count - 1 - j;
        for (int64_t s = lo; s < hi; ++s) masks.wavelet[static_cast<size_t>(ex)][static_cast<size_t>(s)] = 1;
    }
    return masks;
}

double band_energy(View view, const ComplexTensor& coeffs, const std::vector<uint8_t>& mask,
                   const spectral::ScaleGrid* grid, int64_t n_time) {
    if (view == View::Fourier) {
        int64_t f_bins = coeffs.shape.back();
        if (static_cast<int64_t>(mask.size()) != f_bins)
            throw ShapeError("band_energy: mask length vs spectrum bins");
        if (n_time == 0) n_time = 2 * (f_bins - 1);
        double total = 0.0;
        for (int64_t n = 0; n < f_bins; ++n) {
            if (!mask[static_cast<size_t>(n)]) continue;
            bool self_conj = n == 0 || (n_time % 2 == 0 && n == n_time / 2);
            double w = self_conj ? 1.0 : 2.0;
            double r = coeffs.re[static_cast<size_t>(n)], i = coeffs.im[static_cast<size_t>(n)];
            total += w * (r * r + i * i);
        }
        return total;
    }
    if (grid == nullptr) throw ConfigError("band_energy: wavelet view requires the scale grid");
    if (coeffs.shape.size() != 2) throw ShapeError("band_energy: [S,N] coefficients required");
    int64_t s_count = coeffs.shape[0], n = coeffs.shape[1];
    if (static_cast<int64_t>(mask.size()) != s_count)
        throw ShapeError("band_energy: mask length vs scale count");
    double total = 0.0;
    for (int64_t s = 0; s < s_count; ++s) {
        if (!mask[static_cast<size_t>(s)]) continue;
        double a = grid->scale(s);
        double quad = grid->spacing(s) / (a * a);
        double row = 0.0;
        for (int64_t b = 0; b < n; ++b) {
            double r = coeffs.re[static_cast<size_t>(s * n + b)];
            double i = coeffs.im[static_cast<size_t>(s * n + b)];
            row += r * r + i * i;
        }
        total += row * quad;
    }
    return total;
}

namespace {

// telescoped sigmoid windows over arbitrary positions: exact partition of
// unity, near-binary away from boundaries
std::vector<Tensor> telescoped_windows(Tape& t, const std::vector<Tensor>& upper, int64_t len,
                                       int64_t e_count) {
    std::vector<Tensor> windows;
    windows.reserve(static_cast<size_t>(e_count));
    if (e_count == 1) {
        windows.push_back(constant(t, Tensor({len}, 1.0)));
        return windows;
    }
    windows.push_back(upper.front());
    for (int64_t e = 1; e < e_count - 1; ++e)
        windows.push_back(sub(t, upper[static_cast<size_t>(e)], upper[static_cast<size_t>(e - 1)]));
    windows.push_back(affine(t, upper.back(), -1.0, 1.0));
    return windows;
}

}  // namespace

std::vector<Tensor> fourier_band_windows(Tape& t, const Tensor& beta, int64_t f_bins,
                                         int64_t e_count, double sharpness) {
    if (e_count == 1) return telescoped_windows(t, {}, f_bins, 1);
    if (beta.rank() != 1 || beta.shape[0] != e_count - 1)
        throw ShapeError("fourier_band_windows: need E-1 boundaries");
    std::vector<double> pos(static_cast<size_t>(f_bins));
    for (int64_t n = 0; n < f_bins; ++n)
        pos[static_cast<size_t>(n)] = static_cast<double>(n) / static_cast<double>(f_bins - 1);
    Tensor positions = constant(t, Tensor::from({f_bins}, std::move(pos)));
    double tau = sharpness / static_cast<double>(f_bins - 1);
    std::vector<Tensor> upper;
    for (int64_t e = 0; e < e_count - 1; ++e) {
        Tensor b = pick(t, beta, e);
        Tensor diff = sub(t, b, positions);  // beta_e - x_n, scalar broadcast
        upper.push_back(sigmoid(t, scale(t, diff, 1.0 / tau)));
    }
    return telescoped_windows(t, upper, f_bins, e_count);
}

std::vector<Tensor> wavelet_band_windows(Tape& t, const Tensor& beta, double gamma,
                                         const spectral::ScaleGrid& grid, int64_t e_count,
                                         double sharpness) {
    int64_t s_count = grid.count();
    if (e_count == 1) return telescoped_windows(t, {}, s_count, 1);
    if (beta.rank() != 1 || beta.shape[0] != e_count - 1)
        throw ShapeError("wavelet_band_windows: need E-1 boundaries");
    // positions are log equivalent frequencies, uniform on the geometric grid
    std::vector<double> pos(static_cast<size_t>(s_count));
    for (int64_t s = 0; s < s_count; ++s)
        pos[static_cast<size_t>(s)] = std::log(gamma / grid.scale(s));
    Tensor positions = constant(t, Tensor::from({s_count}, std::move(pos)));
    double tau = sharpness * std::log(grid.ratio());
    Tensor log_beta = log_t(t, beta);
    std::vector<Tensor> upper;
    for (int64_t e = 0; e < e_count - 1; ++e) {
        Tensor b = pick(t, log_beta, e);
        Tensor diff = sub(t, b, positions);
        upper.push_back(sigmoid(t, scale(t, diff, 1.0 / tau)));
    }
    return telescoped_windows(t, upper, s_count, e_count);
}

}  // namespace m2fmoe

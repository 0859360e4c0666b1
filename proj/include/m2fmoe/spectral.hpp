#pragma once

#include <vector>

#include "m2fmoe/tensor.hpp"

namespace m2fmoe::spectral {

// In-place complex FFT for any length: radix-2 when N is a power of two,
// Bluestein's chirp-z otherwise. inverse=true applies the 1/N factor.
void fft(std::vector<double>& re, std::vector<double>& im, bool inverse);

// Real-input transform, bins 0..floor(N/2). Coefficient n is
// sum_t x[t]*exp(-j*2*pi*n*t/N).
ComplexTensor rfft(const std::vector<double>& x);
std::vector<double> irfft(const ComplexTensor& spectrum, int64_t n);

// Direct O(N^2) transform, the oracle rfft is tested against.
ComplexTensor dft_direct(const std::vector<double>& x);

// Complex Gaussian mother wavelet of order p: the p-th derivative of
// exp(-j*kappa*t)*exp(-(kappa*t)^2) with kappa = 1/2, L2-normalized. The
// half-rate parameterization keeps the measured center frequency below
// Nyquist so scale-1 analysis is alias-free.
class Wavelet {
public:
    explicit Wavelet(int order);

    int order() const { return order_; }
    // psi evaluated at time t (natural units)
    void eval(double t, double& re, double& im) const;
    // closed-form spectrum psi_hat(omega), omega in rad per unit time; used
    // to build alias-free CWT kernels directly in the frequency domain
    void eval_hat(double omega, double& re, double& im) const;
    // |psi| falls below 1e-8 of its peak outside +-support_radius
    double support_radius() const { return support_radius_; }

private:
    int order_ = 7;
    std::vector<double> coef_re_, coef_im_;  // polynomial factor
    double norm_ = 1.0;
    double support_radius_ = 0.0;
};

struct WaveletSpec {
    int order = 7;
    double center_freq = 0.0;     // cycles per sample at scale 1, in (0, 0.5)
    double admissibility = 0.0;   // C_psi, finite and positive
    double gamma = 0.0;           // center_freq / f_nyq

    static WaveletSpec complex_gaussian(int order = 7);
};

// Peak of |psi_hat| located by dense numerical scan, cycles per unit time.
double wavelet_center_frequency(int order, int grid_per_unit = 64);
double wavelet_admissibility(int order, int grid_per_unit = 64);

struct ScaleGrid {
    std::vector<double> scales;  // strictly increasing, all > 0

    int64_t count() const { return static_cast<int64_t>(scales.size()); }
    double scale(int64_t i) const { return scales[static_cast<size_t>(i)]; }
    // geometric spacing ratio between neighbours
    double ratio() const;
    // local grid spacing around scale i (for da/a^2 quadrature)
    double spacing(int64_t i) const;

    static ScaleGrid geometric(double a_min, double a_max, int64_t count);
    // Covers pseudo-frequencies from one cycle per window up to Nyquist:
    // a_min = gamma (normalized f = 1), a_max = gamma * n / 2.
    static ScaleGrid for_window(const WaveletSpec& spec, int64_t n, int64_t count);
};

// Wavelet coefficients, shape [S x N]; zero-extension of x outside its
// support, wavelet truncated where |psi| < 1e-8 of peak.
ComplexTensor cwt(const std::vector<double>& x, const ScaleGrid& grid, const WaveletSpec& spec);

// |W|^2, elementwise
Tensor power_spectrogram(const ComplexTensor& w);

}  // namespace m2fmoe::spectral

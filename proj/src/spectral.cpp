#include "m2fmoe/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

namespace m2fmoe::spectral {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kSupportCutoff = 1e-8;

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

int64_t next_pow2(int64_t n) {
    int64_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

// iterative radix-2, n must be a power of two
void fft_pow2(std::vector<double>& re, std::vector<double>& im, bool inverse) {
    const int64_t n = static_cast<int64_t>(re.size());
    // bit reversal
    for (int64_t i = 1, j = 0; i < n; ++i) {
        int64_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[static_cast<size_t>(i)], re[static_cast<size_t>(j)]);
            std::swap(im[static_cast<size_t>(i)], im[static_cast<size_t>(j)]);
        }
    }
    for (int64_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        double wr = std::cos(ang), wi = std::sin(ang);
        for (int64_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (int64_t j = 0; j < len / 2; ++j) {
                size_t a = static_cast<size_t>(i + j);
                size_t b = static_cast<size_t>(i + j + len / 2);
                double tr = re[b] * cr - im[b] * ci;
                double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
    if (inverse) {
        double inv = 1.0 / static_cast<double>(n);
        for (size_t i = 0; i < re.size(); ++i) {
            re[i] *= inv;
            im[i] *= inv;
        }
    }
}

// chirp-z for arbitrary n; angles reduced mod 2n before the multiply so
// large n^2 terms keep full precision
void fft_bluestein(std::vector<double>& re, std::vector<double>& im, bool inverse) {
    const int64_t n = static_cast<int64_t>(re.size());
    const int64_t m = next_pow2(2 * n - 1);
    double sign = inverse ? 1.0 : -1.0;
    std::vector<double> ar(static_cast<size_t>(m), 0.0), ai(static_cast<size_t>(m), 0.0);
    std::vector<double> br(static_cast<size_t>(m), 0.0), bi(static_cast<size_t>(m), 0.0);
    std::vector<double> cr(static_cast<size_t>(n)), ci(static_cast<size_t>(n));
    for (int64_t k = 0; k < n; ++k) {
        int64_t k2 = (k * k) % (2 * n);
        double ang = sign * kPi * static_cast<double>(k2) / static_cast<double>(n);
        cr[static_cast<size_t>(k)] = std::cos(ang);
        ci[static_cast<size_t>(k)] = std::sin(ang);
        ar[static_cast<size_t>(k)] = re[static_cast<size_t>(k)] * cr[static_cast<size_t>(k)] -
                                     im[static_cast<size_t>(k)] * ci[static_cast<size_t>(k)];
        ai[static_cast<size_t>(k)] = re[static_cast<size_t>(k)] * ci[static_cast<size_t>(k)] +
                                     im[static_cast<size_t>(k)] * cr[static_cast<size_t>(k)];
        br[static_cast<size_t>(k)] = cr[static_cast<size_t>(k)];
        bi[static_cast<size_t>(k)] = -ci[static_cast<size_t>(k)];
        if (k > 0) {
            br[static_cast<size_t>(m - k)] = cr[static_cast<size_t>(k)];
            bi[static_cast<size_t>(m - k)] = -ci[static_cast<size_t>(k)];
        }
    }
    fft_pow2(ar, ai, false);
    fft_pow2(br, bi, false);
    for (int64_t i = 0; i < m; ++i) {
        size_t s = static_cast<size_t>(i);
        double tr = ar[s] * br[s] - ai[s] * bi[s];
        ai[s] = ar[s] * bi[s] + ai[s] * br[s];
        ar[s] = tr;
    }
    fft_pow2(ar, ai, true);
    for (int64_t k = 0; k < n; ++k) {
        size_t s = static_cast<size_t>(k);
        re[s] = ar[s] * cr[s] - ai[s] * ci[s];
        im[s] = ar[s] * ci[s] + ai[s] * cr[s];
    }
    if (inverse) {
        double inv = 1.0 / static_cast<double>(n);
        for (int64_t k = 0; k < n; ++k) {
            re[static_cast<size_t>(k)] *= inv;
            im[static_cast<size_t>(k)] *= inv;
        }
    }
}

}  // namespace

void fft(std::vector<double>& re, std::vector<double>& im, bool inverse) {
    if (re.size() != im.size()) throw ShapeError("fft: real/imag length mismatch");
    int64_t n = static_cast<int64_t>(re.size());
    if (n == 0) throw ShapeError("fft: empty input");
    if (n == 1) return;
    if (is_pow2(n))
        fft_pow2(re, im, inverse);
    else
        fft_bluestein(re, im, inverse);
}

ComplexTensor rfft(const std::vector<double>& x) {
    int64_t n = static_cast<int64_t>(x.size());
    if (n < 2) throw ShapeError("rfft: length >= 2 required, got " + std::to_string(n));
    std::vector<double> re = x, im(x.size(), 0.0);
    fft(re, im, false);
    int64_t bins = n / 2 + 1;
    ComplexTensor out({bins});
    for (int64_t i = 0; i < bins; ++i) {
        out.re[static_cast<size_t>(i)] = re[static_cast<size_t>(i)];
        out.im[static_cast<size_t>(i)] = im[static_cast<size_t>(i)];
    }
    return out;
}

std::vector<double> irfft(const ComplexTensor& spectrum, int64_t n) {
    if (spectrum.shape.size() != 1)
        throw ShapeError("irfft: rank-1 spectrum required");
    int64_t bins = spectrum.shape[0];
    if (bins != n / 2 + 1)
        throw ShapeError("irfft: " + std::to_string(bins) + " bins inconsistent with n=" +
                         std::to_string(n));
    std::vector<double> re(static_cast<size_t>(n), 0.0), im(static_cast<size_t>(n), 0.0);
    // Hermitian extension; bins 0 and n/2 (even n) are real by symmetry
    for (int64_t f = 0; f < bins; ++f) {
        bool self_conj = f == 0 || (n % 2 == 0 && f == n / 2);
        re[static_cast<size_t>(f)] = spectrum.re[static_cast<size_t>(f)];
        im[static_cast<size_t>(f)] = self_conj ? 0.0 : spectrum.im[static_cast<size_t>(f)];
        if (!self_conj && f > 0) {
            re[static_cast<size_t>(n - f)] = spectrum.re[static_cast<size_t>(f)];
            im[static_cast<size_t>(n - f)] = -spectrum.im[static_cast<size_t>(f)];
        }
    }
    fft(re, im, true);
    return re;
}

ComplexTensor dft_direct(const std::vector<double>& x) {
    int64_t n = static_cast<int64_t>(x.size());
    if (n < 2) throw ShapeError("dft_direct: length >= 2 required");
    int64_t bins = n / 2 + 1;
    ComplexTensor out({bins});
    for (int64_t k = 0; k < bins; ++k) {
        double sr = 0.0, si = 0.0;
        for (int64_t t = 0; t < n; ++t) {
            double ang = -2.0 * kPi * static_cast<double>(k * t) / static_cast<double>(n);
            sr += x[static_cast<size_t>(t)] * std::cos(ang);
            si += x[static_cast<size_t>(t)] * std::sin(ang);
        }
        out.re[static_cast<size_t>(k)] = sr;
        out.im[static_cast<size_t>(k)] = si;
    }
    return out;
}

// --- complex Gaussian wavelet ---------------------------------------------

namespace {

// half-rate time dilation; see header
constexpr double kKappa = 0.5;

// polynomial recurrence for d^p/dtau^p of exp(-j*tau - tau^2):
// P_{p+1} = P_p' - (2*tau + j) * P_p
void derivative_poly(int order, std::vector<double>& cre, std::vector<double>& cim) {
    cre = {1.0};
    cim = {0.0};
    for (int p = 0; p < order; ++p) {
        std::vector<double> nre(cre.size() + 1, 0.0), nim(cre.size() + 1, 0.0);
        for (size_t k = 1; k < cre.size(); ++k) {  // P'
            nre[k - 1] += static_cast<double>(k) * cre[k];
            nim[k - 1] += static_cast<double>(k) * cim[k];
        }
        for (size_t k = 0; k < cre.size(); ++k) {  // -2*tau*P
            nre[k + 1] -= 2.0 * cre[k];
            nim[k + 1] -= 2.0 * cim[k];
        }
        for (size_t k = 0; k < cre.size(); ++k) {  // -j*P
            nre[k] += cim[k];
            nim[k] -= cre[k];
        }
        cre = std::move(nre);
        cim = std::move(nim);
    }
}

}  // namespace

Wavelet::Wavelet(int order) : order_(order) {
    if (order < 1 || order > 8)
        throw ConfigError("wavelet: complex Gaussian order must lie in 1..8, got " +
                          std::to_string(order));
    derivative_poly(order, coef_re_, coef_im_);
    // normalize to unit L2 energy on a dense grid, then locate the 1e-8 support
    const double dt = 1.0 / 256.0;
    const double t_max = 24.0;  // generous; tails vanish well before this
    double energy = 0.0;
    double peak = 0.0;
    norm_ = 1.0;
    for (double t = -t_max; t <= t_max; t += dt) {
        double r, i;
        eval(t, r, i);
        double mag2 = r * r + i * i;
        energy += mag2 * dt;
        peak = std::max(peak, mag2);
    }
    norm_ = 1.0 / std::sqrt(energy);
    peak = std::sqrt(peak) * norm_;
    double radius = 0.0;
    for (double t = 0.0; t <= t_max; t += dt) {
        double r, i;
        eval(t, r, i);
        if (std::hypot(r, i) >= kSupportCutoff * peak) radius = t;
    }
    support_radius_ = radius + dt;
}

void Wavelet::eval(double t, double& re_out, double& im_out) const {
    double tau = kKappa * t;
    // Horner on the complex polynomial
    double pr = coef_re_.back(), pi = coef_im_.back();
    for (size_t k = coef_re_.size() - 1; k-- > 0;) {
        double nr = pr * tau + coef_re_[k];
        double ni = pi * tau + coef_im_[k];
        pr = nr;
        pi = ni;
    }
    double env = std::exp(-tau * tau);
    double cr = std::cos(tau), ci = -std::sin(tau);  // exp(-j*tau)
    double gr = env * cr, gi = env * ci;
    re_out = norm_ * (pr * gr - pi * gi);
    im_out = norm_ * (pr * gi + pi * gr);
}

void Wavelet::eval_hat(double omega, double& re_out, double& im_out) const {
    // time side evaluates N * (d^p/dtau^p g)(kappa t) with g(tau) =
    // exp(-j tau - tau^2); its transform is
    // N * kappa^-1 * (j omega/kappa)^p * sqrt(pi) * exp(-(omega/kappa+1)^2/4)
    double u = omega / kKappa;
    double mag = norm_ / kKappa * std::sqrt(kPi) * std::exp(-(u + 1.0) * (u + 1.0) / 4.0);
    double re = mag, im = 0.0;
    for (int k = 0; k < order_; ++k) {
        double nr = -im * u;  // multiply by j*omega/kappa
        double ni = re * u;
        re = nr;
        im = ni;
    }
    re_out = re;
    im_out = im;
}

namespace {

// dense spectrum of the sampled wavelet; returns (freqs, |psi_hat|) for the
// positive and negative halves folded to |f|
void wavelet_spectrum(const Wavelet& w, int grid_per_unit, std::vector<double>& freq,
                      std::vector<double>& mag) {
    double radius = w.support_radius();
    double dt = 1.0 / static_cast<double>(grid_per_unit);
    int64_t half = static_cast<int64_t>(std::ceil(radius / dt));
    int64_t n = next_pow2(8 * (2 * half + 1));  // zero padding for resolution
    std::vector<double> re(static_cast<size_t>(n), 0.0), im(static_cast<size_t>(n), 0.0);
    for (int64_t k = -half; k <= half; ++k) {
        double r, i;
        w.eval(static_cast<double>(k) * dt, r, i);
        size_t idx = static_cast<size_t>((k + n) % n);
        re[idx] = r;
        im[idx] = i;
    }
    fft(re, im, false);
    freq.resize(static_cast<size_t>(n));
    mag.resize(static_cast<size_t>(n));
    for (int64_t b = 0; b < n; ++b) {
        int64_t shifted = b <= n / 2 ? b : b - n;  // signed bin
        freq[static_cast<size_t>(b)] =
            static_cast<double>(shifted) / (static_cast<double>(n) * dt);  // cycles per unit
        mag[static_cast<size_t>(b)] = std::hypot(re[static_cast<size_t>(b)], im[static_cast<size_t>(b)]);
    }
}

}  // namespace

double wavelet_center_frequency(int order, int grid_per_unit) {
    Wavelet w(order);
    std::vector<double> freq, mag;
    wavelet_spectrum(w, grid_per_unit, freq, mag);
    size_t best = 0;
    for (size_t i = 1; i < mag.size(); ++i)
        if (mag[i] > mag[best]) best = i;
    // parabolic refinement on |psi_hat| around the peak bin
    double f0 = std::abs(freq[best]);
    size_t n = mag.size();
    size_t prev = (best + n - 1) % n, next = (best + 1) % n;
    double y0 = mag[prev], y1 = mag[best], y2 = mag[next];
    double denom = y0 - 2.0 * y1 + y2;
    if (std::abs(denom) > 1e-30) {
        double delta = 0.5 * (y0 - y2) / denom;
        double df = std::abs(freq[next] - freq[best]);
        f0 = std::abs(std::abs(freq[best]) + delta * df * (freq[best] < 0.0 ? -1.0 : 1.0));
    }
    if (!(f0 > 0.0)) throw NumericError("wavelet_center_frequency: degenerate spectrum");
    return f0;
}

double wavelet_admissibility(int order, int grid_per_unit) {
    Wavelet w(order);
    std::vector<double> freq, mag;
    wavelet_spectrum(w, grid_per_unit, freq, mag);
    double df = std::abs(freq[1] - freq[0]);
    double c = 0.0;
    for (size_t i = 0; i < mag.size(); ++i) {
        double f = std::abs(freq[i]);
        if (f < df / 2.0) continue;  // skip the DC bin; psi_hat(0) = 0 anyway
        c += mag[i] * mag[i] / f * df;
    }
    if (!std::isfinite(c) || c <= 0.0)
        throw NumericError("wavelet_admissibility: non-finite constant");
    return c;
}

WaveletSpec WaveletSpec::complex_gaussian(int order) {
    WaveletSpec spec;
    spec.order = order;
    spec.center_freq = wavelet_center_frequency(order);
    spec.admissibility = wavelet_admissibility(order);
    spec.gamma = spec.center_freq / 0.5;
    return spec;
}

// --- scale grid ------------------------------------------------------------

ScaleGrid ScaleGrid::geometric(double a_min, double a_max, int64_t count) {
    if (!(a_min > 0.0) || !(a_max > a_min))
        throw ConfigError("scale grid: need 0 < a_min < a_max");
    if (count < 2) throw ConfigError("scale grid: at least two scales required");
    ScaleGrid g;
    g.scales.resize(static_cast<size_t>(count));
    double r = std::pow(a_max / a_min, 1.0 / static_cast<double>(count - 1));
    for (int64_t i = 0; i < count; ++i)
        g.scales[static_cast<size_t>(i)] = a_min * std::pow(r, static_cast<double>(i));
    return g;
}

ScaleGrid ScaleGrid::for_window(const WaveletSpec& spec, int64_t n, int64_t count) {
    if (n < 4) throw ConfigError("scale grid: window length >= 4 required");
    // normalized f=1 (Nyquist) down to one cycle per window (f = 2/n)
    double a_min = spec.gamma;
    double a_max = spec.gamma * static_cast<double>(n) / 2.0;
    return geometric(a_min, a_max, count);
}

double ScaleGrid::ratio() const {
    if (scales.size() < 2) return 1.0;
    return scales[1] / scales[0];
}

double ScaleGrid::spacing(int64_t i) const {
    double r = ratio();
    return scales[static_cast<size_t>(i)] * (std::sqrt(r) - 1.0 / std::sqrt(r));
}

// --- cwt --------------------------------------------------------------------

ComplexTensor cwt(const std::vector<double>& x, const ScaleGrid& grid, const WaveletSpec& spec) {
    int64_t n = static_cast<int64_t>(x.size());
    if (n < 4) throw ShapeError("cwt: signal length >= 4 required");
    for (double a : grid.scales)
        if (!(a > 0.0)) throw ConfigError("cwt: non-positive scale in grid");
    Wavelet w(spec.order);
    int64_t s_count = grid.count();
    ComplexTensor out({s_count, n});
    // group scales by padded FFT size so the signal transform is shared
    std::vector<double> base_xr, base_xi;
    int64_t base_m = 0;
    for (int64_t s = 0; s < s_count; ++s) {
        double a = grid.scale(s);
        int64_t half = static_cast<int64_t>(std::ceil(w.support_radius() * a));
        half = std::max<int64_t>(half, 1);
        int64_t m = next_pow2(n + 2 * half + 1);
        if (m != base_m) {
            base_m = m;
            base_xr.assign(static_cast<size_t>(m), 0.0);
            base_xi.assign(static_cast<size_t>(m), 0.0);
            std::copy(x.begin(), x.end(), base_xr.begin());
            fft(base_xr, base_xi, false);
        }
        // kernel spectrum from the closed-form psi_hat: W(a,.) = x * h with
        // h_hat(w) = sqrt(a) * conj(psi_hat(a w)); alias-free even at scales
        // whose pseudo-frequency sits at Nyquist
        std::vector<double> wr(static_cast<size_t>(m)), wi(static_cast<size_t>(m));
        double amp = std::sqrt(a);
        for (int64_t q = 0; q < m; ++q) {
            int64_t signed_q = q <= m / 2 ? q : q - m;
            double omega = 2.0 * kPi * static_cast<double>(signed_q) / static_cast<double>(m);
            double hr, hi;
            w.eval_hat(a * omega, hr, hi);
            double kr = amp * hr, ki = -amp * hi;  // conj
            size_t qi = static_cast<size_t>(q);
            wr[qi] = base_xr[qi] * kr - base_xi[qi] * ki;
            wi[qi] = base_xr[qi] * ki + base_xi[qi] * kr;
        }
        fft(wr, wi, true);
        for (int64_t b = 0; b < n; ++b) {
            out.re[static_cast<size_t>(s * n + b)] = wr[static_cast<size_t>(b)];
            out.im[static_cast<size_t>(s * n + b)] = wi[static_cast<size_t>(b)];
        }
    }
    return out;
}

Tensor power_spectrogram(const ComplexTensor& w) {
    Tensor out(w.shape, 0.0);
    for (size_t i = 0; i < w.re.size(); ++i) out.v[i] = w.re[i] * w.re[i] + w.im[i] * w.im[i];
    return out;
}

}  // namespace m2fmoe::spectral

#pragma once

#include <vector>

#include "m2fmoe/spectral.hpp"
#include "m2fmoe/tensor.hpp"

namespace m2fmoe {

// Learnable shared split points over the normalized frequency range (0,1),
// common to both spectral views.
struct BandBoundaries {
    std::vector<double> raw;    // E-1 logits (a fixed 0 logit is appended)
    std::vector<double> beta;   // E-1 boundaries, strictly increasing in (0,1)
    double gamma = 0.0;         // center_freq / f_nyq
};

struct SpectralMasks {
    // E binary vectors each; exact contiguous partitions of their view
    std::vector<std::vector<uint8_t>> fourier;  // length F each
    std::vector<std::vector<uint8_t>> wavelet;  // length S each
};

// softmax-of-widths cumulative construction; E-1 raw logits -> E-1 ordered
// boundaries. E=1 gives an empty list.
std::vector<double> normalize_boundaries(const std::vector<double>& raw);
// Tape version used during training so gradients reach the raw logits.
Tensor normalize_boundaries(Tape& t, const Tensor& raw);

// round(beta*(F-1)) with monotonic repair so every band keeps >= 1 bin
std::vector<int64_t> to_fourier_indices(const std::vector<double>& beta, int64_t F);

// Frequency boundary f maps to scale a = gamma/f (Theorem-1 correspondence);
// returns ascending scale-index split points. Expert e owns the scales whose
// equivalent frequencies lie in [beta_{e-1}, beta_e), i.e. band order is
// reversed on the scale axis.
std::vector<int64_t> to_wavelet_scale_indices(const std::vector<double>& beta, double gamma,
                                              const spectral::ScaleGrid& grid);

SpectralMasks build_masks(const std::vector<int64_t>& fourier_idx,
                          const std::vector<int64_t>& wavelet_idx, int64_t F, int64_t S,
                          int64_t E);

enum class View { Fourier, Wavelet };

// Fourier view: sum over masked bins of |F[n]|^2 with Hermitian-symmetry
// weights (interior bins count twice) so the full mask reproduces Parseval's
// N*sum|x|^2; n_time disambiguates whether the last bin is Nyquist. Wavelet
// view: sum over masked scales of sum_b |W|^2 * da/a^2.
double band_energy(View view, const ComplexTensor& coeffs, const std::vector<uint8_t>& mask,
                   const spectral::ScaleGrid* grid = nullptr, int64_t n_time = 0);

// Differentiable band windows: telescoped sigmoids over bin (Fourier) or
// log-equivalent-frequency (wavelet) positions. They form an exact partition
// of unity, agree with the binary masks away from boundaries, and carry the
// gradient that the hard index rounding blocks. `sharpness` is the
// transition width in index units.
std::vector<Tensor> fourier_band_windows(Tape& t, const Tensor& beta, int64_t F, int64_t E,
                                         double sharpness);
std::vector<Tensor> wavelet_band_windows(Tape& t, const Tensor& beta, double gamma,
                                         const spectral::ScaleGrid& grid, int64_t E,
                                         double sharpness);

}  // namespace m2fmoe

#pragma once

#include <vector>

#include "m2fmoe/band_splitter.hpp"
#include "m2fmoe/spectral.hpp"
#include "m2fmoe/tensor.hpp"

namespace m2fmoe {

// Per-resolution constants derived from one window; everything here is data
// (no parameter dependence), so it is computed once and fed to the tape as
// constant leaves.
struct ResolutionFeatures {
    Tensor diff;           // [T_rd, C] differenced k-smoothed recent segment
    Tensor std_diff;       // per-channel standardized copy (Fourier branch)
    Tensor spec_re;        // [F, C] rfft of std_diff
    Tensor spec_im;
    Tensor mag_summary;    // [1, F] channel-averaged |spectrum|
    Tensor power;          // [C, S, T_rd] CWT power spectrogram of diff
    Tensor power_summary;  // [1, S*T_rd] flattened channel-mean spectrogram
};

struct FeatureSelect {
    bool fourier = true;
    bool wavelet = true;
};

ResolutionFeatures build_resolution_features(const Tensor& recent, int64_t k,
                                             const spectral::ScaleGrid& grid,
                                             const spectral::WaveletSpec& spec,
                                             FeatureSelect select = {});

// bound (on-tape) parameter tensors; routing weights are stored
// pre-transposed so the per-sample loop reuses one tape node
struct FourierBranchTensors {
    Tensor route_w1t, route_b1, route_w2t, route_b2;  // [F,H_r], [H_r,E]
    Tensor proj_w, proj_b;                            // T_rd -> T_p per channel
};

struct WaveletExpertTensors {
    Tensor conv1_w, conv1_b;  // C -> H_w*C, 3x3
    Tensor conv2_w, conv2_b;  // H_w*C -> C, 3x3
};

struct WaveletBranchTensors {
    std::vector<WaveletExpertTensors> experts;
    Tensor route_w1t, route_b1, route_w2t, route_b2;  // [S*T_rd,H_r], [H_r,E]
    Tensor out2_wt, out2_b;                           // [S*T_rd,H_o] per channel
    Tensor out1_w, out1_b;                            // H_o -> T_p
};

// expert outputs and routing weights collected for the losses and dumps;
// want_z=false keeps only the routing weights (skips the per-expert inverse
// FFTs the losses need)
struct BranchTrace {
    bool want_z = true;
    std::vector<Tensor> fourier_z;  // E tensors [T_rd, C]
    std::vector<Tensor> wavelet_z;  // E tensors [C, S, T_rd]
    Tensor alpha;                   // [1, E]
    Tensor eta;                     // [1, E]
};

// two linear layers with ReLU between and softmax output; weights arrive
// already transposed ([in,hidden] and [hidden,E])
Tensor routing_forward(Tape& t, const Tensor& summary, const Tensor& w1t, const Tensor& b1,
                       const Tensor& w2t, const Tensor& b2);

// masked spectra -> routing -> weighted spectral sum -> inverse FFT -> time
// projection. Windows are the differentiable band windows shared with the
// wavelet view. When `trace` is set the per-expert inverse FFTs are recorded.
Tensor fourier_branch(Tape& t, const ResolutionFeatures& f, const std::vector<Tensor>& windows,
                      const FourierBranchTensors& p, int64_t t_p, BranchTrace* trace);

Tensor wavelet_expert_block(Tape& t, const Tensor& masked_power, const WaveletExpertTensors& p,
                            double dropout_rate, bool training, Rng& rng);

Tensor wavelet_branch(Tape& t, const ResolutionFeatures& f, const std::vector<Tensor>& windows,
                      const WaveletBranchTensors& p, int64_t t_p, double dropout_rate,
                      bool training, Rng& rng, BranchTrace* trace);

}  // namespace m2fmoe

#pragma once

#include <vector>

#include "m2fmoe/tensor.hpp"

namespace m2fmoe {

// trailing T_r rows of the input window
Tensor segment_recent(const Tensor& x, int64_t t_r);

// moving average of window k along time with left replicate padding; k=1 is
// the identity
Tensor smooth_conv(const Tensor& x, int64_t k);

// x[t+1] - x[t], output one row shorter
Tensor first_diff(const Tensor& x);

// [T_p, 2] fixed sinusoidal embedding, columns sin(t), cos(t)
Tensor positional_embedding(int64_t t_p);

struct MafStackTensors {
    Tensor u1_w;  // [H', width]
    Tensor u2_w;  // [C, H']
};

// stacked projection block over fused rows [R, width]: W_u1 -> batch norm ->
// ReLU -> dropout -> W_u2
Tensor maf_stack(Tape& t, const Tensor& rows, const MafStackTensors& p, BatchNormState& bn,
                 bool training, double dropout_rate, Rng& rng);

// single-window convenience form of the multi-view fusion
Tensor multi_view_fuse(Tape& t, const Tensor& v_fourier, const Tensor& v_wavelet,
                       const Tensor& pos, const MafStackTensors& p, BatchNormState& bn,
                       bool training, double dropout_rate, Rng& rng);

struct ResolutionOutputTensors {
    Tensor weight;  // [C, C]
    Tensor bias;    // [C]
};

// sum of per-resolution channel maps, then the last observed slice restores
// levels from the differenced space
Tensor multi_resolution_fuse(Tape& t, const std::vector<Tensor>& h_per_res,
                             const std::vector<ResolutionOutputTensors>& maps,
                             const Tensor& last_observed_rows);

}  // namespace m2fmoe

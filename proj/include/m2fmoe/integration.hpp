#pragma once

#include <vector>

#include "m2fmoe/tensor.hpp"

namespace m2fmoe {

// time-axis linear map: H_h[p,c] = sum_t W_g[t,p] * X[t,c]
Tensor historical_projection(Tape& t, const Tensor& x, const Tensor& w_g);

// G = sigmoid(Linear([H_r; H_h])); output G*H_r + (1-G)*H_h
Tensor temporal_gate(Tape& t, const Tensor& h_r, const Tensor& h_h, const Tensor& gate_w,
                     const Tensor& gate_b);

// mean squared error over all entries
Tensor loss_pred(Tape& t, const Tensor& x_hat, const Tensor& x_true);

// population standard deviation of the experts' l2 norms (one branch)
Tensor loss_div(Tape& t, const std::vector<Tensor>& expert_outputs);

// (1/E) sum_e (1 - cossim(fourier_z_e, wavelet_z_e)); the wavelet outputs are
// reduced to per-channel time profiles (mean over scales) before comparison.
// A zero-norm side contributes similarity 0 (loss 1).
Tensor loss_cons(Tape& t, const std::vector<Tensor>& fourier_z,
                 const std::vector<Tensor>& wavelet_z);

// pred + lambda*div + mu*cons; aborts on non-finite components
Tensor loss_total(Tape& t, const Tensor& pred, const Tensor& div, const Tensor& cons,
                  double lambda, double mu);

}  // namespace m2fmoe

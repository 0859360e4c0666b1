#include "m2fmoe/integration.hpp"

#include <cmath>

namespace m2fmoe {

Tensor historical_projection(Tape& t, const Tensor& x, const Tensor& w_g) {
    if (x.rank() != 2 || w_g.rank() != 2 || x.shape[0] != w_g.shape[0])
        throw ShapeError("historical_projection: X [T_in,C] vs W_g [T_in,T_p], got " +
                         shape_str(x.shape) + " and " + shape_str(w_g.shape));
    return matmul(t, transpose(t, w_g), x);
}

Tensor temporal_gate(Tape& t, const Tensor& h_r, const Tensor& h_h, const Tensor& gate_w,
                     const Tensor& gate_b) {
    if (!h_r.same_shape(h_h))
        throw ShapeError("temporal_gate: operand shapes differ, " + shape_str(h_r.shape) +
                         " vs " + shape_str(h_h.shape));
    Tensor gin = concat_cols(t, h_r, h_h);
    Tensor g = sigmoid(t, add_vec(t, matmul(t, gin, transpose(t, gate_w)), gate_b, 1));
    // G*H_r + (1-G)*H_h
    return add(t, h_h, mul(t, g, sub(t, h_r, h_h)));
}

Tensor loss_pred(Tape& t, const Tensor& x_hat, const Tensor& x_true) {
    if (!x_hat.same_shape(x_true))
        throw ShapeError("loss_pred: shapes differ, " + shape_str(x_hat.shape) + " vs " +
                         shape_str(x_true.shape));
    Tensor d = sub(t, x_hat, x_true);
    return reduce_mean(t, mul(t, d, d));
}

Tensor loss_div(Tape& t, const std::vector<Tensor>& expert_outputs) {
    if (expert_outputs.empty()) throw ShapeError("loss_div: at least one expert required");
    std::vector<Tensor> norms;
    norms.reserve(expert_outputs.size());
    for (const Tensor& z : expert_outputs) norms.push_back(l2_norm(t, z));
    Tensor all = concat0(t, norms);
    Tensor mean = reduce_mean(t, all);
    Tensor dev = sub(t, all, mean);
    return sqrt_t(t, reduce_mean(t, mul(t, dev, dev)));
}

Tensor loss_cons(Tape& t, const std::vector<Tensor>& fourier_z,
                 const std::vector<Tensor>& wavelet_z) {
    if (fourier_z.empty() || fourier_z.size() != wavelet_z.size())
        throw ShapeError("loss_cons: paired expert outputs required");
    Tensor acc;
    for (size_t e = 0; e < fourier_z.size(); ++e) {
        const Tensor& fz = fourier_z[e];
        const Tensor& wz = wavelet_z[e];
        Tensor a = reshape(t, fz, {fz.numel()});
        // [C,S,T] -> mean over scales -> [C,T] -> [T,C] to match the Fourier layout
        Tensor profile = transpose(t, reduce_mean_axis(t, wz, 1));
        Tensor b = reshape(t, profile, {profile.numel()});
        if (a.numel() != b.numel())
            throw ShapeError("loss_cons: flattened lengths differ, " + std::to_string(a.numel()) +
                             " vs " + std::to_string(b.numel()));
        Tensor na = l2_norm(t, a);
        Tensor nb = l2_norm(t, b);
        Tensor term;
        if (na.item() * nb.item() < 1e-12) {
            // zero-norm guard: similarity defined as 0
            term = constant(t, Tensor::scalar(1.0));
        } else {
            Tensor dot = reduce_sum(t, mul(t, a, b));
            Tensor cos = divide(t, dot, mul(t, na, nb));
            term = affine(t, cos, -1.0, 1.0);
        }
        acc = e == 0 ? term : add(t, acc, term);
    }
    return scale(t, acc, 1.0 / static_cast<double>(fourier_z.size()));
}

Tensor loss_total(Tape& t, const Tensor& pred, const Tensor& div, const Tensor& cons,
                  double lambda, double mu) {
    if (!std::isfinite(pred.item()) || !std::isfinite(div.item()) || !std::isfinite(cons.item()))
        throw NumericError("loss_total: non-finite component");
    return add(t, pred, add(t, scale(t, div, lambda), scale(t, cons, mu)));
}

}  // namespace m2fmoe

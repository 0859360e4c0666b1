#include "m2fmoe/model.hpp"

#include <algorithm>
#include <cmath>

namespace m2fmoe {

void AblationFlags::validate() const {
    if (no_wavelet_view && no_fourier_view && !mlp_only)
        throw ConfigError("ablation: both views removed without mlp_only");
    if (mlp_only && (uniform_splitter || no_alignment))
        throw ConfigError("ablation: splitter flags have no effect with mlp_only");
    if (uniform_splitter && no_alignment)
        throw ConfigError("ablation: uniform_splitter and no_alignment are exclusive");
}

void ModelConfig::validate() const {
    if (t_in < 2 || t_p < 1 || channels < 1) throw ConfigError("model: dims must be positive");
    if (t_r < 4 || t_r > t_in)
        throw ConfigError("model: T_r must lie in 4..T_in, got " + std::to_string(t_r));
    if (experts < 1) throw ConfigError("model: E >= 1 required");
    if (resolutions.empty() || resolutions.front() != 1)
        throw ConfigError("model: resolution set must start with k=1");
    int64_t prev = 0;
    for (int64_t k : resolutions) {
        if (k <= prev) throw ConfigError("model: resolutions must be distinct ascending");
        if (k >= t_r) throw ConfigError("model: smoothing size k must be < T_r");
        prev = k;
    }
    if (hidden < 1 || routing_hidden < 1 || wavelet_channels < 1 || wavelet_out_hidden < 1)
        throw ConfigError("model: hidden widths must be positive");
    if (scales < 2) throw ConfigError("model: at least 2 wavelet scales required");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0,1)");
    if (lambda_div < 0.0 || mu_cons < 0.0) throw ConfigError("model: loss weights must be >= 0");
    if (f_bins() < experts)
        throw ConfigError("model: " + std::to_string(f_bins()) + " frequency bins cannot host " +
                          std::to_string(experts) + " experts");
    if (scales < experts) throw ConfigError("model: fewer scales than experts");
    flags.validate();
}

std::vector<int64_t> ModelConfig::active_resolutions() const {
    if (flags.single_resolution) return {1};
    return resolutions;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    wavelet_ = spectral::WaveletSpec::complex_gaussian(cfg_.wavelet_order);
    grid_ = spectral::ScaleGrid::for_window(wavelet_, cfg_.t_rd(), cfg_.scales);
    pos_embedding_ = positional_embedding(cfg_.t_p);

    // matched parameter budget for the plain-MLP variant
    int64_t f = cfg_.f_bins(), t_rd = cfg_.t_rd(), c = cfg_.channels;
    int64_t hr = cfg_.routing_hidden, e = cfg_.experts, hw = cfg_.wavelet_channels;
    int64_t ho = cfg_.wavelet_out_hidden, s = cfg_.scales, t_p = cfg_.t_p;
    int64_t fourier = hr * f + hr + e * hr + e + t_p * t_rd + t_p;
    int64_t wavelet = e * (hw * c * c * 9 + hw * c + c * hw * c * 9 + c) + hr * s * t_rd + hr +
                      e * hr + e + ho * s * t_rd + ho + t_p * ho + t_p;
    mlp_hidden_ = std::max<int64_t>(4, (fourier + wavelet) / (t_rd * c + t_p * c + 1));
}

int64_t Model::fusion_width() const {
    int64_t views = 0;
    if (cfg_.flags.mlp_only)
        views = 1;
    else
        views = (cfg_.flags.use_fourier() ? 1 : 0) + (cfg_.flags.use_wavelet() ? 1 : 0);
    return views * cfg_.channels + 2;
}

std::vector<double> Model::uniform_beta() const {
    std::vector<double> beta;
    for (int64_t i = 1; i < cfg_.experts; ++i)
        beta.push_back(static_cast<double>(i) / static_cast<double>(cfg_.experts));
    return beta;
}

void Model::init_params(ParamRegistry& reg, uint64_t seed) const {
    auto uniform_param = [&](const std::string& name, std::vector<int64_t> shape, int64_t fan_in) {
        Tensor w(shape);
        Rng rng(seed, name);
        init_uniform(w, fan_in, rng);
        reg.add(name, std::move(w));
    };
    auto zero_param = [&](const std::string& name, std::vector<int64_t> shape) {
        reg.add(name, Tensor(shape));
    };

    const int64_t c = cfg_.channels, e = cfg_.experts, f = cfg_.f_bins(), t_rd = cfg_.t_rd();
    const int64_t hr = cfg_.routing_hidden, hw = cfg_.wavelet_channels, ho = cfg_.wavelet_out_hidden;
    const int64_t s = cfg_.scales, t_p = cfg_.t_p, hp = cfg_.hidden;

    bool learn_split = e > 1 && !cfg_.flags.uniform_splitter && !cfg_.flags.mlp_only &&
                       (cfg_.flags.use_fourier() || cfg_.flags.use_wavelet());
    if (learn_split) {
        if (cfg_.flags.no_alignment) {
            zero_param("splitter/raw_fourier", {e - 1});
            zero_param("splitter/raw_wavelet", {e - 1});
        } else {
            zero_param("splitter/raw", {e - 1});
        }
    }

    const std::vector<int64_t> res = cfg_.active_resolutions();
    for (size_t i = 0; i < res.size(); ++i) {
        std::string p = "res" + std::to_string(i) + "/";
        if (cfg_.flags.mlp_only) {
            uniform_param(p + "mlp/w1", {mlp_hidden_, t_rd * c}, t_rd * c);
            zero_param(p + "mlp/b1", {mlp_hidden_});
            uniform_param(p + "mlp/w2", {t_p * c, mlp_hidden_}, mlp_hidden_);
            zero_param(p + "mlp/b2", {t_p * c});
        }
        if (cfg_.flags.use_fourier()) {
            uniform_param(p + "fourier/route_w1", {hr, f}, f);
            zero_param(p + "fourier/route_b1", {hr});
            uniform_param(p + "fourier/route_w2", {e, hr}, hr);
            zero_param(p + "fourier/route_b2", {e});
            uniform_param(p + "fourier/proj_w", {t_p, t_rd}, t_rd);
            zero_param(p + "fourier/proj_b", {t_p});
        }
        if (cfg_.flags.use_wavelet()) {
            for (int64_t ex = 0; ex < e; ++ex) {
                std::string q = p + "wavelet/expert" + std::to_string(ex) + "/";
                uniform_param(q + "conv1_w", {hw * c, c, 3, 3}, c * 9);
                zero_param(q + "conv1_b", {hw * c});
                uniform_param(q + "conv2_w", {c, hw * c, 3, 3}, hw * c * 9);
                zero_param(q + "conv2_b", {c});
            }
            uniform_param(p + "wavelet/route_w1", {hr, s * t_rd}, s * t_rd);
            zero_param(p + "wavelet/route_b1", {hr});
            uniform_param(p + "wavelet/route_w2", {e, hr}, hr);
            zero_param(p + "wavelet/route_b2", {e});
            uniform_param(p + "wavelet/out2_w", {ho, s * t_rd}, s * t_rd);
            zero_param(p + "wavelet/out2_b", {ho});
            uniform_param(p + "wavelet/out1_w", {t_p, ho}, ho);
            zero_param(p + "wavelet/out1_b", {t_p});
        }
        uniform_param(p + "maf/u1_w", {hp, fusion_width()}, fusion_width());
        uniform_param(p + "maf/u2_w", {c, hp}, hp);
        uniform_param(p + "maf/out_w", {c, c}, c);
        zero_param(p + "maf/out_b", {c});
        reg.add_state(p + "maf/bn_mean", Tensor({hp}, 0.0));
        reg.add_state(p + "maf/bn_var", Tensor({hp}, 1.0));
    }

    uniform_param("gate/w_g", {cfg_.t_in, t_p}, cfg_.t_in);
    uniform_param("gate/w", {c, 2 * c}, 2 * c);
    zero_param("gate/b", {c});
}

SampleFeatures Model::features(const Tensor& window) const {
    if (window.rank() != 2 || window.shape[0] != cfg_.t_in || window.shape[1] != cfg_.channels)
        throw ShapeError("features: window " + shape_str(window.shape) + " vs config [" +
                         std::to_string(cfg_.t_in) + "x" + std::to_string(cfg_.channels) + "]");
    SampleFeatures out;
    out.input = window;
    Tensor recent = segment_recent(window, cfg_.t_r);
    FeatureSelect select;
    select.fourier = cfg_.flags.use_fourier();
    select.wavelet = cfg_.flags.use_wavelet();
    for (int64_t k : cfg_.active_resolutions())
        out.res.push_back(build_resolution_features(recent, k, grid_, wavelet_, select));
    return out;
}

std::vector<double> Model::boundaries(const ParamRegistry& reg) const {
    if (cfg_.experts == 1) return {};
    if (cfg_.flags.uniform_splitter || cfg_.flags.mlp_only || !reg.has("splitter/raw")) {
        if (reg.has("splitter/raw_fourier"))
            return normalize_boundaries(reg.get("splitter/raw_fourier").v);
        return uniform_beta();
    }
    return normalize_boundaries(reg.get("splitter/raw").v);
}

SpectralMasks Model::masks(const ParamRegistry& reg) const {
    std::vector<double> beta_f = boundaries(reg);
    std::vector<double> beta_w = reg.has("splitter/raw_wavelet")
                                     ? normalize_boundaries(reg.get("splitter/raw_wavelet").v)
                                     : beta_f;
    std::vector<int64_t> fi = to_fourier_indices(beta_f, cfg_.f_bins());
    std::vector<int64_t> wi = to_wavelet_scale_indices(beta_w, wavelet_.gamma, grid_);
    return build_masks(fi, wi, cfg_.f_bins(), cfg_.scales, cfg_.experts);
}

int64_t Model::count_parameters(const ParamRegistry& reg) { return reg.count_parameters(); }

BatchResult Model::run(Tape& t, const std::vector<const SampleFeatures*>& batch,
                       const std::vector<const Tensor*>& targets, ParamRegistry& reg,
                       bool training, uint64_t dropout_stream) const {
    if (batch.empty()) throw ShapeError("run: empty batch");
    bool with_loss = !targets.empty();
    if (with_loss && targets.size() != batch.size())
        throw ShapeError("run: target count vs batch size");

    const int64_t b_count = static_cast<int64_t>(batch.size());
    const int64_t e_count = cfg_.experts;
    const std::vector<int64_t> res = cfg_.active_resolutions();
    const int64_t r_count = static_cast<int64_t>(res.size());

    BatchResult result;
    result.routing.assign(static_cast<size_t>(b_count), {});

    // bind parameters
    std::map<std::string, Tensor> bound;
    for (const std::string& name : reg.names()) {
        Tensor bt = leaf(t, reg.get(name), true);
        result.param_nodes[name] = bt.node;
        bound[name] = std::move(bt);
    }
    auto bp = [&](const std::string& name) -> const Tensor& { return bound.at(name); };

    Rng drop_rng(dropout_stream, "dropout");

    // shared boundaries -> per-view differentiable windows
    Tensor beta_f, beta_w;
    bool have_beta = false;
    if (e_count > 1 && !cfg_.flags.mlp_only) {
        if (cfg_.flags.uniform_splitter) {
            Tensor u = constant(t, Tensor::from({e_count - 1}, uniform_beta()));
            beta_f = u;
            beta_w = u;
        } else if (cfg_.flags.no_alignment) {
            beta_f = normalize_boundaries(t, bp("splitter/raw_fourier"));
            beta_w = normalize_boundaries(t, bp("splitter/raw_wavelet"));
        } else {
            beta_f = normalize_boundaries(t, bp("splitter/raw"));
            beta_w = beta_f;
        }
        have_beta = true;
    }

    Tensor pos = constant(t, pos_embedding_);
    bool want_traces = with_loss && training && !cfg_.flags.mlp_only && !cfg_.flags.no_reg_losses &&
                       (cfg_.lambda_div > 0.0 || cfg_.mu_cons > 0.0);

    std::vector<Tensor> h_per_res;
    std::vector<ResolutionOutputTensors> out_maps;
    // finest-resolution traces per sample, for the regularization losses
    std::vector<BranchTrace> finest_traces(static_cast<size_t>(b_count));

    for (int64_t ri = 0; ri < r_count; ++ri) {
        std::string p = "res" + std::to_string(ri) + "/";
        std::vector<Tensor> windows_f, windows_w;
        if (cfg_.flags.use_fourier())
            windows_f = fourier_band_windows(t, beta_f, cfg_.f_bins(), e_count,
                                             have_beta ? cfg_.band_sharpness : 0.0);
        if (cfg_.flags.use_wavelet())
            windows_w = wavelet_band_windows(t, beta_w, wavelet_.gamma, grid_, e_count,
                                             have_beta ? cfg_.band_sharpness : 0.0);

        FourierBranchTensors fp;
        WaveletBranchTensors wp;
        if (cfg_.flags.use_fourier())
            fp = {transpose(t, bp(p + "fourier/route_w1")), bp(p + "fourier/route_b1"),
                  transpose(t, bp(p + "fourier/route_w2")), bp(p + "fourier/route_b2"),
                  bp(p + "fourier/proj_w"),                 bp(p + "fourier/proj_b")};
        if (cfg_.flags.use_wavelet()) {
            for (int64_t ex = 0; ex < e_count; ++ex) {
                std::string q = p + "wavelet/expert" + std::to_string(ex) + "/";
                wp.experts.push_back({bp(q + "conv1_w"), bp(q + "conv1_b"), bp(q + "conv2_w"),
                                      bp(q + "conv2_b")});
            }
            wp.route_w1t = transpose(t, bp(p + "wavelet/route_w1"));
            wp.route_b1 = bp(p + "wavelet/route_b1");
            wp.route_w2t = transpose(t, bp(p + "wavelet/route_w2"));
            wp.route_b2 = bp(p + "wavelet/route_b2");
            wp.out2_wt = transpose(t, bp(p + "wavelet/out2_w"));
            wp.out2_b = bp(p + "wavelet/out2_b");
            wp.out1_w = bp(p + "wavelet/out1_w");
            wp.out1_b = bp(p + "wavelet/out1_b");
        }

        Tensor mlp_w1t, mlp_w2t;
        if (cfg_.flags.mlp_only) {
            mlp_w1t = transpose(t, bp(p + "mlp/w1"));
            mlp_w2t = transpose(t, bp(p + "mlp/w2"));
        }
        std::vector<Tensor> fused_rows;
        fused_rows.reserve(static_cast<size_t>(b_count));
        for (int64_t b = 0; b < b_count; ++b) {
            const ResolutionFeatures& feat = batch[static_cast<size_t>(b)]->res[static_cast<size_t>(ri)];
            RoutingRecord record;
            record.resolution_index = ri;
            Tensor view_f, view_w;
            bool trace_here = want_traces && ri == 0;
            BranchTrace* trace = trace_here ? &finest_traces[static_cast<size_t>(b)] : nullptr;
            BranchTrace local;  // routing weights only
            local.want_z = false;
            if (cfg_.flags.mlp_only) {
                Tensor flat = reshape(t, constant(t, feat.diff), {1, feat.diff.numel()});
                Tensor h = matmul(t, flat, mlp_w1t);
                h = relu(t, add_vec(t, h, bp(p + "mlp/b1"), 1));
                h = dropout(t, h, cfg_.dropout, training, drop_rng);
                h = add_vec(t, matmul(t, h, mlp_w2t), bp(p + "mlp/b2"), 1);
                view_f = reshape(t, h, {cfg_.t_p, cfg_.channels});
            } else {
                if (cfg_.flags.use_fourier()) {
                    BranchTrace* tr = trace ? trace : &local;
                    view_f = fourier_branch(t, feat, windows_f, fp, cfg_.t_p, tr);
                    record.alpha = tr->alpha.v;
                }
                if (cfg_.flags.use_wavelet()) {
                    BranchTrace* tr = trace ? trace : &local;
                    view_w = wavelet_branch(t, feat, windows_w, wp, cfg_.t_p, cfg_.dropout,
                                            training, drop_rng, tr);
                    record.eta = tr->eta.v;
                }
            }
            result.routing[static_cast<size_t>(b)].push_back(std::move(record));

            Tensor fused;
            if (cfg_.flags.mlp_only)
                fused = concat_cols(t, view_f, pos);
            else if (cfg_.flags.use_fourier() && cfg_.flags.use_wavelet())
                fused = concat_cols(t, concat_cols(t, view_f, view_w), pos);
            else if (cfg_.flags.use_fourier())
                fused = concat_cols(t, view_f, pos);
            else
                fused = concat_cols(t, view_w, pos);
            fused_rows.push_back(fused);
        }

        Tensor stack = b_count == 1 ? fused_rows[0] : concat0(t, fused_rows);
        BatchNormState bn;
        bn.running_mean = reg.get(p + "maf/bn_mean").v;
        bn.running_var = reg.get(p + "maf/bn_var").v;
        MafStackTensors mp{bp(p + "maf/u1_w"), bp(p + "maf/u2_w")};
        Tensor h_u = maf_stack(t, stack, mp, bn, training, cfg_.dropout, drop_rng);
        if (training) {
            reg.get(p + "maf/bn_mean").v = bn.running_mean;
            reg.get(p + "maf/bn_var").v = bn.running_var;
        }
        h_per_res.push_back(h_u);
        out_maps.push_back({bp(p + "maf/out_w"), bp(p + "maf/out_b")});
    }

    // last observed slice per sample, broadcast over the horizon
    Tensor shift({b_count * cfg_.t_p, cfg_.channels});
    for (int64_t b = 0; b < b_count; ++b) {
        const Tensor& x = batch[static_cast<size_t>(b)]->input;
        for (int64_t i = 0; i < cfg_.t_p; ++i)
            for (int64_t ch = 0; ch < cfg_.channels; ++ch)
                shift.at2(b * cfg_.t_p + i, ch) = x.at2(cfg_.t_in - 1, ch);
    }
    Tensor h_r = multi_resolution_fuse(t, h_per_res, out_maps, constant(t, shift));

    Tensor w_g_t = transpose(t, bp("gate/w_g"));
    std::vector<Tensor> h_h_parts;
    h_h_parts.reserve(static_cast<size_t>(b_count));
    for (int64_t b = 0; b < b_count; ++b)
        h_h_parts.push_back(
            matmul(t, w_g_t, constant(t, batch[static_cast<size_t>(b)]->input)));
    Tensor h_h = b_count == 1 ? h_h_parts[0] : concat0(t, h_h_parts);

    result.prediction = temporal_gate(t, h_r, h_h, bp("gate/w"), bp("gate/b"));

    if (with_loss) {
        Tensor target_stack({b_count * cfg_.t_p, cfg_.channels});
        for (int64_t b = 0; b < b_count; ++b) {
            const Tensor& y = *targets[static_cast<size_t>(b)];
            if (y.rank() != 2 || y.shape[0] != cfg_.t_p || y.shape[1] != cfg_.channels)
                throw ShapeError("run: target " + shape_str(y.shape) + " vs horizon");
            for (int64_t i = 0; i < cfg_.t_p; ++i)
                for (int64_t ch = 0; ch < cfg_.channels; ++ch)
                    target_stack.at2(b * cfg_.t_p + i, ch) = y.at2(i, ch);
        }
        Tensor pred_loss = loss_pred(t, result.prediction, constant(t, target_stack));
        result.pred_value = pred_loss.item();

        double lambda = cfg_.flags.no_reg_losses || cfg_.flags.mlp_only ? 0.0 : cfg_.lambda_div;
        double mu = cfg_.flags.no_reg_losses || cfg_.flags.mlp_only ? 0.0 : cfg_.mu_cons;
        Tensor div_loss = constant(t, Tensor::scalar(0.0));
        Tensor cons_loss = constant(t, Tensor::scalar(0.0));
        if (want_traces) {
            std::vector<Tensor> div_terms, cons_terms;
            for (int64_t b = 0; b < b_count; ++b) {
                BranchTrace& tr = finest_traces[static_cast<size_t>(b)];
                if (!tr.fourier_z.empty() && !tr.wavelet_z.empty()) {
                    Tensor d = scale(t, add(t, loss_div(t, tr.fourier_z), loss_div(t, tr.wavelet_z)), 0.5);
                    div_terms.push_back(d);
                    cons_terms.push_back(loss_cons(t, tr.fourier_z, tr.wavelet_z));
                } else if (!tr.fourier_z.empty()) {
                    div_terms.push_back(loss_div(t, tr.fourier_z));
                } else if (!tr.wavelet_z.empty()) {
                    div_terms.push_back(loss_div(t, tr.wavelet_z));
                }
            }
            if (!div_terms.empty()) div_loss = reduce_mean(t, concat0(t, div_terms));
            if (!cons_terms.empty()) cons_loss = reduce_mean(t, concat0(t, cons_terms));
        }
        result.div_value = div_loss.item();
        result.cons_value = cons_loss.item();
        result.loss = loss_total(t, pred_loss, div_loss, cons_loss, lambda, mu);
    }
    return result;
}

}  // namespace m2fmoe

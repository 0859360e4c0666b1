#pragma once

#include <map>
#include <string>
#include <vector>

#include "m2fmoe/band_splitter.hpp"
#include "m2fmoe/experts.hpp"
#include "m2fmoe/fusion.hpp"
#include "m2fmoe/integration.hpp"
#include "m2fmoe/spectral.hpp"
#include "m2fmoe/tensor.hpp"

namespace m2fmoe {

struct AblationFlags {
    bool no_wavelet_view = false;
    bool no_fourier_view = false;
    bool no_reg_losses = false;
    bool single_resolution = false;
    bool uniform_splitter = false;
    bool no_alignment = false;
    bool mlp_only = false;

    void validate() const;
    bool use_fourier() const { return !mlp_only && !no_fourier_view; }
    bool use_wavelet() const { return !mlp_only && !no_wavelet_view; }
};

struct ModelConfig {
    int64_t t_in = 360;
    int64_t t_p = 72;
    int64_t t_r = 120;
    int64_t channels = 1;
    int64_t experts = 3;
    std::vector<int64_t> resolutions{1, 12, 24};  // k values, k=1 first
    int64_t hidden = 64;             // H', fusion stack width
    int64_t routing_hidden = 16;     // H_r
    int64_t wavelet_channels = 8;    // H_w hidden conv channels per input channel
    int64_t wavelet_out_hidden = 8;  // H_o, wavelet output bottleneck
    int64_t scales = 16;             // S
    int wavelet_order = 7;
    double dropout = 0.1;
    double lambda_div = 0.05;
    double mu_cons = 0.05;
    double band_sharpness = 0.2;  // band window transition width, index units
    AblationFlags flags;

    void validate() const;
    int64_t t_rd() const { return t_r - 1; }
    int64_t f_bins() const { return t_rd() / 2 + 1; }
    std::vector<int64_t> active_resolutions() const;
};

// one window's precomputed constants
struct SampleFeatures {
    Tensor input;  // [T_in, C]
    std::vector<ResolutionFeatures> res;
};

struct RoutingRecord {
    int64_t resolution_index = 0;
    std::vector<double> alpha;  // empty when the view is absent
    std::vector<double> eta;
};

struct BatchResult {
    Tensor prediction;  // [B*T_p, C], stacked per sample
    Tensor loss;        // scalar node; only built when targets are given
    double pred_value = 0.0;
    double div_value = 0.0;
    double cons_value = 0.0;
    std::map<std::string, int> param_nodes;
    std::vector<std::vector<RoutingRecord>> routing;  // [sample][resolution]
};

class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    const spectral::WaveletSpec& wavelet() const { return wavelet_; }
    const spectral::ScaleGrid& grid() const { return grid_; }

    // registers and initializes every learnable tensor and state entry
    void init_params(ParamRegistry& reg, uint64_t seed) const;

    SampleFeatures features(const Tensor& window) const;

    // Forward over a batch of windows. `targets` may be empty (prediction
    // only). dropout_stream seeds this step's dropout draws.
    BatchResult run(Tape& t, const std::vector<const SampleFeatures*>& batch,
                    const std::vector<const Tensor*>& targets, ParamRegistry& reg, bool training,
                    uint64_t dropout_stream) const;

    // current shared boundaries (values) and the hard binary masks they induce
    std::vector<double> boundaries(const ParamRegistry& reg) const;
    SpectralMasks masks(const ParamRegistry& reg) const;

    static int64_t count_parameters(const ParamRegistry& reg);

private:
    ModelConfig cfg_;
    spectral::WaveletSpec wavelet_;
    spectral::ScaleGrid grid_;
    Tensor pos_embedding_;
    int64_t mlp_hidden_ = 0;

    int64_t fusion_width() const;
    std::vector<double> uniform_beta() const;
};

}  // namespace m2fmoe

#pragma once

#include <map>
#include <string>
#include <vector>

#include "m2fmoe/data.hpp"
#include "m2fmoe/model.hpp"
#include "m2fmoe/tensor.hpp"

namespace m2fmoe {

// standard bias-corrected Adam; beta1=0.9, beta2=0.999, eps=1e-8
class Adam {
public:
    void step(ParamRegistry& params, const std::map<std::string, std::vector<double>>& grads,
              double lr);
    int64_t steps() const { return t_; }

private:
    std::map<std::string, std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

struct TrainConfig {
    double lr = 0.001;
    int64_t batch_size = 48;
    int64_t max_epochs = 100;
    int64_t patience = 10;
    uint64_t seed = 42;
    double grad_clip = 5.0;       // global norm
    int64_t val_windows = 60;     // random held-out windows
    bool verbose = false;
};

struct EpochStats {
    int64_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    int64_t best_epoch = -1;
    double best_val = 0.0;
};

// mini-batch loop with early stopping on validation loss; restores the
// best-validation parameters before returning
TrainResult train(const Model& model, ParamRegistry& params, const SeriesDataset& dataset,
                  const TrainConfig& cfg);

struct Metrics {
    double rmse = 0.0;
    double mape = 0.0;
};

struct RoutingDumpRow {
    int64_t window_index = 0;
    int64_t resolution_index = 0;
    std::string view;
    int64_t expert_index = 0;
    double weight = 0.0;
};

// forecasts denormalized before the metrics; MAPE uses denominator X+1
Metrics evaluate(const Model& model, ParamRegistry& params, const SeriesDataset& dataset,
                 std::vector<RoutingDumpRow>* dump = nullptr);

// forecast for one input window, denormalized [T_p, C]
Tensor predict(const Model& model, ParamRegistry& params, const Tensor& window_normalized,
               const NormStats& stats);

// ablation variants (Table-2 style names)
const std::vector<std::string>& variant_names();
AblationFlags variant_flags(const std::string& name);
ModelConfig apply_variant(ModelConfig base, const AblationFlags& flags);

// flat binary checkpoint: magic "M2FM", version, named f64 tensors
// (learnables first, then state entries such as batch-norm statistics)
void save_checkpoint(const std::string& path, const ParamRegistry& params);
void load_checkpoint(const std::string& path, ParamRegistry& params);

}  // namespace m2fmoe

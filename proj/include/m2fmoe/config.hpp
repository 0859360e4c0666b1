#pragma once

#include <string>
#include <vector>

#include "m2fmoe/model.hpp"
#include "m2fmoe/training.hpp"

namespace m2fmoe {

// everything a run needs: model + training hyperparameters, data paths,
// pipeline switches
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string data_csv;
    double train_fraction = 0.8;
    bool oversample_enabled = true;
    double oversample_cap = 0.2;
    int gmm_components = 3;

    void validate() const;
};

// Flat key-value text with [model]/[train]/[data] sections; '#' comments.
// Unknown keys are rejected. Overrides are "section.key=value" strings.
RunConfig parse_run_config(const std::string& path, const std::vector<std::string>& overrides = {});
RunConfig parse_run_config_text(const std::string& text,
                                const std::vector<std::string>& overrides = {});

}  // namespace m2fmoe

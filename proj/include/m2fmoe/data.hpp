#pragma once

#include <string>
#include <utility>
#include <vector>

#include "m2fmoe/tensor.hpp"

namespace m2fmoe {

struct RawSeries {
    std::vector<long long> timestamps;  // strictly increasing
    Tensor values;                      // [T, C]
    std::vector<std::string> channels;
    int64_t interpolated = 0;  // missing values filled
};

// Header `timestamp,<channel>[,...]`; ISO-8601 or integer timestamps; empty
// or nan fields are filled by linear interpolation when `interpolate` is set.
RawSeries load_csv(const std::string& path, bool interpolate = true);

struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // floored at 1e-8
    std::vector<uint8_t> constant_channel;
};

NormStats zscore_fit(const Tensor& values);
Tensor zscore_apply(const Tensor& values, const NormStats& stats);
Tensor zscore_invert(const Tensor& values, const NormStats& stats);

struct GmmModel {
    std::vector<double> weight;    // sums to 1
    std::vector<double> mean;
    std::vector<double> variance;  // floored at 1e-6
    std::vector<double> log_likelihood_path;  // per iteration, non-decreasing
};

GmmModel gmm_fit(const std::vector<double>& values, int components = 3, int max_iter = 200,
                 double tol = 1e-8, uint64_t seed = 0);

// lower = mean of the two smallest component means, upper = mean of the two
// largest; requires >= 3 components
std::pair<double, double> extreme_thresholds(const GmmModel& model);

struct SeriesDataset {
    Tensor data;  // normalized [T, C]
    std::vector<int64_t> starts;
    std::vector<uint8_t> oversampled;  // origin flag per sample
    int64_t t_in = 0;
    int64_t t_p = 0;
    NormStats stats;

    int64_t size() const { return static_cast<int64_t>(starts.size()); }
    Tensor input(int64_t i) const;   // [T_in, C]
    Tensor target(int64_t i) const;  // [T_p, C]
};

SeriesDataset make_windows(const Tensor& normalized, int64_t t_in, int64_t t_p,
                           const NormStats& stats, int64_t stride = 1);

struct OversampleReport {
    int64_t extreme_count = 0;
    int64_t windows_added = 0;
    bool cap_applied = false;
};

// Adds windows whose target span contains an extreme point (start offsets
// t - T_in - 4j, j = 0..17), deduplicated against existing starts, capped at
// floor(cap_fraction * original count) by seeded uniform truncation.
OversampleReport oversample(SeriesDataset& dataset, const Tensor& raw_levels, double lower,
                            double upper, double cap_fraction, uint64_t seed, int64_t step = 4,
                            int64_t n_windows = 18);

// evaluation windows advancing by stride T_p (disjoint targets)
std::vector<int64_t> rolling_starts(int64_t length, int64_t t_in, int64_t t_p);

}  // namespace m2fmoe

#include "m2fmoe/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace m2fmoe {

namespace {

constexpr double kStdFloor = 1e-8;
constexpr double kGmmVarFloor = 1e-6;

// days since 1970-01-01 (civil calendar)
long long days_from_civil(long long y, unsigned m, unsigned d) {
    y -= m <= 2;
    long long era = (y >= 0 ? y : y - 399) / 400;
    unsigned yoe = static_cast<unsigned>(y - era * 400);
    unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<long long>(doe) - 719468;
}

bool parse_timestamp(const std::string& field, long long& out) {
    if (field.empty()) return false;
    // plain integer (hour index / epoch value)
    bool all_digit = true;
    for (size_t i = 0; i < field.size(); ++i) {
        char c = field[i];
        if (i == 0 && (c == '-' || c == '+')) continue;
        if (!isdigit(static_cast<unsigned char>(c))) {
            all_digit = false;
            break;
        }
    }
    if (all_digit) {
        try {
            out = std::stoll(field);
            return true;
        } catch (...) {
            return false;
        }
    }
    // ISO-8601: YYYY-MM-DD[T ]HH:MM[:SS]
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    char sep = 0;
    int n = std::sscanf(field.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &s);
    if (n >= 3) {
        if (n > 3 && sep != 'T' && sep != ' ') return false;
        if (mo < 1 || mo > 12 || d < 1 || d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 ||
            s < 0 || s > 60)
            return false;
        out = days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400LL +
              h * 3600LL + mi * 60LL + s;
        return true;
    }
    return false;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    for (std::string& f : fields) {
        size_t a = f.find_first_not_of(" \t");
        size_t b = f.find_last_not_of(" \t");
        f = a == std::string::npos ? "" : f.substr(a, b - a + 1);
    }
    return fields;
}

bool is_missing(const std::string& f) {
    if (f.empty()) return true;
    std::string low;
    for (char c : f) low += static_cast<char>(tolower(static_cast<unsigned char>(c)));
    return low == "nan" || low == "na" || low == "null";
}

}  // namespace

RawSeries load_csv(const std::string& path, bool interpolate) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    std::vector<std::string> header = split_csv_line(line);
    if (header.size() < 2)
        throw DataError(path + ": header must name a timestamp column and >= 1 value column");

    RawSeries series;
    series.channels.assign(header.begin() + 1, header.end());
    int64_t c = static_cast<int64_t>(series.channels.size());
    std::vector<double> flat;
    int64_t line_no = 1;
    long long prev_ts = 0;
    bool first = true;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        std::vector<std::string> fields = split_csv_line(line);
        if (static_cast<int64_t>(fields.size()) != c + 1)
            throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(c + 1) + " fields, got " + std::to_string(fields.size()));
        long long ts;
        if (!parse_timestamp(fields[0], ts))
            throw DataError(path + ":" + std::to_string(line_no) + ": unparsable timestamp '" +
                            fields[0] + "'");
        if (!first && ts <= prev_ts)
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": timestamps must be strictly increasing");
        prev_ts = ts;
        first = false;
        series.timestamps.push_back(ts);
        for (int64_t ch = 0; ch < c; ++ch) {
            const std::string& f = fields[static_cast<size_t>(ch + 1)];
            if (is_missing(f)) {
                flat.push_back(std::nan(""));
                continue;
            }
            try {
                size_t used = 0;
                double v = std::stod(f, &used);
                if (used != f.size()) throw std::invalid_argument(f);
                flat.push_back(v);
            } catch (...) {
                throw DataError(path + ":" + std::to_string(line_no) + ": unparsable value '" + f +
                                "'");
            }
        }
    }
    int64_t t_len = static_cast<int64_t>(series.timestamps.size());
    if (t_len < 1) throw DataError(path + ": no data rows");
    series.values = Tensor::from({t_len, c}, std::move(flat));

    // linear interpolation of missing values, nearest fill at the edges
    for (int64_t ch = 0; ch < c; ++ch) {
        int64_t i = 0;
        while (i < t_len) {
            if (!std::isnan(series.values.at2(i, ch))) {
                ++i;
                continue;
            }
            int64_t j = i;
            while (j < t_len && std::isnan(series.values.at2(j, ch))) ++j;
            if (!interpolate)
                throw DataError(path + ": missing value in channel " +
                                series.channels[static_cast<size_t>(ch)] +
                                " with interpolation disabled");
            bool has_left = i > 0, has_right = j < t_len;
            if (!has_left && !has_right)
                throw DataError(path + ": channel " + series.channels[static_cast<size_t>(ch)] +
                                " has no observed values");
            double left = has_left ? series.values.at2(i - 1, ch) : 0.0;
            double right = has_right ? series.values.at2(j, ch) : 0.0;
            for (int64_t k = i; k < j; ++k) {
                double v;
                if (!has_left)
                    v = right;  // leading gap: nearest fill
                else if (!has_right)
                    v = left;  // trailing gap: nearest fill
                else
                    v = left + (right - left) * static_cast<double>(k - i + 1) /
                                   static_cast<double>(j - i + 1);
                series.values.at2(k, ch) = v;
                ++series.interpolated;
            }
            i = j;
        }
    }
    return series;
}

NormStats zscore_fit(const Tensor& values) {
    if (values.rank() != 2) throw ShapeError("zscore_fit: [T,C] input required");
    int64_t t_len = values.shape[0], c = values.shape[1];
    NormStats stats;
    stats.mean.resize(static_cast<size_t>(c));
    stats.stddev.resize(static_cast<size_t>(c));
    stats.constant_channel.assign(static_cast<size_t>(c), 0);
    for (int64_t ch = 0; ch < c; ++ch) {
        double m = 0.0;
        for (int64_t i = 0; i < t_len; ++i) m += values.at2(i, ch);
        m /= static_cast<double>(t_len);
        double var = 0.0;
        for (int64_t i = 0; i < t_len; ++i) {
            double d = values.at2(i, ch) - m;
            var += d * d;
        }
        var /= static_cast<double>(t_len);
        double sd = std::sqrt(var);
        stats.mean[static_cast<size_t>(ch)] = m;
        if (sd < kStdFloor) {
            stats.stddev[static_cast<size_t>(ch)] = kStdFloor;
            stats.constant_channel[static_cast<size_t>(ch)] = 1;
            std::fprintf(stderr, "warning: channel %lld is constant, std floored at %g\n",
                         static_cast<long long>(ch), kStdFloor);
        } else {
            stats.stddev[static_cast<size_t>(ch)] = sd;
        }
    }
    return stats;
}

Tensor zscore_apply(const Tensor& values, const NormStats& stats) {
    int64_t t_len = values.shape[0], c = values.shape[1];
    if (static_cast<size_t>(c) != stats.mean.size())
        throw ShapeError("zscore_apply: channel count vs stats");
    Tensor out({t_len, c});
    for (int64_t i = 0; i < t_len; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            out.at2(i, ch) = (values.at2(i, ch) - stats.mean[static_cast<size_t>(ch)]) /
                             stats.stddev[static_cast<size_t>(ch)];
    return out;
}

Tensor zscore_invert(const Tensor& values, const NormStats& stats) {
    int64_t t_len = values.shape[0], c = values.shape[1];
    if (static_cast<size_t>(c) != stats.mean.size())
        throw ShapeError("zscore_invert: channel count vs stats");
    Tensor out({t_len, c});
    for (int64_t i = 0; i < t_len; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            out.at2(i, ch) = values.at2(i, ch) * stats.stddev[static_cast<size_t>(ch)] +
                             stats.mean[static_cast<size_t>(ch)];
    return out;
}

// --- univariate GMM via EM -------------------------------------------------

namespace {

double log_gauss(double x, double mean, double var) {
    double d = x - mean;
    return -0.5 * (std::log(2.0 * 3.14159265358979323846 * var) + d * d / var);
}

struct EmState {
    std::vector<double> w, mu, var;
};

// kmeans++-style spread of initial means
EmState init_em(const std::vector<double>& x, int m, Rng& rng) {
    EmState st;
    int64_t n = static_cast<int64_t>(x.size());
    std::vector<double> centers;
    centers.push_back(x[static_cast<size_t>(rng.next_u64() % static_cast<uint64_t>(n))]);
    while (static_cast<int>(centers.size()) < m) {
        std::vector<double> d2(static_cast<size_t>(n));
        double total = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double best = 1e300;
            for (double cb : centers) best = std::min(best, (x[static_cast<size_t>(i)] - cb) *
                                                                (x[static_cast<size_t>(i)] - cb));
            d2[static_cast<size_t>(i)] = best;
            total += best;
        }
        double r = rng.uniform() * total;
        double acc = 0.0;
        int64_t chosen = n - 1;
        for (int64_t i = 0; i < n; ++i) {
            acc += d2[static_cast<size_t>(i)];
            if (acc >= r) {
                chosen = i;
                break;
            }
        }
        centers.push_back(x[static_cast<size_t>(chosen)]);
    }
    double gm = 0.0;
    for (double v : x) gm += v;
    gm /= static_cast<double>(n);
    double gvar = 0.0;
    for (double v : x) gvar += (v - gm) * (v - gm);
    gvar = std::max(gvar / static_cast<double>(n), kGmmVarFloor);
    st.w.assign(static_cast<size_t>(m), 1.0 / static_cast<double>(m));
    st.mu = centers;
    st.var.assign(static_cast<size_t>(m), gvar);
    return st;
}

}  // namespace

GmmModel gmm_fit(const std::vector<double>& values, int components, int max_iter, double tol,
                 uint64_t seed) {
    if (components < 1) throw ConfigError("gmm_fit: components >= 1 required");
    std::set<double> distinct(values.begin(), values.end());
    if (static_cast<int>(distinct.size()) < components)
        throw DataError("gmm_fit: need at least " + std::to_string(components) +
                        " distinct values, got " + std::to_string(distinct.size()));
    int64_t n = static_cast<int64_t>(values.size());
    Rng rng(seed, "gmm");
    EmState st = init_em(values, components, rng);

    GmmModel model;
    bool reseeded = false;
    std::vector<double> resp(static_cast<size_t>(n * components));
    double prev_ll = -1e300;
    for (int iter = 0; iter < max_iter; ++iter) {
        // E step (log-sum-exp)
        double ll = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double mx = -1e300;
            std::vector<double> lp(static_cast<size_t>(components));
            for (int k = 0; k < components; ++k) {
                lp[static_cast<size_t>(k)] =
                    std::log(std::max(st.w[static_cast<size_t>(k)], 1e-300)) +
                    log_gauss(values[static_cast<size_t>(i)], st.mu[static_cast<size_t>(k)],
                              st.var[static_cast<size_t>(k)]);
                mx = std::max(mx, lp[static_cast<size_t>(k)]);
            }
            double z = 0.0;
            for (int k = 0; k < components; ++k) z += std::exp(lp[static_cast<size_t>(k)] - mx);
            ll += mx + std::log(z);
            for (int k = 0; k < components; ++k)
                resp[static_cast<size_t>(i * components + k)] =
                    std::exp(lp[static_cast<size_t>(k)] - mx) / z;
        }
        model.log_likelihood_path.push_back(ll);

        // M step
        bool degenerate = false;
        for (int k = 0; k < components; ++k) {
            double nk = 0.0, mean = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                double r = resp[static_cast<size_t>(i * components + k)];
                nk += r;
                mean += r * values[static_cast<size_t>(i)];
            }
            double weight = nk / static_cast<double>(n);
            if (weight < 1e-6) {
                if (reseeded)
                    throw NumericError("gmm_fit: component " + std::to_string(k) +
                                       " collapsed twice");
                // single re-seed at a random data point
                st.mu[static_cast<size_t>(k)] =
                    values[static_cast<size_t>(rng.next_u64() % static_cast<uint64_t>(n))];
                double gvar = 0.0, gm = 0.0;
                for (double v : values) gm += v;
                gm /= static_cast<double>(n);
                for (double v : values) gvar += (v - gm) * (v - gm);
                st.var[static_cast<size_t>(k)] =
                    std::max(gvar / static_cast<double>(n), kGmmVarFloor);
                st.w[static_cast<size_t>(k)] = 1.0 / static_cast<double>(components);
                double wsum = 0.0;
                for (double w : st.w) wsum += w;
                for (double& w : st.w) w /= wsum;
                reseeded = true;
                degenerate = true;
                break;
            }
            mean /= nk;
            double var = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                double d = values[static_cast<size_t>(i)] - mean;
                var += resp[static_cast<size_t>(i * components + k)] * d * d;
            }
            st.w[static_cast<size_t>(k)] = weight;
            st.mu[static_cast<size_t>(k)] = mean;
            st.var[static_cast<size_t>(k)] = std::max(var / nk, kGmmVarFloor);
        }
        if (degenerate) {
            prev_ll = -1e300;
            continue;
        }
        if (iter > 0 && ll - prev_ll < tol) break;
        prev_ll = ll;
    }
    model.weight = st.w;
    model.mean = st.mu;
    model.variance = st.var;
    return model;
}

std::pair<double, double> extreme_thresholds(const GmmModel& model) {
    if (model.mean.size() < 3)
        throw ConfigError("extreme_thresholds: at least 3 components required");
    std::vector<double> means = model.mean;
    std::sort(means.begin(), means.end());
    double lower = (means[0] + means[1]) / 2.0;
    double upper = (means[means.size() - 1] + means[means.size() - 2]) / 2.0;
    if (!(lower < upper))
        throw NumericError("extreme_thresholds: degenerate component overlap, lower >= upper");
    return {lower, upper};
}

// --- windowing ---------------------------------------------------------------

Tensor SeriesDataset::input(int64_t i) const {
    int64_t start = starts[static_cast<size_t>(i)];
    int64_t c = data.shape[1];
    Tensor out({t_in, c});
    for (int64_t r = 0; r < t_in; ++r)
        for (int64_t ch = 0; ch < c; ++ch) out.at2(r, ch) = data.at2(start + r, ch);
    return out;
}

Tensor SeriesDataset::target(int64_t i) const {
    int64_t start = starts[static_cast<size_t>(i)] + t_in;
    int64_t c = data.shape[1];
    Tensor out({t_p, c});
    for (int64_t r = 0; r < t_p; ++r)
        for (int64_t ch = 0; ch < c; ++ch) out.at2(r, ch) = data.at2(start + r, ch);
    return out;
}

SeriesDataset make_windows(const Tensor& normalized, int64_t t_in, int64_t t_p,
                           const NormStats& stats, int64_t stride) {
    if (normalized.rank() != 2) throw ShapeError("make_windows: [T,C] input required");
    if (stride < 1) throw ConfigError("make_windows: stride >= 1 required");
    int64_t t_len = normalized.shape[0];
    if (t_len < t_in + t_p)
        throw DataError("make_windows: series length " + std::to_string(t_len) +
                        " shorter than T_in+T_p=" + std::to_string(t_in + t_p));
    SeriesDataset ds;
    ds.data = normalized;
    ds.t_in = t_in;
    ds.t_p = t_p;
    ds.stats = stats;
    for (int64_t s = 0; s + t_in + t_p <= t_len; s += stride) {
        ds.starts.push_back(s);
        ds.oversampled.push_back(0);
    }
    return ds;
}

OversampleReport oversample(SeriesDataset& dataset, const Tensor& raw_levels, double lower,
                            double upper, double cap_fraction, uint64_t seed, int64_t step,
                            int64_t n_windows) {
    if (step < 1 || n_windows < 1) throw ConfigError("oversample: invalid window parameters");
    OversampleReport report;
    int64_t t_len = raw_levels.shape[0];
    int64_t original = dataset.size();
    // additions may duplicate base windows verbatim (that is the reweighting
    // mechanism); only repeated starts among the additions are dropped
    std::set<int64_t> taken;
    std::vector<int64_t> candidates;
    for (int64_t tt = 0; tt < t_len; ++tt) {
        double v = raw_levels.at2(tt, 0);
        if (v <= upper && v >= lower) continue;
        ++report.extreme_count;
        for (int64_t j = 0; j < n_windows; ++j) {
            int64_t start = tt - dataset.t_in - j * step;
            if (start < 0 || start + dataset.t_in + dataset.t_p > t_len) continue;
            // the extreme point must sit inside the forecast target
            if (tt < start + dataset.t_in || tt >= start + dataset.t_in + dataset.t_p) continue;
            if (taken.count(start)) continue;
            taken.insert(start);
            candidates.push_back(start);
        }
    }
    int64_t cap = static_cast<int64_t>(std::floor(cap_fraction * static_cast<double>(original)));
    if (static_cast<int64_t>(candidates.size()) > cap) {
        Rng rng(seed, "oversample");
        std::vector<int64_t> perm = rng.permutation(static_cast<int64_t>(candidates.size()));
        std::vector<int64_t> keep;
        keep.reserve(static_cast<size_t>(cap));
        for (int64_t i = 0; i < cap; ++i)
            keep.push_back(candidates[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
        std::sort(keep.begin(), keep.end());
        candidates = std::move(keep);
        report.cap_applied = true;
    }
    for (int64_t s : candidates) {
        dataset.starts.push_back(s);
        dataset.oversampled.push_back(1);
    }
    report.windows_added = static_cast<int64_t>(candidates.size());
    return report;
}

std::vector<int64_t> rolling_starts(int64_t length, int64_t t_in, int64_t t_p) {
    if (length < t_in + t_p)
        throw DataError("rolling_starts: span " + std::to_string(length) +
                        " shorter than T_in+T_p");
    std::vector<int64_t> starts;
    for (int64_t s = 0; s + t_in + t_p <= length; s += t_p) starts.push_back(s);
    return starts;
}

}  // namespace m2fmoe

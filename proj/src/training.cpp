#include "m2fmoe/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

namespace m2fmoe {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;

std::map<std::string, std::vector<double>> collect_grads(const Tape& tape,
                                                         const std::map<std::string, int>& nodes,
                                                         const ParamRegistry& params) {
    std::map<std::string, std::vector<double>> grads;
    for (const auto& [name, id] : nodes) {
        const std::vector<double>& g = tape.grad(id);
        if (g.empty())
            grads[name].assign(params.get(name).v.size(), 0.0);
        else
            grads[name] = g;
    }
    return grads;
}

void clip_global_norm(std::map<std::string, std::vector<double>>& grads, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (double v : g) sq += v * v;
    double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    double s = max_norm / norm;
    for (auto& [name, g] : grads)
        for (double& v : g) v *= s;
}

}  // namespace

void Adam::step(ParamRegistry& params, const std::map<std::string, std::vector<double>>& grads,
                double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (const std::string& name : params.names()) {
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        const std::vector<double>& g = it->second;
        Tensor& p = params.get(name);
        if (g.size() != p.v.size())
            throw ShapeError("adam: gradient size vs parameter " + name);
        for (double v : g)
            if (!std::isfinite(v)) throw NumericError("adam: non-finite gradient for " + name);
        std::vector<double>& m = m_[name];
        std::vector<double>& v = v_[name];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        for (size_t i = 0; i < g.size(); ++i) {
            m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
            v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            p.v[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
        }
    }
}

namespace {

struct Snapshot {
    std::map<std::string, std::vector<double>> values;
};

Snapshot snapshot_params(const ParamRegistry& params) {
    Snapshot s;
    for (const std::string& n : params.names()) s.values[n] = params.get(n).v;
    for (const std::string& n : params.state_names()) s.values[n] = params.get(n).v;
    return s;
}

void restore_params(ParamRegistry& params, const Snapshot& s) {
    for (const auto& [name, vals] : s.values) params.get(name).v = vals;
}

double validation_loss(const Model& model, ParamRegistry& params,
                       const std::vector<SampleFeatures>& feats,
                       const std::vector<Tensor>& targets, const std::vector<int64_t>& indices) {
    double total = 0.0;
    int64_t count = 0;
    const int64_t chunk = 48;
    for (size_t at = 0; at < indices.size(); at += chunk) {
        std::vector<const SampleFeatures*> batch;
        std::vector<const Tensor*> batch_targets;
        for (size_t i = at; i < std::min(indices.size(), at + chunk); ++i) {
            batch.push_back(&feats[static_cast<size_t>(indices[i])]);
            batch_targets.push_back(&targets[static_cast<size_t>(indices[i])]);
        }
        Tape tape;
        BatchResult r = model.run(tape, batch, batch_targets, params, false, 0);
        total += r.pred_value * static_cast<double>(batch.size());
        count += static_cast<int64_t>(batch.size());
    }
    return total / static_cast<double>(std::max<int64_t>(count, 1));
}

}  // namespace

TrainResult train(const Model& model, ParamRegistry& params, const SeriesDataset& dataset,
                  const TrainConfig& cfg) {
    if (dataset.size() == 0) throw DataError("train: empty dataset");

    const int64_t n = dataset.size();
    std::vector<SampleFeatures> feats(static_cast<size_t>(n));
    std::vector<Tensor> targets(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        feats[static_cast<size_t>(i)] = model.features(dataset.input(i));
        targets[static_cast<size_t>(i)] = dataset.target(i);
    }

    // seeded random validation holdout
    int64_t val_count = std::min<int64_t>(cfg.val_windows, n / 5);
    val_count = std::max<int64_t>(val_count, n >= 10 ? 1 : 0);
    Rng val_rng(cfg.seed, "validation");
    std::vector<int64_t> perm = val_rng.permutation(n);
    std::vector<int64_t> val_idx(perm.begin(), perm.begin() + val_count);
    std::vector<int64_t> train_idx(perm.begin() + val_count, perm.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());

    Adam adam;
    TrainResult result;
    Snapshot best;
    double best_val = 1e300;
    int64_t since_best = 0;
    uint64_t global_step = 0;

    for (int64_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng shuffle_rng(cfg.seed, "shuffle/" + std::to_string(epoch));
        std::vector<int64_t> order = shuffle_rng.permutation(static_cast<int64_t>(train_idx.size()));
        double epoch_loss = 0.0;
        int64_t seen = 0;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
            std::vector<const SampleFeatures*> batch;
            std::vector<const Tensor*> batch_targets;
            for (size_t i = at; i < std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
                 ++i) {
                int64_t idx = train_idx[static_cast<size_t>(order[i])];
                batch.push_back(&feats[static_cast<size_t>(idx)]);
                batch_targets.push_back(&targets[static_cast<size_t>(idx)]);
            }
            Tape tape;
            BatchResult r = model.run(tape, batch, batch_targets, params, true,
                                      cfg.seed + 0x9e3779b97f4a7c15ULL * (global_step + 1));
            double loss_val = r.loss.item();
            if (!std::isfinite(loss_val))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   " batch " + std::to_string(at / cfg.batch_size));
            backward(tape, r.loss);
            auto grads = collect_grads(tape, r.param_nodes, params);
            clip_global_norm(grads, cfg.grad_clip);
            adam.step(params, grads, cfg.lr);
            epoch_loss += loss_val * static_cast<double>(batch.size());
            seen += static_cast<int64_t>(batch.size());
            ++global_step;
        }
        double train_loss = epoch_loss / static_cast<double>(std::max<int64_t>(seen, 1));
        double val_loss = val_idx.empty()
                              ? train_loss
                              : validation_loss(model, params, feats, targets, val_idx);
        result.history.push_back({epoch, train_loss, val_loss});
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %lld train %.6f val %.6f\n",
                         static_cast<long long>(epoch), train_loss, val_loss);

        if (val_loss < best_val) {
            best_val = val_loss;
            best = snapshot_params(params);
            result.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    if (result.best_epoch >= 0) restore_params(params, best);
    result.best_val = best_val;
    return result;
}

Metrics evaluate(const Model& model, ParamRegistry& params, const SeriesDataset& dataset,
                 std::vector<RoutingDumpRow>* dump) {
    const int64_t n = dataset.size();
    if (n == 0) throw DataError("evaluate: empty dataset");
    double sq_sum = 0.0, ape_sum = 0.0;
    int64_t count = 0;
    const int64_t chunk = 48;
    for (int64_t at = 0; at < n; at += chunk) {
        std::vector<SampleFeatures> feats;
        std::vector<const SampleFeatures*> batch;
        std::vector<Tensor> targets;
        int64_t hi = std::min(n, at + chunk);
        feats.reserve(static_cast<size_t>(hi - at));
        for (int64_t i = at; i < hi; ++i) {
            feats.push_back(model.features(dataset.input(i)));
            targets.push_back(dataset.target(i));
        }
        for (auto& f : feats) batch.push_back(&f);
        Tape tape;
        BatchResult r = model.run(tape, batch, {}, params, false, 0);
        int64_t t_p = model.config().t_p, c = model.config().channels;
        for (int64_t b = 0; b < hi - at; ++b) {
            Tensor pred({t_p, c});
            for (int64_t i = 0; i < t_p; ++i)
                for (int64_t ch = 0; ch < c; ++ch)
                    pred.at2(i, ch) = r.prediction.at2(b * t_p + i, ch);
            Tensor pred_orig = zscore_invert(pred, dataset.stats);
            Tensor true_orig = zscore_invert(targets[static_cast<size_t>(b)], dataset.stats);
            for (int64_t i = 0; i < t_p; ++i)
                for (int64_t ch = 0; ch < c; ++ch) {
                    double err = true_orig.at2(i, ch) - pred_orig.at2(i, ch);
                    sq_sum += err * err;
                    ape_sum += std::abs(err) / std::abs(true_orig.at2(i, ch) + 1.0);
                    ++count;
                }
            if (dump) {
                for (const RoutingRecord& rec : r.routing[static_cast<size_t>(b)]) {
                    for (size_t e = 0; e < rec.alpha.size(); ++e)
                        dump->push_back({at + b, rec.resolution_index, "fourier",
                                         static_cast<int64_t>(e), rec.alpha[e]});
                    for (size_t e = 0; e < rec.eta.size(); ++e)
                        dump->push_back({at + b, rec.resolution_index, "wavelet",
                                         static_cast<int64_t>(e), rec.eta[e]});
                }
            }
        }
    }
    Metrics m;
    m.rmse = std::sqrt(sq_sum / static_cast<double>(count));
    m.mape = ape_sum / static_cast<double>(count);
    return m;
}

Tensor predict(const Model& model, ParamRegistry& params, const Tensor& window_normalized,
               const NormStats& stats) {
    SampleFeatures f = model.features(window_normalized);
    Tape tape;
    BatchResult r = model.run(tape, {&f}, {}, params, false, 0);
    return zscore_invert(r.prediction, stats);
}

// --- ablation variants -------------------------------------------------------

const std::vector<std::string>& variant_names() {
    static const std::vector<std::string> names = {
        "full",          "w/o-WaveletView", "w/o-FourierView", "w/o-RegLosses",
        "w/o-Multi-Res", "w/o-CSS",         "w/o-Alignment",   "w/o-DualView"};
    return names;
}

AblationFlags variant_flags(const std::string& name) {
    AblationFlags f;
    if (name == "full") return f;
    if (name == "w/o-WaveletView") {
        f.no_wavelet_view = true;
        return f;
    }
    if (name == "w/o-FourierView") {
        f.no_fourier_view = true;
        return f;
    }
    if (name == "w/o-RegLosses") {
        f.no_reg_losses = true;
        return f;
    }
    if (name == "w/o-Multi-Res") {
        f.single_resolution = true;
        return f;
    }
    if (name == "w/o-CSS") {
        f.uniform_splitter = true;
        return f;
    }
    if (name == "w/o-Alignment") {
        f.no_alignment = true;
        return f;
    }
    if (name == "w/o-DualView") {
        f.mlp_only = true;
        return f;
    }
    std::string valid;
    for (const std::string& v : variant_names()) valid += (valid.empty() ? "" : ", ") + v;
    throw ConfigError("unknown variant '" + name + "'; valid: " + valid);
}

ModelConfig apply_variant(ModelConfig base, const AblationFlags& flags) {
    base.flags = flags;
    if (flags.no_reg_losses || flags.mlp_only) {
        base.lambda_div = 0.0;
        base.mu_cons = 0.0;
    }
    return base;
}

// --- checkpoint io -------------------------------------------------------------

namespace {

template <typename T>
void write_raw(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_raw(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return static_cast<bool>(in);
}

void write_record(std::ofstream& out, const std::string& name, const Tensor& t) {
    write_raw(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape) write_raw(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamRegistry& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write("M2FM", 4);
    write_raw(out, static_cast<uint32_t>(1));
    for (const std::string& n : params.names()) write_record(out, n, params.get(n));
    for (const std::string& n : params.state_names()) write_record(out, n, params.get(n));
    if (!out) throw DataError("write failure on " + path);
}

void load_checkpoint(const std::string& path, ParamRegistry& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "M2FM", 4) != 0)
        throw DataError(path + ": not a checkpoint (bad magic)");
    uint32_t version = 0;
    if (!read_raw(in, version) || version != 1)
        throw DataError(path + ": unsupported checkpoint version");
    std::set<std::string> filled;
    while (true) {
        uint32_t name_len = 0;
        if (!read_raw(in, name_len)) break;  // EOF
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        uint32_t rank = 0;
        if (!read_raw(in, rank) || rank < 1 || rank > 4)
            throw DataError(path + ": corrupt record for " + name);
        std::vector<int64_t> shape(rank);
        int64_t count = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t d = 0;
            if (!read_raw(in, d)) throw DataError(path + ": truncated dims for " + name);
            shape[i] = d;
            count *= d;
        }
        std::vector<double> vals(static_cast<size_t>(count));
        in.read(reinterpret_cast<char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * sizeof(double)));
        if (!in) throw DataError(path + ": truncated values for " + name);
        if (!params.has(name)) throw DataError(path + ": unexpected tensor " + name);
        Tensor& p = params.get(name);
        if (p.shape != shape)
            throw ConfigError(path + ": shape mismatch for " + name + ", checkpoint " +
                              shape_str(shape) + " vs model " + shape_str(p.shape));
        p.v = std::move(vals);
        filled.insert(name);
    }
    for (const std::string& n : params.names())
        if (!filled.count(n)) throw DataError(path + ": missing tensor " + n);
    for (const std::string& n : params.state_names())
        if (!filled.count(n)) throw DataError(path + ": missing state " + n);
}

}  // namespace m2fmoe

#include "m2fmoe/config.hpp"

#include <fstream>
#include <sstream>

namespace m2fmoe {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (...) {
        throw ConfigError("config: key " + key + " expects an integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (...) {
        throw ConfigError("config: key " + key + " expects a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config: key " + key + " expects a boolean, got '" + v + "'");
}

std::vector<int64_t> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int64_t> out;
    std::string item;
    std::stringstream ss(v);
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(parse_int(key, item));
    }
    if (out.empty()) throw ConfigError("config: key " + key + " expects a list of integers");
    return out;
}

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    ModelConfig& m = cfg.model;
    TrainConfig& t = cfg.train;
    if (key == "model.t_in") m.t_in = parse_int(key, value);
    else if (key == "model.t_p") m.t_p = parse_int(key, value);
    else if (key == "model.t_r") m.t_r = parse_int(key, value);
    else if (key == "model.channels") m.channels = parse_int(key, value);
    else if (key == "model.experts") m.experts = parse_int(key, value);
    else if (key == "model.resolutions") m.resolutions = parse_int_list(key, value);
    else if (key == "model.hidden") m.hidden = parse_int(key, value);
    else if (key == "model.routing_hidden") m.routing_hidden = parse_int(key, value);
    else if (key == "model.wavelet_channels") m.wavelet_channels = parse_int(key, value);
    else if (key == "model.wavelet_out_hidden") m.wavelet_out_hidden = parse_int(key, value);
    else if (key == "model.scales") m.scales = parse_int(key, value);
    else if (key == "model.wavelet_order") m.wavelet_order = static_cast<int>(parse_int(key, value));
    else if (key == "model.dropout") m.dropout = parse_double(key, value);
    else if (key == "model.lambda_div") m.lambda_div = parse_double(key, value);
    else if (key == "model.mu_cons") m.mu_cons = parse_double(key, value);
    else if (key == "model.band_sharpness") m.band_sharpness = parse_double(key, value);
    else if (key == "train.lr") t.lr = parse_double(key, value);
    else if (key == "train.batch_size") t.batch_size = parse_int(key, value);
    else if (key == "train.max_epochs") t.max_epochs = parse_int(key, value);
    else if (key == "train.patience") t.patience = parse_int(key, value);
    else if (key == "train.seed") t.seed = static_cast<uint64_t>(parse_int(key, value));
    else if (key == "train.grad_clip") t.grad_clip = parse_double(key, value);
    else if (key == "train.val_windows") t.val_windows = parse_int(key, value);
    else if (key == "train.verbose") t.verbose = parse_bool(key, value);
    else if (key == "train.oversample") cfg.oversample_enabled = parse_bool(key, value);
    else if (key == "train.oversample_cap") cfg.oversample_cap = parse_double(key, value);
    else if (key == "train.gmm_components") cfg.gmm_components = static_cast<int>(parse_int(key, value));
    else if (key == "data.csv") cfg.data_csv = value;
    else if (key == "data.train_fraction") cfg.train_fraction = parse_double(key, value);
    else throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    if (train.lr <= 0.0) throw ConfigError("config: train.lr must be positive");
    if (train.batch_size < 1 || train.max_epochs < 1 || train.patience < 1)
        throw ConfigError("config: train sizes must be positive");
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
        throw ConfigError("config: data.train_fraction must lie in (0,1)");
    if (oversample_cap < 0.0) throw ConfigError("config: train.oversample_cap must be >= 0");
    if (gmm_components < 3) throw ConfigError("config: train.gmm_components must be >= 3");
}

RunConfig parse_run_config_text(const std::string& text, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    std::stringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string s = trim(line);
        size_t hash = s.find('#');
        if (hash != std::string::npos) s = trim(s.substr(0, hash));
        if (s.empty()) continue;
        if (s.front() == '[' && s.back() == ']') {
            section = trim(s.substr(1, s.size() - 2));
            if (section != "model" && section != "train" && section != "data")
                throw ConfigError("config line " + std::to_string(line_no) + ": unknown section [" +
                                  section + "]");
            continue;
        }
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        std::string key = trim(s.substr(0, eq));
        std::string value = trim(s.substr(eq + 1));
        if (section.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key +
                              "' outside any section");
        apply_key(cfg, section + "." + key, value);
    }
    for (const std::string& ov : overrides) {
        size_t eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + ov + "' must be section.key=value");
        apply_key(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

RunConfig parse_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config_text(ss.str(), overrides);
}

}  // namespace m2fmoe

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace brimpr {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ConfigKey {
    const char* name;
    const char* default_value;
    const char* description;
};

/// Every supported key with its documented default. Paper-sourced values are
/// annotated; the rest are desk-scale defaults.
inline const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"seed", "42", "global RNG seed (env BRIMPR_SEED is the fallback)"},
        {"model.dim", "32", "token dim d shared by encoders and joint module"},
        {"model.input_dim", "16", "raw feature width per token before embedding"},
        {"model.heads", "2", "attention heads"},
        {"model.layers", "2", "transformer layers per modality encoder"},
        {"model.layers_joint", "2", "transformer layers in the joint module"},
        {"model.tokens", "8", "tokens per modality sample"},
        {"model.prompts_per_layer", "10", "prompt tokens per layer (paper: 10)"},
        {"model.classes", "5", "number of classes C"},
        {"model.mlp_hidden", "128", "transformer MLP hidden width"},
        {"task.separation", "2.0", "inter-class prototype scale"},
        {"task.prototype_seed", "7001", "seed for class prototypes and mixing matrices"},
        {"task.noise", "0.3", "intra-class latent noise scale"},
        {"task.token_noise", "0.3", "per-token noise scale"},
        {"pretrain.epochs", "12", "source-training epochs"},
        {"pretrain.lr", "1e-3", "source-training Adam learning rate"},
        {"pretrain.batch_size", "32", "source-training batch size"},
        {"pretrain.train_samples", "384", "labeled source samples"},
        {"pretrain.test_samples", "256", "held-out source samples for accuracy"},
        {"pretrain.bank_samples", "32", "unlabeled source samples for the stats bank (paper: 32)"},
        {"adapt.lr", "1e-4", "adaptation Adam learning rate (paper: 1e-4)"},
        {"adapt.batch_size", "16", "stream batch size (paper: 64; desk default 16)"},
        {"adapt.mask_ratio", "0.5", "CMER token mask ratio (paper: 0.5)"},
        {"adapt.tau0", "0.2", "AdaTp amplitude tau_0 (paper: 0.2)"},
        {"adapt.d0", "5", "AdaTp midpoint D_0 (paper: 5)"},
        {"adapt.tau", "0.07", "IICL temperature (paper: 0.07 unimodal, 0.25 multimodal)"},
        {"adapt.beta1", "0.9", "Adam beta1"},
        {"adapt.beta2", "0.999", "Adam beta2"},
        {"adapt.eps", "1e-8", "Adam epsilon"},
        {"adapt.swap_lambda", "0", "ablation: swap the CMER lambda weights"},
        {"detector.window", "10", "sliding-window size w (paper: 10)"},
        {"detector.k", "5", "Z-score threshold k (paper: 5)"},
        {"stream.batches", "50", "number of stream batches"},
        {"stream.schedule_a", "none:0", "modality-a corruption schedule"},
        {"stream.schedule_v", "none:0", "modality-v corruption schedule"},
    };
    return schema;
}

/// Flat key=value configuration with '#' comments. Unknown keys are rejected.
class Config {
public:
    Config() {
        for (const ConfigKey& k : config_schema()) values_[k.name] = k.default_value;
    }

    static Config from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file '" + path + "'");
        std::ostringstream ss;
        ss << f.rdbuf();
        Config cfg;
        cfg.merge_text(ss.str(), path);
        return cfg;
    }

    void merge_text(const std::string& text, const std::string& origin) {
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip_comment(line);
            if (s.empty()) continue;
            auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected key = value");
            std::string key = trim(s.substr(0, eq));
            std::string value = trim(s.substr(eq + 1));
            set(key, value);
        }
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = value;
        explicit_.insert(key);
    }

    /// Whether the key was set by a file or flag rather than left at default.
    bool is_explicit(const std::string& key) const { return explicit_.count(key) > 0; }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    int get_int(const std::string& key) const {
        try {
            std::size_t used = 0;
            int v = std::stoi(get(key), &used);
            if (used != get(key).size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' expects an integer, got '" + get(key) +
                              "'");
        }
    }

    double get_double(const std::string& key) const {
        try {
            std::size_t used = 0;
            double v = std::stod(get(key), &used);
            if (used != get(key).size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' expects a number, got '" + get(key) +
                              "'");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "1" || v == "true" || v == "yes") return true;
        if (v == "0" || v == "false" || v == "no") return false;
        throw ConfigError("config key '" + key + "' expects a boolean, got '" + v + "'");
    }

    std::uint64_t get_seed() const { return static_cast<std::uint64_t>(get_int("seed")); }

private:
    std::map<std::string, std::string> values_;

    static std::string strip_comment(const std::string& line) {
        auto hash = line.find('#');
        return trim(hash == std::string::npos ? line : line.substr(0, hash));
    }

    static std::string trim(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        std::size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
};

}  // namespace brimpr

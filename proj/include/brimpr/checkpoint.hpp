#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "brimpr/model.hpp"
#include "brimpr/stats.hpp"
#include "brimpr/tensor.hpp"

namespace brimpr {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Ordered collection of named tensors. Serialization order is the insertion
/// order, which makes load -> save round trips byte-identical.
class TensorStore {
public:
    void add(std::string name, Tensor t) {
        if (index_.count(name))
            throw std::invalid_argument("tensor store: duplicate name '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.emplace_back(std::move(name), std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw CheckpointError("tensor store: missing entry '" + name + "'");
        return entries_[it->second].second;
    }

    double get_scalar(const std::string& name) const {
        const Tensor& t = get(name);
        if (!t.is_scalar())
            throw CheckpointError("tensor store: '" + name + "' is not a scalar");
        return t.values[0];
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

    bool done() const { return pos_ == size_; }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i]))
                    << (8 * i);
        pos_ += 8;
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s(data_ + pos_, n);
        pos_ += n;
        return s;
    }

private:
    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;

    void need(std::size_t n) const {
        if (pos_ + n > size_) throw CheckpointError("checkpoint truncated");
    }
};

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "BMPR1";

inline std::string serialize_checkpoint(const TensorStore& store) {
    std::string out;
    out.append(kCheckpointMagic, 5);
    for (const auto& [name, t] : store.entries()) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : t.values) detail::put_f64(out, v);
    }
    return out;
}

inline TensorStore parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 5 || bytes.compare(0, 5, kCheckpointMagic) != 0)
        throw CheckpointError("bad checkpoint magic");
    detail::Reader r(bytes.data() + 5, bytes.size() - 5);
    TensorStore store;
    while (!r.done()) {
        std::uint32_t name_len = r.u32();
        if (name_len == 0 || name_len > (1u << 20)) throw CheckpointError("bad name length");
        std::string name = r.bytes(name_len);
        std::uint32_t rank = r.u32();
        if (rank == 0 || rank > 8) throw CheckpointError("bad tensor rank");
        std::vector<int> shape;
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint32_t d = r.u32();
            if (d == 0 || d > (1u << 24)) throw CheckpointError("bad tensor dim");
            shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        std::vector<double> values(numel);
        for (std::size_t i = 0; i < numel; ++i) values[i] = r.f64();
        store.add(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    return store;
}

inline void write_checkpoint(const std::string& path, const TensorStore& store) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
    std::string bytes = serialize_checkpoint(store);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for '" + path + "'");
}

inline TensorStore read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Model <-> store

inline void add_scalar(TensorStore& store, const std::string& name, double v) {
    store.add(name, Tensor::scalar(v));
}

inline void encoder_config_to_store(TensorStore& s, const std::string& p,
                                    const EncoderConfig& c) {
    add_scalar(s, p + "/layers", c.layers);
    add_scalar(s, p + "/dim", c.dim);
    add_scalar(s, p + "/heads", c.heads);
    add_scalar(s, p + "/tokens", c.tokens);
    add_scalar(s, p + "/prompt_tokens", c.prompt_tokens);
    add_scalar(s, p + "/input_dim", c.input_dim);
    add_scalar(s, p + "/mlp_hidden", c.mlp_hidden);
}

inline EncoderConfig encoder_config_from_store(const TensorStore& s, const std::string& p) {
    EncoderConfig c;
    c.layers = static_cast<int>(s.get_scalar(p + "/layers"));
    c.dim = static_cast<int>(s.get_scalar(p + "/dim"));
    c.heads = static_cast<int>(s.get_scalar(p + "/heads"));
    c.tokens = static_cast<int>(s.get_scalar(p + "/tokens"));
    c.prompt_tokens = static_cast<int>(s.get_scalar(p + "/prompt_tokens"));
    c.input_dim = static_cast<int>(s.get_scalar(p + "/input_dim"));
    c.mlp_hidden = static_cast<int>(s.get_scalar(p + "/mlp_hidden"));
    return c;
}

/// Serializes the full bundle plus the source-statistics bank. Extra scalars
/// (e.g. task parameters) can be appended by the caller before writing.
inline TensorStore bundle_to_store(const ModelBundle& m, const SourceStatsBank& bank) {
    TensorStore s;
    add_scalar(s, "config/classes", m.classes);
    encoder_config_to_store(s, "config/enc_a", m.cfg_a);
    encoder_config_to_store(s, "config/enc_v", m.cfg_v);
    add_scalar(s, "config/joint/layers", m.cfg_joint.layers);
    add_scalar(s, "config/joint/dim", m.cfg_joint.dim);
    add_scalar(s, "config/joint/heads", m.cfg_joint.heads);
    add_scalar(s, "config/joint/mlp_hidden", m.cfg_joint.mlp_hidden);
    auto named = named_tensors(const_cast<ModelBundle&>(m));
    for (const auto& [name, t] : named) s.add(name, *t);
    auto stats_block = [&s](const std::string& prefix,
                            const std::vector<LayerGaussianStats>& layers) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            s.add(prefix + "/layer" + std::to_string(i) + "/mean", layers[i].mean);
            s.add(prefix + "/layer" + std::to_string(i) + "/std", layers[i].std);
        }
    };
    stats_block("stats/a", bank.a);
    stats_block("stats/v", bank.v);
    stats_block("stats/j", bank.joint);
    return s;
}

inline std::pair<ModelBundle, SourceStatsBank> bundle_from_store(const TensorStore& s) {
    ModelBundle m;
    m.classes = static_cast<int>(s.get_scalar("config/classes"));
    m.cfg_a = encoder_config_from_store(s, "config/enc_a");
    m.cfg_v = encoder_config_from_store(s, "config/enc_v");
    m.cfg_joint.layers = static_cast<int>(s.get_scalar("config/joint/layers"));
    m.cfg_joint.dim = static_cast<int>(s.get_scalar("config/joint/dim"));
    m.cfg_joint.heads = static_cast<int>(s.get_scalar("config/joint/heads"));
    m.cfg_joint.mlp_hidden = static_cast<int>(s.get_scalar("config/joint/mlp_hidden"));
    m.cfg_a.validate();
    m.cfg_v.validate();
    m.cfg_joint.validate();

    m.enc_a.layers.resize(static_cast<std::size_t>(m.cfg_a.layers));
    m.enc_v.layers.resize(static_cast<std::size_t>(m.cfg_v.layers));
    m.joint.layers.resize(static_cast<std::size_t>(m.cfg_joint.layers));
    if (m.cfg_a.prompt_tokens > 0)
        m.prompts.a.resize(static_cast<std::size_t>(m.cfg_a.layers));
    if (m.cfg_v.prompt_tokens > 0)
        m.prompts.v.resize(static_cast<std::size_t>(m.cfg_v.layers));

    for (auto& [name, t] : named_tensors(m)) {
        const Tensor& src = s.get(name);
        *t = src;
    }

    SourceStatsBank bank;
    auto stats_block = [&s](const std::string& prefix, int layers,
                            std::vector<LayerGaussianStats>& out) {
        for (int i = 0; i < layers; ++i) {
            out.push_back({s.get(prefix + "/layer" + std::to_string(i) + "/mean"),
                           s.get(prefix + "/layer" + std::to_string(i) + "/std")});
        }
    };
    stats_block("stats/a", m.cfg_a.layers, bank.a);
    stats_block("stats/v", m.cfg_v.layers, bank.v);
    stats_block("stats/j", m.cfg_joint.layers, bank.joint);
    return {std::move(m), std::move(bank)};
}

}  // namespace brimpr

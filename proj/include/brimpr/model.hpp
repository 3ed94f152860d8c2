#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "brimpr/rng.hpp"
#include "brimpr/stats.hpp"
#include "brimpr/tape.hpp"
#include "brimpr/tensor.hpp"

namespace brimpr {

enum class Modality { a, v };

inline const char* modality_name(Modality u) { return u == Modality::a ? "a" : "v"; }

struct EncoderConfig {
    int layers = 2;
    int dim = 32;
    int heads = 2;
    int tokens = 8;
    int prompt_tokens = 10;
    int input_dim = 16;
    int mlp_hidden = 128;

    void validate() const {
        if (layers < 1 || dim < 1 || heads < 1 || tokens < 1 || input_dim < 1 || mlp_hidden < 1)
            throw std::invalid_argument("encoder config: dimensions must be positive");
        if (dim % heads != 0)
            throw std::invalid_argument("encoder config: dim " + std::to_string(dim) +
                                        " not divisible by heads " + std::to_string(heads));
        if (prompt_tokens < 0)
            throw std::invalid_argument("encoder config: prompt_tokens must be >= 0");
    }
};

struct JointConfig {
    int layers = 2;
    int dim = 32;
    int heads = 2;
    int mlp_hidden = 128;

    void validate() const {
        if (layers < 1 || dim < 1 || heads < 1 || mlp_hidden < 1)
            throw std::invalid_argument("joint config: dimensions must be positive");
        if (dim % heads != 0)
            throw std::invalid_argument("joint config: dim not divisible by heads");
    }
};

struct LayerNormParams {
    Tensor gamma, beta;
};

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct MlpParams {
    Tensor w1, b1, w2, b2;
};

struct TransformerLayerParams {
    LayerNormParams ln1;
    AttentionParams attn;
    LayerNormParams ln2;
    MlpParams mlp;
};

struct EncoderWeights {
    Tensor embed_w, embed_b;  // input_dim x dim projection
    std::vector<TransformerLayerParams> layers;
};

struct JointWeights {
    std::vector<TransformerLayerParams> layers;
};

struct ClassifierParams {
    Tensor w, b;  // dim x classes, classes
};

/// Per-modality, per-layer prompt token matrices: the only parameters that
/// adaptation is allowed to train.
struct PromptSet {
    std::vector<Tensor> a;  // layers x (prompt_tokens x dim), empty when m_p = 0
    std::vector<Tensor> v;

    std::vector<Tensor>& of(Modality u) { return u == Modality::a ? a : v; }
    const std::vector<Tensor>& of(Modality u) const { return u == Modality::a ? a : v; }
};

/// Frozen two-modality transformer plus its trainable prompts. Everything
/// outside `prompts` is immutable after pretraining.
struct ModelBundle {
    EncoderConfig cfg_a, cfg_v;
    JointConfig cfg_joint;
    int classes = 5;

    EncoderWeights enc_a, enc_v;
    JointWeights joint;
    ClassifierParams head;
    PromptSet prompts;

    const EncoderConfig& cfg(Modality u) const { return u == Modality::a ? cfg_a : cfg_v; }
    const EncoderWeights& enc(Modality u) const { return u == Modality::a ? enc_a : enc_v; }
};

struct MaskSpec {
    double ratio = 0.5;
    std::uint64_t seed = 0;
};

inline int kept_token_count(int tokens, double ratio) {
    if (ratio < 0.0 || ratio >= 1.0)
        throw std::invalid_argument("mask ratio must lie in [0, 1), got " +
                                    std::to_string(ratio));
    int kept = static_cast<int>(std::ceil(tokens * (1.0 - ratio)));
    return std::max(kept, 1);
}

/// Uniformly-random kept-token positions, ascending so order is preserved.
inline std::vector<int> mask_indices(int tokens, double ratio, Rng& rng) {
    return rng.sample_indices(tokens, kept_token_count(tokens, ratio));
}

inline Tensor take_token_rows(const Tensor& x, const std::vector<int>& rows) {
    Tensor out = Tensor::zeros({static_cast<int>(rows.size()), x.cols()});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < x.cols(); ++j) out.at(static_cast<int>(i), j) = x.at(rows[i], j);
    return out;
}

inline Tensor mask_tokens(const Tensor& x, const MaskSpec& spec, Rng& rng) {
    if (!x.is_matrix()) throw std::invalid_argument("mask_tokens: expected m x d tokens");
    return take_token_rows(x, mask_indices(x.rows(), spec.ratio, rng));
}

inline Tensor mask_tokens(const Tensor& x, const MaskSpec& spec) {
    Rng rng(spec.seed);
    return mask_tokens(x, spec, rng);
}

// ---------------------------------------------------------------------------
// Initialization

inline Tensor xavier_uniform(int rows, int cols, Rng& rng) {
    double r = std::sqrt(6.0 / (rows + cols));
    Tensor t = Tensor::zeros({rows, cols});
    for (double& v : t.values) v = rng.uniform(-r, r);
    return t;
}

inline TransformerLayerParams init_layer(int dim, int hidden, Rng& rng) {
    TransformerLayerParams p;
    p.ln1.gamma = Tensor(std::vector<int>{dim}, std::vector<double>(dim, 1.0));
    p.ln1.beta = Tensor::zeros({dim});
    p.attn.wq = xavier_uniform(dim, dim, rng);
    p.attn.bq = Tensor::zeros({dim});
    p.attn.wk = xavier_uniform(dim, dim, rng);
    p.attn.bk = Tensor::zeros({dim});
    p.attn.wv = xavier_uniform(dim, dim, rng);
    p.attn.bv = Tensor::zeros({dim});
    p.attn.wo = xavier_uniform(dim, dim, rng);
    p.attn.bo = Tensor::zeros({dim});
    p.ln2.gamma = Tensor(std::vector<int>{dim}, std::vector<double>(dim, 1.0));
    p.ln2.beta = Tensor::zeros({dim});
    p.mlp.w1 = xavier_uniform(dim, hidden, rng);
    p.mlp.b1 = Tensor::zeros({hidden});
    p.mlp.w2 = xavier_uniform(hidden, dim, rng);
    p.mlp.b2 = Tensor::zeros({dim});
    return p;
}

inline EncoderWeights init_encoder(const EncoderConfig& cfg, Rng& rng) {
    EncoderWeights w;
    w.embed_w = xavier_uniform(cfg.input_dim, cfg.dim, rng);
    w.embed_b = Tensor::zeros({cfg.dim});
    for (int i = 0; i < cfg.layers; ++i) w.layers.push_back(init_layer(cfg.dim, cfg.mlp_hidden, rng));
    return w;
}

/// Fresh bundle with random frozen-to-be weights and no prompts yet.
inline ModelBundle init_bundle(const EncoderConfig& cfg_a, const EncoderConfig& cfg_v,
                               const JointConfig& cfg_joint, int classes, Rng& rng) {
    cfg_a.validate();
    cfg_v.validate();
    cfg_joint.validate();
    if (cfg_a.dim != cfg_joint.dim || cfg_v.dim != cfg_joint.dim)
        throw std::invalid_argument("encoders and joint module must share token dim");
    if (classes < 2) throw std::invalid_argument("need at least 2 classes");
    ModelBundle m;
    m.cfg_a = cfg_a;
    m.cfg_v = cfg_v;
    m.cfg_joint = cfg_joint;
    m.classes = classes;
    m.enc_a = init_encoder(cfg_a, rng);
    m.enc_v = init_encoder(cfg_v, rng);
    for (int i = 0; i < cfg_joint.layers; ++i)
        m.joint.layers.push_back(init_layer(cfg_joint.dim, cfg_joint.mlp_hidden, rng));
    m.head.w = xavier_uniform(cfg_joint.dim, classes, rng);
    m.head.b = Tensor::zeros({classes});
    return m;
}

inline Tensor draw_prompt_matrix(int prompt_tokens, int dim, Rng& rng) {
    double r = std::sqrt(6.0 / (dim + dim));
    Tensor t = Tensor::zeros({prompt_tokens, dim});
    for (double& v : t.values) v = rng.uniform(-r, r);
    return t;
}

inline void init_prompts(ModelBundle& m, Rng& rng) {
    m.prompts.a.clear();
    m.prompts.v.clear();
    if (m.cfg_a.prompt_tokens > 0)
        for (int i = 0; i < m.cfg_a.layers; ++i)
            m.prompts.a.push_back(draw_prompt_matrix(m.cfg_a.prompt_tokens, m.cfg_a.dim, rng));
    if (m.cfg_v.prompt_tokens > 0)
        for (int i = 0; i < m.cfg_v.layers; ++i)
            m.prompts.v.push_back(draw_prompt_matrix(m.cfg_v.prompt_tokens, m.cfg_v.dim, rng));
}

/// Redraws one modality's prompts from the init distribution; the other
/// modality's prompts are untouched.
inline void reset_prompts(ModelBundle& m, Modality u, Rng& rng) {
    const EncoderConfig& cfg = m.cfg(u);
    auto& ps = m.prompts.of(u);
    ps.clear();
    if (cfg.prompt_tokens > 0)
        for (int i = 0; i < cfg.layers; ++i)
            ps.push_back(draw_prompt_matrix(cfg.prompt_tokens, cfg.dim, rng));
}

// ---------------------------------------------------------------------------
// Named-tensor walk (checkpointing, checksums)

inline std::vector<std::pair<std::string, Tensor*>> named_tensors(ModelBundle& m) {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto layer = [&out](const std::string& prefix, TransformerLayerParams& p) {
        out.emplace_back(prefix + "/ln1/gamma", &p.ln1.gamma);
        out.emplace_back(prefix + "/ln1/beta", &p.ln1.beta);
        out.emplace_back(prefix + "/attn/wq", &p.attn.wq);
        out.emplace_back(prefix + "/attn/bq", &p.attn.bq);
        out.emplace_back(prefix + "/attn/wk", &p.attn.wk);
        out.emplace_back(prefix + "/attn/bk", &p.attn.bk);
        out.emplace_back(prefix + "/attn/wv", &p.attn.wv);
        out.emplace_back(prefix + "/attn/bv", &p.attn.bv);
        out.emplace_back(prefix + "/attn/wo", &p.attn.wo);
        out.emplace_back(prefix + "/attn/bo", &p.attn.bo);
        out.emplace_back(prefix + "/ln2/gamma", &p.ln2.gamma);
        out.emplace_back(prefix + "/ln2/beta", &p.ln2.beta);
        out.emplace_back(prefix + "/mlp/w1", &p.mlp.w1);
        out.emplace_back(prefix + "/mlp/b1", &p.mlp.b1);
        out.emplace_back(prefix + "/mlp/w2", &p.mlp.w2);
        out.emplace_back(prefix + "/mlp/b2", &p.mlp.b2);
    };
    auto encoder = [&out, &layer](const std::string& prefix, EncoderWeights& w) {
        out.emplace_back(prefix + "/embed/w", &w.embed_w);
        out.emplace_back(prefix + "/embed/b", &w.embed_b);
        for (std::size_t i = 0; i < w.layers.size(); ++i)
            layer(prefix + "/layer" + std::to_string(i), w.layers[i]);
    };
    encoder("enc_a", m.enc_a);
    encoder("enc_v", m.enc_v);
    for (std::size_t i = 0; i < m.joint.layers.size(); ++i)
        layer("joint/layer" + std::to_string(i), m.joint.layers[i]);
    out.emplace_back("head/w", &m.head.w);
    out.emplace_back("head/b", &m.head.b);
    for (std::size_t i = 0; i < m.prompts.a.size(); ++i)
        out.emplace_back("prompts/a/layer" + std::to_string(i), &m.prompts.a[i]);
    for (std::size_t i = 0; i < m.prompts.v.size(); ++i)
        out.emplace_back("prompts/v/layer" + std::to_string(i), &m.prompts.v[i]);
    return out;
}

/// FNV-1a over the frozen weights' names and raw bytes; prompts excluded.
inline std::uint64_t checksum_frozen(const ModelBundle& m) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    auto named = named_tensors(const_cast<ModelBundle&>(m));
    for (const auto& [name, t] : named) {
        if (name.rfind("prompts/", 0) == 0) continue;
        mix(name.data(), name.size());
        mix(t->values.data(), t->values.size() * sizeof(double));
    }
    return h;
}

// ---------------------------------------------------------------------------
// Tape-bound forward passes

enum class TrainMode { none, prompts, all };

struct EncodeResult {
    std::vector<NodeId> layer_tokens;  // retained tokens per layer, each m x d
    std::vector<NodeId> layer_pooled;  // mean-pooled d-vector per layer
    NodeId final_tokens = -1;
};

struct JointResult {
    std::vector<NodeId> layer_pooled;  // per joint layer, d-vectors
    NodeId final_pooled = -1;
    NodeId logits = -1;  // C-vector
};

/// Binds a ModelBundle's tensors onto one tape and exposes the forward passes.
/// Weight leaves are created once per tape, so prompt gradients accumulate
/// across every sample in the batch.
class TapeModel {
public:
    TapeModel(Tape& tape, const ModelBundle& model, TrainMode mode = TrainMode::prompts,
              bool use_prompts = true)
        : tape_(tape), model_(model), mode_(mode), use_prompts_(use_prompts) {}

    Tape& tape() { return tape_; }
    const ModelBundle& model() const { return model_; }

    NodeId prompt_node(Modality u, int layer) {
        const auto& ps = model_.prompts.of(u);
        return bind(ps.at(static_cast<std::size_t>(layer)), mode_ != TrainMode::none);
    }

    /// Tape node bound to this exact tensor, or -1 if the forward never
    /// touched it.
    NodeId node_for(const Tensor& t) const {
        auto it = bound_.find(&t);
        return it == bound_.end() ? -1 : it->second;
    }

    /// All prompt leaves in (modality a layers..., modality v layers...) order.
    std::vector<NodeId> prompt_nodes() {
        std::vector<NodeId> out;
        for (std::size_t i = 0; i < model_.prompts.a.size(); ++i)
            out.push_back(prompt_node(Modality::a, static_cast<int>(i)));
        for (std::size_t i = 0; i < model_.prompts.v.size(); ++i)
            out.push_back(prompt_node(Modality::v, static_cast<int>(i)));
        return out;
    }

    /// Prompted encoder forward per Eq-style deep prompting: at each layer the
    /// prompts are prepended, attention runs over the whole sequence, and the
    /// prompt-position outputs are discarded.
    EncodeResult encode(const Tensor& x, Modality u) {
        const EncoderConfig& cfg = model_.cfg(u);
        const EncoderWeights& w = model_.enc(u);
        if (!x.is_matrix() || x.cols() != cfg.input_dim)
            throw std::invalid_argument("encode: expected tokens x " +
                                        std::to_string(cfg.input_dim) + ", got " + x.shape_str());
        if (x.rows() > cfg.tokens)
            throw std::invalid_argument("encode: more tokens than configured (" +
                                        std::to_string(x.rows()) + " > " +
                                        std::to_string(cfg.tokens) + ")");
        bool prompts_active = use_prompts_ && cfg.prompt_tokens > 0 &&
                              !model_.prompts.of(u).empty();
        int m = x.rows();
        NodeId h = tape_.add_rowvec(tape_.matmul(tape_.constant(x), frozen(w.embed_w)),
                                    frozen(w.embed_b));
        EncodeResult res;
        for (int i = 0; i < cfg.layers; ++i) {
            NodeId seq = h;
            if (prompts_active) seq = tape_.concat_rows({prompt_node(u, i), h});
            NodeId out = transformer_layer(seq, w.layers[static_cast<std::size_t>(i)], cfg.heads);
            if (prompts_active) {
                std::vector<int> keep(static_cast<std::size_t>(m));
                for (int r = 0; r < m; ++r) keep[static_cast<std::size_t>(r)] = cfg.prompt_tokens + r;
                out = tape_.take_rows(out, keep);
            }
            h = out;
            res.layer_tokens.push_back(h);
            res.layer_pooled.push_back(tape_.mean_rows(h));
        }
        res.final_tokens = h;
        return res;
    }

    /// Joint module over the token-axis concatenation of the given sequences;
    /// carries no prompts. Passing a single modality's tokens realizes the
    /// unimodal path.
    JointResult joint_forward(const std::vector<NodeId>& token_seqs) {
        if (token_seqs.empty()) throw std::invalid_argument("joint_forward: no inputs");
        NodeId h = token_seqs.size() > 1 ? tape_.concat_rows(token_seqs) : token_seqs[0];
        if (tape_.value(h).cols() != model_.cfg_joint.dim)
            throw std::invalid_argument("joint_forward: token dim mismatch");
        JointResult res;
        for (const auto& layer : model_.joint.layers) {
            h = transformer_layer(h, layer, model_.cfg_joint.heads);
            res.layer_pooled.push_back(tape_.mean_rows(h));
        }
        res.final_pooled = res.layer_pooled.back();
        NodeId pooled_row = tape_.reshape(res.final_pooled, {1, model_.cfg_joint.dim});
        NodeId logits_row = tape_.add_rowvec(tape_.matmul(pooled_row, frozen(model_.head.w)),
                                             frozen(model_.head.b));
        res.logits = tape_.reshape(logits_row, {model_.classes});
        return res;
    }

private:
    Tape& tape_;
    const ModelBundle& model_;
    TrainMode mode_;
    bool use_prompts_;
    std::unordered_map<const Tensor*, NodeId> bound_;

    NodeId bind(const Tensor& t, bool trainable) {
        auto it = bound_.find(&t);
        if (it != bound_.end()) return it->second;
        NodeId id = tape_.leaf(t, trainable);
        bound_.emplace(&t, id);
        return id;
    }

    NodeId frozen(const Tensor& t) { return bind(t, mode_ == TrainMode::all); }

    NodeId transformer_layer(NodeId x, const TransformerLayerParams& p, int heads) {
        int dim = tape_.value(x).cols();
        int dh = dim / heads;
        NodeId u = tape_.layer_norm(x, frozen(p.ln1.gamma), frozen(p.ln1.beta));
        NodeId q = tape_.add_rowvec(tape_.matmul(u, frozen(p.attn.wq)), frozen(p.attn.bq));
        NodeId k = tape_.add_rowvec(tape_.matmul(u, frozen(p.attn.wk)), frozen(p.attn.bk));
        NodeId v = tape_.add_rowvec(tape_.matmul(u, frozen(p.attn.wv)), frozen(p.attn.bv));
        std::vector<NodeId> head_outs;
        for (int hd = 0; hd < heads; ++hd) {
            NodeId qh = heads > 1 ? tape_.slice_cols(q, hd * dh, dh) : q;
            NodeId kh = heads > 1 ? tape_.slice_cols(k, hd * dh, dh) : k;
            NodeId vh = heads > 1 ? tape_.slice_cols(v, hd * dh, dh) : v;
            NodeId scores = tape_.scale(tape_.matmul(qh, tape_.transpose(kh)),
                                        1.0 / std::sqrt(static_cast<double>(dh)));
            head_outs.push_back(tape_.matmul(tape_.softmax(scores), vh));
        }
        NodeId o = heads > 1 ? tape_.concat_cols(head_outs) : head_outs[0];
        NodeId attn_out = tape_.add_rowvec(tape_.matmul(o, frozen(p.attn.wo)),
                                           frozen(p.attn.bo));
        NodeId x2 = tape_.add(x, attn_out);
        NodeId u2 = tape_.layer_norm(x2, frozen(p.ln2.gamma), frozen(p.ln2.beta));
        NodeId hidden = tape_.gelu(
            tape_.add_rowvec(tape_.matmul(u2, frozen(p.mlp.w1)), frozen(p.mlp.b1)));
        NodeId mlp_out = tape_.add_rowvec(tape_.matmul(hidden, frozen(p.mlp.w2)),
                                          frozen(p.mlp.b2));
        return tape_.add(x2, mlp_out);
    }
};

// ---------------------------------------------------------------------------
// Value-level helpers

/// Complete-pair logits for one sample on a throwaway tape.
inline Tensor predict_logits(const ModelBundle& m, const Tensor& xa, const Tensor& xv,
                             bool use_prompts = true) {
    Tape tape;
    TapeModel tm(tape, m, TrainMode::none, use_prompts);
    EncodeResult ea = tm.encode(xa, Modality::a);
    EncodeResult ev = tm.encode(xv, Modality::v);
    JointResult jr = tm.joint_forward({ea.final_tokens, ev.final_tokens});
    return tape.value(jr.logits);
}

inline int argmax(const Tensor& v) {
    int best = 0;
    for (std::size_t i = 1; i < v.numel(); ++i)
        if (v.values[i] > v.values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

/// Per-layer pooled source statistics for both encoders and the joint module,
/// computed promptless from unlabeled source samples. Done once per model.
inline SourceStatsBank precompute_source_bank(const ModelBundle& m,
                                              const std::vector<Tensor>& xa,
                                              const std::vector<Tensor>& xv) {
    if (xa.size() != xv.size())
        throw std::invalid_argument("precompute_source_bank: modality sample counts differ");
    int n = static_cast<int>(xa.size());
    if (n < 2) throw std::invalid_argument("precompute_source_bank: need at least 2 samples");

    int na = m.cfg_a.layers, nv = m.cfg_v.layers, nj = m.cfg_joint.layers;
    std::vector<Tensor> feat_a(static_cast<std::size_t>(na),
                               Tensor::zeros({n, m.cfg_a.dim}));
    std::vector<Tensor> feat_v(static_cast<std::size_t>(nv),
                               Tensor::zeros({n, m.cfg_v.dim}));
    std::vector<Tensor> feat_j(static_cast<std::size_t>(nj),
                               Tensor::zeros({n, m.cfg_joint.dim}));
    for (int s = 0; s < n; ++s) {
        Tape tape;
        TapeModel tm(tape, m, TrainMode::none, /*use_prompts=*/false);
        EncodeResult ea = tm.encode(xa[static_cast<std::size_t>(s)], Modality::a);
        EncodeResult ev = tm.encode(xv[static_cast<std::size_t>(s)], Modality::v);
        JointResult jr = tm.joint_forward({ea.final_tokens, ev.final_tokens});
        for (int i = 0; i < na; ++i) {
            const Tensor& z = tape.value(ea.layer_pooled[static_cast<std::size_t>(i)]);
            for (int j = 0; j < m.cfg_a.dim; ++j)
                feat_a[static_cast<std::size_t>(i)].at(s, j) = z.values[static_cast<std::size_t>(j)];
        }
        for (int i = 0; i < nv; ++i) {
            const Tensor& z = tape.value(ev.layer_pooled[static_cast<std::size_t>(i)]);
            for (int j = 0; j < m.cfg_v.dim; ++j)
                feat_v[static_cast<std::size_t>(i)].at(s, j) = z.values[static_cast<std::size_t>(j)];
        }
        for (int i = 0; i < nj; ++i) {
            const Tensor& z = tape.value(jr.layer_pooled[static_cast<std::size_t>(i)]);
            for (int j = 0; j < m.cfg_joint.dim; ++j)
                feat_j[static_cast<std::size_t>(i)].at(s, j) = z.values[static_cast<std::size_t>(j)];
        }
    }
    SourceStatsBank bank;
    for (const Tensor& f : feat_a) bank.a.push_back(batch_stats(f));
    for (const Tensor& f : feat_v) bank.v.push_back(batch_stats(f));
    for (const Tensor& f : feat_j) bank.joint.push_back(batch_stats(f));
    return bank;
}

}  // namespace brimpr

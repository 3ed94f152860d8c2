#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "brimpr/adapt.hpp"
#include "brimpr/model.hpp"
#include "brimpr/rng.hpp"

namespace brimpr {

/// Two-modality classification task. Each class owns a latent prototype; both
/// modalities see the same per-sample latent through independent mixing
/// matrices, so either modality alone is predictive and fusion helps.
struct TaskSpec {
    int classes = 5;
    int tokens = 8;
    int input_dim = 16;
    std::uint64_t prototype_seed = 7001;
    double separation = 2.0;
    double noise = 0.3;
    double token_noise = 0.3;

    void validate() const {
        if (classes < 2) throw std::invalid_argument("task: need at least 2 classes");
        if (tokens < 1 || input_dim < 1)
            throw std::invalid_argument("task: tokens and input_dim must be positive");
        if (separation <= noise)
            throw std::invalid_argument("task: separation must exceed noise for a learnable task");
    }
};

struct Dataset {
    std::vector<Tensor> a;
    std::vector<Tensor> v;
    std::vector<int> labels;
};

namespace detail {

struct TaskGeometry {
    std::vector<Tensor> prototypes;  // classes x (input_dim)
    Tensor mix_a, mix_v;             // input_dim x input_dim
};

/// Class information lives in a low-rank latent subspace; the rest of the
/// latent coordinates carry only noise. Keeps the task sensitive to input
/// corruption instead of hiding behind high-dimensional redundancy.
inline constexpr int kPrototypeRank = 3;

inline TaskGeometry task_geometry(const TaskSpec& spec) {
    Rng rng(spec.prototype_seed);
    TaskGeometry g;
    int rank = std::min(kPrototypeRank, spec.input_dim);
    for (int c = 0; c < spec.classes; ++c) {
        Tensor p = Tensor::zeros({spec.input_dim});
        for (int j = 0; j < rank; ++j)
            p.values[static_cast<std::size_t>(j)] = spec.separation * rng.normal();
        g.prototypes.push_back(std::move(p));
    }
    auto mixing = [&rng, &spec]() {
        Tensor m = Tensor::zeros({spec.input_dim, spec.input_dim});
        double scale = 1.0 / std::sqrt(static_cast<double>(spec.input_dim));
        for (double& v : m.values) v = scale * rng.normal();
        return m;
    };
    g.mix_a = mixing();
    g.mix_v = mixing();
    return g;
}

/// Modality v observes the prototype through a noisier latent draw than
/// modality a, making a the dominant view the way one modality usually
/// dominates an audio-visual pair. Both stay individually predictive.
inline constexpr double kSecondaryViewNoiseFactor = 2.0;

inline Tensor sample_tokens(const TaskGeometry& g, const TaskSpec& spec, int label,
                            const Tensor& mix, double noise_scale, Rng& rng) {
    Tensor latent = g.prototypes[static_cast<std::size_t>(label)];
    for (double& v : latent.values) v += noise_scale * spec.noise * rng.normal();
    Tensor x = Tensor::zeros({spec.tokens, spec.input_dim});
    for (int t = 0; t < spec.tokens; ++t)
        for (int j = 0; j < spec.input_dim; ++j) {
            double s = 0.0;
            for (int k = 0; k < spec.input_dim; ++k)
                s += mix.at(k, j) * latent.values[static_cast<std::size_t>(k)];
            x.at(t, j) = s + spec.token_noise * rng.normal();
        }
    return x;
}

}  // namespace detail

inline Dataset gen_labeled(const TaskSpec& spec, int n, Rng& rng) {
    spec.validate();
    detail::TaskGeometry g = detail::task_geometry(spec);
    Dataset d;
    for (int i = 0; i < n; ++i) {
        int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.classes)));
        d.labels.push_back(label);
        d.a.push_back(detail::sample_tokens(g, spec, label, g.mix_a, 1.0, rng));
        d.v.push_back(detail::sample_tokens(g, spec, label, g.mix_v,
                                            detail::kSecondaryViewNoiseFactor, rng));
    }
    return d;
}

// ---------------------------------------------------------------------------
// Corruption

enum class CorruptionKind { none, gaussian_noise, channel_scale, token_dropout };

inline const char* corruption_kind_name(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::none: return "none";
        case CorruptionKind::gaussian_noise: return "gaussian";
        case CorruptionKind::channel_scale: return "channel-scale";
        case CorruptionKind::token_dropout: return "token-dropout";
    }
    return "?";
}

inline CorruptionKind corruption_kind_from_name(const std::string& s) {
    if (s == "none") return CorruptionKind::none;
    if (s == "gaussian") return CorruptionKind::gaussian_noise;
    if (s == "channel-scale" || s == "channel_scale") return CorruptionKind::channel_scale;
    if (s == "token-dropout" || s == "token_dropout") return CorruptionKind::token_dropout;
    throw std::invalid_argument("unknown corruption kind '" + s + "'");
}

/// Severity ladders, level 0 being the identity.
inline constexpr double kGaussianSigma[6] = {0.0, 0.1, 0.2, 0.4, 0.8, 1.6};
inline constexpr double kChannelSpread[6] = {0.0, 0.05, 0.1, 0.2, 0.4, 0.8};
inline constexpr double kDropoutFraction[6] = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};

struct CorruptionSpec {
    Modality modality = Modality::a;
    CorruptionKind kind = CorruptionKind::none;
    int severity = 0;

    void validate() const {
        if (severity < 0 || severity > 5)
            throw std::invalid_argument("corruption severity must be in 0..5, got " +
                                        std::to_string(severity));
    }
};

inline Tensor corrupt(const Tensor& x, const CorruptionSpec& spec, Rng& rng) {
    spec.validate();
    if (!x.is_matrix()) throw std::invalid_argument("corrupt: expected m x d tokens");
    if (spec.severity == 0 || spec.kind == CorruptionKind::none) return x;
    Tensor out = x;
    switch (spec.kind) {
        case CorruptionKind::none:
            break;
        case CorruptionKind::gaussian_noise: {
            double sigma = kGaussianSigma[spec.severity];
            for (double& v : out.values) v += sigma * rng.normal();
            break;
        }
        case CorruptionKind::channel_scale: {
            double spread = kChannelSpread[spec.severity];
            for (int j = 0; j < x.cols(); ++j) {
                double f = 1.0 + spread * rng.normal();
                for (int i = 0; i < x.rows(); ++i) out.at(i, j) *= f;
            }
            break;
        }
        case CorruptionKind::token_dropout: {
            double frac = kDropoutFraction[spec.severity];
            int drop = static_cast<int>(std::llround(frac * x.rows()));
            std::vector<int> idx = rng.sample_indices(x.rows(), drop);
            for (int r : idx)
                for (int j = 0; j < x.cols(); ++j) out.at(r, j) = 0.0;
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Streams

/// One piece of a per-modality corruption schedule, active from start_batch
/// until the next segment begins.
struct ScheduleSegment {
    int start_batch = 0;
    CorruptionKind kind = CorruptionKind::none;
    int severity = 0;
};

/// Parses "kind:severity" (whole stream) or "kind:sev@start,kind:sev@start,...".
inline std::vector<ScheduleSegment> parse_schedule(const std::string& text) {
    std::vector<ScheduleSegment> segments;
    std::istringstream in(text);
    std::string part;
    while (std::getline(in, part, ',')) {
        ScheduleSegment seg;
        std::string body = part;
        auto at = part.find('@');
        if (at != std::string::npos) {
            body = part.substr(0, at);
            seg.start_batch = std::stoi(part.substr(at + 1));
        }
        auto colon = body.find(':');
        if (colon == std::string::npos)
            throw std::invalid_argument("schedule segment '" + part + "' needs kind:severity");
        seg.kind = corruption_kind_from_name(body.substr(0, colon));
        seg.severity = std::stoi(body.substr(colon + 1));
        CorruptionSpec{Modality::a, seg.kind, seg.severity}.validate();
        segments.push_back(seg);
    }
    if (segments.empty()) throw std::invalid_argument("empty corruption schedule");
    if (segments.front().start_batch != 0)
        throw std::invalid_argument("schedule must start at batch 0");
    for (std::size_t i = 1; i < segments.size(); ++i)
        if (segments[i].start_batch <= segments[i - 1].start_batch)
            throw std::invalid_argument("schedule segments must have increasing start batches");
    return segments;
}

inline const ScheduleSegment& segment_at(const std::vector<ScheduleSegment>& schedule,
                                         int batch) {
    std::size_t active = 0;
    for (std::size_t i = 0; i < schedule.size(); ++i)
        if (schedule[i].start_batch <= batch) active = i;
    return schedule[active];
}

struct StreamConfig {
    int batch_size = 16;
    int batches = 50;
    std::vector<ScheduleSegment> schedule_a = {{0, CorruptionKind::none, 0}};
    std::vector<ScheduleSegment> schedule_v = {{0, CorruptionKind::none, 0}};
    std::uint64_t seed = 42;

    void validate() const {
        if (batch_size < 1 || batches < 0)
            throw std::invalid_argument("stream: batch_size >= 1 and batches >= 0 required");
        if (schedule_a.empty() || schedule_v.empty())
            throw std::invalid_argument("stream: schedules must be non-empty");
    }
};

/// Stream batches plus the evaluation-only label side channel.
struct Stream {
    std::vector<StreamBatch> batches;
    std::vector<std::vector<int>> labels;
};

inline Stream gen_stream(const TaskSpec& task, const StreamConfig& cfg, Rng& rng) {
    cfg.validate();
    Stream stream;
    for (int b = 0; b < cfg.batches; ++b) {
        // Child seeds isolate clean draws from corruption draws per modality:
        // changing one modality's schedule never shifts the other's samples.
        Rng draw_rng(rng.next_seed());
        Rng corrupt_a_rng(rng.next_seed());
        Rng corrupt_v_rng(rng.next_seed());
        const ScheduleSegment& seg_a = segment_at(cfg.schedule_a, b);
        const ScheduleSegment& seg_v = segment_at(cfg.schedule_v, b);
        Dataset clean = gen_labeled(task, cfg.batch_size, draw_rng);
        StreamBatch batch;
        for (int s = 0; s < cfg.batch_size; ++s) {
            batch.a.push_back(corrupt(clean.a[static_cast<std::size_t>(s)],
                                      {Modality::a, seg_a.kind, seg_a.severity}, corrupt_a_rng));
            batch.v.push_back(corrupt(clean.v[static_cast<std::size_t>(s)],
                                      {Modality::v, seg_v.kind, seg_v.severity}, corrupt_v_rng));
        }
        stream.batches.push_back(std::move(batch));
        stream.labels.push_back(std::move(clean.labels));
    }
    return stream;
}

// ---------------------------------------------------------------------------
// Source pretraining

struct PretrainConfig {
    int epochs = 12;
    double lr = 1e-3;
    int batch_size = 32;
    int train_samples = 384;
    int test_samples = 256;
    int bank_samples = 32;
};

struct PretrainResult {
    ModelBundle model;
    SourceStatsBank bank;
    Dataset bank_data;  // the unlabeled source samples behind the bank
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double final_loss = 0.0;
};

inline double evaluate_accuracy(const ModelBundle& model, const std::vector<Tensor>& xa,
                                const std::vector<Tensor>& xv, const std::vector<int>& labels,
                                bool use_prompts) {
    int correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        Tensor logits = predict_logits(model, xa[i], xv[i], use_prompts);
        correct += (argmax(logits) == labels[i]) ? 1 : 0;
    }
    return labels.empty() ? 0.0 : static_cast<double>(correct) / labels.size();
}

/// Full supervised source training: every weight trainable, no prompts, plain
/// cross-entropy on the complete pair. Afterwards the weights freeze, prompts
/// are initialized, and the stats bank is computed from held-out unlabeled
/// source samples.
inline PretrainResult pretrain_source(const EncoderConfig& cfg_a, const EncoderConfig& cfg_v,
                                      const JointConfig& cfg_joint, int classes,
                                      const TaskSpec& task, const PretrainConfig& cfg,
                                      Rng& rng) {
    task.validate();
    PretrainResult res;
    res.model = init_bundle(cfg_a, cfg_v, cfg_joint, classes, rng);

    Dataset train = gen_labeled(task, cfg.train_samples, rng);
    Dataset test = gen_labeled(task, cfg.test_samples, rng);
    Dataset bank_data = gen_labeled(task, cfg.bank_samples, rng);

    AdamHyper hyper;
    hyper.lr = cfg.lr;
    std::map<std::string, AdamParamState> adam;

    std::vector<int> order(static_cast<std::size_t>(cfg.train_samples));
    for (int i = 0; i < cfg.train_samples; ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (int begin = 0; begin < cfg.train_samples; begin += cfg.batch_size) {
            int end = std::min(begin + cfg.batch_size, cfg.train_samples);
            Tape tape;
            TapeModel tm(tape, res.model, TrainMode::all, /*use_prompts=*/false);
            NodeId loss = -1;
            for (int i = begin; i < end; ++i) {
                int s = order[static_cast<std::size_t>(i)];
                EncodeResult ea = tm.encode(train.a[static_cast<std::size_t>(s)], Modality::a);
                EncodeResult ev = tm.encode(train.v[static_cast<std::size_t>(s)], Modality::v);
                JointResult jr = tm.joint_forward({ea.final_tokens, ev.final_tokens});
                Tensor onehot = Tensor::zeros({classes});
                onehot.values[static_cast<std::size_t>(
                    train.labels[static_cast<std::size_t>(s)])] = 1.0;
                NodeId probs = tape.softmax(jr.logits);
                NodeId ce = tape.scale(
                    tape.sum_all(tape.mul(tape.constant(onehot),
                                          tape.log(tape.clamp_min(probs, 1e-12)))),
                    -1.0);
                loss = (loss < 0) ? ce : tape.add(loss, ce);
            }
            loss = tape.scale(loss, 1.0 / (end - begin));
            res.final_loss = tape.value(loss).values[0];
            if (!std::isfinite(res.final_loss))
                throw NumericalError("pretraining diverged (non-finite loss) at epoch " +
                                     std::to_string(epoch));
            GradientMap grads = tape.backward(loss);
            for (auto& entry : named_tensors(res.model)) {
                NodeId id = tm.node_for(*entry.second);
                if (id < 0) continue;
                const Tensor* g = grads.find(id);
                if (!g) continue;
                adam_update(*entry.second, *g, adam[entry.first], hyper);
            }
        }
    }

    res.train_accuracy = evaluate_accuracy(res.model, train.a, train.v, train.labels, false);
    res.test_accuracy = evaluate_accuracy(res.model, test.a, test.v, test.labels, false);

    init_prompts(res.model, rng);
    res.bank = precompute_source_bank(res.model, bank_data.a, bank_data.v);
    res.bank_data = std::move(bank_data);
    return res;
}

}  // namespace brimpr

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "brimpr/losses.hpp"
#include "brimpr/model.hpp"
#include "brimpr/rng.hpp"
#include "brimpr/stats.hpp"

namespace brimpr {

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamParamState {
    Tensor m, v;
    long t = 0;
};

/// Standard bias-corrected Adam step on one parameter tensor. A non-finite
/// gradient skips the update (state untouched) and reports false.
inline bool adam_update(Tensor& param, const Tensor& grad, AdamParamState& state,
                        const AdamHyper& hyper) {
    if (param.shape != grad.shape)
        throw std::invalid_argument("adam_update: shape mismatch " + param.shape_str() + " vs " +
                                    grad.shape_str());
    for (double g : grad.values)
        if (!std::isfinite(g)) return false;
    if (state.t == 0) {
        state.m = Tensor::zeros(param.shape);
        state.v = Tensor::zeros(param.shape);
    }
    state.t += 1;
    double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < param.numel(); ++i) {
        double g = grad.values[i];
        state.m.values[i] = hyper.beta1 * state.m.values[i] + (1.0 - hyper.beta1) * g;
        state.v.values[i] = hyper.beta2 * state.v.values[i] + (1.0 - hyper.beta2) * g * g;
        double mhat = state.m.values[i] / bc1;
        double vhat = state.v.values[i] / bc2;
        param.values[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
    return true;
}

// ---------------------------------------------------------------------------
// Continual drift detector

/// Sliding-window Z-score detector over per-step Disc values. Decisions are
/// made only once the window is full; the new value enters the window after
/// the decision.
class ShiftDetector {
public:
    ShiftDetector(int window, double threshold, double eps = 1e-12)
        : window_(window), threshold_(threshold), eps_(eps) {
        if (window < 2) throw std::invalid_argument("detector window must be >= 2");
    }

    bool observe(double value) {
        bool fired = false;
        if (static_cast<int>(buf_.size()) == window_) {
            double mean = 0.0;
            for (double v : buf_) mean += v;
            mean /= window_;
            double ss = 0.0;
            for (double v : buf_) ss += (v - mean) * (v - mean);
            double sd = std::sqrt(ss / (window_ - 1));
            fired = (value - mean) / std::max(sd, eps_) > threshold_;
            buf_.pop_front();
        }
        buf_.push_back(value);
        return fired;
    }

    bool warmed_up() const { return static_cast<int>(buf_.size()) == window_; }

private:
    int window_;
    double threshold_;
    double eps_;
    std::deque<double> buf_;
};

// ---------------------------------------------------------------------------
// The adaptation loop

struct AdaptConfig {
    double mask_ratio = 0.5;
    double tau0 = 0.2;
    double d0 = 5.0;
    double tau = 0.07;
    AdamHyper adam;
    bool swap_lambda = false;
    bool adapt_enabled = true;
    bool continual = false;
    int detector_window = 10;
    double detector_k = 5.0;
    long max_adapt_batches = -1;  // < 0: no limit
    std::uint64_t seed = 42;
};

struct StepRecord {
    int batch_index = 0;
    int batch_size = 0;
    bool adapted = false;
    double acc_batch = 0.0;
    bool has_acc = false;
    LossBreakdown losses;
    DiscReport report;
    bool shift_a = false;
    bool shift_v = false;
};

/// Optimizer state plus everything the continual variant tracks between steps.
struct AdaptationState {
    std::map<std::string, AdamParamState> adam;
    ShiftDetector detector_a;
    ShiftDetector detector_v;

    explicit AdaptationState(const AdaptConfig& cfg)
        : detector_a(cfg.detector_window, cfg.detector_k),
          detector_v(cfg.detector_window, cfg.detector_k) {}
};

inline std::string prompt_param_name(Modality u, int layer) {
    return std::string("prompts/") + modality_name(u) + "/layer" + std::to_string(layer);
}

/// Zeroes the optimizer moments (and restarts the step counter) for one
/// modality's prompts, used after a detected shift re-initializes them.
inline void reset_prompt_optimizer(AdaptationState& state, const ModelBundle& model,
                                   Modality u) {
    for (std::size_t i = 0; i < model.prompts.of(u).size(); ++i)
        state.adam.erase(prompt_param_name(u, static_cast<int>(i)));
}

struct StepOutput {
    std::vector<int> predictions;
    StepRecord record;
};

/// One pass of the online loop: mask both modalities, run the recombined and
/// unimodal forwards, compute the three losses, log predictions from the
/// complete pair, then update the prompts once. Batches below two samples
/// degrade to inference only.
inline StepOutput adapt_step(ModelBundle& model, const SourceStatsBank& bank,
                             const std::vector<Tensor>& xa, const std::vector<Tensor>& xv,
                             const AdaptConfig& cfg, AdaptationState& state, Rng& rng) {
    if (xa.size() != xv.size())
        throw std::invalid_argument("adapt_step: modality batch sizes differ");
    StepOutput out;
    out.record.batch_size = static_cast<int>(xa.size());
    int b = static_cast<int>(xa.size());

    bool can_adapt = cfg.adapt_enabled && b >= 2;
    if (!can_adapt) {
        for (int s = 0; s < b; ++s)
            out.predictions.push_back(argmax(predict_logits(
                model, xa[static_cast<std::size_t>(s)], xv[static_cast<std::size_t>(s)])));
        out.record.adapted = false;
        return out;
    }

    MaskPlan plan = make_mask_plan(b, model.cfg_a.tokens, model.cfg_v.tokens, cfg.mask_ratio,
                                   rng);
    Tape tape;
    TapeModel tm(tape, model, TrainMode::prompts);
    BatchForward bf = run_batch_forward(tm, xa, xv, plan);

    // Predictions are logged from the complete pair before the update.
    for (NodeId id : bf.logits_av) out.predictions.push_back(argmax(tape.value(id)));

    PmgfaLoss pmgfa = pmgfa_loss(tape, bank, bf.pooled_a, bf.pooled_v);
    double disc_j = joint_disc_value(tape, bf, bank);
    DiscReport report = compute_disc_report(pmgfa.disc_a, pmgfa.disc_v, disc_j, cfg.tau0,
                                            cfg.d0);
    if (cfg.swap_lambda) std::swap(report.lambda_a, report.lambda_v);

    NodeId cmer = -1;
    for (int s = 0; s < b; ++s) {
        Tensor pseudo = calibrated_pseudo_label(
            tape.value(bf.logits_av[static_cast<std::size_t>(s)]), report.ada_tp);
        NodeId term = cmer_sample_loss(tape, bf.y_amv[static_cast<std::size_t>(s)],
                                       bf.y_avm[static_cast<std::size_t>(s)], pseudo, report);
        cmer = (cmer < 0) ? term : tape.add(cmer, term);
    }
    cmer = tape.scale(cmer, 1.0 / b);
    NodeId iicl = iicl_loss(tape, bf.z_a, bf.z_v, cfg.tau);
    NodeId total = tape.add(tape.add(pmgfa.node, cmer), iicl);

    out.record.losses = make_breakdown(pmgfa.value, tape.value(cmer).values[0],
                                       tape.value(iicl).values[0]);
    out.record.report = report;

    GradientMap grads = tape.backward(total);
    bool all_applied = true;
    auto update_modality = [&](Modality u, std::vector<Tensor>& prompts) {
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            NodeId id = tm.prompt_node(u, static_cast<int>(i));
            const Tensor* g = grads.find(id);
            if (!g) continue;
            AdamParamState& ps = state.adam[prompt_param_name(u, static_cast<int>(i))];
            all_applied = adam_update(prompts[i], *g, ps, cfg.adam) && all_applied;
        }
    };
    update_modality(Modality::a, model.prompts.a);
    update_modality(Modality::v, model.prompts.v);
    out.record.adapted = all_applied;
    return out;
}

struct RunSummary {
    double accuracy = 0.0;
    bool has_accuracy = false;
    long total_samples = 0;
    double mean_disc_first = 0.0;  // mean of Disc_a + Disc_v, first 20% of batches
    double mean_disc_last = 0.0;   // same, last 20%
    int shifts_a = 0;
    int shifts_v = 0;
};

struct RunResult {
    std::vector<StepRecord> records;
    std::vector<std::vector<int>> predictions;
    RunSummary summary;
};

inline RunSummary summarize(const std::vector<StepRecord>& records) {
    RunSummary s;
    long correct_weighted = 0;
    bool any_acc = false;
    for (const StepRecord& r : records) {
        s.total_samples += r.batch_size;
        if (r.has_acc) {
            any_acc = true;
            correct_weighted += static_cast<long>(std::llround(r.acc_batch * r.batch_size));
        }
        s.shifts_a += r.shift_a ? 1 : 0;
        s.shifts_v += r.shift_v ? 1 : 0;
    }
    if (any_acc && s.total_samples > 0) {
        s.has_accuracy = true;
        s.accuracy = static_cast<double>(correct_weighted) / static_cast<double>(s.total_samples);
    }
    int t = static_cast<int>(records.size());
    if (t > 0) {
        int n20 = std::max(1, t / 5);
        double first = 0.0, last = 0.0;
        for (int i = 0; i < n20; ++i)
            first += records[static_cast<std::size_t>(i)].report.disc_a +
                     records[static_cast<std::size_t>(i)].report.disc_v;
        for (int i = t - n20; i < t; ++i)
            last += records[static_cast<std::size_t>(i)].report.disc_a +
                    records[static_cast<std::size_t>(i)].report.disc_v;
        s.mean_disc_first = first / n20;
        s.mean_disc_last = last / n20;
    }
    return s;
}

/// A stream batch carries only the two modality tensors; labels live in a
/// side channel owned by the evaluator.
struct StreamBatch {
    std::vector<Tensor> a;
    std::vector<Tensor> v;
};

/// Sequential online adaptation over a stream. Predictions for batch t use
/// prompts updated through batch t-1; labels (when given) are consumed only
/// to fill the accuracy bookkeeping after each step's predictions are fixed.
inline RunResult run_stream(ModelBundle& model, const SourceStatsBank& bank,
                            const std::vector<StreamBatch>& stream, const AdaptConfig& cfg,
                            const std::vector<std::vector<int>>* labels_for_eval = nullptr) {
    if (labels_for_eval && labels_for_eval->size() != stream.size())
        throw std::invalid_argument("run_stream: label batches do not match the stream");
    RunResult result;
    AdaptationState state(cfg);
    Rng rng(cfg.seed);
    for (std::size_t t = 0; t < stream.size(); ++t) {
        AdaptConfig step_cfg = cfg;
        if (cfg.max_adapt_batches >= 0 && static_cast<long>(t) >= cfg.max_adapt_batches)
            step_cfg.adapt_enabled = false;
        StepOutput step = adapt_step(model, bank, stream[t].a, stream[t].v, step_cfg, state,
                                     rng);
        step.record.batch_index = static_cast<int>(t);
        if (labels_for_eval) {
            const std::vector<int>& truth = (*labels_for_eval)[t];
            if (truth.size() == step.predictions.size() && !truth.empty()) {
                int correct = 0;
                for (std::size_t i = 0; i < truth.size(); ++i)
                    correct += (step.predictions[i] == truth[i]) ? 1 : 0;
                step.record.acc_batch =
                    static_cast<double>(correct) / static_cast<double>(truth.size());
                step.record.has_acc = true;
            }
        }
        if (cfg.continual && step.record.adapted) {
            bool fire_a = state.detector_a.observe(step.record.report.disc_a);
            bool fire_v = state.detector_v.observe(step.record.report.disc_v);
            step.record.shift_a = fire_a;
            step.record.shift_v = fire_v;
            if (fire_a) {
                reset_prompts(model, Modality::a, rng);
                reset_prompt_optimizer(state, model, Modality::a);
            }
            if (fire_v) {
                reset_prompts(model, Modality::v, rng);
                reset_prompt_optimizer(state, model, Modality::v);
            }
        }
        result.predictions.push_back(std::move(step.predictions));
        result.records.push_back(std::move(step.record));
    }
    result.summary = summarize(result.records);
    return result;
}

// ---------------------------------------------------------------------------
// Metrics CSV

inline std::string format_float9(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline constexpr const char* kMetricsHeader =
    "batch_idx,acc_batch,acc_cum,loss_total,loss_pmgfa,loss_cmer,loss_iicl,"
    "disc_a,disc_v,disc_j,lambda_a,ada_tp,shift_a,shift_v";

inline std::string metrics_csv(const std::vector<StepRecord>& records) {
    std::string out(kMetricsHeader);
    out.push_back('\n');
    long samples = 0;
    long correct = 0;
    for (const StepRecord& r : records) {
        samples += r.batch_size;
        if (r.has_acc) correct += static_cast<long>(std::llround(r.acc_batch * r.batch_size));
        double acc_cum = samples > 0 ? static_cast<double>(correct) / samples : 0.0;
        out += std::to_string(r.batch_index);
        out.push_back(',');
        out += format_float9(r.acc_batch);
        out.push_back(',');
        out += format_float9(acc_cum);
        out.push_back(',');
        out += format_float9(r.losses.total);
        out.push_back(',');
        out += format_float9(r.losses.pmgfa);
        out.push_back(',');
        out += format_float9(r.losses.cmer);
        out.push_back(',');
        out += format_float9(r.losses.iicl);
        out.push_back(',');
        out += format_float9(r.report.disc_a);
        out.push_back(',');
        out += format_float9(r.report.disc_v);
        out.push_back(',');
        out += format_float9(r.report.disc_j);
        out.push_back(',');
        out += format_float9(r.report.lambda_a);
        out.push_back(',');
        out += format_float9(r.report.ada_tp);
        out.push_back(',');
        out += r.shift_a ? '1' : '0';
        out.push_back(',');
        out += r.shift_v ? '1' : '0';
        out.push_back('\n');
    }
    return out;
}

inline void write_metrics_csv(const std::string& path, const std::vector<StepRecord>& records) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open metrics file '" + path + "'");
    std::string csv = metrics_csv(records);
    f.write(csv.data(), static_cast<std::streamsize>(csv.size()));
    if (!f) throw std::runtime_error("write failed for metrics file '" + path + "'");
}

}  // namespace brimpr

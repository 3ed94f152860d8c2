#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "brimpr/model.hpp"
#include "brimpr/stats.hpp"
#include "brimpr/tape.hpp"

namespace brimpr {

inline constexpr double kLogGuard = 1e-12;

/// Per-batch discrepancy scalars and the coefficients derived from them.
/// All fields are detached constants with respect to the gradient tape.
struct DiscReport {
    double disc_a = 0.0;
    double disc_v = 0.0;
    double disc_j = 0.0;
    double lambda_a = 0.5;
    double lambda_v = 0.5;
    double ada_tp = 1.0;
};

/// lambda_u = 1 - Disc_u / (Disc_a + Disc_v), with the 0/0 stream falling back
/// to an even split; AdaTp = 1 + tau0 / (1 + exp(D0 - Disc_J)), kept strictly
/// inside (1, 1 + tau0) even when the sigmoid saturates in floating point.
inline DiscReport compute_disc_report(double disc_a, double disc_v, double disc_j, double tau0,
                                      double d0) {
    if (disc_a < 0.0 || disc_v < 0.0 || disc_j < 0.0)
        throw std::invalid_argument("compute_disc_report: Disc values must be >= 0");
    if (tau0 <= 0.0) throw std::invalid_argument("compute_disc_report: tau0 must be > 0");
    DiscReport r;
    r.disc_a = disc_a;
    r.disc_v = disc_v;
    r.disc_j = disc_j;
    double sum = disc_a + disc_v;
    if (sum > 0.0) {
        r.lambda_a = disc_v / sum;
        r.lambda_v = 1.0 - r.lambda_a;
    }
    double ada = 1.0 + tau0 / (1.0 + std::exp(d0 - disc_j));
    double lo = std::nextafter(1.0, 2.0);
    double hi = std::nextafter(1.0 + tau0, 1.0);
    r.ada_tp = std::min(std::max(ada, lo), hi);
    return r;
}

/// Temperature-scaled softmax of the complete-pair logits. The result is a
/// plain tensor, detached from any tape: it is a training target.
inline Tensor calibrated_pseudo_label(const Tensor& logits, double ada_tp) {
    if (!logits.is_vector())
        throw std::invalid_argument("calibrated_pseudo_label: expected a logit vector, got " +
                                    logits.shape_str());
    if (ada_tp < 1.0)
        throw std::invalid_argument("calibrated_pseudo_label: temperature must be >= 1");
    Tensor out = logits;
    double m = out.values[0];
    for (double v : out.values) m = std::max(m, v);
    double s = 0.0;
    for (double& v : out.values) {
        v = std::exp((v - m) / ada_tp);
        s += v;
    }
    for (double& v : out.values) v /= s;
    return out;
}

// ---------------------------------------------------------------------------
// Tape-level losses

struct TapeDisc {
    NodeId node = -1;
    double value = 0.0;
};

/// Differentiable Disc of one modality (or the joint module): pooled feature
/// nodes per layer per sample against the precomputed source slice.
inline TapeDisc tape_disc(Tape& tape, const std::vector<LayerGaussianStats>& bank_slice,
                          const std::vector<std::vector<NodeId>>& pooled) {
    if (pooled.size() != bank_slice.size())
        throw std::invalid_argument("tape_disc: layer count mismatch, " +
                                    std::to_string(pooled.size()) + " vs " +
                                    std::to_string(bank_slice.size()));
    if (pooled.empty()) throw std::invalid_argument("tape_disc: no layers");
    int batch = static_cast<int>(pooled[0].size());
    if (batch < 2) throw std::invalid_argument("tape_disc: need batch size >= 2");

    NodeId total = -1;
    for (std::size_t i = 0; i < pooled.size(); ++i) {
        int d = static_cast<int>(tape.value(pooled[i][0]).numel());
        std::vector<NodeId> rows;
        for (NodeId z : pooled[i]) rows.push_back(tape.reshape(z, {1, d}));
        NodeId stacked = tape.concat_rows(rows);
        NodeId mean = tape.mean_rows(stacked);
        NodeId dev = tape.sub_rowvec(stacked, mean);
        NodeId var = tape.scale(tape.mean_rows(tape.mul(dev, dev)),
                                static_cast<double>(batch) / (batch - 1));
        NodeId sd = tape.sqrt(var);
        NodeId mean_term = tape.norm(tape.sub(mean, tape.constant(bank_slice[i].mean)));
        NodeId sd_term = tape.norm(tape.sub(sd, tape.constant(bank_slice[i].std)));
        NodeId term = tape.add(mean_term, sd_term);
        total = (total < 0) ? term : tape.add(total, term);
    }
    NodeId node = tape.scale(total, 1.0 / static_cast<double>(pooled.size()));
    return {node, tape.value(node).values[0]};
}

struct PmgfaLoss {
    NodeId node = -1;
    double value = 0.0;
    double disc_a = 0.0;
    double disc_v = 0.0;
};

/// L_PMGFA = Disc_a + Disc_v over the current batch, differentiable through
/// the target statistics.
inline PmgfaLoss pmgfa_loss(Tape& tape, const SourceStatsBank& bank,
                            const std::vector<std::vector<NodeId>>& pooled_a,
                            const std::vector<std::vector<NodeId>>& pooled_v) {
    TapeDisc da = tape_disc(tape, bank.a, pooled_a);
    TapeDisc dv = tape_disc(tape, bank.v, pooled_v);
    NodeId node = tape.add(da.node, dv.node);
    return {node, tape.value(node).values[0], da.value, dv.value};
}

/// Per-sample CMER term:
///   -lambda_a sum_k pseudo_k log y_amv_k - lambda_v sum_k pseudo_k log y_avm_k
/// with the log guarded at 1e-12. The pseudo-label is a detached constant.
inline NodeId cmer_sample_loss(Tape& tape, NodeId y_amv, NodeId y_avm, const Tensor& pseudo,
                               const DiscReport& report) {
    double sum = 0.0;
    for (double v : pseudo.values) sum += v;
    if (std::abs(sum - 1.0) > 1e-6)
        throw std::invalid_argument("cmer_sample_loss: pseudo-label is not normalized (sum " +
                                    std::to_string(sum) + ")");
    NodeId target = tape.constant(pseudo);
    NodeId ce_amv = tape.scale(
        tape.sum_all(tape.mul(target, tape.log(tape.clamp_min(y_amv, kLogGuard)))), -1.0);
    NodeId ce_avm = tape.scale(
        tape.sum_all(tape.mul(target, tape.log(tape.clamp_min(y_avm, kLogGuard)))), -1.0);
    return tape.add(tape.scale(ce_amv, report.lambda_a), tape.scale(ce_avm, report.lambda_v));
}

/// Inter-modal instance-wise InfoNCE over the unimodal fused features.
/// Positives are the two modalities of the same instance; both ordered
/// modality pairs contribute, normalized by 2B.
inline NodeId iicl_loss(Tape& tape, const std::vector<NodeId>& za,
                        const std::vector<NodeId>& zv, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("iicl_loss: tau must be > 0");
    if (za.empty() || za.size() != zv.size())
        throw std::invalid_argument("iicl_loss: need equal, non-empty feature lists");
    int b = static_cast<int>(za.size());
    // exp(sim(za_j, zv_k) / tau); cosine symmetry covers the reverse direction.
    std::vector<std::vector<NodeId>> e(static_cast<std::size_t>(b),
                                       std::vector<NodeId>(static_cast<std::size_t>(b)));
    for (int j = 0; j < b; ++j)
        for (int k = 0; k < b; ++k)
            e[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] = tape.exp(tape.scale(
                tape.cosine_similarity(za[static_cast<std::size_t>(j)],
                                       zv[static_cast<std::size_t>(k)]),
                1.0 / tau));
    NodeId acc = -1;
    for (int j = 0; j < b; ++j) {
        NodeId row_sum = e[static_cast<std::size_t>(j)][0];
        NodeId col_sum = e[0][static_cast<std::size_t>(j)];
        for (int k = 1; k < b; ++k) {
            row_sum = tape.add(row_sum, e[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)]);
            col_sum = tape.add(col_sum, e[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)]);
        }
        NodeId diag = e[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)];
        NodeId term = tape.add(tape.log(tape.divide(diag, row_sum)),
                               tape.log(tape.divide(diag, col_sum)));
        acc = (acc < 0) ? term : tape.add(acc, term);
    }
    return tape.scale(acc, -1.0 / (2.0 * b));
}

struct LossBreakdown {
    double pmgfa = 0.0;
    double cmer = 0.0;
    double iicl = 0.0;
    double total = 0.0;
};

/// Unweighted sum of the three terms.
inline LossBreakdown make_breakdown(double pmgfa, double cmer, double iicl) {
    return {pmgfa, cmer, iicl, pmgfa + cmer + iicl};
}

// ---------------------------------------------------------------------------
// Batch forward for one adaptation step

/// Pre-drawn kept-token indices for every sample in a batch, so the same
/// augmentation can be replayed deterministically.
struct MaskPlan {
    std::vector<std::vector<int>> kept_a;
    std::vector<std::vector<int>> kept_v;
};

inline MaskPlan make_mask_plan(int batch, int tokens_a, int tokens_v, double ratio, Rng& rng) {
    MaskPlan plan;
    for (int s = 0; s < batch; ++s) {
        plan.kept_a.push_back(mask_indices(tokens_a, ratio, rng));
        plan.kept_v.push_back(mask_indices(tokens_v, ratio, rng));
    }
    return plan;
}

/// All forward passes one adaptation step needs, on a single tape:
/// complete encoders (shared by every consumer), masked encoders, the three
/// recombined joint passes, and the two unimodal joint passes.
struct BatchForward {
    std::vector<std::vector<NodeId>> pooled_a;  // [encoder layer][sample]
    std::vector<std::vector<NodeId>> pooled_v;
    std::vector<std::vector<NodeId>> joint_pooled_av;  // [joint layer][sample]
    std::vector<NodeId> logits_av;  // complete-pair logits per sample
    std::vector<NodeId> y_amv;      // softmax probs, masked-a + complete-v
    std::vector<NodeId> y_avm;      // softmax probs, complete-a + masked-v
    std::vector<NodeId> z_a;        // unimodal fused pooled features
    std::vector<NodeId> z_v;
};

inline BatchForward run_batch_forward(TapeModel& tm, const std::vector<Tensor>& xa,
                                      const std::vector<Tensor>& xv, const MaskPlan& plan) {
    if (xa.size() != xv.size() || xa.empty())
        throw std::invalid_argument("run_batch_forward: modality batches must match");
    if (plan.kept_a.size() != xa.size() || plan.kept_v.size() != xv.size())
        throw std::invalid_argument("run_batch_forward: mask plan size mismatch");
    Tape& tape = tm.tape();
    const ModelBundle& model = tm.model();
    int b = static_cast<int>(xa.size());
    BatchForward bf;
    bf.pooled_a.resize(static_cast<std::size_t>(model.cfg_a.layers));
    bf.pooled_v.resize(static_cast<std::size_t>(model.cfg_v.layers));
    bf.joint_pooled_av.resize(static_cast<std::size_t>(model.cfg_joint.layers));
    for (int s = 0; s < b; ++s) {
        auto ss = static_cast<std::size_t>(s);
        EncodeResult ea = tm.encode(xa[ss], Modality::a);
        EncodeResult ev = tm.encode(xv[ss], Modality::v);
        EncodeResult ea_m = tm.encode(take_token_rows(xa[ss], plan.kept_a[ss]), Modality::a);
        EncodeResult ev_m = tm.encode(take_token_rows(xv[ss], plan.kept_v[ss]), Modality::v);

        for (int i = 0; i < model.cfg_a.layers; ++i)
            bf.pooled_a[static_cast<std::size_t>(i)].push_back(
                ea.layer_pooled[static_cast<std::size_t>(i)]);
        for (int i = 0; i < model.cfg_v.layers; ++i)
            bf.pooled_v[static_cast<std::size_t>(i)].push_back(
                ev.layer_pooled[static_cast<std::size_t>(i)]);

        JointResult complete = tm.joint_forward({ea.final_tokens, ev.final_tokens});
        JointResult amv = tm.joint_forward({ea_m.final_tokens, ev.final_tokens});
        JointResult avm = tm.joint_forward({ea.final_tokens, ev_m.final_tokens});
        JointResult uni_a = tm.joint_forward({ea.final_tokens});
        JointResult uni_v = tm.joint_forward({ev.final_tokens});

        for (int i = 0; i < model.cfg_joint.layers; ++i)
            bf.joint_pooled_av[static_cast<std::size_t>(i)].push_back(
                complete.layer_pooled[static_cast<std::size_t>(i)]);
        bf.logits_av.push_back(complete.logits);
        bf.y_amv.push_back(tape.softmax(amv.logits));
        bf.y_avm.push_back(tape.softmax(avm.logits));
        bf.z_a.push_back(uni_a.final_pooled);
        bf.z_v.push_back(uni_v.final_pooled);
    }
    return bf;
}

/// Detached joint-module discrepancy for the AdaTp coefficient: batch stats of
/// the complete-pair joint pooled features against the bank, plain values.
inline double joint_disc_value(const Tape& tape, const BatchForward& bf,
                               const SourceStatsBank& bank) {
    std::vector<LayerGaussianStats> target;
    for (const auto& layer_nodes : bf.joint_pooled_av) {
        int b = static_cast<int>(layer_nodes.size());
        int d = static_cast<int>(tape.value(layer_nodes[0]).numel());
        Tensor stacked = Tensor::zeros({b, d});
        for (int s = 0; s < b; ++s) {
            const Tensor& z = tape.value(layer_nodes[static_cast<std::size_t>(s)]);
            for (int j = 0; j < d; ++j) stacked.at(s, j) = z.values[static_cast<std::size_t>(j)];
        }
        target.push_back(batch_stats(stacked));
    }
    return disc(bank.joint, target);
}

}  // namespace brimpr

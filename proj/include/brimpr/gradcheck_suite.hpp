#pragma once

#include <cstdint>
#include <vector>

#include "brimpr/gradcheck.hpp"
#include "brimpr/losses.hpp"
#include "brimpr/model.hpp"
#include "brimpr/rng.hpp"

namespace brimpr {

struct LossGradcheckReport {
    double pmgfa = 0.0;
    double cmer = 0.0;
    double iicl = 0.0;
    double total = 0.0;
    double threshold = 1e-4;

    bool pass() const {
        return pmgfa < threshold && cmer < threshold && iicl < threshold && total < threshold;
    }
};

namespace detail {

enum class WhichLoss { pmgfa, cmer, iicl, total };

struct GradcheckFixture {
    ModelBundle model;
    std::vector<Tensor> xa, xv;
    MaskPlan plan;
    SourceStatsBank bank;
    std::vector<Tensor> pseudo;  // detached targets, fixed across evaluations
    DiscReport report;
    double tau = 0.25;
};

inline GradcheckFixture make_gradcheck_fixture(std::uint64_t seed) {
    GradcheckFixture fx;
    Rng rng(seed);
    EncoderConfig ec;
    ec.layers = 2;
    ec.dim = 8;
    ec.heads = 2;
    ec.tokens = 4;
    ec.prompt_tokens = 2;
    ec.input_dim = 6;
    ec.mlp_hidden = 16;
    JointConfig jc;
    jc.layers = 2;
    jc.dim = 8;
    jc.heads = 2;
    jc.mlp_hidden = 16;
    fx.model = init_bundle(ec, ec, jc, 3, rng);
    init_prompts(fx.model, rng);

    auto tokens = [&rng](int m, int d) {
        Tensor t = Tensor::zeros({m, d});
        for (double& v : t.values) v = rng.normal();
        return t;
    };
    std::vector<Tensor> src_a, src_v;
    for (int i = 0; i < 8; ++i) {
        src_a.push_back(tokens(4, 6));
        src_v.push_back(tokens(4, 6));
    }
    fx.bank = precompute_source_bank(fx.model, src_a, src_v);

    const int batch = 3;
    for (int i = 0; i < batch; ++i) {
        fx.xa.push_back(tokens(4, 6));
        fx.xv.push_back(tokens(4, 6));
    }
    fx.plan = make_mask_plan(batch, 4, 4, 0.5, rng);

    // Detached quantities from the initial prompts: pseudo-labels, lambda
    // weights and the adaptive temperature stay constant while the check
    // wiggles the prompt entries.
    Tape tape;
    TapeModel tm(tape, fx.model, TrainMode::none);
    BatchForward bf = run_batch_forward(tm, fx.xa, fx.xv, fx.plan);
    PmgfaLoss pl = pmgfa_loss(tape, fx.bank, bf.pooled_a, bf.pooled_v);
    double dj = joint_disc_value(tape, bf, fx.bank);
    fx.report = compute_disc_report(pl.disc_a, pl.disc_v, dj, 0.2, 5.0);
    for (NodeId id : bf.logits_av)
        fx.pseudo.push_back(calibrated_pseudo_label(tape.value(id), fx.report.ada_tp));
    return fx;
}

inline std::vector<Tensor> fixture_params(const GradcheckFixture& fx) {
    std::vector<Tensor> params;
    for (const Tensor& p : fx.model.prompts.a) params.push_back(p);
    for (const Tensor& p : fx.model.prompts.v) params.push_back(p);
    return params;
}

inline NodeId build_loss(Tape& tape, TapeModel& tm, const GradcheckFixture& fx,
                         WhichLoss which) {
    BatchForward bf = run_batch_forward(tm, fx.xa, fx.xv, fx.plan);
    int b = static_cast<int>(fx.xa.size());
    NodeId pmgfa = -1, cmer = -1, iicl = -1;
    if (which == WhichLoss::pmgfa || which == WhichLoss::total)
        pmgfa = pmgfa_loss(tape, fx.bank, bf.pooled_a, bf.pooled_v).node;
    if (which == WhichLoss::cmer || which == WhichLoss::total) {
        NodeId acc = -1;
        for (int s = 0; s < b; ++s) {
            NodeId term = cmer_sample_loss(tape, bf.y_amv[static_cast<std::size_t>(s)],
                                           bf.y_avm[static_cast<std::size_t>(s)],
                                           fx.pseudo[static_cast<std::size_t>(s)], fx.report);
            acc = (acc < 0) ? term : tape.add(acc, term);
        }
        cmer = tape.scale(acc, 1.0 / b);
    }
    if (which == WhichLoss::iicl || which == WhichLoss::total)
        iicl = iicl_loss(tape, bf.z_a, bf.z_v, fx.tau);
    switch (which) {
        case WhichLoss::pmgfa: return pmgfa;
        case WhichLoss::cmer: return cmer;
        case WhichLoss::iicl: return iicl;
        case WhichLoss::total: return tape.add(tape.add(pmgfa, cmer), iicl);
    }
    throw std::logic_error("build_loss: bad loss selector");
}

inline double check_one_loss(const GradcheckFixture& fx, WhichLoss which, double step,
                             bool corrupt_gradient) {
    auto with_prompts = [&fx](const std::vector<Tensor>& params) {
        ModelBundle m = fx.model;
        std::size_t idx = 0;
        for (Tensor& p : m.prompts.a) p = params.at(idx++);
        for (Tensor& p : m.prompts.v) p = params.at(idx++);
        return m;
    };
    GradCheckProblem problem;
    problem.value = [&, which](const std::vector<Tensor>& params) {
        ModelBundle m = with_prompts(params);
        Tape tape;
        TapeModel tm(tape, m, TrainMode::prompts);
        return tape.value(build_loss(tape, tm, fx, which)).values[0];
    };
    problem.gradient = [&, which, corrupt_gradient](const std::vector<Tensor>& params) {
        ModelBundle m = with_prompts(params);
        Tape tape;
        TapeModel tm(tape, m, TrainMode::prompts);
        NodeId loss = build_loss(tape, tm, fx, which);
        std::vector<NodeId> ids = tm.prompt_nodes();
        GradientMap gm = tape.backward(loss);
        std::vector<Tensor> grads;
        for (NodeId id : ids) grads.push_back(*gm.find(id));
        if (corrupt_gradient && !grads.empty()) grads[0].values[0] += 1.0;
        return grads;
    };
    return finite_difference_check(problem, fixture_params(fx), step);
}

}  // namespace detail

/// Finite-difference verification of the three adaptation losses and their
/// sum against the analytic prompt gradients, on a fixed-seed tiny model.
/// `corrupt_gradient` deliberately breaks one analytic entry (negative
/// control for the reporting path).
inline LossGradcheckReport run_loss_gradcheck(std::uint64_t seed, double step = 1e-5,
                                              bool corrupt_gradient = false) {
    detail::GradcheckFixture fx = detail::make_gradcheck_fixture(seed);
    LossGradcheckReport report;
    report.pmgfa = detail::check_one_loss(fx, detail::WhichLoss::pmgfa, step, corrupt_gradient);
    report.cmer = detail::check_one_loss(fx, detail::WhichLoss::cmer, step, corrupt_gradient);
    report.iicl = detail::check_one_loss(fx, detail::WhichLoss::iicl, step, corrupt_gradient);
    report.total = detail::check_one_loss(fx, detail::WhichLoss::total, step, corrupt_gradient);
    return report;
}

}  // namespace brimpr

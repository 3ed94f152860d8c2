#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "brimpr/gradcheck.hpp"
#include "brimpr/rng.hpp"
#include "brimpr/tape.hpp"
#include "brimpr/tensor.hpp"

using namespace brimpr;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.values) v = rng.uniform(lo, hi);
    return t;
}

// Builds the op under test on a fresh tape and returns the scalar loss node.
using OpBuilder = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

double fd_error_for(const OpBuilder& build, const std::vector<Tensor>& params) {
    GradCheckProblem problem;
    problem.value = [&](const std::vector<Tensor>& p) {
        Tape tape;
        std::vector<NodeId> ids;
        for (const Tensor& t : p) ids.push_back(tape.leaf(t, true));
        return tape.value(build(tape, ids)).values[0];
    };
    problem.gradient = [&](const std::vector<Tensor>& p) {
        Tape tape;
        std::vector<NodeId> ids;
        for (const Tensor& t : p) ids.push_back(tape.leaf(t, true));
        GradientMap gm = tape.backward(build(tape, ids));
        std::vector<Tensor> grads;
        for (NodeId id : ids) grads.push_back(*gm.find(id));
        return grads;
    };
    return finite_difference_check(problem, params, 1e-5);
}

// Weighted sum reduction so the upstream gradient is non-uniform. The weight
// tensor is fixed up front so repeated evaluations stay deterministic.
NodeId weighted_sum(Tape& tape, NodeId x, const Tensor& w) {
    return tape.sum_all(tape.mul(x, tape.constant(w)));
}

Tensor weights_like(const std::vector<int>& shape, unsigned seed) {
    Rng rng(1000 + seed);
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.values) v = rng.uniform(0.3, 1.7);
    return t;
}

}  // namespace

TEST_CASE("softmax of a symmetric pair splits evenly") {
    Tape tape;
    NodeId x = tape.leaf(Tensor({2}, {0.0, 0.0}));
    const Tensor& y = tape.value(tape.softmax(x));
    REQUIRE(y.values[0] == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(y.values[1] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("softmax rows are non-negative and sum to one") {
    Rng rng(11);
    Tape tape;
    NodeId x = tape.leaf(random_tensor({5, 7}, rng, -30.0, 30.0));
    const Tensor& y = tape.value(tape.softmax(x));
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 7; ++j) {
            REQUIRE(y.at(i, j) >= 0.0);
            s += y.at(i, j);
        }
        REQUIRE(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("layer-norm of a constant vector collapses to zero") {
    Tape tape;
    NodeId x = tape.leaf(Tensor({1, 4}, {3.0, 3.0, 3.0, 3.0}));
    NodeId gamma = tape.leaf(Tensor({4}, {1.0, 1.0, 1.0, 1.0}));
    NodeId beta = tape.leaf(Tensor::zeros({4}));
    const Tensor& y = tape.value(tape.layer_norm(x, gamma, beta));
    for (double v : y.values) REQUIRE(std::abs(v) < 1e-12);
}

TEST_CASE("matmul matches the naive triple-loop oracle") {
    Rng rng(7);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({3, 2}, rng);
    Tape tape;
    const Tensor& c = tape.value(tape.matmul(tape.leaf(a), tape.leaf(b)));
    // Independent oracle: naive triple loop.
    Tensor expect = Tensor::zeros({2, 2});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 3; ++k) expect.at(i, j) += a.at(i, k) * b.at(k, j);
    REQUIRE(max_abs_diff(c, expect) < 1e-12);
}

TEST_CASE("product rule through the tape") {
    Tape tape;
    NodeId x = tape.leaf(Tensor::scalar(3.0), true);
    NodeId y = tape.leaf(Tensor::scalar(4.0), true);
    GradientMap gm = tape.backward(tape.mul(x, y));
    REQUIRE(gm.find(x)->values[0] == Catch::Approx(4.0));
    REQUIRE(gm.find(y)->values[0] == Catch::Approx(3.0));
}

TEST_CASE("softmax cross-entropy gradient at symmetric logits") {
    Tape tape;
    NodeId logits = tape.leaf(Tensor({2}, {0.0, 0.0}), true);
    NodeId probs = tape.softmax(logits);
    NodeId target = tape.constant(Tensor({2}, {1.0, 0.0}));
    NodeId loss = tape.scale(tape.sum_all(tape.mul(target, tape.log(probs))), -1.0);
    GradientMap gm = tape.backward(loss);
    const Tensor& g = *gm.find(logits);
    REQUIRE(g.values[0] == Catch::Approx(-0.5).margin(1e-12));
    REQUIRE(g.values[1] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("every op kind passes a central-difference check") {
    Rng rng(42);
    const double tol = 1e-4;

    SECTION("elementwise add/sub/mul/div") {
        std::vector<Tensor> params = {random_tensor({3, 4}, rng),
                                      random_tensor({3, 4}, rng, 0.5, 1.5)};
        Tensor w = weights_like({3, 4}, 0);
        auto mk = [&w](auto op) {
            return [op, w](Tape& t, const std::vector<NodeId>& p) {
                return weighted_sum(t, op(t, p[0], p[1]), w);
            };
        };
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a, NodeId b) { return t.add(a, b); }),
                             params) < tol);
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a, NodeId b) { return t.sub(a, b); }),
                             params) < tol);
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a, NodeId b) { return t.mul(a, b); }),
                             params) < tol);
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a, NodeId b) { return t.divide(a, b); }),
                             params) < tol);
    }

    SECTION("row broadcast add/sub") {
        std::vector<Tensor> params = {random_tensor({4, 3}, rng), random_tensor({3}, rng)};
        Tensor w = weights_like({4, 3}, 1);
        auto mk = [&w](bool addv) {
            return [addv, w](Tape& t, const std::vector<NodeId>& p) {
                NodeId y = addv ? t.add_rowvec(p[0], p[1]) : t.sub_rowvec(p[0], p[1]);
                return weighted_sum(t, y, w);
            };
        };
        REQUIRE(fd_error_for(mk(true), params) < tol);
        REQUIRE(fd_error_for(mk(false), params) < tol);
    }

    SECTION("unary: scale exp log sqrt gelu clamp_min") {
        std::vector<Tensor> pos = {random_tensor({2, 5}, rng, 0.4, 2.0)};
        std::vector<Tensor> any = {random_tensor({2, 5}, rng, -2.0, 2.0)};
        Tensor w = weights_like({2, 5}, 2);
        auto mk = [&w](auto op) {
            return [op, w](Tape& t, const std::vector<NodeId>& p) {
                return weighted_sum(t, op(t, p[0]), w);
            };
        };
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a) { return t.scale(a, -1.7); }), any) < tol);
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a) { return t.exp(a); }), any) < tol);
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a) { return t.log(a); }), pos) < tol);
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a) { return t.sqrt(a); }), pos) < tol);
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a) { return t.gelu(a); }), any) < tol);
        REQUIRE(fd_error_for(mk([](Tape& t, NodeId a) { return t.clamp_min(a, 0.45); }), pos) <
                tol);
    }

    SECTION("matmul and transpose") {
        std::vector<Tensor> params = {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)};
        Tensor w = weights_like({3, 2}, 3);
        REQUIRE(fd_error_for(
                    [w](Tape& t, const std::vector<NodeId>& p) {
                        return weighted_sum(t, t.matmul(p[0], t.transpose(t.transpose(p[1]))),
                                            w);
                    },
                    params) < tol);
    }

    SECTION("softmax and layer-norm") {
        std::vector<Tensor> params = {random_tensor({3, 6}, rng, -2.0, 2.0),
                                      random_tensor({6}, rng, 0.5, 1.5),
                                      random_tensor({6}, rng)};
        Tensor w = weights_like({3, 6}, 4);
        REQUIRE(fd_error_for(
                    [w](Tape& t, const std::vector<NodeId>& p) {
                        return weighted_sum(t, t.softmax(p[0]), w);
                    },
                    params) < tol);
        REQUIRE(fd_error_for(
                    [w](Tape& t, const std::vector<NodeId>& p) {
                        return weighted_sum(t, t.layer_norm(p[0], p[1], p[2]), w);
                    },
                    params) < tol);
    }

    SECTION("reductions and reshaping") {
        std::vector<Tensor> params = {random_tensor({5, 3}, rng)};
        Tensor wv = weights_like({3}, 5);
        Tensor wr = weights_like({3, 5}, 6);
        REQUIRE(fd_error_for(
                    [wv](Tape& t, const std::vector<NodeId>& p) {
                        return weighted_sum(t, t.mean_rows(p[0]), wv);
                    },
                    params) < tol);
        REQUIRE(fd_error_for(
                    [](Tape& t, const std::vector<NodeId>& p) { return t.sum_all(p[0]); },
                    params) < tol);
        REQUIRE(fd_error_for(
                    [wr](Tape& t, const std::vector<NodeId>& p) {
                        return weighted_sum(t, t.reshape(p[0], {3, 5}), wr);
                    },
                    params) < tol);
    }

    SECTION("concat take_rows slice_cols") {
        std::vector<Tensor> params = {random_tensor({2, 4}, rng), random_tensor({3, 4}, rng)};
        Tensor wcat = weights_like({5, 4}, 7);
        Tensor wtake = weights_like({2, 4}, 8);
        Tensor wslice = weights_like({2, 2}, 9);
        REQUIRE(fd_error_for(
                    [wcat](Tape& t, const std::vector<NodeId>& p) {
                        return weighted_sum(t, t.concat_rows({p[0], p[1]}), wcat);
                    },
                    params) < tol);
        REQUIRE(fd_error_for(
                    [wtake](Tape& t, const std::vector<NodeId>& p) {
                        return weighted_sum(t, t.take_rows(p[1], {2, 0}), wtake);
                    },
                    params) < tol);
        REQUIRE(fd_error_for(
                    [wslice](Tape& t, const std::vector<NodeId>& p) {
                        return weighted_sum(t, t.slice_cols(p[0], 1, 2), wslice);
                    },
                    params) < tol);
        std::vector<Tensor> cc = {random_tensor({3, 2}, rng), random_tensor({3, 3}, rng)};
        Tensor wcc = weights_like({3, 5}, 10);
        REQUIRE(fd_error_for(
                    [wcc](Tape& t, const std::vector<NodeId>& p) {
                        return weighted_sum(t, t.concat_cols({p[0], p[1]}), wcc);
                    },
                    cc) < tol);
    }

    SECTION("norm and cosine similarity") {
        std::vector<Tensor> one = {random_tensor({6}, rng)};
        REQUIRE(fd_error_for([](Tape& t, const std::vector<NodeId>& p) { return t.norm(p[0]); },
                             one) < tol);
        std::vector<Tensor> two = {random_tensor({6}, rng), random_tensor({6}, rng)};
        REQUIRE(fd_error_for(
                    [](Tape& t, const std::vector<NodeId>& p) {
                        return t.cosine_similarity(p[0], p[1]);
                    },
                    two) < tol);
    }
}

TEST_CASE("backprop is linear across summed losses") {
    Rng rng(5);
    Tape tape;
    NodeId w = tape.leaf(random_tensor({4, 4}, rng), true);
    NodeId x1 = tape.constant(random_tensor({4, 4}, rng));
    NodeId x2 = tape.constant(random_tensor({4, 4}, rng));
    NodeId l1 = tape.sum_all(tape.mul(w, x1));
    NodeId l2 = tape.norm(tape.mean_rows(tape.mul(w, x2)));
    NodeId total = tape.add(l1, l2);

    Tensor g1 = *tape.backward(l1).find(w);
    Tensor g2 = *tape.backward(l2).find(w);
    Tensor gt = *tape.backward(total).find(w);
    for (std::size_t i = 0; i < gt.numel(); ++i)
        REQUIRE(std::abs(gt.values[i] - (g1.values[i] + g2.values[i])) < 1e-12);
}

TEST_CASE("parameters unreachable from the loss get zero gradients") {
    Tape tape;
    NodeId used = tape.leaf(Tensor::scalar(2.0), true);
    NodeId unused = tape.leaf(Tensor({3}, {1.0, 2.0, 3.0}), true);
    GradientMap gm = tape.backward(tape.mul(used, used));
    const Tensor& g = *gm.find(unused);
    for (double v : g.values) REQUIRE(v == 0.0);
    REQUIRE(gm.find(used)->values[0] == Catch::Approx(4.0));
}

TEST_CASE("shape mismatches are rejected with the offending shapes") {
    Tape tape;
    NodeId a = tape.leaf(Tensor::zeros({2, 3}));
    NodeId b = tape.leaf(Tensor::zeros({4, 2}));
    REQUIRE_THROWS_WITH(tape.add(a, b),
                        Catch::Matchers::ContainsSubstring("[2,3]") &&
                            Catch::Matchers::ContainsSubstring("[4,2]"));
    REQUIRE_THROWS_AS(tape.matmul(a, tape.leaf(Tensor::zeros({4, 4}))), std::invalid_argument);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tape tape;
    NodeId a = tape.leaf(Tensor::zeros({2, 2}), true);
    REQUIRE_THROWS_AS(tape.backward(a), std::invalid_argument);
}

TEST_CASE("tensor construction rejects bad shapes and non-finite values") {
    REQUIRE_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
    REQUIRE_THROWS_AS(Tensor({0}, {}), std::invalid_argument);
    REQUIRE_THROWS_AS(Tensor({1}, {std::numeric_limits<double>::quiet_NaN()}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(Tensor({1}, {std::numeric_limits<double>::infinity()}),
                      std::invalid_argument);
}

TEST_CASE("finite-difference check on a quadratic is essentially exact") {
    GradCheckProblem problem;
    problem.value = [](const std::vector<Tensor>& p) {
        return p[0].values[0] * p[0].values[0];
    };
    problem.gradient = [](const std::vector<Tensor>& p) {
        return std::vector<Tensor>{Tensor::scalar(2.0 * p[0].values[0])};
    };
    double err = finite_difference_check(problem, {Tensor::scalar(2.0)}, 1e-5);
    REQUIRE(err < 1e-8);
}

TEST_CASE("finite-difference check rejects a non-deterministic function") {
    int calls = 0;
    GradCheckProblem problem;
    problem.value = [&calls](const std::vector<Tensor>&) { return static_cast<double>(calls++); };
    problem.gradient = [](const std::vector<Tensor>& p) {
        return std::vector<Tensor>{Tensor::zeros(p[0].shape)};
    };
    REQUIRE_THROWS_AS(finite_difference_check(problem, {Tensor::scalar(1.0)}, 1e-5),
                      std::invalid_argument);
}

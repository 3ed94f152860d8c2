#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "brimpr/checkpoint.hpp"
#include "brimpr/model.hpp"
#include "brimpr/rng.hpp"

using namespace brimpr;

namespace {

EncoderConfig tiny_encoder(int prompt_tokens = 3) {
    EncoderConfig c;
    c.layers = 2;
    c.dim = 8;
    c.heads = 2;
    c.tokens = 4;
    c.prompt_tokens = prompt_tokens;
    c.input_dim = 6;
    c.mlp_hidden = 16;
    return c;
}

JointConfig tiny_joint() {
    JointConfig c;
    c.layers = 2;
    c.dim = 8;
    c.heads = 2;
    c.mlp_hidden = 16;
    return c;
}

ModelBundle tiny_bundle(unsigned seed = 1, int prompt_tokens = 3) {
    Rng rng(seed);
    ModelBundle m = init_bundle(tiny_encoder(prompt_tokens), tiny_encoder(prompt_tokens),
                                tiny_joint(), 3, rng);
    init_prompts(m, rng);
    return m;
}

Tensor random_tokens(int m, int d, Rng& rng) {
    Tensor t = Tensor::zeros({m, d});
    for (double& v : t.values) v = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("empty prompts reduce the encoder to the promptless forward") {
    ModelBundle m = tiny_bundle(2, /*prompt_tokens=*/0);
    Rng rng(7);
    Tensor x = random_tokens(4, 6, rng);

    Tape t1;
    TapeModel with(t1, m, TrainMode::none, /*use_prompts=*/true);
    EncodeResult r1 = with.encode(x, Modality::a);

    Tape t2;
    TapeModel without(t2, m, TrainMode::none, /*use_prompts=*/false);
    EncodeResult r2 = without.encode(x, Modality::a);

    REQUIRE(max_abs_diff(t1.value(r1.final_tokens), t2.value(r2.final_tokens)) <= 1e-12);
    for (std::size_t i = 0; i < r1.layer_pooled.size(); ++i)
        REQUIRE(max_abs_diff(t1.value(r1.layer_pooled[i]), t2.value(r2.layer_pooled[i])) <=
                1e-12);
}

TEST_CASE("prompt outputs are discarded: retained length equals input length") {
    ModelBundle m = tiny_bundle(3, /*prompt_tokens=*/10);
    Rng rng(9);

    SECTION("full-length input") {
        Tensor x = random_tokens(4, 6, rng);
        Tape tape;
        TapeModel tm(tape, m);
        EncodeResult r = tm.encode(x, Modality::v);
        for (NodeId id : r.layer_tokens) {
            REQUIRE(tape.value(id).rows() == 4);
            REQUIRE(tape.value(id).cols() == 8);
        }
    }

    SECTION("masked (shorter) input keeps its own length") {
        Tensor x = random_tokens(2, 6, rng);
        Tape tape;
        TapeModel tm(tape, m);
        EncodeResult r = tm.encode(x, Modality::a);
        for (NodeId id : r.layer_tokens) REQUIRE(tape.value(id).rows() == 2);
    }
}

TEST_CASE("encode rejects token-dim mismatch") {
    ModelBundle m = tiny_bundle();
    Tape tape;
    TapeModel tm(tape, m);
    REQUIRE_THROWS_AS(tm.encode(Tensor::zeros({4, 5}), Modality::a), std::invalid_argument);
    REQUIRE_THROWS_AS(tm.encode(Tensor::zeros({9, 6}), Modality::a), std::invalid_argument);
}

TEST_CASE("identical samples give exactly zero pooled-feature batch std") {
    ModelBundle m = tiny_bundle();
    Rng rng(4);
    Tensor x = random_tokens(4, 6, rng);
    Tensor pooled = Tensor::zeros({3, 8});
    for (int s = 0; s < 3; ++s) {
        Tape tape;
        TapeModel tm(tape, m);
        EncodeResult r = tm.encode(x, Modality::a);
        const Tensor& z = tape.value(r.layer_pooled[1]);
        for (int j = 0; j < 8; ++j) pooled.at(s, j) = z.values[static_cast<std::size_t>(j)];
    }
    LayerGaussianStats st = batch_stats(pooled);
    for (double v : st.std.values) REQUIRE(v == 0.0);
}

TEST_CASE("mask_tokens honors ratio, determinism and the subset property") {
    Rng seed_rng(11);
    Tensor x = random_tokens(8, 6, seed_rng);

    SECTION("ratio 0 is the identity") {
        Tensor kept = mask_tokens(x, MaskSpec{0.0, 5});
        REQUIRE(bitwise_equal(kept, x));
    }

    SECTION("ratio 0.5 keeps ceil(8 * 0.5) = 4 tokens") {
        Tensor kept = mask_tokens(x, MaskSpec{0.5, 5});
        REQUIRE(kept.rows() == 4);
    }

    SECTION("same seed twice gives identical kept sets") {
        Rng r1(77), r2(77);
        auto i1 = mask_indices(8, 0.5, r1);
        auto i2 = mask_indices(8, 0.5, r2);
        REQUIRE(i1 == i2);
    }

    SECTION("kept tokens are a subset of the input in original order") {
        Rng r(123);
        auto idx = mask_indices(8, 0.6, r);
        REQUIRE(idx.size() == static_cast<std::size_t>(kept_token_count(8, 0.6)));
        for (std::size_t i = 1; i < idx.size(); ++i) REQUIRE(idx[i] > idx[i - 1]);
        Tensor kept = take_token_rows(x, idx);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < 6; ++j)
                REQUIRE(kept.at(static_cast<int>(i), j) == x.at(idx[i], j));
    }

    SECTION("ratio >= 1 is rejected") {
        Rng r(1);
        REQUIRE_THROWS_AS(mask_indices(8, 1.0, r), std::invalid_argument);
        REQUIRE_THROWS_AS(mask_indices(8, 1.5, r), std::invalid_argument);
    }
}

TEST_CASE("unimodal path runs the joint module on a single modality") {
    ModelBundle m = tiny_bundle();
    Rng rng(13);
    Tensor xa = random_tokens(4, 6, rng);
    Tape tape;
    TapeModel tm(tape, m);
    EncodeResult ea = tm.encode(xa, Modality::a);
    JointResult jr = tm.joint_forward({ea.final_tokens});
    REQUIRE(tape.value(jr.logits).numel() == 3);
    REQUIRE(jr.layer_pooled.size() == 2);
}

TEST_CASE("permuting the batch permutes predictions identically") {
    ModelBundle m = tiny_bundle();
    Rng rng(21);
    std::vector<Tensor> xa, xv;
    for (int i = 0; i < 5; ++i) {
        xa.push_back(random_tokens(4, 6, rng));
        xv.push_back(random_tokens(4, 6, rng));
    }
    std::vector<Tensor> logits;
    for (int i = 0; i < 5; ++i) logits.push_back(predict_logits(m, xa[i], xv[i]));
    std::vector<int> perm = {3, 0, 4, 1, 2};
    for (int i = 0; i < 5; ++i) {
        Tensor permuted = predict_logits(m, xa[perm[i]], xv[perm[i]]);
        REQUIRE(bitwise_equal(permuted, logits[perm[i]]));
    }
}

TEST_CASE("logits survive a checkpoint round trip bit-for-bit") {
    ModelBundle m = tiny_bundle(31);
    Rng rng(5);
    std::vector<Tensor> xa, xv;
    for (int i = 0; i < 4; ++i) {
        xa.push_back(random_tokens(4, 6, rng));
        xv.push_back(random_tokens(4, 6, rng));
    }
    SourceStatsBank bank = precompute_source_bank(m, xa, xv);
    Tensor before = predict_logits(m, xa[0], xv[0]);

    TensorStore store = bundle_to_store(m, bank);
    std::string bytes = serialize_checkpoint(store);
    auto [loaded, loaded_bank] = bundle_from_store(parse_checkpoint(bytes));

    Tensor after = predict_logits(loaded, xa[0], xv[0]);
    REQUIRE(bitwise_equal(before, after));
    REQUIRE(checksum_frozen(m) == checksum_frozen(loaded));
    REQUIRE(loaded_bank.a.size() == bank.a.size());
    for (std::size_t i = 0; i < bank.joint.size(); ++i)
        REQUIRE(bitwise_equal(loaded_bank.joint[i].mean, bank.joint[i].mean));
}

TEST_CASE("source bank has the right shape, is deterministic, and self-disc is zero") {
    ModelBundle m = tiny_bundle(8);
    Rng rng(42);
    std::vector<Tensor> xa, xv;
    for (int i = 0; i < 32; ++i) {
        xa.push_back(random_tokens(4, 6, rng));
        xv.push_back(random_tokens(4, 6, rng));
    }
    SourceStatsBank bank = precompute_source_bank(m, xa, xv);
    REQUIRE(bank.a.size() == 2);
    REQUIRE(bank.v.size() == 2);
    REQUIRE(bank.joint.size() == 2);

    SourceStatsBank again = precompute_source_bank(m, xa, xv);
    for (std::size_t i = 0; i < bank.a.size(); ++i) {
        REQUIRE(bitwise_equal(bank.a[i].mean, again.a[i].mean));
        REQUIRE(bitwise_equal(bank.a[i].std, again.a[i].std));
    }

    // The same 32 samples against their own bank: discrepancy vanishes.
    SourceStatsBank self = precompute_source_bank(m, xa, xv);
    REQUIRE(disc(bank.a, self.a) < 1e-10);
    REQUIRE(disc(bank.v, self.v) < 1e-10);
    REQUIRE(disc(bank.joint, self.joint) < 1e-10);

    REQUIRE_THROWS_AS(precompute_source_bank(m, {xa[0]}, {xv[0]}), std::invalid_argument);
}

TEST_CASE("prompted forward differs from promptless but stays frozen-checksum clean") {
    ModelBundle m = tiny_bundle(3, /*prompt_tokens=*/4);
    Rng rng(2);
    Tensor xa = random_tokens(4, 6, rng);
    Tensor xv = random_tokens(4, 6, rng);
    std::uint64_t sum_before = checksum_frozen(m);
    Tensor with = predict_logits(m, xa, xv, true);
    Tensor without = predict_logits(m, xa, xv, false);
    REQUIRE(max_abs_diff(with, without) > 0.0);
    REQUIRE(checksum_frozen(m) == sum_before);
}

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "brimpr/checkpoint.hpp"
#include "brimpr/config.hpp"
#include "brimpr/model.hpp"
#include "brimpr/rng.hpp"

using namespace brimpr;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

TensorStore sample_store() {
    TensorStore s;
    s.add("alpha", Tensor({2, 3}, {1.0, -2.5, 3.25, 0.0, 1e-300, 123456.789}));
    s.add("beta/gamma", Tensor({4}, {0.1, 0.2, 0.3, 0.4}));
    s.add("scalar", Tensor::scalar(-7.0));
    return s;
}

}  // namespace

TEST_CASE("checkpoint magic and layout round-trip byte-for-byte") {
    TensorStore store = sample_store();
    std::string bytes = serialize_checkpoint(store);
    REQUIRE(bytes.compare(0, 5, "BMPR1") == 0);

    TensorStore loaded = parse_checkpoint(bytes);
    REQUIRE(loaded.entries().size() == 3);
    REQUIRE(loaded.entries()[0].first == "alpha");
    REQUIRE(bitwise_equal(loaded.get("alpha"), store.get("alpha")));
    REQUIRE(loaded.get_scalar("scalar") == -7.0);

    // Load -> save is byte-identical.
    REQUIRE(serialize_checkpoint(loaded) == bytes);
}

TEST_CASE("checkpoint record encoding is little-endian with u32 fields") {
    TensorStore s;
    s.add("ab", Tensor::scalar(1.0));
    std::string bytes = serialize_checkpoint(s);
    // magic(5) + name_len(4) + name(2) + rank(4) + dim(4) + f64(8)
    REQUIRE(bytes.size() == 5 + 4 + 2 + 4 + 4 + 8);
    REQUIRE(static_cast<unsigned char>(bytes[5]) == 2);  // name_len LE
    REQUIRE(bytes[6] == 0);
    REQUIRE(bytes.substr(9, 2) == "ab");
    REQUIRE(static_cast<unsigned char>(bytes[11]) == 1);  // rank
    REQUIRE(static_cast<unsigned char>(bytes[15]) == 1);  // dim0
    // 1.0 encodes as 0x3FF0000000000000 little-endian.
    REQUIRE(static_cast<unsigned char>(bytes[25]) == 0xf0);
    REQUIRE(static_cast<unsigned char>(bytes[26]) == 0x3f);
}

TEST_CASE("corrupt checkpoints are rejected") {
    REQUIRE_THROWS_AS(parse_checkpoint("XXXXX"), CheckpointError);
    REQUIRE_THROWS_AS(parse_checkpoint("BMPR2garbage"), CheckpointError);
    TensorStore store = sample_store();
    std::string bytes = serialize_checkpoint(store);
    REQUIRE_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
}

TEST_CASE("checkpoint file write/read round trip") {
    std::string path = temp_path("brimpr_test_store.bmpr");
    TensorStore store = sample_store();
    write_checkpoint(path, store);
    TensorStore loaded = read_checkpoint(path);
    REQUIRE(serialize_checkpoint(loaded) == serialize_checkpoint(store));
    std::remove(path.c_str());
}

TEST_CASE("duplicate names are rejected by the store") {
    TensorStore s;
    s.add("x", Tensor::scalar(1.0));
    REQUIRE_THROWS_AS(s.add("x", Tensor::scalar(2.0)), std::invalid_argument);
    REQUIRE_THROWS_AS(s.get("missing"), CheckpointError);
}

TEST_CASE("bundle serialization covers weights, prompts, stats and configs") {
    Rng rng(2);
    EncoderConfig ec;
    ec.layers = 2;
    ec.dim = 8;
    ec.heads = 2;
    ec.tokens = 4;
    ec.prompt_tokens = 3;
    ec.input_dim = 6;
    ec.mlp_hidden = 16;
    JointConfig jc;
    jc.layers = 2;
    jc.dim = 8;
    jc.heads = 2;
    jc.mlp_hidden = 16;
    ModelBundle m = init_bundle(ec, ec, jc, 3, rng);
    init_prompts(m, rng);
    std::vector<Tensor> xa, xv;
    for (int i = 0; i < 4; ++i) {
        Tensor t = Tensor::zeros({4, 6});
        for (double& v : t.values) v = rng.normal();
        xa.push_back(t);
        for (double& v : t.values) v = rng.normal();
        xv.push_back(t);
    }
    SourceStatsBank bank = precompute_source_bank(m, xa, xv);
    TensorStore store = bundle_to_store(m, bank);

    REQUIRE(store.has("config/enc_a/prompt_tokens"));
    REQUIRE(store.has("enc_a/layer0/attn/wq"));
    REQUIRE(store.has("enc_v/layer1/mlp/w2"));
    REQUIRE(store.has("joint/layer1/ln2/beta"));
    REQUIRE(store.has("head/w"));
    REQUIRE(store.has("prompts/a/layer0"));
    REQUIRE(store.has("prompts/v/layer1"));
    REQUIRE(store.has("stats/a/layer0/mean"));
    REQUIRE(store.has("stats/v/layer1/std"));
    REQUIRE(store.has("stats/j/layer0/mean"));

    auto [loaded, loaded_bank] = bundle_from_store(store);
    REQUIRE(checksum_frozen(loaded) == checksum_frozen(m));
    REQUIRE(bitwise_equal(loaded.prompts.a[1], m.prompts.a[1]));
    REQUIRE(bitwise_equal(loaded_bank.v[0].std, bank.v[0].std));
}

TEST_CASE("config defaults cover every schema key") {
    Config cfg;
    for (const ConfigKey& k : config_schema()) {
        REQUIRE_NOTHROW(cfg.get(k.name));
        REQUIRE(cfg.get(k.name) == std::string(k.default_value));
    }
    REQUIRE(cfg.get_int("model.dim") == 32);
    REQUIRE(cfg.get_double("adapt.lr") == 1e-4);
    REQUIRE(cfg.get_int("adapt.batch_size") == 16);
    REQUIRE(cfg.get_double("adapt.mask_ratio") == 0.5);
    REQUIRE(cfg.get_double("adapt.tau0") == 0.2);
    REQUIRE(cfg.get_double("adapt.d0") == 5.0);
    REQUIRE(cfg.get_int("detector.window") == 10);
    REQUIRE(cfg.get_double("detector.k") == 5.0);
    REQUIRE(cfg.get_int("model.prompts_per_layer") == 10);
    REQUIRE(cfg.get_int("pretrain.bank_samples") == 32);
}

TEST_CASE("config parsing: comments, whitespace, overrides, unknown keys") {
    Config cfg;
    cfg.merge_text("# comment line\n"
                   "  model.dim = 16   # trailing comment\n"
                   "\n"
                   "adapt.lr=0.01\n",
                   "test");
    REQUIRE(cfg.get_int("model.dim") == 16);
    REQUIRE(cfg.get_double("adapt.lr") == 0.01);

    REQUIRE_THROWS_AS(cfg.merge_text("unknown.key = 3\n", "test"), ConfigError);
    REQUIRE_THROWS_AS(cfg.merge_text("model.dim 16\n", "test"), ConfigError);
    REQUIRE_THROWS_AS(cfg.set("nope", "1"), ConfigError);
}

TEST_CASE("config type validation") {
    Config cfg;
    cfg.set("model.dim", "abc");
    REQUIRE_THROWS_AS(cfg.get_int("model.dim"), ConfigError);
    cfg.set("adapt.lr", "fast");
    REQUIRE_THROWS_AS(cfg.get_double("adapt.lr"), ConfigError);
    cfg.set("adapt.swap_lambda", "maybe");
    REQUIRE_THROWS_AS(cfg.get_bool("adapt.swap_lambda"), ConfigError);
    cfg.set("adapt.swap_lambda", "true");
    REQUIRE(cfg.get_bool("adapt.swap_lambda"));
}

TEST_CASE("missing config file raises a config error") {
    REQUIRE_THROWS_AS(Config::from_file("/nonexistent/brimpr.cfg"), ConfigError);
}

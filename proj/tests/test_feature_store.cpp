#include <Eigen/Dense>
#include <random>

#include "dfadapt/backbone.hpp"
#include "dfadapt/datagen.hpp"
#include "dfadapt/errors.hpp"
#include "dfadapt/feature_store.hpp"
#include "dfadapt/losses.hpp"
#include "doctest.h"

using namespace dfadapt;

TEST_CASE("default bin spec has five bins") {
    BinSpec spec;
    CHECK(spec.num_bins() == 5);
    CHECK_NOTHROW(spec.validate());
}

TEST_CASE("bin assignment matches the interval arithmetic") {
    BinSpec spec;
    // [0.5, 0.6) -> 0, ..., [0.9, 1.0] -> 4; below lambda_a excluded.
    CHECK(assign_bin(0.55, spec) == 0);
    CHECK(!assign_bin(0.45, spec).has_value());
    CHECK(assign_bin(0.5, spec) == 0);
    CHECK(assign_bin(0.6, spec) == 1);
    CHECK(assign_bin(0.899999, spec) == 3);
    CHECK(assign_bin(0.9, spec) == 4);
    // The top edge is closed: confidence 1.0 lands in the last bin; values
    // outside [0, 1] are invalid confidences, not merely unbinned.
    CHECK(assign_bin(1.0, spec) == 4);
    CHECK_THROWS_AS(assign_bin(1.5, spec), DataError);
    CHECK_THROWS_AS(assign_bin(-0.5, spec), DataError);
}

TEST_CASE("bin edges partition the confidence range") {
    BinSpec spec;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 2000; ++i) {
        double c = u(rng);
        auto bin = assign_bin(c, spec);
        if (c < spec.lambda_a) {
            CHECK(!bin.has_value());
        } else {
            REQUIRE(bin.has_value());
            CHECK(*bin >= 0);
            CHECK(*bin < spec.num_bins());
            // Exactly one bin matches: the value lies inside its interval.
            double lo = spec.lambda_a + *bin * spec.step;
            CHECK(c >= lo - 1e-12);
            CHECK(c < lo + spec.step + 1e-12);
        }
    }
}

TEST_CASE("bin spec validation rejects degenerate ranges") {
    BinSpec bad;
    bad.step = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = BinSpec{};
    bad.lambda_b = bad.lambda_a;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = BinSpec{};
    bad.lambda_a = -0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("store aggregates are cell means and empty cells are detectable") {
    BinSpec spec;
    FeatureStore store(spec, 2);
    CHECK(store.total_count() == 0);
    CHECK(store.empty_cell(0, 0));

    Eigen::Vector2d a(1.0, 3.0), b(3.0, 5.0);
    store.accumulate(a, 0.52, 0);
    store.accumulate(b, 0.58, 0);
    store.accumulate(a, 0.95, 1);
    CHECK(store.total_count() == 3);
    CHECK(store.count(0, 0) == 2);
    CHECK(store.count(4, 1) == 1);
    CHECK(store.aggregate(0, 0).isApprox(Eigen::Vector2d(2.0, 4.0)));
    CHECK(store.aggregate(4, 1).isApprox(a));
    CHECK(store.empty_cell(2, 0));

    // Low-confidence samples are never stored.
    store.accumulate(b, 0.3, 0);
    CHECK(store.total_count() == 3);
}

TEST_CASE("store rejects bad inputs") {
    BinSpec spec;
    FeatureStore store(spec, 3);
    Eigen::Vector2d wrong_dim(1.0, 2.0);
    CHECK_THROWS_AS(store.accumulate(wrong_dim, 0.7, 0), DataError);
    Eigen::Vector3d f(1.0, 2.0, 3.0);
    CHECK_THROWS_AS(store.accumulate(f, 0.7, 2), DataError);
    CHECK_THROWS_AS(store.accumulate(f, -0.1, 0), DataError);
}

TEST_CASE("built store accounts for every confident sample") {
    DomainSpec spec = preset_domain("alpha");
    GenConfig gen;
    gen.n_groups = 44;
    gen.clips_per_group = 2;
    gen.frames_per_clip = 1;
    gen.seed = 5;
    DomainDataset ds = generate_domain(spec, gen);
    SampleRefs adapt = ds.split_refs(Split::Adapt);
    REQUIRE(!adapt.empty());

    Model model(Architecture{}, 17);
    BinSpec bins;
    FeatureStore store = build_store(model, adapt, bins);

    // Total stored count equals the number of samples whose own-confidence
    // clears lambda_a; with two classes it can never exceed the set size.
    long confident = 0;
    auto outs = forward(model, adapt);
    for (const auto& o : outs) {
        double conf = softmax_t(o.logits, 1.0).maxCoeff();
        if (assign_bin(conf, bins).has_value()) ++confident;
    }
    CHECK(store.total_count() == confident);
    CHECK(store.total_count() <= static_cast<long>(adapt.size()));

    // Binary softmax max-probability is always >= 0.5, so every sample lands
    // in some bin.
    CHECK(store.total_count() == static_cast<long>(adapt.size()));
}

TEST_CASE("build_store is deterministic and feature dim follows the model") {
    DomainSpec spec = preset_domain("beta");
    GenConfig gen;
    gen.n_groups = 40;
    gen.clips_per_group = 1;
    gen.frames_per_clip = 2;
    gen.seed = 6;
    DomainDataset ds = generate_domain(spec, gen);
    SampleRefs refs = ds.split_refs(Split::Validation);
    Model model(Architecture{}, 3);
    BinSpec bins;
    FeatureStore s1 = build_store(model, refs, bins);
    FeatureStore s2 = build_store(model, refs, bins, 4);
    CHECK(s1.feature_dim() == model.feature_dim());
    CHECK(s1.total_count() == s2.total_count());
    for (int b = 0; b < bins.num_bins(); ++b) {
        for (int c = 0; c < 2; ++c) {
            CHECK(s1.count(b, c) == s2.count(b, c));
            if (!s1.empty_cell(b, c))
                CHECK((s1.aggregate(b, c) - s2.aggregate(b, c)).cwiseAbs().maxCoeff() == 0.0);
        }
    }
}

TEST_CASE("student store refreshed from an identical model gives zero storage loss") {
    DomainSpec spec = preset_domain("gamma");
    GenConfig gen;
    gen.n_groups = 40;
    gen.clips_per_group = 1;
    gen.frames_per_clip = 2;
    gen.seed = 7;
    DomainDataset ds = generate_domain(spec, gen);
    SampleRefs refs = ds.split_refs(Split::Adapt);
    Model teacher(Architecture{}, 9);
    Model student(Architecture{}, 10);
    copy_weights(teacher, student);

    BinSpec bins;
    FeatureStore ts = build_store(teacher, refs, bins);
    FeatureStore ss = refresh_student_store(student, refs, bins);
    // Epoch 0 of adaptation: identical weights, identical stores.
    CHECK(fsl_loss(ss, ts) == 0.0);
}

TEST_CASE("store JSON lists counts for inspection") {
    BinSpec spec;
    FeatureStore store(spec, 2);
    store.accumulate(Eigen::Vector2d(1.0, 2.0), 0.73, 1);
    std::string j = store.to_json();
    CHECK(j.find("\"count\":1") != std::string::npos);
    CHECK(j.find("\"aggregate\"") != std::string::npos);
    CHECK(j.find("\"fake\"") != std::string::npos);
}

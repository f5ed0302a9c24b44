#include <cmath>

#include "doctest.h"
#include "ehrseq/metrics.hpp"
#include "ehrseq/rng.hpp"
#include "../support/fixtures.hpp"
#include "../support/oracles.hpp"

using namespace ehrseq;
using namespace ehrseq::metrics;
using fixtures::make_patient;
using fixtures::make_visit;

namespace {

std::vector<ScoredExample> scored(std::vector<double> scores, std::vector<int> labels) {
    std::vector<ScoredExample> out;
    for (size_t i = 0; i < scores.size(); ++i) {
        out.push_back({"p" + std::to_string(i), scores[i], labels[i]});
    }
    return out;
}

std::vector<ScoredExample> random_fixture(Rng& rng) {
    const int n = 2 + static_cast<int>(rng.below(49));
    std::vector<ScoredExample> out;
    for (int i = 0; i < n; ++i) {
        // coarse score grid injects plenty of ties
        const double score = static_cast<double>(rng.below(8)) / 7.0;
        out.push_back({"p" + std::to_string(i), score, static_cast<int>(rng.below(2))});
    }
    bool has_pos = false, has_neg = false;
    for (const auto& e : out) (e.label ? has_pos : has_neg) = true;
    if (!has_pos) out.push_back({"px", 0.3, 1});
    if (!has_neg) out.push_back({"px2", 0.6, 0});
    return out;
}

}  // namespace

TEST_CASE("auc of perfectly separated scores is 1") {
    CHECK(auc(scored({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})) == 1.0);
    CHECK(auc(scored({0.1, 0.2, 0.8}, {0, 0, 1})) == 1.0);
    CHECK(auc(scored({0.9, 0.1}, {0, 1})) == 0.0);
}

TEST_CASE("auc with all scores identical is one half") {
    CHECK(auc(scored({0.4, 0.4, 0.4, 0.4}, {1, 0, 1, 0})) == 0.5);
}

TEST_CASE("small fixtures against the pair-counting oracle") {
    // both positives beat the lone negative
    const auto a = scored({0.9, 0.4, 0.6}, {1, 0, 1});
    CHECK(oracles::pair_auc(a) == 1.0);
    CHECK(auc(a) == 1.0);

    // a tie contributes half: (1 + 0.5)/2
    const auto b = scored({0.9, 0.4, 0.4}, {1, 0, 1});
    CHECK(oracles::pair_auc(b) == 0.75);
    CHECK(auc(b) == 0.75);
}

TEST_CASE("single-class input is rejected") {
    CHECK_THROWS_AS(auc(scored({0.1, 0.2}, {1, 1})), std::invalid_argument);
    CHECK_THROWS_AS(roc_points(scored({0.1, 0.2}, {0, 0})), std::invalid_argument);
}

TEST_CASE("roc endpoints and perfect-classifier corner") {
    const auto curve = roc_points(scored({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}));
    CHECK(curve.points.front() == std::pair<double, double>{0.0, 0.0});
    CHECK(curve.points.back() == std::pair<double, double>{1.0, 1.0});
    bool corner = false;
    for (const auto& [fpr, tpr] : curve.points) {
        if (fpr == 0.0 && tpr == 1.0) corner = true;
    }
    CHECK(corner);
    CHECK(curve.auc == 1.0);
}

TEST_CASE("roc of identical scores degenerates to the diagonal") {
    const auto curve = roc_points(scored({0.4, 0.4, 0.4}, {1, 0, 1}));
    REQUIRE(curve.points.size() == 2);
    CHECK(curve.points[0] == std::pair<double, double>{0.0, 0.0});
    CHECK(curve.points[1] == std::pair<double, double>{1.0, 1.0});
    CHECK(curve.auc == 0.5);
}

TEST_CASE("roc points are monotone and trapezoid area equals rank auc") {
    Rng rng(606);
    for (int trial = 0; trial < 300; ++trial) {
        const auto fixture = random_fixture(rng);
        const auto curve = roc_points(fixture);
        for (size_t i = 1; i < curve.points.size(); ++i) {
            CHECK(curve.points[i].first >= curve.points[i - 1].first);
            CHECK(curve.points[i].second >= curve.points[i - 1].second);
        }
        const double rank = auc(fixture);
        CHECK(std::abs(curve.auc - rank) < 1e-12);
        CHECK(rank == oracles::pair_auc(fixture));  // exact, both are (conc + ties/2)/(P*N)
    }
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
    Rng rng(707);
    for (int trial = 0; trial < 50; ++trial) {
        auto fixture = random_fixture(rng);
        const double base = auc(fixture);
        auto cubed = fixture;
        for (auto& e : cubed) e.score = e.score * e.score * e.score;  // monotone on [0,1]
        CHECK(auc(cubed) == base);
        auto affine = fixture;
        for (auto& e : affine) e.score = 3.0 * e.score + 2.0;
        CHECK(auc(affine) == base);
    }
}

TEST_CASE("label flip with score reflection preserves auc") {
    Rng rng(808);
    for (int trial = 0; trial < 50; ++trial) {
        auto fixture = random_fixture(rng);
        const double base = auc(fixture);
        for (auto& e : fixture) {
            e.label = 1 - e.label;
            e.score = 1.0 - e.score;
        }
        CHECK(auc(fixture) == base);
    }
}

namespace {

model::Checkpoint random_checkpoint() {
    model::ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.seq_len = 16;
    std::vector<aug::CodeSequence> corpus;
    aug::CodeSequence s;
    s.patient_id = "v";
    for (const char* c : {"a", "b", "c", "x", "m", "n"}) {
        s.codes.emplace_back(c, ehr::CodeType::Diagnosis);
    }
    corpus.push_back(s);
    model::Checkpoint ck;
    ck.vocab = pipe::Vocabulary::build(corpus);
    cfg.vocab_size = ck.vocab.size();
    ck.config = cfg;
    ck.params = model::init_params<float>(cfg, 2718);
    return ck;
}

}  // namespace

TEST_CASE("tta_score at alpha 1 equals plain scoring") {
    const auto ck = random_checkpoint();
    const auto patient = make_patient("p", {make_visit(0, {"a", "b"}, {"x"}, {"m", "n"}),
                                            make_visit(1, {"c"})});
    const double plain = score_sequence(ck, aug::identity_sequence(patient));
    CHECK(tta_score(ck, patient, 1, 123) == plain);
}

TEST_CASE("tta_score on a patient with a single ordering equals plain scoring") {
    const auto ck = random_checkpoint();
    const auto patient = make_patient("p", {make_visit(0, {"a"}, {"x"}, {"m"})});
    const double plain = score_sequence(ck, aug::identity_sequence(patient));
    for (uint64_t alpha : {1ull, 4ull, 16ull}) {
        CHECK(tta_score(ck, patient, alpha, 5) == plain);
    }
}

TEST_CASE("tta_score averages within the per-ordering score range and is deterministic") {
    const auto ck = random_checkpoint();
    const auto patient = make_patient("p", {make_visit(0, {"a", "b", "c"}, {"x"}, {"m", "n"})});
    aug::AugmentConfig acfg;
    acfg.alpha = 4;
    acfg.seed = 99;
    double lo = 1.0, hi = 0.0;
    for (const auto& s : aug::sample_augmentations(patient, acfg)) {
        const double v = score_sequence(ck, s);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double mean = tta_score(ck, patient, 4, 99);
    CHECK(mean >= lo);
    CHECK(mean <= hi);
    CHECK(tta_score(ck, patient, 4, 99) == mean);
    CHECK(score_sequence(ck, aug::identity_sequence(patient)) >= 0.0);
}

TEST_CASE("metrics report serializes every field") {
    MetricsReport report;
    report.auc = 0.75;
    report.auc_tta = 0.76;
    report.roc.points = {{0.0, 0.0}, {1.0, 1.0}};
    report.n_case = 3;
    report.n_control = 5;
    const auto j = report.to_json();
    CHECK(j["auc"] == 0.75);
    CHECK(j["auc_tta"] == 0.76);
    CHECK(j["roc"].size() == 2);
    CHECK(j["n_case"] == 3);
    CHECK(j["n_control"] == 5);
}

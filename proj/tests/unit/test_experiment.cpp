#include <sstream>

#include "doctest.h"
#include "ehrseq/experiment.hpp"
#include "ehrseq/synthgen.hpp"

using namespace ehrseq;
using namespace ehrseq::exper;

namespace {

synth::SynthCorpus micro_corpus() {
    synth::SynthConfig cfg;
    cfg.n_patients = 90;
    cfg.index_fraction = 0.4;
    cfg.mean_visits = 3.0;
    cfg.codes_per_visit_mean = 2.2;
    cfg.n_diag_codes = 20;
    cfg.n_proc_codes = 12;
    cfg.n_rx_codes = 12;
    cfg.seed = 99;
    return synth::gen_corpus(cfg);
}

ExperimentSpec micro_spec() {
    ExperimentSpec spec;
    spec.alphas = {1};
    spec.label_fractions = {1.0};
    spec.n_seeds = 1;
    spec.base_seed = 11;
    spec.vary = Vary::Pretrain;
    spec.fixed_finetune_alpha = 1;
    spec.tta_alpha = 2;
    spec.model.n_layers = 1;
    spec.model.n_heads = 2;
    spec.model.d_model = 8;
    spec.model.d_ff = 16;
    spec.model.seq_len = 24;
    spec.pretrain_epochs = 1;
    spec.finetune_epochs = 1;
    spec.batch_size = 16;
    spec.split_seed = 5;
    return spec;
}

size_t count_lines(const std::string& text) {
    size_t n = 0;
    for (char c : text) n += c == '\n';
    return n;
}

}  // namespace

TEST_CASE("a 1x1x1 grid emits exactly one row") {
    const auto corpus = micro_corpus();
    const auto outcome =
        run_experiment(micro_spec(), corpus.pretrain_pool, corpus.labeled_pool);
    REQUIRE(outcome.ok);
    CHECK(outcome.cells.size() == 1);
    CHECK(count_lines(outcome.results_csv) == 2);  // header + row
    CHECK(outcome.results_csv.rfind("alpha,label_fraction,seed,auc,auc_tta\n", 0) == 0);
    CHECK(count_lines(outcome.summary_csv) == 2);
}

TEST_CASE("grid size is the product of axis lengths") {
    const auto corpus = micro_corpus();
    auto spec = micro_spec();
    spec.alphas = {1, 2, 4, 8};
    spec.label_fractions = {1.0, 0.5, 0.25};
    spec.n_seeds = 3;
    spec.vary = Vary::Finetune;
    spec.fixed_pretrain_alpha = 1;
    PretrainCache cache;
    const auto outcome =
        run_experiment(spec, corpus.pretrain_pool, corpus.labeled_pool, &cache);
    REQUIRE(outcome.ok);
    CHECK(outcome.cells.size() == 36);
    CHECK(count_lines(outcome.results_csv) == 37);
    CHECK(count_lines(outcome.summary_csv) == 13);  // header + 12 cells
    // pretrain ran once per seed, shared across the finetune axis
    CHECK(cache.size() == 3);
}

TEST_CASE("reruns produce byte-identical CSV") {
    const auto corpus = micro_corpus();
    auto spec = micro_spec();
    spec.alphas = {1, 2};
    spec.n_seeds = 2;
    const auto a = run_experiment(spec, corpus.pretrain_pool, corpus.labeled_pool);
    const auto b = run_experiment(spec, corpus.pretrain_pool, corpus.labeled_pool);
    REQUIRE(a.ok);
    REQUIRE(b.ok);
    CHECK(a.results_csv == b.results_csv);
    CHECK(a.summary_csv == b.summary_csv);
}

TEST_CASE("a failing cell leaves a marker and partial results") {
    const auto corpus = micro_corpus();
    auto spec = micro_spec();
    spec.alphas = {1};
    // a fraction this small drops one class entirely in the micro corpus
    spec.label_fractions = {1.0, 0.001};
    spec.n_seeds = 1;
    const auto outcome =
        run_experiment(spec, corpus.pretrain_pool, corpus.labeled_pool);
    CHECK_FALSE(outcome.ok);
    CHECK(outcome.cells.size() == 1);  // the good cell ran first
    CHECK(outcome.results_csv.find("# FAILED alpha=1 fraction=0.0010 seed=11") !=
          std::string::npos);
    CHECK_FALSE(outcome.failure.empty());
}

TEST_CASE("experiment spec json round trip") {
    auto spec = micro_spec();
    spec.vary = Vary::Finetune;
    spec.alphas = {1, 8};
    const auto back = ExperimentSpec::from_json(spec.to_json());
    CHECK(back.alphas == spec.alphas);
    CHECK(back.label_fractions == spec.label_fractions);
    CHECK(back.n_seeds == spec.n_seeds);
    CHECK(back.vary == spec.vary);
    CHECK(back.model.d_model == spec.model.d_model);
    CHECK(back.tta_alpha == spec.tta_alpha);
    CHECK(back.split_seed == spec.split_seed);

    CHECK_THROWS(ExperimentSpec::from_json(nlohmann::json{{"alphas", nlohmann::json::array()}}));
}

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ehrseq/model.hpp"
#include "ehrseq/records.hpp"
#include "ehrseq/trainer.hpp"
#include "json.hpp"

namespace ehrseq::exper {

/// Which training phase the grid's alpha axis drives. The other phase keeps a
/// fixed factor.
enum class Vary { Pretrain, Finetune };

struct ExperimentSpec {
    std::vector<uint64_t> alphas = {1, 2, 4, 8};
    std::vector<double> label_fractions = {1.0};
    int n_seeds = 3;
    uint64_t base_seed = 1;
    Vary vary = Vary::Pretrain;
    uint64_t fixed_pretrain_alpha = 8;  // used when vary == Finetune
    uint64_t fixed_finetune_alpha = 1;  // used when vary == Pretrain
    uint64_t tta_alpha = 8;
    model::ModelConfig model;
    int pretrain_epochs = 2;
    int finetune_epochs = 3;
    int batch_size = 32;
    double pretrain_lr = 1e-3;
    double finetune_lr = 1e-4;
    double mlm_rate = 0.15;
    double split_ratio = 0.8;
    uint64_t split_seed = 7;
    int threads = 1;

    nlohmann::json to_json() const;
    static ExperimentSpec from_json(const nlohmann::json& j);
};

struct CellResult {
    uint64_t alpha = 1;
    double label_fraction = 1.0;
    uint64_t seed = 0;
    double auc = 0.0;
    double auc_tta = 0.0;
};

struct ExperimentOutcome {
    std::vector<CellResult> cells;
    bool ok = true;
    std::string failure;      // "alpha=.. fraction=.. seed=..: what" when !ok
    std::string results_csv;  // one row per cell, spec order
    std::string summary_csv;  // per-(alpha, fraction) medians over seeds
};

/// In-memory reuse of pre-train checkpoints keyed by (alpha, seed); an
/// experiment grid shares them across cells, and callers can share one cache
/// across experiments that agree on corpus and pretrain settings.
using PretrainCache = std::map<std::pair<uint64_t, uint64_t>, model::Checkpoint>;

/// Runs the full (alpha x label_fraction x seed) grid deterministically. On a
/// cell failure the partial CSV is kept, a failure marker row is appended,
/// and ok=false.
ExperimentOutcome run_experiment(const ExperimentSpec& spec,
                                 const std::vector<ehr::PatientRecord>& pretrain_corpus,
                                 const std::vector<ehr::PatientRecord>& labeled,
                                 PretrainCache* cache = nullptr);

}  // namespace ehrseq::exper

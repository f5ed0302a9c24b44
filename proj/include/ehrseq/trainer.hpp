#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ehrseq/augment.hpp"
#include "ehrseq/metrics.hpp"
#include "ehrseq/model.hpp"
#include "ehrseq/records.hpp"
#include "json.hpp"

namespace ehrseq::train {

/// Patient-level train/test partition, persisted so every run shares it.
struct SplitPlan {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    double ratio = 0.8;
    uint64_t seed = 0;

    nlohmann::json to_json() const;
    static SplitPlan from_json(const nlohmann::json& j);
    static SplitPlan load(const std::string& path);
    void save(const std::string& path) const;
};

/// Seeded shuffle of the (sorted) ids; the first ceil(ratio*N) go to train.
SplitPlan split_patients(std::vector<std::string> patient_ids, double ratio, uint64_t seed);

enum class Phase { Pretrain, Finetune };

struct RunConfig {
    Phase phase = Phase::Pretrain;
    uint64_t alpha = 1;
    model::ModelConfig model;
    int epochs = 10;
    int batch_size = 32;
    double lr = 1e-4;
    double label_fraction = 1.0;
    uint64_t seed = 0;
    double mlm_rate = 0.15;
    int patience = 3;  // pretrain early stopping on validation MLM loss
    bool class_weighted = false;  // inverse-frequency BCE weights
    int threads = 1;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

struct PretrainResult {
    model::Checkpoint checkpoint;  // best validation MLM loss
    double best_val_loss = 0.0;
    int best_epoch = -1;
    std::vector<double> val_losses;
    size_t pool_size = 0;
};

/// MLM pre-training over the augmented sequence pool. Every augmented
/// sequence is an independent example; the pool gets a sequence-level 80/20
/// train/validation split.
PretrainResult pretrain(const std::vector<ehr::PatientRecord>& corpus, const RunConfig& cfg);

/// Drops visits dated after index_date + 365 days.
ehr::PatientRecord build_task_input(const ehr::PatientRecord& patient, Date index_date);

/// Train sequences (augmented, labels propagated) and test patients for one
/// fine-tuning run. Exposed so leakage checks can probe the exact pools the
/// trainer consumes.
struct FinetunePools {
    std::vector<aug::CodeSequence> train_sequences;
    std::vector<ehr::PatientRecord> test_patients;  // task-window truncated
    std::vector<std::string> selected_train_ids;
};

FinetunePools build_finetune_pools(const std::vector<ehr::PatientRecord>& labeled,
                                   const SplitPlan& plan, const RunConfig& cfg);

struct FinetuneResult {
    model::Checkpoint checkpoint;
    metrics::MetricsReport report;
};

/// Fine-tunes all weights from `base` with the binary head, scoring test
/// patients on their identity sequences plus TTA at tta_alpha.
FinetuneResult finetune(const std::vector<ehr::PatientRecord>& labeled,
                        const model::Checkpoint& base, const SplitPlan& plan,
                        const RunConfig& cfg, uint64_t tta_alpha);

}  // namespace ehrseq::train

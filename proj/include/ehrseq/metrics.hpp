#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ehrseq/augment.hpp"
#include "ehrseq/model.hpp"
#include "json.hpp"

namespace ehrseq::metrics {

struct ScoredExample {
    std::string patient_id;
    double score = 0.0;
    int label = 0;  // Case = 1, Control = 0
};

struct RocCurve {
    std::vector<std::pair<double, double>> points;  // (fpr, tpr), (0,0) .. (1,1)
    double auc = 0.0;
};

/// Mann-Whitney AUC: (concordant + 0.5 * tied) / (positives * negatives),
/// computed by rank summation. Throws on single-class input.
double auc(const std::vector<ScoredExample>& examples);

/// Threshold sweep at distinct scores; tied scores merge into single steps.
/// The stored auc is the trapezoidal area and must match auc() closely.
RocCurve roc_points(const std::vector<ScoredExample>& examples);

/// Classifier probability for one already-flattened sequence.
double score_sequence(const model::Checkpoint& ck, const aug::CodeSequence& seq);

/// Test-time augmentation: mean probability over min(alpha, total) orderings
/// of the patient, identity included.
double tta_score(const model::Checkpoint& ck, const ehr::PatientRecord& patient,
                 uint64_t alpha, uint64_t seed);

struct MetricsReport {
    double auc = 0.0;
    double auc_tta = 0.0;
    RocCurve roc;
    int n_case = 0;
    int n_control = 0;

    nlohmann::json to_json() const;
};

}  // namespace ehrseq::metrics

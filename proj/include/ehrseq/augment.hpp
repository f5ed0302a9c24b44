#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ehrseq/bigint.hpp"
#include "ehrseq/records.hpp"
#include "json.hpp"

namespace ehrseq::aug {

/// Lexicographic permutation ranks of one visit's three type blocks.
/// Rank 0 in every block is the ingestion order.
struct VisitRank {
    BigUint d_rank;
    BigUint o_rank;
    BigUint p_rank;

    bool is_zero() const { return d_rank.is_zero() && o_rank.is_zero() && p_rank.is_zero(); }
    bool operator==(const VisitRank& rhs) const = default;
};

struct SequenceRank {
    std::vector<VisitRank> per_visit;

    bool is_identity() const {
        for (const auto& v : per_visit) {
            if (!v.is_zero()) return false;
        }
        return true;
    }
    bool operator==(const SequenceRank& rhs) const = default;
};

/// One flattened ordering of a patient's codes: per visit (ascending date),
/// the permuted diagnosis block, then procedures, then prescriptions.
struct CodeSequence {
    std::string patient_id;
    std::vector<std::pair<std::string, ehr::CodeType>> codes;
    SequenceRank rank;
    std::optional<ehr::LabelOutcome> label;
};

struct AugmentConfig {
    uint64_t alpha = 1;
    uint64_t seed = 0;
    bool include_identity = true;
};

/// Number of valid orderings of one visit: |D|! * |O|! * |P|!.
BigUint visit_perm_count(const ehr::Visit& visit);

inline constexpr uint64_t kDefaultCountCap = INT64_MAX;

struct SequenceCount {
    BigUint count;    // exact when !saturated, else the partial product that crossed cap
    bool saturated;
};

/// Product of per-visit ordering counts, short-circuited once it reaches cap.
SequenceCount total_sequence_count(const ehr::PatientRecord& patient,
                                   uint64_t cap = kDefaultCountCap);

/// Applies the per-block ranks to one visit via factorial-number-system
/// (Lehmer code) decoding and returns the flattened D|O|P slice.
/// Out-of-bounds ranks throw std::out_of_range.
std::vector<std::pair<std::string, ehr::CodeType>> unrank_visit(const ehr::Visit& visit,
                                                                const VisitRank& rank);

/// The all-zero-rank flattening (ingestion order).
CodeSequence identity_sequence(const ehr::PatientRecord& patient);

/// min(alpha, total) distinct orderings of the patient's codes. The identity
/// comes first when requested; the rest are uniform draws without replacement
/// (duplicate code lists rejected). When the whole space fits under alpha it
/// is enumerated instead. Deterministic in (patient, cfg): the working seed
/// is cfg.seed mixed with a stable hash of patient_id.
std::vector<CodeSequence> sample_augmentations(const ehr::PatientRecord& patient,
                                               const AugmentConfig& cfg);

nlohmann::json sequence_to_json(const CodeSequence& seq);
CodeSequence sequence_from_json(const nlohmann::json& j);

std::vector<CodeSequence> load_sequences_jsonl(const std::string& path);
void save_sequences_jsonl(const std::vector<CodeSequence>& seqs, const std::string& path);

}  // namespace ehrseq::aug

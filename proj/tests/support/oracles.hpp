#pragma once

// Brute-force reference implementations for test assertions. These stay
// deliberately independent of the library code paths they check: permutation
// spaces come from std::next_permutation over index arrays, AUC from explicit
// pair counting.

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ehrseq/metrics.hpp"
#include "ehrseq/records.hpp"

namespace oracles {

using Code = std::pair<std::string, ehrseq::ehr::CodeType>;
using CodeList = std::vector<Code>;

/// All permutations of `codes` in lexicographic order of position indices
/// (index 0 first), which is the standard lexicographic rank order.
inline std::vector<std::vector<std::string>> index_permutations(
        const std::vector<std::string>& codes) {
    std::vector<size_t> idx(codes.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<std::vector<std::string>> out;
    do {
        std::vector<std::string> perm;
        perm.reserve(codes.size());
        for (size_t i : idx) perm.push_back(codes[i]);
        out.push_back(std::move(perm));
    } while (std::next_permutation(idx.begin(), idx.end()));
    return out;
}

/// Every valid ordering of one visit (D-block permutations, then O, then P),
/// counted over position permutations.
inline std::vector<CodeList> visit_orderings(const ehrseq::ehr::Visit& v) {
    using ehrseq::ehr::CodeType;
    const auto ds = index_permutations(v.diagnoses);
    const auto os = index_permutations(v.procedures);
    const auto ps = index_permutations(v.prescriptions);
    std::vector<CodeList> out;
    out.reserve(ds.size() * os.size() * ps.size());
    for (const auto& d : ds) {
        for (const auto& o : os) {
            for (const auto& p : ps) {
                CodeList list;
                for (const auto& c : d) list.emplace_back(c, CodeType::Diagnosis);
                for (const auto& c : o) list.emplace_back(c, CodeType::Procedure);
                for (const auto& c : p) list.emplace_back(c, CodeType::Prescription);
                out.push_back(std::move(list));
            }
        }
    }
    return out;
}

/// Cartesian product of per-visit orderings across the patient's visits.
inline std::vector<CodeList> patient_orderings(const ehrseq::ehr::PatientRecord& patient) {
    std::vector<CodeList> acc{CodeList{}};
    for (const auto& v : patient.visits) {
        const auto per_visit = visit_orderings(v);
        std::vector<CodeList> next;
        next.reserve(acc.size() * per_visit.size());
        for (const auto& prefix : acc) {
            for (const auto& slice : per_visit) {
                CodeList joined = prefix;
                joined.insert(joined.end(), slice.begin(), slice.end());
                next.push_back(std::move(joined));
            }
        }
        acc = std::move(next);
    }
    return acc;
}

inline std::set<CodeList> as_set(const std::vector<CodeList>& lists) {
    return {lists.begin(), lists.end()};
}

/// O(n^2) Mann-Whitney AUC: (concordant + 0.5 * tied) / (pos * neg).
inline double pair_auc(const std::vector<ehrseq::metrics::ScoredExample>& examples) {
    int64_t conc2 = 0;  // twice the concordant-plus-half-ties count, kept integral
    int64_t pos = 0, neg = 0;
    for (const auto& a : examples) {
        if (a.label == 1) {
            ++pos;
            for (const auto& b : examples) {
                if (b.label == 1) continue;
                if (a.score > b.score) conc2 += 2;
                else if (a.score == b.score) conc2 += 1;
            }
        } else {
            ++neg;
        }
    }
    return (static_cast<double>(conc2) * 0.5) / (static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace oracles

#include "ehrseq/augment.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "ehrseq/rng.hpp"

using nlohmann::json;

namespace ehrseq::aug {

namespace {

constexpr ehr::CodeType kBlockOrder[3] = {ehr::CodeType::Diagnosis, ehr::CodeType::Procedure,
                                          ehr::CodeType::Prescription};

/// Factorial-number-system digits of rank, least significant first:
/// digits[j] has radix j+2 (weight (j+1)!), so a block of k codes uses k-1
/// digits. Throws if rank >= k!.
std::vector<uint32_t> digits_from_rank(const BigUint& rank, size_t k) {
    std::vector<uint32_t> digits(k > 0 ? k - 1 : 0, 0);
    BigUint r = rank;
    for (size_t j = 0; j + 1 < k; ++j) {
        digits[j] = r.divmod_u32(static_cast<uint32_t>(j + 2));
    }
    if (!r.is_zero()) throw std::out_of_range("unrank_visit: rank out of bounds for block");
    return digits;
}

BigUint rank_from_digits(const std::vector<uint32_t>& digits) {
    BigUint r(0);
    for (size_t j = digits.size(); j-- > 0;) {
        r.mul_u32(static_cast<uint32_t>(j + 2)).add_u32(digits[j]);
    }
    return r;
}

std::vector<uint32_t> random_digits(size_t k, Rng& rng) {
    std::vector<uint32_t> digits(k > 0 ? k - 1 : 0, 0);
    for (size_t j = 0; j + 1 < k; ++j) {
        digits[j] = static_cast<uint32_t>(rng.below(j + 2));
    }
    return digits;
}

/// Applies Lehmer digits as the lexicographic permutation of `block`.
/// The most significant digit selects among all remaining elements.
void append_permuted(const std::vector<std::string>& block, const std::vector<uint32_t>& digits,
                     ehr::CodeType type,
                     std::vector<std::pair<std::string, ehr::CodeType>>& out) {
    const size_t k = block.size();
    if (k == 0) return;
    std::vector<uint32_t> avail(k);
    for (size_t i = 0; i < k; ++i) avail[i] = static_cast<uint32_t>(i);
    for (size_t j = k - 1; j >= 1; --j) {
        const uint32_t c = digits[j - 1];
        if (c > j) throw std::out_of_range("unrank_visit: digit out of range");
        out.emplace_back(block[avail[c]], type);
        avail.erase(avail.begin() + c);
    }
    out.emplace_back(block[avail[0]], type);
}

struct BlockDigits {
    std::vector<uint32_t> d, o, p;
};

VisitRank rank_of(const BlockDigits& bd) {
    return VisitRank{rank_from_digits(bd.d), rank_from_digits(bd.o), rank_from_digits(bd.p)};
}

std::vector<std::pair<std::string, ehr::CodeType>> build_codes(
        const ehr::PatientRecord& patient, const std::vector<BlockDigits>& all) {
    std::vector<std::pair<std::string, ehr::CodeType>> out;
    for (size_t i = 0; i < patient.visits.size(); ++i) {
        const auto& v = patient.visits[i];
        append_permuted(v.diagnoses, all[i].d, ehr::CodeType::Diagnosis, out);
        append_permuted(v.procedures, all[i].o, ehr::CodeType::Procedure, out);
        append_permuted(v.prescriptions, all[i].p, ehr::CodeType::Prescription, out);
    }
    return out;
}

SequenceRank rank_vector(const std::vector<BlockDigits>& all) {
    SequenceRank r;
    r.per_visit.reserve(all.size());
    for (const auto& bd : all) r.per_visit.push_back(rank_of(bd));
    return r;
}

uint64_t factorial_u64(size_t k) {
    uint64_t f = 1;
    for (size_t i = 2; i <= k; ++i) f *= i;
    return f;
}

}  // namespace

BigUint visit_perm_count(const ehr::Visit& visit) {
    BigUint n(1);
    for (auto t : kBlockOrder) {
        const auto& block = visit.block(t);
        for (uint32_t i = 2; i <= block.size(); ++i) n.mul_u32(i);
    }
    return n;
}

SequenceCount total_sequence_count(const ehr::PatientRecord& patient, uint64_t cap) {
    if (patient.visits.empty()) {
        throw std::invalid_argument("total_sequence_count: patient has no visits");
    }
    if (cap == 0) throw std::invalid_argument("total_sequence_count: cap must be positive");
    BigUint total(1);
    const BigUint cap_big(cap);
    for (const auto& v : patient.visits) {
        total = total * visit_perm_count(v);
        if (total >= cap_big) return {total, true};
    }
    return {total, false};
}

std::vector<std::pair<std::string, ehr::CodeType>> unrank_visit(const ehr::Visit& visit,
                                                                const VisitRank& rank) {
    BlockDigits bd;
    bd.d = digits_from_rank(rank.d_rank, visit.diagnoses.size());
    bd.o = digits_from_rank(rank.o_rank, visit.procedures.size());
    bd.p = digits_from_rank(rank.p_rank, visit.prescriptions.size());
    std::vector<std::pair<std::string, ehr::CodeType>> out;
    append_permuted(visit.diagnoses, bd.d, ehr::CodeType::Diagnosis, out);
    append_permuted(visit.procedures, bd.o, ehr::CodeType::Procedure, out);
    append_permuted(visit.prescriptions, bd.p, ehr::CodeType::Prescription, out);
    return out;
}

CodeSequence identity_sequence(const ehr::PatientRecord& patient) {
    CodeSequence seq;
    seq.patient_id = patient.patient_id;
    seq.label = patient.label;
    seq.rank.per_visit.resize(patient.visits.size());
    for (const auto& v : patient.visits) {
        for (auto t : kBlockOrder) {
            for (const auto& code : v.block(t)) seq.codes.emplace_back(code, t);
        }
    }
    return seq;
}

std::vector<CodeSequence> sample_augmentations(const ehr::PatientRecord& patient,
                                               const AugmentConfig& cfg) {
    if (patient.visits.empty()) {
        throw std::invalid_argument("sample_augmentations: patient has no visits");
    }
    if (cfg.alpha < 1) throw std::invalid_argument("sample_augmentations: alpha must be >= 1");

    const size_t n_visits = patient.visits.size();
    Rng rng(mix_seed(cfg.seed, fnv1a64(patient.patient_id)));

    // Enumeration is tractable up to 64*alpha; beyond that rejection sampling
    // collides rarely enough (<= 1/64 per draw).
    const uint64_t enum_cap =
        cfg.alpha > (1ull << 57) ? kDefaultCountCap : 64 * cfg.alpha;
    const SequenceCount counted = total_sequence_count(patient, enum_cap);

    auto make_sequence = [&](const std::vector<BlockDigits>& all) {
        CodeSequence s;
        s.patient_id = patient.patient_id;
        s.label = patient.label;
        s.codes = build_codes(patient, all);
        s.rank = rank_vector(all);
        return s;
    };

    std::vector<CodeSequence> result;
    using CodeList = std::vector<std::pair<std::string, ehr::CodeType>>;
    std::set<CodeList> seen;

    if (!counted.saturated) {
        const uint64_t total = counted.count.to_u64();
        // Odometer over per-block ranks, first visit most significant, so the
        // all-zero (identity) tuple comes first.
        struct BlockRef {
            size_t visit, which;  // which: 0=D 1=O 2=P
            uint64_t max;
        };
        std::vector<BlockRef> blocks;
        for (size_t i = 0; i < n_visits; ++i) {
            const auto& v = patient.visits[i];
            blocks.push_back({i, 0, factorial_u64(v.diagnoses.size())});
            blocks.push_back({i, 1, factorial_u64(v.procedures.size())});
            blocks.push_back({i, 2, factorial_u64(v.prescriptions.size())});
        }
        std::vector<uint64_t> odo(blocks.size(), 0);
        std::vector<CodeSequence> space;
        space.reserve(total);
        while (true) {
            std::vector<BlockDigits> all(n_visits);
            for (size_t b = 0; b < blocks.size(); ++b) {
                const auto& ref = blocks[b];
                const auto& v = patient.visits[ref.visit];
                const size_t k = ref.which == 0   ? v.diagnoses.size()
                                 : ref.which == 1 ? v.procedures.size()
                                                  : v.prescriptions.size();
                auto digits = digits_from_rank(BigUint(odo[b]), k);
                if (ref.which == 0) all[ref.visit].d = std::move(digits);
                else if (ref.which == 1) all[ref.visit].o = std::move(digits);
                else all[ref.visit].p = std::move(digits);
            }
            CodeSequence s = make_sequence(all);
            if (seen.insert(s.codes).second) space.push_back(std::move(s));

            size_t b = blocks.size();
            while (b-- > 0) {
                if (++odo[b] < blocks[b].max) break;
                odo[b] = 0;
                if (b == 0) goto enumerated;
            }
            if (blocks.empty()) break;
        }
    enumerated:
        if (space.size() <= cfg.alpha) return space;  // only available sequences exist

        const uint64_t need = cfg.alpha;
        size_t start = 0;
        if (cfg.include_identity) {
            result.push_back(space[0]);
            start = 1;
        }
        // Partial Fisher-Yates over the remaining candidates.
        std::vector<size_t> idx;
        for (size_t i = start; i < space.size(); ++i) idx.push_back(i);
        for (size_t i = 0; result.size() < need; ++i) {
            const size_t j = i + static_cast<size_t>(rng.below(idx.size() - i));
            std::swap(idx[i], idx[j]);
            result.push_back(space[idx[i]]);
        }
        return result;
    }

    // Huge space: uniform per-block Lehmer digits with rejection of repeats.
    if (cfg.include_identity) {
        std::vector<BlockDigits> all(n_visits);
        for (size_t i = 0; i < n_visits; ++i) {
            const auto& v = patient.visits[i];
            all[i].d.assign(v.diagnoses.empty() ? 0 : v.diagnoses.size() - 1, 0);
            all[i].o.assign(v.procedures.empty() ? 0 : v.procedures.size() - 1, 0);
            all[i].p.assign(v.prescriptions.empty() ? 0 : v.prescriptions.size() - 1, 0);
        }
        CodeSequence s = make_sequence(all);
        seen.insert(s.codes);
        result.push_back(std::move(s));
    }
    // Bounded attempts so degenerate inputs (duplicate codes shrinking the
    // distinct-list space) terminate.
    uint64_t attempts = 64 * (cfg.alpha + 1) + 64;
    while (result.size() < cfg.alpha && attempts-- > 0) {
        std::vector<BlockDigits> all(n_visits);
        for (size_t i = 0; i < n_visits; ++i) {
            const auto& v = patient.visits[i];
            all[i].d = random_digits(v.diagnoses.size(), rng);
            all[i].o = random_digits(v.procedures.size(), rng);
            all[i].p = random_digits(v.prescriptions.size(), rng);
        }
        CodeSequence s = make_sequence(all);
        if (seen.insert(s.codes).second) result.push_back(std::move(s));
    }
    return result;
}

namespace {

json rank_entry_to_json(const BigUint& r) {
    if (r.fits_u64()) {
        const uint64_t v = r.to_u64();
        if (v < (1ull << 53)) return json(v);
    }
    return json(r.to_string());
}

BigUint rank_entry_from_json(const json& j) {
    if (j.is_number_unsigned()) return BigUint(j.get<uint64_t>());
    if (j.is_string()) return BigUint::from_string(j.get<std::string>());
    throw std::runtime_error("bad rank entry");
}

}  // namespace

json sequence_to_json(const CodeSequence& seq) {
    json rank = json::array();
    for (const auto& vr : seq.rank.per_visit) {
        rank.push_back(json::array({rank_entry_to_json(vr.d_rank), rank_entry_to_json(vr.o_rank),
                                    rank_entry_to_json(vr.p_rank)}));
    }
    json codes = json::array();
    json types = json::array();
    for (const auto& [code, type] : seq.codes) {
        codes.push_back(code);
        types.push_back(ehr::to_string(type));
    }
    json j{{"patient_id", seq.patient_id},
           {"rank", std::move(rank)},
           {"codes", std::move(codes)},
           {"types", std::move(types)}};
    if (seq.label) {
        json lbl{{"kind", ehr::to_string(seq.label->kind)}};
        lbl["index_date"] =
            seq.label->index_date ? json(seq.label->index_date->to_string()) : json();
        lbl["event_date"] =
            seq.label->event_date ? json(seq.label->event_date->to_string()) : json();
        j["label"] = std::move(lbl);
    } else {
        j["label"] = nullptr;
    }
    return j;
}

CodeSequence sequence_from_json(const json& j) {
    CodeSequence seq;
    seq.patient_id = j.at("patient_id").get<std::string>();
    for (const auto& vr : j.at("rank")) {
        seq.rank.per_visit.push_back(VisitRank{rank_entry_from_json(vr.at(0)),
                                               rank_entry_from_json(vr.at(1)),
                                               rank_entry_from_json(vr.at(2))});
    }
    const auto& codes = j.at("codes");
    const auto& types = j.at("types");
    if (codes.size() != types.size()) throw std::runtime_error("codes/types length mismatch");
    for (size_t i = 0; i < codes.size(); ++i) {
        const auto type = ehr::code_type_from_string(types[i].get<std::string>());
        if (!type) throw std::runtime_error("bad code type");
        seq.codes.emplace_back(codes[i].get<std::string>(), *type);
    }
    if (j.contains("label") && !j["label"].is_null()) {
        const auto& lj = j["label"];
        ehr::LabelOutcome lbl;
        const auto kind = ehr::label_kind_from_string(lj.at("kind").get<std::string>());
        if (!kind) throw std::runtime_error("bad label kind");
        lbl.kind = *kind;
        if (lj.contains("index_date") && !lj["index_date"].is_null()) {
            lbl.index_date = Date::parse(lj["index_date"].get<std::string>()).value();
        }
        if (lj.contains("event_date") && !lj["event_date"].is_null()) {
            lbl.event_date = Date::parse(lj["event_date"].get<std::string>()).value();
        }
        seq.label = lbl;
    }
    return seq;
}

std::vector<CodeSequence> load_sequences_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<CodeSequence> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(sequence_from_json(json::parse(line)));
    }
    return out;
}

void save_sequences_jsonl(const std::vector<CodeSequence>& seqs, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& s : seqs) out << sequence_to_json(s).dump() << "\n";
}

}  // namespace ehrseq::aug

#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "ehrseq/date.hpp"
#include "json.hpp"

namespace ehrseq::ehr {

enum class CodeType { Diagnosis, Procedure, Prescription };

const char* to_string(CodeType t);
std::optional<CodeType> code_type_from_string(std::string_view s);

/// One timestamped medical code as it appears in the source feed.
struct RawRecord {
    std::string patient_id;
    Date date;
    std::string code;
    CodeType code_type;
};

/// All of a patient's codes sharing one calendar date, partitioned by type.
/// List order within each block is ingestion order.
struct Visit {
    Date date;
    std::vector<std::string> diagnoses;
    std::vector<std::string> procedures;
    std::vector<std::string> prescriptions;

    const std::vector<std::string>& block(CodeType t) const;
    std::vector<std::string>& block(CodeType t);
    size_t code_count() const {
        return diagnoses.size() + procedures.size() + prescriptions.size();
    }
};

enum class LabelKind { Case, Control, Excluded };

const char* to_string(LabelKind k);
std::optional<LabelKind> label_kind_from_string(std::string_view s);

struct LabelOutcome {
    LabelKind kind = LabelKind::Excluded;
    std::optional<Date> index_date;
    std::optional<Date> event_date;
};

struct PatientRecord {
    std::string patient_id;
    std::vector<Visit> visits;  // strictly ascending by date
    std::optional<LabelOutcome> label;
};

struct ParseResult {
    std::vector<RawRecord> records;
    size_t skipped = 0;
};

/// Reads JSON Lines records. In lenient mode malformed lines are skipped and
/// counted; in strict mode the first malformed line throws. A stream that
/// fails mid-read (not EOF) throws in either mode.
ParseResult parse_records(std::istream& in, bool strict = false);

/// Groups records into per-patient, date-sorted visits. Codes keep ingestion
/// order within each (patient, date, type) block; exact duplicate records
/// collapse to one. Patients come out in first-appearance order.
std::vector<PatientRecord> group_visits(const std::vector<RawRecord>& records);

/// Index/event code sets for label derivation, loaded from the label config
/// JSON ({"index_codes": [...], "event_codes": [...]}).
struct LabelConfig {
    std::vector<std::string> index_codes;
    std::vector<std::string> event_codes;

    std::unordered_set<std::string> index_set() const;
    std::unordered_set<std::string> event_set() const;

    static LabelConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Label from the first index prescription: no index prescription -> Excluded;
/// earliest on-or-after-index event at <= 7 days -> Excluded, at 8..365 days
/// -> Case; otherwise Control. Events before the index date are ignored.
LabelOutcome derive_label(const PatientRecord& patient,
                          const std::unordered_set<std::string>& index_codes,
                          const std::unordered_set<std::string>& event_codes);

nlohmann::json patient_to_json(const PatientRecord& p);
PatientRecord patient_from_json(const nlohmann::json& j);

std::vector<PatientRecord> load_patients_jsonl(const std::string& path);
void save_patients_jsonl(const std::vector<PatientRecord>& patients, const std::string& path);

nlohmann::json record_to_json(const RawRecord& r);
void save_records_jsonl(const std::vector<RawRecord>& records, const std::string& path);

}  // namespace ehrseq::ehr

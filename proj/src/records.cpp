#include "ehrseq/records.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <stdexcept>

using nlohmann::json;

namespace ehrseq::ehr {

const char* to_string(CodeType t) {
    switch (t) {
        case CodeType::Diagnosis: return "Diagnosis";
        case CodeType::Procedure: return "Procedure";
        case CodeType::Prescription: return "Prescription";
    }
    return "?";
}

std::optional<CodeType> code_type_from_string(std::string_view s) {
    if (s == "Diagnosis") return CodeType::Diagnosis;
    if (s == "Procedure") return CodeType::Procedure;
    if (s == "Prescription") return CodeType::Prescription;
    return std::nullopt;
}

const char* to_string(LabelKind k) {
    switch (k) {
        case LabelKind::Case: return "Case";
        case LabelKind::Control: return "Control";
        case LabelKind::Excluded: return "Excluded";
    }
    return "?";
}

std::optional<LabelKind> label_kind_from_string(std::string_view s) {
    if (s == "Case") return LabelKind::Case;
    if (s == "Control") return LabelKind::Control;
    if (s == "Excluded") return LabelKind::Excluded;
    return std::nullopt;
}

const std::vector<std::string>& Visit::block(CodeType t) const {
    switch (t) {
        case CodeType::Diagnosis: return diagnoses;
        case CodeType::Procedure: return procedures;
        case CodeType::Prescription: return prescriptions;
    }
    return diagnoses;
}

std::vector<std::string>& Visit::block(CodeType t) {
    switch (t) {
        case CodeType::Diagnosis: return diagnoses;
        case CodeType::Procedure: return procedures;
        case CodeType::Prescription: return prescriptions;
    }
    return diagnoses;
}

namespace {

std::optional<RawRecord> record_from_line(const std::string& line) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    if (!j.contains("patient_id") || !j["patient_id"].is_string()) return std::nullopt;
    if (!j.contains("date") || !j["date"].is_string()) return std::nullopt;
    if (!j.contains("code") || !j["code"].is_string()) return std::nullopt;
    if (!j.contains("code_type") || !j["code_type"].is_string()) return std::nullopt;

    RawRecord r;
    r.patient_id = j["patient_id"].get<std::string>();
    r.code = j["code"].get<std::string>();
    if (r.patient_id.empty() || r.code.empty()) return std::nullopt;

    const auto date = Date::parse(j["date"].get<std::string>());
    if (!date) return std::nullopt;
    r.date = *date;

    const auto type = code_type_from_string(j["code_type"].get<std::string>());
    if (!type) return std::nullopt;
    r.code_type = *type;
    return r;
}

}  // namespace

ParseResult parse_records(std::istream& in, bool strict) {
    ParseResult out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto rec = record_from_line(line);
        if (!rec) {
            if (strict) {
                throw std::runtime_error("malformed record at line " + std::to_string(lineno));
            }
            ++out.skipped;
            continue;
        }
        out.records.push_back(std::move(*rec));
    }
    if (in.bad()) throw std::runtime_error("record stream failed mid-read");
    return out;
}

std::vector<PatientRecord> group_visits(const std::vector<RawRecord>& records) {
    // patient -> date -> visit, preserving first-appearance patient order.
    std::vector<std::string> patient_order;
    std::map<std::string, std::map<int32_t, Visit>> by_patient;
    std::set<std::tuple<std::string, int32_t, std::string, int>> seen;

    for (const auto& r : records) {
        if (!seen.insert({r.patient_id, r.date.days_since_epoch(), r.code,
                          static_cast<int>(r.code_type)}).second) {
            continue;  // exact duplicate row
        }
        auto it = by_patient.find(r.patient_id);
        if (it == by_patient.end()) {
            patient_order.push_back(r.patient_id);
            it = by_patient.emplace(r.patient_id, std::map<int32_t, Visit>{}).first;
        }
        Visit& v = it->second[r.date.days_since_epoch()];
        v.date = r.date;
        v.block(r.code_type).push_back(r.code);
    }

    std::vector<PatientRecord> out;
    out.reserve(patient_order.size());
    for (const auto& pid : patient_order) {
        PatientRecord p;
        p.patient_id = pid;
        for (auto& [day, visit] : by_patient[pid]) p.visits.push_back(std::move(visit));
        out.push_back(std::move(p));
    }
    return out;
}

std::unordered_set<std::string> LabelConfig::index_set() const {
    return {index_codes.begin(), index_codes.end()};
}

std::unordered_set<std::string> LabelConfig::event_set() const {
    return {event_codes.begin(), event_codes.end()};
}

LabelConfig LabelConfig::from_json(const json& j) {
    LabelConfig cfg;
    cfg.index_codes = j.at("index_codes").get<std::vector<std::string>>();
    cfg.event_codes = j.at("event_codes").get<std::vector<std::string>>();
    if (cfg.index_codes.empty() || cfg.event_codes.empty()) {
        throw std::runtime_error("label config: index_codes and event_codes must be nonempty");
    }
    return cfg;
}

json LabelConfig::to_json() const {
    return json{{"index_codes", index_codes}, {"event_codes", event_codes}};
}

LabelOutcome derive_label(const PatientRecord& patient,
                          const std::unordered_set<std::string>& index_codes,
                          const std::unordered_set<std::string>& event_codes) {
    if (index_codes.empty() || event_codes.empty()) {
        throw std::invalid_argument("derive_label: code sets must be nonempty");
    }

    LabelOutcome out;
    std::optional<Date> index_date;
    for (const auto& v : patient.visits) {
        for (const auto& code : v.prescriptions) {
            if (index_codes.count(code)) {
                index_date = v.date;
                break;
            }
        }
        if (index_date) break;
    }
    if (!index_date) {
        out.kind = LabelKind::Excluded;
        return out;
    }
    out.index_date = index_date;

    // Earliest event on or after the index date; TF events live in the
    // diagnosis/procedure blocks.
    std::optional<Date> event_date;
    for (const auto& v : patient.visits) {
        if (v.date < *index_date) continue;
        bool hit = false;
        for (const auto& code : v.diagnoses) {
            if (event_codes.count(code)) { hit = true; break; }
        }
        if (!hit) {
            for (const auto& code : v.procedures) {
                if (event_codes.count(code)) { hit = true; break; }
            }
        }
        if (hit) {
            event_date = v.date;
            break;
        }
    }

    if (!event_date) {
        out.kind = LabelKind::Control;
        return out;
    }
    const int32_t delta = *event_date - *index_date;
    if (delta <= 7) {
        out.kind = LabelKind::Excluded;
        out.event_date = event_date;
    } else if (delta <= 365) {
        out.kind = LabelKind::Case;
        out.event_date = event_date;
    } else {
        out.kind = LabelKind::Control;
    }
    return out;
}

json patient_to_json(const PatientRecord& p) {
    json visits = json::array();
    for (const auto& v : p.visits) {
        visits.push_back(json{{"date", v.date.to_string()},
                              {"diagnoses", v.diagnoses},
                              {"procedures", v.procedures},
                              {"prescriptions", v.prescriptions}});
    }
    json j{{"patient_id", p.patient_id}, {"visits", std::move(visits)}};
    if (p.label) {
        json lbl{{"kind", to_string(p.label->kind)}};
        lbl["index_date"] = p.label->index_date ? json(p.label->index_date->to_string()) : json();
        lbl["event_date"] = p.label->event_date ? json(p.label->event_date->to_string()) : json();
        j["label"] = std::move(lbl);
    } else {
        j["label"] = nullptr;
    }
    return j;
}

namespace {

Date parse_date_or_throw(const std::string& s) {
    const auto d = Date::parse(s);
    if (!d) throw std::runtime_error("bad date: " + s);
    return *d;
}

}  // namespace

PatientRecord patient_from_json(const json& j) {
    PatientRecord p;
    p.patient_id = j.at("patient_id").get<std::string>();
    for (const auto& vj : j.at("visits")) {
        Visit v;
        v.date = parse_date_or_throw(vj.at("date").get<std::string>());
        v.diagnoses = vj.at("diagnoses").get<std::vector<std::string>>();
        v.procedures = vj.at("procedures").get<std::vector<std::string>>();
        v.prescriptions = vj.at("prescriptions").get<std::vector<std::string>>();
        p.visits.push_back(std::move(v));
    }
    if (j.contains("label") && !j["label"].is_null()) {
        const auto& lj = j["label"];
        LabelOutcome lbl;
        const auto kind = label_kind_from_string(lj.at("kind").get<std::string>());
        if (!kind) throw std::runtime_error("bad label kind");
        lbl.kind = *kind;
        if (lj.contains("index_date") && !lj["index_date"].is_null()) {
            lbl.index_date = parse_date_or_throw(lj["index_date"].get<std::string>());
        }
        if (lj.contains("event_date") && !lj["event_date"].is_null()) {
            lbl.event_date = parse_date_or_throw(lj["event_date"].get<std::string>());
        }
        p.label = lbl;
    }
    return p;
}

std::vector<PatientRecord> load_patients_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<PatientRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(patient_from_json(json::parse(line)));
    }
    return out;
}

void save_patients_jsonl(const std::vector<PatientRecord>& patients, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& p : patients) out << patient_to_json(p).dump() << "\n";
}

json record_to_json(const RawRecord& r) {
    return json{{"patient_id", r.patient_id},
                {"date", r.date.to_string()},
                {"code", r.code},
                {"code_type", to_string(r.code_type)}};
}

void save_records_jsonl(const std::vector<RawRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& r : records) out << record_to_json(r).dump() << "\n";
}

}  // namespace ehrseq::ehr

#pragma once

#include <string>
#include <vector>

#include "ehrseq/records.hpp"

namespace fixtures {

inline ehrseq::Date day(int32_t offset) {
    return ehrseq::Date::from_civil(2010, 1, 1).plus_days(offset);
}

inline ehrseq::ehr::Visit make_visit(int32_t day_offset, std::vector<std::string> diagnoses,
                                     std::vector<std::string> procedures = {},
                                     std::vector<std::string> prescriptions = {}) {
    ehrseq::ehr::Visit v;
    v.date = day(day_offset);
    v.diagnoses = std::move(diagnoses);
    v.procedures = std::move(procedures);
    v.prescriptions = std::move(prescriptions);
    return v;
}

inline ehrseq::ehr::PatientRecord make_patient(std::string id,
                                               std::vector<ehrseq::ehr::Visit> visits) {
    ehrseq::ehr::PatientRecord p;
    p.patient_id = std::move(id);
    p.visits = std::move(visits);
    return p;
}

}  // namespace fixtures

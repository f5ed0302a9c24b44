#include <algorithm>
#include <set>
#include <sstream>
#include <tuple>

#include "doctest.h"
#include "ehrseq/records.hpp"
#include "ehrseq/rng.hpp"
#include "../support/fixtures.hpp"

using namespace ehrseq;
using namespace ehrseq::ehr;
using fixtures::day;
using fixtures::make_patient;
using fixtures::make_visit;

TEST_CASE("date parsing accepts real days and rejects bad ones") {
    CHECK(Date::parse("2010-01-02").has_value());
    CHECK(Date::parse("2012-02-29").has_value());   // leap day
    CHECK_FALSE(Date::parse("2011-02-29").has_value());
    CHECK_FALSE(Date::parse("2010-13-01").has_value());
    CHECK_FALSE(Date::parse("2010-00-10").has_value());
    CHECK_FALSE(Date::parse("2010-1-2").has_value());
    CHECK_FALSE(Date::parse("garbage").has_value());
    CHECK(Date::parse("2010-03-01")->to_string() == "2010-03-01");
    CHECK(*Date::parse("2010-01-31") - *Date::parse("2010-01-01") == 30);
}

TEST_CASE("parse_records maps a well-formed line") {
    std::istringstream in(
        R"({"patient_id":"p1","date":"2010-01-02","code":"C1","code_type":"Diagnosis"})" "\n");
    const auto result = parse_records(in);
    REQUIRE(result.records.size() == 1);
    CHECK(result.skipped == 0);
    CHECK(result.records[0].patient_id == "p1");
    CHECK(result.records[0].date.to_string() == "2010-01-02");
    CHECK(result.records[0].code == "C1");
    CHECK(result.records[0].code_type == CodeType::Diagnosis);
}

TEST_CASE("parse_records on empty input") {
    std::istringstream in("");
    const auto result = parse_records(in);
    CHECK(result.records.empty());
    CHECK(result.skipped == 0);
}

TEST_CASE("unknown code_type is skipped and counted in lenient mode") {
    const std::string fixture =
        R"({"patient_id":"p1","date":"2010-01-02","code":"C1","code_type":"Diagnosis"})" "\n"
        R"({"patient_id":"p1","date":"2010-01-03","code":"C2","code_type":"Rx"})" "\n"
        R"({"patient_id":"p1","date":"2010-01-04","code":"C3","code_type":"Prescription"})" "\n";
    std::istringstream in(fixture);
    const auto result = parse_records(in);
    CHECK(result.records.size() == 2);
    CHECK(result.skipped == 1);

    std::istringstream again(fixture);
    CHECK_THROWS_AS(parse_records(again, true), std::runtime_error);
}

TEST_CASE("malformed variants are skipped") {
    std::istringstream in(
        "not json\n"
        R"({"patient_id":"","date":"2010-01-02","code":"C1","code_type":"Diagnosis"})" "\n"
        R"({"patient_id":"p1","date":"2010-02-30","code":"C1","code_type":"Diagnosis"})" "\n"
        R"({"patient_id":"p1","date":"2010-01-02","code":"","code_type":"Diagnosis"})" "\n"
        R"({"patient_id":"p1","date":"2010-01-02","code_type":"Diagnosis"})" "\n");
    const auto result = parse_records(in);
    CHECK(result.records.empty());
    CHECK(result.skipped == 5);
}

namespace {

RawRecord rec(const std::string& pid, int32_t d, const std::string& code, CodeType t) {
    return RawRecord{pid, day(d), code, t};
}

}  // namespace

TEST_CASE("group_visits partitions one date by type") {
    const auto patients = group_visits({rec("p1", 1, "D1", CodeType::Diagnosis),
                                        rec("p1", 1, "D2", CodeType::Diagnosis),
                                        rec("p1", 1, "P1", CodeType::Prescription)});
    REQUIRE(patients.size() == 1);
    REQUIRE(patients[0].visits.size() == 1);
    const auto& v = patients[0].visits[0];
    CHECK(v.diagnoses == std::vector<std::string>{"D1", "D2"});
    CHECK(v.procedures.empty());
    CHECK(v.prescriptions == std::vector<std::string>{"P1"});
}

TEST_CASE("group_visits sorts visits by date whatever the input order") {
    const auto patients = group_visits({rec("p1", 9, "D1", CodeType::Diagnosis),
                                        rec("p1", 2, "D2", CodeType::Diagnosis)});
    REQUIRE(patients.size() == 1);
    REQUIRE(patients[0].visits.size() == 2);
    CHECK(patients[0].visits[0].date == day(2));
    CHECK(patients[0].visits[1].date == day(9));
}

TEST_CASE("exact duplicate records collapse to one") {
    const auto patients = group_visits({rec("p1", 1, "D1", CodeType::Diagnosis),
                                        rec("p1", 1, "D1", CodeType::Diagnosis),
                                        rec("p1", 1, "D1", CodeType::Procedure)});
    REQUIRE(patients.size() == 1);
    const auto& v = patients[0].visits[0];
    CHECK(v.diagnoses == std::vector<std::string>{"D1"});
    CHECK(v.procedures == std::vector<std::string>{"D1"});  // different type, kept
}

TEST_CASE("grouping conserves the deduplicated code multiset and visit dates ascend") {
    Rng rng(99);
    std::vector<RawRecord> records;
    for (int i = 0; i < 200; ++i) {
        records.push_back(rec("p" + std::to_string(rng.below(5)),
                              static_cast<int32_t>(rng.below(10)),
                              "C" + std::to_string(rng.below(8)),
                              static_cast<CodeType>(rng.below(3))));
    }
    using Key = std::tuple<std::string, int32_t, std::string, int>;
    std::set<Key> input_set;
    for (const auto& r : records) {
        input_set.insert({r.patient_id, r.date.days_since_epoch(), r.code,
                          static_cast<int>(r.code_type)});
    }
    std::set<Key> output_set;
    for (const auto& p : group_visits(records)) {
        Date prev = day(-1000);
        for (const auto& v : p.visits) {
            CHECK(v.date > prev);  // strict monotonicity
            prev = v.date;
            CHECK(v.code_count() > 0);
            for (auto t : {CodeType::Diagnosis, CodeType::Procedure, CodeType::Prescription}) {
                for (const auto& code : v.block(t)) {
                    const bool fresh = output_set
                            .insert({p.patient_id, v.date.days_since_epoch(), code,
                                     static_cast<int>(t)})
                            .second;
                    CHECK(fresh);  // no duplicates survive
                }
            }
        }
    }
    CHECK(input_set == output_set);
}

namespace {

PatientRecord labeled_patient(std::vector<int32_t> event_days, bool with_index = true,
                              int32_t index_day = 0) {
    std::vector<Visit> visits;
    visits.push_back(make_visit(-30, {"D0"}));
    if (with_index) visits.push_back(make_visit(index_day, {}, {}, {"RX"}));
    for (int32_t d : event_days) visits.push_back(make_visit(d, {"EV"}));
    std::sort(visits.begin(), visits.end(),
              [](const Visit& a, const Visit& b) { return a.date < b.date; });
    return make_patient("p1", std::move(visits));
}

const std::unordered_set<std::string> kIndex{"RX"};
const std::unordered_set<std::string> kEvent{"EV"};

}  // namespace

TEST_CASE("derive_label core cases") {
    CHECK(derive_label(labeled_patient({100}), kIndex, kEvent).kind == LabelKind::Case);
    CHECK(derive_label(labeled_patient({5}), kIndex, kEvent).kind == LabelKind::Excluded);
    CHECK(derive_label(labeled_patient({}), kIndex, kEvent).kind == LabelKind::Control);
    CHECK(derive_label(labeled_patient({400}), kIndex, kEvent).kind == LabelKind::Control);
    CHECK(derive_label(labeled_patient({}, false), kIndex, kEvent).kind == LabelKind::Excluded);
}

TEST_CASE("derive_label boundary days") {
    CHECK(derive_label(labeled_patient({7}), kIndex, kEvent).kind == LabelKind::Excluded);
    CHECK(derive_label(labeled_patient({8}), kIndex, kEvent).kind == LabelKind::Case);
    CHECK(derive_label(labeled_patient({365}), kIndex, kEvent).kind == LabelKind::Case);
    CHECK(derive_label(labeled_patient({366}), kIndex, kEvent).kind == LabelKind::Control);
    CHECK(derive_label(labeled_patient({0}), kIndex, kEvent).kind == LabelKind::Excluded);
}

TEST_CASE("events before the index date are ignored") {
    auto p = labeled_patient({});
    p.visits.insert(p.visits.begin(), make_visit(-200, {"EV"}));
    CHECK(derive_label(p, kIndex, kEvent).kind == LabelKind::Control);

    // earliest qualifying event wins over a later one
    auto q = labeled_patient({200, 50});
    const auto out = derive_label(q, kIndex, kEvent);
    CHECK(out.kind == LabelKind::Case);
    CHECK(*out.event_date == day(50));
    CHECK(*out.index_date == day(0));
}

TEST_CASE("index code only counts inside the prescriptions block") {
    auto p = make_patient("p1", {make_visit(0, {"RX"})});  // index code as a diagnosis
    CHECK(derive_label(p, kIndex, kEvent).kind == LabelKind::Excluded);
    // event codes only count in diagnoses or procedures
    auto q = make_patient("q1", {make_visit(0, {}, {}, {"RX"}), make_visit(100, {}, {}, {"EV"})});
    CHECK(derive_label(q, kIndex, kEvent).kind == LabelKind::Control);
}

TEST_CASE("derive_label is independent of raw record order") {
    Rng rng(41);
    std::vector<RawRecord> records;
    records.push_back(rec("p1", 0, "RX", CodeType::Prescription));
    records.push_back(rec("p1", 40, "EV", CodeType::Diagnosis));
    for (int i = 0; i < 30; ++i) {
        records.push_back(rec("p1", static_cast<int32_t>(rng.below(500)),
                              "C" + std::to_string(rng.below(10)),
                              static_cast<CodeType>(rng.below(3))));
    }
    const auto baseline = derive_label(group_visits(records)[0], kIndex, kEvent);
    for (int trial = 0; trial < 20; ++trial) {
        rng.shuffle(records);
        const auto patients = group_visits(records);
        REQUIRE(patients.size() == 1);
        const auto out = derive_label(patients[0], kIndex, kEvent);
        CHECK(out.kind == baseline.kind);
        CHECK(out.index_date == baseline.index_date);
        CHECK(out.event_date == baseline.event_date);
    }
}

TEST_CASE("patient json round trip") {
    auto p = labeled_patient({100});
    p.label = derive_label(p, kIndex, kEvent);
    const auto back = patient_from_json(patient_to_json(p));
    CHECK(back.patient_id == p.patient_id);
    REQUIRE(back.visits.size() == p.visits.size());
    for (size_t i = 0; i < p.visits.size(); ++i) {
        CHECK(back.visits[i].date == p.visits[i].date);
        CHECK(back.visits[i].diagnoses == p.visits[i].diagnoses);
        CHECK(back.visits[i].prescriptions == p.visits[i].prescriptions);
    }
    REQUIRE(back.label.has_value());
    CHECK(back.label->kind == LabelKind::Case);
    CHECK(*back.label->index_date == *p.label->index_date);
}

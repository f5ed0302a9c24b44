#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ehrseq/records.hpp"
#include "json.hpp"

namespace ehrseq::synth {

/// Corpus generator settings. The label signal is the co-occurrence of a
/// signal pair inside one visit of the observation window; it never depends
/// on within-visit order, so any permutation of a generated record keeps its
/// label.
struct SynthConfig {
    int n_patients = 2500;
    double index_fraction = 0.2;     // tail of the population gets the index drug
    double mean_visits = 5.0;        // shifted-geometric mean
    int max_visits = 40;
    double codes_per_visit_mean = 2.7;  // zero-truncated Poisson target
    int max_codes_per_visit = 8;
    int n_diag_codes = 84;
    int n_proc_codes = 40;
    int n_rx_codes = 60;
    int n_themes = 4;
    double theme_affinity = 0.7;     // chance a filler code comes from the patient theme
    std::vector<std::pair<std::string, std::string>> signal_pairs = {{"D_SIG_A", "D_SIG_B"}};
    double signal_prob = 0.40;       // plant the full pair
    double decoy_prob = 0.30;        // plant one half of a pair
    double noise = 0.10;             // label flip probability
    double early_event_prob = 0.04;  // event within 7 days -> Excluded
    double event_filler_prob = 0.04; // event codes as benign history outside the window
    std::string index_code = "RX_INDEX";
    std::vector<std::string> event_codes = {"EV_TF"};
    uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    static SynthConfig from_json(const nlohmann::json& j);
};

struct SynthCorpus {
    std::vector<ehr::PatientRecord> pretrain_pool;  // no index prescriptions
    std::vector<ehr::PatientRecord> labeled_pool;   // labels attached via derive_label
    ehr::LabelConfig label_config;
};

SynthCorpus gen_corpus(const SynthConfig& cfg);

/// Flattens grouped patients back to raw record rows (for the record feed).
std::vector<ehr::RawRecord> to_records(const std::vector<ehr::PatientRecord>& patients);

}  // namespace ehrseq::synth

#include "ehrseq/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <unordered_set>

#include "ehrseq/rng.hpp"

using nlohmann::json;

namespace ehrseq::synth {

void SynthConfig::validate() const {
    if (n_patients < 1) throw std::invalid_argument("synth: n_patients must be positive");
    if (index_fraction < 0.0 || index_fraction > 1.0) {
        throw std::invalid_argument("synth: index_fraction in [0,1]");
    }
    if (mean_visits < 1.0) throw std::invalid_argument("synth: mean_visits must be >= 1");
    if (max_visits < 1) throw std::invalid_argument("synth: max_visits must be >= 1");
    if (codes_per_visit_mean < 1.0) {
        throw std::invalid_argument("synth: codes_per_visit_mean must be >= 1");
    }
    if (max_codes_per_visit < 2) {
        throw std::invalid_argument("synth: max_codes_per_visit must fit a signal pair");
    }
    if (n_diag_codes < n_themes || n_proc_codes < n_themes || n_rx_codes < n_themes) {
        throw std::invalid_argument("synth: each code vocabulary needs >= n_themes codes");
    }
    if (n_themes < 1) throw std::invalid_argument("synth: n_themes must be >= 1");
    if (theme_affinity < 0.0 || theme_affinity > 1.0) {
        throw std::invalid_argument("synth: theme_affinity in [0,1]");
    }
    if (signal_pairs.empty()) throw std::invalid_argument("synth: need a signal pair");
    for (const auto& [a, b] : signal_pairs) {
        if (a == b || a.empty() || b.empty()) {
            throw std::invalid_argument("synth: signal pair codes must be distinct and nonempty");
        }
    }
    if (signal_prob < 0.0 || decoy_prob < 0.0 || signal_prob + decoy_prob > 1.0) {
        throw std::invalid_argument("synth: signal_prob + decoy_prob must stay within [0,1]");
    }
    if (noise < 0.0 || noise >= 0.5) throw std::invalid_argument("synth: noise in [0,0.5)");
    if (early_event_prob < 0.0 || early_event_prob > 0.5) {
        throw std::invalid_argument("synth: early_event_prob in [0,0.5]");
    }
    if (event_filler_prob < 0.0 || event_filler_prob > 0.5) {
        throw std::invalid_argument("synth: event_filler_prob in [0,0.5]");
    }
    if (index_code.empty() || event_codes.empty()) {
        throw std::invalid_argument("synth: index/event codes must be set");
    }
}

json SynthConfig::to_json() const {
    json pairs = json::array();
    for (const auto& [a, b] : signal_pairs) pairs.push_back(json::array({a, b}));
    return json{{"n_patients", n_patients},
                {"index_fraction", index_fraction},
                {"mean_visits", mean_visits},
                {"max_visits", max_visits},
                {"codes_per_visit_mean", codes_per_visit_mean},
                {"max_codes_per_visit", max_codes_per_visit},
                {"n_diag_codes", n_diag_codes},
                {"n_proc_codes", n_proc_codes},
                {"n_rx_codes", n_rx_codes},
                {"n_themes", n_themes},
                {"theme_affinity", theme_affinity},
                {"signal_pairs", std::move(pairs)},
                {"signal_prob", signal_prob},
                {"decoy_prob", decoy_prob},
                {"noise", noise},
                {"early_event_prob", early_event_prob},
                {"event_filler_prob", event_filler_prob},
                {"index_code", index_code},
                {"event_codes", event_codes},
                {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const json& j) {
    SynthConfig c;
    c.n_patients = j.value("n_patients", c.n_patients);
    c.index_fraction = j.value("index_fraction", c.index_fraction);
    c.mean_visits = j.value("mean_visits", c.mean_visits);
    c.max_visits = j.value("max_visits", c.max_visits);
    c.codes_per_visit_mean = j.value("codes_per_visit_mean", c.codes_per_visit_mean);
    c.max_codes_per_visit = j.value("max_codes_per_visit", c.max_codes_per_visit);
    c.n_diag_codes = j.value("n_diag_codes", c.n_diag_codes);
    c.n_proc_codes = j.value("n_proc_codes", c.n_proc_codes);
    c.n_rx_codes = j.value("n_rx_codes", c.n_rx_codes);
    c.n_themes = j.value("n_themes", c.n_themes);
    c.theme_affinity = j.value("theme_affinity", c.theme_affinity);
    if (j.contains("signal_pairs")) {
        c.signal_pairs.clear();
        for (const auto& p : j["signal_pairs"]) {
            c.signal_pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
        }
    }
    c.signal_prob = j.value("signal_prob", c.signal_prob);
    c.decoy_prob = j.value("decoy_prob", c.decoy_prob);
    c.noise = j.value("noise", c.noise);
    c.early_event_prob = j.value("early_event_prob", c.early_event_prob);
    c.event_filler_prob = j.value("event_filler_prob", c.event_filler_prob);
    c.index_code = j.value("index_code", c.index_code);
    if (j.contains("event_codes")) c.event_codes = j["event_codes"].get<std::vector<std::string>>();
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

namespace {

std::string code_name(char prefix, int idx) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%c%03d", prefix, idx);
    return buf;
}

/// Solves lambda so the zero-truncated Poisson mean lambda/(1-e^-lambda)
/// matches the target.
double solve_truncated_poisson_lambda(double target_mean) {
    double lo = 1e-6, hi = target_mean;
    for (int it = 0; it < 80; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double mean = mid / (1.0 - std::exp(-mid));
        if (mean < target_mean) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

int poisson_draw(double lambda, Rng& rng) {
    const double limit = std::exp(-lambda);
    int k = 0;
    double p = 1.0;
    do {
        ++k;
        p *= rng.unit();
    } while (p > limit);
    return k - 1;
}

struct Generator {
    const SynthConfig& cfg;
    double filler_lambda;
    std::unordered_set<std::string> event_set;

    explicit Generator(const SynthConfig& c) : cfg(c) {
        // Planted codes (pairs, decoys, index, event) inflate codes-per-visit;
        // aim the filler distribution below the target to compensate.
        const double extras_per_patient = cfg.signal_prob * 2.0 + cfg.decoy_prob +
                                          cfg.index_fraction * 1.5;
        double filler_target = cfg.codes_per_visit_mean - extras_per_patient / cfg.mean_visits;
        if (filler_target < 1.05) filler_target = 1.05;
        filler_lambda = solve_truncated_poisson_lambda(filler_target);
        event_set.insert(cfg.event_codes.begin(), cfg.event_codes.end());
    }

    int draw_visit_count(Rng& rng) const {
        if (cfg.mean_visits <= 1.0) return 1;
        const double p = 1.0 / cfg.mean_visits;
        double u = rng.unit();
        if (u <= 0.0) u = 0x1.0p-53;
        const int extra = static_cast<int>(std::floor(std::log(u) / std::log(1.0 - p)));
        return std::min(cfg.max_visits, 1 + std::max(0, extra));
    }

    int draw_code_count(Rng& rng) const {
        int k = 0;
        while (k < 1) k = poisson_draw(filler_lambda, rng);
        return std::min(k, cfg.max_codes_per_visit);
    }

    std::string draw_filler(ehr::CodeType type, int theme, bool event_allowed, Rng& rng) const {
        if (type == ehr::CodeType::Diagnosis && event_allowed &&
            rng.unit() < cfg.event_filler_prob) {
            return cfg.event_codes[rng.below(cfg.event_codes.size())];
        }
        char prefix = 'D';
        int vocab = cfg.n_diag_codes;
        if (type == ehr::CodeType::Procedure) {
            prefix = 'O';
            vocab = cfg.n_proc_codes;
        } else if (type == ehr::CodeType::Prescription) {
            prefix = 'R';
            vocab = cfg.n_rx_codes;
        }
        if (rng.unit() < cfg.theme_affinity) {
            const int slice = vocab / cfg.n_themes;
            const int start = theme * slice;
            return code_name(prefix, start + static_cast<int>(rng.below(slice)));
        }
        return code_name(prefix, static_cast<int>(rng.below(vocab)));
    }

    ehr::PatientRecord generate(const std::string& pid, bool labeled, Rng& rng) const {
        ehr::PatientRecord p;
        p.patient_id = pid;

        const int n_visits = draw_visit_count(rng);
        std::vector<Date> dates;
        Date d = Date::from_civil(2008, 1, 1).plus_days(static_cast<int32_t>(rng.below(1461)));
        for (int i = 0; i < n_visits; ++i) {
            dates.push_back(d);
            d = d.plus_days(5 + static_cast<int32_t>(rng.below(56)));
        }

        const int index_pos = labeled ? static_cast<int>(rng.below(n_visits)) : -1;
        const Date index_date = labeled ? dates[index_pos] : Date();
        const Date cutoff = labeled ? index_date.plus_days(365) : Date();

        auto event_allowed_at = [&](Date when) {
            // keep the observation window clean of stray event codes
            if (!labeled) return true;
            return when < index_date || when > cutoff;
        };

        const int theme = static_cast<int>(rng.below(cfg.n_themes));
        std::map<int32_t, ehr::Visit> visits;
        // duplicate rows within a (visit, type) block would be collapsed at
        // ingestion, so redraw instead of emitting them
        auto push_unique = [&](ehr::Visit& v, ehr::CodeType type, bool event_allowed) {
            auto& block = v.block(type);
            for (int attempt = 0; attempt < 8; ++attempt) {
                auto code = draw_filler(type, theme, event_allowed, rng);
                if (std::find(block.begin(), block.end(), code) == block.end()) {
                    block.push_back(std::move(code));
                    return;
                }
            }
        };
        for (int i = 0; i < n_visits; ++i) {
            ehr::Visit v;
            v.date = dates[i];
            const int n_codes = draw_code_count(rng);
            for (int c = 0; c < n_codes; ++c) {
                const double u = rng.unit();
                const ehr::CodeType type = u < 0.5   ? ehr::CodeType::Diagnosis
                                           : u < 0.7 ? ehr::CodeType::Procedure
                                                     : ehr::CodeType::Prescription;
                push_unique(v, type, event_allowed_at(dates[i]));
            }
            if (v.code_count() == 0) {
                push_unique(v, ehr::CodeType::Diagnosis, event_allowed_at(dates[i]));
            }
            visits.emplace(dates[i].days_since_epoch(), std::move(v));
        }

        if (labeled) visits[index_date.days_since_epoch()].prescriptions.push_back(cfg.index_code);

        // Signal pair / decoy planting inside the observation window.
        std::vector<int32_t> window_days;
        for (const auto& [day, v] : visits) {
            if (!labeled || Date(day) <= cutoff) window_days.push_back(day);
        }
        const double roll = rng.unit();
        const bool signal = roll < cfg.signal_prob;
        const bool decoy = !signal && roll < cfg.signal_prob + cfg.decoy_prob;
        if (signal || decoy) {
            const auto& pair = cfg.signal_pairs[rng.below(cfg.signal_pairs.size())];
            auto& visit = visits[window_days[rng.below(window_days.size())]];
            if (signal) {
                visit.diagnoses.push_back(pair.first);
                visit.diagnoses.push_back(pair.second);
            } else {
                visit.diagnoses.push_back(rng.bernoulli(0.5) ? pair.first : pair.second);
            }
        }

        if (labeled) {
            bool event;
            int32_t lag;
            if (rng.unit() < cfg.early_event_prob) {
                event = true;  // ambiguous early event; labeler will exclude
                lag = static_cast<int32_t>(rng.below(8));
            } else {
                event = signal;
                if (rng.unit() < cfg.noise) event = !event;
                lag = 8 + static_cast<int32_t>(rng.below(358));
            }
            if (event) {
                const Date when = index_date.plus_days(lag);
                auto& v = visits[when.days_since_epoch()];
                v.date = when;
                v.diagnoses.push_back(cfg.event_codes[rng.below(cfg.event_codes.size())]);
            }
        }

        // Ingestion order within a block is arbitrary in real feeds.
        for (auto& [day, v] : visits) {
            rng.shuffle(v.diagnoses);
            rng.shuffle(v.procedures);
            rng.shuffle(v.prescriptions);
            p.visits.push_back(std::move(v));
        }
        return p;
    }
};

}  // namespace

SynthCorpus gen_corpus(const SynthConfig& cfg) {
    cfg.validate();
    const Generator gen(cfg);

    SynthCorpus corpus;
    corpus.label_config.index_codes = {cfg.index_code};
    corpus.label_config.event_codes = cfg.event_codes;
    const auto index_set = corpus.label_config.index_set();
    const auto event_set = corpus.label_config.event_set();

    const int n_labeled =
        static_cast<int>(std::llround(cfg.index_fraction * cfg.n_patients));
    const int n_pretrain = cfg.n_patients - n_labeled;

    for (int i = 0; i < cfg.n_patients; ++i) {
        char pid[24];
        std::snprintf(pid, sizeof(pid), "P%06d", i);
        const bool labeled = i >= n_pretrain;
        Rng rng(mix_seed(cfg.seed, fnv1a64(pid)));
        ehr::PatientRecord p = gen.generate(pid, labeled, rng);
        if (labeled) {
            p.label = ehr::derive_label(p, index_set, event_set);
            corpus.labeled_pool.push_back(std::move(p));
        } else {
            corpus.pretrain_pool.push_back(std::move(p));
        }
    }
    return corpus;
}

std::vector<ehr::RawRecord> to_records(const std::vector<ehr::PatientRecord>& patients) {
    std::vector<ehr::RawRecord> out;
    for (const auto& p : patients) {
        for (const auto& v : p.visits) {
            for (auto type : {ehr::CodeType::Diagnosis, ehr::CodeType::Procedure,
                              ehr::CodeType::Prescription}) {
                for (const auto& code : v.block(type)) {
                    out.push_back(ehr::RawRecord{p.patient_id, v.date, code, type});
                }
            }
        }
    }
    return out;
}

}  // namespace ehrseq::synth

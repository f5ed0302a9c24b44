#include "ehrseq/experiment.hpp"

#include <algorithm>
#include <cstdio>

#include "ehrseq/rng.hpp"

using nlohmann::json;

namespace ehrseq::exper {

json ExperimentSpec::to_json() const {
    return json{{"alphas", alphas},
                {"label_fractions", label_fractions},
                {"n_seeds", n_seeds},
                {"base_seed", base_seed},
                {"vary", vary == Vary::Pretrain ? "pretrain" : "finetune"},
                {"fixed_pretrain_alpha", fixed_pretrain_alpha},
                {"fixed_finetune_alpha", fixed_finetune_alpha},
                {"tta_alpha", tta_alpha},
                {"model", model.to_json()},
                {"pretrain_epochs", pretrain_epochs},
                {"finetune_epochs", finetune_epochs},
                {"batch_size", batch_size},
                {"pretrain_lr", pretrain_lr},
                {"finetune_lr", finetune_lr},
                {"mlm_rate", mlm_rate},
                {"split_ratio", split_ratio},
                {"split_seed", split_seed},
                {"threads", threads}};
}

ExperimentSpec ExperimentSpec::from_json(const json& j) {
    ExperimentSpec s;
    if (j.contains("alphas")) s.alphas = j["alphas"].get<std::vector<uint64_t>>();
    if (j.contains("label_fractions")) {
        s.label_fractions = j["label_fractions"].get<std::vector<double>>();
    }
    s.n_seeds = j.value("n_seeds", s.n_seeds);
    s.base_seed = j.value("base_seed", s.base_seed);
    const std::string vary = j.value("vary", "pretrain");
    if (vary == "pretrain") s.vary = Vary::Pretrain;
    else if (vary == "finetune") s.vary = Vary::Finetune;
    else throw std::invalid_argument("experiment spec: vary must be pretrain or finetune");
    s.fixed_pretrain_alpha = j.value("fixed_pretrain_alpha", s.fixed_pretrain_alpha);
    s.fixed_finetune_alpha = j.value("fixed_finetune_alpha", s.fixed_finetune_alpha);
    s.tta_alpha = j.value("tta_alpha", s.tta_alpha);
    if (j.contains("model")) s.model = model::ModelConfig::from_json(j["model"]);
    s.pretrain_epochs = j.value("pretrain_epochs", s.pretrain_epochs);
    s.finetune_epochs = j.value("finetune_epochs", s.finetune_epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.pretrain_lr = j.value("pretrain_lr", s.pretrain_lr);
    s.finetune_lr = j.value("finetune_lr", s.finetune_lr);
    s.mlm_rate = j.value("mlm_rate", s.mlm_rate);
    s.split_ratio = j.value("split_ratio", s.split_ratio);
    s.split_seed = j.value("split_seed", s.split_seed);
    s.threads = j.value("threads", s.threads);
    if (s.alphas.empty() || s.label_fractions.empty() || s.n_seeds < 1) {
        throw std::invalid_argument("experiment spec: empty grid");
    }
    return s;
}

namespace {

std::string row(uint64_t alpha, double fraction, uint64_t seed, double auc, double auc_tta) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%llu,%.4f,%llu,%.6f,%.6f\n",
                  static_cast<unsigned long long>(alpha), fraction,
                  static_cast<unsigned long long>(seed), auc, auc_tta);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentSpec& spec,
                                 const std::vector<ehr::PatientRecord>& pretrain_corpus,
                                 const std::vector<ehr::PatientRecord>& labeled,
                                 PretrainCache* cache) {
    ExperimentOutcome out;
    out.results_csv = "alpha,label_fraction,seed,auc,auc_tta\n";

    std::vector<std::string> labeled_ids;
    labeled_ids.reserve(labeled.size());
    for (const auto& p : labeled) labeled_ids.push_back(p.patient_id);
    const train::SplitPlan plan =
        train::split_patients(labeled_ids, spec.split_ratio, spec.split_seed);

    PretrainCache local_cache;
    PretrainCache& ckpts = cache ? *cache : local_cache;

    auto pretrained = [&](uint64_t alpha, uint64_t seed) -> const model::Checkpoint& {
        const auto key = std::make_pair(alpha, seed);
        auto it = ckpts.find(key);
        if (it != ckpts.end()) return it->second;
        train::RunConfig rc;
        rc.phase = train::Phase::Pretrain;
        rc.alpha = alpha;
        rc.model = spec.model;
        rc.epochs = spec.pretrain_epochs;
        rc.batch_size = spec.batch_size;
        rc.lr = spec.pretrain_lr;
        rc.mlm_rate = spec.mlm_rate;
        rc.seed = derive_seed(seed, "pretrain");
        rc.threads = spec.threads;
        auto result = train::pretrain(pretrain_corpus, rc);
        return ckpts.emplace(key, std::move(result.checkpoint)).first->second;
    };

    for (const uint64_t alpha : spec.alphas) {
        for (const double fraction : spec.label_fractions) {
            for (int s = 0; s < spec.n_seeds; ++s) {
                const uint64_t cell_seed = spec.base_seed + static_cast<uint64_t>(s);
                const uint64_t pre_alpha =
                    spec.vary == Vary::Pretrain ? alpha : spec.fixed_pretrain_alpha;
                const uint64_t ft_alpha =
                    spec.vary == Vary::Finetune ? alpha : spec.fixed_finetune_alpha;
                try {
                    const auto& base = pretrained(pre_alpha, cell_seed);
                    train::RunConfig rc;
                    rc.phase = train::Phase::Finetune;
                    rc.alpha = ft_alpha;
                    rc.model = base.config;
                    rc.epochs = spec.finetune_epochs;
                    rc.batch_size = spec.batch_size;
                    rc.lr = spec.finetune_lr;
                    rc.label_fraction = fraction;
                    rc.seed = derive_seed(cell_seed, "finetune");
                    rc.threads = spec.threads;
                    auto ft = train::finetune(labeled, base, plan, rc, spec.tta_alpha);
                    CellResult cell{alpha, fraction, cell_seed, ft.report.auc,
                                    ft.report.auc_tta};
                    out.cells.push_back(cell);
                    out.results_csv += row(alpha, fraction, cell_seed, cell.auc, cell.auc_tta);
                } catch (const std::exception& e) {
                    char buf[160];
                    std::snprintf(buf, sizeof(buf), "alpha=%llu fraction=%.4f seed=%llu",
                                  static_cast<unsigned long long>(alpha), fraction,
                                  static_cast<unsigned long long>(cell_seed));
                    out.ok = false;
                    out.failure = std::string(buf) + ": " + e.what();
                    out.results_csv += "# FAILED " + out.failure + "\n";
                    out.summary_csv = "alpha,label_fraction,median_auc,median_auc_tta\n";
                    return out;
                }
            }
        }
    }

    out.summary_csv = "alpha,label_fraction,median_auc,median_auc_tta\n";
    for (const uint64_t alpha : spec.alphas) {
        for (const double fraction : spec.label_fractions) {
            std::vector<double> aucs, ttas;
            for (const auto& c : out.cells) {
                if (c.alpha == alpha && c.label_fraction == fraction) {
                    aucs.push_back(c.auc);
                    ttas.push_back(c.auc_tta);
                }
            }
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%llu,%.4f,%.6f,%.6f\n",
                          static_cast<unsigned long long>(alpha), fraction, median(aucs),
                          median(ttas));
            out.summary_csv += buf;
        }
    }
    return out;
}

}  // namespace ehrseq::exper

#include "ehrseq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "ehrseq/rng.hpp"
#include "ehrseq/seqpipe.hpp"

using nlohmann::json;

namespace ehrseq::train {

json SplitPlan::to_json() const {
    return json{{"train", train_ids}, {"test", test_ids}, {"ratio", ratio}, {"seed", seed}};
}

SplitPlan SplitPlan::from_json(const json& j) {
    SplitPlan p;
    p.train_ids = j.at("train").get<std::vector<std::string>>();
    p.test_ids = j.at("test").get<std::vector<std::string>>();
    p.ratio = j.at("ratio").get<double>();
    p.seed = j.at("seed").get<uint64_t>();
    return p;
}

SplitPlan SplitPlan::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return from_json(j);
}

void SplitPlan::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << to_json().dump(2) << "\n";
}

SplitPlan split_patients(std::vector<std::string> patient_ids, double ratio, uint64_t seed) {
    if (patient_ids.size() < 2) {
        throw std::invalid_argument("split_patients: need at least 2 patients");
    }
    if (ratio <= 0.0 || ratio >= 1.0) {
        throw std::invalid_argument("split_patients: ratio in (0,1)");
    }
    std::sort(patient_ids.begin(), patient_ids.end());
    Rng rng(seed);
    rng.shuffle(patient_ids);

    const size_t n = patient_ids.size();
    size_t n_train = static_cast<size_t>(
        std::ceil(ratio * static_cast<double>(n) - 1e-9));
    if (n_train == 0) n_train = 1;
    if (n_train >= n) n_train = n - 1;

    SplitPlan plan;
    plan.ratio = ratio;
    plan.seed = seed;
    plan.train_ids.assign(patient_ids.begin(), patient_ids.begin() + n_train);
    plan.test_ids.assign(patient_ids.begin() + n_train, patient_ids.end());
    return plan;
}

json RunConfig::to_json() const {
    return json{{"phase", phase == Phase::Pretrain ? "pretrain" : "finetune"},
                {"alpha", alpha},
                {"model", model.to_json()},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"label_fraction", label_fraction},
                {"seed", seed},
                {"mlm_rate", mlm_rate},
                {"patience", patience},
                {"class_weighted", class_weighted},
                {"threads", threads}};
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    const std::string phase = j.value("phase", "pretrain");
    if (phase == "pretrain") c.phase = Phase::Pretrain;
    else if (phase == "finetune") c.phase = Phase::Finetune;
    else throw std::invalid_argument("run config: phase must be pretrain or finetune");
    c.alpha = j.value("alpha", c.alpha);
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j["model"]);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.label_fraction = j.value("label_fraction", c.label_fraction);
    c.seed = j.value("seed", c.seed);
    c.mlm_rate = j.value("mlm_rate", c.mlm_rate);
    c.patience = j.value("patience", c.patience);
    c.class_weighted = j.value("class_weighted", c.class_weighted);
    c.threads = j.value("threads", c.threads);
    if (c.alpha < 1) throw std::invalid_argument("run config: alpha must be >= 1");
    if (c.label_fraction <= 0.0 || c.label_fraction > 1.0) {
        throw std::invalid_argument("run config: label_fraction in (0,1]");
    }
    if (c.epochs < 1 || c.batch_size < 1) {
        throw std::invalid_argument("run config: epochs and batch_size must be positive");
    }
    return c;
}

namespace {

std::vector<aug::CodeSequence> augment_pool(const std::vector<ehr::PatientRecord>& patients,
                                            uint64_t alpha, uint64_t seed) {
    aug::AugmentConfig acfg;
    acfg.alpha = alpha;
    acfg.seed = seed;
    acfg.include_identity = true;
    std::vector<aug::CodeSequence> pool;
    for (const auto& p : patients) {
        auto seqs = aug::sample_augmentations(p, acfg);
        for (auto& s : seqs) pool.push_back(std::move(s));
    }
    return pool;
}

size_t ceil_count(double fraction, size_t n) {
    size_t k = static_cast<size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
    if (k > n) k = n;
    return k;
}

}  // namespace

PretrainResult pretrain(const std::vector<ehr::PatientRecord>& corpus, const RunConfig& cfg) {
    if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
    if (cfg.phase != Phase::Pretrain) throw std::invalid_argument("pretrain: wrong phase");

    auto pool = augment_pool(corpus, cfg.alpha, derive_seed(cfg.seed, "augment"));
    const auto vocab = pipe::Vocabulary::build(pool);

    model::ModelConfig mcfg = cfg.model;
    mcfg.vocab_size = vocab.size();
    mcfg.validate();

    std::vector<pipe::TokenSeq> tokens;
    tokens.reserve(pool.size());
    for (const auto& s : pool) tokens.push_back(pipe::encode_window(s, vocab, mcfg.seq_len));

    // Sequence-level 80/20 train/validation split of the pool.
    std::vector<size_t> order(pool.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(derive_seed(cfg.seed, "valsplit"));
    split_rng.shuffle(order);
    const size_t n_train = std::max<size_t>(1, ceil_count(0.8, order.size()));
    std::vector<size_t> train_idx(order.begin(), order.begin() + n_train);
    std::vector<size_t> val_idx(order.begin() + n_train, order.end());
    if (val_idx.empty()) val_idx = train_idx;  // degenerate pool; validate on train

    auto params = model::init_params<float>(mcfg, derive_seed(cfg.seed, "init"));
    model::AdamState<float> adam(mcfg);
    const model::AdamHyper hyper{cfg.lr, 0.9, 0.999, 1e-8};

    const uint64_t mask_seed = derive_seed(cfg.seed, "mask");
    const uint64_t val_mask_seed = derive_seed(cfg.seed, "valmask");

    auto val_loss_fn = [&]() {
        double sum = 0.0;
        size_t count = 0;
        std::vector<model::Example> batch;
        for (size_t b = 0; b < val_idx.size(); b += cfg.batch_size) {
            batch.clear();
            const size_t end = std::min(val_idx.size(), b + cfg.batch_size);
            size_t batch_targets = 0;
            for (size_t k = b; k < end; ++k) {
                const size_t i = val_idx[k];
                auto masked = pipe::apply_mlm_mask(tokens[i], cfg.mlm_rate,
                                                   mix_seed(val_mask_seed, i), vocab.size());
                batch_targets += masked.mask_positions.size();
                batch.push_back(model::Example{std::move(masked.input),
                                               std::move(masked.targets), 0.0f});
            }
            const float loss = model::loss_and_grads<float>(batch, params, mcfg,
                                                            model::Objective::Mlm, nullptr,
                                                            false, 0, cfg.threads);
            sum += static_cast<double>(loss) * static_cast<double>(batch_targets);
            count += batch_targets;
        }
        return sum / static_cast<double>(count);
    };

    PretrainResult result;
    result.pool_size = pool.size();
    model::Params<float> grads(mcfg);
    model::Params<float> best_params = params;
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = -1;
    int64_t step = 0, best_step = 0;
    int stale = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> epoch_order = train_idx;
        Rng order_rng(derive_seed(cfg.seed, "order", static_cast<uint64_t>(epoch)));
        order_rng.shuffle(epoch_order);

        const uint64_t epoch_mask_seed = mix_seed(mask_seed, static_cast<uint64_t>(epoch));
        std::vector<model::Example> batch;
        for (size_t b = 0; b < epoch_order.size(); b += cfg.batch_size) {
            batch.clear();
            const size_t end = std::min(epoch_order.size(), b + cfg.batch_size);
            for (size_t k = b; k < end; ++k) {
                const size_t i = epoch_order[k];
                auto masked = pipe::apply_mlm_mask(tokens[i], cfg.mlm_rate,
                                                   mix_seed(epoch_mask_seed, i), vocab.size());
                batch.push_back(model::Example{std::move(masked.input),
                                               std::move(masked.targets), 0.0f});
            }
            model::loss_and_grads<float>(batch, params, mcfg, model::Objective::Mlm, &grads,
                                         true, derive_seed(cfg.seed, "dropout", step),
                                         cfg.threads);
            model::adam_step(params, grads, adam, hyper);
            ++step;
        }

        const double val = val_loss_fn();
        result.val_losses.push_back(val);
        if (val < best_val) {
            best_val = val;
            best_params = params;
            best_epoch = epoch;
            best_step = step;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }

    result.best_val_loss = best_val;
    result.best_epoch = best_epoch;
    result.checkpoint.config = mcfg;
    result.checkpoint.seed = cfg.seed;
    result.checkpoint.step = best_step;
    result.checkpoint.vocab = vocab;
    result.checkpoint.params = std::move(best_params);
    return result;
}

ehr::PatientRecord build_task_input(const ehr::PatientRecord& patient, Date index_date) {
    const Date cutoff = index_date.plus_days(365);
    ehr::PatientRecord out;
    out.patient_id = patient.patient_id;
    out.label = patient.label;
    for (const auto& v : patient.visits) {
        if (v.date <= cutoff) out.visits.push_back(v);
    }
    if (out.visits.empty()) {
        throw std::runtime_error("build_task_input: no visits remain for " + patient.patient_id);
    }
    return out;
}

FinetunePools build_finetune_pools(const std::vector<ehr::PatientRecord>& labeled,
                                   const SplitPlan& plan, const RunConfig& cfg) {
    std::unordered_set<std::string> train_set(plan.train_ids.begin(), plan.train_ids.end());
    std::unordered_set<std::string> test_set(plan.test_ids.begin(), plan.test_ids.end());

    std::vector<const ehr::PatientRecord*> train_patients, test_patients;
    for (const auto& p : labeled) {
        if (!p.label || !p.label->index_date) continue;
        if (p.label->kind == ehr::LabelKind::Excluded) continue;
        if (train_set.count(p.patient_id)) {
            train_patients.push_back(&p);
        } else if (test_set.count(p.patient_id)) {
            test_patients.push_back(&p);
        } else {
            throw std::invalid_argument("finetune: split plan does not cover patient " +
                                        p.patient_id);
        }
    }

    // label_fraction subsamples patients, not sequences.
    std::vector<size_t> idx(train_patients.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng frac_rng(derive_seed(cfg.seed, "fraction"));
    frac_rng.shuffle(idx);
    const size_t keep = ceil_count(cfg.label_fraction, idx.size());
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());  // restore corpus order for the kept subset

    size_t n_case = 0, n_control = 0;
    FinetunePools pools;
    aug::AugmentConfig acfg;
    acfg.alpha = cfg.alpha;
    acfg.seed = derive_seed(cfg.seed, "aug-train");
    acfg.include_identity = true;
    for (const size_t i : idx) {
        const auto* p = train_patients[i];
        (p->label->kind == ehr::LabelKind::Case ? n_case : n_control) += 1;
        pools.selected_train_ids.push_back(p->patient_id);
        const auto task = build_task_input(*p, *p->label->index_date);
        auto seqs = aug::sample_augmentations(task, acfg);
        for (auto& s : seqs) pools.train_sequences.push_back(std::move(s));
    }
    if (n_case == 0 || n_control == 0) {
        throw std::runtime_error(
            "finetune: label_fraction left zero Case or zero Control train patients");
    }

    for (const auto* p : test_patients) {
        pools.test_patients.push_back(build_task_input(*p, *p->label->index_date));
    }
    return pools;
}

FinetuneResult finetune(const std::vector<ehr::PatientRecord>& labeled,
                        const model::Checkpoint& base, const SplitPlan& plan,
                        const RunConfig& cfg, uint64_t tta_alpha) {
    if (cfg.phase != Phase::Finetune) throw std::invalid_argument("finetune: wrong phase");
    auto pools = build_finetune_pools(labeled, plan, cfg);
    if (pools.test_patients.empty()) throw std::runtime_error("finetune: empty test set");

    const auto& vocab = base.vocab;
    const auto& mcfg = base.config;

    std::vector<model::Example> examples;
    examples.reserve(pools.train_sequences.size());
    size_t n_case_seq = 0;
    for (const auto& s : pools.train_sequences) {
        model::Example ex;
        ex.tokens = pipe::encode_window(s, vocab, mcfg.seq_len);
        ex.label = s.label->kind == ehr::LabelKind::Case ? 1.0f : 0.0f;
        n_case_seq += ex.label > 0.5f;
        examples.push_back(std::move(ex));
    }
    if (cfg.class_weighted) {
        const size_t n_control_seq = examples.size() - n_case_seq;
        const float w_case = static_cast<float>(examples.size()) / (2.0f * n_case_seq);
        const float w_control = static_cast<float>(examples.size()) / (2.0f * n_control_seq);
        for (auto& ex : examples) ex.weight = ex.label > 0.5f ? w_case : w_control;
    }

    auto params = base.params;
    // Fresh classifier head; the encoder and embeddings come from the base.
    {
        Rng head_rng(derive_seed(cfg.seed, "head"));
        for (auto& w : params.cls_w) w = static_cast<float>(head_rng.gaussian() * 0.02);
        params.cls_b[0] = 0.0f;
    }

    model::AdamState<float> adam(mcfg);
    const model::AdamHyper hyper{cfg.lr, 0.9, 0.999, 1e-8};
    model::Params<float> grads(mcfg);
    int64_t step = 0;

    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<model::Example> batch;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(derive_seed(cfg.seed, "order", static_cast<uint64_t>(epoch)));
        std::vector<size_t> epoch_order = order;
        order_rng.shuffle(epoch_order);
        for (size_t b = 0; b < epoch_order.size(); b += cfg.batch_size) {
            batch.clear();
            const size_t end = std::min(epoch_order.size(), b + cfg.batch_size);
            for (size_t k = b; k < end; ++k) batch.push_back(examples[epoch_order[k]]);
            model::loss_and_grads<float>(batch, params, mcfg, model::Objective::Bce, &grads,
                                         true, derive_seed(cfg.seed, "dropout", step),
                                         cfg.threads);
            model::adam_step(params, grads, adam, hyper);
            ++step;
        }
    }

    FinetuneResult result;
    result.checkpoint.config = mcfg;
    result.checkpoint.seed = cfg.seed;
    result.checkpoint.step = base.step + step;
    result.checkpoint.vocab = vocab;
    result.checkpoint.params = std::move(params);

    // Per-patient test scores: identity sequence for the plain metric, score
    // averaging over sampled orderings for the TTA metric.
    std::vector<metrics::ScoredExample> plain, tta;
    const uint64_t tta_seed = derive_seed(cfg.seed, "tta");
    for (const auto& p : pools.test_patients) {
        const int label = p.label->kind == ehr::LabelKind::Case ? 1 : 0;
        plain.push_back({p.patient_id,
                         metrics::score_sequence(result.checkpoint, aug::identity_sequence(p)),
                         label});
        tta.push_back({p.patient_id,
                       metrics::tta_score(result.checkpoint, p, tta_alpha, tta_seed), label});
        (label == 1 ? result.report.n_case : result.report.n_control) += 1;
    }
    result.report.auc = metrics::auc(plain);
    result.report.auc_tta = metrics::auc(tta);
    result.report.roc = metrics::roc_points(plain);
    return result;
}

}  // namespace ehrseq::train

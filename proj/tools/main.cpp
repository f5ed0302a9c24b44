#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "ehrseq/experiment.hpp"
#include "ehrseq/metrics.hpp"
#include "ehrseq/model.hpp"
#include "ehrseq/records.hpp"
#include "ehrseq/rng.hpp"
#include "ehrseq/synthgen.hpp"
#include "ehrseq/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ehrseq;

namespace {

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

void echo_config(const std::string& name, const json& cfg) {
    std::cerr << "[" << name << "] config: " << cfg.dump() << "\n";
}

struct GlobalOpts {
    uint64_t seed = 42;
    bool seed_set = false;
    int threads = 1;
    bool strict = false;
};

int cmd_synth(const std::string& config_path, int patients_override, const GlobalOpts& g,
              const std::string& out_dir) {
    synth::SynthConfig cfg;
    if (!config_path.empty()) cfg = synth::SynthConfig::from_json(load_json(config_path));
    if (patients_override > 0) cfg.n_patients = patients_override;
    if (g.seed_set) cfg.seed = g.seed;
    cfg.validate();
    echo_config("synth", cfg.to_json());

    fs::create_directories(out_dir);
    const auto corpus = synth::gen_corpus(cfg);
    ehr::save_records_jsonl(synth::to_records(corpus.pretrain_pool),
                            out_dir + "/pretrain_records.jsonl");
    ehr::save_records_jsonl(synth::to_records(corpus.labeled_pool),
                            out_dir + "/labeled_records.jsonl");
    write_text(out_dir + "/label_config.json", corpus.label_config.to_json().dump(2) + "\n");
    write_text(out_dir + "/synth_config.json", cfg.to_json().dump(2) + "\n");
    std::cerr << "[synth] wrote " << corpus.pretrain_pool.size() << " pretrain and "
              << corpus.labeled_pool.size() << " labeled patients to " << out_dir << "\n";
    return 0;
}

int cmd_ingest(const std::string& input, const std::string& labels_path,
               const std::string& output, const GlobalOpts& g) {
    echo_config("ingest", json{{"input", input},
                               {"labels", labels_path},
                               {"output", output},
                               {"strict", g.strict}});
    std::ifstream in(input);
    if (!in) throw std::runtime_error("cannot open " + input);
    const auto parsed = ehr::parse_records(in, g.strict);
    auto patients = ehr::group_visits(parsed.records);
    if (!labels_path.empty()) {
        const auto lc = ehr::LabelConfig::from_json(load_json(labels_path));
        const auto index_set = lc.index_set();
        const auto event_set = lc.event_set();
        for (auto& p : patients) p.label = ehr::derive_label(p, index_set, event_set);
    }
    ehr::save_patients_jsonl(patients, output);
    std::cerr << "[ingest] " << parsed.records.size() << " records, " << parsed.skipped
              << " skipped, " << patients.size() << " patients -> " << output << "\n";
    return 0;
}

int cmd_augment(const std::string& input, uint64_t alpha, bool no_identity,
                const GlobalOpts& g, const std::string& output) {
    aug::AugmentConfig cfg;
    cfg.alpha = alpha;
    cfg.seed = g.seed;
    cfg.include_identity = !no_identity;
    echo_config("augment", json{{"input", input},
                                {"alpha", cfg.alpha},
                                {"seed", cfg.seed},
                                {"include_identity", cfg.include_identity},
                                {"output", output}});
    const auto patients = ehr::load_patients_jsonl(input);
    std::ofstream out(output);
    if (!out) throw std::runtime_error("cannot write " + output);
    size_t n = 0;
    for (const auto& p : patients) {
        for (const auto& s : aug::sample_augmentations(p, cfg)) {
            out << aug::sequence_to_json(s).dump() << "\n";
            ++n;
        }
    }
    std::cerr << "[augment] " << n << " sequences from " << patients.size() << " patients -> "
              << output << "\n";
    return 0;
}

int cmd_encode(const std::string& input, const std::string& vocab_path, int seq_len,
               double mlm_rate, const GlobalOpts& g, const std::string& output) {
    echo_config("encode", json{{"input", input},
                               {"vocab", vocab_path},
                               {"seq_len", seq_len},
                               {"mlm_rate", mlm_rate},
                               {"seed", g.seed},
                               {"output", output}});
    const auto seqs = aug::load_sequences_jsonl(input);
    pipe::Vocabulary vocab;
    if (fs::exists(vocab_path)) {
        vocab = pipe::Vocabulary::load(vocab_path);
    } else {
        vocab = pipe::Vocabulary::build(seqs);
        vocab.save(vocab_path);
        std::cerr << "[encode] built vocabulary of size " << vocab.size() << " -> "
                  << vocab_path << "\n";
    }

    std::ofstream out(output);
    if (!out) throw std::runtime_error("cannot write " + output);
    for (size_t i = 0; i < seqs.size(); ++i) {
        const auto tokens = pipe::encode_window(seqs[i], vocab, seq_len);
        json j{{"patient_id", seqs[i].patient_id},
               {"ids", tokens.ids},
               {"attn_mask", tokens.attn_mask},
               {"real_len", tokens.real_len}};
        if (seqs[i].label) {
            j["label"] = seqs[i].label->kind == ehr::LabelKind::Case ? 1 : 0;
        } else {
            j["label"] = nullptr;
        }
        if (mlm_rate > 0.0) {
            const auto masked =
                pipe::apply_mlm_mask(tokens, mlm_rate, mix_seed(g.seed, i), vocab.size());
            j["masked_ids"] = masked.input.ids;
            j["targets"] = masked.targets;
            j["mask_positions"] = masked.mask_positions;
        }
        out << j.dump() << "\n";
    }
    std::cerr << "[encode] " << seqs.size() << " sequences -> " << output << "\n";
    return 0;
}

train::RunConfig run_config_from(const std::string& path, const GlobalOpts& g,
                                 train::Phase phase) {
    auto rc = train::RunConfig::from_json(load_json(path));
    if (rc.phase != phase) throw std::runtime_error("run config phase does not match command");
    if (g.seed_set) rc.seed = g.seed;
    rc.threads = g.threads;
    return rc;
}

int cmd_pretrain(const std::string& input, const std::string& config_path,
                 const std::string& exclude_index, const GlobalOpts& g,
                 const std::string& out_path) {
    auto rc = run_config_from(config_path, g, train::Phase::Pretrain);
    echo_config("pretrain", rc.to_json());
    auto patients = ehr::load_patients_jsonl(input);
    if (!exclude_index.empty()) {
        const auto lc = ehr::LabelConfig::from_json(load_json(exclude_index));
        const auto index_set = lc.index_set();
        std::vector<ehr::PatientRecord> kept;
        for (auto& p : patients) {
            bool has_index = false;
            for (const auto& v : p.visits) {
                for (const auto& code : v.prescriptions) {
                    if (index_set.count(code)) { has_index = true; break; }
                }
                if (has_index) break;
            }
            if (!has_index) kept.push_back(std::move(p));
        }
        std::cerr << "[pretrain] excluded " << patients.size() - kept.size()
                  << " patients with index prescriptions\n";
        patients = std::move(kept);
    }
    const auto result = train::pretrain(patients, rc);
    model::save_checkpoint(result.checkpoint, out_path);
    std::cerr << "[pretrain] pool=" << result.pool_size
              << " best_val_loss=" << result.best_val_loss << " best_epoch=" << result.best_epoch
              << " -> " << out_path << "\n";
    return 0;
}

int cmd_finetune(const std::string& input, const std::string& base_path,
                 const std::string& config_path, const std::string& split_path,
                 uint64_t tta_alpha, const GlobalOpts& g, const std::string& out_path,
                 const std::string& metrics_path) {
    auto rc = run_config_from(config_path, g, train::Phase::Finetune);
    echo_config("finetune", rc.to_json());
    const auto labeled = ehr::load_patients_jsonl(input);
    const auto base = model::load_checkpoint(base_path);

    train::SplitPlan plan;
    if (fs::exists(split_path)) {
        plan = train::SplitPlan::load(split_path);
    } else {
        std::vector<std::string> ids;
        for (const auto& p : labeled) ids.push_back(p.patient_id);
        plan = train::split_patients(ids, 0.8, rc.seed);
        plan.save(split_path);
        std::cerr << "[finetune] wrote split plan -> " << split_path << "\n";
    }

    const auto result = train::finetune(labeled, base, plan, rc, tta_alpha);
    if (!out_path.empty()) model::save_checkpoint(result.checkpoint, out_path);
    json metrics_json = result.report.to_json();
    metrics_json["config"] = rc.to_json();
    const std::string metrics = metrics_json.dump(2) + "\n";
    if (metrics_path.empty()) std::cout << metrics;
    else write_text(metrics_path, metrics);
    std::cerr << "[finetune] auc=" << result.report.auc << " auc_tta=" << result.report.auc_tta
              << "\n";
    return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& test_path,
                 uint64_t tta_alpha, const GlobalOpts& g, const std::string& out_path) {
    echo_config("evaluate", json{{"model", model_path},
                                 {"test", test_path},
                                 {"tta_alpha", tta_alpha},
                                 {"seed", g.seed}});
    const auto ck = model::load_checkpoint(model_path);
    const auto patients = ehr::load_patients_jsonl(test_path);

    std::vector<metrics::ScoredExample> plain, tta;
    metrics::MetricsReport report;
    for (const auto& p : patients) {
        if (!p.label || !p.label->index_date) continue;
        if (p.label->kind == ehr::LabelKind::Excluded) continue;
        const auto task = train::build_task_input(p, *p.label->index_date);
        const int label = p.label->kind == ehr::LabelKind::Case ? 1 : 0;
        plain.push_back(
            {p.patient_id, metrics::score_sequence(ck, aug::identity_sequence(task)), label});
        tta.push_back({p.patient_id,
                       metrics::tta_score(ck, task, tta_alpha, derive_seed(g.seed, "tta")),
                       label});
        (label == 1 ? report.n_case : report.n_control) += 1;
    }
    if (plain.empty()) throw std::runtime_error("evaluate: no labeled Case/Control patients");
    report.auc = metrics::auc(plain);
    report.auc_tta = metrics::auc(tta);
    report.roc = metrics::roc_points(plain);
    const std::string text = report.to_json().dump(2) + "\n";
    if (out_path.empty()) std::cout << text;
    else write_text(out_path, text);
    return 0;
}

int cmd_experiment(const std::string& spec_path, const std::string& pretrain_path,
                   const std::string& labeled_path, const GlobalOpts& g,
                   const std::string& out_dir) {
    auto spec = exper::ExperimentSpec::from_json(load_json(spec_path));
    if (g.seed_set) spec.base_seed = g.seed;
    spec.threads = g.threads;
    echo_config("experiment", spec.to_json());

    const auto pretrain_corpus = ehr::load_patients_jsonl(pretrain_path);
    const auto labeled = ehr::load_patients_jsonl(labeled_path);

    fs::create_directories(out_dir);
    const auto outcome = exper::run_experiment(spec, pretrain_corpus, labeled);
    write_text(out_dir + "/results.csv", outcome.results_csv);
    write_text(out_dir + "/summary.csv", outcome.summary_csv);
    if (!outcome.ok) {
        std::cerr << "[experiment] FAILED at cell " << outcome.failure << "\n";
        return 1;
    }
    std::cerr << "[experiment] " << outcome.cells.size() << " cells -> " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Permutation-augmented medical code sequence pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOpts g;
    auto* seed_opt = app.add_option("--seed", g.seed, "Global seed override");
    app.add_option("--threads", g.threads, "Worker threads for training batches");
    app.add_flag("--strict", g.strict, "Fail on malformed input lines");

    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus");
    std::string synth_config, synth_out = "synth_out";
    int synth_patients = 0;
    synth_cmd->add_option("--config", synth_config, "SynthConfig JSON");
    synth_cmd->add_option("--patients", synth_patients, "Override patient count");
    synth_cmd->add_option("--out-dir", synth_out, "Output directory");

    auto* ingest_cmd = app.add_subcommand("ingest", "Parse records and group visits");
    std::string ingest_in, ingest_labels, ingest_out = "patients.jsonl";
    ingest_cmd->add_option("--input", ingest_in, "Records JSONL")->required();
    ingest_cmd->add_option("--labels", ingest_labels, "Label config JSON");
    ingest_cmd->add_option("--output", ingest_out, "Patients JSONL");

    auto* aug_cmd = app.add_subcommand("augment", "Sample within-visit permutations");
    std::string aug_in, aug_out = "sequences.jsonl";
    uint64_t aug_alpha = 4;
    bool aug_no_identity = false;
    aug_cmd->add_option("--input", aug_in, "Patients JSONL")->required();
    aug_cmd->add_option("--alpha", aug_alpha, "Augmentation factor");
    aug_cmd->add_flag("--no-identity", aug_no_identity, "Do not force the original order first");
    aug_cmd->add_option("--output", aug_out, "Sequences JSONL");

    auto* enc_cmd = app.add_subcommand("encode", "Tokenize sequences into fixed windows");
    std::string enc_in, enc_vocab = "vocab.json", enc_out = "tokens.jsonl";
    int enc_len = 512;
    double enc_rate = 0.15;
    enc_cmd->add_option("--input", enc_in, "Sequences JSONL")->required();
    enc_cmd->add_option("--vocab", enc_vocab, "Vocabulary JSON (built if missing)");
    enc_cmd->add_option("--seq-len", enc_len, "Window length");
    enc_cmd->add_option("--mlm-rate", enc_rate, "Masking rate (0 disables MLM fields)");
    enc_cmd->add_option("--output", enc_out, "Tokens JSONL");

    auto* pre_cmd = app.add_subcommand("pretrain", "MLM pre-training");
    std::string pre_in, pre_cfg, pre_excl, pre_out = "pretrained.ckpt";
    pre_cmd->add_option("--input", pre_in, "Patients JSONL")->required();
    pre_cmd->add_option("--config", pre_cfg, "RunConfig JSON")->required();
    pre_cmd->add_option("--exclude-index", pre_excl,
                        "Label config JSON; drop patients with index prescriptions");
    pre_cmd->add_option("--out", pre_out, "Checkpoint path");

    auto* ft_cmd = app.add_subcommand("finetune", "Binary-head fine-tuning");
    std::string ft_in, ft_base, ft_cfg, ft_split = "split.json", ft_out, ft_metrics;
    uint64_t ft_tta = 8;
    ft_cmd->add_option("--input", ft_in, "Labeled patients JSONL")->required();
    ft_cmd->add_option("--base", ft_base, "Pre-trained checkpoint")->required();
    ft_cmd->add_option("--config", ft_cfg, "RunConfig JSON")->required();
    ft_cmd->add_option("--split", ft_split, "Split plan JSON (created if missing)");
    ft_cmd->add_option("--tta-alpha", ft_tta, "TTA augmentation factor");
    ft_cmd->add_option("--out", ft_out, "Fine-tuned checkpoint path");
    ft_cmd->add_option("--metrics", ft_metrics, "Metrics JSON path (stdout if empty)");

    auto* ev_cmd = app.add_subcommand("evaluate", "Score a labeled test set");
    std::string ev_model, ev_test, ev_out;
    uint64_t ev_tta = 8;
    ev_cmd->add_option("--model", ev_model, "Checkpoint")->required();
    ev_cmd->add_option("--test", ev_test, "Labeled patients JSONL")->required();
    ev_cmd->add_option("--tta-alpha", ev_tta, "TTA augmentation factor");
    ev_cmd->add_option("--out", ev_out, "Metrics JSON path (stdout if empty)");

    auto* ex_cmd = app.add_subcommand("experiment", "Run the alpha/fraction/seed grid");
    std::string ex_spec, ex_pre, ex_lab, ex_out = "experiment_out";
    ex_cmd->add_option("--spec", ex_spec, "ExperimentSpec JSON")->required();
    ex_cmd->add_option("--pretrain", ex_pre, "Pretrain patients JSONL")->required();
    ex_cmd->add_option("--labeled", ex_lab, "Labeled patients JSONL")->required();
    ex_cmd->add_option("--out-dir", ex_out, "Output directory");

    CLI11_PARSE(app, argc, argv);
    g.seed_set = seed_opt->count() > 0;

    try {
        if (synth_cmd->parsed()) return cmd_synth(synth_config, synth_patients, g, synth_out);
        if (ingest_cmd->parsed()) return cmd_ingest(ingest_in, ingest_labels, ingest_out, g);
        if (aug_cmd->parsed()) return cmd_augment(aug_in, aug_alpha, aug_no_identity, g, aug_out);
        if (enc_cmd->parsed()) return cmd_encode(enc_in, enc_vocab, enc_len, enc_rate, g, enc_out);
        if (pre_cmd->parsed()) return cmd_pretrain(pre_in, pre_cfg, pre_excl, g, pre_out);
        if (ft_cmd->parsed()) {
            return cmd_finetune(ft_in, ft_base, ft_cfg, ft_split, ft_tta, g, ft_out, ft_metrics);
        }
        if (ev_cmd->parsed()) return cmd_evaluate(ev_model, ev_test, ev_tta, g, ev_out);
        if (ex_cmd->parsed()) return cmd_experiment(ex_spec, ex_pre, ex_lab, g, ex_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

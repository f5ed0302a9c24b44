#include "ehrseq/metrics.hpp"

#include <algorithm>
#include <stdexcept>

using nlohmann::json;

namespace ehrseq::metrics {

namespace {

std::pair<int64_t, int64_t> class_counts(const std::vector<ScoredExample>& examples) {
    int64_t pos = 0, neg = 0;
    for (const auto& e : examples) {
        if (e.label == 1) ++pos;
        else ++neg;
    }
    return {pos, neg};
}

}  // namespace

double auc(const std::vector<ScoredExample>& examples) {
    const auto [pos, neg] = class_counts(examples);
    if (pos == 0 || neg == 0) {
        throw std::invalid_argument("auc: need at least one Case and one Control");
    }

    // Rank sum with average ranks for ties. Average ranks are half-integers,
    // so the pair-count numerator comes out exact.
    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return examples[a].score < examples[b].score;
    });

    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && examples[order[j]].score == examples[order[i]].score) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (size_t k = i; k < j; ++k) {
            if (examples[order[k]].label == 1) rank_sum_pos += avg_rank;
        }
        i = j;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(pos) * (static_cast<double>(pos) + 1.0);
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

RocCurve roc_points(const std::vector<ScoredExample>& examples) {
    const auto [pos, neg] = class_counts(examples);
    if (pos == 0 || neg == 0) {
        throw std::invalid_argument("roc_points: need at least one Case and one Control");
    }

    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return examples[a].score > examples[b].score;
    });

    RocCurve curve;
    curve.points.emplace_back(0.0, 0.0);
    int64_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j < order.size() && examples[order[j]].score == examples[order[i]].score) ++j;
        for (size_t k = i; k < j; ++k) {
            if (examples[order[k]].label == 1) ++tp;
            else ++fp;
        }
        curve.points.emplace_back(static_cast<double>(fp) / static_cast<double>(neg),
                                  static_cast<double>(tp) / static_cast<double>(pos));
        i = j;
    }

    double area = 0.0;
    for (size_t k = 1; k < curve.points.size(); ++k) {
        const auto& [x0, y0] = curve.points[k - 1];
        const auto& [x1, y1] = curve.points[k];
        area += (x1 - x0) * 0.5 * (y0 + y1);
    }
    curve.auc = area;
    return curve;
}

double score_sequence(const model::Checkpoint& ck, const aug::CodeSequence& seq) {
    const auto tokens = pipe::encode_window(seq, ck.vocab, ck.config.seq_len);
    const auto fc =
        model::forward_example(tokens, ck.params, ck.config, false, 0, tokens.real_len);
    return static_cast<double>(model::pool_and_classify(fc, ck.params, ck.config));
}

double tta_score(const model::Checkpoint& ck, const ehr::PatientRecord& patient,
                 uint64_t alpha, uint64_t seed) {
    aug::AugmentConfig cfg;
    cfg.alpha = alpha;
    cfg.seed = seed;
    cfg.include_identity = true;
    const auto seqs = aug::sample_augmentations(patient, cfg);
    double sum = 0.0;
    for (const auto& s : seqs) sum += score_sequence(ck, s);
    return sum / static_cast<double>(seqs.size());
}

json MetricsReport::to_json() const {
    json roc_json = json::array();
    for (const auto& [fpr, tpr] : roc.points) roc_json.push_back(json::array({fpr, tpr}));
    return json{{"auc", auc},
                {"auc_tta", auc_tta},
                {"roc", std::move(roc_json)},
                {"n_case", n_case},
                {"n_control", n_control}};
}

}  // namespace ehrseq::metrics

#include "ehrseq/seqpipe.hpp"

#include <fstream>
#include <stdexcept>

#include "ehrseq/rng.hpp"

using nlohmann::json;

namespace ehrseq::pipe {

void Vocabulary::add(const std::string& code) {
    if (index_.count(code)) return;
    index_.emplace(code, static_cast<int32_t>(kFirstCode + codes_.size()));
    codes_.push_back(code);
}

Vocabulary Vocabulary::build(const std::vector<aug::CodeSequence>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    Vocabulary v;
    for (const auto& seq : corpus) {
        for (const auto& [code, type] : seq.codes) v.add(code);
    }
    return v;
}

const std::string& Vocabulary::code_of(int32_t id) const {
    static const std::string kEmpty;
    const int32_t pos = id - kFirstCode;
    if (pos < 0 || pos >= static_cast<int32_t>(codes_.size())) return kEmpty;
    return codes_[pos];
}

json Vocabulary::to_json() const {
    return json{{"reserved", {{"pad", kPad}, {"mask", kMask}, {"unk", kUnk}}},
                {"codes", codes_}};
}

Vocabulary Vocabulary::from_json(const json& j) {
    Vocabulary v;
    for (const auto& c : j.at("codes")) v.add(c.get<std::string>());
    return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return from_json(j);
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << to_json().dump(2) << "\n";
}

TokenSeq encode_window(const aug::CodeSequence& seq, const Vocabulary& vocab,
                       int32_t window_len) {
    if (window_len < 1) throw std::invalid_argument("encode_window: window_len must be >= 1");
    TokenSeq out;
    out.ids.assign(window_len, Vocabulary::kPad);
    out.attn_mask.assign(window_len, 0);

    const size_t n = seq.codes.size();
    // Sequences are chronological, so the tail holds the most recent codes.
    const size_t start = n > static_cast<size_t>(window_len) ? n - window_len : 0;
    const size_t kept = n - start;
    for (size_t i = 0; i < kept; ++i) {
        out.ids[i] = vocab.id_of(seq.codes[start + i].first);
        out.attn_mask[i] = 1;
    }
    out.real_len = static_cast<int32_t>(kept);
    return out;
}

MaskedExample apply_mlm_mask(const TokenSeq& seq, double rate, uint64_t seed,
                             int32_t vocab_size) {
    if (rate <= 0.0 || rate >= 1.0) throw std::invalid_argument("apply_mlm_mask: rate in (0,1)");
    if (seq.real_len == 0) throw std::invalid_argument("apply_mlm_mask: all-pad sequence");
    if (vocab_size <= Vocabulary::kFirstCode) {
        throw std::invalid_argument("apply_mlm_mask: vocab has no code ids");
    }

    Rng rng(seed);
    MaskedExample out;
    out.input = seq;
    out.targets.assign(seq.ids.size(), kIgnoreTarget);

    while (out.mask_positions.empty()) {
        for (int32_t i = 0; i < seq.real_len; ++i) {
            if (rng.unit() >= rate) continue;
            out.mask_positions.push_back(i);
            out.targets[i] = seq.ids[i];
            const double u = rng.unit();
            if (u < 0.8) {
                out.input.ids[i] = Vocabulary::kMask;
            } else if (u < 0.9) {
                out.input.ids[i] = Vocabulary::kFirstCode +
                                   static_cast<int32_t>(rng.below(
                                       static_cast<uint64_t>(vocab_size - Vocabulary::kFirstCode)));
            }  // else keep the original id
        }
    }
    return out;
}

}  // namespace ehrseq::pipe

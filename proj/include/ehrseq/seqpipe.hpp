#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ehrseq/augment.hpp"
#include "json.hpp"

namespace ehrseq::pipe {

/// Code-to-id bijection with three reserved ids ahead of the corpus codes.
class Vocabulary {
public:
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kMask = 1;
    static constexpr int32_t kUnk = 2;
    static constexpr int32_t kFirstCode = 3;

    /// Ids follow first appearance in the corpus. Empty corpus throws.
    static Vocabulary build(const std::vector<aug::CodeSequence>& corpus);

    int32_t size() const { return kFirstCode + static_cast<int32_t>(codes_.size()); }

    /// kUnk for codes outside the vocabulary.
    int32_t id_of(const std::string& code) const {
        const auto it = index_.find(code);
        return it == index_.end() ? kUnk : it->second;
    }

    /// Inverse lookup for non-reserved ids; empty string otherwise.
    const std::string& code_of(int32_t id) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

private:
    std::vector<std::string> codes_;  // id = kFirstCode + position
    std::unordered_map<std::string, int32_t> index_;

    void add(const std::string& code);
};

/// Fixed-length window of token ids; pads only as a suffix.
struct TokenSeq {
    std::vector<int32_t> ids;
    std::vector<uint8_t> attn_mask;  // 1 = real token
    int32_t real_len = 0;
};

inline constexpr int32_t kIgnoreTarget = -1;

/// One masked-LM training pair.
struct MaskedExample {
    TokenSeq input;                       // ids after corruption
    std::vector<int32_t> targets;         // original ids at selected positions, else kIgnoreTarget
    std::vector<int32_t> mask_positions;  // ascending
};

/// Maps codes to ids (unseen -> UNK), keeps the most recent window_len codes
/// when the sequence is longer, right-pads otherwise.
TokenSeq encode_window(const aug::CodeSequence& seq, const Vocabulary& vocab,
                       int32_t window_len);

/// BERT-style masking: each real position selected with probability `rate`;
/// selected positions become MASK 80% of the time, a random non-reserved id
/// 10%, unchanged 10%. Reselects the whole window until at least one position
/// is chosen. All-pad input throws.
MaskedExample apply_mlm_mask(const TokenSeq& seq, double rate, uint64_t seed,
                             int32_t vocab_size);

}  // namespace ehrseq::pipe

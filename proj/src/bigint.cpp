#include "ehrseq/bigint.hpp"

#include <algorithm>
#include <stdexcept>

namespace ehrseq {

BigUint::BigUint(uint64_t v) {
    if (v != 0) {
        limbs_.push_back(static_cast<uint32_t>(v & 0xffffffffu));
        if (v >> 32) limbs_.push_back(static_cast<uint32_t>(v >> 32));
    }
}

void BigUint::trim() {
    while (!limbs_.empty() && limbs_.back() == 0) limbs_.pop_back();
}

BigUint BigUint::factorial(uint32_t n) {
    BigUint r(1);
    for (uint32_t i = 2; i <= n; ++i) r.mul_u32(i);
    return r;
}

BigUint& BigUint::mul_u32(uint32_t m) {
    if (m == 0 || is_zero()) {
        limbs_.clear();
        return *this;
    }
    uint64_t carry = 0;
    for (auto& limb : limbs_) {
        const uint64_t cur = static_cast<uint64_t>(limb) * m + carry;
        limb = static_cast<uint32_t>(cur & 0xffffffffu);
        carry = cur >> 32;
    }
    if (carry) limbs_.push_back(static_cast<uint32_t>(carry));
    return *this;
}

BigUint& BigUint::add_u32(uint32_t a) {
    uint64_t carry = a;
    for (size_t i = 0; carry && i < limbs_.size(); ++i) {
        const uint64_t cur = static_cast<uint64_t>(limbs_[i]) + carry;
        limbs_[i] = static_cast<uint32_t>(cur & 0xffffffffu);
        carry = cur >> 32;
    }
    if (carry) limbs_.push_back(static_cast<uint32_t>(carry));
    return *this;
}

uint32_t BigUint::divmod_u32(uint32_t d) {
    if (d == 0) throw std::invalid_argument("BigUint: division by zero");
    uint64_t rem = 0;
    for (size_t i = limbs_.size(); i-- > 0;) {
        const uint64_t cur = (rem << 32) | limbs_[i];
        limbs_[i] = static_cast<uint32_t>(cur / d);
        rem = cur % d;
    }
    trim();
    return static_cast<uint32_t>(rem);
}

BigUint BigUint::operator*(const BigUint& rhs) const {
    if (is_zero() || rhs.is_zero()) return BigUint();
    BigUint out;
    out.limbs_.assign(limbs_.size() + rhs.limbs_.size(), 0);
    for (size_t i = 0; i < limbs_.size(); ++i) {
        uint64_t carry = 0;
        for (size_t j = 0; j < rhs.limbs_.size(); ++j) {
            const uint64_t cur = static_cast<uint64_t>(limbs_[i]) * rhs.limbs_[j] +
                                 out.limbs_[i + j] + carry;
            out.limbs_[i + j] = static_cast<uint32_t>(cur & 0xffffffffu);
            carry = cur >> 32;
        }
        out.limbs_[i + rhs.limbs_.size()] += static_cast<uint32_t>(carry);
    }
    out.trim();
    return out;
}

int BigUint::compare(const BigUint& rhs) const {
    if (limbs_.size() != rhs.limbs_.size())
        return limbs_.size() < rhs.limbs_.size() ? -1 : 1;
    for (size_t i = limbs_.size(); i-- > 0;) {
        if (limbs_[i] != rhs.limbs_[i]) return limbs_[i] < rhs.limbs_[i] ? -1 : 1;
    }
    return 0;
}

uint64_t BigUint::to_u64() const {
    if (!fits_u64()) throw std::overflow_error("BigUint: value exceeds 64 bits");
    uint64_t v = 0;
    if (limbs_.size() > 1) v = static_cast<uint64_t>(limbs_[1]) << 32;
    if (!limbs_.empty()) v |= limbs_[0];
    return v;
}

std::string BigUint::to_string() const {
    if (is_zero()) return "0";
    BigUint tmp(*this);
    std::string out;
    while (!tmp.is_zero()) {
        const uint32_t chunk = tmp.divmod_u32(1000000000u);
        char buf[16];
        if (tmp.is_zero()) {
            std::snprintf(buf, sizeof(buf), "%u", chunk);
        } else {
            std::snprintf(buf, sizeof(buf), "%09u", chunk);
        }
        out.insert(0, buf);
    }
    return out;
}

BigUint BigUint::from_string(std::string_view decimal) {
    if (decimal.empty()) throw std::invalid_argument("BigUint: empty decimal string");
    BigUint out;
    for (char c : decimal) {
        if (c < '0' || c > '9') throw std::invalid_argument("BigUint: bad decimal digit");
        out.mul_u32(10).add_u32(static_cast<uint32_t>(c - '0'));
    }
    return out;
}

}  // namespace ehrseq

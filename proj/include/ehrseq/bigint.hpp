#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ehrseq {

/// Unsigned arbitrary-precision integer, base 2^32 limbs, little-endian.
/// Covers what permutation counting needs: multiply by small factors,
/// full products, divmod by small divisors, ordering, decimal round trips.
class BigUint {
public:
    BigUint() = default;
    BigUint(uint64_t v);  // NOLINT: implicit by design, mirrors integer literals

    static BigUint factorial(uint32_t n);
    static BigUint from_string(std::string_view decimal);

    bool is_zero() const { return limbs_.empty(); }

    BigUint& mul_u32(uint32_t m);
    BigUint& add_u32(uint32_t a);
    /// Divides in place by d, returns the remainder. d must be nonzero.
    uint32_t divmod_u32(uint32_t d);

    BigUint operator*(const BigUint& rhs) const;

    /// -1, 0, +1 comparison.
    int compare(const BigUint& rhs) const;
    int compare(uint64_t rhs) const { return compare(BigUint(rhs)); }

    bool operator==(const BigUint& rhs) const { return limbs_ == rhs.limbs_; }
    bool operator!=(const BigUint& rhs) const { return limbs_ != rhs.limbs_; }
    bool operator<(const BigUint& rhs) const { return compare(rhs) < 0; }
    bool operator<=(const BigUint& rhs) const { return compare(rhs) <= 0; }
    bool operator>(const BigUint& rhs) const { return compare(rhs) > 0; }
    bool operator>=(const BigUint& rhs) const { return compare(rhs) >= 0; }

    bool fits_u64() const { return limbs_.size() <= 2; }
    /// Throws std::overflow_error when the value exceeds 64 bits.
    uint64_t to_u64() const;

    std::string to_string() const;

private:
    std::vector<uint32_t> limbs_;  // empty means zero

    void trim();
};

}  // namespace ehrseq

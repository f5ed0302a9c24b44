#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

namespace ehrseq {

/// Calendar date with day precision, stored as days since 1970-01-01.
/// Differences and comparisons are therefore plain integer arithmetic.
class Date {
public:
    Date() : days_(0) {}
    explicit Date(int32_t days_since_epoch) : days_(days_since_epoch) {}

    static Date from_civil(int year, int month, int day) {
        return Date(days_from_civil(year, month, day));
    }

    /// Parses strict ISO-8601 "YYYY-MM-DD". Rejects impossible calendar days.
    static std::optional<Date> parse(std::string_view s) {
        if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
        int y = 0, m = 0, d = 0;
        for (int i : {0, 1, 2, 3}) {
            if (s[i] < '0' || s[i] > '9') return std::nullopt;
            y = y * 10 + (s[i] - '0');
        }
        for (int i : {5, 6}) {
            if (s[i] < '0' || s[i] > '9') return std::nullopt;
            m = m * 10 + (s[i] - '0');
        }
        for (int i : {8, 9}) {
            if (s[i] < '0' || s[i] > '9') return std::nullopt;
            d = d * 10 + (s[i] - '0');
        }
        if (m < 1 || m > 12 || d < 1 || d > days_in_month(y, m)) return std::nullopt;
        return Date::from_civil(y, m, d);
    }

    std::string to_string() const {
        auto [y, m, d] = civil_from_days(days_);
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", y, m, d);
        return buf;
    }

    int32_t days_since_epoch() const { return days_; }

    Date plus_days(int32_t n) const { return Date(days_ + n); }

    friend int32_t operator-(Date a, Date b) { return a.days_ - b.days_; }
    friend bool operator==(Date a, Date b) { return a.days_ == b.days_; }
    friend bool operator!=(Date a, Date b) { return a.days_ != b.days_; }
    friend bool operator<(Date a, Date b) { return a.days_ < b.days_; }
    friend bool operator<=(Date a, Date b) { return a.days_ <= b.days_; }
    friend bool operator>(Date a, Date b) { return a.days_ > b.days_; }
    friend bool operator>=(Date a, Date b) { return a.days_ >= b.days_; }

private:
    int32_t days_;

    static bool is_leap(int y) { return y % 4 == 0 && (y % 100 != 0 || y % 400 == 0); }

    static int days_in_month(int y, int m) {
        static constexpr int kTable[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
        return (m == 2 && is_leap(y)) ? 29 : kTable[m - 1];
    }

    // Howard Hinnant's civil-date algorithms.
    static int32_t days_from_civil(int y, int m, int d) {
        y -= m <= 2;
        const int era = (y >= 0 ? y : y - 399) / 400;
        const unsigned yoe = static_cast<unsigned>(y - era * 400);
        const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
        const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        return era * 146097 + static_cast<int>(doe) - 719468;
    }

    struct Civil { int y, m, d; };

    static Civil civil_from_days(int32_t z) {
        z += 719468;
        const int era = (z >= 0 ? z : z - 146096) / 146097;
        const unsigned doe = static_cast<unsigned>(z - era * 146097);
        const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
        const int y = static_cast<int>(yoe) + era * 400;
        const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        const unsigned mp = (5 * doy + 2) / 153;
        const unsigned d = doy - (153 * mp + 2) / 5 + 1;
        const unsigned m = mp + (mp < 10 ? 3 : -9);
        return {y + (m <= 2), static_cast<int>(m), static_cast<int>(d)};
    }
};

}  // namespace ehrseq

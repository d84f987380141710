#pragma once

// Thin UTF-8 helpers over ICU: validation, NFC/NFD, case folding and the
// character classes used by the cleaner and the pre-tokenizer.

#include <cstdint>
#include <string>
#include <string_view>

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include "debatelm/error.hpp"

namespace debatelm::unicode {

/// Decode the code point starting at byte `i`; advances `i`.  Returns -1 on an invalid sequence.
inline std::int32_t next_code_point(std::string_view s, std::size_t& i) {
    UChar32 c = 0;
    auto pos = static_cast<std::int32_t>(i);
    U8_NEXT(reinterpret_cast<const std::uint8_t*>(s.data()), pos, static_cast<std::int32_t>(s.size()), c);
    i = static_cast<std::size_t>(pos);
    return c;
}

inline bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        if (next_code_point(s, i) < 0) return false;
    }
    return true;
}

inline void append_utf8(std::string& out, std::int32_t cp) {
    char buf[U8_MAX_LENGTH];
    std::int32_t len = 0;
    UBool error = false;
    U8_APPEND(reinterpret_cast<std::uint8_t*>(buf), len, U8_MAX_LENGTH, cp, error);
    if (!error) out.append(buf, static_cast<std::size_t>(len));
}

inline bool is_whitespace(std::int32_t cp) {
    return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || u_isUWhiteSpace(cp);
}

/// Cc/Cf characters other than the whitespace controls.
inline bool is_control(std::int32_t cp) {
    if (cp == '\t' || cp == '\n' || cp == '\r') return false;
    const auto type = u_charType(cp);
    return type == U_CONTROL_CHAR || type == U_FORMAT_CHAR;
}

/// ASCII symbol ranges count as punctuation too, matching the baseline pre-tokenizer.
inline bool is_punctuation(std::int32_t cp) {
    if ((cp >= 33 && cp <= 47) || (cp >= 58 && cp <= 64) || (cp >= 91 && cp <= 96) ||
        (cp >= 123 && cp <= 126))
        return true;
    return (U_GET_GC_MASK(cp) & U_GC_P_MASK) != 0;
}

namespace detail {

inline icu::UnicodeString to_icu(std::string_view s) {
    if (!valid_utf8(s)) throw DataError("invalid UTF-8 input");
    return icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<std::int32_t>(s.size())));
}

inline std::string from_icu(const icu::UnicodeString& u) {
    std::string out;
    u.toUTF8String(out);
    return out;
}

inline const icu::Normalizer2& instance(bool compose) {
    UErrorCode status = U_ZERO_ERROR;
    const icu::Normalizer2* n =
        compose ? icu::Normalizer2::getNFCInstance(status) : icu::Normalizer2::getNFDInstance(status);
    if (U_FAILURE(status) || n == nullptr) throw std::runtime_error("ICU normalizer unavailable");
    return *n;
}

}  // namespace detail

inline std::string nfc(std::string_view s) {
    UErrorCode status = U_ZERO_ERROR;
    const auto out = detail::instance(true).normalize(detail::to_icu(s), status);
    if (U_FAILURE(status)) throw DataError("NFC normalization failed");
    return detail::from_icu(out);
}

/// Lowercase, then NFD and drop nonspacing marks.
inline std::string lower_strip_accents(std::string_view s) {
    icu::UnicodeString u = detail::to_icu(s);
    u.toLower(icu::Locale::getRoot());
    UErrorCode status = U_ZERO_ERROR;
    const auto decomposed = detail::instance(false).normalize(u, status);
    if (U_FAILURE(status)) throw DataError("NFD normalization failed");
    icu::UnicodeString kept;
    for (std::int32_t i = 0; i < decomposed.length();) {
        const UChar32 c = decomposed.char32At(i);
        if (u_charType(c) != U_NON_SPACING_MARK) kept.append(c);
        i += U16_LENGTH(c);
    }
    return detail::from_icu(kept);
}

inline std::string remove_control(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const std::size_t start = i;
        const auto cp = next_code_point(s, i);
        if (cp < 0) throw DataError("invalid UTF-8 input");
        if (cp == 0xFFFD || is_control(cp)) continue;
        out.append(s.substr(start, i - start));
    }
    return out;
}

inline std::size_t code_point_count(std::string_view s) {
    std::size_t n = 0;
    std::size_t i = 0;
    while (i < s.size()) {
        next_code_point(s, i);
        ++n;
    }
    return n;
}

}  // namespace debatelm::unicode

#pragma once

// Node-name pattern language: literal text plus brace groups, where
// `{lo-hi}` is a numeric range and `{a,b,c}` an alternative list. Multiple
// groups cross-multiply left to right:
//
//   wnode2{1-4}   -> wnode21 wnode22 wnode23 wnode24
//   w{01-03}n{a,b} -> w01na w01nb w02na w02nb w03na w03nb
//
// A range bound written with leading zeros fixes the pad width for the
// whole range. Groups do not nest.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cadm/util.hpp"

namespace cadm::nodeset {

struct PatternError : std::runtime_error {
    enum class Kind { UnbalancedBrace, ReversedRange, EmptyGroup, BadBound };
    PatternError(Kind k, size_t off, const std::string& what)
        : std::runtime_error(what + " at offset " + std::to_string(off)), kind(k), offset(off) {}
    Kind kind;
    size_t offset;  // byte offset into the pattern text
};

struct Literal {
    std::string text;
    bool operator==(const Literal&) const = default;
};

struct Range {
    std::uint64_t lo = 0;
    std::uint64_t hi = 0;
    unsigned width = 1;  // digit padding; 1 means no padding
    bool operator==(const Range&) const = default;
};

struct List {
    std::vector<std::string> alternatives;
    bool operator==(const List&) const = default;
};

using Segment = std::variant<Literal, Range, List>;

struct NodePattern {
    std::vector<Segment> segments;
    bool operator==(const NodePattern&) const = default;
};

struct NodeList {
    std::vector<std::string> nodes;
    bool operator==(const NodeList&) const = default;
};

inline constexpr std::uint64_t kDefaultExpansionCap = 65536;

namespace detail {

inline bool all_digits(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

// `group` is the text between braces, `off` the offset of the opening brace.
inline Segment parse_group(std::string_view group, size_t off) {
    if (group.empty())
        throw PatternError(PatternError::Kind::EmptyGroup, off, "empty brace group");
    size_t dash = group.find('-');
    if (dash != std::string_view::npos && group.find(',') == std::string_view::npos) {
        std::string_view lo_s = group.substr(0, dash);
        std::string_view hi_s = group.substr(dash + 1);
        if (all_digits(lo_s) && all_digits(hi_s)) {
            auto lo = parse_u64(lo_s);
            auto hi = parse_u64(hi_s);
            if (!lo || !hi)
                throw PatternError(PatternError::Kind::BadBound, off, "range bound out of range");
            if (*lo > *hi)
                throw PatternError(PatternError::Kind::ReversedRange, off, "reversed range");
            Range r;
            r.lo = *lo;
            r.hi = *hi;
            r.width = 1;
            if ((lo_s.size() > 1 && lo_s[0] == '0') || (hi_s.size() > 1 && hi_s[0] == '0'))
                r.width = unsigned(std::max(lo_s.size(), hi_s.size()));
            return r;
        }
    }
    List l;
    size_t alt_start = 0;
    auto pieces = split(group, ',');
    for (const auto& p : pieces) {
        if (p.empty())
            throw PatternError(PatternError::Kind::EmptyGroup, off + 1 + alt_start, "empty alternative");
        l.alternatives.push_back(p);
        alt_start += p.size() + 1;
    }
    return l;
}

inline std::string pad_number(std::uint64_t v, unsigned width) {
    std::string s = std::to_string(v);
    if (s.size() < width) s.insert(0, width - s.size(), '0');
    return s;
}

}  // namespace detail

inline NodePattern parse_pattern(std::string_view text) {
    if (text.empty()) throw PatternError(PatternError::Kind::EmptyGroup, 0, "empty pattern");
    NodePattern pat;
    std::string lit;
    size_t i = 0;
    while (i < text.size()) {
        char c = text[i];
        if (c == '{') {
            size_t close = text.find_first_of("{}", i + 1);
            if (close == std::string_view::npos || text[close] == '{')
                throw PatternError(PatternError::Kind::UnbalancedBrace, i, "unbalanced '{'");
            if (!lit.empty()) {
                pat.segments.push_back(Literal{std::move(lit)});
                lit.clear();
            }
            pat.segments.push_back(detail::parse_group(text.substr(i + 1, close - i - 1), i));
            i = close + 1;
        } else if (c == '}') {
            throw PatternError(PatternError::Kind::UnbalancedBrace, i, "unbalanced '}'");
        } else {
            lit += c;
            ++i;
        }
    }
    if (!lit.empty()) pat.segments.push_back(Literal{std::move(lit)});
    return pat;
}

inline std::uint64_t cardinality(const NodePattern& pat) {
    std::uint64_t n = 1;
    for (const auto& seg : pat.segments) {
        std::uint64_t card = 1;
        if (const auto* r = std::get_if<Range>(&seg))
            card = r->hi - r->lo + 1;  // may wrap to 0 for the full u64 range
        else if (const auto* l = std::get_if<List>(&seg))
            card = l->alternatives.size();
        if (card == 0 || n > UINT64_MAX / card) return UINT64_MAX;
        n *= card;
    }
    return n;
}

inline NodeList expand(const NodePattern& pat, std::uint64_t cap = kDefaultExpansionCap) {
    std::uint64_t total = cardinality(pat);
    if (total > cap)
        throw std::runtime_error("pattern expands to " +
                                 (total == UINT64_MAX ? std::string(">2^64") : std::to_string(total)) +
                                 " nodes, cap is " + std::to_string(cap));
    NodeList out;
    out.nodes.reserve(total);
    std::string cur;
    // Left-to-right cross product, ranges ascending, alternatives in order.
    auto rec = [&](auto&& self, size_t idx) -> void {
        if (idx == pat.segments.size()) {
            out.nodes.push_back(cur);
            return;
        }
        const auto& seg = pat.segments[idx];
        size_t mark = cur.size();
        if (const auto* lit = std::get_if<Literal>(&seg)) {
            cur += lit->text;
            self(self, idx + 1);
            cur.resize(mark);
        } else if (const auto* r = std::get_if<Range>(&seg)) {
            for (std::uint64_t v = r->lo;; ++v) {
                cur += detail::pad_number(v, r->width);
                self(self, idx + 1);
                cur.resize(mark);
                if (v == r->hi) break;
            }
        } else {
            for (const auto& alt : std::get<List>(seg).alternatives) {
                cur += alt;
                self(self, idx + 1);
                cur.resize(mark);
            }
        }
    };
    rec(rec, 0);
    return out;
}

inline NodeList expand(std::string_view pattern_text, std::uint64_t cap = kDefaultExpansionCap) {
    return expand(parse_pattern(pattern_text), cap);
}

// One hostname per line, trimmed, blanks skipped — the `-` stdin convention.
inline NodeList read_list(std::istream& in) {
    NodeList out;
    std::string line;
    while (std::getline(in, line)) {
        auto t = trim(line);
        if (!t.empty()) out.nodes.emplace_back(t);
    }
    return out;
}

// Renders an expansion back as a single explicit-list pattern.
inline std::string render_list_pattern(const NodeList& list) {
    return "{" + join(list.nodes, ",") + "}";
}

struct ValidationReport {
    std::vector<std::string> duplicates;  // each duplicated name once
    size_t empty_names = 0;
    bool ok() const { return duplicates.empty() && empty_names == 0; }
};

inline ValidationReport validate(const NodeList& list) {
    ValidationReport rep;
    std::map<std::string, int> seen;
    for (const auto& n : list.nodes) {
        if (n.empty()) {
            ++rep.empty_names;
            continue;
        }
        if (++seen[n] == 2) rep.duplicates.push_back(n);
    }
    return rep;
}

// Resolves the CLI convention: a pattern argument, or `-` for stdin.
inline NodeList nodes_from_arg(const std::string& arg, std::istream& stdin_stream,
                               std::uint64_t cap = kDefaultExpansionCap) {
    if (arg == "-") return read_list(stdin_stream);
    return expand(arg, cap);
}

}  // namespace cadm::nodeset

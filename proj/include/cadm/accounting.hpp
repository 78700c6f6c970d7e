#pragma once

// Project accounting: parse batch accounting records, charge projects in
// node-hours, enforce allocations by rewriting the flat project file that
// gates job submission, and report cumulative usage.
//
// Allocations are held as whole node-seconds so every charge and comparison
// is exact; node-hours appear only at the file/report surface, rendered as
// an integer or a reduced p/q fraction.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cadm/util.hpp"

namespace cadm::acct {

inline constexpr std::int64_t kSecondsPerHour = 3600;

// ---------------------------------------------------------------------------
// node-hours <-> node-seconds
// ---------------------------------------------------------------------------

inline std::string hours_string(std::int64_t node_seconds) {
    if (node_seconds % kSecondsPerHour == 0) return std::to_string(node_seconds / kSecondsPerHour);
    std::int64_t g = std::gcd(node_seconds, kSecondsPerHour);
    return std::to_string(node_seconds / g) + "/" + std::to_string(kSecondsPerHour / g);
}

// Accepts "10", "0.25" or "13/2" hours; nullopt when the value is negative,
// malformed, or not a whole number of node-seconds.
inline std::optional<std::int64_t> parse_hours(std::string_view s) {
    if (s.empty()) return std::nullopt;
    size_t slash = s.find('/');
    if (slash != std::string_view::npos) {
        auto p = parse_i64(s.substr(0, slash));
        auto q = parse_i64(s.substr(slash + 1));
        if (!p || !q || *p < 0 || *q <= 0) return std::nullopt;
        if ((*p * kSecondsPerHour) % *q != 0) return std::nullopt;
        return *p * kSecondsPerHour / *q;
    }
    size_t dot = s.find('.');
    if (dot != std::string_view::npos) {
        auto whole = parse_i64(s.substr(0, dot));
        auto frac_s = s.substr(dot + 1);
        auto frac = parse_u64(frac_s);
        if (!whole || *whole < 0 || !frac || frac_s.empty() || frac_s.size() > 9) return std::nullopt;
        std::int64_t den = 1;
        for (size_t i = 0; i < frac_s.size(); ++i) den *= 10;
        std::int64_t num = std::int64_t(*frac) * kSecondsPerHour;
        if (num % den != 0) return std::nullopt;
        return *whole * kSecondsPerHour + num / den;
    }
    auto v = parse_i64(s);
    if (!v || *v < 0) return std::nullopt;
    return *v * kSecondsPerHour;
}

// ---------------------------------------------------------------------------
// Accounting records
// ---------------------------------------------------------------------------

struct AccountingRecord {
    std::string job_id;
    std::string user;
    std::string project;
    std::int64_t walltime_s = 0;
    std::int64_t cputime_s = 0;  // parsed and reported, never charged
    std::int64_t node_count = 1;
    std::int64_t end_timestamp = 0;
    bool operator==(const AccountingRecord&) const = default;
};

struct ParsedAccounting {
    std::vector<AccountingRecord> records;
    struct BadLine {
        size_t lineno;
        std::string why;
    };
    std::vector<BadLine> errors;  // malformed lines are skipped, not fatal
};

// One end-of-job record per line:
//   E;<job>;<user>;<project>;wall=<s>;cpu=<s>;nodes=<n>;end=<epoch>
inline ParsedAccounting parse_accounting(std::string_view text) {
    ParsedAccounting out;
    size_t lineno = 0;
    for (const auto& raw : split(text, '\n')) {
        ++lineno;
        auto line = trim(raw);
        if (line.empty()) continue;
        auto bad = [&](const std::string& why) { out.errors.push_back({lineno, why}); };
        auto f = split(line, ';');
        if (f.size() != 8 || f[0] != "E") {
            bad("not an E record with 8 fields");
            continue;
        }
        auto kv = [&](const std::string& field, std::string_view key) -> std::optional<std::int64_t> {
            if (field.size() <= key.size() + 1 || field.compare(0, key.size(), key) != 0 ||
                field[key.size()] != '=')
                return std::nullopt;
            return parse_i64(std::string_view(field).substr(key.size() + 1));
        };
        AccountingRecord r;
        r.job_id = f[1];
        r.user = f[2];
        r.project = f[3];
        auto wall = kv(f[4], "wall");
        auto cpu = kv(f[5], "cpu");
        auto nodes = kv(f[6], "nodes");
        auto end = kv(f[7], "end");
        if (r.job_id.empty() || r.user.empty() || r.project.empty()) {
            bad("empty job/user/project field");
            continue;
        }
        if (!wall || *wall < 0 || !cpu || *cpu < 0 || !nodes || *nodes <= 0 || !end || *end < 0) {
            bad("bad wall/cpu/nodes/end value");
            continue;
        }
        r.walltime_s = *wall;
        r.cputime_s = *cpu;
        r.node_count = *nodes;
        r.end_timestamp = *end;
        out.records.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Project ledger file
// ---------------------------------------------------------------------------

// The flat project file: presence of a project line makes the project
// submittable. Lines are kept verbatim on rewrite unless their value
// changed; removed projects lose their line entirely.
struct ProjectLedger {
    std::map<std::string, std::int64_t> projects;  // remaining node-seconds
    std::map<std::string, std::string> defaults;   // user -> default project

    struct Line {
        enum class Kind { Project, Default, Other };
        Kind kind = Kind::Other;
        std::string text;            // original bytes, no newline
        std::string key;             // project name or user
        std::int64_t orig_ns = 0;    // Project lines only
    };
    std::vector<Line> lines;

    bool same_contents(const ProjectLedger& o) const {
        return projects == o.projects && defaults == o.defaults;
    }
};

inline ProjectLedger parse_ledger(std::string_view text) {
    ProjectLedger led;
    size_t lineno = 0;
    auto rows = split(text, '\n');
    if (!rows.empty() && rows.back().empty()) rows.pop_back();  // trailing newline
    for (const auto& raw : rows) {
        ++lineno;
        ProjectLedger::Line L;
        L.text = raw;
        auto line = trim(raw);
        auto fail = [&](const std::string& why) {
            throw std::runtime_error("project file line " + std::to_string(lineno) + ": " + why);
        };
        if (line.empty() || line[0] == '#') {
            led.lines.push_back(std::move(L));
            continue;
        }
        auto tok = split_ws(line);
        if (tok[0] == "project") {
            if (tok.size() != 3) fail("expected: project <name> <remaining-node-hours>");
            auto ns = parse_hours(tok[2]);
            if (!ns) fail("bad allocation `" + tok[2] + "` (must be whole node-seconds)");
            if (led.projects.count(tok[1])) fail("duplicate project " + tok[1]);
            led.projects[tok[1]] = *ns;
            L.kind = ProjectLedger::Line::Kind::Project;
            L.key = tok[1];
            L.orig_ns = *ns;
        } else if (tok[0] == "default") {
            if (tok.size() != 3) fail("expected: default <user> <project>");
            if (led.defaults.count(tok[1])) fail("duplicate default for user " + tok[1]);
            led.defaults[tok[1]] = tok[2];
            L.kind = ProjectLedger::Line::Kind::Default;
            L.key = tok[1];
        } else {
            fail("unknown directive " + tok[0]);
        }
        led.lines.push_back(std::move(L));
    }
    return led;
}

inline std::string render_ledger(const ProjectLedger& led) {
    std::string out;
    std::map<std::string, bool> written;
    for (const auto& L : led.lines) {
        switch (L.kind) {
            case ProjectLedger::Line::Kind::Project: {
                auto it = led.projects.find(L.key);
                if (it == led.projects.end()) continue;  // removed project: drop the line
                written[L.key] = true;
                if (it->second == L.orig_ns)
                    out += L.text + "\n";
                else
                    out += "project " + L.key + " " + hours_string(it->second) + "\n";
                break;
            }
            case ProjectLedger::Line::Kind::Default: {
                auto it = led.defaults.find(L.key);
                if (it == led.defaults.end()) continue;
                out += L.text + "\n";
                break;
            }
            case ProjectLedger::Line::Kind::Other:
                out += L.text + "\n";
                break;
        }
    }
    for (const auto& [name, ns] : led.projects)
        if (!written.count(name) && std::none_of(led.lines.begin(), led.lines.end(), [&](const auto& L) {
                return L.kind == ProjectLedger::Line::Kind::Project && L.key == name;
            }))
            out += "project " + name + " " + hours_string(ns) + "\n";
    return out;
}

// Dangling default-project mappings (user -> project that no longer exists).
inline std::vector<std::string> dangling_defaults(const ProjectLedger& led) {
    std::vector<std::string> users;
    for (const auto& [user, project] : led.defaults)
        if (!led.projects.count(project)) users.push_back(user);
    return users;
}

// ---------------------------------------------------------------------------
// Charging
// ---------------------------------------------------------------------------

struct ChargeReport {
    struct ProjectCharge {
        std::int64_t node_seconds = 0;
        bool unledgered = false;        // charged for reporting, nothing to decrement
        bool removed = false;           // exhausted this run
        std::int64_t overage_ns = 0;    // amount past the allocation, when removed
    };
    std::map<std::string, ProjectCharge> per_project;
    std::vector<std::string> removed;            // project names removed this run
    std::vector<std::string> dangling;           // users whose default now dangles
    std::int64_t total_node_seconds = 0;
    std::int64_t high_water = 0;                 // latest end_timestamp charged
    size_t records_charged = 0;
    size_t records_skipped = 0;                  // at or before the since mark
};

inline std::int64_t record_charge_ns(const AccountingRecord& r) {
    return r.node_count * r.walltime_s;
}

// Groups charges per project. When a ledger is supplied, projects missing
// from it are flagged unledgered.
inline ChargeReport charge(std::span<const AccountingRecord> records,
                           const ProjectLedger* ledger = nullptr) {
    ChargeReport rep;
    for (const auto& r : records) {
        auto& pc = rep.per_project[r.project];
        pc.node_seconds += record_charge_ns(r);
        if (ledger && !ledger->projects.count(r.project)) pc.unledgered = true;
        rep.total_node_seconds += record_charge_ns(r);
        rep.high_water = std::max(rep.high_water, r.end_timestamp);
        ++rep.records_charged;
    }
    return rep;
}

// The nightly pass: charge, decrement, and remove exhausted projects
// (remaining <= 0 counts as exceeded). Records at or before `since` are
// skipped so re-runs over the same file stay idempotent.
inline std::pair<ProjectLedger, ChargeReport> nightly_run(const ProjectLedger& ledger,
                                                          std::span<const AccountingRecord> records,
                                                          std::int64_t since = -1) {
    std::vector<AccountingRecord> fresh;
    size_t skipped = 0;
    for (const auto& r : records) {
        if (r.end_timestamp <= since) {
            ++skipped;
            continue;
        }
        fresh.push_back(r);
    }
    ChargeReport rep = charge(fresh, &ledger);
    rep.records_skipped = skipped;
    if (rep.high_water < since) rep.high_water = since;

    ProjectLedger next = ledger;
    for (auto& [project, pc] : rep.per_project) {
        auto it = next.projects.find(project);
        if (it == next.projects.end()) continue;  // unledgered
        it->second -= pc.node_seconds;
        if (it->second <= 0) {
            pc.removed = true;
            pc.overage_ns = -it->second;
            rep.removed.push_back(project);
            next.projects.erase(it);
        }
    }
    std::sort(rep.removed.begin(), rep.removed.end());
    for (const auto& user : dangling_defaults(next)) {
        if (std::find(rep.removed.begin(), rep.removed.end(), next.defaults.at(user)) !=
            rep.removed.end())
            rep.dangling.push_back(user);
    }
    std::sort(rep.dangling.begin(), rep.dangling.end());
    return {std::move(next), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Submission gate
// ---------------------------------------------------------------------------

struct GateResult {
    enum class Reason { Accepted, NoSuchProject, NoDefaultProject, DanglingDefault };
    bool accepted = false;
    std::string project;  // set when accepted
    Reason reason = Reason::Accepted;
};

inline const char* to_string(GateResult::Reason r) {
    switch (r) {
        case GateResult::Reason::Accepted:
            return "accepted";
        case GateResult::Reason::NoSuchProject:
            return "NoSuchProject";
        case GateResult::Reason::NoDefaultProject:
            return "NoDefaultProject";
        case GateResult::Reason::DanglingDefault:
            return "DanglingDefault";
    }
    return "?";
}

inline GateResult gate_submission(const ProjectLedger& ledger, const std::string& user,
                                  const std::optional<std::string>& requested_project = std::nullopt) {
    GateResult g;
    if (requested_project) {
        if (ledger.projects.count(*requested_project)) {
            g.accepted = true;
            g.project = *requested_project;
        } else {
            g.reason = GateResult::Reason::NoSuchProject;
        }
        return g;
    }
    auto it = ledger.defaults.find(user);
    if (it == ledger.defaults.end()) {
        g.reason = GateResult::Reason::NoDefaultProject;
        return g;
    }
    if (!ledger.projects.count(it->second)) {
        g.reason = GateResult::Reason::DanglingDefault;
        return g;
    }
    g.accepted = true;
    g.project = it->second;
    return g;
}

// ---------------------------------------------------------------------------
// Usage history
// ---------------------------------------------------------------------------

struct UsageEntry {
    std::int64_t when = 0;  // epoch seconds of the run
    std::string project;
    std::int64_t node_seconds = 0;
};

// History file: `charged <epoch> <project> <node-seconds>` per line.
inline std::vector<UsageEntry> parse_history(std::string_view text) {
    std::vector<UsageEntry> out;
    size_t lineno = 0;
    for (const auto& raw : split(text, '\n')) {
        ++lineno;
        auto line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        auto tok = split_ws(line);
        auto when = tok.size() == 4 ? parse_i64(tok[1]) : std::nullopt;
        auto ns = tok.size() == 4 ? parse_i64(tok[3]) : std::nullopt;
        if (tok[0] != "charged" || !when || !ns)
            throw std::runtime_error("history line " + std::to_string(lineno) + ": malformed");
        out.push_back({*when, tok[2], *ns});
    }
    return out;
}

inline std::string render_history_lines(std::int64_t when, const ChargeReport& rep) {
    std::string out;
    for (const auto& [project, pc] : rep.per_project)
        out += "charged " + std::to_string(when) + " " + project + " " +
               std::to_string(pc.node_seconds) + "\n";
    return out;
}

// Cumulative node-hours per project, one sorted row per project.
inline std::string render_usage_table(std::span<const UsageEntry> history) {
    std::map<std::string, std::int64_t> cumulative;
    for (const auto& e : history) cumulative[e.project] += e.node_seconds;
    if (cumulative.empty()) return "";
    size_t width = 7;  // len("PROJECT")
    for (const auto& [p, _] : cumulative) width = std::max(width, p.size());
    std::string out = "PROJECT" + std::string(width - 7, ' ') + "  NODE-HOURS\n";
    for (const auto& [p, ns] : cumulative)
        out += p + std::string(width - p.size(), ' ') + "  " + hours_string(ns) + "\n";
    return out;
}

}  // namespace cadm::acct

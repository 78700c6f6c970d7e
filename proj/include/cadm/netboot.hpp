#pragma once

// Install-wave orchestration: bootptab bookkeeping (including the node
// self-comment-out callback), fixed-size install waves to protect the boot
// server, and a per-node install state machine driven through an agent.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "cadm/nodeset.hpp"
#include "cadm/subprocess.hpp"
#include "cadm/util.hpp"

namespace cadm::netboot {

// ---------------------------------------------------------------------------
// bootptab
// ---------------------------------------------------------------------------

// Entry line: `host:ha=MAC:ip=ADDR:bf=PATH`. A leading `#` disables the
// entry; everything after the `#` is preserved byte-exact so enable/disable
// are inverses. Unrecognized lines pass through verbatim.
struct BootptabEntry {
    std::string host;
    std::string hardware_address;
    std::string ip;
    std::string bootfile;
    bool enabled = true;
    size_t lineno = 0;
    bool operator==(const BootptabEntry&) const = default;
};

struct BootptabFile {
    struct Line {
        std::string text;                  // current bytes, no newline
        std::optional<size_t> entry_index;
    };
    std::vector<Line> lines;
    std::vector<BootptabEntry> entries;
    bool had_trailing_newline = true;

    BootptabEntry* find(const std::string& host) {
        for (auto& e : entries)
            if (e.host == host) return &e;
        return nullptr;
    }
};

namespace detail {

inline std::optional<BootptabEntry> parse_entry_text(std::string_view body) {
    auto fields = split(body, ':');
    if (fields.size() != 4) return std::nullopt;
    if (fields[0].empty() || fields[0].find('=') != std::string::npos) return std::nullopt;
    if (fields[1].rfind("ha=", 0) != 0 || fields[2].rfind("ip=", 0) != 0 ||
        fields[3].rfind("bf=", 0) != 0)
        return std::nullopt;
    BootptabEntry e;
    e.host = fields[0];
    e.hardware_address = fields[1].substr(3);
    e.ip = fields[2].substr(3);
    e.bootfile = fields[3].substr(3);
    return e;
}

}  // namespace detail

inline std::string render_entry(const BootptabEntry& e) {
    std::string s = e.host + ":ha=" + e.hardware_address + ":ip=" + e.ip + ":bf=" + e.bootfile;
    return e.enabled ? s : "#" + s;
}

inline BootptabFile parse_bootptab(std::string_view text) {
    BootptabFile file;
    file.had_trailing_newline = text.empty() || text.back() == '\n';
    auto rows = split(text, '\n');
    if (!rows.empty() && rows.back().empty()) rows.pop_back();
    std::map<std::string, size_t> enabled_at;  // host -> lineno
    size_t lineno = 0;
    for (const auto& raw : rows) {
        ++lineno;
        BootptabFile::Line L;
        L.text = raw;
        bool disabled = !raw.empty() && raw[0] == '#';
        auto entry = detail::parse_entry_text(disabled ? std::string_view(raw).substr(1) : raw);
        if (entry) {
            entry->enabled = !disabled;
            entry->lineno = lineno;
            if (entry->enabled) {
                auto [it, fresh] = enabled_at.emplace(entry->host, lineno);
                if (!fresh)
                    throw std::runtime_error("bootptab: host " + entry->host +
                                             " enabled on both line " + std::to_string(it->second) +
                                             " and line " + std::to_string(lineno));
            }
            L.entry_index = file.entries.size();
            file.entries.push_back(std::move(*entry));
        }
        file.lines.push_back(std::move(L));
    }
    return file;
}

inline std::string render_bootptab(const BootptabFile& file) {
    std::string out;
    for (size_t i = 0; i < file.lines.size(); ++i) {
        out += file.lines[i].text;
        if (i + 1 < file.lines.size() || file.had_trailing_newline) out += '\n';
    }
    return out;
}

enum class Toggle { Changed, AlreadyInState };

namespace detail {

template <bool kDisable>
Toggle toggle_host(const std::string& path, const std::string& host) {
    FileLock lock(path);  // concurrent node callbacks are the normal case
    auto file = parse_bootptab(read_file(path));
    BootptabEntry* e = file.find(host);
    if (!e) throw std::runtime_error("bootptab: no entry for host " + host);
    if (e->enabled != kDisable) return Toggle::AlreadyInState;
    auto& line = file.lines[e->lineno - 1];
    if (kDisable)
        line.text.insert(line.text.begin(), '#');
    else
        line.text.erase(line.text.begin());
    e->enabled = !kDisable;
    write_file_atomic(path, render_bootptab(file));
    return Toggle::Changed;
}

}  // namespace detail

// The node's end-of-install callback: its entry gains a `#`, all other
// bytes of the file stay put.
inline Toggle comment_out(const std::string& path, const std::string& host) {
    return detail::toggle_host<true>(path, host);
}

inline Toggle enable(const std::string& path, const std::string& host) {
    return detail::toggle_host<false>(path, host);
}

// ---------------------------------------------------------------------------
// Wave planning
// ---------------------------------------------------------------------------

struct WavePlan {
    std::vector<std::vector<std::string>> waves;  // contiguous batches, input order
    size_t max_concurrent = 1;
};

inline WavePlan plan_waves(const nodeset::NodeList& nodes, size_t max_concurrent) {
    if (max_concurrent < 1) throw std::invalid_argument("max_concurrent must be >= 1");
    WavePlan plan;
    plan.max_concurrent = max_concurrent;
    for (size_t at = 0; at < nodes.nodes.size(); at += max_concurrent) {
        size_t len = std::min(max_concurrent, nodes.nodes.size() - at);
        plan.waves.emplace_back(nodes.nodes.begin() + long(at), nodes.nodes.begin() + long(at + len));
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Install jobs
// ---------------------------------------------------------------------------

enum class Flavor { OsInstall, FirmwareInstall };

inline const char* to_string(Flavor f) {
    return f == Flavor::OsInstall ? "os" : "firmware";
}

enum class JobState { Pending, Serving, Installing, Configured, RebootRequested, Done, Failed };

inline const char* to_string(JobState s) {
    switch (s) {
        case JobState::Pending:
            return "Pending";
        case JobState::Serving:
            return "Serving";
        case JobState::Installing:
            return "Installing";
        case JobState::Configured:
            return "Configured";
        case JobState::RebootRequested:
            return "RebootRequested";
        case JobState::Done:
            return "Done";
        case JobState::Failed:
            return "Failed";
    }
    return "?";
}

struct JobEvent {
    enum class Kind { State, Phase, Artifact, Callback };
    Kind kind;
    double at = 0;            // monotonic seconds
    std::string what;         // state name, phase name, path, ...
    int gauge = 0;            // concurrent non-terminal jobs when recorded
};

struct InstallJob {
    std::string node;
    Flavor flavor = Flavor::OsInstall;
    JobState state = JobState::Pending;
    std::vector<JobEvent> log;
    std::string artifact_path;  // firmware log artifact, when uploaded
    std::string error;
};

// Performs the node-side work of each install phase. Implementations must
// tolerate concurrent calls for distinct nodes.
class InstallAgent {
  public:
    virtual ~InstallAgent() = default;
    virtual bool serve(const std::string& node) = 0;
    // Reports completed sub-phases through `progress`; returns false on the
    // failing phase.
    virtual bool install(const std::string& node, Flavor flavor,
                         const std::function<void(const std::string&)>& progress) = 0;
    virtual bool configure(const std::string& node) = 0;        // OsInstall only
    virtual std::string firmware_log(const std::string& node) = 0;
    virtual bool reboot(const std::string& node) = 0;
};

inline const std::vector<std::string>& install_phases(Flavor f) {
    static const std::vector<std::string> os = {"partition", "mkfs", "fetch-tar", "unpack"};
    static const std::vector<std::string> fw = {"flash"};
    return f == Flavor::OsInstall ? os : fw;
}

// Test/desk-scale agent: configurable per-phase delay and failure injection.
class SimulatedAgent : public InstallAgent {
  public:
    double step_delay_s = 0;
    std::map<std::string, std::string> fail_at;  // node -> phase name
    std::string firmware_log_template = "firmware flash ok on ";

    bool serve(const std::string& node) override { return step(node, "serve"); }
    bool install(const std::string& node, Flavor flavor,
                 const std::function<void(const std::string&)>& progress) override {
        for (const auto& phase : install_phases(flavor)) {
            if (!step(node, phase)) return false;
            progress(phase);
        }
        return true;
    }
    bool configure(const std::string& node) override { return step(node, "configure"); }
    std::string firmware_log(const std::string& node) override { return firmware_log_template + node + "\n"; }
    bool reboot(const std::string& node) override { return step(node, "reboot"); }

  private:
    bool step(const std::string& node, const std::string& phase) {
        if (step_delay_s > 0)
            std::this_thread::sleep_for(std::chrono::duration<double>(step_delay_s));
        auto it = fail_at.find(node);
        return it == fail_at.end() || it->second != phase;
    }
};

// Drives per-phase commands on the node itself: `<program> <phase> <node>`.
class ExecAgent : public InstallAgent {
  public:
    explicit ExecAgent(std::string program, double timeout_s = 600)
        : program_(std::move(program)), timeout_s_(timeout_s) {}
    bool serve(const std::string& node) override { return step("serve", node); }
    bool install(const std::string& node, Flavor flavor,
                 const std::function<void(const std::string&)>& progress) override {
        for (const auto& phase : install_phases(flavor)) {
            if (!step(phase, node)) return false;
            progress(phase);
        }
        return true;
    }
    bool configure(const std::string& node) override { return step("configure", node); }
    std::string firmware_log(const std::string& node) override {
        auto r = proc::run_argv({program_, "firmware-log", node}, {}, {timeout_s_, 1 << 20});
        return r.out;
    }
    bool reboot(const std::string& node) override { return step("reboot", node); }

  private:
    bool step(const std::string& phase, const std::string& node) {
        return proc::run_argv({program_, phase, node}, {}, {timeout_s_, 1 << 20}).exit_status == 0;
    }
    std::string program_;
    double timeout_s_;
};

// Stores a firmware job's uploaded log on the head side. Valid only while
// the job is Installing.
inline std::string upload_log(InstallJob& job, std::string_view content, const std::string& artifact_dir) {
    if (job.flavor != Flavor::FirmwareInstall)
        throw std::logic_error("upload_log: job " + job.node + " is not a firmware install");
    if (job.state != JobState::Installing)
        throw std::logic_error("upload_log: job " + job.node + " is in state " +
                               to_string(job.state) + ", not Installing");
    std::filesystem::create_directories(artifact_dir);
    std::string path = artifact_dir + "/" + job.node + ".firmware.log";
    try {
        write_file_atomic(path, content);
    } catch (const std::exception& e) {
        job.state = JobState::Failed;
        job.error = std::string("artifact storage failed: ") + e.what();
        throw;
    }
    job.artifact_path = path;
    return path;
}

struct RunOptions {
    std::string bootptab_path;
    std::string artifact_dir = "artifacts";
};

struct RunSummary {
    std::vector<InstallJob> jobs;  // input node order
    int peak_concurrency = 0;
    size_t done = 0;
    size_t failed = 0;
};

namespace detail {

class Gauge {
  public:
    int enter() {
        int now = ++active_;
        int prev = peak_.load();
        while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
        }
        return now;
    }
    int leave() { return --active_; }
    int peak() const { return peak_.load(); }
    int active() const { return active_.load(); }

  private:
    std::atomic<int> active_{0};
    std::atomic<int> peak_{0};
};

}  // namespace detail

// Runs the plan wave by wave: all jobs of a wave start together, the next
// wave waits for the previous one to terminate. Each job walks
//   Pending -> Serving -> Installing [-> Configured] -> RebootRequested -> Done
// with any failure ending in Failed. On the success path the node comments
// itself out of the bootptab just before requesting the reboot.
inline RunSummary run_waves(const WavePlan& plan, Flavor flavor, InstallAgent& agent,
                            const RunOptions& opt) {
    // pre-flight: every node must have an enabled bootptab entry
    {
        auto file = parse_bootptab(read_file(opt.bootptab_path));
        for (const auto& wave : plan.waves)
            for (const auto& node : wave) {
                auto* e = file.find(node);
                if (!e) throw std::runtime_error("bootptab: no entry for host " + node);
                if (!e->enabled) throw std::runtime_error("bootptab: host " + node + " is disabled");
            }
    }

    RunSummary summary;
    detail::Gauge gauge;
    for (const auto& wave : plan.waves) {
        std::vector<InstallJob> jobs(wave.size());
        std::vector<std::thread> threads;
        for (size_t i = 0; i < wave.size(); ++i) {
            jobs[i].node = wave[i];
            jobs[i].flavor = flavor;
            threads.emplace_back([&, i] {
                InstallJob& job = jobs[i];
                int g = gauge.enter();
                auto log_state = [&](JobState st) {
                    job.state = st;
                    job.log.push_back({JobEvent::Kind::State, monotonic_seconds(), to_string(st),
                                       gauge.active()});
                };
                auto fail = [&](const std::string& why) {
                    job.error = why;
                    job.state = JobState::Failed;
                    job.log.push_back({JobEvent::Kind::State, monotonic_seconds(), "Failed",
                                       gauge.active()});
                };
                job.log.push_back({JobEvent::Kind::State, monotonic_seconds(), "Pending", g});

                log_state(JobState::Serving);
                if (!agent.serve(job.node)) {
                    fail("serve failed");
                    gauge.leave();
                    return;
                }
                log_state(JobState::Installing);
                bool installed = agent.install(job.node, flavor, [&](const std::string& phase) {
                    job.log.push_back({JobEvent::Kind::Phase, monotonic_seconds(), phase,
                                       gauge.active()});
                });
                if (!installed) {
                    fail("install failed");
                    gauge.leave();
                    return;
                }
                if (flavor == Flavor::OsInstall) {
                    if (!agent.configure(job.node)) {
                        fail("configure failed");
                        gauge.leave();
                        return;
                    }
                    log_state(JobState::Configured);
                } else {
                    try {
                        auto path = upload_log(job, agent.firmware_log(job.node), opt.artifact_dir);
                        job.log.push_back({JobEvent::Kind::Artifact, monotonic_seconds(), path,
                                           gauge.active()});
                    } catch (const std::exception& e) {
                        fail(e.what());
                        gauge.leave();
                        return;
                    }
                }
                // the comment-itself-out callback
                try {
                    comment_out(opt.bootptab_path, job.node);
                    job.log.push_back({JobEvent::Kind::Callback, monotonic_seconds(),
                                       "commented out of bootptab", gauge.active()});
                } catch (const std::exception& e) {
                    fail(std::string("bootptab callback failed: ") + e.what());
                    gauge.leave();
                    return;
                }
                log_state(JobState::RebootRequested);
                if (!agent.reboot(job.node)) {
                    // the node already commented itself out; a failed reboot
                    // means it must be served again, so put the entry back
                    try {
                        enable(opt.bootptab_path, job.node);
                        job.log.push_back({JobEvent::Kind::Callback, monotonic_seconds(),
                                           "re-enabled in bootptab after reboot failure",
                                           gauge.active()});
                    } catch (const std::exception&) {
                    }
                    fail("reboot failed");
                    gauge.leave();
                    return;
                }
                log_state(JobState::Done);
                gauge.leave();
            });
        }
        for (auto& t : threads) t.join();
        for (auto& j : jobs) summary.jobs.push_back(std::move(j));
    }
    summary.peak_concurrency = gauge.peak();
    for (const auto& j : summary.jobs)
        (j.state == JobState::Done ? summary.done : summary.failed) += 1;
    return summary;
}

}  // namespace cadm::netboot

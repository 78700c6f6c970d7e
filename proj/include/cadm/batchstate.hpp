#pragma once

// Batch-scheduler node states: query and mutate per-node state over a
// pluggable backend, and list the nodes of a job. Mutations run serially in
// list order and echo the canonical scheduler command per node.

#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cadm/nodeset.hpp"
#include "cadm/subprocess.hpp"
#include "cadm/util.hpp"

namespace cadm::batch {

enum class NodeState { Free, Down, Offline, Reserved, JobExclusive, JobSharing };

inline std::string to_string(NodeState s) {
    switch (s) {
        case NodeState::Free:
            return "free";
        case NodeState::Down:
            return "down";
        case NodeState::Offline:
            return "offline";
        case NodeState::Reserved:
            return "reserved";
        case NodeState::JobExclusive:
            return "job-exclusive";
        case NodeState::JobSharing:
            return "job-sharing";
    }
    return "?";
}

inline std::optional<NodeState> parse_node_state(std::string_view s) {
    if (s == "free") return NodeState::Free;
    if (s == "down") return NodeState::Down;
    if (s == "offline") return NodeState::Offline;
    if (s == "reserved") return NodeState::Reserved;
    if (s == "job-exclusive") return NodeState::JobExclusive;
    if (s == "job-sharing") return NodeState::JobSharing;
    return std::nullopt;
}

struct JobId {
    std::string value;
    explicit JobId(std::string v) : value(std::move(v)) {
        if (value.empty()) throw std::invalid_argument("empty job id");
    }
};

struct BackendError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnknownJobError : std::runtime_error {
    explicit UnknownJobError(const std::string& job) : std::runtime_error("unknown job " + job) {}
};

enum class TargetState { Offline, Free };

class BatchBackend {
  public:
    virtual ~BatchBackend() = default;
    virtual NodeState get_state(const std::string& node) = 0;
    virtual void set_offline(const std::string& node) = 0;
    virtual void set_free(const std::string& node) = 0;
    virtual nodeset::NodeList job_nodes(const JobId& job) = 0;

    // The exact scheduler command this mutation stands for; echoed to the
    // user and, for exec backends, actually run.
    virtual std::string command_line(TargetState target, const std::string& node) const {
        return std::string("pbsnodes ") + (target == TargetState::Offline ? "-o " : "-c ") + node;
    }
};

// In-memory cluster with configurable states and jobs.
class MockBackend : public BatchBackend {
  public:
    std::map<std::string, NodeState> states;
    std::map<std::string, std::vector<std::string>> jobs;

    NodeState get_state(const std::string& node) override {
        auto it = states.find(node);
        if (it == states.end()) throw BackendError("unknown node " + node);
        return it->second;
    }
    void set_offline(const std::string& node) override { mutate(node, NodeState::Offline); }
    void set_free(const std::string& node) override { mutate(node, NodeState::Free); }
    nodeset::NodeList job_nodes(const JobId& job) override {
        auto it = jobs.find(job.value);
        if (it == jobs.end()) throw UnknownJobError(job.value);
        return nodeset::NodeList{it->second};
    }

  private:
    void mutate(const std::string& node, NodeState target) {
        auto it = states.find(node);
        if (it == states.end()) throw BackendError("unknown node " + node);
        it->second = target;
    }
};

// Shells out to an external scheduler command:
//   <program> -o <node> | -c <node> | -s <node> (prints a state token) |
//   <program> -l <job>  (prints one hostname per line)
class ExecBackend : public BatchBackend {
  public:
    explicit ExecBackend(std::string program = "pbsnodes", double timeout_s = 30)
        : program_(std::move(program)), timeout_s_(timeout_s) {}

    NodeState get_state(const std::string& node) override {
        auto r = run({program_, "-s", node});
        auto st = parse_node_state(trim(r.out));
        if (!st) throw BackendError(program_ + " -s " + node + ": unparsable state `" +
                                    std::string(trim(r.out)) + "`");
        return *st;
    }
    void set_offline(const std::string& node) override { run({program_, "-o", node}); }
    void set_free(const std::string& node) override { run({program_, "-c", node}); }
    nodeset::NodeList job_nodes(const JobId& job) override {
        auto r = run({program_, "-l", job.value});
        nodeset::NodeList out;
        for (const auto& line : split(r.out, '\n')) {
            auto t = trim(line);
            if (!t.empty()) out.nodes.emplace_back(t);
        }
        return out;
    }
    std::string command_line(TargetState target, const std::string& node) const override {
        return program_ + (target == TargetState::Offline ? " -o " : " -c ") + node;
    }

  private:
    proc::RunResult run(const std::vector<std::string>& argv) {
        auto r = proc::run_argv(argv, {}, {timeout_s_, 1 << 20});
        if (r.exit_status != 0)
            throw BackendError(join(argv, " ") + " failed with status " +
                               std::to_string(r.exit_status) +
                               (r.err.empty() ? "" : ": " + std::string(trim(r.err))));
        return r;
    }
    std::string program_;
    double timeout_s_;
};

struct StateReport {
    struct Entry {
        std::string node;
        std::string echoed;
        bool ok = true;
        std::string error;
    };
    std::vector<Entry> entries;
    std::string out;  // the echoed command lines, newline separated
    std::string err;  // one line per failed node
    int exit_code = 0;
};

// Serial, in list order. Processing continues past failures; the exit code
// reports whether any node failed.
inline StateReport set_state(const nodeset::NodeList& nodes, TargetState target, BatchBackend& backend) {
    StateReport rep;
    for (const auto& node : nodes.nodes) {
        StateReport::Entry e;
        e.node = node;
        e.echoed = backend.command_line(target, node);
        rep.out += e.echoed + "\n";
        try {
            if (target == TargetState::Offline)
                backend.set_offline(node);
            else
                backend.set_free(node);
        } catch (const std::exception& ex) {
            e.ok = false;
            e.error = ex.what();
            rep.err += "error: " + node + ": " + ex.what() + "\n";
            rep.exit_code = 1;
        }
        rep.entries.push_back(std::move(e));
    }
    return rep;
}

inline nodeset::NodeList list_job_nodes(const JobId& job, BatchBackend& backend) {
    return backend.job_nodes(job);
}

// ---------------------------------------------------------------------------
// Mock-cluster state file, used by the CLI so mutations persist across
// invocations (and pipelines). Lines:
//   node <name> <state>
//   job <id> <node> [<node>...]
// ---------------------------------------------------------------------------

inline MockBackend parse_cluster_file(std::string_view text) {
    MockBackend b;
    size_t lineno = 0;
    for (const auto& raw : split(text, '\n')) {
        ++lineno;
        auto line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        auto tok = split_ws(line);
        auto fail = [&](const std::string& why) {
            throw std::runtime_error("cluster file line " + std::to_string(lineno) + ": " + why);
        };
        if (tok[0] == "node") {
            if (tok.size() != 3) fail("expected: node <name> <state>");
            auto st = parse_node_state(tok[2]);
            if (!st) fail("unknown state " + tok[2]);
            b.states[tok[1]] = *st;
        } else if (tok[0] == "job") {
            if (tok.size() < 3) fail("expected: job <id> <node>...");
            b.jobs[tok[1]] = std::vector<std::string>(tok.begin() + 2, tok.end());
        } else {
            fail("unknown directive " + tok[0]);
        }
    }
    return b;
}

inline std::string render_cluster_file(const MockBackend& b) {
    std::string out;
    for (const auto& [node, st] : b.states) out += "node " + node + " " + to_string(st) + "\n";
    for (const auto& [job, nodes] : b.jobs) out += "job " + job + " " + join(nodes, " ") + "\n";
    return out;
}

}  // namespace cadm::batch

#pragma once

// Parallel command execution over a node set, flat or through an nway tree
// of delegate nodes. Delegates run the payload command themselves and relay
// it to their slice of the tree; the controller aggregates per-node results
// and ORs the exit statuses.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "cadm/nodeset.hpp"
#include "cadm/subprocess.hpp"
#include "cadm/util.hpp"

namespace cadm::fanout {

inline constexpr int kTimeoutStatus = proc::kTimeoutStatus;          // 124
inline constexpr int kLaunchFailureStatus = proc::kLaunchFailureStatus;  // 125

struct ExecResult {
    std::string node;
    int exit_status = 0;
    std::string out;
    std::string err;
    bool timed_out = false;
    bool truncated = false;
    double duration = 0;
};

struct ExecReport {
    std::vector<ExecResult> results;  // input node order
    int aggregate_status = 0;         // OR of all exit statuses
};

// One level of the fanout tree. A node with an empty delegate name is the
// controller itself (the root). Delegates appear before leaves in traversal
// order; build_tree's slicing keeps that consistent with the input order.
struct TreeNode {
    std::string delegate;
    std::vector<TreeNode> children;
    std::vector<std::string> leaves;
};

struct FanoutPlan {
    TreeNode root;
    unsigned nway = 0;  // 0 = flat
};

class Transport {
  public:
    virtual ~Transport() = default;
    // Must tolerate concurrent calls for distinct nodes.
    virtual proc::RunResult run(const std::string& node, const std::string& command,
                                double timeout_s, size_t max_capture) = 0;
};

// Spawns `/bin/sh -c command` per node with CADM_NODE set; the desk-scale
// stand-in for a remote shell.
class LocalProcessTransport : public Transport {
  public:
    proc::RunResult run(const std::string& node, const std::string& command, double timeout_s,
                        size_t max_capture) override {
        proc::RunLimits lim{timeout_s, max_capture};
        return proc::run_shell(command, {{"CADM_NODE", node}}, lim);
    }
};

// Invokes `<program> <node> <command>`, the rsh/ssh calling convention.
class RemoteShellTransport : public Transport {
  public:
    explicit RemoteShellTransport(std::string program) : program_(std::move(program)) {}
    proc::RunResult run(const std::string& node, const std::string& command, double timeout_s,
                        size_t max_capture) override {
        proc::RunLimits lim{timeout_s, max_capture};
        return proc::run_argv({program_, node, command}, {}, lim);
    }
    const std::string& program() const { return program_; }

  private:
    std::string program_;
};

// transport spec strings: "local" or "shell:<program>"
inline std::unique_ptr<Transport> make_transport(std::string_view spec) {
    if (spec == "local") return std::make_unique<LocalProcessTransport>();
    if (spec.rfind("shell:", 0) == 0) return std::make_unique<RemoteShellTransport>(std::string(spec.substr(6)));
    if (spec == "shell") return std::make_unique<RemoteShellTransport>("ssh");
    throw std::invalid_argument("unknown transport spec: " + std::string(spec));
}

namespace detail {

// Contiguous slices, sizes as equal as possible with the larger slices
// first; the slice head becomes the delegate for the rest of its slice.
inline void build_entries(std::span<const std::string> list, unsigned k, TreeNode& parent) {
    if (list.empty()) return;
    size_t nslices = std::min<size_t>(k, list.size());
    size_t base = list.size() / nslices;
    size_t rem = list.size() % nslices;
    size_t pos = 0;
    for (size_t i = 0; i < nslices; ++i) {
        size_t len = base + (i < rem ? 1 : 0);
        auto slice = list.subspan(pos, len);
        pos += len;
        if (len == 1) {
            parent.leaves.push_back(slice[0]);
        } else {
            TreeNode d;
            d.delegate = slice[0];
            build_entries(slice.subspan(1), k, d);
            parent.children.push_back(std::move(d));
        }
    }
}

inline void collect_nodes(const TreeNode& t, std::vector<std::string>& out) {
    if (!t.delegate.empty()) out.push_back(t.delegate);
    for (const auto& c : t.children) collect_nodes(c, out);
    for (const auto& l : t.leaves) out.push_back(l);
}

}  // namespace detail

inline FanoutPlan build_tree(const nodeset::NodeList& nodes, unsigned nway) {
    if (nodes.nodes.empty()) throw std::invalid_argument("empty node list");
    std::set<std::string> uniq(nodes.nodes.begin(), nodes.nodes.end());
    if (uniq.size() != nodes.nodes.size()) throw std::invalid_argument("duplicate nodes in list");
    FanoutPlan plan;
    plan.nway = nway;
    if (nway == 0)
        plan.root.leaves = nodes.nodes;
    else
        detail::build_entries(nodes.nodes, nway, plan.root);
    return plan;
}

inline std::vector<std::string> plan_nodes(const FanoutPlan& plan) {
    std::vector<std::string> out;
    detail::collect_nodes(plan.root, out);
    return out;
}

struct ExecOptions {
    double timeout_s = 10;
    size_t max_capture = proc::kDefaultMaxCapture;
    // Relay mode: delegate subtrees are handed to a fresh copy of the tool
    // running on the delegate, invoked as `<relay_argv_prefix> <payload>`.
    bool relay = false;
    std::string relay_argv_prefix;
    std::string relay_transport_spec = "local";
    double relay_grace_s = 10;  // extra wall budget for a delegate invocation
};

// ---------------------------------------------------------------------------
// Relay wire formats. Both are interface contracts: a controller and a
// delegate built from different checkouts must interoperate byte-exact.
//
// Sub-plan payload (base64 of):  timeout US transport-spec US tree US command
// where US is 0x1f and tree is `name` or `name(entry,...)`.
//
// Result stream: per node one length-prefixed block
//   <len> US node US exit-status US stdout-len US stderr-len <stdout bytes> <stderr bytes>
// with <len> the decimal byte length of the header between the first US and
// the start of the stdout bytes.
// ---------------------------------------------------------------------------

inline constexpr char kUS = '\x1f';

namespace detail {

inline void check_relay_name(const std::string& name) {
    if (name.empty() || name.find_first_of("(),\x1f") != std::string::npos)
        throw std::invalid_argument("node name not relayable: " + name);
}

inline void serialize_tree(const TreeNode& t, std::string& out) {
    check_relay_name(t.delegate);
    out += t.delegate;
    if (t.children.empty() && t.leaves.empty()) return;
    out += '(';
    bool first = true;
    for (const auto& c : t.children) {
        if (!first) out += ',';
        first = false;
        serialize_tree(c, out);
    }
    for (const auto& l : t.leaves) {
        if (!first) out += ',';
        first = false;
        check_relay_name(l);
        out += l;
    }
    out += ')';
}

inline TreeNode parse_tree(std::string_view s, size_t& pos) {
    TreeNode t;
    size_t start = pos;
    while (pos < s.size() && s[pos] != '(' && s[pos] != ')' && s[pos] != ',') ++pos;
    t.delegate = std::string(s.substr(start, pos - start));
    if (t.delegate.empty()) throw std::invalid_argument("bad tree text");
    if (pos < s.size() && s[pos] == '(') {
        ++pos;
        while (true) {
            TreeNode entry = parse_tree(s, pos);
            if (entry.children.empty() && entry.leaves.empty())
                t.leaves.push_back(entry.delegate);
            else
                t.children.push_back(std::move(entry));
            if (pos >= s.size()) throw std::invalid_argument("bad tree text");
            if (s[pos] == ',') {
                ++pos;
                continue;
            }
            if (s[pos] == ')') {
                ++pos;
                break;
            }
            throw std::invalid_argument("bad tree text");
        }
    }
    return t;
}

}  // namespace detail

struct SubplanSpec {
    TreeNode tree;  // tree.delegate is the node this relay runs on
    std::string command;
    double timeout_s = 10;
    std::string transport_spec = "local";
};

inline std::string serialize_subplan(const TreeNode& subtree, const std::string& command,
                                     double timeout_s, const std::string& transport_spec) {
    std::string tree_text;
    detail::serialize_tree(subtree, tree_text);
    char tbuf[32];
    std::snprintf(tbuf, sizeof tbuf, "%.6g", timeout_s);
    std::string payload;
    payload += tbuf;
    payload += kUS;
    payload += transport_spec;
    payload += kUS;
    payload += tree_text;
    payload += kUS;
    payload += command;  // last field: may itself contain US bytes
    return base64_encode(payload);
}

inline SubplanSpec parse_subplan(std::string_view encoded) {
    auto decoded = base64_decode(encoded);
    if (!decoded) throw std::invalid_argument("relay payload: bad base64");
    std::string_view s = *decoded;
    auto take = [&]() {
        size_t us = s.find(kUS);
        if (us == std::string_view::npos) throw std::invalid_argument("relay payload: missing field");
        auto f = s.substr(0, us);
        s.remove_prefix(us + 1);
        return f;
    };
    SubplanSpec spec;
    auto t = parse_f64(take());
    if (!t || *t <= 0) throw std::invalid_argument("relay payload: bad timeout");
    spec.timeout_s = *t;
    spec.transport_spec = std::string(take());
    std::string_view tree_text = take();
    size_t pos = 0;
    spec.tree = detail::parse_tree(tree_text, pos);
    if (pos != tree_text.size()) throw std::invalid_argument("relay payload: trailing tree text");
    spec.command = std::string(s);
    return spec;
}

inline void write_result_frame(std::ostream& os, const ExecResult& r) {
    std::string header = r.node;
    header += kUS;
    header += std::to_string(r.exit_status);
    header += kUS;
    header += std::to_string(r.out.size());
    header += kUS;
    header += std::to_string(r.err.size());
    os << header.size() << kUS << header;
    os.write(r.out.data(), std::streamsize(r.out.size()));
    os.write(r.err.data(), std::streamsize(r.err.size()));
}

// Parses as many complete blocks as the stream holds; stops quietly at the
// first malformed or partial block (a killed delegate truncates mid-frame).
inline std::vector<ExecResult> parse_result_frames(std::string_view s) {
    std::vector<ExecResult> out;
    while (!s.empty()) {
        size_t us = s.find(kUS);
        if (us == std::string_view::npos || us == 0) return out;
        auto hlen = parse_u64(s.substr(0, us));
        if (!hlen || us + 1 + *hlen > s.size()) return out;
        std::string_view header = s.substr(us + 1, *hlen);
        auto fields = split(header, kUS);
        if (fields.size() != 4) return out;
        auto status = parse_i64(fields[1]);
        auto outlen = parse_u64(fields[2]);
        auto errlen = parse_u64(fields[3]);
        if (fields[0].empty() || !status || !outlen || !errlen) return out;
        size_t body = us + 1 + *hlen;
        if (body + *outlen + *errlen > s.size()) return out;
        ExecResult r;
        r.node = fields[0];
        r.exit_status = int(*status);
        r.out = std::string(s.substr(body, *outlen));
        r.err = std::string(s.substr(body + *outlen, *errlen));
        r.timed_out = (r.exit_status == kTimeoutStatus);
        out.push_back(std::move(r));
        s.remove_prefix(body + *outlen + *errlen);
    }
    return out;
}

namespace detail {

class ResultCollector {
  public:
    void add(ExecResult r) {
        std::lock_guard<std::mutex> g(mu_);
        results_[r.node] = std::move(r);
    }
    bool contains(const std::string& node) {
        std::lock_guard<std::mutex> g(mu_);
        return results_.count(node) != 0;
    }
    std::optional<ExecResult> take(const std::string& node) {
        std::lock_guard<std::mutex> g(mu_);
        auto it = results_.find(node);
        if (it == results_.end()) return std::nullopt;
        ExecResult r = std::move(it->second);
        results_.erase(it);
        return r;
    }

  private:
    std::mutex mu_;
    std::map<std::string, ExecResult> results_;
};

inline ExecResult to_exec_result(const std::string& node, proc::RunResult&& rr) {
    ExecResult r;
    r.node = node;
    r.exit_status = rr.exit_status;
    r.out = std::move(rr.out);
    r.err = std::move(rr.err);
    r.timed_out = rr.timed_out;
    r.truncated = rr.truncated;
    r.duration = rr.duration;
    return r;
}

inline void run_one(const std::string& node, const std::string& command, Transport& tr,
                    const ExecOptions& opt, ResultCollector& col) {
    col.add(to_exec_result(node, tr.run(node, command, opt.timeout_s, opt.max_capture)));
}

// In-process traversal: every tree entry gets a thread; a delegate's own
// command runs concurrently with its subtree.
inline void run_subtree(const TreeNode& t, const std::string& command, Transport& tr,
                        const ExecOptions& opt, ResultCollector& col) {
    std::vector<std::thread> threads;
    if (!t.delegate.empty())
        threads.emplace_back([&] { run_one(t.delegate, command, tr, opt, col); });
    for (const auto& c : t.children)
        threads.emplace_back([&c, &command, &tr, &opt, &col] { run_subtree(c, command, tr, opt, col); });
    for (const auto& l : t.leaves)
        threads.emplace_back([&l, &command, &tr, &opt, &col] { run_one(l, command, tr, opt, col); });
    for (auto& th : threads) th.join();
}

// Relay traversal: subtrees are shipped to the delegate as a serialized
// sub-plan; the frames it streams back stand in for the whole subtree.
inline void run_subtree_relay(const TreeNode& t, const std::string& command, Transport& tr,
                              const ExecOptions& opt, ResultCollector& col) {
    std::vector<std::thread> threads;
    for (const auto& c : t.children) {
        threads.emplace_back([&c, &command, &tr, &opt, &col] {
            std::string payload =
                serialize_subplan(c, command, opt.timeout_s, opt.relay_transport_spec);
            std::string cmdline = opt.relay_argv_prefix + " " + payload;
            proc::RunResult rr =
                tr.run(c.delegate, cmdline, opt.timeout_s + opt.relay_grace_s, opt.max_capture);
            bool launch_failed = rr.launch_failed;
            bool relay_timed_out = rr.timed_out;
            for (auto& r : parse_result_frames(rr.out)) col.add(std::move(r));
            // Nodes without a frame get the relay invocation's failure mode.
            std::vector<std::string> subtree_nodes;
            collect_nodes(c, subtree_nodes);
            for (const auto& n : subtree_nodes) {
                if (col.contains(n)) continue;
                ExecResult miss;
                miss.node = n;
                miss.exit_status = launch_failed ? kLaunchFailureStatus : kTimeoutStatus;
                miss.timed_out = !launch_failed;
                miss.err = relay_timed_out ? "relay to " + c.delegate + " timed out"
                                           : "no result relayed via " + c.delegate;
                col.add(std::move(miss));
            }
        });
    }
    for (const auto& l : t.leaves)
        threads.emplace_back([&l, &command, &tr, &opt, &col] { run_one(l, command, tr, opt, col); });
    for (auto& th : threads) th.join();
}

}  // namespace detail

inline ExecReport execute(const FanoutPlan& plan, const std::string& command, Transport& transport,
                          const ExecOptions& opt = {}) {
    if (opt.timeout_s <= 0) throw std::invalid_argument("timeout must be positive");
    detail::ResultCollector col;
    if (opt.relay && plan.nway > 0)
        detail::run_subtree_relay(plan.root, command, transport, opt, col);
    else
        detail::run_subtree(plan.root, command, transport, opt, col);

    ExecReport report;
    for (const auto& node : plan_nodes(plan)) {
        auto r = col.take(node);
        if (!r) {
            ExecResult miss;
            miss.node = node;
            miss.exit_status = kLaunchFailureStatus;
            miss.err = "no result collected";
            r = std::move(miss);
        }
        report.aggregate_status |= r->exit_status;
        report.results.push_back(std::move(*r));
    }
    return report;
}

// Command line used to start a nested relay on a further delegate. Resolved
// from /proc/self/exe so controller and delegates agree on the binary.
inline std::string relay_argv_prefix() {
    char buf[4096];
    ssize_t n = ::readlink("/proc/self/exe", buf, sizeof buf - 1);
    if (n <= 0) throw std::runtime_error("cannot resolve /proc/self/exe");
    buf[n] = '\0';
    return std::string(buf) + " --relay";
}

// The relay side of execute(): runs this delegate's own command plus its
// subtree and streams one frame per node, controller format above.
inline void run_relay(const SubplanSpec& spec, std::ostream& frames_out,
                      size_t max_capture = proc::kDefaultMaxCapture) {
    auto transport = make_transport(spec.transport_spec);
    detail::ResultCollector col;
    ExecOptions opt;
    opt.timeout_s = spec.timeout_s;
    opt.max_capture = max_capture;
    opt.relay = true;
    opt.relay_transport_spec = spec.transport_spec;

    LocalProcessTransport self_transport;  // the delegate runs its own copy locally
    std::thread own([&] { detail::run_one(spec.tree.delegate, spec.command, self_transport, opt, col); });

    // Relay onward: children get nested relay invocations through the same
    // command line this process was started with.
    opt.relay_argv_prefix = relay_argv_prefix();
    TreeNode rest;
    rest.children = spec.tree.children;
    rest.leaves = spec.tree.leaves;
    detail::run_subtree_relay(rest, spec.command, *transport, opt, col);
    own.join();

    std::vector<std::string> nodes;
    detail::collect_nodes(spec.tree, nodes);
    for (const auto& n : nodes) {
        auto r = col.take(n);
        if (!r) continue;
        write_result_frame(frames_out, *r);
    }
    frames_out.flush();
}

inline std::string format_report(const ExecReport& report) {
    std::string out;
    for (const auto& r : report.results) {
        out += "= " + r.node + " =\n";
        if (!r.out.empty()) {
            out += r.out;
            if (out.back() != '\n') out += '\n';
        }
        if (!r.err.empty()) {
            std::string_view err = r.err;
            while (!err.empty()) {
                size_t nl = err.find('\n');
                std::string_view line = err.substr(0, nl);
                out += "! ";
                out += line;
                out += '\n';
                if (nl == std::string_view::npos) break;
                err.remove_prefix(nl + 1);
            }
        }
        if (r.timed_out) out += "TIMEOUT\n";
    }
    return out;
}

}  // namespace cadm::fanout

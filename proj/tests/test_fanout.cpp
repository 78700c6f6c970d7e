#include "cadm/fanout.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <random>
#include <sstream>

using namespace cadm;
using namespace cadm::fanout;
using nodeset::NodeList;

namespace {

// Deterministic transport: canned status/output per node, records calls.
class FakeTransport : public Transport {
  public:
    std::map<std::string, int> status;
    std::map<std::string, std::string> output;
    proc::RunResult run(const std::string& node, const std::string&, double, size_t) override {
        proc::RunResult r;
        auto its = status.find(node);
        r.exit_status = its == status.end() ? 0 : its->second;
        auto ito = output.find(node);
        r.out = ito == output.end() ? "" : ito->second;
        return r;
    }
};

NodeList seq_nodes(int n, const std::string& prefix = "n") {
    NodeList l;
    for (int i = 0; i < n; ++i) l.nodes.push_back(prefix + std::to_string(i));
    return l;
}

void check_branching(const TreeNode& t, unsigned k) {
    REQUIRE(t.children.size() <= k);
    for (const auto& c : t.children) check_branching(c, k);
}

}  // namespace

TEST_CASE("build_tree: nway=0 is flat") {
    auto plan = build_tree(NodeList{{"a", "b", "c", "d"}}, 0);
    CHECK(plan.root.children.empty());
    CHECK(plan.root.leaves == std::vector<std::string>{"a", "b", "c", "d"});
}

TEST_CASE("build_tree: single node under nway=2 stays depth 1") {
    auto plan = build_tree(NodeList{{"a"}}, 2);
    CHECK(plan.root.children.empty());
    CHECK(plan.root.leaves == std::vector<std::string>{"a"});
}

TEST_CASE("build_tree: six nodes nway=2, contiguous slices") {
    auto plan = build_tree(NodeList{{"a", "b", "c", "d", "e", "f"}}, 2);
    REQUIRE(plan.root.children.size() == 2);
    CHECK(plan.root.leaves.empty());
    const auto& d0 = plan.root.children[0];
    const auto& d1 = plan.root.children[1];
    CHECK(d0.delegate == "a");
    CHECK(d0.leaves == std::vector<std::string>{"b", "c"});
    CHECK(d1.delegate == "d");
    CHECK(d1.leaves == std::vector<std::string>{"e", "f"});
    // every node exactly once, brute-force set check
    auto all = plan_nodes(plan);
    std::sort(all.begin(), all.end());
    CHECK(all == std::vector<std::string>{"a", "b", "c", "d", "e", "f"});
}

TEST_CASE("build_tree rejects duplicates and empty lists") {
    CHECK_THROWS_AS(build_tree(NodeList{}, 0), std::invalid_argument);
    CHECK_THROWS_AS(build_tree(NodeList{{"a", "a"}}, 2), std::invalid_argument);
}

TEST_CASE("property: coverage and branching over random lists") {
    std::mt19937 rng(7);
    for (int iter = 0; iter < 120; ++iter) {
        int n = 1 + int(rng() % 500);
        unsigned nway = std::vector<unsigned>{0, 1, 2, 3, 7}[rng() % 5];
        auto nodes = seq_nodes(n);
        auto plan = build_tree(nodes, nway);
        auto got = plan_nodes(plan);
        REQUIRE(got == nodes.nodes);  // exact input order, hence exactly-once coverage
        if (nway > 0) check_branching(plan.root, nway);
        if (nway == 0) REQUIRE(plan.root.children.empty());
    }
}

TEST_CASE("execute: OR aggregation, order, fold oracle") {
    FakeTransport tr;
    tr.status = {{"x", 0}, {"y", 3}, {"z", 4}};
    auto plan = build_tree(NodeList{{"x", "y", "z"}}, 0);
    auto report = execute(plan, "whatever", tr, {});
    CHECK(report.aggregate_status == 7);
    REQUIRE(report.results.size() == 3);
    CHECK(report.results[0].node == "x");
    CHECK(report.results[2].node == "z");

    std::mt19937 rng(11);
    for (int iter = 0; iter < 200; ++iter) {
        int n = 1 + int(rng() % 40);
        FakeTransport ft;
        auto nodes = seq_nodes(n);
        int expected = 0;  // independent fold
        for (const auto& nd : nodes.nodes) {
            int st = int(rng() % 256);
            ft.status[nd] = st;
            expected |= st;
        }
        unsigned nway = rng() % 2 ? 0 : 2;
        auto rep = execute(build_tree(nodes, nway), "c", ft, {});
        REQUIRE(rep.aggregate_status == expected);
        bool all_zero = std::all_of(rep.results.begin(), rep.results.end(),
                                    [](const ExecResult& r) { return r.exit_status == 0 && !r.timed_out; });
        REQUIRE((rep.aggregate_status == 0) == all_zero);
    }
}

TEST_CASE("execute: local processes see their node name") {
    LocalProcessTransport tr;
    auto plan = build_tree(seq_nodes(3), 0);
    auto rep = execute(plan, "echo node=$CADM_NODE", tr, {});
    CHECK(rep.aggregate_status == 0);
    for (int i = 0; i < 3; ++i) CHECK(rep.results[size_t(i)].out == "node=n" + std::to_string(i) + "\n");
}

TEST_CASE("execute: timeout marks node 124 and ORs in") {
    LocalProcessTransport tr;
    ExecOptions opt;
    opt.timeout_s = 0.3;
    auto rep = execute(build_tree(NodeList{{"slow", "fast"}}, 0), "test \"$CADM_NODE\" = fast || sleep 5", tr, opt);
    REQUIRE(rep.results.size() == 2);
    CHECK(rep.results[0].timed_out);
    CHECK(rep.results[0].exit_status == 124);
    CHECK_FALSE(rep.results[1].timed_out);
    CHECK(rep.results[1].exit_status == 0);
    CHECK(rep.aggregate_status == 124);
}

TEST_CASE("execute: transport launch failure is a per-node 125") {
    RemoteShellTransport tr("/nonexistent/cadm-fake-rsh");
    auto rep = execute(build_tree(seq_nodes(2), 0), "true", tr, {});
    CHECK(rep.results[0].exit_status == 125);
    CHECK(rep.results[1].exit_status == 125);
    CHECK(rep.aggregate_status == 125);
}

TEST_CASE("execute: flat fanout is parallel, not serial") {
    LocalProcessTransport tr;
    ExecOptions opt;
    opt.timeout_s = 20;
    const double d = 0.5;
    auto plan = build_tree(seq_nodes(60), 0);
    double t0 = monotonic_seconds();
    auto rep = execute(plan, "sleep 0.5", tr, opt);
    double wall = monotonic_seconds() - t0;
    CHECK(rep.aggregate_status == 0);
    CHECK(wall < 2 * d);
}

TEST_CASE("execute: output buffering is bounded and flagged") {
    LocalProcessTransport tr;
    ExecOptions opt;
    opt.max_capture = 1000;
    auto rep = execute(build_tree(NodeList{{"n"}}, 0), "head -c 100000 /dev/zero | tr '\\0' x", tr, opt);
    CHECK(rep.results[0].truncated);
    CHECK(rep.results[0].out.size() == 1000);
    CHECK(rep.results[0].exit_status == 0);
}

TEST_CASE("format_report golden") {
    ExecReport rep;
    CHECK(format_report(rep).empty());

    ExecResult a;
    a.node = "n1";
    a.out = "hi\n";
    rep.results.push_back(a);
    CHECK(format_report(rep) == "= n1 =\nhi\n");

    ExecResult b;
    b.node = "n2";
    b.out = "partial";  // no trailing newline
    b.err = "oops\nbad";
    rep.results.push_back(b);
    ExecResult c;
    c.node = "n3";
    c.exit_status = 124;
    c.timed_out = true;
    rep.results.push_back(c);
    CHECK(format_report(rep) ==
          "= n1 =\nhi\n"
          "= n2 =\npartial\n! oops\n! bad\n"
          "= n3 =\nTIMEOUT\n");
}

TEST_CASE("format_report is deterministic") {
    FakeTransport tr;
    tr.output = {{"n0", "alpha\n"}, {"n1", "beta\n"}, {"n2", ""}};
    auto plan = build_tree(seq_nodes(3), 2);
    auto r1 = format_report(execute(plan, "c", tr, {}));
    auto r2 = format_report(execute(plan, "c", tr, {}));
    CHECK(r1 == r2);
}

TEST_CASE("relay frames: golden bytes and round trip") {
    ExecResult r;
    r.node = "n1";
    r.exit_status = 0;
    r.out = "hi\n";
    std::ostringstream os;
    write_result_frame(os, r);
    // header "n1<US>0<US>3<US>0" is 8 bytes, then the 3 stdout bytes
    CHECK(os.str() == std::string("8\x1f"
                                  "n1\x1f"
                                  "0\x1f"
                                  "3\x1f"
                                  "0"
                                  "hi\n"));

    ExecResult r2;
    r2.node = "w04";
    r2.exit_status = 124;
    r2.out = std::string("bin\x00\x1f\xffmid", 10);
    r2.err = "E\n";
    write_result_frame(os, r2);
    auto parsed = parse_result_frames(os.str());
    REQUIRE(parsed.size() == 2);
    CHECK(parsed[0].node == "n1");
    CHECK(parsed[0].out == "hi\n");
    CHECK(parsed[1].node == "w04");
    CHECK(parsed[1].exit_status == 124);
    CHECK(parsed[1].timed_out);
    CHECK(parsed[1].out == r2.out);
    CHECK(parsed[1].err == "E\n");

    // a truncated stream parses only the complete prefix
    auto bytes = os.str();
    auto partial = parse_result_frames(std::string_view(bytes).substr(0, bytes.size() - 3));
    CHECK(partial.size() == 1);
}

TEST_CASE("subplan payload round trip") {
    auto plan = build_tree(NodeList{{"a", "b", "c", "d", "e", "f"}}, 2);
    const TreeNode& sub = plan.root.children[0];
    std::string cmd = "echo 'x y' | tr a \x1f";
    auto payload = serialize_subplan(sub, cmd, 7.5, "shell:/usr/bin/frsh");
    auto spec = parse_subplan(payload);
    CHECK(spec.tree.delegate == "a");
    REQUIRE(spec.tree.leaves == std::vector<std::string>{"b", "c"});
    CHECK(spec.command == cmd);
    CHECK(spec.timeout_s == 7.5);
    CHECK(spec.transport_spec == "shell:/usr/bin/frsh");

    CHECK_THROWS(parse_subplan("not-base64!!"));
}

TEST_CASE("run_relay emits one frame per subtree node") {
    SubplanSpec spec;
    spec.tree.delegate = "a";
    spec.tree.leaves = {"b", "c"};
    spec.command = "echo via-$CADM_NODE";
    spec.timeout_s = 10;
    spec.transport_spec = "local";
    std::ostringstream frames;
    run_relay(spec, frames);
    auto results = parse_result_frames(frames.str());
    REQUIRE(results.size() == 3);
    std::map<std::string, std::string> by_node;
    for (const auto& r : results) by_node[r.node] = r.out;
    CHECK(by_node["a"] == "via-a\n");
    CHECK(by_node["b"] == "via-b\n");
    CHECK(by_node["c"] == "via-c\n");
}

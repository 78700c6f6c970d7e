#include "cadm/netboot.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>
#include <thread>

#include "test_helpers.hpp"

using namespace cadm;
using namespace cadm::netboot;

namespace {

std::string demo_bootptab(int n = 10) {
    std::string text = "# boot table\n";
    for (int i = 1; i <= n; ++i) {
        std::string h = "w" + std::to_string(i);
        text += h + ":ha=00:ip=10.0.0." + std::to_string(i) + ":bf=/boot/" + h + "\n";
    }
    return text;
}

// Independent legality oracle for job logs: allowed successor states per
// flavor, with Failed reachable from anywhere.
bool legal_path(const InstallJob& job) {
    std::vector<std::string> path;
    for (const auto& ev : job.log)
        if (ev.kind == JobEvent::Kind::State) path.push_back(ev.what);
    if (path.empty() || path.front() != "Pending") return false;
    auto allowed = [&](const std::string& from, const std::string& to) {
        if (to == "Failed") return true;
        if (from == "Pending") return to == "Serving";
        if (from == "Serving") return to == "Installing";
        if (from == "Installing")
            return job.flavor == Flavor::OsInstall ? to == "Configured" : to == "RebootRequested";
        if (from == "Configured") return job.flavor == Flavor::OsInstall && to == "RebootRequested";
        if (from == "RebootRequested") return to == "Done";
        return false;  // Done/Failed are terminal
    };
    for (size_t i = 1; i < path.size(); ++i)
        if (!allowed(path[i - 1], path[i])) return false;
    return true;
}

}  // namespace

TEST_CASE("bootptab parsing: enabled and commented entries") {
    auto file = parse_bootptab(
        "w1:ha=00:01:ip=10.0.0.1:bf=/boot/w1\n"  // ha with a colon is not our grammar: 5 fields
        "w2:ha=0002:ip=10.0.0.2:bf=/boot/w2\n"
        "#w3:ha=0003:ip=10.0.0.3:bf=/boot/w3\n"
        "# plain comment\n"
        "strange line, preserved\n");
    REQUIRE(file.entries.size() == 2);
    CHECK(file.entries[0].host == "w2");
    CHECK(file.entries[0].enabled);
    CHECK(file.entries[0].ip == "10.0.0.2");
    CHECK(file.entries[1].host == "w3");
    CHECK_FALSE(file.entries[1].enabled);
    CHECK(file.entries[1].bootfile == "/boot/w3");

    CHECK(parse_bootptab("").entries.empty());
    CHECK_THROWS_WITH(parse_bootptab("a:ha=1:ip=2:bf=3\na:ha=9:ip=8:bf=7\n"),
                      Catch::Matchers::ContainsSubstring("line 1") &&
                          Catch::Matchers::ContainsSubstring("line 2"));
    // a disabled duplicate is fine
    CHECK_NOTHROW(parse_bootptab("a:ha=1:ip=2:bf=3\n#a:ha=9:ip=8:bf=7\n"));
}

TEST_CASE("bootptab render round trip") {
    std::string text = demo_bootptab(4) + "#w2:ha=dup:ip=x:bf=y\nnot an entry\n";
    CHECK(render_bootptab(parse_bootptab(text)) == text);
    std::string no_trailing = "w1:ha=a:ip=b:bf=c";
    CHECK(render_bootptab(parse_bootptab(no_trailing)) == no_trailing);

    std::mt19937 rng(3);
    for (int iter = 0; iter < 100; ++iter) {
        std::string t;
        int lines = int(rng() % 8);
        for (int i = 0; i < lines; ++i) {
            switch (rng() % 4) {
                case 0:
                    t += "h" + std::to_string(i) + ":ha=0:ip=1:bf=2\n";
                    break;
                case 1:
                    t += "#h" + std::to_string(i) + ":ha=0:ip=1:bf=2\n";
                    break;
                case 2:
                    t += "# comment " + std::to_string(rng() % 100) + "\n";
                    break;
                case 3:
                    t += "junk line " + std::to_string(rng() % 100) + "\n";
                    break;
            }
        }
        REQUIRE(render_bootptab(parse_bootptab(t)) == t);
    }
}

TEST_CASE("comment_out touches exactly one line") {
    testutil::TempDir tmp;
    auto path = tmp.write("bootptab", demo_bootptab());
    const auto before = cadm::split(cadm::read_file(path), '\n');

    CHECK(comment_out(path, "w3") == Toggle::Changed);
    const auto after = cadm::split(cadm::read_file(path), '\n');
    REQUIRE(before.size() == after.size());
    size_t diffs = 0, diff_at = 0;
    for (size_t i = 0; i < before.size(); ++i)
        if (before[i] != after[i]) {
            ++diffs;
            diff_at = i;
        }
    CHECK(diffs == 1);
    CHECK(after[diff_at] == "#" + before[diff_at]);

    // idempotence: already disabled is a no-op with no byte change
    auto bytes = cadm::read_file(path);
    CHECK(comment_out(path, "w3") == Toggle::AlreadyInState);
    CHECK(cadm::read_file(path) == bytes);

    CHECK_THROWS(comment_out(path, "ghost"));
}

TEST_CASE("enable is the inverse of comment_out") {
    testutil::TempDir tmp;
    auto path = tmp.write("bootptab", demo_bootptab());
    auto original = cadm::read_file(path);
    comment_out(path, "w5");
    enable(path, "w5");
    CHECK(cadm::read_file(path) == original);
    CHECK(enable(path, "w5") == Toggle::AlreadyInState);
    CHECK(cadm::read_file(path) == original);
    CHECK_THROWS(enable(path, "ghost"));
}

TEST_CASE("concurrent callbacks for different hosts both land") {
    testutil::TempDir tmp;
    auto path = tmp.write("bootptab", demo_bootptab());
    std::vector<std::thread> threads;
    for (int i = 1; i <= 10; ++i)
        threads.emplace_back([&path, i] { comment_out(path, "w" + std::to_string(i)); });
    for (auto& t : threads) t.join();
    auto file = parse_bootptab(cadm::read_file(path));
    for (const auto& e : file.entries) CHECK_FALSE(e.enabled);
}

TEST_CASE("plan_waves batching") {
    auto sizes = [](const WavePlan& p) {
        std::vector<size_t> s;
        for (const auto& w : p.waves) s.push_back(w.size());
        return s;
    };
    nodeset::NodeList ten;
    for (int i = 1; i <= 10; ++i) ten.nodes.push_back("w" + std::to_string(i));
    CHECK(sizes(plan_waves(ten, 4)) == std::vector<size_t>{4, 4, 2});
    CHECK(sizes(plan_waves(nodeset::NodeList{{"a", "b", "c"}}, 8)) == std::vector<size_t>{3});
    CHECK(plan_waves(nodeset::NodeList{}, 4).waves.empty());
    CHECK_THROWS_AS(plan_waves(ten, 0), std::invalid_argument);
    // batches partition the input in order
    auto plan = plan_waves(ten, 4);
    std::vector<std::string> flat;
    for (const auto& w : plan.waves) flat.insert(flat.end(), w.begin(), w.end());
    CHECK(flat == ten.nodes);
}

TEST_CASE("run_waves: clean os install run") {
    testutil::TempDir tmp;
    auto path = tmp.write("bootptab", demo_bootptab());
    nodeset::NodeList ten;
    for (int i = 1; i <= 10; ++i) ten.nodes.push_back("w" + std::to_string(i));
    SimulatedAgent agent;
    agent.step_delay_s = 0.01;
    RunOptions opt{path, tmp.file("artifacts")};
    auto summary = run_waves(plan_waves(ten, 4), Flavor::OsInstall, agent, opt);

    CHECK(summary.done == 10);
    CHECK(summary.failed == 0);
    CHECK(summary.peak_concurrency <= 4);
    CHECK(summary.peak_concurrency >= 1);
    for (const auto& j : summary.jobs) {
        CHECK(j.state == JobState::Done);
        CHECK(legal_path(j));
        // os installs pass through Configured and report the phase list
        std::vector<std::string> phases;
        for (const auto& ev : j.log)
            if (ev.kind == JobEvent::Kind::Phase) phases.push_back(ev.what);
        CHECK(phases == std::vector<std::string>{"partition", "mkfs", "fetch-tar", "unpack"});
        for (const auto& ev : j.log) CHECK(ev.gauge <= 4);
    }
    // the callback path disabled every entry
    for (const auto& e : parse_bootptab(cadm::read_file(path)).entries) CHECK_FALSE(e.enabled);
}

TEST_CASE("run_waves: injected failure leaves that entry enabled") {
    testutil::TempDir tmp;
    auto path = tmp.write("bootptab", demo_bootptab());
    nodeset::NodeList ten;
    for (int i = 1; i <= 10; ++i) ten.nodes.push_back("w" + std::to_string(i));
    SimulatedAgent agent;
    agent.fail_at["w6"] = "unpack";
    RunOptions opt{path, tmp.file("artifacts")};
    auto summary = run_waves(plan_waves(ten, 4), Flavor::OsInstall, agent, opt);

    CHECK(summary.done == 9);
    CHECK(summary.failed == 1);
    auto file = parse_bootptab(cadm::read_file(path));
    for (const auto& e : file.entries) CHECK(e.enabled == (e.host == "w6"));
    for (const auto& j : summary.jobs) {
        CHECK(legal_path(j));
        if (j.node == "w6") {
            CHECK(j.state == JobState::Failed);
            CHECK(j.error == "install failed");
        }
    }
}

TEST_CASE("run_waves: firmware flavor uploads an artifact before reboot") {
    testutil::TempDir tmp;
    auto path = tmp.write("bootptab", demo_bootptab(3));
    nodeset::NodeList nodes{{"w1", "w2", "w3"}};
    SimulatedAgent agent;
    RunOptions opt{path, tmp.file("artifacts")};
    auto summary = run_waves(plan_waves(nodes, 2), Flavor::FirmwareInstall, agent, opt);
    CHECK(summary.done == 3);
    for (const auto& j : summary.jobs) {
        CHECK(legal_path(j));
        REQUIRE_FALSE(j.artifact_path.empty());
        CHECK(cadm::read_file(j.artifact_path) == "firmware flash ok on " + j.node + "\n");
        // artifact recorded while Installing, before RebootRequested
        size_t artifact_at = 0, reboot_at = 0;
        for (size_t i = 0; i < j.log.size(); ++i) {
            if (j.log[i].kind == JobEvent::Kind::Artifact) artifact_at = i;
            if (j.log[i].kind == JobEvent::Kind::State && j.log[i].what == "RebootRequested")
                reboot_at = i;
        }
        CHECK(artifact_at < reboot_at);
        // firmware skips Configured
        for (const auto& ev : j.log) CHECK(ev.what != "Configured");
    }
}

TEST_CASE("run_waves pre-flight rejects disabled or missing nodes") {
    testutil::TempDir tmp;
    auto path = tmp.write("bootptab", demo_bootptab(3));
    comment_out(path, "w2");
    SimulatedAgent agent;
    RunOptions opt{path, tmp.file("artifacts")};
    CHECK_THROWS(run_waves(plan_waves(nodeset::NodeList{{"w1", "w2"}}, 2), Flavor::OsInstall, agent, opt));
    CHECK_THROWS(run_waves(plan_waves(nodeset::NodeList{{"ghost"}}, 2), Flavor::OsInstall, agent, opt));
    // untouched by the failed pre-flight
    CHECK(parse_bootptab(cadm::read_file(path)).find("w1")->enabled);
}

TEST_CASE("upload_log: state and flavor guards, empty content") {
    testutil::TempDir tmp;
    InstallJob job;
    job.node = "w1";
    job.flavor = Flavor::FirmwareInstall;
    job.state = JobState::Installing;
    auto p = upload_log(job, "", tmp.file("art"));
    CHECK(cadm::read_file(p).empty());

    InstallJob wrong_state;
    wrong_state.node = "w2";
    wrong_state.flavor = Flavor::FirmwareInstall;
    wrong_state.state = JobState::Pending;
    CHECK_THROWS_AS(upload_log(wrong_state, "x", tmp.file("art")), std::logic_error);

    InstallJob wrong_flavor;
    wrong_flavor.node = "w3";
    wrong_flavor.flavor = Flavor::OsInstall;
    wrong_flavor.state = JobState::Installing;
    CHECK_THROWS_AS(upload_log(wrong_flavor, "x", tmp.file("art")), std::logic_error);
}

TEST_CASE("property: randomized failure injection always yields legal logs") {
    std::mt19937 rng(41);
    const std::vector<std::string> phases = {"serve",  "partition", "mkfs",  "fetch-tar",
                                             "unpack", "configure", "flash", "reboot"};
    for (int iter = 0; iter < 25; ++iter) {
        testutil::TempDir tmp;
        int n = 3 + int(rng() % 8);
        nodeset::NodeList nodes;
        std::string text;
        for (int i = 0; i < n; ++i) {
            nodes.nodes.push_back("n" + std::to_string(i));
            text += nodes.nodes.back() + ":ha=0:ip=1:bf=2\n";
        }
        auto path = tmp.write("bootptab", text);
        SimulatedAgent agent;
        for (const auto& node : nodes.nodes)
            if (rng() % 3 == 0) agent.fail_at[node] = phases[rng() % phases.size()];
        Flavor flavor = rng() % 2 ? Flavor::OsInstall : Flavor::FirmwareInstall;
        size_t cap = 1 + rng() % 5;
        RunOptions opt{path, tmp.file("artifacts")};
        auto summary = run_waves(plan_waves(nodes, cap), flavor, agent, opt);

        REQUIRE(summary.peak_concurrency <= int(cap));
        REQUIRE(summary.jobs.size() == size_t(n));
        auto file = parse_bootptab(cadm::read_file(path));
        for (const auto& j : summary.jobs) {
            REQUIRE(legal_path(j));
            // bootptab safety: enabled entries are exactly the non-Done jobs
            REQUIRE(file.find(j.node)->enabled == (j.state != JobState::Done));
        }
    }
}

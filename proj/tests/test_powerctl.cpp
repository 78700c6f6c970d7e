#include "cadm/powerctl.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <memory>

using namespace cadm;
using namespace cadm::powerctl;
using bmc::ChassisEvent;
using bmc::Emulator;
using bmc::EmulatorConfig;
using bmc::Power;
using bmc::SensorKind;

namespace {

// Four emulated BMCs named wnode21..wnode24.
struct Farm {
    std::vector<std::unique_ptr<Emulator>> emus;
    EndpointMap map;

    explicit Farm(Power initial = Power::On) {
        for (int i = 1; i <= 4; ++i) {
            EmulatorConfig cfg;
            cfg.initial.power = initial;
            cfg.repository = {{0, SensorKind::CpuTemp, 45, 70}, {0, SensorKind::FanSpeed, 5400, 9000}};
            auto emu = std::make_unique<Emulator>("127.0.0.1", 0, cfg);
            emu->start();
            map.endpoints["wnode2" + std::to_string(i)] = {"127.0.0.1", emu->port()};
            emus.push_back(std::move(emu));
        }
    }
};

const Options kFast{0.5, 2, 64, bmc::Version::V15};

}  // namespace

TEST_CASE("endpoint map parsing") {
    auto m = parse_endpoint_map(
        "# comment\n"
        "wnode21 127.0.0.1:9701\n"
        "wnode22 10.0.0.2\n");
    CHECK(m.endpoints.at("wnode21") == net::Endpoint{"127.0.0.1", 9701});
    CHECK(m.endpoints.at("wnode22") == net::Endpoint{"10.0.0.2", bmc::kDefaultPort});
    CHECK_THROWS(parse_endpoint_map("wnode21 1.2.3.4:1\nwnode21 1.2.3.4:2\n"));
    CHECK_THROWS(parse_endpoint_map("just-one-field\n"));
}

TEST_CASE("power cycle across a pattern") {
    Farm farm;
    auto nodes = nodeset::expand("wnode2{1-4}");
    auto res = power(nodes, bmc::PowerAction::Cycle, farm.map, kFast);
    CHECK(res.exit_code == 0);
    CHECK(res.out ==
          "wnode21 ok\n"
          "wnode22 ok\n"
          "wnode23 ok\n"
          "wnode24 ok\n");
    for (const auto& e : farm.emus) {
        CHECK(e->chassis().power == Power::On);
        CHECK(e->events() == std::vector<ChassisEvent>{ChassisEvent::Cycled});
    }
}

TEST_CASE("power on from off, single node") {
    Farm farm(Power::Off);
    auto res = power(nodeset::NodeList{{"wnode23"}}, bmc::PowerAction::On, farm.map, kFast);
    CHECK(res.exit_code == 0);
    CHECK(res.out == "wnode23 ok\n");
    CHECK(farm.emus[2]->chassis().power == Power::On);
    CHECK(farm.emus[0]->chassis().power == Power::Off);  // untouched
}

TEST_CASE("one unreachable endpoint -> 3 ok + 1 error, exit 1") {
    Farm farm;
    farm.emus[1]->stop();  // wnode22 goes silent
    net::UdpSocket parked;
    parked.bind("127.0.0.1", 0);
    farm.map.endpoints["wnode22"] = {"127.0.0.1", parked.local_port()};

    auto res = power(nodeset::expand("wnode2{1-4}"), bmc::PowerAction::Cycle, farm.map,
                     Options{0.1, 1, 64, bmc::Version::V15});
    CHECK(res.exit_code == 1);
    auto lines = cadm::split(res.out, '\n');
    REQUIRE(lines.size() == 5);  // 4 + trailing empty
    CHECK(lines[0] == "wnode21 ok");
    CHECK(lines[1].rfind("wnode22 error: ", 0) == 0);
    CHECK(lines[2] == "wnode23 ok");
    CHECK(lines[3] == "wnode24 ok");
}

TEST_CASE("unknown node fails pre-flight with exit 2 and no traffic") {
    Farm farm;
    auto res = power(nodeset::expand("wnode2{1-5}"), bmc::PowerAction::Cycle, farm.map, kFast);
    CHECK(res.exit_code == 2);
    CHECK(res.out.empty());
    CHECK(res.err == "unknown node wnode25 (not in endpoint map)\n");
    for (const auto& e : farm.emus) CHECK(e->events().empty());
}

TEST_CASE("health table with OK/OVER verdicts") {
    Farm farm;
    // wnode22 runs hot: reading above limit; wnode23 sits exactly at it
    farm.emus[1]->stop();
    farm.emus[2]->stop();
    EmulatorConfig hot;
    hot.repository = {{0, SensorKind::CpuTemp, 75, 70}, {0, SensorKind::FanSpeed, 5400, 9000}};
    auto hot_emu = std::make_unique<Emulator>("127.0.0.1", 0, hot);
    hot_emu->start();
    farm.map.endpoints["wnode22"] = {"127.0.0.1", hot_emu->port()};
    EmulatorConfig edge;
    edge.repository = {{0, SensorKind::CpuTemp, 70, 70}, {0, SensorKind::FanSpeed, 5400, 9000}};
    auto edge_emu = std::make_unique<Emulator>("127.0.0.1", 0, edge);
    edge_emu->start();
    farm.map.endpoints["wnode23"] = {"127.0.0.1", edge_emu->port()};

    auto nodes = nodeset::expand("wnode2{1-4}");
    auto res = health(nodes, farm.map, kFast);
    CHECK(res.exit_code == 0);
    CHECK(res.out ==
          "wnode21 cputemp 45 70 OK\n"
          "wnode21 fan0 5400 9000 OK\n"
          "wnode22 cputemp 75 70 OVER\n"
          "wnode22 fan0 5400 9000 OK\n"
          "wnode23 cputemp 70 70 OK\n"  // boundary stays OK
          "wnode23 fan0 5400 9000 OK\n"
          "wnode24 cputemp 45 70 OK\n"
          "wnode24 fan0 5400 9000 OK\n");

    // line count = nodes x sensors
    auto lines = cadm::split(res.out, '\n');
    CHECK(lines.size() - 1 == nodes.nodes.size() * 2);
}

TEST_CASE("concurrency cap of 1 still covers every node in order") {
    Farm farm;
    auto res = power(nodeset::expand("wnode2{1-4}"), bmc::PowerAction::Cycle, farm.map,
                     Options{0.5, 2, 1, bmc::Version::V15});
    CHECK(res.exit_code == 0);
    CHECK(res.out ==
          "wnode21 ok\nwnode22 ok\nwnode23 ok\nwnode24 ok\n");
}

#pragma once

// Node-set power and health commands against per-node BMC endpoints.
// Requests fan out concurrently up to a cap; output stays in node order.

#include <functional>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "cadm/bmcproto.hpp"
#include "cadm/nodeset.hpp"
#include "cadm/udp.hpp"
#include "cadm/util.hpp"

namespace cadm::powerctl {

// hostname -> BMC endpoint, from lines `<hostname> <addr:port>`.
struct EndpointMap {
    std::map<std::string, net::Endpoint> endpoints;

    const net::Endpoint& at(const std::string& node) const {
        auto it = endpoints.find(node);
        if (it == endpoints.end()) throw std::out_of_range("unknown node " + node);
        return it->second;
    }
};

inline EndpointMap parse_endpoint_map(std::string_view text) {
    EndpointMap m;
    size_t lineno = 0;
    for (const auto& raw : split(text, '\n')) {
        ++lineno;
        auto line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        auto tok = split_ws(line);
        if (tok.size() != 2)
            throw std::runtime_error("endpoints line " + std::to_string(lineno) +
                                     ": expected `<hostname> <addr:port>`");
        if (m.endpoints.count(tok[0]))
            throw std::runtime_error("endpoints line " + std::to_string(lineno) + ": duplicate host " +
                                     tok[0]);
        m.endpoints[tok[0]] = net::parse_endpoint(tok[1], bmc::kDefaultPort);
    }
    return m;
}

struct Options {
    double timeout_s = 2.0;
    int attempts = 3;
    unsigned max_concurrent = 64;
    bmc::Version version = bmc::Version::V15;
};

struct CommandOutput {
    std::string out;
    std::string err;
    int exit_code = 0;
};

namespace detail {

// Unknown hostnames are hard errors before any network traffic.
inline std::vector<std::string> preflight(const nodeset::NodeList& nodes, const EndpointMap& map) {
    std::vector<std::string> missing;
    for (const auto& n : nodes.nodes)
        if (!map.endpoints.count(n)) missing.push_back(n);
    return missing;
}

// Runs fn(node) for every node, at most max_concurrent in flight, and
// returns the per-node strings in input order.
inline std::vector<std::string> for_each_node(const nodeset::NodeList& nodes, unsigned max_concurrent,
                                              const std::function<std::string(const std::string&)>& fn) {
    std::vector<std::string> lines(nodes.nodes.size());
    std::mutex mu;
    size_t next = 0;
    unsigned nthreads = std::min<unsigned>(std::max(1u, max_concurrent), unsigned(nodes.nodes.size()));
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < nthreads; ++t) {
        pool.emplace_back([&] {
            while (true) {
                size_t i;
                {
                    std::lock_guard<std::mutex> g(mu);
                    if (next >= nodes.nodes.size()) return;
                    i = next++;
                }
                lines[i] = fn(nodes.nodes[i]);
            }
        });
    }
    for (auto& th : pool) th.join();
    return lines;
}

}  // namespace detail

inline CommandOutput power(const nodeset::NodeList& nodes, bmc::PowerAction action,
                           const EndpointMap& map, const Options& opt = {}) {
    CommandOutput res;
    auto missing = detail::preflight(nodes, map);
    if (!missing.empty()) {
        for (const auto& n : missing) res.err += "unknown node " + n + " (not in endpoint map)\n";
        res.exit_code = 2;
        return res;
    }
    bmc::ClientOptions copt{opt.timeout_s, opt.attempts};
    auto lines = detail::for_each_node(nodes, opt.max_concurrent, [&](const std::string& node) {
        try {
            bmc::power_control(map.at(node), action, opt.version, copt);
            return node + " ok\n";
        } catch (const std::exception& e) {
            return node + " error: " + e.what() + "\n";
        }
    });
    for (const auto& l : lines) {
        res.out += l;
        if (l.find(" error: ") != std::string::npos) res.exit_code = 1;
    }
    return res;
}

inline CommandOutput health(const nodeset::NodeList& nodes, const EndpointMap& map,
                            const Options& opt = {}) {
    CommandOutput res;
    auto missing = detail::preflight(nodes, map);
    if (!missing.empty()) {
        for (const auto& n : missing) res.err += "unknown node " + n + " (not in endpoint map)\n";
        res.exit_code = 2;
        return res;
    }
    bmc::ClientOptions copt{opt.timeout_s, opt.attempts};
    auto lines = detail::for_each_node(nodes, opt.max_concurrent, [&](const std::string& node) {
        try {
            auto records = bmc::read_sensors(map.at(node), opt.version, copt);
            std::string block;
            for (const auto& r : records) {
                // a reading at the limit is still inside the safe envelope
                const char* verdict = r.reading > r.upper_limit ? "OVER" : "OK";
                block += node + " " + bmc::sensor_name(r.kind, r.sensor_id) + " " +
                         std::to_string(r.reading) + " " + std::to_string(r.upper_limit) + " " +
                         verdict + "\n";
            }
            return block;
        } catch (const std::exception& e) {
            return node + " error: " + e.what() + "\n";
        }
    });
    for (const auto& l : lines) {
        res.out += l;
        if (l.find(" error: ") != std::string::npos) res.exit_code = 1;
    }
    return res;
}

}  // namespace cadm::powerctl

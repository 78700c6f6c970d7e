#pragma once

// Head-node monitoring: workers push health readings over UDP (syslog
// style), the head pulls resource usage through the fanout module, both
// feed one status model keyed by node. Threshold violations raise
// edge-triggered alarms, which turn the node's row red (and blinking) on
// the rendered status page and go out through the notifier.
//
// Health datagram, one per UDP packet:
//   <PRI> <epoch> <node> HEALTH <name>=<value>[,<name>=<value>...]
// e.g. `<14> 1060000000 wnode21 HEALTH cputemp=45,fan0=5400,vcore=1450`
//
// Resource probe output, one line per node:
//   disk_free=<MiB> [svc <name>=<up|down>]...

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "cadm/bmcproto.hpp"
#include "cadm/fanout.hpp"
#include "cadm/nodeset.hpp"
#include "cadm/notify.hpp"
#include "cadm/udp.hpp"
#include "cadm/util.hpp"

namespace cadm::monitor {

inline constexpr std::uint16_t kDefaultPort = 9514;

struct HealthSample {
    std::string node;
    std::int64_t timestamp = 0;
    std::vector<bmc::SensorRecord> sensors;  // upper_limit unset (0); limits live in config
};

struct ResourceSample {
    std::string node;
    std::int64_t timestamp = 0;
    std::int64_t disk_free_mib = 0;
    std::map<std::string, bool> services;  // name -> up
};

struct ThresholdConfig {
    std::map<bmc::SensorKind, std::uint16_t> sensor_max;
    std::int64_t min_disk_mib = 1024;
    std::vector<std::string> required_services;
    std::int64_t staleness_s = 180;  // default: 3x the worker reporting interval
};

enum class AlarmKind { SensorOver, DiskLow, ServiceDown, Stale };

inline const char* to_string(AlarmKind k) {
    switch (k) {
        case AlarmKind::SensorOver:
            return "SensorOver";
        case AlarmKind::DiskLow:
            return "DiskLow";
        case AlarmKind::ServiceDown:
            return "ServiceDown";
        case AlarmKind::Stale:
            return "Stale";
    }
    return "?";
}

struct Alarm {
    std::string node;
    AlarmKind kind = AlarmKind::SensorOver;
    std::string subject;  // sensor or service name; empty for DiskLow/Stale
    std::int64_t observed = 0;
    std::int64_t limit = 0;
    std::int64_t raised_at = 0;

    std::string key() const { return std::string(to_string(kind)) + ":" + subject; }
    std::string describe() const {
        switch (kind) {
            case AlarmKind::SensorOver:
                return subject + " " + std::to_string(observed) + " > " + std::to_string(limit);
            case AlarmKind::DiskLow:
                return "disk_free " + std::to_string(observed) + " MiB < " + std::to_string(limit);
            case AlarmKind::ServiceDown:
                return "service " + subject + " down";
            case AlarmKind::Stale:
                return "silent for " + std::to_string(observed) + " s (limit " +
                       std::to_string(limit) + ")";
        }
        return "?";
    }
};

enum class Display { Green, Red };

struct NodeStatus {
    std::optional<HealthSample> health;
    std::optional<ResourceSample> resources;
    std::map<std::string, Alarm> active;  // keyed by Alarm::key()
    Display display = Display::Green;
};

struct StatusModel {
    std::map<std::string, NodeStatus> nodes;
    std::int64_t started_at = 0;  // staleness baseline for silent expected nodes
    size_t parse_failures = 0;
    size_t stale_drops = 0;

    NodeStatus& at_or_insert(const std::string& node) { return nodes[node]; }
};

// ---------------------------------------------------------------------------
// Health ingestion (push path)
// ---------------------------------------------------------------------------

inline std::optional<HealthSample> parse_health_line(std::string_view line) {
    auto tok = split_ws(line);
    if (tok.size() != 5 || tok[3] != "HEALTH") return std::nullopt;
    if (tok[0].size() < 3 || tok[0].front() != '<' || tok[0].back() != '>' ||
        !parse_u64(std::string_view(tok[0]).substr(1, tok[0].size() - 2)))
        return std::nullopt;
    auto ts = parse_i64(tok[1]);
    if (!ts || *ts < 0 || tok[2].empty()) return std::nullopt;
    HealthSample s;
    s.node = tok[2];
    s.timestamp = *ts;
    for (const auto& kv : split(tok[4], ',')) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos) return std::nullopt;
        auto named = bmc::parse_sensor_name(std::string_view(kv).substr(0, eq));
        auto value = parse_u64(std::string_view(kv).substr(eq + 1));
        if (!named || !value || *value > 65535) return std::nullopt;
        bmc::SensorRecord r;
        r.kind = named->first;
        r.sensor_id = named->second;
        r.reading = std::uint16_t(*value);
        s.sensors.push_back(r);
    }
    if (s.sensors.empty()) return std::nullopt;
    return s;
}

inline std::string render_health_line(const std::string& node, std::int64_t epoch,
                                      std::span<const bmc::SensorRecord> sensors) {
    std::string kvs;
    for (const auto& r : sensors) {
        if (!kvs.empty()) kvs += ',';
        kvs += bmc::sensor_name(r.kind, r.sensor_id) + "=" + std::to_string(r.reading);
    }
    return "<14> " + std::to_string(epoch) + " " + node + " HEALTH " + kvs;
}

// Nodes self-register: a sample for an unknown node creates its row. Late
// samples older than the stored latest are dropped and counted.
inline bool ingest_health(StatusModel& model, std::string_view datagram) {
    auto sample = parse_health_line(datagram);
    if (!sample) {
        ++model.parse_failures;
        return false;
    }
    auto& st = model.at_or_insert(sample->node);
    if (st.health && sample->timestamp < st.health->timestamp) {
        ++model.stale_drops;
        return false;
    }
    st.health = std::move(*sample);
    return true;
}

// ---------------------------------------------------------------------------
// Resource polling (pull path)
// ---------------------------------------------------------------------------

inline std::optional<ResourceSample> parse_resource_output(const std::string& node,
                                                           std::int64_t timestamp,
                                                           std::string_view text) {
    ResourceSample s;
    s.node = node;
    s.timestamp = timestamp;
    bool have_disk = false;
    auto tok = split_ws(text);
    for (size_t i = 0; i < tok.size(); ++i) {
        if (tok[i].rfind("disk_free=", 0) == 0) {
            auto v = parse_i64(std::string_view(tok[i]).substr(10));
            if (!v || *v < 0) return std::nullopt;
            s.disk_free_mib = *v;
            have_disk = true;
        } else if (tok[i] == "svc" && i + 1 < tok.size()) {
            const auto& kv = tok[++i];
            size_t eq = kv.find('=');
            if (eq == std::string::npos) return std::nullopt;
            std::string state = kv.substr(eq + 1);
            if (state != "up" && state != "down") return std::nullopt;
            s.services[kv.substr(0, eq)] = state == "up";
        } else {
            return std::nullopt;
        }
    }
    if (!have_disk) return std::nullopt;
    return s;
}

struct PollOutcome {
    std::vector<ResourceSample> samples;
    size_t parse_failures = 0;
    size_t unreachable = 0;  // timed out or failed; those nodes will go stale
};

inline PollOutcome poll_resources(const nodeset::NodeList& nodes, fanout::Transport& transport,
                                  const std::string& probe_command, double timeout_s,
                                  std::int64_t now) {
    PollOutcome out;
    if (nodes.nodes.empty()) return out;
    auto plan = fanout::build_tree(nodes, 0);
    fanout::ExecOptions opt;
    opt.timeout_s = timeout_s;
    auto report = fanout::execute(plan, probe_command, transport, opt);
    for (const auto& r : report.results) {
        if (r.exit_status != 0 || r.timed_out) {
            ++out.unreachable;
            continue;
        }
        auto sample = parse_resource_output(r.node, now, trim(r.out));
        if (!sample) {
            ++out.parse_failures;
            continue;
        }
        out.samples.push_back(std::move(*sample));
    }
    return out;
}

inline void ingest_resources(StatusModel& model, std::span<const ResourceSample> samples) {
    for (const auto& s : samples) {
        auto& st = model.at_or_insert(s.node);
        if (st.resources && s.timestamp < st.resources->timestamp) {
            ++model.stale_drops;
            continue;
        }
        st.resources = s;
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    std::vector<Alarm> raised;
    std::vector<Alarm> cleared;
};

namespace detail {

inline std::int64_t last_seen(const StatusModel& model, const NodeStatus& st) {
    std::int64_t seen = model.started_at;
    if (st.health) seen = std::max(seen, st.health->timestamp);
    if (st.resources) seen = std::max(seen, st.resources->timestamp);
    return seen;
}

}  // namespace detail

// Edge-triggered: an alarm is raised once when its condition appears and
// cleared once when it goes away; a persisting condition stays silent.
// Boundary readings are healthy (strict > for sensors, strict < for disk).
inline EvalResult evaluate(StatusModel& model, const ThresholdConfig& cfg, std::int64_t now) {
    EvalResult result;
    for (auto& [node, st] : model.nodes) {
        std::map<std::string, Alarm> desired;
        auto want = [&](AlarmKind kind, const std::string& subject, std::int64_t observed,
                        std::int64_t limit) {
            Alarm a;
            a.node = node;
            a.kind = kind;
            a.subject = subject;
            a.observed = observed;
            a.limit = limit;
            a.raised_at = now;
            desired.emplace(a.key(), std::move(a));
        };
        if (st.health) {
            for (const auto& r : st.health->sensors) {
                auto it = cfg.sensor_max.find(r.kind);
                if (it != cfg.sensor_max.end() && r.reading > it->second)
                    want(AlarmKind::SensorOver, bmc::sensor_name(r.kind, r.sensor_id), r.reading,
                         it->second);
            }
        }
        if (st.resources) {
            if (st.resources->disk_free_mib < cfg.min_disk_mib)
                want(AlarmKind::DiskLow, "", st.resources->disk_free_mib, cfg.min_disk_mib);
            for (const auto& svc : cfg.required_services) {
                auto it = st.resources->services.find(svc);
                if (it == st.resources->services.end() || !it->second)
                    want(AlarmKind::ServiceDown, svc, 0, 0);
            }
        }
        std::int64_t seen = detail::last_seen(model, st);
        if (now - seen > cfg.staleness_s) want(AlarmKind::Stale, "", now - seen, cfg.staleness_s);

        for (auto& [key, alarm] : desired)
            if (!st.active.count(key)) {
                st.active.emplace(key, alarm);
                result.raised.push_back(alarm);
            }
        for (auto it = st.active.begin(); it != st.active.end();) {
            if (!desired.count(it->first)) {
                result.cleared.push_back(it->second);
                it = st.active.erase(it);
            } else {
                ++it;
            }
        }
        st.display = st.active.empty() ? Display::Green : Display::Red;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Status page
// ---------------------------------------------------------------------------

namespace detail {

inline std::string html_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&':
                out += "&amp;";
                break;
            case '<':
                out += "&lt;";
                break;
            case '>':
                out += "&gt;";
                break;
            case '"':
                out += "&quot;";
                break;
            default:
                out += c;
        }
    }
    return out;
}

}  // namespace detail

// Pure function of (model, render timestamp): byte-identical on repeat.
inline std::string render_status(const StatusModel& model, std::int64_t now) {
    using detail::html_escape;
    std::string h;
    h += "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>cluster status</title>\n";
    h += "<style>\n";
    h += "table { border-collapse: collapse; } td, th { border: 1px solid #999; padding: 4px 8px; }\n";
    h += "tr.ok td.node { background: #cfc; }\n";
    h += "tr.alarm td.node { background: #c00; color: #fff; font-weight: bold; }\n";
    h += ".blink { animation: blink 1s step-start infinite; }\n";
    h += "@keyframes blink { 50% { opacity: 0.2; } }\n";
    h += "</style>\n</head>\n<body>\n<h1>cluster status</h1>\n";
    size_t red = 0;
    for (const auto& [_, st] : model.nodes)
        if (st.display == Display::Red) ++red;
    h += "<p>generated " + std::to_string(now) + " | nodes " + std::to_string(model.nodes.size()) +
         " | red " + std::to_string(red) + "</p>\n";
    h += "<table>\n<tr><th>node</th><th>last seen</th><th>readings</th><th>disk MiB</th>"
         "<th>services</th><th>alarms</th></tr>\n";
    for (const auto& [node, st] : model.nodes) {
        bool is_red = st.display == Display::Red;
        h += std::string("<tr class=\"") + (is_red ? "alarm blink" : "ok") + "\">";
        h += "<td class=\"node\">" + html_escape(node) + "</td>";
        std::int64_t seen = detail::last_seen(model, st);
        h += "<td>" + (seen > model.started_at ? std::to_string(seen) : std::string("never")) + "</td>";
        std::string readings;
        if (st.health) {
            for (const auto& r : st.health->sensors) {
                if (!readings.empty()) readings += ", ";
                readings += bmc::sensor_name(r.kind, r.sensor_id) + "=" + std::to_string(r.reading);
            }
        }
        h += "<td>" + html_escape(readings) + "</td>";
        h += "<td>" + (st.resources ? std::to_string(st.resources->disk_free_mib) : std::string("-")) +
             "</td>";
        std::string svcs;
        if (st.resources) {
            for (const auto& [name, up] : st.resources->services) {
                if (!svcs.empty()) svcs += ", ";
                svcs += name + (up ? "=up" : "=down");
            }
        }
        h += "<td>" + html_escape(svcs) + "</td>";
        std::string alarms;
        for (const auto& [_, a] : st.active) {
            if (!alarms.empty()) alarms += "; ";
            alarms += a.describe();
        }
        h += "<td>" + html_escape(alarms) + "</td>";
        h += "</tr>\n";
    }
    h += "</table>\n</body>\n</html>\n";
    return h;
}

// ---------------------------------------------------------------------------
// Notification
// ---------------------------------------------------------------------------

struct NotifyReport {
    size_t messages = 0;
    size_t failures = 0;
};

// One batched message per evaluation cycle; nothing goes out on quiet cycles.
inline NotifyReport notify_alarms(std::span<const Alarm> raised, notify::Notifier& sink,
                                  std::int64_t now) {
    NotifyReport rep;
    if (raised.empty()) return rep;
    std::string subject = std::to_string(raised.size()) + " new alarm" +
                          (raised.size() == 1 ? "" : "s") + " at " + std::to_string(now);
    std::string body;
    for (const auto& a : raised)
        body += a.node + " " + to_string(a.kind) + ": " + a.describe() + "\n";
    ++rep.messages;
    if (!sink.deliver(subject, body)) ++rep.failures;
    return rep;
}

// ---------------------------------------------------------------------------
// UDP collector
// ---------------------------------------------------------------------------

// Receives health datagrams on its own thread and queues them; the cycle
// driver drains the queue. Single producer, single consumer.
class HealthCollector {
  public:
    HealthCollector(const std::string& host, std::uint16_t port) {
        sock_.bind(host, port);
    }
    ~HealthCollector() { stop(); }

    std::uint16_t port() const { return sock_.local_port(); }

    void start() {
        running_ = true;
        thread_ = std::thread([this] {
            while (running_) {
                auto data = sock_.recv(0.1);
                if (!data) continue;
                std::lock_guard<std::mutex> g(mu_);
                queue_.push_back(std::move(*data));
            }
        });
    }

    void stop() {
        if (!running_.exchange(false)) return;
        if (thread_.joinable()) thread_.join();
    }

    // Snapshot drain: datagrams arriving during the cycle wait for the next.
    std::vector<std::string> drain() {
        std::lock_guard<std::mutex> g(mu_);
        std::vector<std::string> out(queue_.begin(), queue_.end());
        queue_.clear();
        return out;
    }

    size_t pending() {
        std::lock_guard<std::mutex> g(mu_);
        return queue_.size();
    }

  private:
    net::UdpSocket sock_;
    std::mutex mu_;
    std::deque<std::string> queue_;
    std::atomic<bool> running_{false};
    std::thread thread_;
};

// ---------------------------------------------------------------------------
// Configuration and the cycle driver
// ---------------------------------------------------------------------------

struct MonitorConfig {
    std::string listen_host = "127.0.0.1";
    std::uint16_t listen_port = kDefaultPort;
    std::int64_t interval_s = 60;
    ThresholdConfig thresholds;
    std::string page_path = "status.html";
    std::string notifier_spec = "none";
    std::string probe_command = "df -Pm / | awk 'NR==2{printf \"disk_free=%s\", $4}'";
    std::string transport_spec = "local";
    double probe_timeout_s = 5;
    std::string nodes_pattern;  // expected nodes; others self-register
};

inline MonitorConfig parse_monitor_config(std::string_view text) {
    MonitorConfig cfg;
    size_t lineno = 0;
    for (const auto& raw : split(text, '\n')) {
        ++lineno;
        auto line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        auto fail = [&](const std::string& why) {
            throw std::runtime_error("monitor config line " + std::to_string(lineno) + ": " + why);
        };
        auto tok = split_ws(line);
        const std::string& key = tok[0];
        auto rest = trim(line.substr(key.size()));
        if (key == "listen") {
            auto ep = net::parse_endpoint(rest, kDefaultPort);
            cfg.listen_host = ep.host;
            cfg.listen_port = ep.port;
        } else if (key == "interval") {
            auto v = parse_i64(rest);
            if (!v || *v <= 0) fail("interval must be positive");
            cfg.interval_s = *v;
        } else if (key == "staleness") {
            auto v = parse_i64(rest);
            if (!v || *v <= 0) fail("staleness must be positive");
            cfg.thresholds.staleness_s = *v;
        } else if (key == "page") {
            cfg.page_path = rest;
        } else if (key == "notify") {
            cfg.notifier_spec = rest;
        } else if (key == "probe") {
            cfg.probe_command = rest;
        } else if (key == "transport") {
            cfg.transport_spec = rest;
        } else if (key == "probe_timeout") {
            auto v = parse_f64(rest);
            if (!v || *v <= 0) fail("probe_timeout must be positive");
            cfg.probe_timeout_s = *v;
        } else if (key == "nodes") {
            cfg.nodes_pattern = rest;
        } else if (key == "limit") {
            if (tok.size() != 3) fail("expected: limit <kind> <max>");
            auto named = bmc::parse_sensor_name(tok[1]);
            auto v = parse_u64(tok[2]);
            if (!named) fail("unknown sensor kind " + tok[1]);
            if (!v || *v > 65535) fail("bad limit value");
            cfg.thresholds.sensor_max[named->first] = std::uint16_t(*v);
        } else if (key == "min_disk") {
            auto v = parse_i64(rest);
            if (!v || *v <= 0) fail("min_disk must be positive");
            cfg.thresholds.min_disk_mib = *v;
        } else if (key == "require") {
            if (tok.size() != 2) fail("expected: require <service>");
            cfg.thresholds.required_services.push_back(tok[1]);
        } else {
            fail("unknown directive " + key);
        }
    }
    return cfg;
}

struct CycleReport {
    size_t datagrams = 0;
    size_t raised = 0;
    size_t cleared = 0;
    bool page_written = false;
    NotifyReport notified;
    std::string error;  // non-fatal stage失败 breadcrumbs
};

// Owns the model; one cycle = drain, poll, evaluate, render, notify. Stage
// failures are recorded, never fatal: the page is regenerated every cycle.
class Monitor {
  public:
    Monitor(MonitorConfig cfg, std::unique_ptr<fanout::Transport> transport,
            std::unique_ptr<notify::Notifier> notifier)
        : cfg_(std::move(cfg)),
          transport_(std::move(transport)),
          notifier_(std::move(notifier)),
          collector_(cfg_.listen_host, cfg_.listen_port) {
        model_.started_at = now_epoch();
        if (!cfg_.nodes_pattern.empty())
            for (const auto& n : nodeset::expand(cfg_.nodes_pattern).nodes) model_.at_or_insert(n);
        collector_.start();
    }

    static Monitor from_config(MonitorConfig cfg) {
        auto transport = fanout::make_transport(cfg.transport_spec);
        auto notifier = notify::make_notifier(cfg.notifier_spec);
        return Monitor(std::move(cfg), std::move(transport), std::move(notifier));
    }

    Monitor(Monitor&&) = delete;

    std::uint16_t listen_port() const { return collector_.port(); }
    const StatusModel& model() const { return model_; }
    const MonitorConfig& config() const { return cfg_; }

    CycleReport run_cycle(std::int64_t now = 0) {
        if (now == 0) now = now_epoch();
        CycleReport rep;
        for (const auto& datagram : collector_.drain()) {
            ++rep.datagrams;
            ingest_health(model_, datagram);
        }
        try {
            nodeset::NodeList poll_list;
            for (const auto& [node, _] : model_.nodes) poll_list.nodes.push_back(node);
            auto polled = poll_resources(poll_list, *transport_, cfg_.probe_command,
                                         cfg_.probe_timeout_s, now);
            ingest_resources(model_, polled.samples);
        } catch (const std::exception& e) {
            rep.error += std::string("poll: ") + e.what() + "; ";
        }
        auto eval = evaluate(model_, cfg_.thresholds, now);
        rep.raised = eval.raised.size();
        rep.cleared = eval.cleared.size();
        try {
            write_file_atomic(cfg_.page_path, render_status(model_, now));
            rep.page_written = true;
        } catch (const std::exception& e) {
            rep.error += std::string("page: ") + e.what() + "; ";
        }
        try {
            rep.notified = notify_alarms(eval.raised, *notifier_, now);
        } catch (const std::exception& e) {
            rep.error += std::string("notify: ") + e.what() + "; ";
        }
        return rep;
    }

    // Runs cycles on the configured interval; 0 cycles = until stop().
    void serve(size_t max_cycles = 0) {
        stop_ = false;
        size_t done = 0;
        while (!stop_) {
            run_cycle();
            if (max_cycles && ++done >= max_cycles) break;
            for (int i = 0; i < cfg_.interval_s * 10 && !stop_; ++i)
                std::this_thread::sleep_for(std::chrono::milliseconds(100));
        }
    }

    void stop() { stop_ = true; }

  private:
    MonitorConfig cfg_;
    std::unique_ptr<fanout::Transport> transport_;
    std::unique_ptr<notify::Notifier> notifier_;
    HealthCollector collector_;
    StatusModel model_;
    std::atomic<bool> stop_{false};
};

// ---------------------------------------------------------------------------
// Worker-side agent
// ---------------------------------------------------------------------------

// Reads the node's local BMC repository and pushes one HEALTH datagram to
// the head. Returns the line sent; empty when the repository is empty.
inline std::string emit_health_datagram(const std::string& node, const net::Endpoint& bmc_endpoint,
                                        bmc::Version version, const net::Endpoint& head,
                                        const bmc::ClientOptions& opt = {}, std::int64_t now = 0) {
    auto records = bmc::read_sensors(bmc_endpoint, version, opt);
    if (records.empty()) return "";
    if (now == 0) now = now_epoch();
    std::string line = render_health_line(node, now, records);
    net::UdpSocket sock;
    sock.send_to(head, line);
    return line;
}

}  // namespace cadm::monitor

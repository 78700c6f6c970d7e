#pragma once

// IPMI-lite: a message-based management protocol over UDP, and the matching
// BMC emulator. One datagram carries one frame:
//
//   magic(2)=A5 5A | version(1) | sequence(2 BE) | command(1) |
//   payload-length(2 BE) | payload | checksum(1)
//
// The checksum is the two's-complement byte that makes the whole frame sum
// to zero mod 256. Versions 0x09 and 0x15 differ only in the byte layout of
// sensor records inside a GetSensors response:
//
//   V09 record:  id(1) | kind(1) | reading(2 BE) | limit(2 BE)
//   V15 record:  kind(1) | id(1) | limit(2 BE) | reading(2 BE) | reserved(2)
//
// Units by kind: CpuTemp in degrees C, FanSpeed in RPM, Voltage in mV.

#include <atomic>
#include <cstdint>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "cadm/udp.hpp"
#include "cadm/util.hpp"

namespace cadm::bmc {

inline constexpr std::uint8_t kMagic0 = 0xA5;
inline constexpr std::uint8_t kMagic1 = 0x5A;
inline constexpr size_t kHeaderSize = 8;
inline constexpr size_t kMaxPayload = 1024;
inline constexpr std::uint16_t kDefaultPort = 9623;

enum class Version : std::uint8_t { V09 = 0x09, V15 = 0x15 };

enum class Command : std::uint8_t {
    GetSensors = 0x01,
    PowerOn = 0x02,
    PowerOff = 0x03,
    PowerCycle = 0x04,
    GetChassisState = 0x05,
    Ack = 0x06,
    Error = 0x07,
};

enum class ErrorReason : std::uint8_t {
    InvalidState = 0x01,
    BadFrame = 0x02,
    BadCommand = 0x03,
};

struct BmcMessage {
    Version version = Version::V15;
    std::uint16_t sequence = 0;
    Command command = Command::Ack;
    std::string payload;
    bool operator==(const BmcMessage&) const = default;
};

struct CodecError : std::runtime_error {
    enum class Kind {
        OversizedPayload,
        ShortFrame,
        BadMagic,
        BadChecksum,
        LengthMismatch,
        UnknownVersion,
        UnknownCommand,
        MalformedPayload,
    };
    CodecError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
    Kind kind;
};

inline std::string encode(const BmcMessage& msg) {
    if (msg.payload.size() > kMaxPayload)
        throw CodecError(CodecError::Kind::OversizedPayload,
                         "payload of " + std::to_string(msg.payload.size()) + " bytes exceeds " +
                             std::to_string(kMaxPayload));
    std::string f;
    f.reserve(kHeaderSize + msg.payload.size() + 1);
    f += char(kMagic0);
    f += char(kMagic1);
    f += char(std::uint8_t(msg.version));
    f += char(msg.sequence >> 8);
    f += char(msg.sequence & 0xFF);
    f += char(std::uint8_t(msg.command));
    f += char(msg.payload.size() >> 8);
    f += char(msg.payload.size() & 0xFF);
    f += msg.payload;
    unsigned sum = 0;
    for (char c : f) sum += std::uint8_t(c);
    f += char((0x100 - (sum & 0xFF)) & 0xFF);
    return f;
}

inline BmcMessage decode(std::string_view data) {
    if (data.size() < kHeaderSize + 1)
        throw CodecError(CodecError::Kind::ShortFrame,
                         "frame of " + std::to_string(data.size()) + " bytes is too short");
    auto u8 = [&](size_t i) { return std::uint8_t(data[i]); };
    if (u8(0) != kMagic0 || u8(1) != kMagic1)
        throw CodecError(CodecError::Kind::BadMagic, "bad magic");
    std::uint16_t plen = std::uint16_t(u8(6)) << 8 | u8(7);
    if (data.size() != kHeaderSize + plen + 1)
        throw CodecError(CodecError::Kind::LengthMismatch,
                         "length field says " + std::to_string(plen) + " payload bytes, frame has " +
                             std::to_string(data.size()));
    unsigned sum = 0;
    for (char c : data) sum += std::uint8_t(c);
    if ((sum & 0xFF) != 0) throw CodecError(CodecError::Kind::BadChecksum, "bad checksum");
    BmcMessage msg;
    if (u8(2) != std::uint8_t(Version::V09) && u8(2) != std::uint8_t(Version::V15))
        throw CodecError(CodecError::Kind::UnknownVersion,
                         "unknown version 0x" + std::to_string(u8(2)));
    msg.version = Version(u8(2));
    msg.sequence = std::uint16_t(u8(3)) << 8 | u8(4);
    if (u8(5) < std::uint8_t(Command::GetSensors) || u8(5) > std::uint8_t(Command::Error))
        throw CodecError(CodecError::Kind::UnknownCommand,
                         "unknown command 0x" + std::to_string(u8(5)));
    msg.command = Command(u8(5));
    msg.payload = std::string(data.substr(kHeaderSize, plen));
    return msg;
}

// ---------------------------------------------------------------------------
// Sensors
// ---------------------------------------------------------------------------

enum class SensorKind : std::uint8_t { CpuTemp = 0x01, FanSpeed = 0x02, Voltage = 0x03 };

struct SensorRecord {
    std::uint8_t sensor_id = 0;
    SensorKind kind = SensorKind::CpuTemp;
    std::uint16_t reading = 0;      // kind units
    std::uint16_t upper_limit = 0;  // same units
    bool operator==(const SensorRecord&) const = default;
};

// Display/config names: cputemp, fan0, vcore; a nonzero id is appended.
inline std::string sensor_name(SensorKind kind, std::uint8_t id) {
    switch (kind) {
        case SensorKind::CpuTemp:
            return id == 0 ? "cputemp" : "cputemp" + std::to_string(id);
        case SensorKind::FanSpeed:
            return "fan" + std::to_string(id);
        case SensorKind::Voltage:
            return id == 0 ? "vcore" : "vcore" + std::to_string(id);
    }
    return "unknown";
}

inline std::optional<std::pair<SensorKind, std::uint8_t>> parse_sensor_name(std::string_view name) {
    size_t digits = name.size();
    while (digits > 0 && name[digits - 1] >= '0' && name[digits - 1] <= '9') --digits;
    std::string_view base = name.substr(0, digits);
    std::uint8_t id = 0;
    if (digits < name.size()) {
        auto v = parse_u64(name.substr(digits));
        if (!v || *v > 255) return std::nullopt;
        id = std::uint8_t(*v);
    }
    if (base == "cputemp" || base == "temp") return std::make_pair(SensorKind::CpuTemp, id);
    if (base == "fan" || base == "fanspeed") return std::make_pair(SensorKind::FanSpeed, id);
    if (base == "vcore" || base == "voltage" || base == "v") return std::make_pair(SensorKind::Voltage, id);
    return std::nullopt;
}

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out += char(v >> 8);
    out += char(v & 0xFF);
}

inline std::uint16_t get_u16(std::string_view s, size_t at) {
    return std::uint16_t(std::uint8_t(s[at])) << 8 | std::uint8_t(s[at + 1]);
}

inline SensorKind check_kind(std::uint8_t raw) {
    if (raw < std::uint8_t(SensorKind::CpuTemp) || raw > std::uint8_t(SensorKind::Voltage))
        throw CodecError(CodecError::Kind::MalformedPayload,
                         "unknown sensor kind 0x" + std::to_string(raw));
    return SensorKind(raw);
}

}  // namespace detail

inline std::string encode_sensors(std::span<const SensorRecord> records, Version version) {
    std::string out;
    for (const auto& r : records) {
        if (version == Version::V09) {
            out += char(r.sensor_id);
            out += char(std::uint8_t(r.kind));
            detail::put_u16(out, r.reading);
            detail::put_u16(out, r.upper_limit);
        } else {
            out += char(std::uint8_t(r.kind));
            out += char(r.sensor_id);
            detail::put_u16(out, r.upper_limit);
            detail::put_u16(out, r.reading);
            detail::put_u16(out, 0);  // reserved
        }
    }
    return out;
}

inline std::vector<SensorRecord> decode_sensors(std::string_view payload, Version version) {
    size_t rec_size = version == Version::V09 ? 6 : 8;
    if (payload.size() % rec_size != 0)
        throw CodecError(CodecError::Kind::MalformedPayload,
                         "sensor payload of " + std::to_string(payload.size()) +
                             " bytes is not a multiple of " + std::to_string(rec_size));
    std::vector<SensorRecord> out;
    for (size_t at = 0; at < payload.size(); at += rec_size) {
        SensorRecord r;
        if (version == Version::V09) {
            r.sensor_id = std::uint8_t(payload[at]);
            r.kind = detail::check_kind(std::uint8_t(payload[at + 1]));
            r.reading = detail::get_u16(payload, at + 2);
            r.upper_limit = detail::get_u16(payload, at + 4);
        } else {
            r.kind = detail::check_kind(std::uint8_t(payload[at]));
            r.sensor_id = std::uint8_t(payload[at + 1]);
            r.upper_limit = detail::get_u16(payload, at + 2);
            r.reading = detail::get_u16(payload, at + 4);
            // trailing 2 reserved bytes ignored
        }
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Chassis state machine
// ---------------------------------------------------------------------------

enum class Power : std::uint8_t { Off = 0, On = 1 };
enum class ChassisEvent : std::uint8_t { None = 0, PoweredOn = 1, PoweredOff = 2, Cycled = 3 };

struct ChassisState {
    Power power = Power::Off;
    ChassisEvent last_event = ChassisEvent::None;
    bool operator==(const ChassisState&) const = default;
};

inline std::string encode_chassis(const ChassisState& st) {
    std::string out;
    out += char(std::uint8_t(st.power));
    out += char(std::uint8_t(st.last_event));
    return out;
}

inline ChassisState decode_chassis(std::string_view payload) {
    if (payload.size() != 2 || std::uint8_t(payload[0]) > 1 || std::uint8_t(payload[1]) > 3)
        throw CodecError(CodecError::Kind::MalformedPayload, "bad chassis payload");
    return ChassisState{Power(std::uint8_t(payload[0])), ChassisEvent(std::uint8_t(payload[1]))};
}

struct Transition {
    bool ok = true;
    ChassisState next;
    std::optional<ChassisEvent> event;  // set when the command did something
    ErrorReason reason = ErrorReason::InvalidState;
};

// The full 2-state x 4-command table. Repeating PowerOn while On (or
// PowerOff while Off) acks without logging an event; PowerCycle from Off is
// rejected.
inline Transition chassis_transition(ChassisState cur, Command cmd) {
    Transition t;
    t.next = cur;
    switch (cmd) {
        case Command::PowerOn:
            if (cur.power == Power::Off) {
                t.next = {Power::On, ChassisEvent::PoweredOn};
                t.event = ChassisEvent::PoweredOn;
            }
            return t;
        case Command::PowerOff:
            if (cur.power == Power::On) {
                t.next = {Power::Off, ChassisEvent::PoweredOff};
                t.event = ChassisEvent::PoweredOff;
            }
            return t;
        case Command::PowerCycle:
            if (cur.power == Power::Off) {
                t.ok = false;
                t.reason = ErrorReason::InvalidState;
            } else {
                t.next = {Power::On, ChassisEvent::Cycled};
                t.event = ChassisEvent::Cycled;
            }
            return t;
        case Command::GetChassisState:
            return t;
        default:
            t.ok = false;
            t.reason = ErrorReason::BadCommand;
            return t;
    }
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

struct ClientOptions {
    double timeout_s = 2.0;
    int attempts = 3;  // each retry uses a fresh sequence number
};

struct BmcClientError : std::runtime_error {
    enum class Kind { Timeout, ErrorResponse, Malformed };
    BmcClientError(Kind k, const std::string& what, ErrorReason r = ErrorReason::BadFrame)
        : std::runtime_error(what), kind(k), reason(r) {}
    Kind kind;
    ErrorReason reason;
};

namespace detail {

inline std::uint16_t next_sequence() {
    static std::atomic<std::uint16_t> counter{[] {
        std::random_device rd;
        return std::uint16_t(rd());
    }()};
    return counter.fetch_add(1);
}

// One request/response exchange with retries; duplicate or stale responses
// (sequence mismatch) are ignored while waiting.
inline BmcMessage request(const net::Endpoint& ep, Version version, Command cmd,
                          const std::string& payload, const ClientOptions& opt) {
    net::UdpSocket sock;
    for (int attempt = 0; attempt < std::max(1, opt.attempts); ++attempt) {
        BmcMessage req;
        req.version = version;
        req.sequence = next_sequence();
        req.command = cmd;
        req.payload = payload;
        sock.send_to(ep, encode(req));
        double deadline = monotonic_seconds() + opt.timeout_s;
        while (true) {
            double remain = deadline - monotonic_seconds();
            if (remain <= 0) break;
            auto data = sock.recv(remain);
            if (!data) break;
            BmcMessage resp;
            try {
                resp = decode(*data);
            } catch (const CodecError&) {
                continue;
            }
            if (resp.sequence != req.sequence) continue;  // stale or duplicate
            if (resp.command == Command::Error) {
                ErrorReason reason = ErrorReason::BadFrame;
                if (!resp.payload.empty()) reason = ErrorReason(std::uint8_t(resp.payload[0]));
                std::string what = "BMC error from " + ep.str() + ": ";
                what += reason == ErrorReason::InvalidState  ? "invalid state"
                        : reason == ErrorReason::BadCommand ? "bad command"
                                                            : "bad frame";
                throw BmcClientError(BmcClientError::Kind::ErrorResponse, what, reason);
            }
            if (resp.command != Command::Ack)
                throw BmcClientError(BmcClientError::Kind::Malformed,
                                     "unexpected response command from " + ep.str());
            return resp;
        }
    }
    throw BmcClientError(BmcClientError::Kind::Timeout, "no response from " + ep.str());
}

}  // namespace detail

inline std::vector<SensorRecord> read_sensors(const net::Endpoint& ep, Version version,
                                              const ClientOptions& opt = {}) {
    BmcMessage resp = detail::request(ep, version, Command::GetSensors, "", opt);
    return decode_sensors(resp.payload, resp.version);
}

enum class PowerAction { On, Off, Cycle };

inline Command to_command(PowerAction a) {
    switch (a) {
        case PowerAction::On:
            return Command::PowerOn;
        case PowerAction::Off:
            return Command::PowerOff;
        case PowerAction::Cycle:
            return Command::PowerCycle;
    }
    return Command::PowerOn;
}

inline ChassisState power_control(const net::Endpoint& ep, PowerAction action, Version version = Version::V15,
                                  const ClientOptions& opt = {}) {
    BmcMessage resp = detail::request(ep, version, to_command(action), "", opt);
    return decode_chassis(resp.payload);
}

inline ChassisState get_chassis_state(const net::Endpoint& ep, Version version = Version::V15,
                                      const ClientOptions& opt = {}) {
    BmcMessage resp = detail::request(ep, version, Command::GetChassisState, "", opt);
    return decode_chassis(resp.payload);
}

// ---------------------------------------------------------------------------
// Emulator
// ---------------------------------------------------------------------------

struct EmulatorConfig {
    std::vector<SensorRecord> repository;
    ChassisState initial{Power::Off, ChassisEvent::None};
};

// Lines: `sensor <id> <kind> <reading> <limit>` and `power on|off`.
// Blank lines and `#` comments allowed.
inline EmulatorConfig parse_emulator_config(std::string_view text) {
    EmulatorConfig cfg;
    size_t lineno = 0;
    for (const auto& raw : split(text, '\n')) {
        ++lineno;
        auto line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        auto tok = split_ws(line);
        auto fail = [&](const std::string& why) {
            throw std::runtime_error("emulator config line " + std::to_string(lineno) + ": " + why);
        };
        if (tok[0] == "sensor") {
            if (tok.size() != 5) fail("expected: sensor <id> <kind> <reading> <limit>");
            auto id = parse_u64(tok[1]);
            auto named = parse_sensor_name(tok[2]);
            auto reading = parse_u64(tok[3]);
            auto limit = parse_u64(tok[4]);
            if (!id || *id > 255) fail("bad sensor id");
            if (!named) fail("unknown sensor kind " + tok[2]);
            if (!reading || *reading > 65535 || !limit || *limit > 65535) fail("bad sensor value");
            SensorRecord r;
            r.sensor_id = std::uint8_t(*id);
            r.kind = named->first;
            r.reading = std::uint16_t(*reading);
            r.upper_limit = std::uint16_t(*limit);
            cfg.repository.push_back(r);
        } else if (tok[0] == "power") {
            if (tok.size() != 2 || (tok[1] != "on" && tok[1] != "off")) fail("expected: power on|off");
            cfg.initial.power = tok[1] == "on" ? Power::On : Power::Off;
        } else {
            fail("unknown directive " + tok[0]);
        }
    }
    return cfg;
}

// One emulator instance stands in for one node's BMC: a sensor repository
// plus a chassis power state machine behind a UDP endpoint.
class Emulator {
  public:
    Emulator(const std::string& bind_host, std::uint16_t port, EmulatorConfig cfg)
        : cfg_(std::move(cfg)), chassis_(cfg_.initial) {
        sock_.bind(bind_host, port);
    }

    ~Emulator() { stop(); }

    std::uint16_t port() const { return sock_.local_port(); }

    void start() {
        running_ = true;
        thread_ = std::thread([this] { serve_loop(); });
    }

    void stop() {
        if (!running_.exchange(false)) return;
        if (thread_.joinable()) thread_.join();
    }

    // Blocks; used by the CLI daemon. start()/stop() is the test interface.
    void serve_forever() {
        running_ = true;
        serve_loop();
    }

    ChassisState chassis() const {
        std::lock_guard<std::mutex> g(mu_);
        return chassis_;
    }

    std::vector<ChassisEvent> events() const {
        std::lock_guard<std::mutex> g(mu_);
        return events_;
    }

    size_t malformed_count() const { return malformed_.load(); }

    // Handles one already-received datagram; exposed so tests can drive the
    // state machine without sockets.
    std::optional<std::string> handle(std::string_view datagram) {
        BmcMessage req;
        try {
            req = decode(datagram);
        } catch (const CodecError& e) {
            ++malformed_;
            // Recover the sequence number when the header is intact enough,
            // so the client can correlate the complaint.
            if (e.kind != CodecError::Kind::ShortFrame && e.kind != CodecError::Kind::BadMagic &&
                datagram.size() >= 5) {
                BmcMessage err;
                err.version = Version::V15;
                if (datagram.size() > 2 && (std::uint8_t(datagram[2]) == std::uint8_t(Version::V09) ||
                                            std::uint8_t(datagram[2]) == std::uint8_t(Version::V15)))
                    err.version = Version(std::uint8_t(datagram[2]));
                err.sequence = std::uint16_t(std::uint8_t(datagram[3])) << 8 | std::uint8_t(datagram[4]);
                err.command = Command::Error;
                err.payload = std::string(1, char(std::uint8_t(ErrorReason::BadFrame)));
                return encode(err);
            }
            return std::nullopt;  // dropped
        }

        BmcMessage resp;
        resp.version = req.version;
        resp.sequence = req.sequence;
        switch (req.command) {
            case Command::GetSensors:
                resp.command = Command::Ack;
                resp.payload = encode_sensors(cfg_.repository, req.version);
                return encode(resp);
            case Command::PowerOn:
            case Command::PowerOff:
            case Command::PowerCycle:
            case Command::GetChassisState: {
                std::lock_guard<std::mutex> g(mu_);
                Transition t = chassis_transition(chassis_, req.command);
                if (!t.ok) {
                    resp.command = Command::Error;
                    resp.payload = std::string(1, char(std::uint8_t(t.reason)));
                    return encode(resp);
                }
                chassis_ = t.next;
                if (t.event) events_.push_back(*t.event);
                resp.command = Command::Ack;
                resp.payload = encode_chassis(chassis_);
                return encode(resp);
            }
            case Command::Ack:
            case Command::Error:
            default: {
                resp.command = Command::Error;
                resp.payload = std::string(1, char(std::uint8_t(ErrorReason::BadCommand)));
                return encode(resp);
            }
        }
    }

  private:
    void serve_loop() {
        while (running_) {
            sockaddr_in from{};
            auto data = sock_.recv(0.1, &from);
            if (!data) continue;
            auto reply = handle(*data);
            if (reply) sock_.send_to(from, *reply);
        }
    }

    EmulatorConfig cfg_;
    mutable std::mutex mu_;
    ChassisState chassis_;
    std::vector<ChassisEvent> events_;
    std::atomic<size_t> malformed_{0};
    std::atomic<bool> running_{false};
    net::UdpSocket sock_;
    std::thread thread_;
};

}  // namespace cadm::bmc

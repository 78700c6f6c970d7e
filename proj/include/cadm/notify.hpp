#pragma once

// Alarm/notification delivery. Mail is environment-specific, so the monitor
// and the accounting pass both talk to this small abstraction instead: a
// file-append sink for tests and desk use, a command-pipe sink for handing
// off to a real mailer.

#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

#include "cadm/subprocess.hpp"
#include "cadm/util.hpp"

namespace cadm::notify {

class Notifier {
  public:
    virtual ~Notifier() = default;
    virtual bool deliver(const std::string& subject, const std::string& body) = 0;
};

// Appends `== <subject> ==` plus the body to a file.
class FileNotifier : public Notifier {
  public:
    explicit FileNotifier(std::string path) : path_(std::move(path)) {}
    bool deliver(const std::string& subject, const std::string& body) override {
        std::ofstream out(path_, std::ios::app | std::ios::binary);
        if (!out) return false;
        out << "== " << subject << " ==\n" << body;
        if (!body.empty() && body.back() != '\n') out << '\n';
        return bool(out);
    }
    const std::string& path() const { return path_; }

  private:
    std::string path_;
};

// Pipes the message into a command (e.g. `mail -s subject admins`); the
// subject is exported as NOTIFY_SUBJECT.
class CommandNotifier : public Notifier {
  public:
    explicit CommandNotifier(std::string command, double timeout_s = 30)
        : command_(std::move(command)), timeout_s_(timeout_s) {}
    bool deliver(const std::string& subject, const std::string& body) override {
        auto r = proc::run_shell(command_, {{"NOTIFY_SUBJECT", subject}}, {timeout_s_, 1 << 20}, body);
        return r.exit_status == 0;
    }

  private:
    std::string command_;
    double timeout_s_;
};

// Swallows everything; stands in when no notifier is configured.
class NullNotifier : public Notifier {
  public:
    bool deliver(const std::string&, const std::string&) override { return true; }
};

// specs: "file:<path>", "command:<cmd>", "none"
inline std::unique_ptr<Notifier> make_notifier(std::string_view spec) {
    if (spec == "none" || spec.empty()) return std::make_unique<NullNotifier>();
    if (spec.rfind("file:", 0) == 0) return std::make_unique<FileNotifier>(std::string(spec.substr(5)));
    if (spec.rfind("command:", 0) == 0)
        return std::make_unique<CommandNotifier>(std::string(spec.substr(8)));
    throw std::invalid_argument("unknown notifier spec: " + std::string(spec));
}

}  // namespace cadm::notify

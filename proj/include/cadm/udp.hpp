#pragma once

// Minimal IPv4 UDP socket wrapper. Blocking send, timed receive.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>

namespace cadm::net {

struct Endpoint {
    std::string host;
    std::uint16_t port = 0;
    std::string str() const { return host + ":" + std::to_string(port); }
    bool operator==(const Endpoint&) const = default;
};

// "host:port"; the host part may be a name or dotted quad.
inline Endpoint parse_endpoint(std::string_view s, std::uint16_t default_port = 0) {
    Endpoint ep;
    size_t colon = s.rfind(':');
    if (colon == std::string_view::npos) {
        if (default_port == 0) throw std::invalid_argument("endpoint missing port: " + std::string(s));
        ep.host = std::string(s);
        ep.port = default_port;
        return ep;
    }
    ep.host = std::string(s.substr(0, colon));
    auto port_s = s.substr(colon + 1);
    char* end = nullptr;
    unsigned long p = std::strtoul(std::string(port_s).c_str(), &end, 10);
    if (port_s.empty() || p == 0 || p > 65535)
        throw std::invalid_argument("bad endpoint port: " + std::string(s));
    ep.port = std::uint16_t(p);
    if (ep.host.empty()) ep.host = "127.0.0.1";
    return ep;
}

inline sockaddr_in resolve_ipv4(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_DGRAM;
    addrinfo* res = nullptr;
    int rc = ::getaddrinfo(host.c_str(), nullptr, &hints, &res);
    if (rc != 0 || !res) throw std::runtime_error("cannot resolve " + host + ": " + gai_strerror(rc));
    sockaddr_in addr{};
    std::memcpy(&addr, res->ai_addr, sizeof(sockaddr_in));
    addr.sin_port = htons(port);
    ::freeaddrinfo(res);
    return addr;
}

class UdpSocket {
  public:
    UdpSocket() {
        fd_ = ::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0);
        if (fd_ < 0) throw std::system_error(errno, std::generic_category(), "socket");
    }
    ~UdpSocket() {
        if (fd_ >= 0) ::close(fd_);
    }
    UdpSocket(UdpSocket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    UdpSocket& operator=(UdpSocket&& o) noexcept {
        if (this != &o) {
            if (fd_ >= 0) ::close(fd_);
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    UdpSocket(const UdpSocket&) = delete;
    UdpSocket& operator=(const UdpSocket&) = delete;

    // port 0 picks an ephemeral port; check local_port() afterwards.
    void bind(const std::string& host, std::uint16_t port) {
        sockaddr_in addr = resolve_ipv4(host, port);
        if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
            throw std::system_error(errno, std::generic_category(),
                                    "bind " + host + ":" + std::to_string(port));
    }

    std::uint16_t local_port() const {
        sockaddr_in addr{};
        socklen_t len = sizeof addr;
        if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len) != 0)
            throw std::system_error(errno, std::generic_category(), "getsockname");
        return ntohs(addr.sin_port);
    }

    void send_to(const Endpoint& to, std::string_view data) {
        sockaddr_in addr = resolve_ipv4(to.host, to.port);
        ssize_t n = ::sendto(fd_, data.data(), data.size(), 0, reinterpret_cast<sockaddr*>(&addr),
                             sizeof addr);
        if (n < 0) throw std::system_error(errno, std::generic_category(), "sendto " + to.str());
    }

    void send_to(const sockaddr_in& addr, std::string_view data) {
        ::sendto(fd_, data.data(), data.size(), 0,
                 reinterpret_cast<const sockaddr*>(&addr), sizeof addr);
    }

    // nullopt on timeout. timeout_s <= 0 waits forever.
    std::optional<std::string> recv(double timeout_s, sockaddr_in* from = nullptr) {
        struct pollfd pfd {
            fd_, POLLIN, 0
        };
        int wait_ms = timeout_s <= 0 ? -1 : int(timeout_s * 1000) + 1;
        while (true) {
            int pr = ::poll(&pfd, 1, wait_ms);
            if (pr < 0 && errno == EINTR) continue;
            if (pr <= 0) return std::nullopt;
            break;
        }
        char buf[65536];
        sockaddr_in src{};
        socklen_t slen = sizeof src;
        ssize_t n = ::recvfrom(fd_, buf, sizeof buf, 0, reinterpret_cast<sockaddr*>(&src), &slen);
        if (n < 0) return std::nullopt;
        if (from) *from = src;
        return std::string(buf, size_t(n));
    }

    int fd() const { return fd_; }

  private:
    int fd_ = -1;
};

}  // namespace cadm::net

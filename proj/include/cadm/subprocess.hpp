#pragma once

// Local process execution with separate stdout/stderr capture, a wall-clock
// deadline and bounded buffers. Children run in their own process group so
// a timeout kill takes the whole pipeline down.

#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <mutex>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cadm/util.hpp"

extern char** environ;

namespace cadm::proc {

inline constexpr int kTimeoutStatus = 124;
inline constexpr int kLaunchFailureStatus = 125;
inline constexpr size_t kDefaultMaxCapture = 16 * 1024 * 1024;  // per stream

struct RunResult {
    int exit_status = 0;
    std::string out;
    std::string err;
    bool timed_out = false;
    bool launch_failed = false;
    bool truncated = false;
    double duration = 0;  // seconds
};

struct RunLimits {
    double timeout_s = 0;  // 0 = no deadline
    size_t max_capture = kDefaultMaxCapture;
};

namespace detail {

inline void ignore_sigpipe_once() {
    static std::once_flag once;
    std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

struct SpawnPipes {
    int in_r = -1, in_w = -1, out_r = -1, out_w = -1, err_r = -1, err_w = -1;
    ~SpawnPipes() {
        for (int fd : {in_r, in_w, out_r, out_w, err_r, err_w})
            if (fd >= 0) ::close(fd);
    }
    void release(int& fd) { fd = -1; }
};

}  // namespace detail

// argv[0] is resolved via PATH. extra_env entries override inherited ones.
inline RunResult run_argv(const std::vector<std::string>& argv,
                          const std::vector<std::pair<std::string, std::string>>& extra_env,
                          const RunLimits& limits, std::string_view stdin_data = {}) {
    detail::ignore_sigpipe_once();
    RunResult res;
    double start = monotonic_seconds();

    detail::SpawnPipes p;
    int fds[2];
    auto mkpipe = [&](int& r, int& w) {
        if (::pipe2(fds, O_CLOEXEC) != 0) throw std::system_error(errno, std::generic_category(), "pipe2");
        r = fds[0];
        w = fds[1];
    };
    mkpipe(p.in_r, p.in_w);
    mkpipe(p.out_r, p.out_w);
    mkpipe(p.err_r, p.err_w);

    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_adddup2(&fa, p.in_r, 0);
    posix_spawn_file_actions_adddup2(&fa, p.out_w, 1);
    posix_spawn_file_actions_adddup2(&fa, p.err_w, 2);

    posix_spawnattr_t attr;
    posix_spawnattr_init(&attr);
    posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP);
    posix_spawnattr_setpgroup(&attr, 0);

    std::vector<std::string> env_store;
    for (char** e = environ; *e; ++e) {
        std::string_view entry(*e);
        bool overridden = false;
        for (const auto& [k, v] : extra_env)
            if (entry.size() > k.size() && entry.compare(0, k.size(), k) == 0 && entry[k.size()] == '=')
                overridden = true;
        if (!overridden) env_store.emplace_back(entry);
    }
    for (const auto& [k, v] : extra_env) env_store.push_back(k + "=" + v);

    std::vector<char*> argv_c, env_c;
    for (const auto& a : argv) argv_c.push_back(const_cast<char*>(a.c_str()));
    argv_c.push_back(nullptr);
    for (const auto& e : env_store) env_c.push_back(const_cast<char*>(e.c_str()));
    env_c.push_back(nullptr);

    pid_t pid = -1;
    int rc = ::posix_spawnp(&pid, argv_c[0], &fa, &attr, argv_c.data(), env_c.data());
    posix_spawn_file_actions_destroy(&fa);
    posix_spawnattr_destroy(&attr);

    if (rc != 0) {
        res.launch_failed = true;
        res.exit_status = kLaunchFailureStatus;
        res.err = std::string("launch failed: ") + std::strerror(rc);
        res.duration = monotonic_seconds() - start;
        return res;
    }

    // Parent keeps only its ends.
    ::close(p.in_r);
    p.release(p.in_r);
    ::close(p.out_w);
    p.release(p.out_w);
    ::close(p.err_w);
    p.release(p.err_w);
    if (stdin_data.empty()) {
        ::close(p.in_w);
        p.release(p.in_w);
    }

    size_t stdin_off = 0;
    bool killed = false;
    double kill_at = 0;
    auto append_capped = [&](std::string& dst, const char* buf, size_t n) {
        size_t room = limits.max_capture > dst.size() ? limits.max_capture - dst.size() : 0;
        if (n > room) {
            res.truncated = true;
            n = room;
        }
        dst.append(buf, n);
    };

    char buf[65536];
    while (p.out_r >= 0 || p.err_r >= 0 || p.in_w >= 0) {
        struct pollfd pfds[3];
        int n = 0;
        int idx_out = -1, idx_err = -1, idx_in = -1;
        if (p.out_r >= 0) {
            pfds[n] = {p.out_r, POLLIN, 0};
            idx_out = n++;
        }
        if (p.err_r >= 0) {
            pfds[n] = {p.err_r, POLLIN, 0};
            idx_err = n++;
        }
        if (p.in_w >= 0) {
            pfds[n] = {p.in_w, POLLOUT, 0};
            idx_in = n++;
        }

        int wait_ms = -1;
        double now = monotonic_seconds();
        if (killed) {
            wait_ms = int(std::max(0.0, (kill_at + 2.0 - now)) * 1000);  // grace drain after kill
        } else if (limits.timeout_s > 0) {
            double remain = limits.timeout_s - (now - start);
            if (remain <= 0) {
                ::kill(-pid, SIGKILL);
                killed = true;
                kill_at = now;
                res.timed_out = true;
                continue;
            }
            wait_ms = int(remain * 1000) + 1;
        }

        int pr = ::poll(pfds, nfds_t(n), wait_ms);
        if (pr < 0) {
            if (errno == EINTR) continue;
            break;
        }
        if (pr == 0) {
            if (killed) break;  // writers survived the kill grace; stop draining
            continue;           // deadline handled at loop top
        }

        auto service_read = [&](int idx, int& fd, std::string& dst) {
            if (idx < 0 || !(pfds[idx].revents & (POLLIN | POLLHUP | POLLERR))) return;
            ssize_t r = ::read(fd, buf, sizeof buf);
            if (r > 0) {
                append_capped(dst, buf, size_t(r));
            } else if (r == 0 || (r < 0 && errno != EINTR && errno != EAGAIN)) {
                ::close(fd);
                fd = -1;
            }
        };
        service_read(idx_out, p.out_r, res.out);
        service_read(idx_err, p.err_r, res.err);
        if (idx_in >= 0 && (pfds[idx_in].revents & (POLLOUT | POLLHUP | POLLERR))) {
            ssize_t w = ::write(p.in_w, stdin_data.data() + stdin_off, stdin_data.size() - stdin_off);
            if (w > 0) stdin_off += size_t(w);
            if (w < 0 || stdin_off == stdin_data.size()) {
                ::close(p.in_w);
                p.release(p.in_w);
            }
        }
    }

    int wstatus = 0;
    while (::waitpid(pid, &wstatus, 0) < 0 && errno == EINTR) {
    }
    if (res.timed_out)
        res.exit_status = kTimeoutStatus;
    else if (WIFEXITED(wstatus))
        res.exit_status = WEXITSTATUS(wstatus);
    else if (WIFSIGNALED(wstatus))
        res.exit_status = 128 + WTERMSIG(wstatus);
    res.duration = monotonic_seconds() - start;
    return res;
}

inline RunResult run_shell(const std::string& command,
                           const std::vector<std::pair<std::string, std::string>>& extra_env,
                           const RunLimits& limits, std::string_view stdin_data = {}) {
    return run_argv({"/bin/sh", "-c", command}, extra_env, limits, stdin_data);
}

}  // namespace cadm::proc

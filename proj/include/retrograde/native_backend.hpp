#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "debug_port.hpp"
#include "error.hpp"
#include "memexec.hpp"
#include "payload_image.hpp"

#if defined(__linux__)
#include <cerrno>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <sys/ptrace.h>
#include <sys/syscall.h>
#include <sys/user.h>
#include <sys/wait.h>
#include <unistd.h>
#endif

namespace retrograde {

inline bool native_available() {
#if defined(__linux__)
    return true;
#else
    return false;
#endif
}

#if defined(__linux__)

namespace detail {

inline long gettid_now() { return static_cast<long>(::syscall(SYS_gettid)); }

inline bool fatal_signal(int sig) {
    return sig == SIGILL || sig == SIGSEGV || sig == SIGBUS || sig == SIGFPE;
}

} // namespace detail

/// Debug session over a real traced child. The child volunteers with
/// TRACEME before exec, so the first wait_stop sees the exec trap; from
/// there every op is plain ptrace. All requests must come from the thread
/// that spawned the child — the kernel ties the tracer to that thread.
class NativeSession : public TraceSession {
public:
    NativeSession(pid_t pid, int out_fd) : pid_(pid), out_fd_(out_fd), tid_(detail::gettid_now()) {}

    NativeSession(const NativeSession&) = delete;
    NativeSession& operator=(const NativeSession&) = delete;

    ~NativeSession() override {
        if (alive_) {
            ::kill(pid_, SIGKILL);
            int status = 0;
            ::waitpid(pid_, &status, 0);
        }
        if (out_fd_ >= 0) ::close(out_fd_);
    }

    pid_t pid() const { return pid_; }

    DebugEvent wait_stop() override {
        require_thread();
        if (waited_) throw error(errc::not_stopped, "no outstanding stop to wait for");
        waited_ = true;
        return wait_and_classify();
    }

    DebugEvent step() override {
        resume(false, Resume::step);
        return wait_and_classify();
    }

    DebugEvent continue_to_syscall() override {
        resume(true, Resume::sys);
        return wait_and_classify();
    }

    RegisterFile get_regs() override {
        require_stopped();
        user_regs_struct raw{};
        if (::ptrace(PTRACE_GETREGS, pid_, nullptr, &raw) != 0)
            throw error(errc::child_lost, std::string("getregs: ") + std::strerror(errno));
        RegisterFile r;
        r.rax = raw.rax; r.rbx = raw.rbx; r.rcx = raw.rcx; r.rdx = raw.rdx;
        r.rsi = raw.rsi; r.rdi = raw.rdi; r.rbp = raw.rbp; r.rsp = raw.rsp;
        r.r8 = raw.r8; r.r9 = raw.r9; r.r10 = raw.r10; r.r11 = raw.r11;
        r.r12 = raw.r12; r.r13 = raw.r13; r.r14 = raw.r14; r.r15 = raw.r15;
        r.rip = raw.rip;
        r.eflags = raw.eflags;
        r.pending_syscall = at_syscall_stop() ? raw.orig_rax : raw.rax;
        return r;
    }

    void set_regs(const RegisterFile& r) override {
        require_stopped();
        user_regs_struct raw{};
        if (::ptrace(PTRACE_GETREGS, pid_, nullptr, &raw) != 0)
            throw error(errc::child_lost, std::string("getregs: ") + std::strerror(errno));
        raw.rax = r.rax; raw.rbx = r.rbx; raw.rcx = r.rcx; raw.rdx = r.rdx;
        raw.rsi = r.rsi; raw.rdi = r.rdi; raw.rbp = r.rbp; raw.rsp = r.rsp;
        raw.r8 = r.r8; raw.r9 = r.r9; raw.r10 = r.r10; raw.r11 = r.r11;
        raw.r12 = r.r12; raw.r13 = r.r13; raw.r14 = r.r14; raw.r15 = r.r15;
        raw.rip = r.rip;
        raw.eflags = r.eflags;
        // Only a syscall stop has a live syscall slot to rewrite.
        if (at_syscall_stop()) raw.orig_rax = r.pending_syscall;
        if (::ptrace(PTRACE_SETREGS, pid_, nullptr, &raw) != 0)
            throw error(errc::child_lost, std::string("setregs: ") + std::strerror(errno));
    }

    std::vector<std::uint8_t> read_mem(std::uint64_t addr, std::size_t len) override {
        require_stopped();
        std::vector<std::uint8_t> out;
        out.reserve(len);
        std::size_t got = 0;
        while (got < len) {
            errno = 0;
            long word = ::ptrace(PTRACE_PEEKTEXT, pid_, reinterpret_cast<void*>(addr + got), nullptr);
            if (word == -1 && errno != 0)
                throw error(errc::bad_address, "peek failed", addr + got);
            std::size_t take = std::min<std::size_t>(sizeof(long), len - got);
            const auto* bytes = reinterpret_cast<const std::uint8_t*>(&word);
            out.insert(out.end(), bytes, bytes + take);
            got += take;
        }
        return out;
    }

    void write_mem(std::uint64_t addr, std::span<const std::uint8_t> bytes) override {
        require_stopped();
        std::size_t put = 0;
        while (put < bytes.size()) {
            std::size_t chunk = std::min<std::size_t>(sizeof(long), bytes.size() - put);
            long word = 0;
            if (chunk < sizeof(long)) { // merge the tail into the existing word
                errno = 0;
                word = ::ptrace(PTRACE_PEEKTEXT, pid_, reinterpret_cast<void*>(addr + put), nullptr);
                if (word == -1 && errno != 0)
                    throw error(errc::bad_address, "peek for partial poke failed", addr + put);
            }
            std::memcpy(&word, bytes.data() + put, chunk);
            if (::ptrace(PTRACE_POKETEXT, pid_, reinterpret_cast<void*>(addr + put),
                         reinterpret_cast<void*>(word)) != 0)
                throw error(errc::bad_address, "poke failed", addr + put);
            put += chunk;
        }
    }

    void set_exit_kill() override {
        require_stopped();
        if (::ptrace(PTRACE_SETOPTIONS, pid_, nullptr, reinterpret_cast<void*>(PTRACE_O_EXITKILL)) != 0)
            throw error(errc::backend_error, std::string("setoptions: ") + std::strerror(errno));
    }

    void kill_child() override {
        require_thread();
        if (!alive_) return;
        ::kill(pid_, SIGKILL);
        int status = 0;
        ::waitpid(pid_, &status, 0);
        alive_ = false;
        stopped_ = false;
        last_ = DebugEvent::Kind::killed;
        drain_output();
    }

    bool alive() const override { return alive_; }

    const std::string& captured_output() override {
        drain_output();
        return captured_;
    }

private:
    enum class Resume { none, step, sys };

    bool at_syscall_stop() const {
        return in_syscall_ || last_ == DebugEvent::Kind::syscall_exit;
    }

    void require_thread() {
        if (detail::gettid_now() != tid_)
            throw error(errc::wrong_thread, "session must be driven from its spawning thread");
    }

    void require_stopped() {
        require_thread();
        if (!alive_) throw error(errc::not_stopped, "child is gone");
        if (!waited_ || !stopped_) throw error(errc::not_stopped, "child is not in a trace stop");
    }

    void resume(bool to_syscall, Resume kind) {
        require_stopped();
        // A stop's signal is normally held back; a fatal one is passed on
        // so the child dies the same way the emulator reports a fault.
        long sig = deliver_;
        deliver_ = 0;
        long rc = to_syscall
                      ? ::ptrace(PTRACE_SYSCALL, pid_, nullptr, reinterpret_cast<void*>(sig))
                      : ::ptrace(PTRACE_SINGLESTEP, pid_, nullptr, reinterpret_cast<void*>(sig));
        if (rc != 0)
            throw error(errc::step_failed, std::string("resume: ") + std::strerror(errno));
        stopped_ = false;
        last_resume_ = kind;
    }

    DebugEvent wait_and_classify() {
        int status = 0;
        if (::waitpid(pid_, &status, 0) < 0)
            throw error(errc::child_lost, std::string("waitpid: ") + std::strerror(errno));

        DebugEvent ev;
        if (WIFEXITED(status)) {
            alive_ = false;
            ev = {DebugEvent::Kind::exited, 0, WEXITSTATUS(status)};
        } else if (WIFSIGNALED(status)) {
            alive_ = false;
            ev = {DebugEvent::Kind::killed, WTERMSIG(status), 0};
        } else if (WIFSTOPPED(status)) {
            stopped_ = true;
            int sig = WSTOPSIG(status);
            if (sig == SIGTRAP) {
                if (last_resume_ == Resume::none) {
                    ev = {DebugEvent::Kind::signal_stop, SIGTRAP, 0}; // exec trap
                } else if (in_syscall_) {
                    // Any trap while inside a syscall marks its completion,
                    // whether we resumed with SYSCALL or SINGLESTEP.
                    in_syscall_ = false;
                    ev = {DebugEvent::Kind::syscall_exit, 0, 0};
                } else if (last_resume_ == Resume::sys) {
                    in_syscall_ = true;
                    ev = {DebugEvent::Kind::syscall_enter, 0, 0};
                } else {
                    ev = {DebugEvent::Kind::step_stop, 0, 0};
                }
            } else {
                ev = {DebugEvent::Kind::signal_stop, sig, 0};
                if (detail::fatal_signal(sig)) deliver_ = sig;
            }
        } else {
            throw error(errc::child_lost, "unexpected wait status");
        }
        last_ = ev.kind;
        drain_output();
        return ev;
    }

    void drain_output() {
        if (out_fd_ < 0) return;
        char buf[4096];
        for (;;) {
            ssize_t n = ::read(out_fd_, buf, sizeof(buf));
            if (n > 0) {
                captured_.append(buf, static_cast<std::size_t>(n));
                continue;
            }
            if (n == 0) { // writer side fully closed
                ::close(out_fd_);
                out_fd_ = -1;
            }
            break;
        }
    }

    pid_t pid_;
    int out_fd_ = -1;
    long tid_;
    bool waited_ = false;
    bool stopped_ = false;
    bool alive_ = true;
    bool in_syscall_ = false;
    Resume last_resume_ = Resume::none;
    DebugEvent::Kind last_ = DebugEvent::Kind::signal_stop;
    long deliver_ = 0;
    std::string captured_;
};

namespace detail {

/// Fork a child that volunteers for tracing and execs `path`. The child's
/// stdout and stderr share one pipe back to the session; a close-on-exec
/// status pipe reports pre-exec failures ('T' trace refused, 'E' exec
/// failed), going quiet exactly when exec succeeds.
inline std::unique_ptr<NativeSession> spawn_path(const std::string& path,
                                                 const std::vector<std::string>& args,
                                                 const std::vector<std::string>& env) {
    int out_pipe[2];
    if (::pipe(out_pipe) != 0)
        throw error(errc::spawn_failed, std::string("pipe: ") + std::strerror(errno));
    int status_pipe[2];
    if (::pipe2(status_pipe, O_CLOEXEC) != 0) {
        ::close(out_pipe[0]);
        ::close(out_pipe[1]);
        throw error(errc::spawn_failed, std::string("pipe2: ") + std::strerror(errno));
    }

    pid_t pid = ::fork();
    if (pid < 0) {
        for (int fd : {out_pipe[0], out_pipe[1], status_pipe[0], status_pipe[1]}) ::close(fd);
        throw error(errc::spawn_failed, std::string("fork: ") + std::strerror(errno));
    }

    if (pid == 0) {
        auto fail = [&](char tag) {
            char msg[2] = {tag, static_cast<char>(errno & 0xFF)};
            ssize_t ignored = ::write(status_pipe[1], msg, 2);
            (void)ignored;
            ::_exit(127);
        };
        ::setpgid(0, 0); // own group, so a group-wide signal stays in the payload
        ::close(out_pipe[0]);
        ::close(status_pipe[0]);
        if (::dup2(out_pipe[1], 1) < 0 || ::dup2(out_pipe[1], 2) < 0) fail('E');
        ::close(out_pipe[1]);
        int devnull = ::open("/dev/null", O_RDONLY);
        if (devnull >= 0) {
            ::dup2(devnull, 0);
            ::close(devnull);
        }
        if (::ptrace(PTRACE_TRACEME, 0, nullptr, nullptr) != 0) fail('T');
        std::vector<char*> argv;
        argv.push_back(const_cast<char*>(path.c_str()));
        for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
        argv.push_back(nullptr);
        std::vector<char*> envp;
        for (const auto& e : env) envp.push_back(const_cast<char*>(e.c_str()));
        envp.push_back(nullptr);
        ::execve(path.c_str(), argv.data(), envp.data());
        fail('E');
    }

    ::close(out_pipe[1]);
    ::close(status_pipe[1]);
    ::fcntl(out_pipe[0], F_SETFL, O_NONBLOCK);

    char msg[2];
    ssize_t n;
    do {
        n = ::read(status_pipe[0], msg, 2);
    } while (n < 0 && errno == EINTR);
    ::close(status_pipe[0]);

    if (n > 0) {
        int status = 0;
        ::waitpid(pid, &status, 0);
        ::close(out_pipe[0]);
        int err = n >= 2 ? static_cast<unsigned char>(msg[1]) : 0;
        if (msg[0] == 'T')
            throw error(errc::trace_refused, std::string("traceme: ") + std::strerror(err));
        throw error(errc::spawn_failed, std::string("exec: ") + std::strerror(err));
    }

    return std::make_unique<NativeSession>(pid, out_pipe[0]);
}

} // namespace detail

/// Trace an on-disk executable. The child starts with exactly the given
/// environment (empty by default, for reproducible runs).
inline std::unique_ptr<NativeSession> spawn_traced(const std::string& path,
                                                   const std::vector<std::string>& args = {},
                                                   const std::vector<std::string>& env = {}) {
    return detail::spawn_path(path, args, env);
}

/// Trace a payload image without writing it to disk: the bytes go into an
/// anonymous memory file and the child execs its /proc fd link. Flat blobs
/// are first wrapped as a minimal one-segment executable.
inline std::unique_ptr<NativeSession> spawn_traced(const PayloadImage& image,
                                                   const std::string& name = "payload") {
    std::vector<std::uint8_t> wrapped;
    const std::vector<std::uint8_t>* elf_bytes = &image.file_bytes;
    if (image.format != ImageFormat::elf64) {
        wrapped = emit_minimal_elf(image);
        elf_bytes = &wrapped;
    }
    StagedImage staged = memfd_stage(*elf_bytes, name);
    return detail::spawn_path(staged.self_path(), {}, {});
    // `staged` closes here; the exec'd child holds its own reference.
}

#else // !__linux__

class NativeSession : public TraceSession {
public:
    DebugEvent wait_stop() override { throw unsupported_(); }
    DebugEvent step() override { throw unsupported_(); }
    DebugEvent continue_to_syscall() override { throw unsupported_(); }
    RegisterFile get_regs() override { throw unsupported_(); }
    void set_regs(const RegisterFile&) override { throw unsupported_(); }
    std::vector<std::uint8_t> read_mem(std::uint64_t, std::size_t) override { throw unsupported_(); }
    void write_mem(std::uint64_t, std::span<const std::uint8_t>) override { throw unsupported_(); }
    void set_exit_kill() override { throw unsupported_(); }
    void kill_child() override { throw unsupported_(); }
    bool alive() const override { return false; }
    const std::string& captured_output() override { throw unsupported_(); }

private:
    static error unsupported_() {
        return error(errc::unsupported_platform, "native tracing requires Linux");
    }
};

inline std::unique_ptr<NativeSession> spawn_traced(const std::string&,
                                                   const std::vector<std::string>& = {},
                                                   const std::vector<std::string>& = {}) {
    throw error(errc::unsupported_platform, "native tracing requires Linux");
}

inline std::unique_ptr<NativeSession> spawn_traced(const PayloadImage&,
                                                   const std::string& = "payload") {
    throw error(errc::unsupported_platform, "native tracing requires Linux");
}

#endif

} // namespace retrograde

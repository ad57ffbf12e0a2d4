#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

#if defined(__linux__)
#include <cerrno>
#include <sys/ptrace.h>
#endif

namespace retrograde {

struct RegisterFile {
    std::uint64_t rax = 0, rbx = 0, rcx = 0, rdx = 0;
    std::uint64_t rsi = 0, rdi = 0, rbp = 0, rsp = 0;
    std::uint64_t r8 = 0, r9 = 0, r10 = 0, r11 = 0;
    std::uint64_t r12 = 0, r13 = 0, r14 = 0, r15 = 0;
    std::uint64_t rip = 0;
    std::uint64_t eflags = 0;
    // Syscall number captured at a syscall stop (the entry rax, preserved
    // even after the kernel overwrites rax with the result). Mirrors rax
    // at every other stop.
    std::uint64_t pending_syscall = 0;
};

struct DebugEvent {
    enum class Kind {
        step_stop,     // single instruction retired
        syscall_enter, // stopped before the kernel runs the syscall
        syscall_exit,  // stopped after the kernel ran it, result in rax
        signal_stop,   // stopped by a signal (delivery held back)
        exited,        // child left normally, exit_code valid
        killed,        // child terminated by a signal, signal valid
    };
    Kind kind = Kind::step_stop;
    int signal = 0;
    int exit_code = 0;

    bool terminal() const { return kind == Kind::exited || kind == Kind::killed; }
};

inline const char* event_name(DebugEvent::Kind k) {
    switch (k) {
    case DebugEvent::Kind::step_stop: return "step";
    case DebugEvent::Kind::syscall_enter: return "syscall-enter";
    case DebugEvent::Kind::syscall_exit: return "syscall-exit";
    case DebugEvent::Kind::signal_stop: return "signal";
    case DebugEvent::Kind::exited: return "exited";
    case DebugEvent::Kind::killed: return "killed";
    }
    return "?";
}

/// Single-stepping debug surface the controllers drive. Implemented by the
/// ptrace backend (a real child process) and the deterministic emulator.
class TraceSession {
public:
    virtual ~TraceSession() = default;

    /// Block until the initial stop after spawn.
    virtual DebugEvent wait_stop() = 0;
    /// Retire exactly one instruction. A syscall instruction performs its
    /// entire kernel effect within the one step.
    virtual DebugEvent step() = 0;
    /// Run until the next syscall boundary (enter, then exit), or until
    /// the child stops or leaves for another reason.
    virtual DebugEvent continue_to_syscall() = 0;

    virtual RegisterFile get_regs() = 0;
    virtual void set_regs(const RegisterFile& regs) = 0;
    virtual std::vector<std::uint8_t> read_mem(std::uint64_t addr, std::size_t len) = 0;
    virtual void write_mem(std::uint64_t addr, std::span<const std::uint8_t> bytes) = 0;

    /// Arrange for the child to die with its tracer.
    virtual void set_exit_kill() = 0;
    /// Force-terminate a child that is still live.
    virtual void kill_child() = 0;

    /// True until a terminal event has been observed.
    virtual bool alive() const = 0;
    /// Everything the child has written to stdout/stderr so far.
    virtual const std::string& captured_output() = 0;
};

enum class ProbeResult { free, occupied };

/// Ask to become our parent's tracee. EPERM means some other tracer is
/// already attached (the single-tracer rule), anything else succeeds and
/// leaves this process marked as traced — callers normally probe from a
/// short-lived fork.
inline ProbeResult probe_self() {
#if defined(__linux__)
    errno = 0;
    long rc = ::ptrace(PTRACE_TRACEME, 0, nullptr, nullptr);
    if (rc == 0) return ProbeResult::free;
    if (errno == EPERM) return ProbeResult::occupied;
    throw error(errc::backend_error, "unexpected trace probe failure");
#else
    throw error(errc::unsupported_platform, "trace probe requires Linux");
#endif
}

} // namespace retrograde

#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "addr_map.hpp"
#include "debug_port.hpp"
#include "error.hpp"
#include "payload_image.hpp"

namespace retrograde {

namespace emu {

inline constexpr std::uint64_t kStackTop = 0x7FFFFFFFE000ull;
inline constexpr std::uint64_t kStackSize = 64 * 1024;
inline constexpr std::uint64_t kInstructionBudget = 1'000'000;

inline std::uint64_t& reg_ref(RegisterFile& r, unsigned index) {
    switch (index & 15) {
    case 0: return r.rax;
    case 1: return r.rcx;
    case 2: return r.rdx;
    case 3: return r.rbx;
    case 4: return r.rsp;
    case 5: return r.rbp;
    case 6: return r.rsi;
    case 7: return r.rdi;
    case 8: return r.r8;
    case 9: return r.r9;
    case 10: return r.r10;
    case 11: return r.r11;
    case 12: return r.r12;
    case 13: return r.r13;
    case 14: return r.r14;
    default: return r.r15;
    }
}

} // namespace emu

/// Deterministic user-mode machine for the instruction subset, with a tiny
/// in-process kernel model: write to fd 1/2 is captured, read from fd 0
/// hits instant EOF, exit ends the run, everything else fails with -ENOSYS.
class EmuMachine {
public:
    explicit EmuMachine(const PayloadImage& image) : mem_(image.segments) {
        const Segment* entry_seg = image.segment_containing(image.entry);
        if (!entry_seg || !entry_seg->x)
            throw error(errc::load_fault, "entry point not in executable memory");
        Segment stack;
        stack.vaddr = emu::kStackTop - emu::kStackSize;
        stack.bytes.assign(emu::kStackSize, 0);
        stack.r = stack.w = true;
        mem_.push_back(std::move(stack));

        regs.rip = image.entry;
        regs.rsp = emu::kStackTop;
        regs.eflags = 0x202;
    }

    RegisterFile regs;
    std::string captured;
    bool exited = false;
    std::uint32_t exit_status = 0;

    const Segment* find(std::uint64_t addr, std::uint64_t len = 1) const {
        for (const auto& seg : mem_)
            if (seg.contains(addr, len)) return &seg;
        return nullptr;
    }

    std::vector<std::uint8_t> read(std::uint64_t addr, std::size_t len) const {
        const Segment* seg = find(addr, len ? len : 1);
        if (!seg) throw error(errc::bad_address, "read from unmapped memory", addr);
        auto off = static_cast<std::size_t>(addr - seg->vaddr);
        return {seg->bytes.begin() + off, seg->bytes.begin() + off + len};
    }

    void write(std::uint64_t addr, std::span<const std::uint8_t> bytes) {
        Segment* seg = nullptr;
        for (auto& s : mem_)
            if (s.contains(addr, bytes.size() ? bytes.size() : 1)) { seg = &s; break; }
        if (!seg) throw error(errc::bad_address, "write to unmapped memory", addr);
        std::copy(bytes.begin(), bytes.end(),
                  seg->bytes.begin() + static_cast<std::size_t>(addr - seg->vaddr));
    }

    /// Decode the instruction under rip. Unmapped rip faults like a bad
    /// fetch; undecodable bytes fault like an illegal instruction.
    Decoded fetch() const {
        const Segment* seg = find(regs.rip);
        if (!seg || !seg->x)
            throw error(errc::mem_fault, "instruction fetch from unmapped memory", regs.rip);
        auto off = regs.rip - seg->vaddr;
        auto avail = std::min<std::uint64_t>(15, seg->bytes.size() - off);
        try {
            return decode_one(std::span(seg->bytes.data() + off, static_cast<std::size_t>(avail)), 0);
        } catch (const error&) {
            throw error(errc::illegal_instruction, "undecodable instruction", regs.rip);
        }
    }

    /// Apply a non-syscall instruction and advance rip.
    void exec_data(const Decoded& d) {
        switch (d.op) {
        case Decoded::Op::nop:
            regs.rip += d.length;
            break;
        case Decoded::Op::mov_imm:
            emu::reg_ref(regs, d.reg) = d.imm;
            regs.rip += d.length;
            break;
        case Decoded::Op::ret: {
            std::vector<std::uint8_t> slot;
            try {
                slot = read(regs.rsp, 8);
            } catch (const error&) {
                throw error(errc::mem_fault, "stack read fault on ret", regs.rsp);
            }
            std::uint64_t target = 0;
            for (int i = 0; i < 8; ++i) target |= std::uint64_t(slot[i]) << (8 * i);
            regs.rsp += 8;
            regs.rip = target;
            break;
        }
        case Decoded::Op::sys:
            throw error(errc::backend_error, "syscall must go through do_syscall");
        }
    }

    /// Kernel model. Returns the value left in rax; exit flips `exited`.
    std::uint64_t do_syscall(std::uint64_t number) {
        switch (number) {
        case 0: // read: fd 0 answers instant end-of-file
            return regs.rdi == 0 ? 0 : static_cast<std::uint64_t>(-9);
        case 1: { // write: capture fd 1/2, clamp to the mapped tail
            if (regs.rdi != 1 && regs.rdi != 2) return static_cast<std::uint64_t>(-9);
            if (regs.rdx == 0) return 0;
            const Segment* seg = find(regs.rsi);
            if (!seg) throw error(errc::mem_fault, "write from unmapped buffer", regs.rsi);
            std::uint64_t avail = seg->end() - regs.rsi;
            std::uint64_t count = std::min(regs.rdx, avail);
            auto off = static_cast<std::size_t>(regs.rsi - seg->vaddr);
            captured.append(reinterpret_cast<const char*>(seg->bytes.data()) + off,
                            static_cast<std::size_t>(count));
            return count;
        }
        case 60: // exit
            exited = true;
            exit_status = static_cast<std::uint32_t>(regs.rdi);
            return 0;
        default:
            return static_cast<std::uint64_t>(-38); // ENOSYS
        }
    }

private:
    std::vector<Segment> mem_;
};

/// TraceSession over the emulator. Mirrors the ptrace backend's surface:
/// spawn leaves the machine at an initial SIGTRAP-style stop, a single
/// step carries a syscall's whole kernel effect, and continue_to_syscall
/// splits it into an enter stop (number in pending_syscall, rip already
/// past the instruction) and an exit stop (result in rax).
class EmuSession : public TraceSession {
public:
    explicit EmuSession(const PayloadImage& image) : m_(image) {}

    DebugEvent wait_stop() override {
        if (waited_) throw error(errc::not_stopped, "no outstanding stop to wait for");
        waited_ = true;
        DebugEvent ev{DebugEvent::Kind::signal_stop, 5 /* SIGTRAP, initial stop */, 0};
        last_ = ev.kind;
        return ev;
    }

    DebugEvent step() override {
        require_stopped();
        if (at_enter_) return complete_pending();

        Decoded d;
        try {
            d = m_.fetch();
        } catch (const error& e) {
            return fault(e);
        }
        if (d.op == Decoded::Op::sys) {
            advance_over_syscall();
            std::uint64_t number = m_.regs.rax;
            try {
                std::uint64_t result = m_.do_syscall(number);
                if (m_.exited) return leave();
                m_.regs.rax = result;
            } catch (const error& e) {
                return fault(e);
            }
            return settle(DebugEvent::Kind::step_stop);
        }
        try {
            m_.exec_data(d);
        } catch (const error& e) {
            return fault(e);
        }
        return settle(DebugEvent::Kind::step_stop);
    }

    DebugEvent continue_to_syscall() override {
        require_stopped();
        if (at_enter_) return complete_pending();

        for (std::uint64_t spent = 0; spent < emu::kInstructionBudget; ++spent) {
            Decoded d;
            try {
                d = m_.fetch();
            } catch (const error& e) {
                return fault(e);
            }
            if (d.op == Decoded::Op::sys) {
                advance_over_syscall();
                pending_ = m_.regs.rax;
                at_enter_ = true;
                last_ = DebugEvent::Kind::syscall_enter;
                return {DebugEvent::Kind::syscall_enter, 0, 0};
            }
            try {
                m_.exec_data(d);
            } catch (const error& e) {
                return fault(e);
            }
        }
        throw error(errc::step_failed, "no syscall reached within instruction budget");
    }

    RegisterFile get_regs() override {
        require_stopped();
        RegisterFile out = m_.regs;
        out.pending_syscall = at_syscall_stop() ? pending_ : m_.regs.rax;
        return out;
    }

    void set_regs(const RegisterFile& regs) override {
        require_stopped();
        std::uint64_t keep_pending = regs.pending_syscall;
        RegisterFile next = regs;
        next.pending_syscall = 0;
        m_.regs = next;
        // Only a syscall stop has a live syscall slot to rewrite.
        if (at_enter_) pending_ = keep_pending;
    }

    std::vector<std::uint8_t> read_mem(std::uint64_t addr, std::size_t len) override {
        require_stopped();
        return m_.read(addr, len);
    }

    void write_mem(std::uint64_t addr, std::span<const std::uint8_t> bytes) override {
        require_stopped();
        m_.write(addr, bytes);
    }

    void set_exit_kill() override { exit_kill_ = true; }

    void kill_child() override {
        if (!dead_) {
            dead_ = true;
            last_ = DebugEvent::Kind::killed;
        }
    }

    bool alive() const override { return !dead_; }
    const std::string& captured_output() override { return m_.captured; }

    EmuMachine& machine() { return m_; }

private:
    bool at_syscall_stop() const {
        return at_enter_ || last_ == DebugEvent::Kind::syscall_exit;
    }

    void require_stopped() {
        if (!waited_) throw error(errc::not_stopped, "wait for the initial stop first");
        if (dead_) throw error(errc::not_stopped, "child is gone");
    }

    void advance_over_syscall() {
        m_.regs.rip += 2;
        m_.regs.rcx = m_.regs.rip; // hardware clobbers, same as a real syscall
        m_.regs.r11 = m_.regs.eflags;
    }

    DebugEvent complete_pending() {
        at_enter_ = false;
        std::uint64_t number = pending_;
        try {
            std::uint64_t result = m_.do_syscall(number);
            if (m_.exited) return leave();
            m_.regs.rax = result;
        } catch (const error& e) {
            return fault(e);
        }
        last_ = DebugEvent::Kind::syscall_exit; // pending_ still holds the number here
        return {DebugEvent::Kind::syscall_exit, 0, 0};
    }

    DebugEvent settle(DebugEvent::Kind kind) {
        pending_ = m_.regs.rax;
        last_ = kind;
        return {kind, 0, 0};
    }

    DebugEvent leave() {
        dead_ = true;
        last_ = DebugEvent::Kind::exited;
        return {DebugEvent::Kind::exited, 0, static_cast<int>(m_.exit_status & 0xFF)};
    }

    DebugEvent fault(const error& e) {
        dead_ = true;
        last_ = DebugEvent::Kind::killed;
        int sig = e.code() == errc::illegal_instruction ? 4 /* SIGILL */ : 11 /* SIGSEGV */;
        return {DebugEvent::Kind::killed, sig, 0};
    }

    EmuMachine m_;
    bool waited_ = false;
    bool at_enter_ = false;
    bool dead_ = false;
    bool exit_kill_ = false;
    std::uint64_t pending_ = 0;
    DebugEvent::Kind last_ = DebugEvent::Kind::signal_stop;
};

inline std::unique_ptr<EmuSession> emu_spawn(const PayloadImage& image) {
    return std::make_unique<EmuSession>(image);
}

} // namespace retrograde

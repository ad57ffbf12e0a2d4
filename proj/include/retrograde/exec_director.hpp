#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "addr_map.hpp"
#include "debug_port.hpp"
#include "error.hpp"

namespace retrograde {

enum class Direction { forward, reverse };

/// How the directed stepper walks the address map. The window is the
/// inclusive index range [start_index, end_index]; forward runs climb from
/// start_index, reverse runs descend from end_index. paper_indexing is a
/// compatibility quirk for reverse runs that starts two entries early
/// (index end - counter - 1), skipping the window's top entry entirely.
struct DirectionPolicy {
    Direction direction = Direction::forward;
    std::size_t start_index = 0;
    std::optional<std::size_t> end_index; // defaults to the last record
    bool paper_indexing = false;
    std::uint64_t max_iterations = 100'000; // guards against signal storms
};

/// Map index for step number `counter` (1-based). Empty once the window is
/// exhausted, at which point the controller stops the run itself.
inline std::optional<std::size_t> next_index(const DirectionPolicy& policy, std::uint64_t counter,
                                             std::size_t map_size) {
    if (map_size == 0) return std::nullopt;
    std::size_t end = policy.end_index.value_or(map_size - 1);
    if (policy.direction == Direction::forward) {
        std::uint64_t idx = policy.start_index + (counter - 1);
        if (idx > end) return std::nullopt;
        return static_cast<std::size_t>(idx);
    }
    std::int64_t idx = policy.paper_indexing
                           ? static_cast<std::int64_t>(end) - static_cast<std::int64_t>(counter) - 1
                           : static_cast<std::int64_t>(end) - static_cast<std::int64_t>(counter - 1);
    if (idx < static_cast<std::int64_t>(policy.start_index)) return std::nullopt;
    return static_cast<std::size_t>(idx);
}

struct StepRecord {
    std::uint64_t n = 0; // 1-based step number
    std::uint64_t pre_rip = 0;
    std::uint64_t post_rip = 0; // 0 once the child is gone
    DebugEvent::Kind event = DebugEvent::Kind::step_stop;
    bool rewrite = false;           // a rewrite rule fired at this stop
    std::uint64_t pending = 0;      // syscall number at a syscall stop
    std::uint64_t sys_result = 0;   // rax at a syscall-exit stop
};

struct TraceReport {
    enum class Outcome { exited, killed, controller_stopped };
    std::vector<StepRecord> steps;
    Outcome outcome = Outcome::exited;
    int exit_code = 0;
    int signal = 0;
    std::string output; // child's captured stdout+stderr
};

/// Syscall rewrite: when the number at a syscall-enter stop matches,
/// replace it and permute the six argument slots (rdi rsi rdx r10 r8 r9);
/// new slot i takes the old slot arg_perm[i].
struct RewriteRule {
    std::uint64_t match_number = 0;
    std::uint64_t replace_number = 0;
    std::array<std::uint8_t, 6> arg_perm{0, 1, 2, 3, 4, 5};

    /// 10000 becomes write with rdi and rsi swapped.
    static RewriteRule paper_default() { return {10000, 1, {1, 0, 2, 3, 4, 5}}; }
};

namespace detail {

inline void finish_report(TraceReport& report, const DebugEvent& ev) {
    if (ev.kind == DebugEvent::Kind::exited) {
        report.outcome = TraceReport::Outcome::exited;
        report.exit_code = ev.exit_code;
    } else {
        report.outcome = TraceReport::Outcome::killed;
        report.signal = ev.signal;
    }
}

inline std::array<std::uint64_t, 6> syscall_args(const RegisterFile& r) {
    return {r.rdi, r.rsi, r.rdx, r.r10, r.r8, r.r9};
}

inline void set_syscall_args(RegisterFile& r, const std::array<std::uint64_t, 6>& a) {
    r.rdi = a[0];
    r.rsi = a[1];
    r.rdx = a[2];
    r.r10 = a[3];
    r.r8 = a[4];
    r.r9 = a[5];
}

} // namespace detail

/// Single-step the child across the address map in the chosen direction.
///
/// Reverse runs force rip to the target record before every step, so the
/// payload's instructions are re-executed in reverse static order — prior
/// effects are not undone. Forward runs step the natural flow and only use
/// the map as the step budget. Signal stops are stepped through without
/// being recorded or counted; the run ends when the child leaves or the
/// window is exhausted (the controller then kills the child).
inline TraceReport run_directed(TraceSession& session, const AddressMap& map,
                                const DirectionPolicy& policy) {
    if (map.empty()) throw error(errc::empty_map, "address map has no records");
    std::size_t end = policy.end_index.value_or(map.size() - 1);
    if (end >= map.size() || policy.start_index > end)
        throw error(errc::out_of_range, "step window outside the map");
    if (policy.paper_indexing && policy.direction != Direction::reverse)
        throw error(errc::out_of_range, "paper indexing applies to reverse runs only");

    TraceReport report;
    DebugEvent ev = session.wait_stop();
    if (ev.terminal()) {
        detail::finish_report(report, ev);
        report.output = session.captured_output();
        return report;
    }
    session.set_exit_kill();

    // Wrong-base detection: the child's first stop must sit on a mapped
    // instruction, whatever window the policy then walks.
    RegisterFile regs = session.get_regs();
    bool anchored = false;
    for (std::size_t i = 0; i < map.size() && !anchored; ++i) anchored = map.resolve(i) == regs.rip;
    if (!anchored)
        throw error(errc::map_mismatch, "child entry is not a mapped instruction", regs.rip);

    const bool force_rip = policy.direction == Direction::reverse;
    std::uint64_t counter = 1;
    for (std::uint64_t spent = 0; spent < policy.max_iterations; ++spent) {
        auto idx = next_index(policy, counter, map.size());
        if (!idx) {
            report.outcome = TraceReport::Outcome::controller_stopped;
            session.kill_child();
            break;
        }

        std::uint64_t pre_rip;
        if (force_rip) {
            RegisterFile r = session.get_regs();
            r.rip = map.resolve(*idx);
            session.set_regs(r);
            pre_rip = r.rip;
        } else {
            pre_rip = session.get_regs().rip;
        }

        ev = session.step();
        if (ev.kind == DebugEvent::Kind::signal_stop) continue; // re-step, not counted

        StepRecord rec;
        rec.n = counter;
        rec.pre_rip = pre_rip;
        rec.event = ev.kind;
        if (ev.terminal()) {
            rec.post_rip = 0;
            report.steps.push_back(rec);
            detail::finish_report(report, ev);
            report.output = session.captured_output();
            return report;
        }
        RegisterFile after = session.get_regs();
        rec.post_rip = after.rip;
        rec.sys_result = after.rax;
        report.steps.push_back(rec);
        ++counter;
    }
    if (report.outcome != TraceReport::Outcome::controller_stopped)
        throw error(errc::step_failed, "iteration budget exhausted");
    report.output = session.captured_output();
    return report;
}

/// Run the child at syscall granularity, rewriting matching syscalls at
/// their enter stop. Records one entry per enter (with the rewrite flag)
/// and one per exit (with the result); signal stops pass unrecorded.
inline TraceReport run_rewriter(TraceSession& session, const std::vector<RewriteRule>& rules,
                                std::uint64_t max_events = 100'000) {
    TraceReport report;
    DebugEvent ev = session.wait_stop();
    if (ev.terminal()) {
        detail::finish_report(report, ev);
        report.output = session.captured_output();
        return report;
    }
    session.set_exit_kill();

    std::uint64_t n = 1;
    for (std::uint64_t spent = 0; spent < max_events; ++spent) {
        ev = session.continue_to_syscall();
        if (ev.kind == DebugEvent::Kind::signal_stop) continue;
        if (ev.terminal()) {
            detail::finish_report(report, ev);
            report.output = session.captured_output();
            return report;
        }

        RegisterFile regs = session.get_regs();
        StepRecord rec;
        rec.n = n++;
        rec.pre_rip = regs.rip;
        rec.post_rip = regs.rip;
        rec.event = ev.kind;
        rec.pending = regs.pending_syscall;

        if (ev.kind == DebugEvent::Kind::syscall_enter) {
            for (const auto& rule : rules) {
                if (regs.pending_syscall != rule.match_number) continue;
                auto old_args = detail::syscall_args(regs);
                std::array<std::uint64_t, 6> new_args{};
                for (std::size_t i = 0; i < 6; ++i) new_args[i] = old_args[rule.arg_perm[i] % 6];
                detail::set_syscall_args(regs, new_args);
                regs.pending_syscall = rule.replace_number;
                session.set_regs(regs);
                rec.rewrite = true;
                rec.pending = rule.replace_number;
                break;
            }
        } else { // syscall_exit
            rec.sys_result = regs.rax;
        }
        report.steps.push_back(rec);
    }
    throw error(errc::step_failed, "event budget exhausted");
}

namespace detail {

inline std::string base64_encode(std::string_view bytes) {
    static const char alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        std::uint32_t v = std::uint32_t(std::uint8_t(bytes[i])) << 16 |
                          std::uint32_t(std::uint8_t(bytes[i + 1])) << 8 |
                          std::uint32_t(std::uint8_t(bytes[i + 2]));
        out.push_back(alphabet[(v >> 18) & 63]);
        out.push_back(alphabet[(v >> 12) & 63]);
        out.push_back(alphabet[(v >> 6) & 63]);
        out.push_back(alphabet[v & 63]);
    }
    if (std::size_t rest = bytes.size() - i) {
        std::uint32_t v = std::uint32_t(std::uint8_t(bytes[i])) << 16;
        if (rest == 2) v |= std::uint32_t(std::uint8_t(bytes[i + 1])) << 8;
        out.push_back(alphabet[(v >> 18) & 63]);
        out.push_back(alphabet[(v >> 12) & 63]);
        out.push_back(rest == 2 ? alphabet[(v >> 6) & 63] : '=');
        out.push_back('=');
    }
    return out;
}

} // namespace detail

/// One JSON object per line: each recorded step, then a closing line with
/// the run outcome and the captured output (base64).
inline void write_report_jsonl(const TraceReport& report, std::ostream& os) {
    for (const auto& rec : report.steps) {
        nlohmann::ordered_json j{{"n", rec.n},
                                 {"pre_rip", rec.pre_rip},
                                 {"post_rip", rec.post_rip},
                                 {"event", event_name(rec.event)},
                                 {"rewrite", rec.rewrite}};
        os << j.dump() << "\n";
    }
    nlohmann::ordered_json tail;
    switch (report.outcome) {
    case TraceReport::Outcome::exited:
        tail["exit"] = report.exit_code;
        break;
    case TraceReport::Outcome::killed:
        tail["exit"] = "killed:" + std::to_string(report.signal);
        break;
    case TraceReport::Outcome::controller_stopped:
        tail["exit"] = "controller-stopped";
        break;
    }
    tail["output_b64"] = detail::base64_encode(report.output);
    os << tail.dump() << "\n";
}

} // namespace retrograde

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace retrograde {

enum class errc {
    // payload loading / in-memory execution
    bad_magic,
    unsupported,
    malformed,
    out_of_range,
    stage_failed,
    unsupported_platform,
    protect_failed,
    // instruction decoding / maps
    unknown_opcode,
    truncated,
    parse_error,
    non_monotonic,
    empty_map,
    // debug port
    spawn_failed,
    trace_refused,
    child_lost,
    not_stopped,
    step_failed,
    bad_address,
    wrong_thread,
    // emulator
    load_fault,
    illegal_instruction,
    mem_fault,
    // execution director
    backend_error,
    map_mismatch,
    exhausted,
};

inline const char* errc_name(errc c) {
    switch (c) {
        case errc::bad_magic: return "bad_magic";
        case errc::unsupported: return "unsupported";
        case errc::malformed: return "malformed";
        case errc::out_of_range: return "out_of_range";
        case errc::stage_failed: return "stage_failed";
        case errc::unsupported_platform: return "unsupported_platform";
        case errc::protect_failed: return "protect_failed";
        case errc::unknown_opcode: return "unknown_opcode";
        case errc::truncated: return "truncated";
        case errc::parse_error: return "parse_error";
        case errc::non_monotonic: return "non_monotonic";
        case errc::empty_map: return "empty_map";
        case errc::spawn_failed: return "spawn_failed";
        case errc::trace_refused: return "trace_refused";
        case errc::child_lost: return "child_lost";
        case errc::not_stopped: return "not_stopped";
        case errc::step_failed: return "step_failed";
        case errc::bad_address: return "bad_address";
        case errc::wrong_thread: return "wrong_thread";
        case errc::load_fault: return "load_fault";
        case errc::illegal_instruction: return "illegal_instruction";
        case errc::mem_fault: return "mem_fault";
        case errc::backend_error: return "backend_error";
        case errc::map_mismatch: return "map_mismatch";
        case errc::exhausted: return "exhausted";
    }
    return "unknown";
}

/// Library-wide exception. `offset` carries the failing byte offset for
/// decode/parse errors that have one.
class error : public std::runtime_error {
public:
    error(errc code, const std::string& message)
        : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

    error(errc code, const std::string& message, std::uint64_t offset)
        : std::runtime_error(std::string(errc_name(code)) + ": " + message +
                             " (offset " + std::to_string(offset) + ")"),
          code_(code),
          offset_(offset) {}

    errc code() const noexcept { return code_; }
    std::optional<std::uint64_t> offset() const noexcept { return offset_; }

private:
    errc code_;
    std::optional<std::uint64_t> offset_;
};

} // namespace retrograde

#pragma once

// Randomized property suites shared by the property test binary and the
// acceptance gate. Every suite drives a fixed-seed mt19937_64, so runs are
// reproducible; iteration counts are parameters so the acceptance gate can
// guarantee its case budget.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <retrograde/retrograde.hpp>

#include "test_util.hpp"

namespace props {

struct Insn {
    std::vector<std::uint8_t> bytes;
    retrograde::Decoded::Op op;
    unsigned reg = 0;
    std::uint64_t imm = 0;
};

inline Insn gen_insn(std::mt19937_64& rng) {
    Insn insn;
    switch (rng() % 3) {
    case 0:
        insn.bytes = {0x90};
        insn.op = retrograde::Decoded::Op::nop;
        break;
    case 1: { // mov r64, imm32 (sign-extended)
        unsigned reg = static_cast<unsigned>(rng() % 16);
        auto imm = static_cast<std::int32_t>(rng());
        insn.bytes = {static_cast<std::uint8_t>(reg >= 8 ? 0x49 : 0x48), 0xC7,
                      static_cast<std::uint8_t>(0xC0 | (reg & 7))};
        auto raw = static_cast<std::uint32_t>(imm);
        for (int i = 0; i < 4; ++i) insn.bytes.push_back(std::uint8_t(raw >> (8 * i)));
        insn.op = retrograde::Decoded::Op::mov_imm;
        insn.reg = reg;
        insn.imm = static_cast<std::uint64_t>(static_cast<std::int64_t>(imm));
        break;
    }
    default: { // mov r64, imm64
        unsigned reg = static_cast<unsigned>(rng() % 16);
        std::uint64_t imm = rng();
        insn.bytes = {static_cast<std::uint8_t>(reg >= 8 ? 0x49 : 0x48),
                      static_cast<std::uint8_t>(0xB8 | (reg & 7))};
        for (int i = 0; i < 8; ++i) insn.bytes.push_back(std::uint8_t(imm >> (8 * i)));
        insn.op = retrograde::Decoded::Op::mov_imm;
        insn.reg = reg;
        insn.imm = imm;
        break;
    }
    }
    return insn;
}

/// Straight-line program of movs and nops: safe to step in any order.
inline std::vector<Insn> gen_program(std::mt19937_64& rng, std::size_t count) {
    std::vector<Insn> program;
    program.reserve(count);
    for (std::size_t i = 0; i < count; ++i) program.push_back(gen_insn(rng));
    return program;
}

inline std::vector<std::uint8_t> flatten(const std::vector<Insn>& program) {
    std::vector<std::uint8_t> bytes;
    for (const auto& insn : program) bytes.insert(bytes.end(), insn.bytes.begin(), insn.bytes.end());
    return bytes;
}

/// Totality: over arbitrary byte soup the decoder either returns a length
/// within [1, remaining] or throws a classified decode error. Counts as
/// one fuzz case per buffer.
inline void prop_decoder_total(std::mt19937_64& rng, int iters) {
    for (int i = 0; i < iters; ++i) {
        std::size_t len = rng() % 24;
        std::vector<std::uint8_t> buf(len);
        for (auto& b : buf) b = static_cast<std::uint8_t>(rng());
        std::uint64_t offset = len ? rng() % len : 0;
        try {
            auto d = retrograde::decode_one(buf, offset);
            REQUIRE(d.length >= 1);
            REQUIRE(d.length <= 15);
            REQUIRE(offset + d.length <= buf.size());
        } catch (const retrograde::error& e) {
            bool classified = e.code() == retrograde::errc::unknown_opcode ||
                              e.code() == retrograde::errc::truncated ||
                              e.code() == retrograde::errc::out_of_range;
            REQUIRE(classified);
        }
    }
}

/// Cutting a valid instruction short at any point yields Truncated; the
/// untouched instruction decodes back to its own fields.
inline void prop_decoder_truncation(std::mt19937_64& rng, int iters) {
    for (int i = 0; i < iters; ++i) {
        Insn insn = gen_insn(rng);
        auto full = retrograde::decode_one(insn.bytes, 0);
        REQUIRE(full.length == insn.bytes.size());
        REQUIRE(full.op == insn.op);
        if (insn.op == retrograde::Decoded::Op::mov_imm) {
            REQUIRE(full.reg == insn.reg);
            REQUIRE(full.imm == insn.imm);
        }
        for (std::size_t cut = 1; cut < insn.bytes.size(); ++cut) {
            std::vector<std::uint8_t> part(insn.bytes.begin(),
                                           insn.bytes.begin() + static_cast<std::ptrdiff_t>(cut));
            REQUIRE_THROWS_MATCHES(retrograde::decode_one(part, 0), retrograde::error,
                                   ErrorCodeIs(retrograde::errc::truncated));
        }
    }
}

/// build_map over a generated stream is contiguous, complete, and survives
/// a serialization roundtrip.
inline void prop_stream_roundtrip(std::mt19937_64& rng, int iters) {
    for (int i = 0; i < iters; ++i) {
        auto program = gen_program(rng, 1 + rng() % 40);
        auto bytes = flatten(program);
        auto image = retrograde::load_flat(bytes, 0x600000, 0, bytes.size());
        auto map = retrograde::build_map(image);

        REQUIRE(map.size() == program.size());
        std::uint64_t expect_offset = 0;
        for (std::size_t k = 0; k < program.size(); ++k) {
            REQUIRE(map.records[k].offset == expect_offset);
            REQUIRE(map.records[k].length == program[k].bytes.size());
            expect_offset += map.records[k].length;
        }
        REQUIRE(expect_offset == bytes.size());

        auto back = retrograde::import_map(retrograde::to_json_string(map));
        REQUIRE(retrograde::same_layout(map, back));
    }
}

/// Forward and reverse enumerate exactly the window, each index once, in
/// opposite orders; the paper quirk is reverse shifted by two.
inline void prop_next_index(std::mt19937_64& rng, int iters) {
    for (int i = 0; i < iters; ++i) {
        std::size_t size = 1 + rng() % 60;
        std::size_t s = rng() % size;
        std::size_t e = s + rng() % (size - s);

        retrograde::DirectionPolicy fwd;
        fwd.direction = retrograde::Direction::forward;
        fwd.start_index = s;
        fwd.end_index = e;
        retrograde::DirectionPolicy rev = fwd;
        rev.direction = retrograde::Direction::reverse;
        retrograde::DirectionPolicy quirk = rev;
        quirk.paper_indexing = true;

        std::vector<std::size_t> up, down;
        for (std::uint64_t c = 1; c <= e - s + 2; ++c) {
            if (auto idx = retrograde::next_index(fwd, c, size)) up.push_back(*idx);
            if (auto idx = retrograde::next_index(rev, c, size)) down.push_back(*idx);
        }
        REQUIRE(up.size() == e - s + 1);
        REQUIRE(down.size() == e - s + 1);
        for (std::size_t k = 0; k < up.size(); ++k) {
            REQUIRE(up[k] == s + k);
            REQUIRE(down[k] == e - k);
        }
        for (std::uint64_t c = 1; c <= e - s + 3; ++c)
            REQUIRE(retrograde::next_index(quirk, c, size) == retrograde::next_index(rev, c + 2, size));
    }
}

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t state_hash(retrograde::EmuSession& s) {
    retrograde::RegisterFile r = s.get_regs();
    std::uint64_t h = fnv1a(14695981039346656037ull, &r, sizeof(r));
    const std::string& out = s.captured_output();
    return fnv1a(h, out.data(), out.size());
}

/// Two identical emulator runs produce identical state hashes at every
/// step, both under natural stepping and under a directed reverse run.
inline void prop_emu_determinism(std::mt19937_64& rng, int iters) {
    for (int i = 0; i < iters; ++i) {
        auto program = gen_program(rng, 1 + rng() % 24);
        auto bytes = flatten(program);
        auto image = retrograde::load_flat(bytes, 0x600000, 0, bytes.size());

        auto run_hashes = [&] {
            auto s = retrograde::emu_spawn(image);
            s->wait_stop();
            std::vector<std::uint64_t> hashes{state_hash(*s)};
            for (std::size_t k = 0; k < program.size(); ++k) {
                REQUIRE(s->step().kind == retrograde::DebugEvent::Kind::step_stop);
                hashes.push_back(state_hash(*s));
            }
            return hashes;
        };
        REQUIRE(run_hashes() == run_hashes());

        auto map = retrograde::build_map(image);
        retrograde::DirectionPolicy policy;
        policy.direction = retrograde::Direction::reverse;
        auto run_reverse = [&] {
            auto s = retrograde::emu_spawn(image);
            return retrograde::run_directed(*s, map, policy);
        };
        auto a = run_reverse();
        auto b = run_reverse();
        REQUIRE(a.steps.size() == b.steps.size());
        for (std::size_t k = 0; k < a.steps.size(); ++k) {
            REQUIRE(a.steps[k].pre_rip == b.steps[k].pre_rip);
            REQUIRE(a.steps[k].post_rip == b.steps[k].post_rip);
        }
        REQUIRE(a.output == b.output);
        REQUIRE(a.outcome == b.outcome);
    }
}

/// The reversal property: a reverse run's recorded step addresses are the
/// map's addresses in reverse order, one step per record.
inline void prop_reverse_reversal(std::mt19937_64& rng, int iters) {
    for (int i = 0; i < iters; ++i) {
        auto program = gen_program(rng, 1 + rng() % 30);
        auto bytes = flatten(program);
        auto image = retrograde::load_flat(bytes, 0x600000, 0, bytes.size());
        auto map = retrograde::build_map(image);

        auto s = retrograde::emu_spawn(image);
        retrograde::DirectionPolicy policy;
        policy.direction = retrograde::Direction::reverse;
        auto report = retrograde::run_directed(*s, map, policy);

        // no syscalls in the generated stream: the window must exhaust
        REQUIRE(report.outcome == retrograde::TraceReport::Outcome::controller_stopped);
        REQUIRE(report.steps.size() == map.size());
        for (std::size_t k = 0; k < map.size(); ++k)
            REQUIRE(report.steps[k].pre_rip == map.resolve(map.size() - 1 - k));
    }
}

} // namespace props

#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "payload_image.hpp"

namespace retrograde {

struct InstructionRecord {
    std::uint64_t offset = 0; // relative to the map base
    std::uint32_t length = 0; // encoded size in bytes, 1..15
    std::string text;         // annotation only, never compared
};

/// Static instruction layout of a payload's text window. The controller
/// walks these records to pick the address of every step.
struct AddressMap {
    std::optional<std::uint64_t> base;
    std::vector<InstructionRecord> records;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
    std::size_t last_index() const { return records.size() - 1; }

    std::uint64_t resolve(std::size_t index) const {
        if (index >= records.size())
            throw error(errc::out_of_range, "instruction index out of range", index);
        return base.value_or(0) + records[index].offset;
    }
};

/// Layout equality: same record count, offsets and lengths pairwise equal,
/// bases equal when both maps carry one. Text is ignored.
inline bool same_layout(const AddressMap& a, const AddressMap& b) {
    if (a.records.size() != b.records.size()) return false;
    if (a.base && b.base && *a.base != *b.base) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i)
        if (a.records[i].offset != b.records[i].offset || a.records[i].length != b.records[i].length)
            return false;
    return true;
}

struct Decoded {
    enum class Op { nop, ret, sys, mov_imm };
    std::uint32_t length = 0;
    std::string text;
    Op op = Op::nop;
    unsigned reg = 0;       // destination register index for mov_imm
    std::uint64_t imm = 0;  // immediate (sign-extended for the imm32 form)
};

namespace detail {

inline const char* reg64_name(unsigned index) {
    static const char* names[16] = {"rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
                                    "r8",  "r9",  "r10", "r11", "r12", "r13", "r14", "r15"};
    return names[index & 15];
}

inline std::string hex_u64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "0x%llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace detail

/// Decode one instruction of the recognized subset at `offset`:
///   nop (90), syscall (0f 05), ret (c3),
///   mov r64, imm32 sign-extended (REX.W c7 /0),
///   mov r64, imm64 (REX.W b8+r).
/// REX is accepted as 48 or 49. A prefix of a valid pattern cut short by
/// the end of the buffer reports Truncated; anything else UnknownOpcode.
inline Decoded decode_one(std::span<const std::uint8_t> bytes, std::uint64_t offset) {
    if (offset >= bytes.size())
        throw error(errc::out_of_range, "decode offset past end of window", offset);
    auto remaining = bytes.size() - offset;
    const std::uint8_t* p = bytes.data() + offset;

    switch (p[0]) {
    case 0x90:
        return {1, "nop", Decoded::Op::nop};
    case 0xC3:
        return {1, "ret", Decoded::Op::ret};
    case 0x0F:
        if (remaining < 2) throw error(errc::truncated, "truncated two-byte opcode", offset);
        if (p[1] == 0x05) return {2, "syscall", Decoded::Op::sys};
        throw error(errc::unknown_opcode, "unrecognized 0f escape", offset);
    case 0x48:
    case 0x49: {
        bool rex_b = p[0] & 1;
        if (remaining < 2) throw error(errc::truncated, "truncated after rex prefix", offset);
        std::uint8_t op = p[1];
        if (op == 0xC7) {
            if (remaining < 3) throw error(errc::truncated, "truncated mov r64, imm32", offset);
            std::uint8_t modrm = p[2];
            if (modrm < 0xC0 || modrm > 0xC7)
                throw error(errc::unknown_opcode, "unsupported mov addressing mode", offset);
            if (remaining < 7) throw error(errc::truncated, "truncated mov r64, imm32", offset);
            std::uint32_t raw = std::uint32_t(p[3]) | std::uint32_t(p[4]) << 8 |
                                std::uint32_t(p[5]) << 16 | std::uint32_t(p[6]) << 24;
            auto value = static_cast<std::int64_t>(static_cast<std::int32_t>(raw));
            unsigned reg = (modrm & 7) | (rex_b ? 8 : 0);
            return {7, std::string("mov ") + detail::reg64_name(reg) + ", " + std::to_string(value),
                    Decoded::Op::mov_imm, reg, static_cast<std::uint64_t>(value)};
        }
        if (op >= 0xB8 && op <= 0xBF) {
            if (remaining < 10) throw error(errc::truncated, "truncated mov r64, imm64", offset);
            std::uint64_t value = 0;
            for (int i = 0; i < 8; ++i) value |= std::uint64_t(p[2 + i]) << (8 * i);
            unsigned reg = (op - 0xB8) | (rex_b ? 8 : 0);
            return {10, std::string("movabs ") + detail::reg64_name(reg) + ", " + detail::hex_u64(value),
                    Decoded::Op::mov_imm, reg, value};
        }
        throw error(errc::unknown_opcode, "unrecognized opcode after rex prefix", offset);
    }
    default:
        throw error(errc::unknown_opcode, "unrecognized opcode", offset);
    }
}

/// Walk the image's text window and record every instruction in order.
inline AddressMap build_map(const PayloadImage& image) {
    auto bytes = image.text_bytes();
    if (bytes.empty()) throw error(errc::empty_map, "text window is empty");

    AddressMap map;
    map.base = image.text_range.start;
    std::uint64_t off = 0;
    while (off < bytes.size()) {
        Decoded d = decode_one(bytes, off);
        map.records.push_back({off, d.length, d.text});
        off += d.length;
    }
    return map;
}

inline nlohmann::ordered_json to_json(const AddressMap& map) {
    nlohmann::ordered_json j;
    if (map.base) j["base"] = *map.base;
    j["records"] = nlohmann::ordered_json::array();
    for (const auto& rec : map.records) {
        nlohmann::ordered_json r{{"offset", rec.offset}, {"length", rec.length}};
        if (!rec.text.empty()) r["text"] = rec.text;
        j["records"].push_back(std::move(r));
    }
    return j;
}

inline std::string to_json_string(const AddressMap& map) { return to_json(map).dump(2) + "\n"; }

/// Parse and validate a serialized map: strictly increasing offsets,
/// lengths within 1..15, at least one record.
inline AddressMap import_map(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& ex) {
        throw error(errc::parse_error, std::string("map is not valid JSON: ") + ex.what());
    }
    if (!j.is_object() || !j.contains("records") || !j["records"].is_array())
        throw error(errc::parse_error, "map must be an object with a records array");

    AddressMap map;
    if (j.contains("base")) {
        if (!j["base"].is_number_unsigned())
            throw error(errc::parse_error, "base must be a non-negative integer");
        map.base = j["base"].get<std::uint64_t>();
    }
    for (const auto& r : j["records"]) {
        if (!r.is_object() || !r.contains("offset") || !r.contains("length") ||
            !r["offset"].is_number_unsigned() || !r["length"].is_number_unsigned())
            throw error(errc::parse_error, "record needs unsigned offset and length");
        InstructionRecord rec;
        rec.offset = r["offset"].get<std::uint64_t>();
        rec.length = r["length"].get<std::uint32_t>();
        if (r.contains("text")) {
            if (!r["text"].is_string()) throw error(errc::parse_error, "record text must be a string");
            rec.text = r["text"].get<std::string>();
        }
        if (rec.length < 1 || rec.length > 15)
            throw error(errc::out_of_range, "record length outside 1..15", map.records.size());
        if (!map.records.empty() && rec.offset <= map.records.back().offset)
            throw error(errc::non_monotonic, "record offsets must strictly increase", map.records.size());
        map.records.push_back(std::move(rec));
    }
    if (map.records.empty()) throw error(errc::empty_map, "map has no records");
    return map;
}

} // namespace retrograde

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace retrograde {

struct Segment {
    std::uint64_t vaddr = 0;
    std::vector<std::uint8_t> bytes; // file bytes plus zero-filled bss tail
    bool r = false, w = false, x = false;

    std::uint64_t end() const { return vaddr + bytes.size(); }
    bool contains(std::uint64_t addr, std::uint64_t len = 1) const {
        return addr >= vaddr && len <= bytes.size() && addr - vaddr <= bytes.size() - len;
    }
};

struct TextRange {
    std::uint64_t start = 0;
    std::uint64_t size = 0;
};

enum class ImageFormat { elf64, flat };

/// A loaded payload: non-overlapping segments sorted by address, the entry
/// point, and the instruction window the address map is built over.
struct PayloadImage {
    std::vector<Segment> segments;
    std::uint64_t entry = 0;
    TextRange text_range{};
    ImageFormat format = ImageFormat::flat;
    std::vector<std::uint8_t> file_bytes; // original file image, kept for staging

    const Segment* segment_containing(std::uint64_t addr, std::uint64_t len = 1) const {
        for (const auto& seg : segments)
            if (seg.contains(addr, len)) return &seg;
        return nullptr;
    }

    std::vector<std::uint8_t> text_bytes() const {
        const Segment* seg = segment_containing(text_range.start, text_range.size);
        if (!seg) throw error(errc::malformed, "text range not inside a segment");
        auto off = static_cast<std::size_t>(text_range.start - seg->vaddr);
        return {seg->bytes.begin() + off,
                seg->bytes.begin() + off + static_cast<std::size_t>(text_range.size)};
    }
};

namespace elf {

struct FileHeader {
    std::uint8_t ident[16];
    std::uint16_t type;
    std::uint16_t machine;
    std::uint32_t version;
    std::uint64_t entry;
    std::uint64_t phoff;
    std::uint64_t shoff;
    std::uint32_t flags;
    std::uint16_t ehsize;
    std::uint16_t phentsize;
    std::uint16_t phnum;
    std::uint16_t shentsize;
    std::uint16_t shnum;
    std::uint16_t shstrndx;
};
static_assert(sizeof(FileHeader) == 64);

struct ProgramHeader {
    std::uint32_t type;
    std::uint32_t flags;
    std::uint64_t offset;
    std::uint64_t vaddr;
    std::uint64_t paddr;
    std::uint64_t filesz;
    std::uint64_t memsz;
    std::uint64_t align;
};
static_assert(sizeof(ProgramHeader) == 56);

struct SectionHeader {
    std::uint32_t name;
    std::uint32_t type;
    std::uint64_t flags;
    std::uint64_t addr;
    std::uint64_t offset;
    std::uint64_t size;
    std::uint32_t link;
    std::uint32_t info;
    std::uint64_t addralign;
    std::uint64_t entsize;
};
static_assert(sizeof(SectionHeader) == 64);

inline constexpr std::uint16_t kTypeExec = 2;
inline constexpr std::uint16_t kTypeDyn = 3;
inline constexpr std::uint16_t kMachineX86_64 = 62;
inline constexpr std::uint32_t kPtLoad = 1;
inline constexpr std::uint32_t kPtDynamic = 2;
inline constexpr std::uint32_t kPtInterp = 3;
inline constexpr std::uint32_t kPfX = 1;
inline constexpr std::uint32_t kPfW = 2;
inline constexpr std::uint32_t kPfR = 4;

// keeps hostile memsz values from ballooning the zero-filled tail
inline constexpr std::uint64_t kMaxSegmentBytes = 1ull << 30;

template <typename T>
T read_at(std::span<const std::uint8_t> data, std::uint64_t off) {
    if (off > data.size() || sizeof(T) > data.size() - off)
        throw error(errc::malformed, "structure extends past end of file", off);
    T out;
    std::memcpy(&out, data.data() + off, sizeof(T));
    return out;
}

} // namespace elf

/// Parse a static ELF64 x86-64 executable: one segment per PT_LOAD, entry
/// from the file header, text range from the section named ".text".
inline PayloadImage parse_elf(std::span<const std::uint8_t> data) {
    static const std::uint8_t magic[4] = {0x7F, 'E', 'L', 'F'};
    if (data.size() < 4 || std::memcmp(data.data(), magic, 4) != 0)
        throw error(errc::bad_magic, "not an ELF image");

    auto hdr = elf::read_at<elf::FileHeader>(data, 0);
    if (hdr.ident[4] != 2) throw error(errc::unsupported, "not a 64-bit ELF (class)");
    if (hdr.ident[5] != 1) throw error(errc::unsupported, "not little-endian (data encoding)");
    if (hdr.machine != elf::kMachineX86_64) throw error(errc::unsupported, "not an x86-64 image");
    if (hdr.type == elf::kTypeDyn) throw error(errc::unsupported, "dynamic executables not supported");
    if (hdr.type != elf::kTypeExec) throw error(errc::unsupported, "not an executable image");
    if (hdr.phentsize != sizeof(elf::ProgramHeader))
        throw error(errc::malformed, "unexpected program header entry size");

    PayloadImage image;
    image.format = ImageFormat::elf64;
    image.entry = hdr.entry;
    image.file_bytes.assign(data.begin(), data.end());

    for (std::uint16_t i = 0; i < hdr.phnum; ++i) {
        auto ph = elf::read_at<elf::ProgramHeader>(data, hdr.phoff + std::uint64_t(i) * hdr.phentsize);
        if (ph.type == elf::kPtInterp || ph.type == elf::kPtDynamic)
            throw error(errc::unsupported, "dynamic executables not supported");
        if (ph.type != elf::kPtLoad || ph.memsz == 0) continue;
        if (ph.filesz > ph.memsz)
            throw error(errc::malformed, "segment file size exceeds memory size");
        if (ph.memsz > elf::kMaxSegmentBytes)
            throw error(errc::malformed, "segment unreasonably large");
        if (ph.offset > data.size() || ph.filesz > data.size() - ph.offset)
            throw error(errc::malformed, "segment data out of bounds", ph.offset);
        Segment seg;
        seg.vaddr = ph.vaddr;
        seg.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(ph.offset),
                         data.begin() + static_cast<std::ptrdiff_t>(ph.offset + ph.filesz));
        seg.bytes.resize(static_cast<std::size_t>(ph.memsz), 0); // bss zero-fill
        seg.r = ph.flags & elf::kPfR;
        seg.w = ph.flags & elf::kPfW;
        seg.x = ph.flags & elf::kPfX;
        image.segments.push_back(std::move(seg));
    }
    if (image.segments.empty()) throw error(errc::malformed, "no loadable segments");

    std::ranges::sort(image.segments, {}, &Segment::vaddr);
    for (std::size_t i = 1; i < image.segments.size(); ++i)
        if (image.segments[i - 1].end() > image.segments[i].vaddr)
            throw error(errc::malformed, "overlapping segments");

    // locate .text through the section name table
    if (hdr.shstrndx >= hdr.shnum) throw error(errc::malformed, "bad section string table index");
    if (hdr.shentsize != sizeof(elf::SectionHeader))
        throw error(errc::malformed, "unexpected section header entry size");
    auto shstr = elf::read_at<elf::SectionHeader>(
        data, hdr.shoff + std::uint64_t(hdr.shstrndx) * hdr.shentsize);
    if (shstr.offset > data.size() || shstr.size > data.size() - shstr.offset)
        throw error(errc::malformed, "section string table out of bounds");

    bool found_text = false;
    for (std::uint16_t i = 0; i < hdr.shnum; ++i) {
        auto sh = elf::read_at<elf::SectionHeader>(data, hdr.shoff + std::uint64_t(i) * hdr.shentsize);
        if (sh.name >= shstr.size) continue;
        const char* name = reinterpret_cast<const char*>(data.data() + shstr.offset + sh.name);
        std::size_t maxlen = static_cast<std::size_t>(shstr.size - sh.name);
        if (std::strncmp(name, ".text", std::min<std::size_t>(6, maxlen)) == 0 && maxlen > 5) {
            image.text_range = {sh.addr, sh.size};
            found_text = true;
            break;
        }
    }
    if (!found_text) throw error(errc::malformed, "missing .text section");

    const Segment* entry_seg = image.segment_containing(image.entry);
    if (!entry_seg || !entry_seg->x)
        throw error(errc::malformed, "entry point outside executable segments");
    const Segment* text_seg =
        image.segment_containing(image.text_range.start, std::max<std::uint64_t>(image.text_range.size, 1));
    if (!text_seg || !text_seg->x)
        throw error(errc::malformed, "text range outside executable segments");

    return image;
}

/// Wrap a raw blob as a single read/write/execute segment.
inline PayloadImage load_flat(std::span<const std::uint8_t> bytes, std::uint64_t base,
                              std::uint64_t entry_offset, std::uint64_t text_len) {
    if (entry_offset >= bytes.size())
        throw error(errc::out_of_range, "entry offset past end of blob");
    if (text_len > bytes.size() - entry_offset)
        throw error(errc::out_of_range, "text window exceeds blob");

    PayloadImage image;
    image.format = ImageFormat::flat;
    Segment seg;
    seg.vaddr = base;
    seg.bytes.assign(bytes.begin(), bytes.end());
    seg.r = seg.w = seg.x = true;
    image.segments.push_back(std::move(seg));
    image.entry = base + entry_offset;
    image.text_range = {base + entry_offset, text_len};
    image.file_bytes.assign(bytes.begin(), bytes.end());
    return image;
}

// Flat-image sidecar file: "RGF1", base (u64), entry_offset (u64),
// text_len (u32), all little-endian, followed by the blob.
inline constexpr std::size_t kFlatHeaderSize = 24;

inline PayloadImage parse_flat_file(std::span<const std::uint8_t> data) {
    if (data.size() < 4 || std::memcmp(data.data(), "RGF1", 4) != 0)
        throw error(errc::bad_magic, "not a flat-image file");
    if (data.size() < kFlatHeaderSize)
        throw error(errc::malformed, "flat-image header truncated");
    auto le64 = [&](std::size_t off) {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(data[off + i]) << (8 * i);
        return v;
    };
    auto le32 = [&](std::size_t off) {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(data[off + i]) << (8 * i);
        return v;
    };
    return load_flat(data.subspan(kFlatHeaderSize), le64(4), le64(12), le32(20));
}

inline std::vector<std::uint8_t> make_flat_file(std::span<const std::uint8_t> blob, std::uint64_t base,
                                                std::uint64_t entry_offset, std::uint32_t text_len) {
    std::vector<std::uint8_t> out;
    out.reserve(kFlatHeaderSize + blob.size());
    for (char ch : {'R', 'G', 'F', '1'}) out.push_back(std::uint8_t(ch));
    for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(base >> (8 * i)));
    for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(entry_offset >> (8 * i)));
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(text_len >> (8 * i)));
    out.insert(out.end(), blob.begin(), blob.end());
    return out;
}

/// Serialize an image as a minimal static ELF64 executable (headers plus
/// one PT_LOAD per segment, no section table). Lets flat blobs be staged
/// and exec'd like any other payload.
inline std::vector<std::uint8_t> emit_minimal_elf(const PayloadImage& image) {
    if (image.segments.empty()) throw error(errc::malformed, "image has no segments");
    constexpr std::uint64_t page = 0x1000;

    elf::FileHeader hdr{};
    hdr.ident[0] = 0x7F;
    hdr.ident[1] = 'E';
    hdr.ident[2] = 'L';
    hdr.ident[3] = 'F';
    hdr.ident[4] = 2;  // 64-bit
    hdr.ident[5] = 1;  // little-endian
    hdr.ident[6] = 1;  // version
    hdr.type = elf::kTypeExec;
    hdr.machine = elf::kMachineX86_64;
    hdr.version = 1;
    hdr.entry = image.entry;
    hdr.phoff = sizeof(elf::FileHeader);
    hdr.ehsize = sizeof(elf::FileHeader);
    hdr.phentsize = sizeof(elf::ProgramHeader);
    hdr.phnum = static_cast<std::uint16_t>(image.segments.size());

    std::vector<elf::ProgramHeader> phdrs;
    std::uint64_t cursor = sizeof(elf::FileHeader) + image.segments.size() * sizeof(elf::ProgramHeader);
    for (const auto& seg : image.segments) {
        std::uint64_t off = ((cursor + page - 1) & ~(page - 1)) | (seg.vaddr & (page - 1));
        if (off < cursor) off += page;
        elf::ProgramHeader ph{};
        ph.type = elf::kPtLoad;
        ph.flags = (seg.r ? elf::kPfR : 0) | (seg.w ? elf::kPfW : 0) | (seg.x ? elf::kPfX : 0);
        ph.offset = off;
        ph.vaddr = seg.vaddr;
        ph.paddr = seg.vaddr;
        ph.filesz = seg.bytes.size();
        ph.memsz = seg.bytes.size();
        ph.align = page;
        phdrs.push_back(ph);
        cursor = off + seg.bytes.size();
    }

    std::vector<std::uint8_t> out(static_cast<std::size_t>(cursor), 0);
    std::memcpy(out.data(), &hdr, sizeof(hdr));
    std::memcpy(out.data() + sizeof(hdr), phdrs.data(), phdrs.size() * sizeof(elf::ProgramHeader));
    for (std::size_t i = 0; i < phdrs.size(); ++i)
        std::memcpy(out.data() + phdrs[i].offset, image.segments[i].bytes.data(),
                    image.segments[i].bytes.size());
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw error(errc::malformed, "cannot open file: " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Load a payload file, dispatching on its magic (ELF or RGF1 flat image).
inline PayloadImage load_payload_file(const std::string& path) {
    auto bytes = read_file_bytes(path);
    if (bytes.size() >= 4 && bytes[0] == 0x7F && bytes[1] == 'E' && bytes[2] == 'L' && bytes[3] == 'F')
        return parse_elf(bytes);
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), "RGF1", 4) == 0)
        return parse_flat_file(bytes);
    throw error(errc::bad_magic, "unrecognized payload format: " + path);
}

} // namespace retrograde

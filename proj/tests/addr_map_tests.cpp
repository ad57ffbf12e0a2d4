#include <catch2/catch_amalgamated.hpp>

#include <retrograde/addr_map.hpp>
#include <retrograde/payload_image.hpp>

#include "test_util.hpp"

using namespace retrograde;
using testutil::corpus_path;

namespace {

std::vector<std::uint8_t> bytes(std::initializer_list<int> xs) {
    std::vector<std::uint8_t> v;
    for (int x : xs) v.push_back(static_cast<std::uint8_t>(x));
    return v;
}

} // namespace

TEST_CASE("decoder recognizes every subset pattern") {
    SECTION("nop") {
        auto d = decode_one(bytes({0x90}), 0);
        CHECK(d.length == 1);
        CHECK(d.text == "nop");
        CHECK(d.op == Decoded::Op::nop);
    }
    SECTION("ret") {
        auto d = decode_one(bytes({0xC3}), 0);
        CHECK(d.length == 1);
        CHECK(d.text == "ret");
        CHECK(d.op == Decoded::Op::ret);
    }
    SECTION("syscall") {
        auto d = decode_one(bytes({0x0F, 0x05}), 0);
        CHECK(d.length == 2);
        CHECK(d.text == "syscall");
        CHECK(d.op == Decoded::Op::sys);
    }
    SECTION("mov rax, 60") {
        auto d = decode_one(bytes({0x48, 0xC7, 0xC0, 0x3C, 0, 0, 0}), 0);
        CHECK(d.length == 7);
        CHECK(d.text == "mov rax, 60");
        CHECK(d.op == Decoded::Op::mov_imm);
        CHECK(d.reg == 0);
        CHECK(d.imm == 60);
    }
    SECTION("imm32 is sign-extended") {
        auto d = decode_one(bytes({0x48, 0xC7, 0xC7, 0xFF, 0xFF, 0xFF, 0xFF}), 0);
        CHECK(d.text == "mov rdi, -1");
        CHECK(d.imm == ~0ull);
    }
    SECTION("rex.b picks the high register bank") {
        auto d = decode_one(bytes({0x49, 0xC7, 0xC2, 0x05, 0, 0, 0}), 0);
        CHECK(d.text == "mov r10, 5");
        CHECK(d.reg == 10);
    }
    SECTION("movabs imm64") {
        auto d = decode_one(bytes({0x48, 0xBE, 0x00, 0x20, 0x40, 0, 0, 0, 0, 0}), 0);
        CHECK(d.length == 10);
        CHECK(d.text == "movabs rsi, 0x402000");
        CHECK(d.reg == 6);
        CHECK(d.imm == 0x402000);
    }
    SECTION("movabs r15") {
        auto d = decode_one(bytes({0x49, 0xBF, 1, 0, 0, 0, 0, 0, 0, 0x80}), 0);
        CHECK(d.text == "movabs r15, 0x8000000000000001");
        CHECK(d.reg == 15);
    }
    SECTION("decode honors the offset argument") {
        auto d = decode_one(bytes({0x90, 0x0F, 0x05}), 1);
        CHECK(d.text == "syscall");
    }
}

TEST_CASE("decoder distinguishes truncation from unknown opcodes") {
    SECTION("prefixes of valid patterns at end of buffer are truncated") {
        CHECK_THROWS_MATCHES(decode_one(bytes({0x0F}), 0), error, ErrorCodeIs(errc::truncated));
        CHECK_THROWS_MATCHES(decode_one(bytes({0x48}), 0), error, ErrorCodeIs(errc::truncated));
        CHECK_THROWS_MATCHES(decode_one(bytes({0x48, 0xC7}), 0), error, ErrorCodeIs(errc::truncated));
        CHECK_THROWS_MATCHES(decode_one(bytes({0x48, 0xC7, 0xC0, 1, 2}), 0), error,
                             ErrorCodeIs(errc::truncated));
        CHECK_THROWS_MATCHES(decode_one(bytes({0x49, 0xB8, 1, 2, 3}), 0), error,
                             ErrorCodeIs(errc::truncated));
    }
    SECTION("full mismatches are unknown opcodes") {
        CHECK_THROWS_MATCHES(decode_one(bytes({0xCC}), 0), error, ErrorCodeIs(errc::unknown_opcode));
        CHECK_THROWS_MATCHES(decode_one(bytes({0x0F, 0x04}), 0), error,
                             ErrorCodeIs(errc::unknown_opcode));
        CHECK_THROWS_MATCHES(decode_one(bytes({0x48, 0x89, 0xC0}), 0), error,
                             ErrorCodeIs(errc::unknown_opcode));
        // memory-form mov (modrm outside C0..C7) is not in the subset
        CHECK_THROWS_MATCHES(decode_one(bytes({0x48, 0xC7, 0x00, 1, 2, 3, 4}), 0), error,
                             ErrorCodeIs(errc::unknown_opcode));
    }
    SECTION("errors carry the instruction's offset") {
        try {
            decode_one(bytes({0x90, 0xCC}), 1);
            FAIL("expected a decode error");
        } catch (const error& e) {
            CHECK(e.code() == errc::unknown_opcode);
            REQUIRE(e.offset().has_value());
            CHECK(*e.offset() == 1);
        }
    }
    SECTION("offset past the end") {
        CHECK_THROWS_MATCHES(decode_one(bytes({0x90}), 5), error, ErrorCodeIs(errc::out_of_range));
    }
}

TEST_CASE("built maps match the external disassembler for every corpus payload") {
    struct Case {
        const char* payload;
        const char* sidecar;
        std::size_t count;
    };
    auto c = GENERATE(Case{"refpayload.elf", "refpayload.elf.map.json", 10},
                      Case{"rewrite_demo.elf", "rewrite_demo.elf.map.json", 57},
                      Case{"probe_demo.elf", "probe_demo.elf.map.json", 11});
    CAPTURE(c.payload);

    PayloadImage image = load_payload_file(corpus_path(c.payload));
    AddressMap built = build_map(image);
    AddressMap imported = import_map(testutil::read_text(corpus_path(c.sidecar)));

    CHECK(built.size() == c.count);
    CHECK(imported.size() == c.count);
    CHECK(same_layout(built, imported));
    REQUIRE(built.base.has_value());
    CHECK(*built.base == 0x401000);
}

TEST_CASE("reference payload map has the expected offsets and addresses") {
    PayloadImage image = load_payload_file(corpus_path("refpayload.elf"));
    AddressMap map = build_map(image);

    const std::vector<std::uint64_t> offsets{0, 1, 3, 10, 17, 19, 26, 33, 43, 50};
    REQUIRE(map.size() == offsets.size());
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        CHECK(map.records[i].offset == offsets[i]);
        CHECK(map.resolve(i) == testutil::kRefAddrs[i]);
    }
    CHECK(map.records[1].text == "syscall");
    CHECK(map.records[2].text == "mov rax, 60");
    CHECK(map.records[7].text == "movabs rsi, 0x402000");

    CHECK_THROWS_MATCHES(map.resolve(10), error, ErrorCodeIs(errc::out_of_range));
}

TEST_CASE("the flat payload maps identically to its elf sibling") {
    AddressMap from_elf = build_map(load_payload_file(corpus_path("refpayload.elf")));
    AddressMap from_flat = build_map(load_payload_file(corpus_path("refpayload.flat")));
    CHECK(same_layout(from_elf, from_flat));
}

TEST_CASE("build_map rejects windows it cannot fully decode") {
    SECTION("empty window") {
        std::vector<std::uint8_t> blob(8, 0x90);
        PayloadImage image = load_flat(blob, 0x1000, 0, 0);
        CHECK_THROWS_MATCHES(build_map(image), error, ErrorCodeIs(errc::empty_map));
    }
    SECTION("foreign instruction mid-window") {
        auto blob = bytes({0x90, 0xCC, 0x90});
        PayloadImage image = load_flat(blob, 0x1000, 0, 3);
        CHECK_THROWS_MATCHES(build_map(image), error, ErrorCodeIs(errc::unknown_opcode));
    }
    SECTION("window ends mid-instruction") {
        auto blob = bytes({0x90, 0x0F, 0x05});
        PayloadImage image = load_flat(blob, 0x1000, 0, 2); // cuts the syscall in half
        CHECK_THROWS_MATCHES(build_map(image), error, ErrorCodeIs(errc::truncated));
    }
}

TEST_CASE("map json roundtrip preserves layout and text") {
    AddressMap map = build_map(load_payload_file(corpus_path("refpayload.elf")));
    AddressMap back = import_map(to_json_string(map));
    CHECK(same_layout(map, back));
    REQUIRE(back.size() == map.size());
    for (std::size_t i = 0; i < map.size(); ++i) CHECK(back.records[i].text == map.records[i].text);
}

TEST_CASE("map import validates structure") {
    SECTION("not json at all") {
        CHECK_THROWS_MATCHES(import_map("]!["), error, ErrorCodeIs(errc::parse_error));
    }
    SECTION("missing records") {
        CHECK_THROWS_MATCHES(import_map(R"({"base":0})"), error, ErrorCodeIs(errc::parse_error));
    }
    SECTION("record missing length") {
        CHECK_THROWS_MATCHES(import_map(R"({"records":[{"offset":0}]})"), error,
                             ErrorCodeIs(errc::parse_error));
    }
    SECTION("negative base") {
        CHECK_THROWS_MATCHES(import_map(R"({"base":-5,"records":[{"offset":0,"length":1}]})"), error,
                             ErrorCodeIs(errc::parse_error));
    }
    SECTION("length out of range") {
        CHECK_THROWS_MATCHES(import_map(R"({"records":[{"offset":0,"length":0}]})"), error,
                             ErrorCodeIs(errc::out_of_range));
        CHECK_THROWS_MATCHES(import_map(R"({"records":[{"offset":0,"length":16}]})"), error,
                             ErrorCodeIs(errc::out_of_range));
    }
    SECTION("offsets must strictly increase") {
        CHECK_THROWS_MATCHES(
            import_map(R"({"records":[{"offset":4,"length":1},{"offset":4,"length":1}]})"), error,
            ErrorCodeIs(errc::non_monotonic));
        CHECK_THROWS_MATCHES(
            import_map(R"({"records":[{"offset":4,"length":1},{"offset":1,"length":1}]})"), error,
            ErrorCodeIs(errc::non_monotonic));
    }
    SECTION("no records at all") {
        CHECK_THROWS_MATCHES(import_map(R"({"records":[]})"), error, ErrorCodeIs(errc::empty_map));
    }
    SECTION("gaps are allowed, only monotonicity is required") {
        AddressMap map = import_map(R"({"records":[{"offset":0,"length":1},{"offset":9,"length":2}]})");
        CHECK(map.size() == 2);
        CHECK(!map.base.has_value());
    }
}

TEST_CASE("layout comparison ignores text and tolerates one-sided bases") {
    AddressMap a = import_map(R"({"base":100,"records":[{"offset":0,"length":1,"text":"nop"}]})");
    AddressMap b = import_map(R"({"base":100,"records":[{"offset":0,"length":1,"text":"xyz"}]})");
    AddressMap c = import_map(R"({"base":200,"records":[{"offset":0,"length":1}]})");
    AddressMap d = import_map(R"({"records":[{"offset":0,"length":1}]})");
    AddressMap e = import_map(R"({"base":100,"records":[{"offset":0,"length":2}]})");

    CHECK(same_layout(a, b));
    CHECK(!same_layout(a, c)); // bases differ
    CHECK(same_layout(a, d));  // only one side carries a base
    CHECK(!same_layout(a, e)); // lengths differ
    CHECK(a.resolve(0) == 100);
    CHECK(d.resolve(0) == 0); // no base: offsets stand alone
}

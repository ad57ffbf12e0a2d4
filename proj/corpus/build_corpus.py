#!/usr/bin/env python3
"""Regenerate the committed corpus binaries and their objdump-derived maps.

Needs binutils (as, ld, objcopy, objdump, readelf, nm). The outputs are
committed so the test suite runs without an assembler. Besides building,
this script is the oracle run for the frozen test constants: it prints the
per-payload instruction offsets/lengths, section sizes, and (on Linux
x86-64) the forward-run exit status of each payload.
"""

import json
import os
import re
import struct
import subprocess
import sys
import tempfile
from pathlib import Path

HERE = Path(__file__).resolve().parent
ELF_PAYLOADS = ["refpayload", "rewrite_demo", "probe_demo"]


def run(*cmd, **kw):
    return subprocess.run(cmd, check=True, **kw)


def text_section(path):
    """(vaddr, file offset, size) of .text."""
    out = subprocess.check_output(["readelf", "-SW", str(path)], text=True)
    for line in out.splitlines():
        cols = line.split()
        if ".text" in cols:
            i = cols.index(".text")
            return int(cols[i + 2], 16), int(cols[i + 3], 16), int(cols[i + 4], 16)
    sys.exit(f"no .text section in {path}")


def objdump_map(path):
    """Convert objdump disassembly lines ('  401000:\\t90\\tnop') to the map JSON."""
    vaddr, _, size = text_section(path)
    out = subprocess.check_output(
        ["objdump", "-d", "-j", ".text", str(path)], text=True
    )
    rows = []
    for line in out.splitlines():
        m = re.match(r"^\s+([0-9a-f]+):\t[0-9a-f ]+\t(.+)$", line)
        if m:
            rows.append((int(m.group(1), 16), re.sub(r"\s+", " ", m.group(2)).strip()))
        # lines without a mnemonic column are continuations of the previous
        # instruction's byte dump; lengths come from address deltas instead
    records = []
    for i, (addr, text) in enumerate(rows):
        end = rows[i + 1][0] if i + 1 < len(rows) else vaddr + size
        records.append({"offset": addr - vaddr, "length": end - addr, "text": text})
    return {"base": vaddr, "records": records}


def symbol_value(path, name):
    out = subprocess.check_output(["nm", str(path)], text=True)
    for line in out.splitlines():
        value, _, sym = line.split()
        if sym == name:
            return int(value, 16)
    sys.exit(f"no symbol {name} in {path}")


def write_flat_sidecar(out_path, blob, base, entry_offset, text_len):
    header = b"RGF1" + struct.pack("<QQI", base, entry_offset, text_len)
    out_path.write_bytes(header + blob)


def forward_run(path):
    proc = subprocess.run([str(path)], capture_output=True, timeout=10)
    return proc.returncode, proc.stdout


def main():
    os.chdir(HERE)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for name in ELF_PAYLOADS:
            obj = tmp / f"{name}.o"
            run("as", "-o", obj, f"{name}.s")
            run("ld", "-o", f"{name}.elf", obj)
            amap = objdump_map(f"{name}.elf")
            Path(f"{name}.elf.map.json").write_text(json.dumps(amap, indent=1) + "\n")
            vaddr, _, size = text_section(f"{name}.elf")
            print(f"{name}.elf: text@{vaddr:#x} size={size} records={len(amap['records'])}")
            print(f"  offsets: {[r['offset'] for r in amap['records']]}")

        # one-PT_LOAD fixture (same code as refpayload, single-segment layout)
        obj = tmp / "refpayload.o"
        run("as", "-o", obj, "refpayload.s")
        run("ld", "-T", "one_load.ld", "-o", "fixture_one_load.elf", obj)
        print("fixture_one_load.elf: text@%#x size=%d" % text_section("fixture_one_load.elf")[0::2])

        # flat variant: code immediately followed by the message bytes
        obj = tmp / "refpayload_flat.o"
        linked = tmp / "refpayload_flat"
        run("as", "-o", obj, "refpayload_flat.s")
        run("ld", "-Ttext=0x401000", "-o", linked, obj)
        blob_path = tmp / "refpayload_flat.bin"
        run("objcopy", "-O", "binary", "-j", ".text", linked, blob_path)
        blob = blob_path.read_bytes()
        text_len = symbol_value(linked, "msg") - 0x401000
        write_flat_sidecar(Path("refpayload.flat"), blob, 0x401000, 0, text_len)
        print(f"refpayload.flat: blob={len(blob)} bytes, text_len={text_len}")

    if os.uname().sysname == "Linux" and os.uname().machine == "x86_64":
        for name in ELF_PAYLOADS:
            code, out = forward_run(HERE / f"{name}.elf")
            print(f"{name}.elf forward (untraced): exit={code} stdout={out!r}")


if __name__ == "__main__":
    main()

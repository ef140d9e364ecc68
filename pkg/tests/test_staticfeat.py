"""String extraction, PE import parsing, and feature hashing."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madlab.corpus import build_pe_stub
from madlab.errors import BadRvaError, NotPeError, TruncatedError
from madlab.rng import SplitMix64
from madlab.staticfeat import (
    HashSpec,
    ImportEntry,
    extract_strings,
    fnv1a64,
    parse_pe_imports,
    vectorize,
)


# ---------------------------------------------------------------------------
# strings
# ---------------------------------------------------------------------------

class TestExtractStrings:
    def test_short_run_dropped(self):
        assert extract_strings(b"hello\x00world!") == ["world!"]

    def test_empty_input(self):
        assert extract_strings(b"") == []

    def test_run_spanning_whole_input(self):
        assert extract_strings(b"morning") == ["morning"]

    def test_len5_vs_len6_boundary(self):
        assert extract_strings(b"\x00abcde\x00") == []
        assert extract_strings(b"\x00abcdef\x00") == ["abcdef"]

    def test_run_terminated_at_eof(self):
        assert extract_strings(b"\x01binary") == ["binary"]

    def test_non_ascii_bytes_terminate(self):
        # 0x1f and 0x7f sit just outside the printable range
        assert extract_strings(b"abcdef\x7fghijkl\x1fmnopqr\x80stuvwx") == [
            "abcdef", "ghijkl", "mnopqr", "stuvwx"]

    def test_min_len_parameter(self):
        assert extract_strings(b"ab\x00cdef", min_len=2) == ["ab", "cdef"]

    @given(st.binary(max_size=400), st.integers(min_value=1, max_value=8))
    def test_output_runs_are_printable_and_long_enough(self, data, min_len):
        for s in extract_strings(data, min_len):
            assert len(s) >= min_len
            assert all(0x20 <= ord(c) <= 0x7E for c in s)

    @given(st.binary(max_size=400))
    def test_concatenation_is_subsequence_of_printables(self, data):
        printable = bytes(b for b in data if 0x20 <= b <= 0x7E)
        joined = "".join(extract_strings(data)).encode("ascii")
        # each extracted run appears in order inside the printable stream
        pos = 0
        for ch in joined:
            pos = printable.index(bytes([ch]), pos) + 1


# ---------------------------------------------------------------------------
# PE import parsing
# ---------------------------------------------------------------------------

def hand_crafted_pe32() -> bytes:
    """A PE32 image assembled field by field, independent of build_pe_stub.

    Imports KERNEL32.DLL!{ExitProcess}.  Layout: headers in the first 0x200
    bytes, one .idata section at RVA 0x1000 / file 0x200.
    """
    idata = bytearray()
    # two descriptors: one real, one terminator
    idata += struct.pack("<IIIII", 0x1028, 0, 0, 0x1046, 0x1028)
    idata += struct.pack("<IIIII", 0, 0, 0, 0, 0)
    # thunk array at 0x1028: one name RVA + terminator
    idata += struct.pack("<II", 0x1030, 0)
    # hint/name at 0x1030
    idata += struct.pack("<H", 0) + b"ExitProcess\x00"
    # padding to keep the dll name where the descriptor says (0x1046)
    while len(idata) < 0x46:
        idata += b"\x00"
    idata += b"KERNEL32.DLL\x00"

    dos = bytearray(64)
    dos[:2] = b"MZ"
    struct.pack_into("<I", dos, 0x3C, 64)
    coff = struct.pack("<HHIIIHH", 0x14C, 1, 0, 0, 0, 224, 0x0102)
    opt = bytearray(224)
    struct.pack_into("<H", opt, 0, 0x10B)
    struct.pack_into("<I", opt, 92, 16)          # NumberOfRvaAndSizes
    struct.pack_into("<II", opt, 96 + 8, 0x1000, len(idata))  # import dir
    section = struct.pack(
        "<8sIIIIIIHHI", b".idata\x00\x00", len(idata), 0x1000,
        0x200, 0x200, 0, 0, 0, 0, 0xC0000040)
    headers = bytes(dos) + b"PE\x00\x00" + coff + bytes(opt) + section
    image = bytearray(0x400)
    image[: len(headers)] = headers
    image[0x200 : 0x200 + len(idata)] = idata
    return bytes(image)


def reference_import_dump(data: bytes) -> list[tuple[str, list[str]]]:
    """Independent oracle: map the image into memory by section, then walk.

    Uses a different strategy from the production parser (which translates
    each RVA to a file offset on demand): here the whole image is loaded the
    way a loader would, and all reads happen at virtual addresses.
    """
    e_lfanew = struct.unpack_from("<I", data, 0x3C)[0]
    assert data[e_lfanew : e_lfanew + 4] == b"PE\x00\x00"
    n_sections, = struct.unpack_from("<H", data, e_lfanew + 6)
    opt_size, = struct.unpack_from("<H", data, e_lfanew + 20)
    opt = e_lfanew + 24
    magic, = struct.unpack_from("<H", data, opt)
    plus = magic == 0x20B
    dirs = opt + (112 if plus else 96)
    import_rva, = struct.unpack_from("<I", data, dirs + 8)
    if import_rva == 0:
        return []
    sections = []
    for i in range(n_sections):
        base = opt + opt_size + 40 * i
        vsize, va, rawsz, rawp = struct.unpack_from("<IIII", data, base + 8)
        sections.append((va, vsize, rawp, rawsz))
    top = max(va + max(vs, rs) for va, vs, _, rs in sections)
    memory = bytearray(top)
    for va, vsize, rawp, rawsz in sections:
        n = min(max(vsize, rawsz), rawsz)
        memory[va : va + n] = data[rawp : rawp + n]

    def cstr(addr):
        end = memory.index(0, addr)
        return memory[addr:end].decode("latin-1")

    out = []
    off = import_rva
    while True:
        oft, _, _, name_rva, ft = struct.unpack_from("<IIIII", memory, off)
        if oft == 0 and name_rva == 0 and ft == 0:
            break
        dll = cstr(name_rva).lower()
        funcs = []
        t = oft or ft
        step = 8 if plus else 4
        flagbit = 1 << (63 if plus else 31)
        while t:
            entry = struct.unpack_from("<Q" if plus else "<I", memory, t)[0]
            if entry == 0:
                break
            if entry & flagbit:
                funcs.append(f"#{entry & 0xFFFF}")
            else:
                funcs.append(cstr((entry & 0x7FFFFFFF) + 2))
            t += step
        out.append((dll, funcs))
        off += 20
    return out


class TestParsePeImports:
    def test_hand_crafted_fixture(self):
        data = hand_crafted_pe32()
        assert parse_pe_imports(data) == [
            ImportEntry(dll="kernel32.dll", functions=["ExitProcess"])]

    def test_fixture_matches_reference_dumper(self):
        data = hand_crafted_pe32()
        got = [(e.dll, e.functions) for e in parse_pe_imports(data)]
        assert got == reference_import_dump(data)

    @pytest.mark.parametrize("pe32plus", [False, True])
    def test_stub_builder_matches_reference_dumper(self, pe32plus):
        imports = [
            ("KERNEL32.DLL", ["ExitProcess", "VirtualAlloc"]),
            ("ws2_32.dll", ["socket", "#23"]),
            ("empty.dll", []),
        ]
        data = build_pe_stub(imports, pe32plus=pe32plus)
        got = [(e.dll, e.functions) for e in parse_pe_imports(data)]
        assert got == reference_import_dump(data)
        assert got[0] == ("kernel32.dll", ["ExitProcess", "VirtualAlloc"])
        assert got[1] == ("ws2_32.dll", ["socket", "#23"])
        assert got[2] == ("empty.dll", [])

    def test_not_pe(self):
        with pytest.raises(NotPeError):
            parse_pe_imports(b"\x7fELF....")
        with pytest.raises(NotPeError):
            parse_pe_imports(b"")

    def test_truncated_before_e_lfanew(self):
        with pytest.raises(TruncatedError):
            parse_pe_imports(b"MZ" + b"\x00" * 10)

    def test_truncated_after_pe_offset(self):
        data = bytearray(64)
        data[:2] = b"MZ"
        struct.pack_into("<I", data, 0x3C, 0x1000)  # points past the end
        with pytest.raises(TruncatedError):
            parse_pe_imports(bytes(data))

    def test_zero_import_directory_rva(self):
        data = bytearray(hand_crafted_pe32())
        e_lfanew = struct.unpack_from("<I", data, 0x3C)[0]
        struct.pack_into("<II", data, e_lfanew + 24 + 96 + 8, 0, 0)
        assert parse_pe_imports(bytes(data)) == []

    def test_bad_rva(self):
        data = bytearray(hand_crafted_pe32())
        e_lfanew = struct.unpack_from("<I", data, 0x3C)[0]
        struct.pack_into("<I", data, e_lfanew + 24 + 96 + 8, 0x9000)
        with pytest.raises(BadRvaError):
            parse_pe_imports(bytes(data))

    def test_mutation_fuzz_never_crashes(self):
        """Random mutations must yield an error or a result, never a crash."""
        base = bytearray(build_pe_stub(
            [("kernel32.dll", ["ReadFile", "#7"]), ("user32.dll", ["MessageBoxW"])]))
        rng = SplitMix64(2024)
        for _ in range(1500):
            data = bytearray(base)
            for _ in range(rng.next_int(1, 8)):
                data[rng.next_below(len(data))] = rng.next_below(256)
            if rng.next_below(4) == 0:
                data = data[: rng.next_below(len(data) + 1)]
            try:
                result = parse_pe_imports(bytes(data))
            except (NotPeError, TruncatedError, BadRvaError):
                continue
            assert isinstance(result, list)


# ---------------------------------------------------------------------------
# hashing / vectorization
# ---------------------------------------------------------------------------

class TestFnv1a64:
    def test_published_vectors(self):
        assert fnv1a64("") == 0xCBF29CE484222325
        assert fnv1a64("a") == 0xAF63DC4C8601EC8C
        assert fnv1a64("foobar") == 0x85944171F73967E8


class TestVectorize:
    SPEC = HashSpec(dll_dims=32, str_dims=32)

    def test_empty_inputs_give_zero_vectors(self):
        sf = vectorize([], [], self.SPEC)
        assert not sf.dll_vec.any() and not sf.str_vec.any()

    def test_single_string_single_increment(self):
        sf = vectorize([], ["hello world"], self.SPEC)
        idx = fnv1a64("hello world") % 32
        assert sf.str_vec[idx] == 1.0 and sf.str_vec.sum() == 1.0

    def test_duplicate_string_counts_twice(self):
        sf = vectorize([], ["dup!dup!"] * 2, self.SPEC)
        assert sf.str_vec[fnv1a64("dup!dup!") % 32] == 2.0

    def test_import_key_format(self):
        sf = vectorize([ImportEntry("kernel32.dll", ["ExitProcess"])], [], self.SPEC)
        assert sf.dll_vec[fnv1a64("kernel32.dll!ExitProcess") % 32] == 1.0

    def test_import_with_no_functions_uses_bare_key(self):
        sf = vectorize([ImportEntry("odd.dll", [])], [], self.SPEC)
        assert sf.dll_vec[fnv1a64("odd.dll!") % 32] == 1.0

    @given(st.lists(st.text(min_size=1, max_size=12), max_size=20))
    def test_l1_norm_equals_string_count(self, strings):
        sf = vectorize([], strings, self.SPEC)
        assert sf.str_vec.sum() == len(strings)

    @given(
        st.lists(st.text(min_size=1, max_size=10), max_size=12),
        st.lists(st.text(min_size=1, max_size=10), max_size=12),
        st.randoms(use_true_random=False),
    )
    @settings(max_examples=50)
    def test_permutation_invariance_and_additivity(self, a, b, rnd):
        both = vectorize([], a + b, self.SPEC)
        parts = vectorize([], a, self.SPEC).str_vec + vectorize([], b, self.SPEC).str_vec
        assert np.array_equal(both.str_vec, parts)
        shuffled = list(a + b)
        rnd.shuffle(shuffled)
        assert np.array_equal(vectorize([], shuffled, self.SPEC).str_vec, both.str_vec)

"""Static feature extraction: PE imports, printable strings, hashed vectors.

Two independent extractors feed the detector alongside the token stream:
the import walker pulls ``dll!function`` pairs out of the PE import
directory, and the string scanner pulls printable-ASCII runs out of the raw
bytes.  Both are folded into fixed-width count vectors by feature hashing
(FNV-1a 64, bit-exact constants below), so the encoding is reproducible and
order-independent with no learned dictionary.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadRvaError, NotPeError, ShapeMismatchError, TruncatedError

FNV_OFFSET_BASIS = 14695981039346656037
FNV_PRIME = 1099511628211

# ordinal flag bit in import lookup entries
_ORDINAL32 = 0x80000000
_ORDINAL64 = 0x8000000000000000


def fnv1a64(s: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 encoding of ``s``."""
    h = FNV_OFFSET_BASIS
    for b in s.encode("utf-8"):
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class ImportEntry:
    """One imported DLL with its imported function names.

    DLL names are case-folded to lower case (PE loaders are case
    insensitive); ordinal imports appear as ``"#<decimal>"``.
    """

    dll: str
    functions: list[str] = field(default_factory=list)


@dataclass
class HashSpec:
    """Feature-hashing layout: vector widths for the two static vectors."""

    dll_dims: int = 256
    str_dims: int = 256

    def __post_init__(self):
        if self.dll_dims < 8 or self.str_dims < 8:
            raise ShapeMismatchError("hash dimensions must be >= 8")


@dataclass
class StaticFeatures:
    """Hashed count vectors: one for imports, one for printable strings."""

    dll_vec: np.ndarray
    str_vec: np.ndarray


_PRINTABLE_RUN = re.compile(rb"[\x20-\x7e]+")


def extract_strings(data: bytes, min_len: int = 6) -> list[str]:
    """Return maximal printable-ASCII runs of length >= ``min_len``.

    A run is a consecutive stretch of bytes in [0x20, 0x7E]; any other byte
    (or end of input) terminates it.  Runs are returned in byte order,
    decoded as ASCII.
    """
    return [
        m.group().decode("ascii")
        for m in _PRINTABLE_RUN.finditer(data)
        if len(m.group()) >= min_len
    ]


class _Reader:
    """Bounds-checked little-endian reads over an immutable byte buffer."""

    def __init__(self, data: bytes):
        self.data = data

    def bytes_at(self, off: int, n: int, what: str = "") -> bytes:
        if off < 0 or off + n > len(self.data):
            raise TruncatedError(max(off, 0), what)
        return self.data[off : off + n]

    def u16(self, off: int, what: str = "") -> int:
        return struct.unpack_from("<H", self.bytes_at(off, 2, what))[0]

    def u32(self, off: int, what: str = "") -> int:
        return struct.unpack_from("<I", self.bytes_at(off, 4, what))[0]

    def u64(self, off: int, what: str = "") -> int:
        return struct.unpack_from("<Q", self.bytes_at(off, 8, what))[0]

    def cstring(self, off: int, what: str = "") -> bytes:
        if off < 0 or off >= len(self.data):
            raise TruncatedError(max(off, 0), what)
        end = self.data.find(b"\x00", off)
        if end < 0:
            raise TruncatedError(len(self.data), what)
        return self.data[off:end]


def _rva_to_offset(rva: int, sections: list[tuple[int, int, int, int]]) -> int:
    """Map an RVA to a file offset through the section table.

    Sections are (virtual_address, virtual_size, raw_pointer, raw_size).
    The byte must land inside the section's raw data on disk.
    """
    for va, vsize, raw_ptr, raw_size in sections:
        span = max(vsize, raw_size)
        if va <= rva < va + span:
            delta = rva - va
            if delta >= raw_size:
                raise BadRvaError(rva)
            return raw_ptr + delta
    raise BadRvaError(rva)


def parse_pe_imports(data: bytes) -> list[ImportEntry]:
    """Walk the PE import directory and return imports in descriptor order.

    Accepts PE32 and PE32+.  An image without an import directory yields an
    empty list; structural damage raises ``NotPeError``, ``TruncatedError``
    or ``BadRvaError``.  Bound imports, delay imports and forwarders are
    ignored (count features do not need them).
    """
    r = _Reader(data)
    if len(data) < 2 or data[:2] != b"MZ":
        raise NotPeError("missing MZ magic")
    e_lfanew = r.u32(0x3C, "e_lfanew")
    if r.bytes_at(e_lfanew, 4, "PE signature") != b"PE\x00\x00":
        raise NotPeError("missing PE signature")

    coff = e_lfanew + 4
    n_sections = r.u16(coff + 2, "section count")
    size_opt = r.u16(coff + 16, "optional header size")
    opt = coff + 20

    magic = r.u16(opt, "optional header magic")
    if magic == 0x10B:  # PE32
        n_dirs_off, dirs_off = opt + 92, opt + 96
    elif magic == 0x20B:  # PE32+
        n_dirs_off, dirs_off = opt + 108, opt + 112
    else:
        raise NotPeError(f"unknown optional header magic {magic:#x}")
    pe32plus = magic == 0x20B

    if size_opt < (n_dirs_off - opt) + 4:
        return []  # optional header too small to hold a directory count
    n_dirs = r.u32(n_dirs_off, "directory count")
    if n_dirs < 2 or size_opt < (dirs_off - opt) + 2 * 8:
        return []  # no import directory slot
    import_rva = r.u32(dirs_off + 8, "import directory RVA")
    if import_rva == 0:
        return []

    sections = []
    sec_off = opt + size_opt
    for i in range(n_sections):
        base = sec_off + 40 * i
        hdr = r.bytes_at(base, 40, "section header")
        vsize, va, raw_size, raw_ptr = struct.unpack_from("<IIII", hdr, 8)
        sections.append((va, vsize, raw_ptr, raw_size))

    entries: list[ImportEntry] = []
    desc_off = _rva_to_offset(import_rva, sections)
    while True:
        desc = r.bytes_at(desc_off, 20, "import descriptor")
        oft, _ts, _fwd, name_rva, ft = struct.unpack("<IIIII", desc)
        if oft == 0 and name_rva == 0 and ft == 0:
            break
        dll = r.cstring(_rva_to_offset(name_rva, sections), "DLL name")
        entry = ImportEntry(dll.decode("latin-1").lower())
        thunk_rva = oft if oft != 0 else ft
        if thunk_rva != 0:
            entry.functions = _walk_thunks(r, thunk_rva, sections, pe32plus)
        entries.append(entry)
        desc_off += 20
    return entries


def _walk_thunks(r: _Reader, thunk_rva: int, sections, pe32plus: bool) -> list[str]:
    step = 8 if pe32plus else 4
    flag = _ORDINAL64 if pe32plus else _ORDINAL32
    off = _rva_to_offset(thunk_rva, sections)
    functions = []
    while True:
        entry = r.u64(off, "import thunk") if pe32plus else r.u32(off, "import thunk")
        if entry == 0:
            break
        if entry & flag:
            functions.append(f"#{entry & 0xFFFF}")
        else:
            hint_off = _rva_to_offset(entry & 0x7FFFFFFF, sections)
            r.bytes_at(hint_off, 2, "import hint")
            functions.append(r.cstring(hint_off + 2, "import name").decode("latin-1"))
        off += step
    return functions


def vectorize(
    imports: list[ImportEntry], strings: list[str], spec: HashSpec
) -> StaticFeatures:
    """Hash imports and strings into fixed-width count vectors.

    Each ``dll!function`` pair increments ``dll_vec[fnv1a64(key) % dll_dims]``
    (a DLL with no resolvable thunks contributes the key ``"dll!"``); each
    string increments ``str_vec[fnv1a64(s) % str_dims]``.  Counts are
    multiset counts: duplicates add.
    """
    dll_vec = np.zeros(spec.dll_dims, dtype=np.float64)
    str_vec = np.zeros(spec.str_dims, dtype=np.float64)
    for imp in imports:
        keys = [f"{imp.dll}!{fn}" for fn in imp.functions] or [f"{imp.dll}!"]
        for key in keys:
            dll_vec[fnv1a64(key) % spec.dll_dims] += 1
    for s in strings:
        str_vec[fnv1a64(s) % spec.str_dims] += 1
    return StaticFeatures(dll_vec=dll_vec, str_vec=str_vec)


def features_from_bytes(data: bytes, spec: HashSpec, min_str_len: int = 6) -> StaticFeatures:
    """Full static pipeline for one binary: imports + strings, vectorized.

    Bytes that fail PE validation still yield string features (an all-zero
    import vector), so non-PE inputs degrade instead of aborting a batch.
    """
    try:
        imports = parse_pe_imports(data)
    except (NotPeError, TruncatedError, BadRvaError):
        imports = []
    return vectorize(imports, extract_strings(data, min_str_len), spec)

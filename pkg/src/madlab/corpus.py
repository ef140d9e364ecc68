"""Corpus handling: manifests, stratified splits, synthetic sample generation.

The real-world corpus this pipeline was designed around is not
redistributable, so the lab ships a deterministic synthetic generator: token
streams drawn from two class-conditional distributions plus minimal PE stub
binaries whose import tables draw from class-conditional DLL pools.  A
``separability`` knob in [0, 1] controls how much the class distributions
overlap (1.0 means fully disjoint vocabularies).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

from .errors import (
    ClassTooSmallError,
    DuplicateIdError,
    MalformedLineError,
    UnknownLabelError,
)
from .rng import SplitMix64, derive

MANIFEST_SCHEMA_VERSION = 1


class Label(IntEnum):
    benign = 0
    malware = 1

    @classmethod
    def parse(cls, value) -> "Label":
        try:
            return cls[value]
        except (KeyError, TypeError):
            raise UnknownLabelError(value) from None


@dataclass
class SampleRecord:
    """One corpus entry: raw bytes (optional), disassembly text, label."""

    id: str
    asm_path: Path
    label: Label
    bin_path: Path | None = None

    def read_asm(self) -> str:
        return self.asm_path.read_text(encoding="utf-8")

    def read_bin(self) -> bytes | None:
        return self.bin_path.read_bytes() if self.bin_path is not None else None


@dataclass
class Manifest:
    records: list[SampleRecord]
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __len__(self) -> int:
        return len(self.records)

    def by_label(self, label: Label) -> list[SampleRecord]:
        return [r for r in self.records if r.label == label]

    def class_counts(self) -> dict[Label, int]:
        return {lab: len(self.by_label(lab)) for lab in Label}


def load_manifest(path: str | Path) -> Manifest:
    """Read a JSONL manifest; one ``{"id", "asm_path", "bin_path", "label"}``
    object per line.  Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records: list[SampleRecord] = []
    seen: set[str] = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedLineError(line_no, str(e)) from None
        if not isinstance(obj, dict) or "id" not in obj or "asm_path" not in obj or "label" not in obj:
            raise MalformedLineError(line_no, "expected object with id/asm_path/label")
        sid = obj["id"]
        if not isinstance(sid, str) or not sid:
            raise MalformedLineError(line_no, "id must be a non-empty string")
        if sid in seen:
            raise DuplicateIdError(sid)
        seen.add(sid)
        label = Label.parse(obj["label"])
        bin_path = obj.get("bin_path")
        records.append(
            SampleRecord(
                id=sid,
                asm_path=_resolve(base, obj["asm_path"], line_no),
                label=label,
                bin_path=_resolve(base, bin_path, line_no) if bin_path is not None else None,
            )
        )
    return Manifest(records=records)


def _resolve(base: Path, p, line_no: int) -> Path:
    if not isinstance(p, str) or not p:
        raise MalformedLineError(line_no, "path fields must be non-empty strings")
    q = Path(p)
    return q if q.is_absolute() else base / q


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a JSONL manifest with paths relative to its directory when possible."""
    path = Path(path)
    base = path.resolve().parent
    lines = []
    for r in manifest.records:
        lines.append(
            json.dumps(
                {
                    "id": r.id,
                    "asm_path": _relativize(r.asm_path, base),
                    "bin_path": _relativize(r.bin_path, base) if r.bin_path else None,
                    "label": r.label.name,
                },
                sort_keys=True,
            )
        )
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def _relativize(p: Path, base: Path) -> str:
    return Path(os.path.relpath(p.resolve(), base)).as_posix()


def stratified_split(
    m: Manifest, test_fraction: float, seed: int
) -> tuple[Manifest, Manifest]:
    """Split per class; test gets ``round(class_count * test_fraction)`` records.

    Uses Python's round (half-to-even).  Shuffling is per-class Fisher-Yates
    over a SplitMix64 stream derived from (seed, "split", class), so the
    partition is identical across runs and platforms.  Both outputs keep the
    original manifest order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    test_indices: set[int] = set()
    for label in Label:
        idxs = [i for i, r in enumerate(m.records) if r.label == label]
        if len(idxs) < 2:
            raise ClassTooSmallError(label.name, len(idxs), 2)
        rng = SplitMix64(derive(seed, "split", int(label)))
        shuffled = list(idxs)
        rng.shuffle(shuffled)
        n_test = round(len(idxs) * test_fraction)
        test_indices.update(shuffled[:n_test])
    train = [r for i, r in enumerate(m.records) if i not in test_indices]
    test = [r for i, r in enumerate(m.records) if i in test_indices]
    return Manifest(records=train), Manifest(records=test)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_benign: int = 200
    n_malware: int = 200
    vocab_pool: int = 200
    separability: float = 0.9
    seq_len_range: tuple[int, int] = (40, 90)
    seed: int = 0

    def __post_init__(self):
        if self.n_benign < 1 or self.n_malware < 1:
            raise ValueError("need at least one sample per class")
        if self.vocab_pool < 2:
            raise ValueError("vocab_pool must be >= 2")
        if not 0.0 <= self.separability <= 1.0:
            raise ValueError("separability must be in [0, 1]")
        lo, hi = self.seq_len_range
        if not (1 <= lo <= hi):
            raise ValueError("seq_len_range must satisfy 1 <= min <= max")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        if "seq_len_range" in obj:
            obj = dict(obj, seq_len_range=tuple(obj["seq_len_range"]))
        return cls(**obj)


# Import pools for the synthetic PE stubs, ordered generic -> benign-flavored
# -> malware-flavored so the separability partition lands sensibly.
DLL_POOL: list[tuple[str, list[str]]] = [
    ("msvcrt.dll", ["malloc", "free", "memcpy", "printf", "strlen", "fopen", "fclose"]),
    ("kernel32.dll", ["CreateFileW", "ReadFile", "WriteFile", "CloseHandle",
                      "GetModuleHandleW", "LoadLibraryW", "GetProcAddress", "ExitProcess"]),
    ("ole32.dll", ["CoInitialize", "CoCreateInstance", "CoUninitialize"]),
    ("comctl32.dll", ["InitCommonControlsEx", "ImageList_Create"]),
    ("shell32.dll", ["ShellExecuteW", "SHGetFolderPathW", "DragQueryFileW"]),
    ("user32.dll", ["MessageBoxW", "CreateWindowExW", "ShowWindow", "GetMessageW",
                    "DispatchMessageW", "SetWindowTextW"]),
    ("gdi32.dll", ["BitBlt", "CreateCompatibleDC", "SelectObject", "TextOutW"]),
    ("comdlg32.dll", ["GetOpenFileNameW", "GetSaveFileNameW"]),
    ("version.dll", ["GetFileVersionInfoW", "VerQueryValueW"]),
    ("advapi32.dll", ["RegOpenKeyExW", "RegSetValueExW", "RegQueryValueExW",
                      "OpenProcessToken", "AdjustTokenPrivileges", "CryptAcquireContextW"]),
    ("ws2_32.dll", ["WSAStartup", "socket", "connect", "send", "recv",
                    "closesocket", "gethostbyname"]),
    ("wininet.dll", ["InternetOpenW", "InternetOpenUrlW", "InternetReadFile",
                     "HttpSendRequestW"]),
    ("crypt32.dll", ["CryptProtectData", "CryptUnprotectData", "CertOpenStore"]),
    ("ntdll.dll", ["NtQueryInformationProcess", "RtlGetVersion", "NtSetInformationThread"]),
    ("psapi.dll", ["EnumProcesses", "GetModuleFileNameExW", "EnumProcessModules"]),
    ("urlmon.dll", ["URLDownloadToFileW", "URLOpenBlockingStreamW"]),
]


def _partition(pool: list, separability: float) -> tuple[list, list, list]:
    """Split a pool into (shared, benign-only, malware-only) blocks.

    A fraction ``separability`` of the pool (rounded) is exclusive, divided
    between the classes; at 1.0 nothing is shared.
    """
    n_excl = round(separability * len(pool))
    shared = pool[: len(pool) - n_excl]
    excl = pool[len(pool) - n_excl :]
    return shared, excl[: n_excl // 2], excl[n_excl // 2 :]


def _class_draw(rng: SplitMix64, shared: list, exclusive: list, threshold: int):
    """Draw from the exclusive block with probability ~separability."""
    use_excl = rng.next_u64() < threshold
    if use_excl and exclusive:
        return rng.choice(exclusive)
    if shared:
        return rng.choice(shared)
    return rng.choice(exclusive)


def generate_synthetic_corpus(cfg: SynthConfig, out_dir: str | Path) -> Manifest:
    """Write a synthetic corpus (asm + PE stub per sample) and its manifest.

    Output is a pure function of ``cfg`` at the byte level: every sample's
    stream is derived from (seed, class, index), and the manifest stores
    relative paths.  Returns the manifest with resolved paths.
    """
    out_dir = Path(out_dir)
    (out_dir / "asm").mkdir(parents=True, exist_ok=True)
    (out_dir / "bin").mkdir(parents=True, exist_ok=True)

    tokens = [f"op{i:03d}" for i in range(cfg.vocab_pool)]
    tok_shared, tok_ben, tok_mal = _partition(tokens, cfg.separability)
    dll_shared, dll_ben, dll_mal = _partition(DLL_POOL, cfg.separability)
    threshold = int(cfg.separability * (1 << 64))

    records: list[SampleRecord] = []
    for label, count in ((Label.benign, cfg.n_benign), (Label.malware, cfg.n_malware)):
        tok_excl = tok_ben if label == Label.benign else tok_mal
        dll_excl = dll_ben if label == Label.benign else dll_mal
        for i in range(count):
            rng = SplitMix64(derive(cfg.seed, "sample", int(label), i))
            sid = f"{'b' if label == Label.benign else 'm'}{i:04d}"
            asm_rel = Path("asm") / f"{sid}.asm"
            bin_rel = Path("bin") / f"{sid}.bin"
            asm_text = _synth_asm(rng, cfg, tok_shared, tok_excl, threshold)
            (out_dir / asm_rel).write_bytes(asm_text.encode("utf-8"))
            imports = _synth_imports(rng, dll_shared, dll_excl, threshold)
            (out_dir / bin_rel).write_bytes(build_pe_stub(imports))
            records.append(
                SampleRecord(
                    id=sid,
                    asm_path=out_dir / asm_rel,
                    label=label,
                    bin_path=out_dir / bin_rel,
                )
            )
    manifest = Manifest(records=records)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def _synth_asm(rng, cfg, shared, exclusive, threshold) -> str:
    lo, hi = cfg.seq_len_range
    n_tokens = rng.next_int(lo, hi)
    toks = [_class_draw(rng, shared, exclusive, threshold) for _ in range(n_tokens)]
    lines = []
    i = 0
    while i < len(toks):
        k = min(rng.next_int(1, 3), len(toks) - i)
        chunk = toks[i : i + k]
        i += k
        if k == 3:
            lines.append(f"{chunk[0]} {chunk[1]}, {chunk[2]}")
        else:
            lines.append(" ".join(chunk))
    return "\n".join(lines) + "\n"


def _synth_imports(rng, shared, exclusive, threshold) -> list[tuple[str, list[str]]]:
    candidates = shared + exclusive
    n_dlls = rng.next_int(2, min(4, len(candidates)))
    picked: list[tuple[str, list[str]]] = []
    names = set()
    for _ in range(64):
        if len(picked) >= n_dlls:
            break
        dll, funcs = _class_draw(rng, shared, exclusive, threshold)
        if dll in names:
            continue
        names.add(dll)
        idxs = list(range(len(funcs)))
        rng.shuffle(idxs)
        n_f = rng.next_int(1, min(4, len(funcs)))
        picked.append((dll, [funcs[j] for j in idxs[:n_f]]))
    return picked


# ---------------------------------------------------------------------------
# minimal PE stub builder
# ---------------------------------------------------------------------------

_SECTION_RVA = 0x1000
_SECTION_RAW = 0x200


def build_pe_stub(
    imports: list[tuple[str, list[str]]], pe32plus: bool = False
) -> bytes:
    """Build the smallest PE image whose import table lists ``imports``.

    One ``.idata`` section holds descriptors, a single shared lookup/address
    thunk array per DLL, hint/name entries and DLL name strings.  Function
    names of the form ``"#<n>"`` are emitted as ordinal imports.  The stub
    has a valid DOS header, PE signature, COFF and optional header (PE32 by
    default, PE32+ on request) but no code; it exists to exercise import
    parsing and string extraction.
    """
    thunk_size = 8 if pe32plus else 4
    ordinal_flag = 1 << (63 if pe32plus else 31)

    # lay out .idata: descriptors | thunk arrays | hint/names | dll names
    n = len(imports)
    desc_bytes = 20 * (n + 1)
    thunk_offsets = []  # section-relative
    cursor = desc_bytes
    for _, funcs in imports:
        thunk_offsets.append(cursor)
        cursor += thunk_size * (len(funcs) + 1)

    hint_offsets: dict[tuple[int, int], int] = {}
    blobs = bytearray()
    for i, (_, funcs) in enumerate(imports):
        for j, fn in enumerate(funcs):
            if fn.startswith("#"):
                continue
            if (cursor + len(blobs)) % 2:  # hint/name entries start on even offsets
                blobs += b"\x00"
            hint_offsets[(i, j)] = cursor + len(blobs)
            blobs += struct.pack("<H", 0) + fn.encode("ascii") + b"\x00"
    name_offsets = []
    for dll, _ in imports:
        name_offsets.append(cursor + len(blobs))
        blobs += dll.encode("ascii") + b"\x00"

    idata = bytearray(desc_bytes)
    for i, (dll, funcs) in enumerate(imports):
        struct.pack_into(
            "<IIIII",
            idata,
            20 * i,
            _SECTION_RVA + thunk_offsets[i],  # OriginalFirstThunk
            0,
            0,
            _SECTION_RVA + name_offsets[i],
            _SECTION_RVA + thunk_offsets[i],  # FirstThunk (shared array)
        )
    for i, (_, funcs) in enumerate(imports):
        arr = bytearray()
        for j, fn in enumerate(funcs):
            if fn.startswith("#"):
                entry = ordinal_flag | (int(fn[1:]) & 0xFFFF)
            else:
                entry = _SECTION_RVA + hint_offsets[(i, j)]
            arr += struct.pack("<Q" if pe32plus else "<I", entry)
        arr += b"\x00" * thunk_size
        idata += arr
    idata += blobs

    return _wrap_pe(bytes(idata), pe32plus)


def _wrap_pe(idata: bytes, pe32plus: bool) -> bytes:
    opt_size = 240 if pe32plus else 224
    image_size = _SECTION_RVA + _align(len(idata), 0x1000)

    dos = bytearray(64)
    dos[:2] = b"MZ"
    struct.pack_into("<I", dos, 0x3C, 64)

    coff = struct.pack(
        "<HHIIIHH",
        0x8664 if pe32plus else 0x14C,
        1,  # one section
        0, 0, 0,
        opt_size,
        0x0102 if not pe32plus else 0x0022,
    )

    opt = bytearray(opt_size)
    if pe32plus:
        struct.pack_into("<HBB", opt, 0, 0x20B, 14, 0)
        struct.pack_into("<Q", opt, 24, 0x140000000)  # ImageBase
        struct.pack_into("<II", opt, 32, 0x1000, _SECTION_RAW)  # alignments
        struct.pack_into("<II", opt, 56, image_size, _SECTION_RAW)
        struct.pack_into("<HH", opt, 68, 3, 0)  # console subsystem
        struct.pack_into("<I", opt, 108, 16)  # NumberOfRvaAndSizes
        dirs_off = 112
    else:
        struct.pack_into("<HBB", opt, 0, 0x10B, 14, 0)
        struct.pack_into("<I", opt, 28, 0x400000)  # ImageBase
        struct.pack_into("<II", opt, 32, 0x1000, _SECTION_RAW)
        struct.pack_into("<II", opt, 56, image_size, _SECTION_RAW)
        struct.pack_into("<HH", opt, 68, 3, 0)
        struct.pack_into("<I", opt, 92, 16)
        dirs_off = 96
    # import directory = index 1
    struct.pack_into("<II", opt, dirs_off + 8, _SECTION_RVA, len(idata))

    raw_size = _align(len(idata), _SECTION_RAW)
    section = struct.pack(
        "<8sIIIIIIHHI",
        b".idata\x00\x00",
        len(idata),
        _SECTION_RVA,
        raw_size,
        _SECTION_RAW,
        0, 0, 0, 0,
        0xC0000040,  # readable | writable | initialized data
    )

    headers = bytes(dos) + b"PE\x00\x00" + coff + bytes(opt) + section
    assert len(headers) <= _SECTION_RAW
    out = bytearray(_SECTION_RAW + raw_size)
    out[: len(headers)] = headers
    out[_SECTION_RAW : _SECTION_RAW + len(idata)] = idata
    return bytes(out)


def _align(n: int, a: int) -> int:
    return (n + a - 1) // a * a

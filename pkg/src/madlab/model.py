"""The detector: transformer encoder over token ids fused with static vectors.

Architecture (post-norm encoder):

    emb = E[ids] + sinusoidal positions          (T, d_model)
    for each layer:  h = LN1(h + MHA(h));  h = LN2(h + FFN(h))
    pooled = mean over non-PAD positions         (d_model,)
    z = [pooled | dll_std | str_std]             fusion vector
    logits = W2 relu(W1 z + b1) + b2             (2,)

Static count vectors are standardized per dimension with training-set
mean/std (sigma floored at 1e-8); the standardized coordinates are the space
in which input gradients and perturbations are expressed.  Training is plain
Adam over shuffled mini-batches, fully deterministic for a fixed seed.
"""

from __future__ import annotations

import functools
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import asmtok, nn
from .corpus import SampleRecord
from .errors import (
    BadMagicError,
    EmptyClassError,
    NonFiniteValueError,
    ShapeMismatchError,
    TruncatedError,
    VersionMismatchError,
)
from .rng import SplitMix64, derive
from .staticfeat import HashSpec, StaticFeatures, features_from_bytes

MODEL_MAGIC = b"AML1"
MODEL_FORMAT_VERSION = 1


@dataclass
class DetectorConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    ffn_dim: int = 128
    max_seq_len: int = 512
    d_dll: int = 256
    d_str: int = 256
    head_hidden: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeMismatchError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "ffn_dim",
                     "max_seq_len", "d_dll", "d_str", "head_hidden", "epochs",
                     "batch_size"):
            if getattr(self, name) < 1:
                raise ShapeMismatchError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, obj: dict) -> "DetectorConfig":
        return cls(**obj)


@dataclass
class FeatureStats:
    """Per-dimension standardization statistics for the static vectors."""

    mean_dll: np.ndarray
    std_dll: np.ndarray
    mean_str: np.ndarray
    std_str: np.ndarray

    @classmethod
    def identity(cls, d_dll: int, d_str: int) -> "FeatureStats":
        return cls(np.zeros(d_dll), np.ones(d_dll), np.zeros(d_str), np.ones(d_str))

    @classmethod
    def fit(cls, dll: np.ndarray, strv: np.ndarray) -> "FeatureStats":
        """Population mean/std per dimension, sigma floored at 1e-8."""
        return cls(
            dll.mean(axis=0), np.maximum(dll.std(axis=0), 1e-8),
            strv.mean(axis=0), np.maximum(strv.std(axis=0), 1e-8),
        )


@dataclass
class FusedInput:
    """The continuous input the network actually sees for one sample.

    ``emb`` already includes positional encodings; ``dll_vec``/``str_vec``
    are standardized.  This is the space attacks perturb.
    """

    emb: np.ndarray       # (max_seq_len, d_model)
    dll_vec: np.ndarray   # (d_dll,)
    str_vec: np.ndarray   # (d_str,)
    pad_mask: np.ndarray  # (max_seq_len,) bool, True = PAD

    def copy(self) -> "FusedInput":
        return FusedInput(self.emb.copy(), self.dll_vec.copy(),
                          self.str_vec.copy(), self.pad_mask.copy())


@dataclass
class InputGradient:
    """d loss / d FusedInput, in the same (standardized) coordinates."""

    emb: np.ndarray
    dll_vec: np.ndarray
    str_vec: np.ndarray


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    val_accuracies: list[float] | None = None


@dataclass
class DetectorModel:
    config: DetectorConfig
    params: dict[str, np.ndarray]
    stats: FeatureStats
    vocab_fingerprint: str
    reduction: dict | None = None  # {"dll": [...], "str": [...]} kept indices


def init_model(cfg: DetectorConfig, vocab_fingerprint: str = "") -> DetectorModel:
    """Seeded parameter initialization; stats start as identity until train()."""
    rng = np.random.default_rng(derive(cfg.seed, "init"))
    d, ffn_d = cfg.d_model, cfg.ffn_dim
    p: dict[str, np.ndarray] = {}
    p["embed.table"] = rng.normal(0.0, 0.02, size=(cfg.vocab_size, d))
    for i in range(cfg.n_layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"enc{i}.attn.{w}"] = rng.normal(0.0, d ** -0.5, size=(d, d))
        p[f"enc{i}.ln1.gamma"] = np.ones(d)
        p[f"enc{i}.ln1.beta"] = np.zeros(d)
        p[f"enc{i}.ffn.w1"] = rng.normal(0.0, (2.0 / d) ** 0.5, size=(d, ffn_d))
        p[f"enc{i}.ffn.b1"] = np.zeros(ffn_d)
        p[f"enc{i}.ffn.w2"] = rng.normal(0.0, (2.0 / ffn_d) ** 0.5, size=(ffn_d, d))
        p[f"enc{i}.ffn.b2"] = np.zeros(d)
        p[f"enc{i}.ln2.gamma"] = np.ones(d)
        p[f"enc{i}.ln2.beta"] = np.zeros(d)
    fuse_dim = d + cfg.d_dll + cfg.d_str
    p["head.w1"] = rng.normal(0.0, (2.0 / fuse_dim) ** 0.5, size=(fuse_dim, cfg.head_hidden))
    p["head.b1"] = np.zeros(cfg.head_hidden)
    p["head.w2"] = rng.normal(0.0, cfg.head_hidden ** -0.5, size=(cfg.head_hidden, 2))
    p["head.b2"] = np.zeros(2)
    return DetectorModel(
        config=cfg,
        params=p,
        stats=FeatureStats.identity(cfg.d_dll, cfg.d_str),
        vocab_fingerprint=vocab_fingerprint,
    )


@functools.lru_cache(maxsize=8)
def _positions(t: int, d: int) -> np.ndarray:
    """Sinusoidal positional encodings, (t, d)."""
    pos = np.arange(t)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, 2 * (i // 2) / d)
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


# ---------------------------------------------------------------------------
# dataset encoding
# ---------------------------------------------------------------------------

@dataclass
class EncodedSample:
    """One sample ready for the model: token ids plus raw static counts."""

    id: str
    ids: np.ndarray      # (max_seq_len,) int64
    true_len: int
    dll_raw: np.ndarray
    str_raw: np.ndarray
    label: int


def encode_records(
    records: list[SampleRecord],
    vocab: asmtok.Vocabulary,
    spec: HashSpec,
    max_seq_len: int,
    reduction: dict | None = None,
) -> list[EncodedSample]:
    """Tokenize/encode asm text and hash static features for each record.

    Records without a binary get all-zero static vectors.  ``reduction``
    (kept-index lists) projects the raw count vectors before anything else
    sees them, so reduced models never observe dropped dimensions.
    """
    out = []
    for r in records:
        seq = asmtok.encode(asmtok.tokenize(r.read_asm()), vocab, max_seq_len)
        data = r.read_bin()
        if data is None:
            sf = StaticFeatures(np.zeros(spec.dll_dims), np.zeros(spec.str_dims))
        else:
            sf = features_from_bytes(data, spec)
        dll_raw, str_raw = sf.dll_vec, sf.str_vec
        if reduction is not None:
            dll_raw = dll_raw[np.asarray(reduction["dll"], dtype=np.int64)]
            str_raw = str_raw[np.asarray(reduction["str"], dtype=np.int64)]
        out.append(EncodedSample(
            id=r.id,
            ids=np.asarray(seq.ids, dtype=np.int64),
            true_len=seq.true_len,
            dll_raw=dll_raw,
            str_raw=str_raw,
            label=int(r.label),
        ))
    return out


def embed(model: DetectorModel, seq: asmtok.TokenSequence, sf: StaticFeatures) -> FusedInput:
    """Build the continuous input: embeddings + positions, standardized statics."""
    cfg = model.config
    ids = np.asarray(seq.ids, dtype=np.int64)
    if ids.shape != (cfg.max_seq_len,):
        raise ShapeMismatchError(f"sequence length {ids.shape} vs {cfg.max_seq_len}")
    if ids.max(initial=0) >= cfg.vocab_size:
        raise ShapeMismatchError("token id outside model vocabulary")
    if sf.dll_vec.shape != (cfg.d_dll,) or sf.str_vec.shape != (cfg.d_str,):
        raise ShapeMismatchError("static feature dims do not match model config")
    st = model.stats
    emb = model.params["embed.table"][ids] + _positions(cfg.max_seq_len, cfg.d_model)
    return FusedInput(
        emb=emb,
        dll_vec=(sf.dll_vec - st.mean_dll) / st.std_dll,
        str_vec=(sf.str_vec - st.mean_str) / st.std_str,
        pad_mask=np.arange(cfg.max_seq_len) >= seq.true_len,
    )


def _embed_batch(model, samples: list[EncodedSample]):
    cfg, st = model.config, model.stats
    ids = np.stack([s.ids for s in samples])
    emb = model.params["embed.table"][ids] + _positions(cfg.max_seq_len, cfg.d_model)
    dll = (np.stack([s.dll_raw for s in samples]) - st.mean_dll) / st.std_dll
    strv = (np.stack([s.str_raw for s in samples]) - st.mean_str) / st.std_str
    pad = np.arange(cfg.max_seq_len)[None, :] >= np.array([[s.true_len] for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return ids, emb, dll, strv, pad, labels


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _forward_batch(model, emb, dll, strv, pad, want_cache: bool = False):
    """Run the encoder + fusion head on a batch of fused inputs.

    Returns (logits, cache); cache holds the per-layer inputs the backward
    pass needs (the nn kernels recompute everything else).
    """
    p, cfg = model.params, model.config
    h = emb
    layers = []
    for i in range(cfg.n_layers):
        a = nn.multi_head_attention(
            h, p[f"enc{i}.attn.wq"], p[f"enc{i}.attn.wk"],
            p[f"enc{i}.attn.wv"], p[f"enc{i}.attn.wo"], cfg.n_heads, pad)
        s1 = h + a
        h1 = nn.layer_norm(s1, p[f"enc{i}.ln1.gamma"], p[f"enc{i}.ln1.beta"])
        f = nn.ffn(h1, p[f"enc{i}.ffn.w1"], p[f"enc{i}.ffn.b1"],
                   p[f"enc{i}.ffn.w2"], p[f"enc{i}.ffn.b2"])
        s2 = h1 + f
        h2 = nn.layer_norm(s2, p[f"enc{i}.ln2.gamma"], p[f"enc{i}.ln2.beta"])
        if want_cache:
            layers.append((h, s1, h1, s2))
        h = h2
    pooled = nn.masked_mean_pool(h, pad)
    z = np.concatenate([pooled, dll, strv], axis=1)
    pre = z @ p["head.w1"] + p["head.b1"]
    hid = nn.relu(pre)
    logits = nn.ensure_finite(hid @ p["head.w2"] + p["head.b2"], "logits")
    cache = (layers, h, pooled, z, pre, hid) if want_cache else None
    return logits, cache


def _backward_batch(model, dll, strv, pad, dlogits, cache):
    """Gradients of the (already summed/averaged) loss wrt params and inputs."""
    p, cfg = model.params, model.config
    layers, h_final, pooled, z, pre, hid = cache
    grads: dict[str, np.ndarray] = {}

    grads["head.w2"] = hid.reshape(-1, hid.shape[-1]).T @ dlogits
    grads["head.b2"] = dlogits.sum(axis=0)
    dhid = dlogits @ p["head.w2"].T
    dpre = dhid * (pre > 0)
    grads["head.w1"] = z.T @ dpre
    grads["head.b1"] = dpre.sum(axis=0)
    dz = dpre @ p["head.w1"].T

    d = cfg.d_model
    dpooled = dz[:, :d]
    ddll = dz[:, d : d + cfg.d_dll]
    dstr = dz[:, d + cfg.d_dll :]
    dh = nn.masked_mean_pool_backward(h_final, pad, dpooled).dx

    for i in reversed(range(cfg.n_layers)):
        h0, s1, h1, s2 = layers[i]
        g_ln2 = nn.layer_norm_backward(
            s2, p[f"enc{i}.ln2.gamma"], p[f"enc{i}.ln2.beta"], dh)
        grads[f"enc{i}.ln2.gamma"] = g_ln2.params["gamma"]
        grads[f"enc{i}.ln2.beta"] = g_ln2.params["beta"]
        ds2 = g_ln2.dx
        g_ffn = nn.ffn_backward(
            h1, p[f"enc{i}.ffn.w1"], p[f"enc{i}.ffn.b1"],
            p[f"enc{i}.ffn.w2"], p[f"enc{i}.ffn.b2"], ds2)
        for name in ("w1", "b1", "w2", "b2"):
            grads[f"enc{i}.ffn.{name}"] = g_ffn.params[name]
        dh1 = ds2 + g_ffn.dx
        g_ln1 = nn.layer_norm_backward(
            s1, p[f"enc{i}.ln1.gamma"], p[f"enc{i}.ln1.beta"], dh1)
        grads[f"enc{i}.ln1.gamma"] = g_ln1.params["gamma"]
        grads[f"enc{i}.ln1.beta"] = g_ln1.params["beta"]
        ds1 = g_ln1.dx
        g_att = nn.multi_head_attention_backward(
            h0, p[f"enc{i}.attn.wq"], p[f"enc{i}.attn.wk"],
            p[f"enc{i}.attn.wv"], p[f"enc{i}.attn.wo"], cfg.n_heads, pad, ds1)
        for name in ("wq", "wk", "wv", "wo"):
            grads[f"enc{i}.attn.{name}"] = g_att.params[name]
        dh = ds1 + g_att.dx

    return grads, dh, ddll, dstr


def forward(model: DetectorModel, fi: FusedInput) -> tuple[np.ndarray, float]:
    """Logits and malware probability for one sample."""
    logits, _ = _forward_batch(
        model, fi.emb[None], fi.dll_vec[None], fi.str_vec[None], fi.pad_mask[None])
    probs = nn.softmax(logits[0])
    return logits[0], float(probs[1])


def predict_label(model: DetectorModel, fi: FusedInput) -> int:
    """Decision rule used everywhere: malware iff p_malware >= 0.5."""
    return int(forward(model, fi)[1] >= 0.5)


def loss_and_input_grad(
    model: DetectorModel, fi: FusedInput, label: int
) -> tuple[float, InputGradient]:
    """Cross-entropy loss and its exact gradient wrt the fused input."""
    if label not in (0, 1):
        raise ShapeMismatchError(f"label must be 0 or 1, got {label}")
    logits, cache = _forward_batch(
        model, fi.emb[None], fi.dll_vec[None], fi.str_vec[None], fi.pad_mask[None],
        want_cache=True)
    loss = nn.cross_entropy(logits, np.array([label]))
    dlogits = nn.cross_entropy_backward(logits, np.array([label]))
    _, demb, ddll, dstr = _backward_batch(
        model, fi.dll_vec[None], fi.str_vec[None], fi.pad_mask[None], dlogits, cache)
    return loss, InputGradient(emb=demb[0], dll_vec=ddll[0], str_vec=dstr[0])


def forward_dataset(
    model: DetectorModel, dataset: list[EncodedSample], batch_size: int = 64
) -> np.ndarray:
    """Malware probabilities for every sample, order-preserving."""
    probs = np.empty(len(dataset))
    for lo in range(0, len(dataset), batch_size):
        chunk = dataset[lo : lo + batch_size]
        _, emb, dll, strv, pad, _ = _embed_batch(model, chunk)
        logits, _ = _forward_batch(model, emb, dll, strv, pad)
        probs[lo : lo + len(chunk)] = nn.softmax(logits, axis=-1)[:, 1]
    return probs


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: DetectorConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        cfg = self.cfg
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for k in params:  # insertion order: deterministic update sequence
            g = grads[k]
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            params[k] -= cfg.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + cfg.adam_eps)


def train(
    model: DetectorModel,
    train_set: list[EncodedSample],
    adv_hook=None,
) -> tuple[DetectorModel, TrainHistory]:
    """Train in place with Adam; deterministic for a fixed config seed.

    Standardization stats are fit on ``train_set`` before the first step.
    ``adv_hook(model, emb, dll, strv, pad, labels) -> (emb, dll, strv)`` lets
    the defense swap part of each batch for adversarial counterparts; None
    trains on clean batches only.
    """
    cfg = model.config
    labels = {s.label for s in train_set}
    for lab in (0, 1):
        if lab not in labels:
            raise EmptyClassError("benign" if lab == 0 else "malware")

    model.stats = FeatureStats.fit(
        np.stack([s.dll_raw for s in train_set]),
        np.stack([s.str_raw for s in train_set]),
    )
    opt = _Adam(model.params, cfg)
    history = TrainHistory()
    order = list(range(len(train_set)))
    for epoch in range(cfg.epochs):
        SplitMix64(derive(cfg.seed, "shuffle", epoch)).shuffle(order)
        epoch_loss, n_correct = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[lo : lo + cfg.batch_size]]
            ids, emb, dll, strv, pad, y = _embed_batch(model, batch)
            if adv_hook is not None:
                emb, dll, strv = adv_hook(model, emb, dll, strv, pad, y)
            logits, cache = _forward_batch(model, emb, dll, strv, pad, want_cache=True)
            loss = nn.cross_entropy(logits, y)
            dlogits = nn.cross_entropy_backward(logits, y)
            grads, demb, _, _ = _backward_batch(model, dll, strv, pad, dlogits, cache)
            grads["embed.table"] = nn.embedding_backward(
                ids, demb, cfg.vocab_size).params["table"]
            opt.step(model.params, grads)
            epoch_loss += loss * len(batch)
            n_correct += int(((nn.softmax(logits, axis=-1)[:, 1] >= 0.5) == y).sum())
        for k, v in model.params.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteValueError(f"parameter {k} after epoch {epoch}")
        history.losses.append(epoch_loss / len(train_set))
        history.accuracies.append(n_correct / len(train_set))
    return model, history


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _all_arrays(model: DetectorModel) -> dict[str, np.ndarray]:
    arrays = dict(model.params)
    arrays["stats.mean_dll"] = model.stats.mean_dll
    arrays["stats.std_dll"] = model.stats.std_dll
    arrays["stats.mean_str"] = model.stats.mean_str
    arrays["stats.std_str"] = model.stats.std_str
    return arrays


def save(model: DetectorModel, path) -> None:
    """Write magic, JSON header, then raw little-endian float64 arrays."""
    arrays = _all_arrays(model)
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocab_fingerprint": model.vocab_fingerprint,
        "reduction": model.reduction,
        "manifest": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load(path) -> DetectorModel:
    data = open(path, "rb").read()
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise BadMagicError(data[:4])
    if len(data) < 8:
        raise TruncatedError(len(data), "header length")
    (hlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + hlen:
        raise TruncatedError(len(data), "header")
    header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(header.get("format_version"), MODEL_FORMAT_VERSION)
    cfg = DetectorConfig.from_dict(header["config"])

    off = 8 + hlen
    arrays: dict[str, np.ndarray] = {}
    for item in header["manifest"]:
        shape = tuple(item["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(data):
            raise TruncatedError(off, f"array {item['name']}")
        arrays[item["name"]] = np.frombuffer(
            data[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
    if off != len(data):
        raise TruncatedError(off, "trailing bytes after arrays")

    stats = FeatureStats(
        mean_dll=arrays.pop("stats.mean_dll"),
        std_dll=arrays.pop("stats.std_dll"),
        mean_str=arrays.pop("stats.mean_str"),
        std_str=arrays.pop("stats.std_str"),
    )
    model = DetectorModel(
        config=cfg,
        params=arrays,
        stats=stats,
        vocab_fingerprint=header.get("vocab_fingerprint", ""),
        reduction=header.get("reduction"),
    )
    _check_shapes(model)
    return model


def _param_shapes(cfg: DetectorConfig) -> dict[str, tuple]:
    d, ffn_d = cfg.d_model, cfg.ffn_dim
    shapes: dict[str, tuple] = {"embed.table": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"enc{i}.attn.{w}"] = (d, d)
        shapes[f"enc{i}.ln1.gamma"] = shapes[f"enc{i}.ln1.beta"] = (d,)
        shapes[f"enc{i}.ffn.w1"] = (d, ffn_d)
        shapes[f"enc{i}.ffn.b1"] = (ffn_d,)
        shapes[f"enc{i}.ffn.w2"] = (ffn_d, d)
        shapes[f"enc{i}.ffn.b2"] = (d,)
        shapes[f"enc{i}.ln2.gamma"] = shapes[f"enc{i}.ln2.beta"] = (d,)
    fuse_dim = d + cfg.d_dll + cfg.d_str
    shapes["head.w1"] = (fuse_dim, cfg.head_hidden)
    shapes["head.b1"] = (cfg.head_hidden,)
    shapes["head.w2"] = (cfg.head_hidden, 2)
    shapes["head.b2"] = (2,)
    return shapes


def _check_shapes(model: DetectorModel) -> None:
    expected = _param_shapes(model.config)
    got = {k: v.shape for k, v in model.params.items()}
    if expected != got:
        raise ShapeMismatchError("model file arrays do not match its config")
    st, cfg = model.stats, model.config
    if st.mean_dll.shape != (cfg.d_dll,) or st.mean_str.shape != (cfg.d_str,):
        raise ShapeMismatchError("standardization stats do not match config dims")

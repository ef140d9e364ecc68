"""Defenses: adversarial training and static-feature-space reduction.

Adversarial training regenerates perturbed counterparts against the current
model every epoch (never precomputed) and swaps them into a fraction of each
batch.  Feature reduction scores static dimensions by the mutual information
between feature presence and the class label and keeps the top k; embedding
dimensions have no removable feature identity, so reduction applies to the
static vectors only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import AttackConfig, attack_dataset, fgsm_batch
from .errors import BadKError, EmptyClassError, IncompatibleModelsError
from .metrics import evaluate
from .model import (
    DetectorConfig,
    DetectorModel,
    EncodedSample,
    TrainHistory,
    encode_records,
    init_model,
    train,
)
from .staticfeat import HashSpec


@dataclass
class AdvTrainConfig:
    base: DetectorConfig
    attack: AttackConfig
    mix_ratio: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0, 1]")


def adversarial_train(
    train_set: list[EncodedSample],
    cfg: AdvTrainConfig,
    vocab_fingerprint: str = "",
) -> tuple[DetectorModel, TrainHistory]:
    """Train with a fraction of each batch replaced by adversarial inputs.

    Replacement count per batch is round(mix_ratio * batch_len); the replaced
    rows are the leading rows of the (seed-shuffled) batch, perturbed
    untargeted against their true labels at the configured epsilon.  With
    mix_ratio 0 no perturbation code runs at all, so the parameter
    trajectory is bitwise identical to plain train() with the same seed.
    """
    model = init_model(cfg.base, vocab_fingerprint)
    if cfg.mix_ratio == 0.0:
        return train(model, train_set)

    def hook(m, emb, dll, strv, pad, ys):
        k = round(cfg.mix_ratio * len(ys))
        if k == 0:
            return emb, dll, strv
        e2, d2, s2 = fgsm_batch(
            m, emb[:k], dll[:k], strv[:k], pad[:k], ys[:k], cfg.attack)
        return (
            np.concatenate([e2, emb[k:]]),
            np.concatenate([d2, dll[k:]]),
            np.concatenate([s2, strv[k:]]),
        )

    return train(model, train_set, adv_hook=hook)


# ---------------------------------------------------------------------------
# feature-space reduction
# ---------------------------------------------------------------------------

@dataclass
class FeatureReductionMap:
    """Kept static dimensions (sorted) plus the scores that chose them."""

    kept_dll: list[int]
    kept_str: list[int]
    scores_dll: np.ndarray
    scores_str: np.ndarray

    def as_model_reduction(self) -> dict:
        """Projection metadata stored in model files; src_* are the
        pre-reduction extraction widths the indices refer to."""
        return {
            "dll": list(self.kept_dll),
            "str": list(self.kept_str),
            "src_dll": int(self.scores_dll.size),
            "src_str": int(self.scores_str.size),
        }

    def save(self, path: str | Path) -> None:
        payload = {
            "kept_dll": list(self.kept_dll),
            "kept_str": list(self.kept_str),
            "scores_dll": [float(s) for s in self.scores_dll],
            "scores_str": [float(s) for s in self.scores_str],
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureReductionMap":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            kept_dll=list(obj["kept_dll"]),
            kept_str=list(obj["kept_str"]),
            scores_dll=np.asarray(obj["scores_dll"], dtype=np.float64),
            scores_str=np.asarray(obj["scores_str"], dtype=np.float64),
        )


def presence_mi_bits(counts: np.ndarray) -> np.ndarray:
    """Mutual information (bits) of 2x2 presence/class tables, smoothed.

    ``counts`` has shape (D, 2, 2): counts[d, b, y] is the number of samples
    with presence b and class y.  Add-one smoothing is applied before the
    probability table; a feature that is constant across all samples scores
    exactly 0 (smoothing would otherwise leak the class prior into the
    score of an uninformative dimension).
    """
    counts = np.asarray(counts, dtype=np.float64)
    smoothed = counts + 1.0
    p = smoothed / smoothed.sum(axis=(1, 2), keepdims=True)
    pb = p.sum(axis=2, keepdims=True)
    py = p.sum(axis=1, keepdims=True)
    mi = (p * np.log2(p / (pb * py))).sum(axis=(1, 2))
    constant = (counts.sum(axis=2) == 0).any(axis=1)
    return np.where(constant, 0.0, mi)


def _presence_counts(presence: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(D, 2, 2) contingency counts from a (N, D) presence matrix."""
    pos = labels == 1
    n11 = presence[pos].sum(axis=0)
    n10 = presence[~pos].sum(axis=0)
    a11 = pos.sum() - n11  # absent, malware
    a10 = (~pos).sum() - n10
    return np.stack(
        [np.stack([a10, a11], axis=1), np.stack([n10, n11], axis=1)], axis=1
    )


def score_features(train_set: list[EncodedSample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension MI scores for the dll and string vectors (in bits)."""
    labels = np.array([s.label for s in train_set], dtype=np.int64)
    for lab, name in ((0, "benign"), (1, "malware")):
        if not (labels == lab).any():
            raise EmptyClassError(name)
    dll = np.stack([s.dll_raw > 0 for s in train_set]).astype(np.int64)
    strv = np.stack([s.str_raw > 0 for s in train_set]).astype(np.int64)
    return (
        presence_mi_bits(_presence_counts(dll, labels)),
        presence_mi_bits(_presence_counts(strv, labels)),
    )


def _top_k(scores: np.ndarray, k: int) -> list[int]:
    if not 1 <= k <= scores.size:
        raise BadKError(k, scores.size)
    order = np.argsort(-scores, kind="stable")  # ties keep lower index first
    return sorted(int(i) for i in order[:k])


def reduce_features(
    train_set: list[EncodedSample], k_dll: int, k_str: int
) -> FeatureReductionMap:
    """Keep the top-k scoring dimensions per vector (ties: lower index wins)."""
    scores_dll, scores_str = score_features(train_set)
    return FeatureReductionMap(
        kept_dll=_top_k(scores_dll, k_dll),
        kept_str=_top_k(scores_str, k_str),
        scores_dll=scores_dll,
        scores_str=scores_str,
    )


def apply_reduction(sample: EncodedSample, m: FeatureReductionMap) -> EncodedSample:
    """Project one encoded sample onto the kept dimensions."""
    return EncodedSample(
        id=sample.id,
        ids=sample.ids,
        true_len=sample.true_len,
        dll_raw=sample.dll_raw[np.asarray(m.kept_dll, dtype=np.int64)],
        str_raw=sample.str_raw[np.asarray(m.kept_str, dtype=np.int64)],
        label=sample.label,
    )


# ---------------------------------------------------------------------------
# side-by-side comparison
# ---------------------------------------------------------------------------

@dataclass
class DefenseComparison:
    rows: list[dict]
    epsilon: float
    mode: str

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "mode": self.mode, "rows": self.rows}

    def render(self) -> str:
        cols = ["model", "n", "clean_acc", "misclass_rate", "attack_success"]
        lines = ["  ".join(f"{c:>14}" for c in cols)]
        for r in self.rows:
            lines.append("  ".join([
                f"{r['name']:>14}",
                f"{r['n']:>14}",
                f"{r['clean_accuracy']:>14.4f}",
                f"{r['misclassification_rate']:>14.4f}",
                f"{r['attack_success_rate']:>14.4f}",
            ]))
        return "\n".join(lines)


def evaluate_defense(
    baseline: DetectorModel,
    defended: DetectorModel,
    records,
    vocab,
    attack_cfg: AttackConfig,
) -> DefenseComparison:
    """Clean accuracy and attack metrics for two models, side by side.

    The models must share a vocabulary; a defended model trained on reduced
    features carries its reduction map in the model file, and the test set
    is re-projected through it here so both models see their own space.
    """
    if baseline.vocab_fingerprint != defended.vocab_fingerprint:
        raise IncompatibleModelsError("vocabulary fingerprints differ")
    base_cfg = baseline.config
    rows = []
    for name, mdl in (("baseline", baseline), ("defended", defended)):
        if mdl.reduction is None:
            if (mdl.config.d_dll, mdl.config.d_str) != (base_cfg.d_dll, base_cfg.d_str):
                raise IncompatibleModelsError("static dims differ without a reduction map")
            spec = HashSpec(dll_dims=mdl.config.d_dll, str_dims=mdl.config.d_str)
            dataset = encode_records(records, vocab, spec, mdl.config.max_seq_len)
        else:
            spec = HashSpec(
                dll_dims=mdl.reduction["src_dll"], str_dims=mdl.reduction["src_str"])
            dataset = encode_records(
                records, vocab, spec, mdl.config.max_seq_len, reduction=mdl.reduction)
        clean = evaluate(mdl, dataset)
        attacked = attack_dataset(mdl, dataset, attack_cfg, keep_per_sample=False)
        rows.append({
            "name": name,
            "n": clean.n,
            "clean_accuracy": clean.accuracy,
            "misclassification_rate": attacked.misclassification_rate,
            "misclassification_rate_malware": attacked.misclassification_rate_malware,
            "attack_success_rate": attacked.attack_success_rate,
            "n_flipped_among_correct": attacked.n_flipped_among_correct,
        })
    return DefenseComparison(rows=rows, epsilon=attack_cfg.epsilon, mode=attack_cfg.mode)

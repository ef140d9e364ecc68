"""Single-step sign-gradient evasion attack against the trained detector.

The perturbation lives on the continuous fused input (embedding matrix plus
standardized static vectors) — the only space where the input gradient
exists.  Discrete token ids are never altered, and nothing here claims the
perturbed point corresponds to a working executable: this is a
feature-space attack, and reports label it as such.

Untargeted step:  X* = X + eps * sign(d loss(X, y_true) / dX)
Targeted step:    X* = X -/+ eps * sign(d loss(X, y_target) / dX)
                  ("descend" uses minus and actually moves toward the
                  target; "ascend" keeps the literal plus sign of the
                  historical formulation, which moves away from it.)

sign(0) = 0, so flat coordinates stay untouched and eps = 0 is an exact
identity.  The applied step is recorded per coordinate in ``delta``; it is
exactly +-eps or 0 by construction.  ``perturbed - original`` recovers it
only up to one float ulp, which is why the exactness contract rides on
``delta`` rather than on a subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDatasetError
from .model import (
    DetectorModel,
    EncodedSample,
    FusedInput,
    _backward_batch,
    _embed_batch,
    _forward_batch,
    forward,
    loss_and_input_grad,
)
from . import nn

MODES = ("untargeted", "targeted")
DIRECTIONS = ("descend", "ascend")
DIM_MASKS = ("all", "emb_only", "static_only")


@dataclass
class AttackConfig:
    """Perturbation magnitude and flavor.

    epsilon is in standardized-input units.  ``dim_mask`` restricts which
    block of the fused input may move; everything else stays bitwise
    identical.
    """

    epsilon: float
    mode: str = "untargeted"
    target_label: int | None = None
    direction: str = "descend"
    dim_mask: str = "all"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.dim_mask not in DIM_MASKS:
            raise ValueError(f"dim_mask must be one of {DIM_MASKS}")
        if self.mode == "targeted" and self.target_label not in (0, 1):
            raise ValueError("targeted mode needs target_label in {0, 1}")

    def step_sign(self) -> float:
        """+1 ascends the loss used for the gradient, -1 descends it."""
        if self.mode == "untargeted":
            return 1.0
        return -1.0 if self.direction == "descend" else 1.0


@dataclass
class AdversarialExample:
    original: FusedInput
    perturbed: FusedInput
    delta: FusedInput  # applied step per coordinate: exactly +-eps or 0
    pred_before: int
    pred_after: int
    p_before: float
    p_after: float
    loss_before: float
    linf: float


@dataclass
class AttackReport:
    """Dataset-level attack outcome.

    Because the base population of a "misclassification rate" is ambiguous,
    all three readings are reported: over all samples, over true-malware
    samples only, and (as attack_success_rate) over originally-correct
    samples whose prediction flipped.
    """

    epsilon: float
    mode: str
    dim_mask: str
    n_samples: int
    n_correct_before: int
    n_misclassified_after: int
    misclassification_rate: float
    n_malware: int
    n_malware_misclassified_after: int
    misclassification_rate_malware: float
    n_flipped_among_correct: int
    attack_success_rate: float
    clean_error_rate: float
    per_sample: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "attack_space": "feature-space (fused continuous input)",
            "epsilon": self.epsilon,
            "mode": self.mode,
            "dim_mask": self.dim_mask,
            "n_samples": self.n_samples,
            "n_correct_before": self.n_correct_before,
            "n_misclassified_after": self.n_misclassified_after,
            "misclassification_rate": self.misclassification_rate,
            "n_malware": self.n_malware,
            "n_malware_misclassified_after": self.n_malware_misclassified_after,
            "misclassification_rate_malware": self.misclassification_rate_malware,
            "n_flipped_among_correct": self.n_flipped_among_correct,
            "attack_success_rate": self.attack_success_rate,
            "clean_error_rate": self.clean_error_rate,
            "per_sample": self.per_sample,
        }


def _masked_step(cfg: AttackConfig, g_emb, g_dll, g_str):
    """eps * sign(gradient) with the dim_mask applied; exact zeros elsewhere."""
    s = cfg.step_sign() * cfg.epsilon
    want_emb = cfg.dim_mask in ("all", "emb_only")
    want_static = cfg.dim_mask in ("all", "static_only")
    d_emb = s * np.sign(g_emb) if want_emb else np.zeros_like(g_emb)
    d_dll = s * np.sign(g_dll) if want_static else np.zeros_like(g_dll)
    d_str = s * np.sign(g_str) if want_static else np.zeros_like(g_str)
    return d_emb, d_dll, d_str


def _apply(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    # keep zero-step coordinates bitwise identical (x + 0.0 may flip -0.0)
    return np.where(d != 0, x + d, x)


def fgsm(
    model: DetectorModel,
    fi: FusedInput,
    label_or_target: int,
    cfg: AttackConfig,
) -> AdversarialExample:
    """Craft one adversarial counterpart of ``fi``.

    For untargeted mode pass the true label; for targeted mode pass (or
    configure) the target label.  Token ids are untouched by construction;
    the continuous blocks move by exactly +-eps where the loss gradient is
    nonzero and the dim_mask allows.
    """
    y = int(label_or_target)
    loss, g = loss_and_input_grad(model, fi, y)
    d_emb, d_dll, d_str = _masked_step(cfg, g.emb, g.dll_vec, g.str_vec)
    perturbed = FusedInput(
        emb=_apply(fi.emb, d_emb),
        dll_vec=_apply(fi.dll_vec, d_dll),
        str_vec=_apply(fi.str_vec, d_str),
        pad_mask=fi.pad_mask.copy(),
    )
    _, p_before = forward(model, fi)
    _, p_after = forward(model, perturbed)
    linf = max(
        float(np.abs(perturbed.emb - fi.emb).max()),
        float(np.abs(perturbed.dll_vec - fi.dll_vec).max()),
        float(np.abs(perturbed.str_vec - fi.str_vec).max()),
    )
    return AdversarialExample(
        original=fi,
        perturbed=perturbed,
        delta=FusedInput(d_emb, d_dll, d_str, fi.pad_mask.copy()),
        pred_before=int(p_before >= 0.5),
        pred_after=int(p_after >= 0.5),
        p_before=p_before,
        p_after=p_after,
        loss_before=loss,
        linf=linf,
    )


def fgsm_batch(model, emb, dll, strv, pad, ys, cfg: AttackConfig):
    """Batched perturbation step on embedded inputs.

    One forward/backward serves the whole batch: the mean-loss scaling is
    positive, so per-sample gradient signs are unchanged.
    """
    logits, cache = _forward_batch(model, emb, dll, strv, pad, want_cache=True)
    dlogits = nn.cross_entropy_backward(logits, ys)
    _, demb, ddll, dstr = _backward_batch(model, dll, strv, pad, dlogits, cache)
    d_emb, d_dll, d_str = _masked_step(cfg, demb, ddll, dstr)
    return _apply(emb, d_emb), _apply(dll, d_dll), _apply(strv, d_str)


def attack_dataset(
    model: DetectorModel,
    dataset: list[EncodedSample],
    cfg: AttackConfig,
    batch_size: int = 64,
    keep_per_sample: bool = True,
) -> AttackReport:
    """Attack every sample and tally outcomes.

    Untargeted mode differentiates against each sample's true label;
    targeted mode against ``cfg.target_label`` (benign for evasion).
    """
    if not dataset:
        raise EmptyDatasetError()
    per_sample = []
    pred_before = np.empty(len(dataset), dtype=np.int64)
    pred_after = np.empty(len(dataset), dtype=np.int64)
    labels = np.array([s.label for s in dataset], dtype=np.int64)

    for lo in range(0, len(dataset), batch_size):
        chunk = dataset[lo : lo + batch_size]
        _, emb, dll, strv, pad, y_true = _embed_batch(model, chunk)
        y_attack = (
            y_true if cfg.mode == "untargeted"
            else np.full_like(y_true, cfg.target_label)
        )
        logits, _ = _forward_batch(model, emb, dll, strv, pad)
        p0 = nn.softmax(logits, axis=-1)[:, 1]
        emb2, dll2, str2 = fgsm_batch(model, emb, dll, strv, pad, y_attack, cfg)
        logits2, _ = _forward_batch(model, emb2, dll2, str2, pad)
        p1 = nn.softmax(logits2, axis=-1)[:, 1]
        pred_before[lo : lo + len(chunk)] = (p0 >= 0.5).astype(np.int64)
        pred_after[lo : lo + len(chunk)] = (p1 >= 0.5).astype(np.int64)
        if keep_per_sample:
            for j, s in enumerate(chunk):
                per_sample.append({
                    "id": s.id,
                    "label": int(s.label),
                    "pred_before": int(p0[j] >= 0.5),
                    "pred_after": int(p1[j] >= 0.5),
                    "p_before": float(p0[j]),
                    "p_after": float(p1[j]),
                })

    n = len(dataset)
    correct_before = pred_before == labels
    wrong_after = pred_after != labels
    malware = labels == 1
    flipped = correct_before & wrong_after
    n_correct = int(correct_before.sum())
    return AttackReport(
        epsilon=cfg.epsilon,
        mode=cfg.mode,
        dim_mask=cfg.dim_mask,
        n_samples=n,
        n_correct_before=n_correct,
        n_misclassified_after=int(wrong_after.sum()),
        misclassification_rate=float(wrong_after.sum() / n),
        n_malware=int(malware.sum()),
        n_malware_misclassified_after=int((wrong_after & malware).sum()),
        misclassification_rate_malware=(
            float((wrong_after & malware).sum() / malware.sum()) if malware.any() else 0.0
        ),
        n_flipped_among_correct=int(flipped.sum()),
        attack_success_rate=(float(flipped.sum() / n_correct) if n_correct else 0.0),
        clean_error_rate=float((~correct_before).sum() / n),
        per_sample=per_sample,
    )

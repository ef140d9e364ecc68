"""Batch command-line driver for the whole pipeline.

Every subcommand reads earlier artifacts, writes its outputs under ``--out``
and echoes its fully resolved configuration (seed included) next to them,
so a run can be reproduced from the output directory alone.  Exit codes:
0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import asmtok, attack, corpus, defense, metrics, model
from .errors import (
    DataError,
    MissingArtifactError,
    NumericError,
)
from .staticfeat import HashSpec, StaticFeatures, features_from_bytes

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _echo_config(out: Path, command: str, cfg: dict) -> None:
    _write_json(out / f"{command}_config.json", cfg)


def _resolve_config(args, defaults: dict) -> dict:
    """defaults <- config file <- explicit CLI flags; unknown keys rejected."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise MissingArtifactError("config file", path)
        file_cfg = json.loads(path.read_text(encoding="utf-8"))
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _need(path_str: str | None, what: str) -> Path:
    if not path_str:
        raise MissingArtifactError(what, "(not given)")
    path = Path(path_str)
    if not path.is_file():
        raise MissingArtifactError(what, path)
    return path


def _load_vocab(args) -> asmtok.Vocabulary:
    return asmtok.Vocabulary.load(_need(args.vocab, "vocabulary file"))


def _check_fingerprint(mdl: model.DetectorModel, vocab: asmtok.Vocabulary) -> None:
    if mdl.vocab_fingerprint and mdl.vocab_fingerprint != vocab.fingerprint():
        raise DataError("vocabulary file does not match the model's fingerprint")


def _dataset_for_model(mdl: model.DetectorModel, records, vocab):
    cfg = mdl.config
    if mdl.reduction is None:
        spec = HashSpec(dll_dims=cfg.d_dll, str_dims=cfg.d_str)
        return model.encode_records(records, vocab, spec, cfg.max_seq_len)
    spec = HashSpec(dll_dims=mdl.reduction["src_dll"], str_dims=mdl.reduction["src_str"])
    return model.encode_records(records, vocab, spec, cfg.max_seq_len,
                                reduction=mdl.reduction)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _resolve_config(args, {
        "n_benign": 200, "n_malware": 200, "vocab_pool": 200,
        "separability": 0.9, "seq_len_min": 40, "seq_len_max": 90, "seed": 0,
    })
    synth = corpus.SynthConfig(
        n_benign=cfg["n_benign"], n_malware=cfg["n_malware"],
        vocab_pool=cfg["vocab_pool"], separability=cfg["separability"],
        seq_len_range=(cfg["seq_len_min"], cfg["seq_len_max"]), seed=cfg["seed"],
    )
    manifest = corpus.generate_synthetic_corpus(synth, out)
    _echo_config(out, "synth", cfg)
    print(f"wrote {len(manifest)} samples under {out} (manifest.jsonl)")
    return EXIT_OK


def cmd_extract(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _resolve_config(args, {"dll_dims": 256, "str_dims": 256})
    manifest = corpus.load_manifest(_need(args.manifest, "manifest"))
    spec = HashSpec(dll_dims=cfg["dll_dims"], str_dims=cfg["str_dims"])
    lines = []
    for r in manifest.records:
        data = r.read_bin()
        if data is None:
            sf = StaticFeatures(np.zeros(spec.dll_dims), np.zeros(spec.str_dims))
        else:
            sf = features_from_bytes(data, spec)
        lines.append(json.dumps({
            "id": r.id,
            "dll_vec": [float(x) for x in sf.dll_vec],
            "str_vec": [float(x) for x in sf.str_vec],
        }, sort_keys=True))
    (out / "features.jsonl").write_bytes(("\n".join(lines) + "\n").encode())
    _echo_config(out, "extract", cfg)
    print(f"wrote features for {len(manifest)} samples to {out / 'features.jsonl'}")
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _resolve_config(args, {"max_size": 4096})
    manifest = corpus.load_manifest(_need(args.manifest, "manifest"))
    vocab = asmtok.build_vocab(
        (asmtok.tokenize(r.read_asm()) for r in manifest.records),
        max_size=cfg["max_size"],
    )
    vocab.save(out / "vocab.json")
    _echo_config(out, "build_vocab", cfg)
    print(f"vocabulary of {len(vocab)} tokens -> {out / 'vocab.json'}")
    return EXIT_OK


_TRAIN_DEFAULTS = {
    "d_model": 64, "n_heads": 2, "n_layers": 2, "ffn_dim": 128,
    "max_seq_len": 512, "d_dll": 256, "d_str": 256, "head_hidden": 64,
    "lr": 1e-3, "epochs": 5, "batch_size": 32, "seed": 0,
    "test_fraction": 0.2,
}


def _detector_config(cfg: dict, vocab_size: int, d_dll=None, d_str=None):
    return model.DetectorConfig(
        vocab_size=vocab_size,
        d_model=cfg["d_model"], n_heads=cfg["n_heads"], n_layers=cfg["n_layers"],
        ffn_dim=cfg["ffn_dim"], max_seq_len=cfg["max_seq_len"],
        d_dll=d_dll if d_dll is not None else cfg["d_dll"],
        d_str=d_str if d_str is not None else cfg["d_str"],
        head_hidden=cfg["head_hidden"], lr=cfg["lr"], epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], seed=cfg["seed"],
    )


def _split_and_encode(args, cfg: dict, out: Path, vocab):
    """Shared by train and defend adv-train: split, persist, encode."""
    manifest = corpus.load_manifest(_need(args.manifest, "manifest"))
    train_man, test_man = corpus.stratified_split(
        manifest, cfg["test_fraction"], cfg["seed"])
    corpus.save_manifest(train_man, out / "train_manifest.jsonl")
    corpus.save_manifest(test_man, out / "test_manifest.jsonl")

    reduction = None
    if getattr(args, "reduction_map", None):
        rmap = defense.FeatureReductionMap.load(
            _need(args.reduction_map, "reduction map"))
        reduction = rmap.as_model_reduction()
        spec = HashSpec(dll_dims=reduction["src_dll"], str_dims=reduction["src_str"])
        dcfg = _detector_config(cfg, len(vocab),
                                d_dll=len(reduction["dll"]),
                                d_str=len(reduction["str"]))
    else:
        spec = HashSpec(dll_dims=cfg["d_dll"], str_dims=cfg["d_str"])
        dcfg = _detector_config(cfg, len(vocab))
    train_set = model.encode_records(
        train_man.records, vocab, spec, dcfg.max_seq_len, reduction=reduction)
    return train_man, test_man, train_set, dcfg, reduction


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _resolve_config(args, _TRAIN_DEFAULTS)
    vocab = _load_vocab(args)
    _, _, train_set, dcfg, reduction = _split_and_encode(args, cfg, out, vocab)
    mdl = model.init_model(dcfg, vocab.fingerprint())
    mdl.reduction = reduction
    mdl, history = model.train(mdl, train_set)
    model.save(mdl, out / "model.bin")
    _write_json(out / "history.json",
                {"losses": history.losses, "accuracies": history.accuracies})
    _echo_config(out, "train", cfg)
    print(f"trained {dcfg.n_layers}-layer detector on {len(train_set)} samples; "
          f"final train acc {history.accuracies[-1]:.4f} -> {out / 'model.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mdl = model.load(_need(args.model, "model file"))
    vocab = _load_vocab(args)
    _check_fingerprint(mdl, vocab)
    manifest = corpus.load_manifest(_need(args.manifest, "manifest"))
    dataset = _dataset_for_model(mdl, manifest.records, vocab)
    report = metrics.evaluate(mdl, dataset)
    _write_json(out / "metrics.json", report.to_dict())
    _echo_config(out, "eval", {"model": str(args.model), "manifest": str(args.manifest)})
    print(metrics.render_table(report))
    return EXIT_OK


def cmd_attack(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mdl = model.load(_need(args.model, "model file"))
    vocab = _load_vocab(args)
    _check_fingerprint(mdl, vocab)
    manifest = corpus.load_manifest(_need(args.manifest, "manifest"))
    dataset = _dataset_for_model(mdl, manifest.records, vocab)

    target = None
    if args.mode == "targeted":
        target = 0 if args.target == "benign" else 1
    sweep_rows = []
    for eps in args.epsilon:
        acfg = attack.AttackConfig(
            epsilon=eps, mode=args.mode, target_label=target,
            direction=args.direction, dim_mask=args.dim_mask)
        report = attack.attack_dataset(mdl, dataset, acfg)
        tag = f"{eps:g}".replace(".", "p")
        _write_json(out / f"attack_report_eps{tag}.json", report.to_dict())
        sweep_rows.append(report)
        print(f"eps={eps:g}: misclassification {report.misclassification_rate:.4f} "
              f"(malware-only {report.misclassification_rate_malware:.4f}), "
              f"attack success {report.attack_success_rate:.4f}, "
              f"clean error {report.clean_error_rate:.4f}")
    if len(sweep_rows) > 1:
        lines = ["epsilon,misclassification_rate,misclassification_rate_malware,"
                 "attack_success_rate,clean_error_rate"]
        for r in sweep_rows:
            lines.append(f"{r.epsilon:g},{r.misclassification_rate},"
                         f"{r.misclassification_rate_malware},"
                         f"{r.attack_success_rate},{r.clean_error_rate}")
        (out / "attack_sweep.csv").write_bytes(("\n".join(lines) + "\n").encode())
    _echo_config(out, "attack", {
        "epsilon": list(args.epsilon), "mode": args.mode,
        "target": args.target, "direction": args.direction,
        "dim_mask": args.dim_mask, "model": str(args.model),
        "manifest": str(args.manifest),
    })
    return EXIT_OK


def cmd_defend_adv_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    defaults = dict(_TRAIN_DEFAULTS, epsilon=0.25, mix_ratio=0.5)
    cfg = _resolve_config(args, defaults)
    vocab = _load_vocab(args)
    _, _, train_set, dcfg, reduction = _split_and_encode(args, cfg, out, vocab)
    adv_cfg = defense.AdvTrainConfig(
        base=dcfg,
        attack=attack.AttackConfig(epsilon=cfg["epsilon"]),
        mix_ratio=cfg["mix_ratio"],
    )
    mdl, history = defense.adversarial_train(train_set, adv_cfg, vocab.fingerprint())
    mdl.reduction = reduction
    model.save(mdl, out / "model.bin")
    _write_json(out / "history.json",
                {"losses": history.losses, "accuracies": history.accuracies})
    _echo_config(out, "defend_adv_train", cfg)
    print(f"adversarially trained (eps={cfg['epsilon']}, mix={cfg['mix_ratio']}) "
          f"on {len(train_set)} samples -> {out / 'model.bin'}")
    return EXIT_OK


def cmd_defend_reduce(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _resolve_config(args, {
        "k_dll": 64, "k_str": 64, "dll_dims": 256, "str_dims": 256,
    })
    vocab = _load_vocab(args)
    manifest = corpus.load_manifest(_need(args.manifest, "manifest"))
    spec = HashSpec(dll_dims=cfg["dll_dims"], str_dims=cfg["str_dims"])
    # max_seq_len 1: scoring uses only the static vectors
    dataset = model.encode_records(manifest.records, vocab, spec, 1)
    rmap = defense.reduce_features(dataset, cfg["k_dll"], cfg["k_str"])
    rmap.save(out / "reduction_map.json")
    _echo_config(out, "defend_reduce", cfg)
    print(f"kept {cfg['k_dll']}+{cfg['k_str']} of {cfg['dll_dims']}+{cfg['str_dims']} "
          f"static dims -> {out / 'reduction_map.json'}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    baseline = model.load(_need(args.baseline, "baseline model"))
    defended = model.load(_need(args.defended, "defended model"))
    vocab = _load_vocab(args)
    _check_fingerprint(baseline, vocab)
    manifest = corpus.load_manifest(_need(args.manifest, "manifest"))
    target = None
    if args.mode == "targeted":
        target = 0 if args.target == "benign" else 1
    acfg = attack.AttackConfig(
        epsilon=args.epsilon, mode=args.mode, target_label=target,
        direction=args.direction, dim_mask=args.dim_mask)
    comparison = defense.evaluate_defense(
        baseline, defended, manifest.records, vocab, acfg)
    payload = comparison.to_dict()
    payload["reference_figures"] = metrics.REFERENCE_FIGURES
    _write_json(out / "comparison.json", payload)
    _echo_config(out, "report", {
        "baseline": str(args.baseline), "defended": str(args.defended),
        "manifest": str(args.manifest), "epsilon": args.epsilon,
        "mode": args.mode, "direction": args.direction, "dim_mask": args.dim_mask,
    })
    ref = metrics.REFERENCE_FIGURES
    print("reference results (original full-scale corpus; desk corpus is a "
          "synthetic stand-in, numbers are not comparable):")
    print(f"  clean test accuracy            {ref['clean_test_accuracy']:.1%}")
    print(f"  attack misclassification       {ref['attack_misclassification_rate']:.1%}")
    print(f"  with adversarial training      {ref['adversarial_training_misclassification_rate']:.1%}")
    print(f"  with feature-space reduction   {ref['feature_reduction_misclassification_rate']:.1%}")
    print()
    print(f"this run (feature-space attack, eps={args.epsilon:g}, {args.mode}):")
    print(comparison.render())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, *, config: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory")
    if config:
        p.add_argument("--config", help="JSON config file (flags override it)")


def build_parser() -> _Parser:
    parser = _Parser(prog="madlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-benign", dest="n_benign", type=int)
    p.add_argument("--n-malware", dest="n_malware", type=int)
    p.add_argument("--vocab-pool", dest="vocab_pool", type=int)
    p.add_argument("--separability", type=float)
    p.add_argument("--seq-len-min", dest="seq_len_min", type=int)
    p.add_argument("--seq-len-max", dest="seq_len_max", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="emit hashed static feature vectors")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--dll-dims", dest="dll_dims", type=int)
    p.add_argument("--str-dims", dest="str_dims", type=int)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-vocab", help="build the token vocabulary")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--max-size", dest="max_size", type=int)
    p.set_defaults(func=cmd_build_vocab)

    def add_train_flags(p):
        p.add_argument("--manifest")
        p.add_argument("--vocab")
        p.add_argument("--reduction-map", dest="reduction_map")
        for flag, typ in (
            ("--d-model", int), ("--n-heads", int), ("--n-layers", int),
            ("--ffn-dim", int), ("--max-seq-len", int), ("--d-dll", int),
            ("--d-str", int), ("--head-hidden", int), ("--lr", float),
            ("--epochs", int), ("--batch-size", int), ("--seed", int),
            ("--test-fraction", float),
        ):
            p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ)

    p = sub.add_parser("train", help="split, train and save the detector")
    _add_common(p)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a manifest with a trained model")
    _add_common(p, config=False)
    p.add_argument("--model")
    p.add_argument("--vocab")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    def add_attack_flags(p, multi_eps: bool):
        p.add_argument("--epsilon", type=float, required=True,
                       nargs="+" if multi_eps else None)
        p.add_argument("--mode", choices=attack.MODES, default="untargeted")
        p.add_argument("--target", choices=("benign", "malware"), default="benign")
        p.add_argument("--direction", choices=attack.DIRECTIONS, default="descend")
        p.add_argument("--dim-mask", dest="dim_mask", choices=attack.DIM_MASKS,
                       default="all")

    p = sub.add_parser("attack", help="run the evasion attack on a manifest")
    _add_common(p, config=False)
    p.add_argument("--model")
    p.add_argument("--vocab")
    p.add_argument("--manifest")
    add_attack_flags(p, multi_eps=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="train or derive a defense")
    dsub = p.add_subparsers(dest="defense_command", required=True,
                            parser_class=_Parser)

    p2 = dsub.add_parser("adv-train", help="adversarial training")
    _add_common(p2)
    add_train_flags(p2)
    p2.add_argument("--epsilon", type=float)
    p2.add_argument("--mix-ratio", dest="mix_ratio", type=float)
    p2.set_defaults(func=cmd_defend_adv_train)

    p2 = dsub.add_parser("reduce", help="score and select static features")
    _add_common(p2)
    p2.add_argument("--manifest")
    p2.add_argument("--vocab")
    p2.add_argument("--k-dll", dest="k_dll", type=int)
    p2.add_argument("--k-str", dest="k_str", type=int)
    p2.add_argument("--dll-dims", dest="dll_dims", type=int)
    p2.add_argument("--str-dims", dest="str_dims", type=int)
    p2.set_defaults(func=cmd_defend_reduce)

    p = sub.add_parser("report", help="side-by-side defense comparison")
    _add_common(p, config=False)
    p.add_argument("--baseline")
    p.add_argument("--defended")
    p.add_argument("--vocab")
    p.add_argument("--manifest")
    add_attack_flags(p, multi_eps=False)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"madlab: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as e:
        print(f"madlab: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``vaprompt <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataio import SynthConfig, synth_generate, write_dataset
from .fusion import CrossModalAttention, Gate, cross_modal_attention, gated_fusion
from .labels import GridConfig, grid_regions, soft_label, write_prototypes
from .objectives import ccc_loss, total_loss
from .sequence import TCN, BiGRU
from .trainer import TrainConfig, ablate, evaluate, train

log = logging.getLogger("vaprompt")

GRAD_CHECK_TOL = 1e-4
PROTOTYPE_DIM = 512


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def load_config(path) -> tuple[dict, dict]:
    """Split a JSON config into (synth, train) dicts.

    Either ``{"synth": {...}, "train": {...}}`` sections or a flat object
    whose keys are SynthConfig / TrainConfig field names.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON: {exc}")
    if not isinstance(raw, dict):
        raise CLIError(f"{path}: config must be a JSON object")
    if "synth" in raw or "train" in raw:
        extra = set(raw) - {"synth", "train"}
        if extra:
            raise CLIError(f"{path}: unexpected top-level keys {sorted(extra)}")
        synth, trn = dict(raw.get("synth", {})), dict(raw.get("train", {}))
    else:
        s_names, t_names = _field_names(SynthConfig), _field_names(TrainConfig)
        unknown = set(raw) - s_names - t_names
        if unknown:
            raise CLIError(f"{path}: unknown config fields {sorted(unknown)}")
        synth = {k: v for k, v in raw.items() if k in s_names}
        trn = {k: v for k, v in raw.items() if k in t_names}
    if trn.get("prototypes"):
        proto = Path(trn["prototypes"])
        trn["prototypes"] = str(proto if proto.is_absolute() else path.parent / proto)
    return synth, trn


def _train_config(args) -> TrainConfig:
    _, trn = load_config(args.config)
    if args.seed is not None:
        trn["seed"] = args.seed
    return TrainConfig.from_dict(trn)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    synth, _ = load_config(args.config)
    if args.seed is not None:
        synth["seed"] = args.seed
    config = SynthConfig.from_dict(synth)
    out = Path(args.out)
    manifest = write_dataset(synth_generate(config), out)
    # Stand-in text prototypes for the prototype semantic head.
    rows = np.random.default_rng([config.seed, 3]).normal(size=(9, PROTOTYPE_DIM))
    write_prototypes(out / "prototypes.vapb", rows / np.linalg.norm(rows, axis=1, keepdims=True))
    print(f"wrote {config.n_sequences} sequences to {manifest}")
    return 0


def _parse_centers(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise CLIError(f"--centers must be comma-separated numbers, got {text!r}")


def cmd_label(args) -> int:
    grid = GridConfig(axis_centers=_parse_centers(args.centers), sigma=args.sigma)
    weights = soft_label((args.valence, args.arousal), grid)
    for region, w in zip(grid_regions(grid), weights):
        v, a = region.center
        print(f"{region.index}\t({v:+.2f}, {a:+.2f})\t{w:.6f}\t{region.name}")
    return 0


def _check(f, tensors) -> float:
    return max(ad.gradient_check(f, t, 1e-5, GRAD_CHECK_TOL).max_rel_error for t in tensors)


def _grad_checks(rng: np.random.Generator) -> dict:
    """Reduced-size finite-difference checks, one closure per module."""
    T, D = 5, 8

    def rand(*shape):
        return Tensor(rng.uniform(-2, 2, size=shape))

    def gru():
        m = BiGRU(D, D // 2, rng)
        x, w = rand(T, D), rand(T, D)
        return _check(lambda _: ad.sum(ad.mul(m(x), w)), [x] + m.parameters())

    def tcn():
        m = TCN(D, D, rng, dilations=(1, 2))
        x, w = rand(T, D), rand(T, D)
        return _check(lambda _: ad.sum(ad.mul(m(x), w)), [x] + m.parameters())

    def attention():
        m = CrossModalAttention(D, 2, rng)
        hv, ha, w = rand(T, D), rand(T - 1, D), rand(T, D)
        return _check(lambda _: ad.sum(ad.mul(cross_modal_attention(hv, ha, m), w)),
                      [hv, ha] + m.parameters())

    def gate():
        m = Gate(D, rng)
        fa, hv, w = rand(T, D), rand(T, D), rand(T, D)
        return _check(lambda _: ad.sum(ad.mul(gated_fusion(fa, hv, m), w)), [fa, hv] + m.parameters())

    def loss():
        pred = Tensor(rng.uniform(-1, 1, size=(16, 2)))
        target = rng.uniform(-1, 1, size=(16, 2))
        logits = rand(16, 9)
        soft = np.stack([soft_label(y, GridConfig()) for y in target])
        worst = _check(lambda p: ccc_loss(p, target), [pred])
        return max(worst, _check(lambda _: total_loss(pred, target, None, soft, logits=logits).tensor,
                                 [pred, logits]))

    return {"gru": gru, "tcn": tcn, "attention": attention, "gate": gate, "loss": loss}


def cmd_grad_check(args) -> int:
    checks = _grad_checks(np.random.default_rng(0 if args.seed is None else args.seed))
    names = list(checks) if args.module == "all" else [args.module]
    ok = True
    for name in names:
        err = checks[name]()
        passed = err < GRAD_CHECK_TOL
        ok &= passed
        print(f"{name:10s} max_rel_error={err:.3e} {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def _print_splits(report) -> None:
    for split, m in report.splits.items():
        print(f"{split}: CCC_v={m.ccc_v:.4f} CCC_a={m.ccc_a:.4f} CCC_Mean={m.ccc_mean:.4f}")


def cmd_train(args) -> int:
    result = train(_train_config(args), args.data, args.out)
    _print_splits(result.report)
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    _print_splits(evaluate(args.checkpoint, args.data))
    return 0


def cmd_ablate(args) -> int:
    rows = ablate(_train_config(args), args.data, args.out, workers=args.workers)
    print((Path(args.out) / "ablation.md").read_text(), end="")
    return 1 if all(r.error for r in rows) else 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vaprompt", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("label", help="print the 9 soft-label weights for one VA point")
    p.add_argument("--valence", type=float, required=True)
    p.add_argument("--arousal", type=float, required=True)
    p.add_argument("--centers", default="-0.66,0.0,0.66")
    p.add_argument("--sigma", type=float, default=0.45)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--module", default="all", choices=["all", "gru", "tcn", "attention", "gate", "loss"])
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train", help="train a model and write checkpoint + report")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the temporal/fusion and grid ablations")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError) as exc:
        print(f"vaprompt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

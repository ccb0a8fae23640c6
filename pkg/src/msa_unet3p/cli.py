"""Command-line entry point: generate | train | evaluate | ablate | report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .architecture import ConfigurationError, NetworkConfig
from .data import GeneratorConfig, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("msa_unet3p")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- config ---------------------------------------------------------------------

def load_config(path) -> dict:
    """Read the JSON config; returns ``{"network", "train", "generator"}`` objects."""
    from .training import TrainConfig

    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path}: invalid JSON ({e})")
    unknown = sorted(set(raw) - {"network", "train", "generator"})
    if unknown:
        raise UsageError(f"config: unknown section {unknown[0]!r}")
    try:
        net = dict(raw.get("network", {}))
        preset = net.pop("preset", "desk")
        network = NetworkConfig.from_dict({**NetworkConfig.from_preset(preset).to_dict(), **net})
        train = TrainConfig.from_dict(raw.get("train", {}))
        generator = GeneratorConfig.from_dict(raw.get("generator", {}))
    except (ConfigurationError, ValueError, TypeError) as e:
        raise UsageError(f"config: {e}")
    return {"network": network, "train": train, "generator": generator}


def _parse_flags(s: str) -> dict:
    names = [f.strip().lower() for f in s.split(",") if f.strip()] if s else []
    bad = sorted(set(names) - {"spcl", "cafm", "msd"})
    if bad:
        raise UsageError(f"--flags: unknown component {bad[0]!r} (expected spcl,cafm,msd)")
    return {f"use_{k}": k in names for k in ("spcl", "cafm", "msd")}


def _apply_overrides(train, args):
    kw = {}
    if getattr(args, "flags", None) is not None:
        kw.update(_parse_flags(args.flags))
    if getattr(args, "gamma", None) is not None:
        g = float(args.gamma)
        kw["weights"] = replace(train.weights, gamma=g)
        kw["use_spcl"] = g > 0 and kw.get("use_spcl", train.use_spcl)
    if getattr(args, "epochs", None) is not None:
        kw["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "fast", False):
        kw["deterministic"] = False
    if getattr(args, "deterministic", False):
        kw["deterministic"] = True
    return replace(train, **kw) if kw else train


def _dataset_size(data: Path, override: int | None, default: int) -> int:
    if override:
        return override
    man = data / "manifest.json"
    if man.exists():
        with open(man, encoding="utf-8") as fh:
            gen = json.load(fh).get("generator", {})
        if "image_size" in gen:
            return int(gen["image_size"])
    return default


def _load(args, cfg) -> list:
    data = Path(args.data)
    size = _dataset_size(data, getattr(args, "size", None), cfg["generator"].image_size)
    cfg["network"].check_input(size, size)
    samples = load_dataset(data, image_size=size)
    if not samples:
        raise RuntimeError(f"{data}: dataset is empty")
    return samples


# --- commands -------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    gen = cfg["generator"]
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.size is not None:
        kw["image_size"] = args.size
    try:
        gen = GeneratorConfig.from_dict({**gen.to_dict(), **kw})
    except ValueError as e:
        raise UsageError(str(e))
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out}: output directory is not empty (use --force)")
    samples = generate_dataset(gen, args.count, test_fraction=args.test_fraction)
    save_dataset(samples, out, {"generator": gen.to_dict(), "count": args.count})
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def _run_dir(root, tag: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = Path(root) / f"{stamp}-{tag}"
    i = 1
    while d.exists():
        d = Path(root) / f"{stamp}-{tag}-{i}"
        i += 1
    return d


def cmd_train(args) -> int:
    from .data import kfold_split
    from .training import split_train_test, train_fold

    cfg = load_config(args.config)
    train = _apply_overrides(cfg["train"], args)
    samples = _load(args, cfg)
    pool, _ = split_train_test(samples)
    if args.k >= 2:
        if not 0 <= args.fold < args.k:
            raise UsageError(f"--fold must lie in [0, {args.k})")
        tr, va = kfold_split(pool, args.k, seed=train.seed)[args.fold]
        tr_s, va_s = [pool[i] for i in tr], [pool[i] for i in va]
    else:
        tr_s, va_s = pool, pool
    run_dir = _run_dir(args.out, args.tag)
    rec = train_fold(cfg["network"], train, tr_s, va_s, run_dir=run_dir)
    print(f"run: {run_dir}")
    print(f"best epoch {rec.best_epoch}: val dice {rec.report.mean('dice'):.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .checkpoint import CheckpointMismatch, load_checkpoint
    from .training import evaluate, split_train_test

    cfg = load_config(args.config) if args.config else None
    expected = cfg["network"] if cfg else None
    try:
        model, manifest = load_checkpoint(args.checkpoint, expected=expected)
    except CheckpointMismatch as e:
        raise UsageError(str(e))
    if cfg is None:
        cfg = load_config(None)
    cfg["network"] = model.cfg
    samples = _load(args, cfg)
    if args.split != "all":
        train_s, test_s = split_train_test(samples)
        samples = test_s if args.split == "test" else train_s
    report = evaluate(model, samples, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    report.to_json(out / "metrics.json")
    print(f"dice {report.mean('dice'):.4f}  asd {report.mean('asd'):.4f}  "
          f"excluded {report.n_excluded}/{len(report.samples)}")
    if args.oracle:
        bad = oracle_check(model, samples, args.threshold, args.oracle_crop)
        with open(out / "oracle_check.json", "w", encoding="utf-8") as fh:
            json.dump(bad, fh, indent=2)
        print(f"oracle discrepancies: {bad['discrepancies']} of {bad['checked']}")
        if bad["discrepancies"]:
            return EXIT_RUNTIME
    return EXIT_OK


def oracle_check(model, samples, threshold: float, crop: int | None = 16, tol: float = 1e-9) -> dict:
    """Compare fast ASD/ACD with brute force on (optionally cropped) predictions."""
    from . import metrics
    from .training import predict_probs

    probs = predict_probs(model, samples)
    checked = disc = 0
    worst = 0.0
    for p, s in zip(probs, samples):
        pred, truth = p >= threshold, s.mask.astype(bool)
        tiles = [(pred, truth)]
        if crop:
            h, w = pred.shape
            tiles = [(pred[r:r + crop, c:c + crop], truth[r:r + crop, c:c + crop])
                     for r in range(0, h, crop) for c in range(0, w, crop)]
        for a, b in tiles:
            if not a.any() or not b.any():
                continue
            for fn in (metrics.asd, metrics.acd):
                d = abs(fn(a, b) - fn(a, b, backend="oracle"))
                worst = max(worst, d)
                checked += 1
                disc += d > tol
    return {"checked": checked, "discrepancies": int(disc), "max_abs_diff": worst}


def cmd_ablate(args) -> int:
    from . import reporting
    from .checkpoint import load_checkpoint
    from .training import component_ablation, gamma_ablation, predict_probs

    cfg = load_config(args.config)
    train = _apply_overrides(cfg["train"], args)
    samples = _load(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = out / "runs"
    if args.mode == "gamma":
        res = gamma_ablation(cfg["network"], train, samples, args.k, run_root=runs)
        reporting.dump_gamma(res, out)
        last = res.arms[1]
        ck = runs / "gamma1" / "fold0" / "checkpoint.pt"
    else:
        res = component_ablation(cfg["network"], train, samples, args.k, run_root=runs)
        reporting.dump_components(res, out)
        last = res.results[-1]
        ck = runs / "config8" / "fold0" / "checkpoint.pt"
    summary = reporting.render_report(out)
    # qualitative panels for the first validation samples of fold 0
    model, _ = load_checkpoint(ck)
    from .training import split_train_test
    pool, _ = split_train_test(samples)
    val = [pool[i] for i in last.folds[0][1][: args.panels]]
    for s, p in zip(val, predict_probs(model, val)):
        panel, boxes = reporting.render_qualitative(p >= train.threshold, s.mask, s.image)
        reporting.save_qualitative(panel, boxes, out / f"qualitative_{s.id}.png")
    print((out / "table.md").read_text(encoding="utf-8"))
    print(f"results: {out}")
    return EXIT_OK if summary else EXIT_RUNTIME


def cmd_report(args) -> int:
    from . import reporting

    src = Path(args.results)
    if not (src / "folds.csv").exists():
        raise UsageError(f"{src}: no folds.csv (not an ablation results directory)")
    reporting.render_report(src)
    print((src / "table.md").read_text(encoding="utf-8"))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msa-unet3p", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic vessel dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=150)
    g.add_argument("--seed", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--config")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--data", required=True)
        sp.add_argument("--size", type=int, help="image size (default: dataset manifest)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--flags", help="enabled components, e.g. spcl,cafm,msd")
        mode = sp.add_mutually_exclusive_group()
        mode.add_argument("--deterministic", action="store_true")
        mode.add_argument("--fast", action="store_true", help="allow nondeterministic kernels")

    t = sub.add_parser("train", help="train one fold")
    common(t)
    t.add_argument("--gamma", type=float, choices=(0.0, 1.0))
    t.add_argument("--k", type=int, default=5, help="folds (<2 trains and validates on all data)")
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--out", default="runs")
    t.add_argument("--tag", default="train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--size", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("all", "train", "test"), default="all")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--oracle", action="store_true", help="re-check ASD/ACD against brute force")
    e.add_argument("--oracle-crop", type=int, default=16)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="gamma or component ablation with k-fold CV")
    common(a)
    a.add_argument("--mode", choices=("gamma", "components"), required=True)
    a.add_argument("--k", type=int, default=5)
    a.add_argument("--out", required=True)
    a.add_argument("--panels", type=int, default=2)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="re-render tables and plots from a results directory")
    r.add_argument("results")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

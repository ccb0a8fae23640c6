"""Tables, plots and qualitative overlays for the ablation protocols.

Every figure is rendered from a CSV written next to it, so ``render_report``
can rebuild the whole bundle from a results directory.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .metrics import METRIC_NAMES
from .stats import paired_test

FOLD_COLS = list(METRIC_NAMES)
MIN_COMPONENT = 5


def _f(v, exact: bool = False) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    return repr(v) if exact else f"{v:.6f}"


def write_csv(path, header: list[str], rows: list[list], exact: bool = False) -> None:
    """``exact`` writes floats at full round-trip precision (inputs to statistics)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_f(v, exact) if not isinstance(v, str) else v for v in r])


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _num(s: str) -> float:
    return float(s) if s not in ("", None) else math.nan


# --- raw result dumps --------------------------------------------------------

def dump_gamma(ga, out_dir) -> None:
    out = Path(out_dir)
    rows, dice_rows, eff_rows = [], [], []
    for g, cv in ga.arms.items():
        for i, rep in enumerate(cv.eval_reports):
            rows.append([f"gamma={g}", i, *(rep.mean(m) for m in METRIC_NAMES)])
            dice_rows += [[f"gamma={g}", i, s.id, s.dice] for s in rep.samples]
        agg = cv.aggregate()
        eff_rows.append([f"gamma={g}", cv.runs[0].n_params, agg["dice"]["mean"], agg["asd"]["mean"]])
    write_csv(out / "folds.csv", ["group", "fold", *FOLD_COLS], rows, exact=True)
    write_csv(out / "dice_boxplot.csv", ["group", "fold", "sample_id", "dice"], dice_rows)
    write_csv(out / "efficiency.csv", ["group", "n_params", "dice", "asd"], eff_rows)
    (out / "mode.txt").write_text("gamma\n", encoding="utf-8")


def dump_components(ca, out_dir) -> None:
    out = Path(out_dir)
    rows, dice_rows, eff_rows = [], [], []
    for row, cv in zip(ca.rows, ca.results):
        g = f"config{row['idx']}"
        flags = [row["idx"], row["spcl"], row["cafm"], row["msd"]]
        for i, rep in enumerate(cv.eval_reports):
            rows.append([g, *flags, row["n_params"], i, *(rep.mean(m) for m in METRIC_NAMES)])
            dice_rows += [[g, i, s.id, s.dice] for s in rep.samples]
        agg = row["metrics"]
        eff_rows.append([g, row["n_params"], agg["dice"]["mean"], agg["asd"]["mean"]])
    write_csv(out / "folds.csv",
              ["group", "idx", "spcl", "cafm", "msd", "n_params", "fold", *FOLD_COLS], rows,
              exact=True)
    write_csv(out / "dice_boxplot.csv", ["group", "fold", "sample_id", "dice"], dice_rows)
    write_csv(out / "efficiency.csv", ["group", "n_params", "dice", "asd"], eff_rows)
    (out / "mode.txt").write_text("components\n", encoding="utf-8")


# --- tables --------------------------------------------------------------------

def _group_folds(rows: list[dict]) -> dict[str, dict[str, np.ndarray]]:
    groups: dict[str, dict[str, list]] = {}
    for r in rows:
        g = groups.setdefault(r["group"], {m: [] for m in METRIC_NAMES})
        for m in METRIC_NAMES:
            g[m].append(_num(r[m]))
    return {k: {m: np.array(v) for m, v in d.items()} for k, d in groups.items()}


def _mean_std(v: np.ndarray) -> tuple[float, float]:
    v = v[~np.isnan(v)]
    return (float(v.mean()), float(v.std())) if len(v) else (math.nan, math.nan)


def gamma_table(fold_rows: list[dict]) -> list[dict]:
    """Two-arm comparison with paired one-tailed tests of gamma=1 against gamma=0."""
    g = _group_folds(fold_rows)
    base, treat = g["gamma=0"], g["gamma=1"]
    table = []
    for name, arm in (("gamma=0", base), ("gamma=1", treat)):
        row = {"group": name}
        for m in METRIC_NAMES:
            row[m], row[f"{m}_std"] = _mean_std(arm[m])
            row[f"{m}_p"], row[f"{m}_marker"] = math.nan, ""
            if name == "gamma=1":
                a, b = treat[m], base[m]
                ok = ~(np.isnan(a) | np.isnan(b))
                if ok.sum() >= 2:
                    res = paired_test(a[ok], b[ok], m)
                    row[f"{m}_t"] = res["t"]
                    row[f"{m}_p"], row[f"{m}_marker"] = res["p"], res["marker"]
        table.append(row)
    return table


def component_table(fold_rows: list[dict]) -> list[dict]:
    g = _group_folds(fold_rows)
    meta = {}
    for r in fold_rows:
        meta.setdefault(r["group"], r)
    table = []
    for name in sorted(g, key=lambda k: int(meta[k]["idx"])):
        r = meta[name]
        row = {"group": name, "idx": int(r["idx"]), "spcl": r["spcl"] == "1",
               "cafm": r["cafm"] == "1", "msd": r["msd"] == "1", "n_params": int(r["n_params"])}
        for m in METRIC_NAMES:
            row[m], row[f"{m}_std"] = _mean_std(g[name][m])
        table.append(row)
    return table


def _cell(row: dict, m: str) -> str:
    mean, std = row[m], row[f"{m}_std"]
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.4f}±{std:.4f}{row.get(f'{m}_marker', '')}"


def markdown_gamma(table: list[dict]) -> str:
    head = "| γ | Recall ↑ | F1 ↑ | Dice ↑ | ASD ↓ | ACD ↓ |\n|---|---|---|---|---|---|\n"
    body = "".join(f"| {r['group'].split('=')[1]} | " + " | ".join(_cell(r, m) for m in METRIC_NAMES)
                    + " |\n" for r in table)
    notes = ("\n▽ p<0.05, ▽▽ p<0.01, ◇ p<0.1, ◇◇ p<0.2 (one-tailed paired t-test, γ=1 vs γ=0; "
             "the 0.1 and 0.2 levels are weak evidence only).\n")
    return head + body + notes


def markdown_components(table: list[dict]) -> str:
    yes = lambda b: "✓" if b else "✗"  # noqa: E731
    head = ("| Idx | SPCL | CAFM | MSD | Params | Recall ↑ | F1 ↑ | Dice ↑ | ASD ↓ | ACD ↓ |\n"
            "|---|---|---|---|---|---|---|---|---|---|\n")
    body = "".join(
        f"| {r['idx']} | {yes(r['spcl'])} | {yes(r['cafm'])} | {yes(r['msd'])} | {r['n_params']} | "
        + " | ".join(_cell(r, m) for m in METRIC_NAMES) + " |\n" for r in table)
    return head + body


def table_csv(table: list[dict], path) -> None:
    keys = list(table[0].keys())
    for r in table[1:]:
        keys += [k for k in r if k not in keys]
    write_csv(path, keys, [[r.get(k, "") for k in keys] for r in table])


# --- plots -----------------------------------------------------------------------

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_dice_boxplot(csv_path, png_path) -> None:
    rows = read_csv(csv_path)
    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault(r["group"], []).append(_num(r["dice"]))
    plt = _plt()
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(groups)), 4))
    names = list(groups)
    ax.boxplot([groups[n] for n in names], showmeans=True)
    ax.set_xticks(range(1, len(names) + 1), names, rotation=30)
    ax.set_ylabel("Dice")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


def plot_efficiency(csv_path, png_path) -> None:
    rows = read_csv(csv_path)
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    params = np.array([_num(r["n_params"]) for r in rows]) / 1e6
    dice = np.array([_num(r["dice"]) for r in rows])
    asd = np.array([_num(r["asd"]) for r in rows])
    sc = ax.scatter(params, dice, s=40 + 400 * params / max(params.max(), 1e-9), c=asd, cmap="viridis_r")
    for r, x, y in zip(rows, params, dice):
        ax.annotate(r["group"], (x, y), fontsize=7)
    fig.colorbar(sc, ax=ax, label="ASD (px)")
    ax.set_xlabel("parameters (M)")
    ax.set_ylabel("Dice")
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


# --- qualitative overlays -----------------------------------------------------

def error_boxes(pred, truth, min_size: int = MIN_COMPONENT) -> list[dict]:
    """Bounding boxes of connected FN (truth & ~pred) and FP (pred & ~truth) regions."""
    p, t = np.asarray(pred, bool), np.asarray(truth, bool)
    if p.shape != t.shape:
        raise ValueError("pred/truth shape mismatch")
    boxes = []
    for kind, region in (("FN", t & ~p), ("FP", p & ~t)):
        lab, n = ndimage.label(region, structure=np.ones((3, 3), bool))
        for i, sl in enumerate(ndimage.find_objects(lab), start=1):
            size = int((lab[sl] == i).sum())
            if size >= min_size:
                boxes.append({"kind": kind, "r0": sl[0].start, "c0": sl[1].start,
                              "r1": sl[0].stop - 1, "c1": sl[1].stop - 1, "size": size})
    return boxes


COLORS = {"FN": (255, 220, 0), "FP": (255, 40, 40)}


def _draw_box(rgb, b, color):
    r0, c0, r1, c1 = b["r0"], b["c0"], b["r1"], b["c1"]
    rgb[r0, c0:c1 + 1] = color
    rgb[r1, c0:c1 + 1] = color
    rgb[r0:r1 + 1, c0] = color
    rgb[r0:r1 + 1, c1] = color


def render_qualitative(pred, truth, image, min_size: int = MIN_COMPONENT):
    """Panel ``input | truth | prediction`` with FN/FP boxes drawn on the prediction.

    Returns ``(rgb uint8 array (H, 3W, 3), boxes)``.
    """
    p, t = np.asarray(pred, bool), np.asarray(truth, bool)
    img = np.asarray(image, dtype=np.float64).reshape(p.shape)
    if img.min() < 0:
        img = img * 0.5 + 0.5
    gray = np.clip(img * 255, 0, 255).astype(np.uint8)
    left = np.repeat(gray[..., None], 3, axis=2)
    mid = np.repeat((t * 255).astype(np.uint8)[..., None], 3, axis=2)
    right = np.repeat((p * 255).astype(np.uint8)[..., None], 3, axis=2)
    right[t & ~p] = (120, 100, 0)
    right[p & ~t] = (140, 0, 0)
    boxes = error_boxes(p, t, min_size)
    for b in boxes:
        _draw_box(right, b, COLORS[b["kind"]])
    return np.concatenate([left, mid, right], axis=1), boxes


def save_qualitative(panel, boxes, png_path) -> None:
    from PIL import Image

    Image.fromarray(panel).save(png_path)
    write_csv(Path(png_path).with_suffix(".csv"), ["kind", "r0", "c0", "r1", "c1", "size"],
              [[b["kind"], b["r0"], b["c0"], b["r1"], b["c1"], b["size"]] for b in boxes])


# --- bundle ---------------------------------------------------------------------

def render_report(out_dir) -> dict:
    """Rebuild tables and plots of a results directory from its CSVs."""
    out = Path(out_dir)
    mode = (out / "mode.txt").read_text(encoding="utf-8").strip()
    folds = read_csv(out / "folds.csv")
    if mode == "gamma":
        table = gamma_table(folds)
        md = markdown_gamma(table)
    elif mode == "components":
        table = component_table(folds)
        md = markdown_components(table)
    else:
        raise ValueError(f"{out}: unknown results mode {mode!r}")
    table_csv(table, out / "table.csv")
    (out / "table.md").write_text(md, encoding="utf-8")
    plot_dice_boxplot(out / "dice_boxplot.csv", out / "dice_boxplot.png")
    plot_efficiency(out / "efficiency.csv", out / "efficiency.png")
    summary = {"mode": mode, "table": table}
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
    return summary

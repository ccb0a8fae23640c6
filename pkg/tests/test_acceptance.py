"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines are echoed in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""
import hashlib
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from msa_unet3p.architecture import MSAUNet3Plus, NetworkConfig, count_parameters
from msa_unet3p.cli import main as cli_main
from msa_unet3p.data import GeneratorConfig, generate_dataset
from msa_unet3p.losses import (ContrastiveConfig, EmbeddingMap, LossWeights, bce_loss,
                               build_prototypes, dice_loss, pcl_loss, sce_loss, total_loss)
from msa_unet3p import metrics, oracle, reporting
from msa_unet3p.stats import marker
from msa_unet3p.training import (TrainConfig, component_ablation, component_grid, evaluate,
                                 embedding_separation, gamma_ablation, lr_at, train_fold)

RESULTS: list[str] = []
D64 = torch.float64


def record(n: int, ok: bool, detail: str, elapsed: float) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s) {detail}"
    RESULTS.append(line)
    print(line)


# --- shared helpers -------------------------------------------------------------------

def _fd_max_rel(fn, x, eps=1e-6, floor=1e-6):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    ana = x.grad.detach().view(-1).clone()
    worst = 0.0
    with torch.no_grad():
        flat = x.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            fp = fn(x).item()
            flat[i] = old - eps
            fm = fn(x).item()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            a = ana[i].item()
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


def _net_grad_max_rel(seed=7, eps=1e-6, floor=1e-4):
    torch.manual_seed(seed)
    cfg = NetworkConfig(depth=3, base_channels=4, decoder_channels=4, embedding_dim=8)
    model = MSAUNet3Plus(cfg).double()
    x = torch.randn(1, 1, 16, 16, dtype=D64)

    def f():
        out = model(x)
        return out.logits.sum() + out.embeddings.sum()

    model.zero_grad()
    f().backward()
    rng = np.random.default_rng(0)
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            g = p.grad.clone()
            d = torch.from_numpy(rng.standard_normal(p.shape))
            d /= d.norm()
            p.add_(eps * d)
            fp = f().item()
            p.sub_(2 * eps * d)
            fm = f().item()
            p.add_(eps * d)
            num, ana = (fp - fm) / (2 * eps), float((g * d).sum())
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
            flat = p.view(-1)
            for j in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                flat[j] += eps
                fp = f().item()
                flat[j] -= 2 * eps
                fm = f().item()
                flat[j] += eps
                num, ana = (fp - fm) / (2 * eps), float(g.view(-1)[j])
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), floor))
    return worst


def _emb(z, y):
    z = torch.as_tensor(np.asarray(z), dtype=D64)
    return EmbeddingMap(z.T[None, :, None, :], torch.as_tensor(np.asarray(y))[None, None])


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for p in files:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# --- smoke run shared by criteria 5 and 6 --------------------------------------------

SMOKE_GEN = GeneratorConfig(seed=1, image_size=64, n_branches=4, vessel_width_range=(3, 8), depth=3)
SMOKE_NET = replace(NetworkConfig.from_preset("desk"), depth=3)
SMOKE_TRAIN = TrainConfig(epochs=200, batch_size=8, lr=1e-3, max_steps=200, augment=False,
                          eval_every=10, seed=0)
_SMOKE = {}


def smoke_run():
    if not _SMOKE:
        data = generate_dataset(SMOKE_GEN, 8)
        t0 = time.perf_counter()
        rec = train_fold(SMOKE_NET, SMOKE_TRAIN, data)
        _SMOKE.update(data=data, rec=rec, seconds=time.perf_counter() - t0)
    return _SMOKE


# --- criteria -----------------------------------------------------------------------

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    p = torch.tensor(rng.uniform(0.05, 0.95, 32))
    y = torch.tensor(rng.integers(0, 2, 32), dtype=D64)
    errs = {"bce": _fd_max_rel(lambda q: bce_loss(q, y), p),
            "dice": _fd_max_rel(lambda q: dice_loss(q, y), p)}
    z = rng.standard_normal((16, 3))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    lab = rng.integers(0, 2, 16)
    lab[:4] = [0, 1, 0, 1]
    labels = torch.tensor(lab)[None, None]
    cfg = ContrastiveConfig(margin=1.2)
    errs["sce"] = _fd_max_rel(
        lambda v: sce_loss(EmbeddingMap(v.T[None, :, None, :], labels), cfg), torch.tensor(z))
    protos = torch.tensor([[1.0, 0.5, 0.0], [-0.2, 1.0, 0.3]], dtype=D64)
    protos = protos / protos.norm(dim=1, keepdim=True)
    assert np.abs((1 - z @ protos.numpy().T) - cfg.margin).min() > 1e-3  # away from hinge kink
    errs["pcl"] = _fd_max_rel(
        lambda v: pcl_loss(EmbeddingMap(v.T[None, :, None, :], labels), protos, cfg), torch.tensor(z))
    net = _net_grad_max_rel()
    el = time.perf_counter() - t0
    ok = all(e < 1e-4 for e in errs.values()) and net < 1e-3 and el < 120
    detail = " ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f" network={net:.1e}"
    record(1, ok, detail, el)
    assert ok


def test_criterion_2_metric_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    pairs = []
    while len(pairs) < 200:
        a = rng.random((16, 16)) < rng.uniform(0.05, 0.7)
        b = rng.random((16, 16)) < rng.uniform(0.05, 0.7)
        if a.any() and b.any():
            pairs.append((a, b))
    exact, worst = True, 0.0
    for a, b in pairs:
        c = metrics.confusion(a, b)
        tp, fp, fn, tn = oracle.confusion(a, b)
        ref = metrics.ConfusionCounts(tp, fp, fn, tn)
        exact &= c == ref
        exact &= metrics.dice_score(c) == metrics.dice_score(ref)
        exact &= metrics.recall(c) == metrics.recall(ref) and metrics.f1(c) == metrics.f1(ref)
        worst = max(worst, abs(metrics.asd(a, b) - oracle.asd(a, b)),
                    abs(metrics.acd(a, b) - oracle.acd(a, b)))
    el = time.perf_counter() - t0
    ok = bool(exact) and worst <= 1e-9 and el < 60
    record(2, ok, f"200 pairs, overlap exact={bool(exact)}, max |ASD/ACD - oracle|={worst:.1e}", el)
    assert ok


def test_criterion_3_loss_identities():
    t0 = time.perf_counter()
    y = torch.tensor([1, 0, 1, 1, 0, 0, 1], dtype=D64)
    bce_half = bce_loss(torch.full_like(y, 0.5), y).item()
    c1 = abs(bce_half - math.log(2)) <= 1e-9

    c2 = True
    for n_fg in (1, 3, 20):
        t = torch.zeros(64, dtype=D64)
        t[:n_fg] = 1
        c2 &= dice_loss(t.clone(), t, smooth=1.0).item() <= 1.0 / (2 * n_fg)

    protos = torch.tensor([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0]], dtype=D64)
    cfg = ContrastiveConfig(margin=0.5)
    fg = np.array([[0.9, 0.3, 0.1], [0.8, 0.5, 0.2]])
    far = np.array([[-0.7, 0.1, 0.7], [0.0, 0.0, 1.0], [0.3, -0.9, 0.1]])
    far /= np.linalg.norm(far, axis=1, keepdims=True)
    assert (1 - far @ protos.numpy().T).min() >= cfg.margin
    with_far = pcl_loss(_emb(np.vstack([fg, far]), [1, 1, 0, 0, 0]), protos, cfg).item()
    fg_only = pcl_loss(_emb(fg, [1, 1]), protos, cfg).item()
    # same numerator; only N changes (2 -> 5)
    c3 = abs(with_far * 5 - fg_only * 2) <= 1e-15
    zero_bg = all(pcl_loss(_emb(far[i:i + 1], [0]), protos, cfg).item() == 0.0 for i in range(3))
    c3 = c3 and zero_bg

    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 1, 16, 16, generator=g, dtype=D64)
    mask = (torch.rand(2, 1, 16, 16, generator=g) > 0.7).to(D64)
    emb = torch.randn(2, 8, 4, 4, generator=g, dtype=D64)
    emb = emb / emb.norm(dim=1, keepdim=True)
    tot, _ = total_loss(logits, mask, emb, LossWeights(1, 1, 0))
    pr = torch.sigmoid(logits)
    c4 = torch.equal(tot, 1 * bce_loss(pr, mask) + 1 * dice_loss(pr, mask))
    el = time.perf_counter() - t0
    ok = bool(c1 and c2 and c3 and c4)
    record(3, ok, f"bce(0.5)-ln2={bce_half - math.log(2):.1e} dice_bound={bool(c2)} "
                  f"hard_neg_zero={bool(c3)} gamma0_bitwise={bool(c4)}", el)
    assert ok


def test_criterion_4_shapes_and_parameters():
    t0 = time.perf_counter()
    model = MSAUNet3Plus(NetworkConfig.from_preset("paper")).eval()
    n = count_parameters(model)
    with torch.no_grad():
        out = model(torch.randn(2, 1, 256, 256))
    norms = out.embeddings.norm(dim=1)
    el = time.perf_counter() - t0
    ok = (tuple(out.logits.shape) == (2, 1, 256, 256)
          and tuple(out.embeddings.shape) == (2, 64, 16, 16)
          and bool(((norms - 1).abs() <= 1e-5).all())
          and 6.0e6 <= n <= 9.0e6 and el < 60)
    record(4, ok, f"logits {tuple(out.logits.shape)} emb {tuple(out.embeddings.shape)} "
                  f"max|norm-1|={(norms - 1).abs().max().item():.1e} params={n:,}", el)
    assert ok


@pytest.mark.slow
def test_criterion_5_overfit_smoke():
    s = smoke_run()
    rec = s["rec"]
    steps = rec.epoch_logs[-1]["steps"]
    report = evaluate(rec.model, s["data"])
    dice = report.mean("dice")
    ok = dice >= 0.95 and steps <= 200 and s["seconds"] < 600
    record(5, ok, f"train Dice={dice:.4f} after {steps} steps (8 samples, desk preset, depth 3, 64x64)",
           s["seconds"])
    assert ok


@pytest.mark.slow
def test_criterion_6_embedding_separation_and_gamma_delta():
    t0 = time.perf_counter()
    s = smoke_run()
    sep = embedding_separation(s["rec"].model, s["data"], SMOKE_TRAIN.contrastive)
    # reported, not asserted: gamma=1 vs gamma=0 on 60 samples, 5 folds
    gen = GeneratorConfig(seed=11, image_size=32, n_branches=4, vessel_width_range=(2, 6), depth=3)
    data = generate_dataset(gen, 60)
    cfg = TrainConfig(epochs=6, batch_size=5, lr=1e-3, augment=True, seed=0, eval_every=3)
    ga = gamma_ablation(SMOKE_NET, cfg, data, k=5)
    d0, d1 = ga.arms[0].fold_values("dice"), ga.arms[1].fold_values("dice")
    delta = float(d1.mean() - d0.mean())
    el = time.perf_counter() - t0
    ok = sep["gap"] >= 0.2
    record(6, ok, f"cos-to-prototype fg={sep['fg']:.3f} bg={sep['bg']:.3f} gap={sep['gap']:.3f} "
                  f"(n_fg={sep['n_fg']}, n_bg={sep['n_bg']}); reported: 5-fold Dice "
                  f"gamma0={d0.mean():.4f} gamma1={d1.mean():.4f} delta={delta:+.4f} "
                  f"p={ga.tests['dice']['p']:.3f}", el)
    assert ok


@pytest.mark.slow
def test_criterion_7_protocol_fidelity(tmp_path):
    t0 = time.perf_counter()
    net = NetworkConfig(depth=3, base_channels=4, decoder_channels=4, embedding_dim=8)
    gen = GeneratorConfig(seed=4, image_size=16, depth=3, n_branches=2, vessel_width_range=(2, 4))
    data = generate_dataset(gen, 10)
    cfg = TrainConfig(epochs=1, batch_size=4, lr=1e-3, max_steps=2)

    ca = component_ablation(net, cfg, data, k=2)
    combos = [(r["spcl"], r["cafm"], r["msd"]) for r in ca.rows]
    grid_ok = (len(ca.rows) == 8 and len(set(combos)) == 8 and combos[0] == (False, False, False)
               and combos[-1] == (True, True, True) and [r["idx"] for r in ca.rows] == list(range(1, 9))
               and [g["idx"] for g in component_grid()] == list(range(1, 9)))

    ga = gamma_ablation(net, cfg, data, k=5)
    pair_ok = ga.arms[0].folds == ga.arms[1].folds and len(ga.arms[0].runs) == 5
    reporting.dump_gamma(ga, tmp_path)
    table = reporting.render_report(tmp_path)["table"]
    worst, marks_ok = 0.0, True
    for m in ("recall", "f1", "dice", "asd", "acd"):
        a, b = ga.arms[1].fold_values(m), ga.arms[0].fold_values(m)
        d = a - b
        n = len(d)
        mean = sum(d) / n
        sd = math.sqrt(sum((x - mean) ** 2 for x in d) / (n - 1))
        if sd == 0:
            continue
        t_ref = mean / (sd / math.sqrt(n))
        worst = max(worst, abs(ga.tests[m]["t"] - t_ref), abs(table[1][f"{m}_t"] - t_ref))
        marks_ok &= ga.tests[m]["marker"] == marker(ga.tests[m]["p"]) == table[1][f"{m}_marker"]
    lr_ok = [lr_at(e, TrainConfig()) for e in (59, 60, 80)] == [1e-4, 1e-5, 1e-6]
    el = time.perf_counter() - t0
    ok = grid_ok and pair_ok and worst <= 1e-9 and marks_ok and lr_ok
    record(7, ok, f"8-config grid={grid_ok} paired folds={pair_ok} max|t - closed form|={worst:.1e} "
                  f"markers={bool(marks_ok)} lr(59,60,80) exact={lr_ok}", el)
    assert ok


@pytest.mark.slow
def test_criterion_8_determinism(tmp_path):
    t0 = time.perf_counter()
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text(json.dumps({
        "network": {"preset": "desk", "depth": 3},
        "train": {"epochs": 2, "batch_size": 4, "lr": 1e-3, "max_steps": 4},
        "generator": {"image_size": 32, "n_branches": 3, "vessel_width_range": [2, 5], "depth": 3},
    }))
    c = str(cfgfile)
    same = {}
    for run in ("a", "b"):
        r = tmp_path / run
        assert cli_main(["generate", "--out", str(r / "ds"), "--count", "10", "--seed", "5",
                         "--config", c, "--test-fraction", "0.2"]) == 0
        assert cli_main(["train", "--config", c, "--data", str(r / "ds"), "--k", "2",
                         "--out", str(r / "runs"), "--tag", "det", "--deterministic"]) == 0
        (rd,) = [p for p in (r / "runs").iterdir()]
        assert cli_main(["evaluate", "--checkpoint", str(rd / "checkpoint.pt"), "--data",
                         str(r / "ds"), "--config", c, "--out", str(r / "eval")]) == 0
        assert cli_main(["ablate", "--mode", "gamma", "--config", c, "--data", str(r / "ds"),
                         "--k", "2", "--epochs", "1", "--out", str(r / "abl"), "--deterministic",
                         "--panels", "1"]) == 0
        same.setdefault("generate", []).append(_digest(r / "ds"))
        same.setdefault("train metrics.csv", []).append(_digest(rd / "metrics.csv"))
        same.setdefault("evaluate metrics.csv", []).append(_digest(r / "eval" / "metrics.csv"))
        fold_csvs = sorted((r / "abl" / "runs").rglob("metrics.csv"))
        same.setdefault("ablate metrics.csv", []).append("".join(_digest(p) for p in fold_csvs))
        same.setdefault("ablate table.csv", []).append(_digest(r / "abl" / "table.csv"))
    ok = all(v[0] == v[1] for v in same.values())
    el = time.perf_counter() - t0
    record(8, ok, " ".join(f"{k}={'same' if v[0] == v[1] else 'DIFFERENT'}" for k, v in same.items()), el)
    assert ok


if __name__ == "__main__":
    import tempfile

    failed = 0
    for name, fn in list(globals().items()):
        if not name.startswith("test_criterion_"):
            continue
        try:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except AssertionError:
            failed += 1
    print("\n".join(["", "summary:"] + RESULTS))
    sys.exit(1 if failed else 0)

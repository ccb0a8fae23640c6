"""Training loop, cross-validation and the two ablation protocols (loss weight gamma,
and the SPCL x CAFM x MSD component grid)."""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch

from .architecture import MSAUNet3Plus, NetworkConfig, count_parameters
from .checkpoint import save_checkpoint
from .data import SegmentationSample, augment, kfold_split
from .losses import (RECORD_FIELDS, ContrastiveConfig, LearnablePrototypes, LossBreakdown,
                     LossWeights, total_loss)
from .metrics import METRIC_NAMES, MetricsReport, evaluate_masks
from .stats import paired_test

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_ids: list[str]):
        self.epoch = epoch
        self.batch_ids = batch_ids
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_ids}")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 5
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_milestones: tuple[float, ...] = (0.6, 0.8)
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    use_spcl: bool = True
    use_cafm: bool = True
    use_msd: bool = True
    augment: bool = True
    deterministic: bool = True
    threshold: float = 0.5
    eval_every: int = 1
    max_steps: int | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.contrastive, dict):
            self.contrastive = ContrastiveConfig(**self.contrastive)
        self.lr_milestones = tuple(float(m) for m in self.lr_milestones)
        ms = self.lr_milestones
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("lr_milestones: must be strictly increasing within (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs: must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"{unknown[0]}: unknown train config field")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @property
    def effective_weights(self) -> LossWeights:
        if self.use_spcl:
            return self.weights
        return replace(self.weights, gamma=0.0)

    def network_config(self, base: NetworkConfig) -> NetworkConfig:
        return replace(base, use_cafm=self.use_cafm, use_msd=self.use_msd)


def milestone_epochs(cfg: TrainConfig) -> list[int]:
    return [int(round(m * cfg.epochs)) for m in cfg.lr_milestones]


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate for a 0-based epoch, computed in exact decimal."""
    passed = sum(epoch >= m for m in milestone_epochs(cfg))
    return float(Decimal(repr(cfg.lr)) * Decimal(repr(cfg.lr_decay_factor)) ** passed)


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent RNG streams: init, data order, augmentation, loss sampling."""
    names = ("init", "order", "augment", "loss")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)
    torch.backends.cudnn.deterministic = flag
    torch.backends.cudnn.benchmark = not flag


def _batch(samples: list[SegmentationSample]):
    x = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    y = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))[:, None]
    return x, y


@torch.no_grad()
def predict_probs(model: MSAUNet3Plus, samples, batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        x, _ = _batch(samples[i:i + batch_size])
        out.append(torch.sigmoid(model(x).logits)[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0, 0, 0))


def evaluate(model: MSAUNet3Plus, samples, threshold: float = 0.5, backend: str = "fast") -> MetricsReport:
    probs = predict_probs(model, samples)
    preds = [p >= threshold for p in probs]
    return evaluate_masks(preds, [s.mask for s in samples], [s.id for s in samples], backend)


@dataclass
class RunRecord:
    config: dict
    epoch_logs: list[dict]
    report: MetricsReport          # validation metrics of the best-Dice checkpoint
    final_report: MetricsReport | None
    best_epoch: int
    wall_clock: float
    n_params: int
    checkpoint_path: str | None = None
    model: MSAUNet3Plus | None = field(default=None, repr=False)


LOG_FIELDS = ["epoch", "lr", "steps", *RECORD_FIELDS, "val_dice"]


def _mean_breakdown(parts: list[LossBreakdown]) -> dict:
    rec = {}
    for k in ("bce", "dice", "sce", "pcl", "total"):
        rec[k] = float(np.mean([getattr(p, k) for p in parts]))
    rec["sce_skipped"] = int(all(p.sce_skipped for p in parts))
    rec["pcl_skipped"] = int(all(p.pcl_skipped for p in parts))
    return rec


def train_fold(model_cfg: NetworkConfig, train_cfg: TrainConfig,
               train_samples: list[SegmentationSample],
               val_samples: list[SegmentationSample] | None = None,
               run_dir=None) -> RunRecord:
    if not train_samples:
        raise ValueError("train_fold: empty training set")
    set_deterministic(train_cfg.deterministic)
    t0 = time.perf_counter()
    streams = seed_streams(train_cfg.seed)
    net_cfg = train_cfg.network_config(model_cfg)
    torch.manual_seed(int(streams["init"].integers(2**31 - 1)))
    model = MSAUNet3Plus(net_cfg)
    params = list(model.parameters())
    protos = None
    if train_cfg.contrastive.learnable_prototypes:
        protos = LearnablePrototypes(train_cfg.contrastive.n_p, net_cfg.embedding_dim,
                                     seed=train_cfg.seed)
        params += list(protos.parameters())
    opt = torch.optim.Adam(params, lr=train_cfg.lr, weight_decay=0.0)
    weights = train_cfg.effective_weights
    val_samples = val_samples if val_samples else train_samples

    logs: list[dict] = []
    best = (-1.0, -1, None)
    steps = 0
    n = len(train_samples)
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        order = streams["order"].permutation(n)
        parts = []
        for i in range(0, n, train_cfg.batch_size):
            if train_cfg.max_steps is not None and steps >= train_cfg.max_steps:
                break
            batch = [train_samples[j] for j in order[i:i + train_cfg.batch_size]]
            if train_cfg.augment:
                batch = [augment(s, streams["augment"]) for s in batch]
            x, y = _batch(batch)
            out = model(x)
            loss, br = total_loss(out.logits, y, out.embeddings, weights, train_cfg.contrastive,
                                  streams["loss"], prototypes=protos() if protos else None)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, [s.id for s in batch])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            steps += 1
            parts.append(br)
        rec = {"epoch": epoch, "lr": lr, "steps": steps}
        rec.update(_mean_breakdown(parts) if parts else {k: 0.0 for k in RECORD_FIELDS})
        last = epoch == train_cfg.epochs - 1 or (
            train_cfg.max_steps is not None and steps >= train_cfg.max_steps)
        if (epoch + 1) % train_cfg.eval_every == 0 or last:
            rep = evaluate(model, val_samples, train_cfg.threshold)
            rec["val_dice"] = rep.mean("dice")
            if rec["val_dice"] > best[0]:
                best = (rec["val_dice"], epoch, copy.deepcopy(model.state_dict()))
        else:
            rec["val_dice"] = math.nan
        logs.append(rec)
        log.info("epoch %d lr %.2e loss %.4f val_dice %.4f", epoch, lr, rec["total"], rec["val_dice"])
        if last:
            break

    final_report = evaluate(model, val_samples, train_cfg.threshold)
    model.load_state_dict(best[2])
    report = evaluate(model, val_samples, train_cfg.threshold)
    record = RunRecord(
        config={"network": net_cfg.to_dict(), "train": train_cfg.to_dict()},
        epoch_logs=logs, report=report, final_report=final_report, best_epoch=best[1],
        wall_clock=time.perf_counter() - t0, n_params=count_parameters(model), model=model,
    )
    if run_dir is not None:
        write_run(record, run_dir, seed=train_cfg.seed)
    return record


def _fmt6(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_log_csv(logs: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for rec in logs:
            row = []
            for k in LOG_FIELDS:
                v = rec.get(k, "")
                row.append(f"{v:.6e}" if k == "lr" else _fmt6(v))
            w.writerow(row)


def write_run(record: RunRecord, run_dir, seed: int | None = None) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(record.config, fh, indent=2, sort_keys=True)
    write_log_csv(record.epoch_logs, run_dir / "log.csv")
    record.report.to_csv(run_dir / "metrics.csv")
    record.report.to_json(run_dir / "metrics.json")
    if record.final_report is not None:
        record.final_report.to_csv(run_dir / "metrics_final_epoch.csv")
    if record.model is not None:
        ck = save_checkpoint(run_dir / "checkpoint.pt", record.model, seed=seed,
                             extra={"best_epoch": record.best_epoch})
        record.checkpoint_path = str(ck)


@torch.no_grad()
def embedding_separation(model: MSAUNet3Plus, samples, cfg: ContrastiveConfig | None = None,
                         seed: int = 0) -> dict:
    """Mean cosine similarity to the nearest foreground prototype, for foreground
    and background embedding pixels, and their gap."""
    from .losses import EmbeddingMap, build_prototypes, downsample_labels

    cfg = cfg or ContrastiveConfig()
    model.eval()
    x, y = _batch(samples)
    emb = model(x).embeddings
    labels = downsample_labels(y[:, 0], y.shape[-1] // emb.shape[-1])
    em = EmbeddingMap(emb, labels)
    protos = build_prototypes(em, cfg, np.random.default_rng(seed))
    z, lab = em.valid()
    nearest = (z @ protos.T).max(dim=1).values
    fg = float(nearest[lab == 1].mean())
    bg = float(nearest[lab == 0].mean())
    return {"fg": fg, "bg": bg, "gap": fg - bg,
            "n_fg": int((lab == 1).sum()), "n_bg": int((lab == 0).sum())}


# --- cross-validation -------------------------------------------------------

@dataclass
class CVResult:
    runs: list[RunRecord]
    val_reports: list[MetricsReport]
    test_reports: list[MetricsReport]
    folds: list[tuple[list[int], list[int]]]

    @property
    def eval_reports(self) -> list[MetricsReport]:
        """Reports used for comparisons: held-out test split when present, else validation."""
        if self.test_reports and all(len(r.samples) for r in self.test_reports):
            return self.test_reports
        return self.val_reports

    def fold_values(self, metric: str) -> np.ndarray:
        return np.array([r.mean(metric) for r in self.eval_reports])

    def aggregate(self) -> dict:
        out = {}
        for m in METRIC_NAMES:
            v = self.fold_values(m)
            v = v[~np.isnan(v)]
            out[m] = {"mean": float(v.mean()) if len(v) else math.nan,
                      "std": float(v.std()) if len(v) else math.nan,
                      "folds": self.fold_values(m).tolist()}
        return out


def split_train_test(dataset: list[SegmentationSample]):
    train = [s for s in dataset if s.split != "test"]
    test = [s for s in dataset if s.split == "test"]
    return train, test


def cross_validate(model_cfg: NetworkConfig, train_cfg: TrainConfig, dataset, k: int = 5,
                   run_root=None) -> CVResult:
    train_pool, test = split_train_test(dataset)
    folds = kfold_split(train_pool, k, seed=train_cfg.seed)
    runs, vals, tests = [], [], []
    for i, (tr, va) in enumerate(folds):
        rd = Path(run_root) / f"fold{i}" if run_root is not None else None
        rec = train_fold(model_cfg, train_cfg, [train_pool[j] for j in tr],
                         [train_pool[j] for j in va], run_dir=rd)
        runs.append(rec)
        vals.append(rec.report)
        tests.append(evaluate(rec.model, test, train_cfg.threshold) if test else MetricsReport())
        rec.model = None  # release weights; the checkpoint (if any) is on disk
    return CVResult(runs, vals, tests, [(tr.tolist(), va.tolist()) for tr, va in folds])


# --- ablation protocols -----------------------------------------------------

@dataclass
class GammaAblation:
    arms: dict  # gamma -> CVResult
    tests: dict  # metric -> paired test dict

    def rows(self) -> list[dict]:
        out = []
        for g, cv in self.arms.items():
            agg = cv.aggregate()
            row = {"gamma": g}
            for m in METRIC_NAMES:
                row[m] = agg[m]["mean"]
                row[f"{m}_std"] = agg[m]["std"]
                row[f"{m}_marker"] = self.tests[m]["marker"] if g != 0 else ""
            out.append(row)
        return out


def gamma_ablation(model_cfg: NetworkConfig, train_cfg: TrainConfig, dataset, k: int = 5,
                   run_root=None) -> GammaAblation:
    arms = {}
    for g in (0, 1):
        cfg = replace(train_cfg, use_spcl=bool(g), weights=replace(train_cfg.weights, gamma=float(g)))
        rr = Path(run_root) / f"gamma{g}" if run_root is not None else None
        arms[g] = cross_validate(model_cfg, cfg, dataset, k, run_root=rr)
    if arms[0].folds != arms[1].folds:
        raise RuntimeError("gamma ablation arms were trained on different folds")
    tests = {}
    for m in METRIC_NAMES:
        a, b = arms[1].fold_values(m), arms[0].fold_values(m)
        ok = ~(np.isnan(a) | np.isnan(b))
        try:
            tests[m] = paired_test(a[ok], b[ok], m)
        except ValueError:
            tests[m] = {"t": math.nan, "df": 0, "p": math.nan, "marker": ""}
    return GammaAblation(arms, tests)


def component_grid() -> list[dict]:
    """The eight (spcl, cafm, msd) settings; SPCL varies fastest, MSD slowest."""
    rows = []
    for idx, (msd, cafm, spcl) in enumerate(itertools.product((False, True), repeat=3), start=1):
        rows.append({"idx": idx, "spcl": spcl, "cafm": cafm, "msd": msd})
    return rows


@dataclass
class ComponentAblation:
    rows: list[dict]  # grid row + aggregate + n_params
    results: list[CVResult]


def component_ablation(model_cfg: NetworkConfig, train_cfg: TrainConfig, dataset, k: int = 5,
                       run_root=None) -> ComponentAblation:
    rows, results = [], []
    for g in component_grid():
        cfg = replace(train_cfg, use_spcl=g["spcl"], use_cafm=g["cafm"], use_msd=g["msd"])
        rr = Path(run_root) / f"config{g['idx']}" if run_root is not None else None
        cv = cross_validate(model_cfg, cfg, dataset, k, run_root=rr)
        n_params = count_parameters(MSAUNet3Plus(cfg.network_config(model_cfg)))
        rows.append({**g, "n_params": n_params, "metrics": cv.aggregate()})
        results.append(cv)
    return ComponentAblation(rows, results)

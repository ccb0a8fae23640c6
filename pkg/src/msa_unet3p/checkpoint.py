"""Single-file checkpoints: parameters keyed by hierarchical module name plus a manifest.

Parameter names follow the module tree of :class:`MSAUNet3Plus` (see
docs/checkpoint.md); they are part of the public checkpoint format.
"""
from __future__ import annotations

from pathlib import Path

import torch

from . import __version__
from .architecture import MSAUNet3Plus, NetworkConfig

FORMAT = "msa_unet3p-checkpoint/1"


class CheckpointMismatch(ValueError):
    def __init__(self, fields: list[str]):
        self.fields = fields
        super().__init__("checkpoint/config mismatch in fields: " + ", ".join(fields))


def save_checkpoint(path, model: MSAUNet3Plus, seed: int | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT,
        "network_config": model.cfg.to_dict(),
        "library_version": __version__,
        "torch_version": str(torch.__version__),
        "seed": seed,
    }
    if extra:
        manifest.update(extra)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save({"manifest": manifest, "state_dict": state}, path)
    return path


def read_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("manifest", {}).get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    return blob


def config_diff(a: NetworkConfig, b: NetworkConfig) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return sorted(k for k in da if da[k] != db.get(k))


def load_checkpoint(path, expected: NetworkConfig | None = None):
    """Return ``(model, manifest)``; raises :class:`CheckpointMismatch` when
    ``expected`` disagrees with the stored network config."""
    blob = read_checkpoint(path)
    cfg = NetworkConfig.from_dict(blob["manifest"]["network_config"])
    if expected is not None:
        diff = config_diff(expected, cfg)
        if diff:
            raise CheckpointMismatch(diff)
    model = MSAUNet3Plus(cfg)
    model.load_state_dict(blob["state_dict"], strict=True)
    model.eval()
    return model, blob["manifest"]

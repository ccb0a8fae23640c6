"""MSA-UNet3+ network: M-Encoder stack, MSD bottleneck, CAFM skip refinement
and a UNet3+ full-scale decoder with a segmentation head and an embedding head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

PRESETS = {
    "paper": dict(base_channels=12, decoder_channels=24),
    "desk": dict(base_channels=8, decoder_channels=8),
}

# Embedding vectors whose pre-norm magnitude falls below this are replaced
# by the first basis vector.
ZERO_NORM_EPS = 1e-12


class ConfigurationError(ValueError):
    pass


@dataclass
class NetworkConfig:
    depth: int = 5
    base_channels: int = 8
    decoder_channels: int = 8
    embedding_dim: int = 64
    se_reduction: int = 4
    input_channels: int = 1
    preset: str = "desk"
    use_cafm: bool = True
    use_msd: bool = True

    @classmethod
    def from_preset(cls, preset: str = "desk", **overrides) -> "NetworkConfig":
        if preset not in PRESETS:
            raise ConfigurationError(f"preset: unknown preset {preset!r}")
        kw = dict(PRESETS[preset])
        kw.update(overrides)
        return cls(preset=preset, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"{unknown[0]}: unknown network config field")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]

    def validate(self) -> None:
        if self.depth < 3:
            raise ConfigurationError("depth: must be >= 3")
        for name in ("base_channels", "decoder_channels", "embedding_dim",
                     "se_reduction", "input_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be >= 1")
        if self.preset not in PRESETS:
            raise ConfigurationError(f"preset: unknown preset {self.preset!r}")
        r = self.se_reduction
        se_widths = [3 * c for c in self.encoder_channels()]
        if self.use_cafm:
            se_widths.append(4 * self.decoder_channels)
        for c in se_widths:
            if c % r:
                raise ConfigurationError(
                    f"se_reduction: {r} does not divide SE width {c}")

    def check_input(self, height: int, width: int) -> None:
        f = 2 ** (self.depth - 1)
        if height <= 0 or width <= 0 or height % f or width % f:
            raise ConfigurationError(
                f"input size {height}x{width} not divisible by 2^(depth-1)={f}")


def _groups(c: int, max_groups: int = 8) -> int:
    for g in range(min(c, max_groups), 0, -1):
        if c % g == 0:
            return g
    return 1


class ConvNormAct(nn.Sequential):
    """conv -> GroupNorm -> ReLU. GroupNorm keeps batch sizes 1 and 5 equivalent."""

    def __init__(self, cin: int, cout: int, kernel_size: int = 3, dilation: int = 1):
        pad = dilation * (kernel_size // 2)
        super().__init__(
            nn.Conv2d(cin, cout, kernel_size, padding=pad, dilation=dilation),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=False),
        )


class SEBlock(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(
                f"se_reduction: {reduction} does not divide channel count {channels}")
        hidden = channels // reduction
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)
        self.bypass = False

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        if self.bypass:
            return x
        return x * self.gates(x)


class MEncoderBlock(nn.Module):
    """Three chained conv3x3 stages, concatenated, SE-recalibrated and reduced."""

    def __init__(self, cin: int, cout: int, se_reduction: int = 4, width: int | None = None):
        super().__init__()
        w = width or cout
        self.conv1 = ConvNormAct(cin, w)
        self.conv2 = ConvNormAct(w, w)
        self.conv3 = ConvNormAct(w, w)
        self.se = SEBlock(3 * w, se_reduction)
        self.reduce = ConvNormAct(3 * w, cout)

    def concat(self, x):
        o1 = self.conv1(x)
        o2 = self.conv2(o1)
        o3 = self.conv3(o2)
        return torch.cat([o1, o2, o3], dim=1)

    def forward(self, x):
        return self.reduce(self.se(self.concat(x)))


class DilatedResBlock(nn.Module):
    def __init__(self, channels: int, dilations: tuple[int, int, int]):
        super().__init__()
        self.convs = nn.Sequential(*[ConvNormAct(channels, channels, dilation=d)
                                     for d in dilations])

    def forward(self, x):
        return x + self.convs(x)


class ASPP(nn.Module):
    def __init__(self, channels: int, rates: tuple[int, ...] = (4, 8)):
        super().__init__()
        self.branches = nn.ModuleList([ConvNormAct(channels, channels, dilation=r)
                                       for r in rates])
        # no norm on the 1x1 pooled map
        self.pool_proj = nn.Conv2d(channels, channels, 1)
        self.project = ConvNormAct(channels * (len(rates) + 1), channels, kernel_size=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        feats = [b(x) for b in self.branches]
        g = F.relu(self.pool_proj(x.mean(dim=(2, 3), keepdim=True)))
        feats.append(g.expand(-1, -1, h, w))
        return self.project(torch.cat(feats, dim=1))


class MSDBottleneck(nn.Module):
    DILATIONS = ((1, 2, 1), (2, 4, 2), (4, 8, 4))

    def __init__(self, channels: int):
        super().__init__()
        self.blocks = nn.Sequential(*[DilatedResBlock(channels, d) for d in self.DILATIONS])
        self.aspp = ASPP(channels)

    def forward(self, x):
        if min(x.shape[-2:]) < 2:
            raise ConfigurationError(
                f"bottleneck input {tuple(x.shape[-2:])} too small for global pooling")
        return self.aspp(self.blocks(x))


class CAFM(nn.Module):
    RATES = (1, 2, 4, 8)

    def __init__(self, cin: int, cout: int, se_reduction: int = 4, branch_width: int | None = None):
        super().__init__()
        bw = branch_width or cout
        self.branches = nn.ModuleList([ConvNormAct(cin, bw, dilation=r) for r in self.RATES])
        self.se = SEBlock(4 * bw, se_reduction)
        self.fuse = ConvNormAct(4 * bw, cout)

    def concat(self, x):
        return torch.cat([b(x) for b in self.branches], dim=1)

    def forward(self, x):
        return self.fuse(self.se(self.concat(x)))


def l2_normalize(z: torch.Tensor, dim: int = 1) -> torch.Tensor:
    norm = z.norm(dim=dim, keepdim=True)
    small = norm < ZERO_NORM_EPS
    out = z / norm.clamp_min(ZERO_NORM_EPS)
    if small.any():
        basis = torch.zeros_like(z)
        basis.narrow(dim, 0, 1).fill_(1.0)
        out = torch.where(small, basis, out)
    return out


@dataclass
class NetworkOutput:
    logits: torch.Tensor
    embeddings: torch.Tensor
    extras: dict = field(default_factory=dict)


class MSAUNet3Plus(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        cfg.validate()
        self.cfg = cfg
        enc = cfg.encoder_channels()
        depth, dc = cfg.depth, cfg.decoder_channels

        self.encoders = nn.ModuleList()
        cin = cfg.input_channels
        for c in enc:
            self.encoders.append(MEncoderBlock(cin, c, cfg.se_reduction))
            cin = c
        deep = enc[-1]
        if cfg.use_msd:
            self.bottleneck = MSDBottleneck(deep)
        else:
            self.bottleneck = ConvNormAct(deep, deep)

        # skip refinement for encoder levels 1..depth-1
        if cfg.use_cafm:
            self.cafm = nn.ModuleList([CAFM(c, dc, cfg.se_reduction) for c in enc[:-1]])
            skip_ch = [dc] * (depth - 1)
        else:
            self.cafm = nn.ModuleList([nn.Identity() for _ in enc[:-1]])
            skip_ch = enc[:-1]

        fused = dc * depth
        # decoders[j] builds decoder level j+1 (1-based), for levels depth-1 .. 1
        self.decoders = nn.ModuleDict()
        for level in range(depth - 1, 0, -1):
            branches = nn.ModuleList()
            for i in range(1, level + 1):
                branches.append(ConvNormAct(skip_ch[i - 1], dc))
            for i in range(level + 1, depth + 1):
                c = deep if i == depth else fused
                branches.append(ConvNormAct(c, dc))
            self.decoders[f"level{level}"] = nn.ModuleDict(
                {"branches": branches, "fuse": ConvNormAct(fused, fused)})

        self.seg_head = nn.Conv2d(fused, 1, 1)
        self.embed_head = nn.Conv2d(deep, cfg.embedding_dim, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    fan_in = m.weight[0].numel()
                    bound = 1 / math.sqrt(fan_in)
                    nn.init.uniform_(m.bias, -bound, bound)
            elif isinstance(m, nn.GroupNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.seg_head.bias)
        nn.init.zeros_(self.embed_head.bias)

    def forward(self, x: torch.Tensor) -> NetworkOutput:
        cfg = self.cfg
        self.cfg.check_input(x.shape[-2], x.shape[-1])
        depth = cfg.depth

        feats = []
        h = x
        for i, enc in enumerate(self.encoders):
            if i:
                h = F.max_pool2d(h, 2)
            h = enc(h)
            feats.append(h)
        bott = self.bottleneck(feats[-1])
        skips = [m(f) for m, f in zip(self.cafm, feats[:-1])]

        # decoded[level] for level in 1..depth; the deepest "decoder" is the bottleneck
        decoded = {depth: bott}
        for level in range(depth - 1, 0, -1):
            mod = self.decoders[f"level{level}"]
            size = skips[level - 1].shape[-2:]
            parts = []
            k = 0
            for i in range(1, level + 1):
                s = skips[i - 1]
                if i < level:
                    s = F.max_pool2d(s, 2 ** (level - i))
                parts.append(mod["branches"][k](s))
                k += 1
            for i in range(level + 1, depth + 1):
                d = F.interpolate(decoded[i], size=size, mode="bilinear", align_corners=False)
                parts.append(mod["branches"][k](d))
                k += 1
            decoded[level] = mod["fuse"](torch.cat(parts, dim=1))

        logits = self.seg_head(decoded[1])
        emb = l2_normalize(self.embed_head(bott), dim=1)
        return NetworkOutput(logits=logits, embeddings=emb)


def forward(x: torch.Tensor, model: MSAUNet3Plus) -> NetworkOutput:
    return model(x)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)

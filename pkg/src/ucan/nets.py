"""DuSE-Net generator and the two-headed patch discriminator."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from ucan.core import NUM_DOMAINS, ShapeMismatchError, TrainConfig, ValidationError

CHECKPOINT_FORMAT = "ucan-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 2 + NUM_DOMAINS  # PET + MR + domain label
    out_channels: int = 1
    depth: int = 4
    base_width: int = 16
    latent_res_blocks: int = 3
    se_reduction: int = 8
    fusion: str = "max"

    def __post_init__(self):
        if self.in_channels != 2 + NUM_DOMAINS:
            raise ValidationError(f"generator takes {2 + NUM_DOMAINS} input channels, got {self.in_channels}")
        if self.depth < 1 or self.base_width < 1 or self.se_reduction < 1:
            raise ValidationError("depth, base_width and se_reduction must be positive")
        if self.fusion not in ("max", "add"):
            raise ValidationError(f"fusion must be 'max' or 'add', got {self.fusion!r}")

    @property
    def multiple(self) -> int:
        """Spatial extents must be divisible by this."""
        return 2**self.depth

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "GeneratorSpec":
        return cls(
            depth=cfg.depth,
            base_width=cfg.base_width,
            latent_res_blocks=cfg.res_blocks,
            se_reduction=cfg.se_reduction,
            fusion=cfg.fusion,
        )


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 1
    base_width: int = 16
    trunk_layers: int = 4
    num_classes: int = NUM_DOMAINS

    @property
    def num_layers(self) -> int:
        return self.trunk_layers + 2

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "DiscriminatorSpec":
        return cls(in_channels=2 if cfg.d_use_mr else 1, base_width=cfg.d_base_width)


class ChannelSE(nn.Module):
    """Channel gating: global average pool -> bottleneck MLP -> sigmoid."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.reduce = nn.Linear(channels, hidden)
        self.expand = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.expand(F.relu(self.reduce(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)[:, :, None, None, None]


class SpatialSE(nn.Module):
    """Voxel gating from a pointwise convolution across channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, 1, kernel_size=1)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class DuSEBlock(nn.Module):
    """Channel and spatial recalibration fused by element-wise max (or sum)."""

    def __init__(self, channels: int, reduction: int = 8, fusion: str = "max"):
        super().__init__()
        self.cse = ChannelSE(channels, reduction)
        self.sse = SpatialSE(channels)
        self.fusion = fusion

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c, s = self.cse(x), self.sse(x)
        if self.fusion == "max":
            return torch.maximum(c, s)
        return c + s


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.InstanceNorm3d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv3d(channels, channels, 3, padding=1),
            nn.InstanceNorm3d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Up(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False))


class DuSEGenerator(nn.Module):
    """3D U-Net with a DuSE block after every encoder/decoder stage and residual latent blocks.

    Input is the channel-wise concatenation (PET, MR, 3-channel domain label);
    output is a single tanh-activated channel of the same spatial shape.
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        widths = [spec.base_width * 2**i for i in range(spec.depth + 1)]
        r = spec.se_reduction

        self.encoders = nn.ModuleList()
        self.enc_se = nn.ModuleList()
        cin = spec.in_channels
        for w in widths[:-1]:
            self.encoders.append(_conv_block(cin, w))
            self.enc_se.append(DuSEBlock(w, r, spec.fusion))
            cin = w
        self.pool = nn.MaxPool3d(2)

        self.bottleneck = _conv_block(widths[-2], widths[-1])
        self.bottleneck_se = DuSEBlock(widths[-1], r, spec.fusion)
        self.latent = nn.Sequential(*[ResidualBlock(widths[-1]) for _ in range(spec.latent_res_blocks)])

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        self.dec_se = nn.ModuleList()
        for level in reversed(range(spec.depth)):
            self.ups.append(Up(widths[level + 1], widths[level]))
            self.decoders.append(_conv_block(2 * widths[level], widths[level]))
            self.dec_se.append(DuSEBlock(widths[level], r, spec.fusion))

        self.head = nn.Conv3d(widths[0], spec.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != self.spec.in_channels:
            raise ShapeMismatchError(f"expected (N, {self.spec.in_channels}, D, H, W) input, got {tuple(x.shape)}")
        if any(s % self.spec.multiple for s in x.shape[2:]):
            raise ShapeMismatchError(
                f"spatial shape {tuple(x.shape[2:])} not divisible by 2**depth = {self.spec.multiple}"
            )
        skips = []
        for enc, se in zip(self.encoders, self.enc_se):
            x = se(enc(x))
            skips.append(x)
            x = self.pool(x)
        x = self.latent(self.bottleneck_se(self.bottleneck(x)))
        for up, dec, se, skip in zip(self.ups, self.decoders, self.dec_se, reversed(skips)):
            x = se(dec(torch.cat([up(x), skip], dim=1)))
        return torch.tanh(self.head(x))


def generator_input(x_pet: torch.Tensor, x_mr: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Concatenate (N,1,...) PET, (N,1,...) MR and (N,3,...) label along channels."""
    if not (x_pet.shape[2:] == x_mr.shape[2:] == label.shape[2:]):
        raise ShapeMismatchError(
            f"PET {tuple(x_pet.shape[2:])}, MR {tuple(x_mr.shape[2:])} and label "
            f"{tuple(label.shape[2:])} spatial shapes differ"
        )
    return torch.cat([x_pet, x_mr, label.to(x_pet.dtype)], dim=1)


def generator_forward(g: DuSEGenerator, x_pet, x_mr, label) -> torch.Tensor:
    return g(generator_input(x_pet, x_mr, label))


class Discriminator(nn.Module):
    """Four stride-2 trunk convolutions feeding a real/fake head and a tracer-class head."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        cin = spec.in_channels
        for i in range(spec.trunk_layers):
            cout = spec.base_width * 2**i
            layers.append(nn.Conv3d(cin, cout, 4, stride=2, padding=1))
            layers.append(nn.InstanceNorm3d(cout, affine=True))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        self.trunk = nn.Sequential(*layers)
        self.gan_head = nn.Conv3d(cin, 1, 3, stride=1, padding=1)
        self.clsf_head = nn.Conv3d(cin, spec.num_classes, 3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (patch real/fake probabilities, (N, 3) tracer logits)."""
        if x.dim() != 5 or x.shape[1] != self.spec.in_channels:
            raise ShapeMismatchError(f"expected (N, {self.spec.in_channels}, D, H, W) input, got {tuple(x.shape)}")
        h = self.trunk(x)
        scores = torch.sigmoid(self.gan_head(h))
        logits = self.clsf_head(h).mean(dim=(2, 3, 4))
        return scores, logits

    def score_shape(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        out = tuple(spatial)
        for _ in range(self.spec.trunk_layers):
            out = tuple((s + 2 - 4) // 2 + 1 for s in out)
        return out  # type: ignore[return-value]


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path: str | Path, payload: dict[str, Any]) -> Path:
    """Write a checkpoint atomically. ``payload`` must carry ``g_state`` and the specs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **payload}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a UCAN checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return blob


def generator_from_checkpoint(blob_or_path) -> DuSEGenerator:
    blob = blob_or_path if isinstance(blob_or_path, dict) else load_checkpoint(blob_or_path)
    g = DuSEGenerator(GeneratorSpec(**blob["generator_spec"]))
    g.load_state_dict(blob["g_state"])
    g.eval()
    return g


def spec_dict(spec) -> dict:
    return asdict(spec)


def state_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


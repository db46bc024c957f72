"""Shared domain types, errors and run configuration."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

NUM_DOMAINS = 3


class UCANError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(UCANError, ValueError):
    pass


class InvalidRecordError(UCANError, ValueError):
    pass


class MissingModalityError(UCANError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ShapeMismatchError(UCANError, ValueError):
    pass


class ValidationError(UCANError, ValueError):
    pass


class TrainingDivergenceError(UCANError, RuntimeError):
    """A loss term became NaN/Inf; ``term`` names the offending component."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r} = {value}")
        self.term = term
        self.value = value


class ConfigError(UCANError, ValueError):
    """Configuration validation failure; ``errors`` maps field -> message."""

    def __init__(self, errors: Mapping[str, str]):
        self.errors = dict(errors)
        lines = [f"  {k}: {v}" for k, v in self.errors.items()]
        super().__init__("invalid configuration:\n" + "\n".join(lines))


class TracerId(enum.Enum):
    """PET tracer domain. A=FDG, B=UCB-J, C=PiB."""

    A = "A"
    B = "B"
    C = "C"

    @property
    def ordinal(self) -> int:
        return _ORDINALS[self]

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, value: "TracerId | str | int") -> "TracerId":
        if isinstance(value, TracerId):
            return value
        if isinstance(value, (int, np.integer)):
            return tracer_from_ordinal(int(value))
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ValidationError(f"unknown tracer {value!r}; expected one of A, B, C") from None


_ORDINALS = {TracerId.A: 0, TracerId.B: 1, TracerId.C: 2}
_FROM_ORDINAL = {v: k for k, v in _ORDINALS.items()}

TRACERS: tuple[TracerId, ...] = (TracerId.A, TracerId.B, TracerId.C)

# Table column order.
TASKS: tuple[tuple[TracerId, TracerId], ...] = tuple(
    (s, t) for s in TRACERS for t in TRACERS if s is not t
)


def ordinal(tracer: TracerId) -> int:
    return _ORDINALS[tracer]


def tracer_from_ordinal(index: int) -> TracerId:
    try:
        return _FROM_ORDINAL[index]
    except KeyError:
        raise ValidationError(f"tracer ordinal must be 0, 1 or 2, got {index}") from None


def task_name(source: TracerId, target: TracerId) -> str:
    return f"{source.value}->{target.value}"


def parse_task(name: str) -> tuple[TracerId, TracerId]:
    src, _, dst = name.partition("->")
    return TracerId.parse(src), TracerId.parse(dst)


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D scalar grid with voxel spacing in mm, axis order (D, H, W)."""

    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatchError(f"volume must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeMismatchError(f"volume has empty extent {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains NaN or Inf")
        vs = tuple(float(v) for v in self.voxel_size_mm)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValidationError(f"voxel size must be three positive values, got {self.voxel_size_mm}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size_mm", vs)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.voxel_size_mm)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.voxel_size_mm == other.voxel_size_mm
            and self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class DomainLabel:
    """Spatially constant one-hot label volume of shape (3, D, H, W)."""

    channels: np.ndarray
    tracer: TracerId

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels.shape[1:]  # type: ignore[return-value]


@dataclass(frozen=True)
class NormRecord:
    max_value: float

    def __post_init__(self):
        if not (np.isfinite(self.max_value) and self.max_value > 0):
            raise InvalidRecordError(f"normalization max must be positive and finite, got {self.max_value}")

    def to_dict(self) -> dict:
        return {"max_value": float(self.max_value)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NormRecord":
        try:
            return cls(float(d["max_value"]))
        except (KeyError, TypeError) as exc:
            raise InvalidRecordError(f"malformed normalization record {d!r}") from exc


@dataclass(frozen=True, eq=False)
class Study:
    """One subject's co-registered bundle of raw tracer volumes, MR and ROI masks."""

    id: str
    pet: Mapping[TracerId, Volume]
    mr: Volume
    roi_masks: Mapping[str, Volume] = field(default_factory=dict)
    norm_records: Mapping[TracerId, NormRecord] = field(default_factory=dict)

    def __post_init__(self):
        missing = [t.value for t in TRACERS if t not in self.pet]
        if missing:
            raise MissingModalityError(f"study {self.id!r} is missing tracer(s) {', '.join(missing)}")
        if self.mr is None:
            raise MissingModalityError(f"study {self.id!r} is missing the MR volume")
        ref = self.mr
        named = [(f"pet {t.value}", v) for t, v in self.pet.items()]
        named += [(f"roi {k}", v) for k, v in self.roi_masks.items()]
        for name, vol in named:
            if vol.shape != ref.shape:
                raise ShapeMismatchError(f"study {self.id!r}: {name} has shape {vol.shape}, MR has {ref.shape}")
            if not np.allclose(vol.voxel_size_mm, ref.voxel_size_mm):
                raise ShapeMismatchError(f"study {self.id!r}: {name} voxel size differs from MR")
        for name, mask in self.roi_masks.items():
            if not np.all((mask.data == 0) | (mask.data == 1)):
                raise ValidationError(f"study {self.id!r}: ROI mask {name!r} is not binary")
        if not self.norm_records:
            from ucan.data import norm_record_for

            object.__setattr__(self, "norm_records", {t: norm_record_for(self.pet[t]) for t in TRACERS})

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mr.shape

    @property
    def voxel_size_mm(self) -> tuple[float, float, float]:
        return self.mr.voxel_size_mm


@dataclass
class TrainConfig:
    """Run configuration. Serialized as a flat JSON object in each run directory."""

    alpha_clsf: float = 0.1
    alpha_adv: float = 0.1
    alpha_rec: float = 0.5
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 2
    patch_shape: tuple[int, int, int] = (64, 64, 64)
    epochs: int = 200
    steps_per_epoch: int = 0  # 0: one step per training study
    seed: int = 0
    fold_index: int = 0
    num_folds: int = 5
    # generator
    base_width: int = 16
    depth: int = 4
    se_reduction: int = 8
    res_blocks: int = 3
    fusion: str = "max"
    # discriminator
    d_base_width: int = 16
    d_use_mr: bool = False
    adv_mode: str = "non_saturating"
    # bookkeeping
    checkpoint_every: int = 10
    overlap: float = 0.5
    full_fov: bool = False
    data_dir: str | None = None
    run_dir: str | None = None

    def __post_init__(self):
        self.patch_shape = tuple(int(p) for p in self.patch_shape)  # type: ignore[assignment]
        errors = self.validation_errors()
        if errors:
            raise ConfigError(errors)

    def validation_errors(self) -> dict[str, str]:
        errors: dict[str, str] = {}
        for name in ("alpha_clsf", "alpha_adv", "alpha_rec"):
            if not getattr(self, name) >= 0:
                errors[name] = "must be >= 0"
        for name in ("lr_g", "lr_d"):
            if not getattr(self, name) > 0:
                errors[name] = "must be > 0"
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                errors[name] = "must be in [0, 1)"
        for name in ("batch_size", "base_width", "d_base_width", "se_reduction", "depth", "checkpoint_every"):
            if getattr(self, name) < 1:
                errors[name] = "must be >= 1"
        for name in ("epochs", "steps_per_epoch", "res_blocks", "fold_index"):
            if getattr(self, name) < 0:
                errors[name] = "must be >= 0"
        if len(self.patch_shape) != 3 or min(self.patch_shape) < 1:
            errors["patch_shape"] = "must be three positive integers"
        elif any(p % (2 ** self.depth) for p in self.patch_shape):
            errors["patch_shape"] = f"each extent must be divisible by 2**depth = {2 ** self.depth}"
        if self.num_folds < 2:
            errors["num_folds"] = "must be >= 2"
        elif self.fold_index >= self.num_folds:
            errors["fold_index"] = "must be < num_folds"
        if self.fusion not in ("max", "add"):
            errors["fusion"] = "must be 'max' or 'add'"
        if self.adv_mode not in ("non_saturating", "saturating"):
            errors["adv_mode"] = "must be 'non_saturating' or 'saturating'"
        if not 0 <= self.overlap < 1:
            errors["overlap"] = "must be in [0, 1)"
        return errors

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_shape"] = list(self.patch_shape)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        errors = {k: "unknown key" for k in d if k not in known}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                continue
            default = known[k].default
            try:
                if k == "patch_shape":
                    v = tuple(int(x) for x in v)
                elif isinstance(default, bool):
                    if not isinstance(v, bool):
                        raise TypeError("expected true/false")
                elif isinstance(default, int):
                    if isinstance(v, bool) or int(v) != v:
                        raise TypeError("expected an integer")
                    v = int(v)
                elif isinstance(default, float):
                    v = float(v)
                elif k in ("data_dir", "run_dir") and v is not None:
                    v = str(v)
            except (TypeError, ValueError) as exc:
                errors[k] = f"bad value {v!r}: {exc}"
                continue
            kwargs[k] = v
        # validate the well-typed fields too, so one pass reports every problem
        probe = cls()
        for k, v in kwargs.items():
            setattr(probe, k, v)
        errors.update({k: msg for k, msg in probe.validation_errors().items() if k not in errors})
        if errors:
            raise ConfigError(errors)
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError({"<file>": f"not valid JSON: {exc}"}) from None
        if not isinstance(d, dict):
            raise ConfigError({"<file>": "top level must be an object"})
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())

    def hash(self) -> str:
        """Stable digest of the settings that affect training (paths excluded)."""
        d = self.to_dict()
        for k in ("data_dir", "run_dir"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

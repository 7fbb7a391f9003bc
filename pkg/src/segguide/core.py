"""Domain types, configuration schema and deterministic seeding.

Everything here is immutable after construction and safe to share across
threads. The seeding handle is created once per run on the control thread.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np
import torch

from .errors import ConfigValidationError


class Domain(Enum):
    SKETCH = "sketch"
    COLOR = "color"
    LABELMAP = "labelmap"


class SegKind(Enum):
    MULTICLASS = "multiclass"
    BINARY = "binary"


class Variant(Enum):
    MULTICLASS = "multiclass"
    BINARY = "binary"
    COMBINED = "combined"
    BASELINE = "baseline"


class BaselineKind(Enum):
    PAIRED = "paired"
    UNPAIRED = "unpaired"


class Task(Enum):
    SKETCH2PHOTO = "s2p"
    LABEL2PHOTO = "l2p"


class OptimizerKind(Enum):
    ADAM = "adam"


class GanMode(Enum):
    CROSS_ENTROPY = "cross_entropy"
    LEAST_SQUARES = "least_squares"


DEFAULT_VALUE_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class ImageBatch:
    """A batch of images in N,C,H,W layout with a declared domain.

    Values must lie inside ``value_range`` (default [-1, 1], the output
    range of a tanh generator). COLOR batches carry 3 channels; SKETCH
    batches carry 1 channel (or 3 when replicated); LABELMAP renderings
    carry 3.
    """

    data: torch.Tensor
    domain: Domain
    value_range: tuple[float, float] = DEFAULT_VALUE_RANGE

    def __post_init__(self):
        d = self.data
        if d.ndim != 4:
            raise ValueError(f"image batch must be N,C,H,W, got shape {tuple(d.shape)}")
        n, c, h, w = d.shape
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        if self.domain == Domain.COLOR and c != 3:
            raise ValueError(f"COLOR batch needs 3 channels, got {c}")
        if self.domain == Domain.SKETCH and c not in (1, 3):
            raise ValueError(f"SKETCH batch needs 1 or 3 channels, got {c}")
        if self.domain == Domain.LABELMAP and c != 3:
            raise ValueError(f"LABELMAP batch needs 3 channels, got {c}")
        lo, hi = self.value_range
        with torch.no_grad():
            dmin = float(d.min()) if d.numel() else lo
            dmax = float(d.max()) if d.numel() else hi
        eps = 1e-5
        if dmin < lo - eps or dmax > hi + eps:
            raise ValueError(
                f"values [{dmin:.4f}, {dmax:.4f}] outside declared range [{lo}, {hi}]"
            )

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class SegmentationMap:
    """Per-pixel soft class scores, N,K,h,w, summing to 1 over K."""

    scores: torch.Tensor
    kind: SegKind
    class_count: int

    def __post_init__(self):
        s = self.scores
        if s.ndim != 4:
            raise ValueError(f"segmentation map must be N,K,h,w, got {tuple(s.shape)}")
        if s.shape[1] != self.class_count:
            raise ValueError(
                f"class_count {self.class_count} != score channels {s.shape[1]}"
            )
        if self.kind == SegKind.BINARY and self.class_count != 2:
            raise ValueError("BINARY maps carry exactly 2 channels (bg, fg)")
        with torch.no_grad():
            if s.numel():
                if float(s.min()) < -1e-6:
                    raise ValueError("scores must be non-negative")
                total = s.sum(dim=1)
                err = float((total - 1.0).abs().max())
                if err > 1e-5:
                    raise ValueError(f"per-pixel scores must sum to 1 (max err {err:.2e})")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.scores.shape[2], self.scores.shape[3]


@dataclass(frozen=True)
class ObjectiveConfig:
    """Variant selector plus the weights of the composite training objective."""

    variant: Variant = Variant.COMBINED
    w_g: float = 1.0
    w_b: float = 1.0
    w_m: float = 1.0
    baseline: BaselineKind = BaselineKind.PAIRED
    lambda_l1: float = 100.0
    lambda_cycle: float = 10.0
    gan_mode: GanMode | None = None  # None: cross-entropy for paired, least-squares for unpaired

    @staticmethod
    def for_variant(
        variant: Variant,
        baseline: BaselineKind = BaselineKind.PAIRED,
        w_g: float = 1.0,
        w_b: float = 1.0,
        w_m: float = 1.0,
        **kw,
    ) -> "ObjectiveConfig":
        """Build a config with the inactive weights zeroed for ``variant``."""
        if variant in (Variant.MULTICLASS, Variant.BASELINE):
            w_b = 0.0
        if variant in (Variant.BINARY, Variant.BASELINE):
            w_m = 0.0
        return ObjectiveConfig(variant=variant, baseline=baseline, w_g=w_g, w_b=w_b, w_m=w_m, **kw)

    def resolved_gan_mode(self) -> GanMode:
        if self.gan_mode is not None:
            return self.gan_mode
        return GanMode.CROSS_ENTROPY if self.baseline == BaselineKind.PAIRED else GanMode.LEAST_SQUARES

    def active_binary(self) -> bool:
        return self.variant in (Variant.BINARY, Variant.COMBINED) and self.w_b != 0.0

    def active_multiclass(self) -> bool:
        return self.variant in (Variant.MULTICLASS, Variant.COMBINED) and self.w_m != 0.0


@dataclass(frozen=True)
class RunConfig:
    """Training-run parameters (resolution, schedule, optimizer, seed, task)."""

    resolution: int = 256
    epochs: int = 200
    learning_rate: float = 0.0002
    optimizer: OptimizerKind = OptimizerKind.ADAM
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    task: Task = Task.SKETCH2PHOTO
    batch_size: int = 1
    lr_decay: bool = False  # linear decay over second half of training
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only


@dataclass(frozen=True)
class DataConfig:
    dataset_dir: str = ""
    extractor: str = "stub"  # feature extractor for FID: stub | pretrained
    segbackend: str = "stub"  # segmentation backend: stub | pretrained
    cache_dir: str = ""  # empty: resolved from env / output dir
    segbackend_weights: str = ""
    extractor_weights: str = ""


@dataclass(frozen=True)
class NetworkConfig:
    gen_arch: str = "resnet_blocks"  # resnet_blocks | unet
    gen_base_width: int = 64
    gen_depth: int = 6  # residual blocks (resnet) or down/up levels (unet)
    disc_base_width: int = 64
    disc_layers: int = 3
    patch_output: bool = True
    seg_class_count: int = 6
    seg_foreground_ids: str = "1,2,3,4,5"  # comma-separated class indices

    def foreground_ids(self) -> frozenset[int]:
        parts = [p for p in self.seg_foreground_ids.replace(" ", "").split(",") if p]
        return frozenset(int(p) for p in parts)


@dataclass(frozen=True)
class FrameworkConfig:
    """The full resolved configuration, mirrored by the config file sections."""

    run: RunConfig = RunConfig()
    objective: ObjectiveConfig = ObjectiveConfig()
    data: DataConfig = DataConfig()
    networks: NetworkConfig = NetworkConfig()


def config_violations(objective: ObjectiveConfig, run: RunConfig) -> list[str]:
    """Return every violated invariant, empty when the configs are valid."""
    out: list[str] = []
    v = objective.variant
    if v == Variant.MULTICLASS and objective.w_b != 0.0:
        out.append(f"VariantWeightConflict: MULTICLASS requires w_b == 0, got {objective.w_b}")
    if v == Variant.BINARY and objective.w_m != 0.0:
        out.append(f"VariantWeightConflict: BINARY requires w_m == 0, got {objective.w_m}")
    if v == Variant.BASELINE and (objective.w_b != 0.0 or objective.w_m != 0.0):
        out.append(
            "VariantWeightConflict: BASELINE requires w_b == w_m == 0, "
            f"got w_b={objective.w_b}, w_m={objective.w_m}"
        )
    for name, w in (("w_g", objective.w_g), ("w_b", objective.w_b), ("w_m", objective.w_m)):
        if w < 0:
            out.append(f"NegativeWeight: {name} = {w}")
    if run.learning_rate <= 0:
        out.append(f"NonPositiveLearningRate: {run.learning_rate}")
    if run.resolution <= 0 or run.resolution % 4 != 0:
        out.append(
            f"BadResolution: {run.resolution} (must be positive and divisible by 4)"
        )
    if run.epochs <= 0:
        out.append(f"NonPositiveEpochs: {run.epochs}")
    if run.batch_size <= 0:
        out.append(f"NonPositiveBatchSize: {run.batch_size}")
    return out


def validate_config(objective: ObjectiveConfig, run: RunConfig) -> tuple[ObjectiveConfig, RunConfig]:
    """Validate the pair of configs, raising with every violation listed."""
    violations = config_violations(objective, run)
    if violations:
        raise ConfigValidationError(violations)
    return objective, run


# ---------------------------------------------------------------------------
# Deterministic seeding
# ---------------------------------------------------------------------------


def _derive_seed(seed: int, name: str) -> int:
    h = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(h[:8], "little")


class SeedHandle:
    """Named deterministic RNG streams derived from one root seed.

    Two handles with equal seeds produce bitwise-equal streams. Streams are
    independent per name, so e.g. generator initialisation is unaffected by
    whether a segmentation discriminator is also built.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._torch: dict[str, torch.Generator] = {}
        self._numpy: dict[str, np.random.Generator] = {}

    def torch_generator(self, name: str) -> torch.Generator:
        g = self._torch.get(name)
        if g is None:
            g = torch.Generator()
            g.manual_seed(_derive_seed(self.seed, name))
            self._torch[name] = g
        return g

    def numpy_rng(self, name: str) -> np.random.Generator:
        rng = self._numpy.get(name)
        if rng is None:
            rng = np.random.default_rng(_derive_seed(self.seed, name))
            self._numpy[name] = rng
        return rng

    def torch_states(self) -> dict[str, bytes]:
        return {name: bytes(g.get_state().numpy().tobytes()) for name, g in self._torch.items()}

    def restore_torch_states(self, states: Mapping[str, bytes]) -> None:
        for name, raw in states.items():
            g = self.torch_generator(name)
            state = torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy())
            g.set_state(state)


def seed_all(seed: int) -> SeedHandle:
    """Seed the global RNGs and return a handle of named derived streams."""
    import random

    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return SeedHandle(seed)


# ---------------------------------------------------------------------------
# Config file serialization: flat key/value with fixed sections.
# The writer is canonical, so serialize -> parse -> serialize is byte-identical.
# ---------------------------------------------------------------------------

_SECTION_FIELDS = {
    "run": RunConfig,
    "objective": ObjectiveConfig,
    "data": DataConfig,
    "networks": NetworkConfig,
}


def _format_value(value) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def _parse_value(text: str, ftype):
    if ftype is bool:
        if text not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text == "true"
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is str:
        return text
    if isinstance(ftype, type) and issubclass(ftype, Enum):
        return ftype(text)
    raise TypeError(f"unsupported config field type {ftype}")


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type
        if isinstance(t, str):
            # "GanMode | None" style annotations
            t = t.replace(" ", "")
            if t.endswith("|None"):
                t = t[: -len("|None")]
            t = {
                "int": int,
                "float": float,
                "str": str,
                "bool": bool,
                "Variant": Variant,
                "BaselineKind": BaselineKind,
                "Task": Task,
                "OptimizerKind": OptimizerKind,
                "GanMode": GanMode,
            }[t]
        out[f.name] = t
    return out


def serialize_config(cfg: FrameworkConfig) -> str:
    lines: list[str] = []
    for section, cls in _SECTION_FIELDS.items():
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(cls):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str) -> FrameworkConfig:
    section = None
    collected: dict[str, dict[str, str]] = {name: {} for name in _SECTION_FIELDS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section not in _SECTION_FIELDS:
                raise ConfigValidationError([f"UnknownSection: [{section}] (line {lineno})"])
            continue
        if "=" not in line:
            raise ConfigValidationError([f"BadLine: {raw!r} (line {lineno})"])
        if section is None:
            raise ConfigValidationError([f"KeyOutsideSection: {raw!r} (line {lineno})"])
        key, _, value = line.partition("=")
        collected[section][key.strip()] = value.strip()
    return build_config(collected)


def build_config(values: Mapping[str, Mapping[str, str]]) -> FrameworkConfig:
    """Build a FrameworkConfig from nested string maps; unknown keys are errors."""
    kwargs = {}
    problems: list[str] = []
    for section, cls in _SECTION_FIELDS.items():
        types = _field_types(cls)
        fields = {}
        for key, raw in values.get(section, {}).items():
            if key not in types:
                problems.append(f"UnknownKey: [{section}] {key}")
                continue
            if raw == "" and types[key] not in (str,):
                continue  # empty means "keep default" for non-string fields
            try:
                fields[key] = _parse_value(raw, types[key])
            except (ValueError, KeyError) as exc:
                problems.append(f"BadValue: [{section}] {key} = {raw!r} ({exc})")
        if problems:
            continue
        kwargs[section] = cls(**fields)
    if problems:
        raise ConfigValidationError(problems)
    return FrameworkConfig(**kwargs)


def merge_overrides(cfg: FrameworkConfig, overrides: Mapping[str, Mapping[str, object]]) -> FrameworkConfig:
    """Return a copy of ``cfg`` with per-section field overrides applied."""
    parts = {}
    for section in _SECTION_FIELDS:
        obj = getattr(cfg, section)
        changes = {k: v for k, v in overrides.get(section, {}).items() if v is not None}
        parts[section] = dataclasses.replace(obj, **changes) if changes else obj
    return FrameworkConfig(**parts)

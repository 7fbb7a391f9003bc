"""Quantitative evaluation: FID between image sets and mIoU of segmented
colorizations, plus the report rows comparing baselines and variants.

The feature extractor behind FID is pluggable. The deterministic stub
(fixed random projection + tanh) makes the whole FID pipeline testable with
no pretrained asset; numbers comparable to the literature require the
standard pretrained extractor loaded from a weight file.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import Domain, ImageBatch, Task
from .datapipe import DatasetManifest, load_image, load_mask
from .errors import (
    ExtractorMismatchError,
    MissingWeightsError,
    NumericalFailureError,
    ShapeMismatchError,
)
from .networks import CheckpointReader
from .segbackend import SegBackend, segment_multiclass
from .training import colorize


# ---------------------------------------------------------------------------
# Gaussian feature statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureStats:
    """Mean/covariance summary of one feature set (unbiased covariance)."""

    mean: np.ndarray
    cov: np.ndarray
    n: int
    extractor_id: str

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("feature statistics need n >= 2 samples")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ShapeMismatchError("covariance shape does not match mean dimension")
        asym = float(np.abs(self.cov - self.cov.T).max())
        if asym > 1e-6:
            raise ValueError(f"covariance must be symmetric (max asymmetry {asym:.2e})")

    @staticmethod
    def from_features(features: np.ndarray, extractor_id: str) -> "FeatureStats":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise ShapeMismatchError("features must be n x d")
        mean = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        cov = (cov + cov.T) / 2.0
        return FeatureStats(mean=mean, cov=cov, n=feats.shape[0], extractor_id=extractor_id)

    def pool(self, other: "FeatureStats") -> "FeatureStats":
        """Exact combination of statistics from two disjoint sample sets."""
        if self.extractor_id != other.extractor_id:
            raise ExtractorMismatchError("cannot pool stats from different extractors")
        n1, n2 = self.n, other.n
        n = n1 + n2
        mean = (n1 * self.mean + n2 * other.mean) / n
        d = (self.mean - other.mean)[:, None]
        cov = ((n1 - 1) * self.cov + (n2 - 1) * other.cov + (n1 * n2 / n) * (d @ d.T)) / (n - 1)
        return FeatureStats(mean=mean, cov=(cov + cov.T) / 2.0, n=n, extractor_id=self.extractor_id)


def _sqrtm_psd(matrix: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if float(vals.min(initial=0.0)) < -1e-6 * scale:
        raise NumericalFailureError(f"{what} has eigenvalue below clamping tolerance")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The product square root is evaluated through the symmetric form
    sqrt(S_a)^T S_b sqrt(S_a), whose eigenvalues equal those of S_a S_b,
    with negative eigenvalues clamped at the -1e-6 tolerance. The result is
    reported clamped to >= 0.
    """
    if a.extractor_id != b.extractor_id:
        raise ExtractorMismatchError(
            f"stats come from different extractors: {a.extractor_id!r} vs {b.extractor_id!r}"
        )
    if a.mean.shape != b.mean.shape:
        raise ShapeMismatchError("feature dimensions differ")
    root_a = _sqrtm_psd(a.cov, "covariance")
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if float(vals.min(initial=0.0)) < -1e-6 * scale:
        raise NumericalFailureError("covariance product has eigenvalue below tolerance")
    tr_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class StubFeatureExtractor:
    """Deterministic stand-in: average-pool to 16x16, random-project, tanh."""

    def __init__(self, dim: int = 64, seed: int = 0, pool_to: int = 16):
        rng = np.random.default_rng(seed)
        flat = pool_to * pool_to * 3
        self.pool_to = pool_to
        self.weight = torch.from_numpy(
            (rng.standard_normal((flat, dim)) / np.sqrt(flat)).astype(np.float32)
        )
        self.bias = torch.from_numpy((0.1 * rng.standard_normal(dim)).astype(np.float32))
        self.extractor_id = f"stub-rp-d{dim}-p{pool_to}-s{seed}"

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            x = images.to(torch.float32)
            x = F.adaptive_avg_pool2d(x, self.pool_to)
            flat = x.reshape(x.shape[0], -1)
            feats = torch.tanh(flat @ self.weight + self.bias)
        return feats.numpy().astype(np.float64)


class PretrainedFeatureExtractor:
    """Inception-style extractor loaded from a weight file."""

    def __init__(self, weights_path: str | Path):
        path = Path(weights_path) if weights_path else None
        if path is None or not path.is_file():
            raise MissingWeightsError(f"feature extractor weights not found: {weights_path!r}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        from torch import nn

        width, dim = int(blob.get("width", 32)), int(blob["dim"])
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.ReLU(True),
            nn.Conv2d(width, width * 2, 3, 2, 1), nn.ReLU(True),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(width * 2, dim),
        )
        self.net.load_state_dict(blob["state"])
        self.net.eval()
        self.extractor_id = f"pretrained-{hashlib.sha256(path.read_bytes()).hexdigest()[:12]}"

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return self.net(images.to(torch.float32)).numpy().astype(np.float64)


_STATS_CACHE: dict[tuple[str, str], FeatureStats] = {}


def _set_checksum(images: torch.Tensor) -> str:
    return hashlib.sha256(images.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def feature_stats(images: torch.Tensor, extractor) -> FeatureStats:
    key = (_set_checksum(images), extractor.extractor_id)
    hit = _STATS_CACHE.get(key)
    if hit is None:
        hit = FeatureStats.from_features(extractor(images), extractor.extractor_id)
        _STATS_CACHE[key] = hit
    return hit


def fid(real_images: torch.Tensor | ImageBatch, fake_images: torch.Tensor | ImageBatch,
        extractor) -> float:
    """Frechet distance between Gaussian fits of the two sets' features."""
    real = real_images.data if isinstance(real_images, ImageBatch) else real_images
    fake = fake_images.data if isinstance(fake_images, ImageBatch) else fake_images
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("fid needs non-empty image sets")
    return frechet_distance(feature_stats(real, extractor), feature_stats(fake, extractor))


# ---------------------------------------------------------------------------
# mIoU
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """K x K pixel counts, rows = ground truth, cols = prediction."""

    counts: np.ndarray

    @staticmethod
    def empty(class_count: int) -> "ConfusionMatrix":
        return ConfusionMatrix(np.zeros((class_count, class_count), dtype=np.int64))

    @staticmethod
    def from_labels(gt: np.ndarray, pred: np.ndarray, class_count: int) -> "ConfusionMatrix":
        if gt.shape != pred.shape:
            raise ShapeMismatchError(f"label shapes differ: {gt.shape} vs {pred.shape}")
        gt = gt.astype(np.int64).ravel()
        pred = pred.astype(np.int64).ravel()
        if gt.min(initial=0) < 0 or (gt.size and gt.max() >= class_count):
            raise ValueError("ground-truth labels out of range")
        if pred.min(initial=0) < 0 or (pred.size and pred.max() >= class_count):
            raise ValueError("predicted labels out of range")
        flat = np.bincount(gt * class_count + pred, minlength=class_count * class_count)
        return ConfusionMatrix(flat.reshape(class_count, class_count))

    def add(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(pred_maps: np.ndarray, gt_maps: np.ndarray, class_count: int) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean over classes present in pred or gt.

    IoU_k = TP_k / (TP_k + FP_k + FN_k). Classes absent from both prediction
    and ground truth get NaN and are excluded from the mean.
    """
    cm = ConfusionMatrix.from_labels(np.asarray(gt_maps), np.asarray(pred_maps), class_count)
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(class_count, np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return iou, mean


# ---------------------------------------------------------------------------
# Whole-run evaluation
# ---------------------------------------------------------------------------

REPORT_HEADER = "dataset,task,baseline,variant,fid,miou,oracle_miou,n_images,extractor_id"


@dataclass
class MetricRow:
    dataset: str
    task: str
    baseline: str
    variant: str
    fid: float
    miou: float | None
    oracle_miou: float | None
    n_images: int
    extractor_id: str

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return (
            f"{self.dataset},{self.task},{self.baseline},{self.variant},"
            f"{fmt(self.fid)},{fmt(self.miou)},{fmt(self.oracle_miou)},"
            f"{self.n_images},{self.extractor_id}"
        )


@dataclass
class MetricReport:
    rows: list[MetricRow]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [REPORT_HEADER] + [r.to_csv() for r in self.rows]
        path.write_text("\n".join(lines) + "\n")
        return path


def load_split(manifest: DatasetManifest, root: str | Path, split: str,
               resolution: int) -> tuple[ImageBatch, ImageBatch, list[str]]:
    """Load one split's (source, color) images in listed order."""
    root = Path(root)
    files_a = manifest.files(f"{split}_a")
    files_b = manifest.files(f"{split}_b")
    channels = 1 if manifest.task == Task.SKETCH2PHOTO else 3
    xs = torch.stack([load_image(root / rel, resolution, channels) for rel in files_a])
    ys = torch.stack([load_image(root / rel, resolution, 3) for rel in files_b])
    domain = Domain.SKETCH if manifest.task == Task.SKETCH2PHOTO else Domain.LABELMAP
    stems = [Path(rel).stem for rel in files_b]
    return ImageBatch(data=xs, domain=domain), ImageBatch(data=ys, domain=Domain.COLOR), stems


def load_masks(manifest: DatasetManifest, root: str | Path, split: str,
               resolution: int) -> np.ndarray | None:
    root = Path(root)
    masks = []
    for rel in manifest.files(f"{split}_b"):
        mask_path = (root / rel).with_suffix(".mask")
        if not mask_path.is_file():
            return None
        masks.append(load_mask(mask_path, resolution))
    return np.stack(masks) if masks else None


def segment_labels(backend: SegBackend, images: ImageBatch) -> np.ndarray:
    with torch.no_grad():
        seg = segment_multiclass(backend, images)
    return seg.scores.argmax(dim=1).numpy()


def evaluate_run(
    checkpoint: str | Path,
    manifest: DatasetManifest,
    data_root: str | Path,
    extractor,
    eval_backend: SegBackend | None = None,
    metrics: Sequence[str] = ("fid", "miou"),
) -> tuple[MetricRow, ImageBatch]:
    """Colorize the test split and compute the selected metrics.

    Returns the report row plus the generated images (so callers can render
    side-by-side grids without re-running the generator).
    """
    reader = CheckpointReader(checkpoint)
    cfg = reader.config()
    sources, reals, _stems = load_split(manifest, data_root, "test", cfg.run.resolution)
    fakes = colorize(reader, sources)

    fid_value = float("nan")
    if "fid" in metrics:
        fid_value = fid(reals, fakes, extractor)

    miou_value = oracle_value = None
    if "miou" in metrics and eval_backend is not None:
        gt = load_masks(manifest, data_root, "test", cfg.run.resolution)
        if gt is not None:
            _, miou_value = miou(segment_labels(eval_backend, fakes), gt, eval_backend.class_count)
            _, oracle_value = miou(segment_labels(eval_backend, reals), gt, eval_backend.class_count)

    row = MetricRow(
        dataset=manifest.name,
        task=cfg.run.task.value,
        baseline=cfg.objective.baseline.value,
        variant=cfg.objective.variant.value,
        fid=fid_value,
        miou=miou_value,
        oracle_miou=oracle_value,
        n_images=fakes.size,
        extractor_id=extractor.extractor_id,
    )
    return row, fakes
